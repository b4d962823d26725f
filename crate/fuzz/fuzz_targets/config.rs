#![no_main]

use libfuzzer_sys::fuzz_target;
use tnmps::config::ConfigFile;
use tnmps::train::{SweepGrid, TrainConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(file) = ConfigFile::parse(text) else { return };
    let again = ConfigFile::parse(&file.to_text()).expect("rendered config parses");
    assert_eq!(again.entries.len(), file.entries.len());
    if let Ok(cfg) = TrainConfig::from_config(&file) {
        let _ = cfg.validate();
    }
    if let Ok(grid) = SweepGrid::from_config(&file) {
        // cell count is a product of axis lengths; keep it small
        if grid.axes.iter().map(|(_, v)| v.len()).product::<usize>() <= 4096 {
            let _ = grid.cells();
        }
    }
});
