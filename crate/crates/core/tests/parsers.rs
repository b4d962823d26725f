//! Parser robustness: replay the fuzz corpus and throw arbitrary and mutated
//! inputs at every decoder.

use std::path::{Path, PathBuf};

use proptest::prelude::*;
use tnmps::checkpoint::Checkpoint;
use tnmps::config::ConfigFile;
use tnmps::motzkin::{decode_chain, encode_chain, parse_dataset};
use tnmps::train::{SweepGrid, TrainConfig};

fn chain_text(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(chain) = encode_chain(text, text.chars().count()) {
        assert_eq!(decode_chain(&chain), text);
    }
}

fn dataset(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(lines) = parse_dataset(text) {
        let n = lines.first().map(|(c, _)| c.len());
        assert!(lines.iter().all(|(c, l)| Some(c.len()) == n && l.is_none_or(|l| l <= 1)));
    }
}

fn config(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(file) = ConfigFile::parse(text) else { return };
    let again = ConfigFile::parse(&file.to_text()).expect("rendered config parses");
    assert_eq!(again.entries.len(), file.entries.len());
    if let Ok(cfg) = TrainConfig::from_config(&file) {
        let _ = cfg.validate();
    }
    if let Ok(grid) = SweepGrid::from_config(&file) {
        if grid.axes.iter().map(|(_, v)| v.len()).product::<usize>() <= 4096 {
            let _ = grid.cells();
        }
    }
}

fn checkpoint(data: &[u8]) {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(back.encode(), bytes);
    }
}

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus for {target}");
    out
}

#[test]
fn corpus_replays_cleanly() {
    let targets: [(&str, fn(&[u8])); 4] =
        [("chain_text", chain_text), ("dataset", dataset), ("config", config), ("checkpoint", checkpoint)];
    for (name, f) in targets {
        for (_, bytes) in corpus(name) {
            f(&bytes);
        }
    }
}

#[test]
fn corpus_checkpoints_decode() {
    let decoded = corpus("checkpoint")
        .into_iter()
        .filter(|(_, b)| Checkpoint::decode(b).is_ok())
        .count();
    assert_eq!(decoded, 4);
}

fn mutated(seed: Vec<u8>) -> impl Strategy<Value = Vec<u8>> {
    let len = seed.len().max(1);
    proptest::collection::vec((0..len, any::<u8>(), 0u8..4), 1..8).prop_map(move |edits| {
        let mut b = seed.clone();
        for (pos, byte, op) in edits {
            let pos = pos.min(b.len());
            match op {
                0 if pos < b.len() => b[pos] = byte,
                1 => b.insert(pos, byte),
                2 if pos < b.len() => {
                    b.remove(pos);
                }
                _ => b.truncate(pos),
            }
        }
        b
    })
}

fn seeds(target: &str) -> impl Strategy<Value = Vec<u8>> {
    let all: Vec<Vec<u8>> = corpus(target).into_iter().map(|(_, b)| b).collect();
    proptest::sample::select(all).prop_flat_map(mutated)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn arbitrary_bytes(data in proptest::collection::vec(any::<u8>(), 0..256)) {
        chain_text(&data);
        dataset(&data);
        config(&data);
        checkpoint(&data);
    }

    #[test]
    fn mutated_chain_text(data in seeds("chain_text")) {
        chain_text(&data);
    }

    #[test]
    fn mutated_dataset(data in seeds("dataset")) {
        dataset(&data);
    }

    #[test]
    fn mutated_config(data in seeds("config")) {
        config(&data);
    }

    #[test]
    fn mutated_checkpoint(data in seeds("checkpoint")) {
        checkpoint(&data);
    }
}
