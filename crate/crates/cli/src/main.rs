use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use tnmps::checkpoint::Checkpoint;
use tnmps::config::{parse_override, ConfigFile};
use tnmps::factored::{factorize_core, FactoredCore, FactoredMps, PositionKind};
use tnmps::motzkin::{
    build_dataset, mi_csv, mi_distance_csv, mutual_information, mutual_information_by_distance, parse_dataset, Chain,
};
use tnmps::tensor::Rng;
use tnmps::train::{
    evaluate, metrics_csv, perplexity, predefined_grid, sweep, sweep_csv, sweep_summary, train_with, EvalSet, Model,
    SweepGrid, TrainConfig, MAX_PERPLEXITY_LEN,
};

#[derive(Parser)]
#[command(name = "tnmps", version, about = "Dense and factored-core MPS experiments on Motzkin chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled training dataset and a provenance sidecar.
    Data {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.25)]
        train_fraction: f64,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write metrics, checkpoint and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set epochs=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Record the current time in the checkpoint instead of 0.
        #[arg(long)]
        stamp: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and print metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Chain length; defaults to the model's.
        #[arg(long)]
        n: Option<usize>,
        /// Seed for the negative sample; defaults to the checkpoint's.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset whose positive chains give sigma_t.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also compute perplexity (tensor models, short chains).
        #[arg(long)]
        perplexity: bool,
    },
    /// Train every cell of a grid for every seed.
    Sweep {
        #[arg(long, conflicts_with = "preset")]
        grid: Option<PathBuf>,
        /// One of: mu, alpha, batch, chi, init_variance, norm, factored_chi, mlp_arch.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, env = "TN_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Exact pairwise mutual information of the uniform valid-chain distribution.
    Mi {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pool all pairs at each separation instead of listing pairs.
        #[arg(long)]
        by_distance: bool,
    },
    /// Split every core of a dense checkpoint into subcores.
    Factorize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        chi_h: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        chi_v: usize,
        #[arg(long, default_value_t = 0.001)]
        fill_lo: f64,
        #[arg(long, default_value_t = 0.01)]
        fill_hi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("error: {line}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Data {
            n,
            train_fraction,
            mu,
            seed,
            out,
        } => cmd_data(n, train_fraction, mu, seed, &out),
        Command::Train {
            config,
            overrides,
            out_dir,
            stamp,
            quiet,
        } => cmd_train(config.as_deref(), &overrides, &out_dir, stamp, quiet),
        Command::Eval {
            checkpoint,
            n,
            seed,
            dataset,
            perplexity,
        } => cmd_eval(&checkpoint, n, seed, dataset.as_deref(), perplexity),
        Command::Sweep {
            grid,
            preset,
            seeds,
            overrides,
            out_dir,
            jobs,
        } => cmd_sweep(grid.as_deref(), preset.as_deref(), &seeds, &overrides, &out_dir, jobs),
        Command::Mi { n, out, by_distance } => {
            let text = if by_distance {
                mi_distance_csv(&mutual_information_by_distance(n)?)
            } else {
                mi_csv(&mutual_information(n)?)
            };
            write_or_print(out.as_deref(), &text)
        }
        Command::Factorize {
            checkpoint,
            chi_h,
            height,
            chi_v,
            fill_lo,
            fill_hi,
            seed,
            report,
            out,
        } => cmd_factorize(&checkpoint, chi_h, height, chi_v, (fill_lo, fill_hi), seed, &report, out.as_deref()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn cmd_data(n: usize, train_fraction: f64, mu: f64, seed: u64, out: &Path) -> Result<()> {
    let ds = build_dataset(n, train_fraction, mu, seed)?;
    write(out, ds.to_text())?;
    let prov = json!({
        "n": n,
        "train_fraction": train_fraction,
        "mu": mu,
        "seed": seed,
        "total": ds.len(),
        "valid": ds.valid_count(),
        "invalid": ds.len() - ds.valid_count(),
    });
    write(&sidecar(out), serde_json::to_string_pretty(&prov)? + "\n")?;
    eprintln!("wrote {} chains to {}", ds.len(), out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            ConfigFile::parse(&text).with_context(|| format!("in {}", p.display()))
        }
        None => Ok(ConfigFile::default()),
    }
}

fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = parse_override(o)?;
        cfg.set(&k, &v).with_context(|| format!("--set {o}"))?;
    }
    Ok(())
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
}

fn cmd_train(config: Option<&Path>, overrides: &[String], out_dir: &Path, stamp: bool, quiet: bool) -> Result<()> {
    let file = load_config(config)?;
    let mut cfg = TrainConfig::from_config(&file).with_context(|| match config {
        Some(p) => format!("in {}", p.display()),
        None => "defaults".into(),
    })?;
    apply_overrides(&mut cfg, overrides)?;
    cfg.validate()?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write(&out_dir.join("config.txt"), cfg.to_text())?;

    let out = train_with(&cfg, None, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  loss {:.6}  sigma_t {}  sigma_v {}  auc {:.6}",
                r.epoch,
                r.train_loss,
                fmt_opt(r.sigma_t),
                fmt_opt(r.sigma_v),
                r.auc
            );
        }
    })?;
    write(&out_dir.join("metrics.csv"), metrics_csv(&out.records))?;
    let ck = Checkpoint {
        model: out.model,
        seed: cfg.seed,
        created: if stamp { now_secs() } else { 0 },
        config: cfg.to_pairs(),
    };
    write(&out_dir.join("model.ckpt"), ck.encode())?;
    Ok(())
}

fn cmd_eval(path: &Path, n: Option<usize>, seed: Option<u64>, dataset: Option<&Path>, want_pp: bool) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let n = n.unwrap_or(ck.model.n());
    if n != ck.model.n() {
        bail!("checkpoint has length {}, asked for {n}", ck.model.n());
    }
    let seed = seed.unwrap_or(ck.seed);
    let positives: Vec<Chain> = match dataset {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_dataset(&text)
                .with_context(|| format!("in {}", p.display()))?
                .into_iter()
                .filter(|(c, label)| label.map_or(c.is_valid(), |l| l == 1))
                .map(|(c, _)| c)
                .collect()
        }
        None => Vec::new(),
    };
    let eval = EvalSet::build(n, seed)?;
    let m = evaluate(&ck.model, &positives, &eval)?;
    let pp = if want_pp {
        if n > MAX_PERPLEXITY_LEN {
            bail!("perplexity needs n <= {MAX_PERPLEXITY_LEN}");
        }
        match &ck.model {
            Model::Dense(d) => Some(perplexity(d)?),
            Model::Factored(f) => Some(perplexity(&f.to_dense()?)?),
            Model::Mlp(_) => bail!("perplexity is defined for tensor models only"),
        }
    } else {
        None
    };
    let out = json!({
        "model_kind": ck.model.kind().as_str(),
        "n": n,
        "seed": seed,
        "sigma_t": if dataset.is_some() { m.sigma_t } else { None },
        "sigma_v": m.sigma_v,
        "auc": m.auc,
        "perplexity": pp,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_sweep(
    grid: Option<&Path>,
    preset: Option<&str>,
    seeds: &[u64],
    overrides: &[String],
    out_dir: &Path,
    jobs: usize,
) -> Result<()> {
    let mut g = match (grid, preset) {
        (Some(p), _) => {
            let file = load_config(Some(p))?;
            SweepGrid::from_config(&file).with_context(|| format!("in {}", p.display()))?
        }
        (None, Some(name)) => SweepGrid {
            base: TrainConfig::default(),
            axes: predefined_grid(name).with_context(|| format!("unknown preset {name:?}"))?,
        },
        (None, None) => bail!("either --grid or --preset is required"),
    };
    apply_overrides(&mut g.base, overrides)?;
    let cells = sweep(&g, seeds, jobs)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write(&out_dir.join("runs.csv"), sweep_csv(&cells))?;
    let summary = sweep_summary(&cells);
    write(&out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{:<48} {:>10} {:>10} {:>10} {:>6}", "cell", "auc", "sd", "sigma_v", "failed");
    for c in &cells {
        let s = c.summary();
        let failed = c.runs.iter().filter(|r| r.error.is_some()).count();
        println!(
            "{:<48} {:>10} {:>10} {:>10} {:>6}",
            c.key,
            fmt_opt(s.mean),
            fmt_opt(s.sd),
            fmt_opt(s.sigma_v.map(|m| m.mean)),
            failed
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_factorize(
    path: &Path,
    chi_h: usize,
    height: usize,
    chi_v: usize,
    (fill_lo, fill_hi): (f64, f64),
    seed: u64,
    report: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let Model::Dense(dense) = &ck.model else {
        bail!("factorize needs a dense checkpoint");
    };
    let bond = chi_h.checked_pow(height as u32).context("chi_h^height overflows")?;
    if bond != dense.chi() {
        bail!("chi_h^height = {bond} but the dense bond dimension is {}", dense.chi());
    }
    let mut rng = Rng::derived(seed, "factorize");
    let mut cores = Vec::with_capacity(dense.n());
    let mut sites = Vec::with_capacity(dense.n());
    let mut total_sq = 0.0;
    for (i, core) in dense.cores().iter().enumerate() {
        let kind = PositionKind::of_site(i, dense.n());
        let f = factorize_core(core, kind, chi_h, height, chi_v, fill_lo, fill_hi, &mut rng)?;
        let fc = FactoredCore::new(kind, false, dense.v(), chi_h, chi_v, f.subcores)?;
        let err = fc.contract_vertical()?.sub(core)?.frobenius_norm();
        total_sq += err * err;
        let splits: Vec<_> = f
            .splits
            .iter()
            .map(|s| {
                json!({
                    "layer": s.layer,
                    "rows": s.rows,
                    "cols": s.cols,
                    "singular_values": s.singular_values,
                    "kept": s.kept,
                    "appended": s.appended,
                    "truncation_error": s.truncation_error,
                })
            })
            .collect();
        sites.push(json!({ "site": i, "splits": splits, "round_trip_error": err }));
        cores.push(fc);
    }
    let factored = FactoredMps::new(cores)?;
    let doc = json!({
        "chi_h": chi_h,
        "height": height,
        "chi_v": chi_v,
        "param_count": factored.param_count(),
        "round_trip_error": total_sq.sqrt(),
        "sites": sites,
    });
    write(report, serde_json::to_string_pretty(&doc)? + "\n")?;
    if let Some(out) = out {
        let ck_out = Checkpoint {
            model: Model::Factored(factored),
            seed: ck.seed,
            created: ck.created,
            config: ck.config.clone(),
        };
        write(out, ck_out.encode())?;
    }
    eprintln!("round-trip Frobenius error {:.3e}", total_sq.sqrt());
    Ok(())
}
