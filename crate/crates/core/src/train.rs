//! SGD training, evaluation metrics and sweeps.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::MlpModel;
use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::factored::{FactoredConfig, FactoredInit, FactoredMps};
use crate::motzkin::{build_dataset, enumerate_invalid, enumerate_valid, sample_invalid, Chain, LabeledDataset};
use crate::mps::{index_to_codes, DenseMps, NormMode};
use crate::tensor::{Rng, Tensor};

/// Largest `n` for exhaustive entropy.
pub const MAX_PERPLEXITY_LEN: usize = 12;
/// Up to this length AUC negatives are every invalid chain.
pub const EXHAUSTIVE_NEGATIVES_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dense,
    Factored,
    Skip,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dense => "dense",
            ModelKind::Factored => "factored",
            ModelKind::Skip => "skip",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dense" => Some(ModelKind::Dense),
            "factored" => Some(ModelKind::Factored),
            "skip" => Some(ModelKind::Skip),
            "mlp" => Some(ModelKind::Mlp),
            _ => None,
        }
    }

    pub fn is_tensor(self) -> bool {
        self != ModelKind::Mlp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub n: usize,
    pub v: usize,
    pub chi: usize,
    /// Factored dimensions; `None` takes the per-kind default.
    pub chi_h: Option<usize>,
    pub height: Option<usize>,
    pub chi_v: Option<usize>,
    pub sigma_inner: f64,
    pub sigma_outer: f64,
    pub uniform_init: bool,
    pub fill_lo: f64,
    pub fill_hi: f64,
    pub d_e: usize,
    pub d_h: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub norm_mode: NormMode,
    pub mu: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Dense,
            n: 16,
            v: 3,
            chi: 8,
            chi_h: None,
            height: None,
            chi_v: None,
            sigma_inner: 0.01,
            sigma_outer: 0.01,
            uniform_init: false,
            fill_lo: 0.001,
            fill_hi: 0.01,
            d_e: 16,
            d_h: 256,
            learning_rate: 0.05,
            epochs: 50,
            batch_size: 32,
            alpha: 0.0,
            norm_mode: NormMode::Exact,
            mu: 1.0,
            train_fraction: 0.25,
            seed: 0,
            eval_every: 10,
            timing: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::arg(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::arg(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model",
        "n",
        "v",
        "chi",
        "chi_h",
        "height",
        "chi_v",
        "sigma_inner",
        "sigma_outer",
        "uniform_init",
        "fill_lo",
        "fill_hi",
        "d_e",
        "d_h",
        "learning_rate",
        "epochs",
        "batch_size",
        "alpha",
        "norm_mode",
        "mu",
        "train_fraction",
        "seed",
        "eval_every",
        "timing",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => {
                self.model = ModelKind::parse(value)
                    .ok_or_else(|| Error::arg(format!("model: unknown kind {value:?}")))?
            }
            "n" => self.n = parse_num(key, value)?,
            "v" => self.v = parse_num(key, value)?,
            "chi" => self.chi = parse_num(key, value)?,
            "chi_h" => self.chi_h = Some(parse_num(key, value)?),
            "height" => self.height = Some(parse_num(key, value)?),
            "chi_v" => self.chi_v = Some(parse_num(key, value)?),
            "sigma_inner" => self.sigma_inner = parse_num(key, value)?,
            "sigma_outer" => self.sigma_outer = parse_num(key, value)?,
            "uniform_init" => self.uniform_init = parse_bool(key, value)?,
            "fill_lo" => self.fill_lo = parse_num(key, value)?,
            "fill_hi" => self.fill_hi = parse_num(key, value)?,
            "d_e" => self.d_e = parse_num(key, value)?,
            "d_h" => self.d_h = parse_num(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "norm_mode" => {
                self.norm_mode = NormMode::parse(value)
                    .ok_or_else(|| Error::arg(format!("norm_mode: unknown mode {value:?}")))?
            }
            "mu" => self.mu = parse_num(key, value)?,
            "train_fraction" => self.train_fraction = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "timing" => self.timing = parse_bool(key, value)?,
            _ => return Err(Error::arg(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply every entry of a parsed config file. Section names are only
    /// grouping; keys are global.
    pub fn from_config(file: &ConfigFile) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for e in &file.entries {
            cfg.set(&e.key, &e.value).map_err(|err| Error::Parse {
                line: e.line,
                msg: err.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn factored_dims(&self) -> (usize, usize, usize) {
        let (h, ch, cv) = match self.model {
            ModelKind::Skip => (3, 2, 4),
            _ => (2, 3, 8),
        };
        (
            self.height.unwrap_or(h),
            self.chi_h.unwrap_or(ch),
            self.chi_v.unwrap_or(cv),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::arg(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.v == 0 || self.chi == 0 || self.d_e == 0 || self.d_h == 0 {
            return bad("dimensions must be positive");
        }
        let (h, ch, cv) = self.factored_dims();
        if h == 0 || ch == 0 || cv == 0 {
            return bad("factored dimensions must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu must lie in [0, 1]");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must lie in (0, 1]");
        }
        if !(self.sigma_inner >= 0.0 && self.sigma_outer >= 0.0) {
            return bad("sigmas must be non-negative");
        }
        if !(self.alpha.is_finite()) {
            return bad("alpha must be finite");
        }
        Ok(())
    }

    /// Resolved settings in key order, suitable for echoing.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let (h, ch, cv) = self.factored_dims();
        let vals = [
            self.model.as_str().to_string(),
            self.n.to_string(),
            self.v.to_string(),
            self.chi.to_string(),
            ch.to_string(),
            h.to_string(),
            cv.to_string(),
            self.sigma_inner.to_string(),
            self.sigma_outer.to_string(),
            self.uniform_init.to_string(),
            self.fill_lo.to_string(),
            self.fill_hi.to_string(),
            self.d_e.to_string(),
            self.d_h.to_string(),
            self.learning_rate.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.alpha.to_string(),
            self.norm_mode.as_str().to_string(),
            self.mu.to_string(),
            self.train_fraction.to_string(),
            self.seed.to_string(),
            self.eval_every.to_string(),
            self.timing.to_string(),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(vals).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// A trainable model of any supported kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Dense(DenseMps),
    Factored(FactoredMps),
    Mlp(MlpModel),
}

impl Model {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derived(cfg.seed, "init");
        Ok(match cfg.model {
            ModelKind::Dense => Model::Dense(DenseMps::init(
                cfg.n,
                cfg.v,
                cfg.chi,
                cfg.sigma_inner,
                cfg.sigma_outer,
                &mut rng,
            )?),
            ModelKind::Factored | ModelKind::Skip => {
                let (height, chi_h, chi_v) = cfg.factored_dims();
                let init = if cfg.uniform_init {
                    FactoredInit::Uniform { lo: 0.0, hi: 1.0 }
                } else {
                    FactoredInit::Factorize {
                        fill_lo: cfg.fill_lo,
                        fill_hi: cfg.fill_hi,
                    }
                };
                let fc = FactoredConfig {
                    n: cfg.n,
                    v: cfg.v,
                    chi_h,
                    height,
                    chi_v,
                    skip: cfg.model == ModelKind::Skip,
                    sigma_inner: cfg.sigma_inner,
                    sigma_outer: cfg.sigma_outer,
                    init,
                };
                Model::Factored(FactoredMps::init(&fc, &mut rng)?)
            }
            ModelKind::Mlp => Model::Mlp(MlpModel::init(cfg.n, cfg.v, cfg.d_e, cfg.d_h, &mut rng)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Dense(_) => ModelKind::Dense,
            Model::Factored(f) if f.skip() => ModelKind::Skip,
            Model::Factored(_) => ModelKind::Factored,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Model::Dense(m) => m.n(),
            Model::Factored(m) => m.n(),
            Model::Mlp(m) => m.n(),
        }
    }

    /// Parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<&Tensor> {
        match self {
            Model::Dense(m) => m.cores().iter().collect(),
            Model::Factored(m) => m.cores().iter().flat_map(|c| &c.subcores).collect(),
            Model::Mlp(m) => m.params().iter().collect(),
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Dense(m) => m.cores_mut().iter_mut().collect(),
            Model::Factored(m) => m.cores_mut().iter_mut().flat_map(|c| c.subcores.iter_mut()).collect(),
            Model::Mlp(m) => m.params_mut().iter_mut().collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|t| t.len()).sum()
    }

    /// Loss and per-block gradients, in [`blocks`](Self::blocks) order.
    /// `alpha` and `norm_mode` are ignored by the MLP.
    pub fn loss_and_grad(&self, batch: &[(&Chain, u8)], alpha: f64, norm_mode: NormMode) -> Result<(f64, Vec<Tensor>)> {
        match self {
            Model::Dense(m) => m.loss_and_grad(batch, alpha, norm_mode),
            Model::Factored(m) => {
                let (loss, g) = m.loss_and_grad(batch, alpha, norm_mode)?;
                Ok((loss, g.into_iter().flatten().collect()))
            }
            Model::Mlp(m) => m.loss_and_grad(batch),
        }
    }

    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        sgd_step(&mut self.blocks_mut(), grads, lr)
    }

    /// Precompute what repeated scoring needs.
    pub fn scorer(&self) -> Result<Scorer> {
        Ok(match self {
            Model::Dense(m) => Scorer::born(m.clone())?,
            Model::Factored(m) => Scorer::born(m.to_dense()?)?,
            Model::Mlp(m) => Scorer::Mlp {
                proj: m.projections(),
                model: m.clone(),
            },
        })
    }
}

/// `p <- p - lr * g` for every block.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameter blocks but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

/// Scoring view of a trained model.
#[derive(Debug, Clone)]
pub enum Scorer {
    Born { dense: DenseMps, log_norm_sq: f64 },
    Mlp { model: MlpModel, proj: Vec<f64> },
}

impl Scorer {
    fn born(dense: DenseMps) -> Result<Self> {
        let log_norm_sq = dense.log_norm_sq()?;
        Ok(Scorer::Born { dense, log_norm_sq })
    }

    /// Log-probability for tensor models, sigmoid output for the MLP.
    pub fn score(&self, chain: &Chain) -> Result<f64> {
        match self {
            Scorer::Born { dense, log_norm_sq } => dense.log_prob_with_norm(chain, *log_norm_sq),
            Scorer::Mlp { model, proj } => model.forward_with(chain, proj),
        }
    }

    pub fn scores(&self, chains: &[Chain]) -> Result<Vec<f64>> {
        chains.par_iter().map(|c| self.score(c)).collect()
    }

    /// Total probability of `chains`; `None` for the MLP.
    pub fn mass(&self, chains: &[Chain]) -> Result<Option<f64>> {
        match self {
            Scorer::Born { .. } => {
                let lp = self.scores(chains)?;
                Ok(Some(lp.iter().map(|x| x.exp()).sum()))
            }
            Scorer::Mlp { .. } => Ok(None),
        }
    }
}

/// Mann-Whitney AUC with average ranks for ties, reported as at least 0.5.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::arg("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::arg("roc_auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    let raw = u / (n_pos as f64 * n_neg as f64);
    Ok(if raw < 0.5 { 1.0 - raw } else { raw })
}

/// Chains used for validation metrics at one length.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub n: usize,
    pub valid: Vec<Chain>,
    pub negatives: Vec<Chain>,
}

impl EvalSet {
    /// Every valid chain, and as many invalid chains drawn uniformly with
    /// the seed (all of them for short chains).
    pub fn build(n: usize, seed: u64) -> Result<Self> {
        let valid: Vec<Chain> = enumerate_valid(n)?.collect();
        let negatives = if n <= EXHAUSTIVE_NEGATIVES_LEN {
            enumerate_invalid(n)?
        } else {
            sample_invalid(n, valid.len(), &mut Rng::derived(seed, "negatives"))?
        };
        Ok(EvalSet { n, valid, negatives })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub sigma_t: Option<f64>,
    pub sigma_v: Option<f64>,
    pub auc: f64,
}

/// `sigma_t` is the mass on `train_positives` (tensor models only).
pub fn evaluate(model: &Model, train_positives: &[Chain], eval: &EvalSet) -> Result<EvalMetrics> {
    if model.n() != eval.n {
        return Err(Error::arg(format!("model length {} vs eval length {}", model.n(), eval.n)));
    }
    let scorer = model.scorer()?;
    let pos = scorer.scores(&eval.valid)?;
    let neg = scorer.scores(&eval.negatives)?;
    let sigma_v = match scorer {
        Scorer::Born { .. } => Some(pos.iter().map(|x| x.exp()).sum()),
        Scorer::Mlp { .. } => None,
    };
    let sigma_t = scorer.mass(train_positives)?;
    let labels: Vec<u8> = std::iter::repeat_n(1, pos.len()).chain(std::iter::repeat_n(0, neg.len())).collect();
    let mut scores = pos;
    scores.extend(neg);
    let auc = roc_auc(&scores, &labels)?;
    Ok(EvalMetrics { sigma_t, sigma_v, auc })
}

/// `exp(H)` with `H = -sum p ln p` over all `v^n` chains.
pub fn perplexity(mps: &DenseMps) -> Result<f64> {
    let n = mps.n();
    if n > MAX_PERPLEXITY_LEN {
        return Err(Error::GuardExceeded { n, max: MAX_PERPLEXITY_LEN });
    }
    let log_z = mps.log_norm_sq()?;
    let total = mps.v().pow(n as u32);
    let terms = (0..total)
        .into_par_iter()
        .map(|i| {
            let amp = mps.amplitude_codes(&index_to_codes(i, n, mps.v()))?;
            if amp.sign == 0 {
                return Ok(0.0);
            }
            let lp = 2.0 * amp.log_abs - log_z;
            Ok(-lp.exp() * lp)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum::<f64>().exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub sigma_t: Option<f64>,
    pub sigma_v: Option<f64>,
    pub auc: f64,
    pub wall_ms: u64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,sigma_t,sigma_v,auc,wall_ms,seed";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            opt(self.sigma_t),
            opt(self.sigma_v),
            self.auc,
            self.wall_ms,
            self.seed
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub model: Model,
    pub dataset: LabeledDataset,
}

impl TrainOutcome {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("training records at least one evaluation")
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, None, |_| {})
}

/// Train with an optional shared evaluation set and a callback per record.
pub fn train_with(
    cfg: &TrainConfig,
    eval: Option<&EvalSet>,
    mut observe: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let dataset = build_dataset(cfg.n, cfg.train_fraction, cfg.mu, cfg.seed)?;
    let owned;
    let eval = match eval {
        Some(e) if e.n == cfg.n => e,
        Some(e) => return Err(Error::arg(format!("eval set length {} vs n = {}", e.n, cfg.n))),
        None => {
            owned = EvalSet::build(cfg.n, cfg.seed)?;
            &owned
        }
    };
    let positives: Vec<Chain> = dataset.positives().cloned().collect();
    let mut model = Model::init(cfg)?;
    let mut shuffle_rng = Rng::derived(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..dataset.items.len()).collect();
    let mut records = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Chain, u8)> = chunk.iter().map(|&i| (&dataset.items[i].0, dataset.items[i].1)).collect();
            let (loss, grads) = model
                .loss_and_grad(&batch, cfg.alpha, cfg.norm_mode)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}: {e}")))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}: loss = {loss}")));
            }
            loss_sum += loss * chunk.len() as f64;
            model.sgd_step(&grads, cfg.learning_rate)?;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let m = evaluate(&model, &positives, eval)?;
            let rec = MetricsRecord {
                epoch,
                train_loss: loss_sum / dataset.items.len() as f64,
                sigma_t: m.sigma_t,
                sigma_v: m.sigma_v,
                auc: m.auc,
                wall_ms: if cfg.timing { start.elapsed().as_millis() as u64 } else { 0 },
                seed: cfg.seed,
            };
            observe(&rec);
            records.push(rec);
        }
    }
    Ok(TrainOutcome { records, model, dataset })
}

/// Named value lists matching the standard hyperparameter studies.
pub fn predefined_grid(name: &str) -> Option<Vec<(String, Vec<String>)>> {
    let axis = |k: &str, vals: &[&str]| (k.to_string(), vals.iter().map(|s| s.to_string()).collect());
    Some(match name {
        "mu" => vec![axis("mu", &["1.0", "0.75", "0.5", "0.25", "0.1", "0.01"])],
        "alpha" => vec![axis("alpha", &["0.0", "0.25", "0.5", "0.75", "1.0"])],
        "batch" => vec![axis("batch_size", &["8", "32", "128", "512", "1024"])],
        "chi" => vec![axis("chi", &["4", "5", "6", "7", "8", "9"])],
        "init_variance" => vec![
            axis("sigma_inner", &["0.01", "0.1", "1.0"]),
            axis("sigma_outer", &["0.01", "0.1", "1.0"]),
        ],
        "norm" => vec![
            axis("norm_mode", &["exact", "constant_one", "l2_params"]),
            axis("batch_size", &["8", "32", "128", "512", "1024"]),
        ],
        "factored_chi" => vec![
            axis("model", &["factored"]),
            axis("chi_h", &["3", "4", "5"]),
            axis("chi_v", &["5", "6", "7", "8"]),
        ],
        "mlp_arch" => vec![
            axis("model", &["mlp"]),
            axis("d_e", &["8", "16", "32"]),
            axis("d_h", &["128", "256", "512"]),
        ],
        _ => return None,
    })
}

pub const PREDEFINED_GRIDS: &[&str] = &["mu", "alpha", "batch", "chi", "init_variance", "norm", "factored_chi", "mlp_arch"];

/// A base configuration and the axes to vary over it.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub base: TrainConfig,
    pub axes: Vec<(String, Vec<String>)>,
}

impl SweepGrid {
    /// Grid file: `[base]` holds training keys, `[grid]` holds
    /// `key = v1, v2, ...` axes or `preset = name`.
    pub fn from_config(file: &ConfigFile) -> Result<Self> {
        let mut base = TrainConfig::default();
        let mut axes = Vec::new();
        for e in &file.entries {
            let err = |msg: String| Error::Parse { line: e.line, msg };
            match e.section.as_deref() {
                None | Some("base") => base.set(&e.key, &e.value).map_err(|x| err(x.to_string()))?,
                Some("grid") if e.key == "preset" => {
                    axes.extend(predefined_grid(&e.value).ok_or_else(|| err(format!("unknown preset {:?}", e.value)))?)
                }
                Some("grid") => {
                    if !TrainConfig::KEYS.contains(&e.key.as_str()) && e.key != "lr" {
                        return Err(err(format!("unknown key {:?}", e.key)));
                    }
                    let vals: Vec<String> = e.value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                    if vals.is_empty() {
                        return Err(err(format!("axis {:?} has no values", e.key)));
                    }
                    axes.push((e.key.clone(), vals));
                }
                Some(other) => return Err(err(format!("unknown section {other:?}"))),
            }
        }
        Ok(SweepGrid { base, axes })
    }

    /// Every combination of axis values, first axis slowest.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, vals) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    vals.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

pub fn cell_key(cell: &[(String, String)]) -> String {
    if cell.is_empty() {
        return "base".into();
    }
    cell.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_record: Option<MetricsRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_sd(xs: &[f64]) -> Option<MeanSd> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanSd { mean, sd })
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    /// AUC statistics over successful runs.
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub sigma_v: Option<MeanSd>,
    pub sigma_t: Option<MeanSd>,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub key: String,
    pub overrides: Vec<(String, String)>,
    pub runs: Vec<RunSummary>,
}

impl SweepCell {
    pub fn summary(&self) -> CellSummary {
        let ok: Vec<&MetricsRecord> = self.runs.iter().filter_map(|r| r.final_record.as_ref()).collect();
        let auc = mean_sd(&ok.iter().map(|r| r.auc).collect::<Vec<_>>());
        let sv: Vec<f64> = ok.iter().filter_map(|r| r.sigma_v).collect();
        let st: Vec<f64> = ok.iter().filter_map(|r| r.sigma_t).collect();
        CellSummary {
            mean: auc.as_ref().map(|m| m.mean),
            sd: auc.as_ref().map(|m| m.sd),
            sigma_v: mean_sd(&sv),
            sigma_t: mean_sd(&st),
            runs: self.runs.clone(),
        }
    }
}

/// Run every (cell, seed) pair with up to `jobs` workers. Failures are
/// recorded per run.
pub fn sweep(grid: &SweepGrid, seeds: &[u64], jobs: usize) -> Result<Vec<SweepCell>> {
    if seeds.is_empty() {
        return Err(Error::arg("sweep needs at least one seed"));
    }
    let cells = grid.cells();
    let tasks: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let run = |&(ci, seed): &(usize, u64)| -> RunSummary {
        let result = (|| {
            let mut cfg = grid.base.clone();
            for (k, v) in &cells[ci] {
                cfg.set(k, v)?;
            }
            cfg.seed = seed;
            train(&cfg)
        })();
        match result {
            Ok(out) => RunSummary {
                seed,
                final_record: Some(*out.last()),
                error: None,
                records: out.records,
            },
            Err(e) => RunSummary {
                seed,
                final_record: None,
                error: Some(e.to_string()),
                records: Vec::new(),
            },
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
    let results: Vec<RunSummary> = pool.install(|| tasks.par_iter().map(run).collect());
    let mut out: Vec<SweepCell> = cells
        .iter()
        .map(|c| SweepCell {
            key: cell_key(c),
            overrides: c.clone(),
            runs: Vec::new(),
        })
        .collect();
    for ((ci, _), r) in tasks.iter().zip(results) {
        out[*ci].runs.push(r);
    }
    Ok(out)
}

pub fn sweep_summary(cells: &[SweepCell]) -> BTreeMap<String, CellSummary> {
    cells.iter().map(|c| (c.key.clone(), c.summary())).collect()
}

/// Raw rows: one line per recorded epoch of every run.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = format!("cell,{METRICS_HEADER},error\n");
    for c in cells {
        for r in &c.runs {
            if let Some(e) = &r.error {
                out.push_str(&format!("\"{}\",,,,,,,{},\"{}\"\n", c.key, r.seed, e.replace('"', "'")));
            }
            for rec in &r.records {
                out.push_str(&format!("\"{}\",{},\n", c.key, rec.csv_row()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::full(&[1], 1.0);
        let g = Tensor::full(&[1], 0.5);
        sgd_step(&mut [&mut p], std::slice::from_ref(&g), 0.1).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        sgd_step(&mut [&mut p], &[g], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        let before = p.clone();
        sgd_step(&mut [&mut p], &[Tensor::zeros(&[1])], 0.1).unwrap();
        assert_eq!(p, before);
        assert!(sgd_step(&mut [&mut p], &[Tensor::zeros(&[2])], 0.1).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        // raw 0.3: positives ranked below most negatives
        let scores = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let labels = [1, 0, 1, 0, 0, 1, 0, 0, 1, 0];
        // oracle: fraction of (pos, neg) pairs with pos > neg
        let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| *l == 1).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| *l == 0).map(|(s, _)| *s).collect();
        let wins = pos.iter().flat_map(|p| neg.iter().map(move |q| (p > q) as u8 as f64)).sum::<f64>();
        let raw = wins / (pos.len() * neg.len()) as f64;
        assert!((raw - 0.375).abs() < 1e-15);
        assert!((roc_auc(&scores, &labels).unwrap() - 0.625).abs() < 1e-15);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        assert!((roc_auc(&flipped, &labels).unwrap() - 0.625).abs() < 1e-15);
        assert!(roc_auc(&[1.0, 2.0], &[1, 1]).is_err());
    }

    #[test]
    fn auc_seventy_percent_flip() {
        // 10 pos x 10 neg pairs, 30 wins for the positives
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            scores.push(if i < 3 { 100.0 + i as f64 } else { i as f64 - 50.0 });
            labels.push(1);
        }
        for i in 0..10 {
            scores.push(i as f64);
            labels.push(0);
        }
        assert!((roc_auc(&scores, &labels).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn mean_sd_example() {
        let m = mean_sd(&[0.7, 0.9]).unwrap();
        assert!((m.mean - 0.8).abs() < 1e-15);
        assert!((m.sd - 0.1414213562373095).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_uniform_eval() {
        let cfg = TrainConfig {
            n: 4,
            sigma_inner: 0.0,
            sigma_outer: 0.0,
            ..TrainConfig::default()
        };
        let model = Model::init(&cfg).unwrap();
        let eval = EvalSet::build(4, 0).unwrap();
        assert_eq!(eval.negatives.len(), 72);
        let m = evaluate(&model, &[], &eval).unwrap();
        assert!((m.sigma_v.unwrap() - 1.0 / 9.0).abs() < 1e-12);
        assert_eq!(m.auc, 0.5);
        assert_eq!(m.sigma_t, Some(0.0));
        if let Model::Dense(d) = &model {
            assert!((perplexity(d).unwrap() - 81.0).abs() < 1e-9);
        }
    }

    #[test]
    fn perplexity_matches_brute_force() {
        let mut rng = Rng::new(4);
        let m = DenseMps::init(6, 3, 3, 0.5, 0.5, &mut rng).unwrap();
        let p = m.brute_force_distribution().unwrap();
        let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum();
        assert!((perplexity(&m).unwrap() - h.exp()).abs() < 1e-9 * h.exp());
        let big = DenseMps::init(13, 3, 2, 0.0, 0.0, &mut rng).unwrap();
        assert!(matches!(perplexity(&big), Err(Error::GuardExceeded { .. })));
    }

    #[test]
    fn point_mass_perplexity_is_one() {
        // chi = 1 cores that only pass token 0
        let outer = Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let inner = Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let m = DenseMps::new(vec![outer.clone(), inner, outer]).unwrap();
        assert!((perplexity(&m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_keys_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("model", "skip").unwrap();
        cfg.set("lr", "0.1").unwrap();
        cfg.set("norm_mode", "l2_params").unwrap();
        assert_eq!(cfg.factored_dims(), (3, 2, 4));
        let text = cfg.to_text();
        let back = TrainConfig::from_config(&ConfigFile::parse(&text).unwrap()).unwrap();
        assert_eq!(back.to_pairs(), cfg.to_pairs());
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("epochs", "x").is_err());
    }

    #[test]
    fn config_errors_have_lines() {
        let f = ConfigFile::parse("[model]\nn = 4\nchi = banana\n").unwrap();
        assert!(matches!(TrainConfig::from_config(&f), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn validation() {
        let bad = [("mu", "1.5"), ("learning_rate", "0"), ("epochs", "0"), ("batch_size", "0"), ("n", "1")];
        for (k, v) in bad {
            let mut c = TrainConfig::default();
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k}={v}");
        }
    }

    fn tiny(model: ModelKind) -> TrainConfig {
        TrainConfig {
            model,
            n: 6,
            chi: 3,
            chi_h: Some(2),
            height: Some(2),
            chi_v: Some(4),
            d_e: 4,
            d_h: 8,
            epochs: 4,
            batch_size: 8,
            eval_every: 2,
            train_fraction: 1.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        for kind in [ModelKind::Dense, ModelKind::Factored, ModelKind::Skip, ModelKind::Mlp] {
            let a = train(&tiny(kind)).unwrap();
            let b = train(&tiny(kind)).unwrap();
            assert_eq!(metrics_csv(&a.records), metrics_csv(&b.records), "{kind:?}");
            assert_eq!(a.model, b.model);
            assert_eq!(a.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![2, 4]);
            assert_eq!(a.model.kind(), kind);
        }
    }

    #[test]
    fn sigma_t_within_sigma_v_at_full_mu() {
        let out = train(&tiny(ModelKind::Dense)).unwrap();
        for r in &out.records {
            assert!(r.sigma_t.unwrap() <= r.sigma_v.unwrap() + 1e-9);
            assert!((0.5..=1.0).contains(&r.auc));
        }
        let mlp = train(&tiny(ModelKind::Mlp)).unwrap();
        assert!(mlp.last().sigma_v.is_none());
    }

    #[test]
    fn one_cell_sweep_equals_train() {
        let grid = SweepGrid {
            base: tiny(ModelKind::Dense),
            axes: vec![],
        };
        let cells = sweep(&grid, &[0], 1).unwrap();
        assert_eq!(cells.len(), 1);
        let direct = train(&tiny(ModelKind::Dense)).unwrap();
        assert_eq!(cells[0].runs[0].records, direct.records);
    }

    #[test]
    fn sweep_isolates_failures() {
        let grid = SweepGrid {
            base: tiny(ModelKind::Dense),
            axes: vec![("mu".into(), vec!["1.0".into(), "7".into()])],
        };
        let cells = sweep(&grid, &[0, 1], 2).unwrap();
        assert_eq!(cells.len(), 2);
        assert!(cells[0].runs.iter().all(|r| r.error.is_none()));
        assert!(cells[1].runs.iter().all(|r| r.error.is_some()));
        let s = sweep_summary(&cells);
        assert!(s["mu=7"].mean.is_none());
        assert!(s["mu=1.0"].mean.is_some());
    }

    #[test]
    fn grid_files_and_presets() {
        let f = ConfigFile::parse("[base]\nn = 6\n[grid]\npreset = init_variance\nbatch_size = 8, 32\n").unwrap();
        let g = SweepGrid::from_config(&f).unwrap();
        assert_eq!(g.base.n, 6);
        assert_eq!(g.cells().len(), 18);
        assert_eq!(cell_key(&g.cells()[0]), "sigma_inner=0.01,sigma_outer=0.01,batch_size=8");
        for name in PREDEFINED_GRIDS {
            assert!(predefined_grid(name).is_some());
        }
        let mu = predefined_grid("mu").unwrap();
        assert_eq!(mu[0].1, vec!["1.0", "0.75", "0.5", "0.25", "0.1", "0.01"]);
        let bad = ConfigFile::parse("[grid]\nnope = 1\n").unwrap();
        assert!(matches!(SweepGrid::from_config(&bad), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn scale_invariance_of_exact_loss() {
        let cfg = tiny(ModelKind::Dense);
        let model = Model::init(&TrainConfig { sigma_inner: 0.3, sigma_outer: 0.3, ..cfg }).unwrap();
        let chains: Vec<Chain> = (0..20).map(|i| Chain::from_index(i * 7, 6)).collect();
        let batch: Vec<(&Chain, u8)> = chains.iter().map(|c| (c, u8::from(c.is_valid()))).collect();
        let (l0, _) = model.loss_and_grad(&batch, 0.0, NormMode::Exact).unwrap();
        let mut scaled = model.clone();
        let b = &mut scaled.blocks_mut()[2];
        **b = b.scale(3.7);
        let (l1, _) = scaled.loss_and_grad(&batch, 0.0, NormMode::Exact).unwrap();
        assert!((l0 - l1).abs() < 1e-9);
    }
}
