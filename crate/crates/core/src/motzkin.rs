//! Spin-1 Motzkin chains: validity, counting, enumeration, datasets and
//! exact mutual information.
//!
//! Tokens are coded `u = 0` (up), `f = 1` (flat), `d = 2` (down). A chain is
//! valid when its height never drops below zero and it ends at zero.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Largest length accepted by exhaustive enumeration.
pub const MAX_ENUM_LEN: usize = 20;
/// Largest length accepted by the exact mutual-information computation.
pub const MAX_MI_LEN: usize = 16;
/// Physical dimension of a spin-1 site.
pub const VOCAB: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Token {
    Up = 0,
    Flat = 1,
    Down = 2,
}

impl Token {
    pub const ALL: [Token; 3] = [Token::Up, Token::Flat, Token::Down];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Token> {
        Self::ALL.get(code).copied()
    }

    pub fn step(self) -> i32 {
        match self {
            Token::Up => 1,
            Token::Flat => 0,
            Token::Down => -1,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Token::Up => 'u',
            Token::Flat => 'f',
            Token::Down => 'd',
        }
    }

    pub fn from_symbol(c: char) -> Option<Token> {
        match c {
            'u' => Some(Token::Up),
            'f' => Some(Token::Flat),
            'd' => Some(Token::Down),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chain(Vec<Token>);

impl Chain {
    pub fn new(tokens: Vec<Token>) -> Self {
        Chain(tokens)
    }

    pub fn from_codes(codes: &[usize]) -> Option<Self> {
        codes.iter().map(|&c| Token::from_code(c)).collect::<Option<Vec<_>>>().map(Chain)
    }

    /// The `index`-th chain of length `n` in base-3 code order.
    pub fn from_index(mut index: u64, n: usize) -> Self {
        let mut tokens = vec![Token::Up; n];
        for slot in tokens.iter_mut().rev() {
            *slot = Token::ALL[(index % 3) as usize];
            index /= 3;
        }
        Chain(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn codes(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|t| t.code())
    }

    pub fn is_valid(&self) -> bool {
        is_valid(self)
    }
}

impl fmt::Display for Chain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.0 {
            write!(f, "{}", t.symbol())?;
        }
        Ok(())
    }
}

impl FromStr for Chain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| {
                Token::from_symbol(c)
                    .ok_or_else(|| Error::ChainText(format!("bad character {c:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Chain)
    }
}

/// Parse u/f/d text, requiring exactly `n` tokens.
pub fn encode_chain(text: &str, n: usize) -> Result<Chain> {
    let chain: Chain = text.parse()?;
    if chain.len() != n {
        return Err(Error::ChainText(format!(
            "expected length {n}, got {}",
            chain.len()
        )));
    }
    Ok(chain)
}

pub fn decode_chain(chain: &Chain) -> String {
    chain.to_string()
}

pub fn is_valid(chain: &Chain) -> bool {
    let mut height = 0i32;
    for t in chain.tokens() {
        height += t.step();
        if height < 0 {
            return false;
        }
    }
    height == 0
}

/// Motzkin number via `M_n = M_{n-1} + sum_{k=0}^{n-2} M_k M_{n-2-k}`.
pub fn motzkin_number(n: usize) -> BigUint {
    let mut m: Vec<BigUint> = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let next = if i < 2 {
            BigUint::from(1u32)
        } else {
            let mut acc = m[i - 1].clone();
            for k in 0..=i - 2 {
                acc += &m[k] * &m[i - 2 - k];
            }
            acc
        };
        m.push(next);
    }
    m.pop().expect("non-empty")
}

pub fn motzkin_count(n: usize) -> u64 {
    u64::try_from(motzkin_number(n)).expect("guarded lengths fit in u64")
}

/// `3^n` as a u64; panics past `n = 40`.
pub fn total_chains(n: usize) -> u64 {
    3u64.checked_pow(n as u32).expect("3^n overflows u64")
}

/// Lazy lexicographic (by token code) stream of valid chains.
pub struct ValidChains {
    n: usize,
    codes: Vec<u8>,
    heights: Vec<i32>,
    started: bool,
    done: bool,
}

impl ValidChains {
    fn new(n: usize) -> Self {
        ValidChains {
            n,
            codes: Vec::with_capacity(n),
            heights: Vec::with_capacity(n + 1),
            started: false,
            done: false,
        }
    }

    fn height(&self) -> i32 {
        *self.heights.last().unwrap_or(&0)
    }

    /// Extend with the smallest admissible codes from the current prefix.
    /// Returns false if no completion exists.
    fn fill(&mut self) -> bool {
        while self.codes.len() < self.n {
            let remaining = (self.n - self.codes.len()) as i32;
            let h = self.height();
            // prefer Up while the walk can still return, then Flat, then Down
            let code = if h < remaining - 1 {
                0
            } else if h < remaining {
                1
            } else {
                2
            };
            if !self.push(code) {
                return false;
            }
        }
        true
    }

    fn push(&mut self, code: u8) -> bool {
        let h = self.height() + [1, 0, -1][code as usize];
        let remaining = (self.n - self.codes.len() - 1) as i32;
        if h < 0 || h > remaining {
            return false;
        }
        self.codes.push(code);
        self.heights.push(h);
        true
    }

    fn advance(&mut self) -> bool {
        while let Some(code) = self.codes.pop() {
            self.heights.pop();
            for next in code + 1..3 {
                if self.push(next) {
                    if self.fill() {
                        return true;
                    }
                    self.codes.pop();
                    self.heights.pop();
                }
            }
        }
        false
    }
}

impl Iterator for ValidChains {
    type Item = Chain;

    fn next(&mut self) -> Option<Chain> {
        if self.done {
            return None;
        }
        let ok = if self.started {
            self.advance()
        } else {
            self.started = true;
            self.fill()
        };
        if !ok {
            self.done = true;
            return None;
        }
        Some(Chain(
            self.codes.iter().map(|&c| Token::ALL[c as usize]).collect(),
        ))
    }
}

pub fn enumerate_valid(n: usize) -> Result<ValidChains> {
    if n > MAX_ENUM_LEN {
        return Err(Error::GuardExceeded { n, max: MAX_ENUM_LEN });
    }
    Ok(ValidChains::new(n))
}

/// Uniform draws over invalid chains by rejection from all `3^n` strings.
/// Duplicates are allowed.
pub fn sample_invalid(n: usize, count: usize, rng: &mut Rng) -> Result<Vec<Chain>> {
    if n > 40 {
        return Err(Error::arg(format!("length {n} too large for sampling")));
    }
    let available = u128::from(total_chains(n)) - motzkin_number(n).to_u128_or_max();
    if count > 0 && available == 0 {
        return Err(Error::arg(format!(
            "no invalid chains of length {n} exist"
        )));
    }
    if (count as u128) > available {
        return Err(Error::arg(format!(
            "requested {count} invalid chains, only {available} distinct exist"
        )));
    }
    let total = total_chains(n);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let c = Chain::from_index(rng.below(total), n);
        if !is_valid(&c) {
            out.push(c);
        }
    }
    Ok(out)
}

trait ToU128OrMax {
    fn to_u128_or_max(&self) -> u128;
}

impl ToU128OrMax for BigUint {
    fn to_u128_or_max(&self) -> u128 {
        u128::try_from(self).unwrap_or(u128::MAX)
    }
}

/// All invalid chains of length `n` in code order.
pub fn enumerate_invalid(n: usize) -> Result<Vec<Chain>> {
    if n > 12 {
        return Err(Error::GuardExceeded { n, max: 12 });
    }
    Ok((0..total_chains(n))
        .map(|i| Chain::from_index(i, n))
        .filter(|c| !is_valid(c))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub n: usize,
    pub mu: f64,
    pub seed: u64,
    pub items: Vec<(Chain, u8)>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.items.iter().filter(|(_, y)| *y == 1).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = &Chain> {
        self.items.iter().filter(|(_, y)| *y == 1).map(|(c, _)| c)
    }

    /// One chain per line, a tab and the 0/1 label.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.items.len() * (self.n + 3));
        for (c, y) in &self.items {
            s.push_str(&c.to_string());
            s.push('\t');
            s.push(if *y == 1 { '1' } else { '0' });
            s.push('\n');
        }
        s
    }
}

/// Sizes for a dataset: total `floor(train_fraction * M_n)` of which
/// `round(mu * total)` are valid.
pub fn dataset_sizes(n: usize, train_fraction: f64, mu: f64) -> Result<(usize, usize)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::arg(format!("train_fraction {train_fraction} not in (0, 1]")));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::arg(format!("mu {mu} not in [0, 1]")));
    }
    let m = motzkin_count(n) as f64;
    let total = (train_fraction * m).floor() as usize;
    let valid = (mu * total as f64).round() as usize;
    Ok((total, valid))
}

pub fn build_dataset(n: usize, train_fraction: f64, mu: f64, seed: u64) -> Result<LabeledDataset> {
    if n > MAX_ENUM_LEN {
        return Err(Error::GuardExceeded { n, max: MAX_ENUM_LEN });
    }
    let (total, n_valid) = dataset_sizes(n, train_fraction, mu)?;
    let m = motzkin_count(n) as usize;
    if n_valid > m {
        return Err(Error::arg(format!(
            "need {n_valid} valid chains, only {m} exist"
        )));
    }
    let mut rng = Rng::derived(seed, "dataset");
    let mut picks = index::sample(&mut rng, m, n_valid).into_vec();
    picks.sort_unstable();

    let mut items = Vec::with_capacity(total);
    let mut next = picks.iter().peekable();
    for (i, chain) in enumerate_valid(n)?.enumerate() {
        match next.peek() {
            Some(&&p) if p == i => {
                items.push((chain, 1u8));
                next.next();
            }
            Some(_) => {}
            None => break,
        }
    }
    for c in sample_invalid(n, total - n_valid, &mut rng)? {
        items.push((c, 0u8));
    }
    items.shuffle(&mut rng);
    Ok(LabeledDataset { n, mu, seed, items })
}

/// One parsed dataset line: chain plus optional label.
pub type DatasetLine = (Chain, Option<u8>);

/// Parse dataset text. Blank lines are skipped; all chains must share one
/// length.
pub fn parse_dataset(text: &str) -> Result<Vec<DatasetLine>> {
    let mut out = Vec::new();
    let mut len = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let (chain_txt, label) = match line.split_once('\t') {
            Some((c, l)) => {
                let label = match l.trim() {
                    "0" => 0u8,
                    "1" => 1u8,
                    other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
                };
                (c, Some(label))
            }
            None => (line, None),
        };
        let chain: Chain = chain_txt.trim().parse().map_err(|e: Error| err(e.to_string()))?;
        if chain.is_empty() {
            return Err(err("empty chain".into()));
        }
        match len {
            None => len = Some(chain.len()),
            Some(l) if l != chain.len() => {
                return Err(err(format!("length {} differs from {l}", chain.len())))
            }
            _ => {}
        }
        out.push((chain, label));
    }
    Ok(out)
}

/// Joint token counts `[i][j][a][b]` for `i <= j` over all valid chains,
/// with the number of chains.
fn joint_counts(n: usize) -> Result<(Vec<u64>, f64)> {
    let chains: Vec<Chain> = enumerate_valid(n)?.collect();
    let total = chains.len() as f64;
    let counts = chains
        .par_chunks(4096)
        .map(|chunk| {
            let mut c = vec![0u64; n * n * 9];
            for chain in chunk {
                let codes: Vec<usize> = chain.codes().collect();
                for i in 0..n {
                    let base = i * n * 9;
                    for j in i..n {
                        c[base + j * 9 + codes[i] * 3 + codes[j]] += 1;
                    }
                }
            }
            c
        })
        .reduce(
            || vec![0u64; n * n * 9],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    Ok((counts, total))
}

fn mi_from_joint(joint: &[f64; 9]) -> f64 {
    let mut pa = [0.0; 3];
    let mut pb = [0.0; 3];
    for a in 0..3 {
        for b in 0..3 {
            pa[a] += joint[a * 3 + b];
            pb[b] += joint[a * 3 + b];
        }
    }
    let mut acc = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let pab = joint[a * 3 + b];
            if pab > 0.0 {
                acc += pab * (pab / (pa[a] * pb[b])).ln();
            }
        }
    }
    acc
}

/// Exact pairwise mutual information (nats) under the uniform distribution
/// over valid chains of length `n`. Entry `(i, i)` is the site entropy.
pub fn mutual_information(n: usize) -> Result<Vec<Vec<f64>>> {
    if n > MAX_MI_LEN {
        return Err(Error::GuardExceeded { n, max: MAX_MI_LEN });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (counts, total) = joint_counts(n)?;
    let mut mi = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let mut joint = [0.0; 9];
            for (k, p) in joint.iter_mut().enumerate() {
                *p = counts[i * n * 9 + j * 9 + k] as f64 / total;
            }
            if i == j {
                // diagonal table is not a joint over distinct sites
                mi[i][i] = -(0..3).map(|a| joint[a * 4]).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
                continue;
            }
            let v = mi_from_joint(&joint);
            mi[i][j] = v;
            mi[j][i] = v;
        }
    }
    Ok(mi)
}

/// Mutual information (nats) between tokens at separation `d`, with the
/// joint pooled over all pairs `(i, i + d)`. Index `d - 1` holds distance `d`.
pub fn mutual_information_by_distance(n: usize) -> Result<Vec<f64>> {
    if n > MAX_MI_LEN {
        return Err(Error::GuardExceeded { n, max: MAX_MI_LEN });
    }
    if n < 2 {
        return Ok(Vec::new());
    }
    let (counts, total) = joint_counts(n)?;
    Ok((1..n)
        .map(|d| {
            let pairs = (n - d) as f64;
            let mut joint = [0.0; 9];
            for i in 0..n - d {
                for (k, p) in joint.iter_mut().enumerate() {
                    *p += counts[i * n * 9 + (i + d) * 9 + k] as f64 / (total * pairs);
                }
            }
            mi_from_joint(&joint)
        })
        .collect())
}

/// CSV with header `distance,mi_nats`.
pub fn mi_distance_csv(curve: &[f64]) -> String {
    let mut s = String::from("distance,mi_nats\n");
    for (k, v) in curve.iter().enumerate() {
        s.push_str(&format!("{},{v:.17e}\n", k + 1));
    }
    s
}

/// CSV with header `i,j,mi_nats`, one row per pair `i < j`.
pub fn mi_csv(mi: &[Vec<f64>]) -> String {
    let mut s = String::from("i,j,mi_nats\n");
    for (i, row) in mi.iter().enumerate() {
        for (j, v) in row.iter().enumerate().skip(i + 1) {
            s.push_str(&format!("{i},{j},{v:.17e}\n"));
        }
    }
    s
}
