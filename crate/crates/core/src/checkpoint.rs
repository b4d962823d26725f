//! Binary checkpoints.
//!
//! Layout: the 6-byte magic `TNMPS1`, the manifest length as a little-endian
//! `u64`, a UTF-8 `key = value` manifest, then every parameter block as
//! little-endian `f64` in manifest order, row-major.
//!
//! The manifest holds the model kind and dimensions, the seed, a creation
//! stamp, an optional `[config]` echo and one `block.<i> = <name> <shape>`
//! entry per block, where shape is `AxBxC`.

use crate::baseline::MlpModel;
use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::factored::{FactoredCore, FactoredMps, PositionKind};
use crate::mps::DenseMps;
use crate::tensor::Tensor;
use crate::train::{Model, ModelKind};

pub const MAGIC: &[u8; 6] = b"TNMPS1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    /// Seconds since the Unix epoch, or 0 when unstamped.
    pub created: u64,
    pub config: Vec<(String, String)>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn block_names(model: &Model) -> Vec<String> {
    match model {
        Model::Dense(m) => (0..m.n()).map(|i| format!("core{i}")).collect(),
        Model::Factored(m) => m
            .cores()
            .iter()
            .enumerate()
            .flat_map(|(i, c)| (0..c.height).map(move |k| format!("site{i}.layer{k}")))
            .collect(),
        Model::Mlp(_) => ["embedding", "w1", "b1", "w2", "b2"].iter().map(|s| s.to_string()).collect(),
    }
}

fn dims(model: &Model) -> Vec<(&'static str, String)> {
    match model {
        Model::Dense(m) => vec![("n", m.n().to_string()), ("v", m.v().to_string()), ("chi", m.chi().to_string())],
        Model::Factored(m) => vec![
            ("n", m.n().to_string()),
            ("v", m.v().to_string()),
            ("chi_h", m.chi_h().to_string()),
            ("height", m.height().to_string()),
            ("chi_v", m.chi_v().to_string()),
        ],
        Model::Mlp(m) => vec![
            ("n", m.n().to_string()),
            ("v", m.v().to_string()),
            ("d_e", m.d_e().to_string()),
            ("d_h", m.d_h().to_string()),
        ],
    }
}

impl Checkpoint {
    pub fn manifest(&self) -> String {
        let mut out = format!("format_version = {FORMAT_VERSION}\nmodel_kind = {}\n", self.model.kind().as_str());
        for (k, v) in dims(&self.model) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("seed = {}\ncreated = {}\n", self.seed, self.created));
        for (i, (name, b)) in block_names(&self.model).iter().zip(self.model.blocks()).enumerate() {
            let shape: Vec<String> = b.shape().iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("block.{i} = {name} {}\n", shape.join("x")));
        }
        if !self.config.is_empty() {
            out.push_str("\n[config]\n");
            for (k, v) in &self.config {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let blocks = self.model.blocks();
        let floats: usize = blocks.iter().map(|b| b.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for b in blocks {
            for x in b.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| err("bad magic"))?;
        if rest.len() < 8 {
            return Err(err("truncated manifest length"));
        }
        let (len_bytes, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
        let len = usize::try_from(len).ok().filter(|&l| l <= rest.len()).ok_or_else(|| err("manifest length exceeds file"))?;
        let (manifest, payload) = rest.split_at(len);
        let manifest = std::str::from_utf8(manifest).map_err(|_| err("manifest is not UTF-8"))?;
        let file = ConfigFile::parse(manifest).map_err(|e| err(format!("manifest: {e}")))?;

        let top = |key: &str| -> Result<&str> {
            file.get(None, key)
                .map(|e| e.value.as_str())
                .ok_or_else(|| err(format!("manifest lacks {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            top(key)?.parse().map_err(|_| err(format!("bad {key}")))
        };
        let version: u32 = top("format_version")?.parse().map_err(|_| err("bad format_version"))?;
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported format version {version}")));
        }
        let kind = ModelKind::parse(top("model_kind")?).ok_or_else(|| err("unknown model_kind"))?;
        let seed: u64 = top("seed")?.parse().map_err(|_| err("bad seed"))?;
        let created: u64 = top("created")?.parse().map_err(|_| err("bad created"))?;

        // read declared blocks and the payload
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        while let Some(e) = file.get(None, &format!("block.{}", shapes.len())) {
            let (_, shape) = e.value.rsplit_once(' ').ok_or_else(|| err(format!("bad block line {}", e.line)))?;
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<_>>()
                .ok_or_else(|| err(format!("bad block shape on line {}", e.line)))?;
            shapes.push(shape);
        }
        let mut total = 0usize;
        for s in &shapes {
            let len = s.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("block size overflow"))?;
            total = total.checked_add(len).ok_or_else(|| err("block size overflow"))?;
        }
        if total.checked_mul(8) != Some(payload.len()) {
            return Err(err(format!(
                "payload has {} bytes, manifest declares {} values",
                payload.len(),
                total
            )));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let blocks = shapes
            .into_iter()
            .map(|s| {
                let len = s.iter().product();
                Tensor::new(s, floats.by_ref().take(len).collect())
            })
            .collect::<Result<Vec<_>>>()?;

        let n = num("n")?;
        let v = num("v")?;
        let model = match kind {
            ModelKind::Dense => {
                let chi = num("chi")?;
                let m = DenseMps::new(blocks).map_err(|e| err(format!("dense model: {e}")))?;
                if m.n() != n || m.v() != v || m.chi() != chi {
                    return Err(err("dense blocks disagree with manifest dimensions"));
                }
                Model::Dense(m)
            }
            ModelKind::Factored | ModelKind::Skip => {
                let (chi_h, height, chi_v) = (num("chi_h")?, num("height")?, num("chi_v")?);
                if n < 2 || height == 0 || blocks.len() != n.checked_mul(height).ok_or_else(|| err("block count overflow"))? {
                    return Err(err("factored block count disagrees with manifest"));
                }
                chi_h
                    .checked_pow(height as u32)
                    .filter(|b| b.checked_mul(*b).and_then(|x| x.checked_mul(v)).is_some())
                    .ok_or_else(|| err("effective bond too large"))?;
                let skip = kind == ModelKind::Skip;
                let mut it = blocks.into_iter();
                let cores = (0..n)
                    .map(|i| {
                        let subs: Vec<Tensor> = it.by_ref().take(height).collect();
                        FactoredCore::new(PositionKind::of_site(i, n), skip, v, chi_h, chi_v, subs)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| err(format!("factored model: {e}")))?;
                Model::Factored(FactoredMps::new(cores).map_err(|e| err(format!("factored model: {e}")))?)
            }
            ModelKind::Mlp => {
                let (d_e, d_h) = (num("d_e")?, num("d_h")?);
                Model::Mlp(MlpModel::from_params(n, v, d_e, d_h, blocks).map_err(|e| err(format!("mlp model: {e}")))?)
            }
        };
        let config = file.section("config").map(|e| (e.key.clone(), e.value.clone())).collect();
        Ok(Checkpoint { model, seed, created, config })
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.encode())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}
