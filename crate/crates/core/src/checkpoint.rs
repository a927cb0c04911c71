//! Versioned on-disk model format.
//!
//! Layout: the magic bytes `CDN1`, a little-endian `u32` header length, a
//! UTF-8 header, then every tensor as little-endian `f64` values:
//!
//! ```text
//! format_version=1
//! [config]
//! variant=cdnet
//! ...
//! [normalization]
//! mean=0.1,2.5
//! std=1,0.5
//! [metrics]
//! val_auroc=0.81
//! [tensors]
//! imputer.z 8 1 0
//! ...
//! ```
//!
//! Each tensor line gives its name, rows, columns and byte offset into the
//! payload. Floats are written in shortest round-trip form, so loading and
//! saving again reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{build_variant, CdnetModel};
use crate::numerics::{ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::training::{TrainConfig, TrainOutcome};

pub const MAGIC: &[u8; 4] = b"CDN1";
pub const FORMAT_VERSION: u32 = 1;

/// Trained parameters with everything needed to rebuild and apply them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Statistics that map raw inputs into the model's normalized space.
    pub normalization: Option<NormStats>,
    /// Named scalar results, e.g. `val_auroc`, in insertion order.
    pub metrics: Vec<(String, f64)>,
    pub params: ParamStore<f64>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, text: &str) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|v| v.parse().map_err(|_| corrupt(format!("{key}: bad number `{v}`"))))
        .collect()
}

impl Checkpoint {
    pub fn from_outcome<T: Scalar>(
        config: &TrainConfig,
        outcome: &TrainOutcome<T>,
        normalization: Option<NormStats>,
    ) -> Self {
        let mut metrics = vec![
            ("best_epoch".to_string(), outcome.best_epoch as f64),
            ("val_loss".to_string(), outcome.best.loss),
        ];
        if let Some(v) = outcome.best.auroc {
            metrics.push(("val_auroc".into(), v));
        }
        if let Some(v) = outcome.best.auprc {
            metrics.push(("val_auprc".into(), v));
        }
        Self {
            config: config.clone(),
            normalization,
            metrics,
            params: outcome.model.params().cast(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    /// Rebuilds the model in scalar type `T`, checking every tensor name and shape.
    pub fn model<T: Scalar>(&self) -> Result<CdnetModel<T>> {
        let mut model = build_variant::<f64>(&self.config.model, self.config.seed)?;
        let expected = model.params().len();
        if self.params.len() != expected {
            return Err(corrupt(format!(
                "{} tensors stored, variant `{}` has {expected}",
                self.params.len(),
                self.config.model.variant
            )));
        }
        for (name, value) in self.params.iter() {
            let id = model
                .params()
                .id(name)
                .ok_or_else(|| corrupt(format!("unexpected tensor `{name}`")))?;
            let want = model.params().get(id).shape().to_vec();
            if value.shape() != want.as_slice() {
                return Err(corrupt(format!(
                    "tensor `{name}` has shape {:?}, expected {want:?}",
                    value.shape()
                )));
            }
            model.params_mut().set(id, value.clone())?;
        }
        Ok(model.cast())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("format_version={FORMAT_VERSION}\n[config]\n");
        header.push_str(&self.config.to_text());
        header.push_str("[normalization]\n");
        if let Some(n) = &self.normalization {
            let _ = writeln!(header, "mean={}\nstd={}", join(&n.mean), join(&n.std));
        }
        header.push_str("[metrics]\n");
        for (k, v) in &self.metrics {
            let _ = writeln!(header, "{k}={v}");
        }
        header.push_str("[tensors]\n");
        let mut offset = 0usize;
        for (name, t) in self.params.iter() {
            let _ = writeln!(header, "{name} {} {} {offset}", t.rows(), t.cols());
            offset += 8 * t.len();
        }

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing CDN1 magic bytes"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
        let payload_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("header is truncated"))?;
        let header = std::str::from_utf8(&bytes[8..payload_start]).map_err(|_| corrupt("header is not UTF-8"))?;
        let payload = &bytes[payload_start..];

        let mut lines = header.lines();
        match lines.next() {
            Some(line) if line == format!("format_version={FORMAT_VERSION}") => {}
            Some(line) if line.starts_with("format_version=") => {
                return Err(corrupt(format!(
                    "unsupported {line}, this build reads format_version={FORMAT_VERSION}"
                )))
            }
            _ => return Err(corrupt("header does not start with format_version")),
        }

        let mut section = "";
        let mut config = TrainConfig::default();
        let (mut mean, mut std) = (None, None);
        let mut metrics = Vec::new();
        let mut params = ParamStore::new();
        let mut expected_offset = 0usize;
        for line in lines {
            if line.starts_with('[') {
                section = match line {
                    "[config]" | "[normalization]" | "[metrics]" | "[tensors]" => line,
                    _ => return Err(corrupt(format!("unknown section {line}"))),
                };
                continue;
            }
            if section == "[tensors]" {
                let fields: Vec<&str> = line.split(' ').collect();
                let [name, rows, cols, offset] = fields[..] else {
                    return Err(corrupt(format!("bad tensor line `{line}`")));
                };
                let num = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| corrupt(format!("bad tensor line `{line}`")))
                };
                let (rows, cols, offset) = (num(rows)?, num(cols)?, num(offset)?);
                if offset != expected_offset {
                    return Err(corrupt(format!(
                        "tensor `{name}` at offset {offset}, expected {expected_offset}"
                    )));
                }
                let count = rows.checked_mul(cols).ok_or_else(|| corrupt("tensor too large"))?;
                let end = count
                    .checked_mul(8)
                    .and_then(|n| n.checked_add(offset))
                    .filter(|&end| end <= payload.len())
                    .ok_or_else(|| corrupt(format!("payload truncated in tensor `{name}`")))?;
                let data = payload[offset..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                    .collect();
                if params.id(name).is_some() {
                    return Err(corrupt(format!("duplicate tensor `{name}`")));
                }
                params.add(name, Tensor::new(vec![rows, cols], data)?);
                expected_offset = end;
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("expected key=value, got `{line}`")))?;
            match section {
                "[config]" => config.apply(key, value).map_err(|e| corrupt(e.to_string()))?,
                "[normalization]" => match key {
                    "mean" => mean = Some(parse_list(key, value)?),
                    "std" => std = Some(parse_list(key, value)?),
                    _ => return Err(corrupt(format!("unknown normalization key `{key}`"))),
                },
                "[metrics]" => {
                    let v = value
                        .parse()
                        .map_err(|_| corrupt(format!("metric {key}: bad number `{value}`")))?;
                    metrics.push((key.to_string(), v));
                }
                _ => return Err(corrupt(format!("`{line}` outside any section"))),
            }
        }
        if expected_offset != payload.len() {
            return Err(corrupt(format!(
                "{} trailing payload bytes",
                payload.len() as isize - expected_offset as isize
            )));
        }
        let normalization = match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Some(NormStats { mean, std }),
            (None, None) => None,
            _ => return Err(corrupt("normalization needs matching mean and std lists")),
        };

        let ckpt = Self {
            config,
            normalization,
            metrics,
            params,
        };
        // Restore the frozen flags and validate names and shapes.
        let model = ckpt.model::<f64>()?;
        Ok(Self {
            params: model.params().clone(),
            ..ckpt
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
