//! Named parameter store, tape binding, and the checkpoint file.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "HATC" | version: u32 | manifest_len: u32 | manifest (UTF-8) | values (f64 LE)
//! ```
//!
//! The manifest holds one entry per line: `meta <key>=<value>` for model
//! configuration and `param <name> <rows> <cols> <offset>` for tensors, where
//! `offset` is the byte offset of the tensor inside the value block.

use std::collections::HashMap;
use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, ParseErrorKind, Result};
use crate::tensor::{Gradients, Mat, Tape, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HATC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Flat view: every parameter's values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }

    /// Copies values from `other` by name. Every name here must exist there
    /// with the same shape.
    pub fn load_from(&mut self, other: &ModelParams) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Input(format!("checkpoint lacks parameter {name}")))?;
            if src.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "checkpoint load",
                    lhs: value.shape(),
                    rhs: src.shape(),
                });
            }
            *value = src.clone();
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self, meta: &[(String, String)]) -> Vec<u8> {
        let mut manifest = String::new();
        for (k, v) in meta {
            manifest.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, value) in self.names.iter().zip(&self.values) {
            manifest.push_str(&format!(
                "param {name} {} {} {offset}\n",
                value.rows(),
                value.cols()
            ));
            offset += value.data().len() * 8;
        }
        let mut out = Vec::with_capacity(12 + manifest.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for value in &self.values {
            for v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(ModelParams, Vec<(String, String)>)> {
        let parse = |offset: usize, kind: ParseErrorKind| Error::Parse { offset, kind };
        let need = |offset: usize, n: usize| -> Result<()> {
            if bytes.len() < offset + n {
                return Err(parse(
                    offset,
                    ParseErrorKind::Truncated {
                        needed: n,
                        available: bytes.len().saturating_sub(offset),
                    },
                ));
            }
            Ok(())
        };
        need(0, 12)?;
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(parse(0, ParseErrorKind::BadMagic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(parse(4, ParseErrorKind::UnsupportedVersion(version)));
        }
        let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        need(12, manifest_len)?;
        let manifest = std::str::from_utf8(&bytes[12..12 + manifest_len]).map_err(|e| {
            parse(
                12 + e.valid_up_to(),
                ParseErrorKind::LengthInconsistent("manifest is not UTF-8".into()),
            )
        })?;
        let data_start = 12 + manifest_len;
        let data = &bytes[data_start..];

        let mut meta = Vec::new();
        let mut params = ModelParams::new();
        let mut expected_offset = 0usize;
        for line in manifest.lines() {
            let bad = || {
                parse(
                    12,
                    ParseErrorKind::LengthInconsistent(format!("bad manifest line {line:?}")),
                )
            };
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once('=').ok_or_else(bad)?;
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("param ") {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                let [name, rows, cols, off] = fields[..] else {
                    return Err(bad());
                };
                let rows: usize = rows.parse().map_err(|_| bad())?;
                let cols: usize = cols.parse().map_err(|_| bad())?;
                let off: usize = off.parse().map_err(|_| bad())?;
                if off != expected_offset {
                    return Err(parse(
                        12,
                        ParseErrorKind::LengthInconsistent(format!(
                            "parameter {name} at offset {off}, expected {expected_offset}"
                        )),
                    ));
                }
                let n = rows.checked_mul(cols).ok_or_else(bad)?;
                let len = n.checked_mul(8).ok_or_else(bad)?;
                need(data_start + off, len)?;
                let values = data[off..off + len]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if params.id(name).is_some() {
                    return Err(bad());
                }
                params.insert(name, Mat::new(rows, cols, values)?);
                expected_offset += len;
            } else if !line.trim().is_empty() {
                return Err(bad());
            }
        }
        if data.len() != expected_offset {
            return Err(parse(
                data_start + expected_offset,
                ParseErrorKind::TrailingBytes(data.len() - expected_offset),
            ));
        }
        Ok((params, meta))
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_bytes(meta))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Vec<(String, String)>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Lazily places parameters on a tape. Trainable parameters become
/// gradient-tracking leaves; the rest are constants.
pub struct Binder<'a> {
    params: &'a ModelParams,
    trainable: Vec<bool>,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ModelParams, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), params.len());
        Self {
            params,
            trainable,
            vars: vec![None; params.len()],
        }
    }

    /// Every parameter is a constant.
    pub fn frozen(params: &'a ModelParams) -> Self {
        Self::new(params, vec![false; params.len()])
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(self.params.get(id).clone(), self.trainable[id.0]);
        self.vars[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients; `None` for parameters that were frozen,
    /// never bound, or did not influence the output.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Mat>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelParams {
        let mut p = ModelParams::new();
        p.insert(
            "a.w",
            Mat::from_fn(2, 3, |r, c| (r * 3 + c) as f64 * 0.5 - 1.0),
        );
        p.insert("b", Mat::scalar(f64::MIN_POSITIVE));
        p
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = sample();
        let meta = vec![("align_dim".to_string(), "8".to_string())];
        let bytes = p.to_checkpoint_bytes(&meta);
        let (q, m) = ModelParams::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta, m);
        assert_eq!(q.to_checkpoint_bytes(&m), bytes);
    }

    #[test]
    fn checkpoint_truncation_is_rejected() {
        let bytes = sample().to_checkpoint_bytes(&[]);
        for cut in 0..bytes.len() {
            assert!(ModelParams::from_checkpoint_bytes(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            ModelParams::from_checkpoint_bytes(&extra),
            Err(Error::Parse {
                kind: ParseErrorKind::TrailingBytes(1),
                ..
            })
        ));
    }

    #[test]
    fn binder_tracks_only_trainable() {
        let p = sample();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&p, vec![true, false]);
        let a = binder.var(&mut tape, ParamId(0));
        let b = binder.var(&mut tape, ParamId(1));
        assert!(tape.requires_grad(a));
        assert!(!tape.requires_grad(b));
        assert_eq!(binder.var(&mut tape, ParamId(0)), a);
    }
}
