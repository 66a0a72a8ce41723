//! Binary checkpoint: everything needed to resume a run after any phase.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "GSFDACKP"
//! version  u32      = 1
//! count    u32      number of entries
//! entry*   key_len u32, key (UTF-8), rows u64, cols u64, rows·cols f64 (LE)
//! ```
//!
//! Keys: `dims` (1×4: input_dim, hidden, feature_dim, classes), one key per
//! parameter (`w1`, `b1`, `w2`, `b2`, `bn_gamma`, `bn_beta`, `w_fl`, `b_fl`,
//! `w_g`, `b_g`), `bn_mean`, `bn_var`, `trainable` (1×10 of 0/1 in the same
//! order), `attention/meta` (domains×3: domain id, scale, frozen) and
//! `attention/embedding` (domains×d). Optional: `source_bn/mean`,
//! `source_bn/var`, and the domain classifier as `dc/w1`, `dc/b1`, `dc/w2`,
//! `dc/b2` plus its extractor copy under `dc/extractor/<key>`.
//! Values are stored as raw bits, so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{NetworkDims, NetworkParams, ParamId};
use crate::numerics::Matrix;
use crate::pipeline::{BnSnapshot, DomainClassifier};
use crate::sda::{DomainAttention, MaskSet};

pub const MAGIC: &[u8; 8] = b"GSFDACKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub masks: MaskSet,
    pub source_bn: Option<BnSnapshot>,
    pub domain_classifier: Option<DomainClassifier>,
}

fn param_key(id: ParamId) -> &'static str {
    match id {
        ParamId::W1 => "w1",
        ParamId::B1 => "b1",
        ParamId::W2 => "w2",
        ParamId::B2 => "b2",
        ParamId::BnGamma => "bn_gamma",
        ParamId::BnBeta => "bn_beta",
        ParamId::Wfl => "w_fl",
        ParamId::Bfl => "b_fl",
        ParamId::Wg => "w_g",
        ParamId::Bg => "b_g",
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Config(format!("bad checkpoint: {}", msg.into()))
}

fn put_params(entries: &mut Vec<(String, Matrix)>, prefix: &str, p: &NetworkParams) {
    let d = p.dims;
    entries.push((
        format!("{prefix}dims"),
        Matrix::row_vector(
            [d.input_dim, d.hidden, d.feature_dim, d.classes]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        ),
    ));
    for id in ParamId::ALL {
        entries.push((format!("{prefix}{}", param_key(id)), p.get(id).clone()));
    }
    entries.push((format!("{prefix}bn_mean"), p.bn_mean.clone()));
    entries.push((format!("{prefix}bn_var"), p.bn_var.clone()));
    entries.push((
        format!("{prefix}trainable"),
        Matrix::row_vector(
            p.trainable
                .iter()
                .map(|&t| f64::from(u8::from(t)))
                .collect(),
        ),
    ));
}

struct Entries(BTreeMap<String, Matrix>);

impl Entries {
    fn take(&mut self, key: &str) -> Result<Matrix> {
        self.0
            .remove(key)
            .ok_or_else(|| corrupt(format!("missing entry '{key}'")))
    }

    fn take_shaped(&mut self, key: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let m = self.take(key)?;
        if m.shape() != (rows, cols) {
            return Err(corrupt(format!(
                "entry '{key}' is {}×{}, expected {rows}×{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }

    fn has(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(corrupt(format!("{what} is not a count: {v}")))
    }
}

fn take_params(e: &mut Entries, prefix: &str) -> Result<NetworkParams> {
    let dims = e.take_shaped(&format!("{prefix}dims"), 1, 4)?;
    let dv = dims.data();
    let dims = NetworkDims {
        input_dim: as_count(dv[0], "input_dim")?,
        hidden: as_count(dv[1], "hidden")?,
        feature_dim: as_count(dv[2], "feature_dim")?,
        classes: as_count(dv[3], "classes")?,
    };
    dims.validate()?;
    let (i, h, d, c) = (dims.input_dim, dims.hidden, dims.feature_dim, dims.classes);
    let mut t = |k: &str, r, cc| e.take_shaped(&format!("{prefix}{k}"), r, cc);
    let params = NetworkParams {
        dims,
        w1: t("w1", h, i)?,
        b1: t("b1", 1, h)?,
        w2: t("w2", h, h)?,
        b2: t("b2", 1, h)?,
        bn_gamma: t("bn_gamma", 1, h)?,
        bn_beta: t("bn_beta", 1, h)?,
        bn_mean: t("bn_mean", 1, h)?,
        bn_var: t("bn_var", 1, h)?,
        w_fl: t("w_fl", d, h)?,
        b_fl: t("b_fl", 1, d)?,
        w_g: t("w_g", c, d)?,
        b_g: t("b_g", 1, c)?,
        trainable: [false; 10],
    };
    let flags = t("trainable", 1, 10)?;
    let mut params = params;
    for (slot, &v) in params.trainable.iter_mut().zip(flags.data()) {
        *slot = match v {
            0.0 => false,
            1.0 => true,
            other => return Err(corrupt(format!("trainable flag {other}"))),
        };
    }
    Ok(params)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Matrix)> = Vec::new();
        put_params(&mut entries, "", &self.params);
        let meta: Vec<Vec<f64>> = self
            .masks
            .attentions
            .iter()
            .map(|a| vec![a.domain_id as f64, a.scale, f64::from(u8::from(a.frozen))])
            .collect();
        let d = self.masks.dim();
        entries.push((
            "attention/meta".into(),
            Matrix::new(meta.len(), 3, meta.concat()).expect("three columns per domain"),
        ));
        let emb: Vec<f64> = self
            .masks
            .attentions
            .iter()
            .flat_map(|a| a.embedding.iter().copied())
            .collect();
        entries.push((
            "attention/embedding".into(),
            Matrix::new(self.masks.n_domains(), d, emb).expect("validated mask set"),
        ));
        if let Some(bn) = &self.source_bn {
            entries.push(("source_bn/mean".into(), bn.mean.clone()));
            entries.push(("source_bn/var".into(), bn.var.clone()));
        }
        if let Some(dc) = &self.domain_classifier {
            entries.push(("dc/w1".into(), dc.w1.clone()));
            entries.push(("dc/b1".into(), dc.b1.clone()));
            entries.push(("dc/w2".into(), dc.w2.clone()));
            entries.push(("dc/b2".into(), dc.b2.clone()));
            put_params(&mut entries, "dc/extractor/", &dc.extractor);
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (key, m) in &entries {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("key is not UTF-8"))?
                .to_string();
            let rows = usize::try_from(r.u64()?).map_err(|_| corrupt("row count overflow"))?;
            let cols = usize::try_from(r.u64()?).map_err(|_| corrupt("column count overflow"))?;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| corrupt(format!("entry '{key}' runs past the end")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if map
                .insert(key.clone(), Matrix::new(rows, cols, data)?)
                .is_some()
            {
                return Err(corrupt(format!("duplicate entry '{key}'")));
            }
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        let mut e = Entries(map);
        let params = take_params(&mut e, "")?;
        let d = params.dims.feature_dim;
        let meta = e.take("attention/meta")?;
        if meta.cols() != 3 || meta.rows() == 0 {
            return Err(corrupt("attention/meta must be domains×3"));
        }
        let emb = e.take_shaped("attention/embedding", meta.rows(), d)?;
        let attentions = meta
            .row_iter()
            .zip(emb.row_iter())
            .map(|(m, row)| {
                Ok(DomainAttention {
                    domain_id: as_count(m[0], "domain id")?,
                    embedding: row.to_vec(),
                    scale: m[1],
                    frozen: m[2] != 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = MaskSet::from_attentions(attentions)?;
        let h = params.dims.hidden;
        let source_bn = if e.has("source_bn/mean") {
            Some(BnSnapshot {
                mean: e.take_shaped("source_bn/mean", 1, h)?,
                var: e.take_shaped("source_bn/var", 1, h)?,
            })
        } else {
            None
        };
        let domain_classifier = if e.has("dc/w1") {
            let w1 = e.take("dc/w1")?;
            let w2 = e.take("dc/w2")?;
            let hidden = w1.rows();
            let dc = DomainClassifier {
                b1: e.take_shaped("dc/b1", 1, hidden)?,
                b2: e.take_shaped("dc/b2", 1, w2.rows())?,
                extractor: take_params(&mut e, "dc/extractor/")?,
                w1,
                w2,
            };
            if dc.w1.cols() != d || dc.w2.cols() != hidden {
                return Err(corrupt("domain classifier shapes do not chain"));
            }
            Some(dc)
        } else {
            None
        };
        if let Some(extra) = e.0.keys().next() {
            return Err(corrupt(format!("unknown entry '{extra}'")));
        }
        Ok(Self {
            params,
            masks,
            source_bn,
            domain_classifier,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(corrupt("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
