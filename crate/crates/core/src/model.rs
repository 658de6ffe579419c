//! A trained extractor with its class head, and the `DCKM` checkpoint format.
//!
//! Layout (little-endian): magic `DCKM`, `u32` schema version, `u32 F`,
//! `u32 L`, `L x u32` hidden widths, `u32 d`, `f64` leaky slope, `f64`
//! std floor, `u32 M`, `u32 |R|`, `|R| x u32` active class ids, `u32`
//! merged-row flag, `f64` learning rate, `u64` iterations run, then `f32`
//! tensors in declaration order: per layer weight (row-major) and bias,
//! projection weight and bias, head `W` (`M x d`), and the merged row if
//! flagged.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::corpus::{write_atomic, ByteCursor};
use crate::embedder::{Affine, EmbedderConfig, EmbedderParams};
use crate::error::{Error, Result};
use crate::head::{validate_subset, HeadMatrix};
use crate::schedule::{ClassHead, HeadRow};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Model {
    pub embedder: EmbedderParams<f32>,
    pub head: ClassHead<f32>,
    /// Classes still owning a head row, ascending; all `M` unless a
    /// permanent drop mode removed some.
    pub active: Vec<usize>,
    /// Learning rate in effect at the end of the last run.
    pub lr: f64,
    /// Optimizer steps taken over the model's lifetime.
    pub iterations: u64,
}

impl Model {
    pub fn init(config: EmbedderConfig, n_classes: usize, lr: f64, seed: u64) -> Result<Self> {
        let embedder = EmbedderParams::init(config, seed)?;
        let head = HeadMatrix::<f32>::init(n_classes, embedder.embed_dim(), seed)?;
        Ok(Model {
            embedder,
            head: ClassHead::new(head.weight),
            active: (0..n_classes).collect(),
            lr,
            iterations: 0,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    /// Active class rows plus the combined row if there is one.
    pub fn head_rows(&self) -> Vec<HeadRow> {
        let mut rows: Vec<HeadRow> = self.active.iter().map(|&c| HeadRow::Class(c)).collect();
        if self.head.merged.is_some() {
            rows.push(HeadRow::Merged);
        }
        rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.head.embed_dim() != self.embedder.embed_dim() {
            return Err(Error::Shape(format!(
                "head rows have dim {}, embeddings {}",
                self.head.embed_dim(),
                self.embedder.embed_dim()
            )));
        }
        validate_subset(&self.active, self.n_classes())?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::validation(
                "lr",
                format!("must be finite and > 0, got {}", self.lr),
            ));
        }
        if !(self.embedder.is_finite() && self.head.is_finite()) {
            return Err(Error::Numeric("model holds non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let cfg = self.embedder.config();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let u32_le = |out: &mut Vec<u8>, v: usize, what: &str| -> Result<()> {
            let v = u32::try_from(v).map_err(|_| Error::validation(what, "exceeds u32"))?;
            out.extend_from_slice(&v.to_le_bytes());
            Ok(())
        };
        u32_le(&mut out, CHECKPOINT_VERSION as usize, "version")?;
        u32_le(&mut out, cfg.feat_dim, "feat_dim")?;
        u32_le(&mut out, cfg.hidden.len(), "layers")?;
        for &h in &cfg.hidden {
            u32_le(&mut out, h, "hidden")?;
        }
        u32_le(&mut out, cfg.embed_dim, "embed_dim")?;
        out.extend_from_slice(&cfg.leaky_slope.to_le_bytes());
        out.extend_from_slice(&cfg.eps_std.to_le_bytes());
        u32_le(&mut out, self.n_classes(), "M")?;
        u32_le(&mut out, self.active.len(), "active")?;
        for &c in &self.active {
            u32_le(&mut out, c, "class id")?;
        }
        u32_le(&mut out, usize::from(self.head.merged.is_some()), "merged")?;
        out.extend_from_slice(&self.lr.to_le_bytes());
        out.extend_from_slice(&self.iterations.to_le_bytes());
        for slice in self.embedder.param_slices() {
            push_f32s(&mut out, slice);
        }
        push_f32s(&mut out, self.head.weight.as_slice().expect("standard layout"));
        if let Some(row) = &self.head.merged {
            push_f32s(&mut out, row.as_slice().expect("contiguous"));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        let magic = cur.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"DCKM\"")));
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let feat_dim = cur.u32("F")? as usize;
        let n_layers = cur.u32("L")? as usize;
        if n_layers > 1024 {
            return Err(Error::format(
                cur.pos() as u64,
                format!("implausible layer count {n_layers}"),
            ));
        }
        let hidden = (0..n_layers)
            .map(|_| cur.u32("hidden width").map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let embed_dim = cur.u32("d")? as usize;
        let leaky_slope = cur.f64("leaky slope")?;
        let eps_std = cur.f64("std floor")?;
        let config = EmbedderConfig {
            feat_dim,
            hidden,
            embed_dim,
            leaky_slope,
            eps_std,
        };
        config
            .validate()
            .map_err(|e| Error::format(cur.pos() as u64, format!("bad architecture: {e}")))?;
        let n_classes = cur.u32("M")? as usize;
        let n_active = cur.u32("|R|")? as usize;
        if n_active > n_classes {
            return Err(Error::format(
                cur.pos() as u64,
                format!("|R| = {n_active} exceeds M = {n_classes}"),
            ));
        }
        let active = (0..n_active)
            .map(|_| cur.u32("class id").map(|c| c as usize))
            .collect::<Result<Vec<_>>>()?;
        let merged_flag = cur.u32("merged flag")?;
        if merged_flag > 1 {
            return Err(Error::format(
                cur.pos() as u64,
                format!("merged flag must be 0 or 1, got {merged_flag}"),
            ));
        }
        let lr = cur.f64("lr")?;
        let iterations = cur.u64("iterations")?;

        let mut affine = |out_dim: usize, in_dim: usize, what: &str| -> Result<Affine<f32>> {
            let w = cur.f32s(out_dim * in_dim, what)?;
            let b = cur.f32s(out_dim, what)?;
            Ok(Affine {
                weight: Array2::from_shape_vec((out_dim, in_dim), w).expect("sized"),
                bias: Array1::from(b),
            })
        };
        let mut layers = Vec::with_capacity(n_layers);
        let mut in_dim = config.feat_dim;
        for &h in &config.hidden {
            layers.push(affine(h, in_dim, "layer tensors")?);
            in_dim = h;
        }
        let proj = affine(config.embed_dim, config.pooled_dim(), "projection tensors")?;
        let w = cur.f32s(n_classes * embed_dim, "head matrix")?;
        let merged = if merged_flag == 1 {
            Some(Array1::from(cur.f32s(embed_dim, "merged row")?))
        } else {
            None
        };
        if cur.remaining() != 0 {
            return Err(Error::format(
                cur.pos() as u64,
                format!("{} trailing bytes after checkpoint", cur.remaining()),
            ));
        }
        let model = Model {
            embedder: EmbedderParams::from_parts(config, layers, proj)?,
            head: ClassHead {
                weight: Array2::from_shape_vec((n_classes, embed_dim), w).expect("sized"),
                merged,
            },
            active,
            lr,
            iterations,
        };
        model
            .validate()
            .map_err(|e| Error::format(bytes.len() as u64, format!("invalid checkpoint: {e}")))?;
        Ok(model)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
