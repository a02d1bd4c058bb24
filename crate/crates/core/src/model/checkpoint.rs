//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "TEMPATTN"
//! version      u32      currently 1
//! dims         10 x u32 n_nodes d_x d_model n_heads d_k d_v d_emb d_gc w_in h_out
//! regularizer  u8 kind (0 none, 1 mask, 2 dropout, 3 penalty), f64 param, u64 seed
//! flags        u8 residual, u8 pe (0 none, 1 sinusoidal), u8 shared graph weights
//! run_seed     u64
//! scaler       d_x x f64 means, d_x x f64 stds
//! probe        u8 flag; if 1: n_nodes matrices (w_in x d_x) of f64
//! params       per tensor in the documented order: u32 rows, u32 cols, f64 data
//! ```

use super::{ModelConfig, TnSModel};
use crate::attention::{AttnWeights, PeScheme, RegKind, Regularizer};
use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::export::write_atomic;
use crate::linalg::Matrix;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"TEMPATTN";
pub const VERSION: u32 = 1;

/// A model plus the context needed to reproduce its outputs: the data
/// scaler, the run seed, and an optional probe window (normalized per-node
/// inputs) for attention export.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TnSModel,
    pub scaler: Scaler,
    pub run_seed: u64,
    pub probe: Option<Vec<Matrix>>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for &v in m.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if rows * cols > 100_000_000 {
            return Err(Error::Checkpoint("implausible tensor size".into()));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let m = &ckpt.model;
    let cfg = &m.cfg;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    for dim in [
        cfg.n_nodes,
        cfg.d_x,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_k,
        cfg.d_v,
        cfg.d_emb,
        cfg.d_gc,
        cfg.w_in,
        cfg.h_out,
    ] {
        w.u32(dim as u32);
    }
    let (kind, param) = match cfg.reg.kind {
        RegKind::None => (0u8, 0.0),
        RegKind::DiagMask => (1, 0.0),
        RegKind::DiagDropout { p } => (2, p),
        RegKind::DiagPenalty { lambda } => (3, lambda),
    };
    w.u8(kind);
    w.f64(param);
    w.u64(cfg.reg.rng_seed);
    w.u8(cfg.residual as u8);
    w.u8(match cfg.pe {
        PeScheme::None => 0,
        PeScheme::AbsoluteSinusoidal => 1,
    });
    w.u8(cfg.shared_graph_weights as u8);
    w.u64(ckpt.run_seed);
    for &v in &ckpt.scaler.mean {
        w.f64(v);
    }
    for &v in &ckpt.scaler.std {
        w.f64(v);
    }
    match &ckpt.probe {
        None => w.u8(0),
        Some(mats) => {
            w.u8(1);
            for m in mats {
                w.matrix(m);
            }
        }
    }
    for p in m.param_refs() {
        w.matrix(p);
    }
    write_atomic(path, &w.buf)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let mut dims = [0usize; 10];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [n_nodes, d_x, d_model, n_heads, d_k, d_v, d_emb, d_gc, w_in, h_out] = dims;
    let kind = r.u8()?;
    let param = r.f64()?;
    let reg_seed = r.u64()?;
    let reg = Regularizer {
        kind: match kind {
            0 => RegKind::None,
            1 => RegKind::DiagMask,
            2 => RegKind::DiagDropout { p: param },
            3 => RegKind::DiagPenalty { lambda: param },
            other => {
                return Err(Error::Checkpoint(format!("unknown regularizer tag {other}")))
            }
        },
        rng_seed: reg_seed,
    };
    let residual = r.u8()? != 0;
    let pe = match r.u8()? {
        0 => PeScheme::None,
        1 => PeScheme::AbsoluteSinusoidal,
        other => return Err(Error::Checkpoint(format!("unknown pe tag {other}"))),
    };
    let shared_graph_weights = r.u8()? != 0;
    let run_seed = r.u64()?;
    let mut mean = Vec::with_capacity(d_x);
    for _ in 0..d_x {
        mean.push(r.f64()?);
    }
    let mut std = Vec::with_capacity(d_x);
    for _ in 0..d_x {
        std.push(r.f64()?);
    }
    let probe = if r.u8()? == 1 {
        let mut mats = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let m = r.matrix()?;
            if m.shape() != (w_in, d_x) {
                return Err(Error::Checkpoint("probe shape mismatch".into()));
            }
            mats.push(m);
        }
        Some(mats)
    } else {
        None
    };

    let cfg = ModelConfig {
        n_nodes,
        d_x,
        d_model,
        n_heads,
        d_k,
        d_v,
        d_emb,
        d_gc,
        w_in,
        h_out,
        reg,
        residual,
        pe,
        shared_graph_weights,
    };

    let expect_shapes: Vec<(usize, usize)> = {
        let mut v = vec![(d_model, d_x), (1, d_model)];
        for _ in 0..n_heads {
            v.push((d_k, d_model));
            v.push((d_k, d_model));
            v.push((d_v, d_model));
        }
        v.extend([
            (d_model, n_heads * d_v),
            (n_nodes, d_emb),
            (n_nodes, d_emb),
            (d_gc, d_model),
            (d_gc, d_model),
            (1, d_gc),
            (h_out, w_in * d_gc),
            (1, h_out),
        ]);
        v
    };
    let mut tensors = Vec::with_capacity(expect_shapes.len());
    for shape in &expect_shapes {
        let m = r.matrix()?;
        if m.shape() != *shape {
            return Err(Error::Checkpoint(format!(
                "tensor shape {:?} does not match expected {:?}",
                m.shape(),
                shape
            )));
        }
        tensors.push(m);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }

    let mut it = tensors.into_iter();
    let embed_w = it.next().unwrap();
    let embed_b = it.next().unwrap();
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let wq = it.next().unwrap();
        let wk = it.next().unwrap();
        let wv = it.next().unwrap();
        heads.push(AttnWeights::new(wq, wk, wv)?);
    }
    let model = TnSModel {
        cfg,
        embed_w,
        embed_b,
        heads,
        wo: it.next().unwrap(),
        e1: it.next().unwrap(),
        e2: it.next().unwrap(),
        wg_fwd: it.next().unwrap(),
        wg_bwd: it.next().unwrap(),
        bg: it.next().unwrap(),
        w_out: it.next().unwrap(),
        b_out: it.next().unwrap(),
    };
    Ok(Checkpoint {
        model,
        scaler: Scaler { mean, std },
        run_seed,
        probe,
    })
}
