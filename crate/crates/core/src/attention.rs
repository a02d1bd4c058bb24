//! Temporal softmax attention: projections, scaled dot-product scores,
//! softmax, optional residual, sinusoidal positional encoding, a multi-head
//! wrapper, and the three diagonal regularizers (mask, dropout, penalty).

use crate::error::{Error, Result};
use crate::linalg::{softmax_slice, Matrix, Vector, NEG_LARGE};
use crate::rng::{mix, SplitMix64};

/// Projection weights of one attention head.
///
/// Conventions: an input sequence is a T x d_model matrix whose rows are
/// time steps; q_i = Wq x_i, so Q = X Wqᵀ. Projections carry no bias.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub wq: Matrix, // d_k x d_model
    pub wk: Matrix, // d_k x d_model
    pub wv: Matrix, // d_v x d_model
}

impl AttnWeights {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        if wq.shape() != wk.shape() || wq.cols() != wv.cols() {
            return Err(Error::dim(
                "AttnWeights::new",
                format!(
                    "Wq {:?}, Wk {:?}, Wv {:?}",
                    wq.shape(),
                    wk.shape(),
                    wv.shape()
                ),
            ));
        }
        Ok(AttnWeights { wq, wk, wv })
    }

    /// Seeded init, uniform in [-1/sqrt(d_model), +1/sqrt(d_model)].
    pub fn init(d_model: usize, d_k: usize, d_v: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut mat = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.uniform(-bound, bound));
        AttnWeights {
            wq: mat(d_k, d_model),
            wk: mat(d_k, d_model),
            wv: mat(d_v, d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.cols()
    }

    pub fn d_k(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_v(&self) -> usize {
        self.wv.rows()
    }

    pub fn n_params(&self) -> usize {
        self.wq.rows() * self.wq.cols() + self.wk.rows() * self.wk.cols()
            + self.wv.rows() * self.wv.cols()
    }
}

/// Diagonal regularizer applied to the attention scores or weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegKind {
    None,
    /// e_ii := NEG_LARGE before softmax; alpha_ii becomes exactly 0.
    DiagMask,
    /// Inverted dropout on alpha_ii, applied after softmax, train mode only.
    DiagDropout { p: f64 },
    /// e_ii += lambda before softmax.
    DiagPenalty { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularizer {
    pub kind: RegKind,
    /// Seed for the dropout stream; ignored by the other kinds.
    pub rng_seed: u64,
}

impl Regularizer {
    pub fn none() -> Self {
        Regularizer {
            kind: RegKind::None,
            rng_seed: 0,
        }
    }

    pub fn mask() -> Self {
        Regularizer {
            kind: RegKind::DiagMask,
            rng_seed: 0,
        }
    }

    pub fn dropout(p: f64, rng_seed: u64) -> Self {
        Regularizer {
            kind: RegKind::DiagDropout { p },
            rng_seed,
        }
    }

    pub fn penalty(lambda: f64) -> Self {
        Regularizer {
            kind: RegKind::DiagPenalty { lambda },
            rng_seed: 0,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.kind, RegKind::DiagDropout { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            RegKind::DiagDropout { p } if !(0.0..=1.0).contains(&p) => Err(Error::Config(
                format!("dropout probability must be in [0,1], got {p}"),
            )),
            RegKind::DiagPenalty { lambda } if !lambda.is_finite() => {
                Err(Error::Config("penalty lambda must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Same regularizer with a re-derived dropout stream for a sub-component
    /// (head index, node index, ...). No-op for deterministic kinds.
    pub fn with_substream(&self, index: u64) -> Regularizer {
        Regularizer {
            kind: self.kind,
            rng_seed: mix(self.rng_seed, index),
        }
    }
}

/// Positional encoding scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeScheme {
    None,
    AbsoluteSinusoidal,
}

/// One forward pass worth of intermediates.
#[derive(Debug, Clone)]
pub struct AttnTrace {
    /// Input sequence (T x d_model), after any positional encoding.
    pub x: Matrix,
    pub q: Matrix, // T x d_k
    pub k: Matrix, // T x d_k
    pub v: Matrix, // T x d_v
    /// Raw scores after regularization of the scores (mask / penalty).
    pub e: Matrix, // T x T
    /// Attention weights actually used for the value sum (dropout included).
    pub alpha: Matrix, // T x T
    /// Softmax output before diagonal dropout; equals `alpha` otherwise.
    pub alpha_pre_dropout: Matrix,
    /// Multiplier applied to each diagonal alpha entry by dropout
    /// (1 everywhere when dropout was not applied).
    pub diag_scale: Vector,
    /// h_i = sum_m alpha_im v_m (T x d_v), before any residual.
    pub h: Matrix,
    /// h_i + x_i when the residual is on, otherwise equal to `h`.
    pub output: Matrix,
    pub residual: bool,
}

impl AttnTrace {
    pub fn seq_len(&self) -> usize {
        self.x.rows()
    }
}

/// Adds `lambda` to every diagonal score; off-diagonal untouched.
pub fn apply_diag_penalty(e: &Matrix, lambda: f64) -> Matrix {
    assert_eq!(e.rows(), e.cols(), "penalty needs a square score matrix");
    let mut out = e.clone();
    for i in 0..out.rows() {
        let v = out.get(i, i) + lambda;
        out.set(i, i, v);
    }
    out
}

/// Sets every diagonal score to NEG_LARGE so the subsequent softmax gives
/// the diagonal exactly zero weight. A single-step sequence would be left
/// with an empty softmax support, so that is an error.
pub fn apply_diag_mask(e: &Matrix) -> Result<Matrix> {
    assert_eq!(e.rows(), e.cols(), "mask needs a square score matrix");
    if e.rows() < 2 {
        return Err(Error::MaskSingleStep);
    }
    let mut out = e.clone();
    for i in 0..out.rows() {
        out.set(i, i, NEG_LARGE);
    }
    Ok(out)
}

/// Inverted dropout on the diagonal of a row-stochastic matrix: each
/// diagonal entry is zeroed independently with probability `p`, survivors
/// are scaled by 1/(1-p). Rows are not renormalized. With p = 1 the scale
/// step is skipped and every diagonal entry becomes 0.
///
/// Returns the dropped matrix and the per-row multiplier that was applied.
pub fn apply_diag_dropout(alpha: &Matrix, p: f64, seed: u64) -> (Matrix, Vector) {
    assert_eq!(alpha.rows(), alpha.cols(), "dropout needs a square matrix");
    assert!((0.0..=1.0).contains(&p), "p must be a probability");
    let mut out = alpha.clone();
    let mut scale = vec![1.0; alpha.rows()];
    if p == 0.0 {
        return (out, Vector::from(scale));
    }
    let mut rng = SplitMix64::new(seed);
    for (i, s) in scale.iter_mut().enumerate() {
        let drop = rng.next_f64() < p;
        *s = if drop {
            0.0
        } else if p < 1.0 {
            1.0 / (1.0 - p)
        } else {
            1.0
        };
        let v = out.get(i, i) * *s;
        out.set(i, i, v);
    }
    (out, Vector::from(scale))
}

/// Fixed sinusoidal positional encoding table (T x d_model):
/// PE[t][2i] = sin(t / 10000^(2i/d_model)), PE[t][2i+1] = cos(same).
pub fn sinusoidal_table(t_len: usize, d_model: usize) -> Result<Matrix> {
    if d_model % 2 != 0 {
        return Err(Error::OddDModel(d_model));
    }
    let mut pe = Matrix::zeros(t_len, d_model);
    for t in 0..t_len {
        for i in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe.set(t, 2 * i, angle.sin());
            pe.set(t, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// X + PE under the chosen scheme. `None` returns X untouched (and accepts
/// any d_model); the sinusoidal scheme requires even d_model.
pub fn positional_encode(x: &Matrix, scheme: PeScheme) -> Result<Matrix> {
    match scheme {
        PeScheme::None => Ok(x.clone()),
        PeScheme::AbsoluteSinusoidal => {
            let pe = sinusoidal_table(x.rows(), x.cols())?;
            Ok(x.add(&pe))
        }
    }
}

/// Single-head temporal attention forward pass.
///
/// Scores e_ij = q_iᵀ k_j / sqrt(d_k) are regularized (mask / penalty)
/// before the softmax; diagonal dropout acts on the softmax output and only
/// when `train_mode` is set. With `residual` the per-step output is
/// h_i + x_i, which requires d_v = d_model.
pub fn attn_forward(
    x: &Matrix,
    w: &AttnWeights,
    reg: &Regularizer,
    residual: bool,
    train_mode: bool,
) -> Result<AttnTrace> {
    let t_len = x.rows();
    if t_len == 0 {
        return Err(Error::dim("attn_forward", "empty sequence"));
    }
    if x.cols() != w.d_model() {
        return Err(Error::dim(
            "attn_forward",
            format!("X has {} columns, weights expect {}", x.cols(), w.d_model()),
        ));
    }
    if residual && w.d_v() != w.d_model() {
        return Err(Error::ResidualShape {
            d_v: w.d_v(),
            d_model: w.d_model(),
        });
    }
    reg.validate()?;

    let q = x.matmul_nt(&w.wq)?;
    let k = x.matmul_nt(&w.wk)?;
    let v = x.matmul_nt(&w.wv)?;

    let inv_sqrt_dk = 1.0 / (w.d_k() as f64).sqrt();
    let mut e = q.matmul_nt(&k)?.scale(inv_sqrt_dk);

    e = match reg.kind {
        RegKind::None | RegKind::DiagDropout { .. } => e,
        RegKind::DiagMask => apply_diag_mask(&e)?,
        RegKind::DiagPenalty { lambda } => apply_diag_penalty(&e, lambda),
    };

    let mut alpha = Matrix::zeros(t_len, t_len);
    for i in 0..t_len {
        let row = softmax_slice(e.row(i))?;
        alpha.row_mut(i).copy_from_slice(&row);
    }
    let alpha_pre_dropout = alpha.clone();

    let mut diag_scale = Vector::from(vec![1.0; t_len]);
    if train_mode {
        if let RegKind::DiagDropout { p } = reg.kind {
            let (dropped, scale) = apply_diag_dropout(&alpha, p, reg.rng_seed);
            alpha = dropped;
            diag_scale = scale;
        }
    }

    let h = alpha.matmul(&v)?;
    let output = if residual { h.add(x) } else { h.clone() };

    Ok(AttnTrace {
        x: x.clone(),
        q,
        k,
        v,
        e,
        alpha,
        alpha_pre_dropout,
        diag_scale,
        h,
        output,
        residual,
    })
}

/// Multi-head wrapper: per-head attention (no per-head residual), heads
/// concatenated along the feature axis and projected by `wo`
/// (d_model x heads*d_v); the residual, when on, is added after the
/// projection. Per-head dropout streams are derived from the regularizer
/// seed and the head index.
pub fn multihead_forward(
    x: &Matrix,
    heads: &[AttnWeights],
    wo: &Matrix,
    reg: &Regularizer,
    residual: bool,
    train_mode: bool,
) -> Result<(Matrix, Vec<AttnTrace>)> {
    if heads.is_empty() {
        return Err(Error::dim("multihead_forward", "no heads"));
    }
    let d_model = heads[0].d_model();
    if heads.iter().any(|h| h.d_model() != d_model) {
        return Err(Error::dim(
            "multihead_forward",
            "heads disagree on d_model",
        ));
    }
    if x.cols() != d_model {
        return Err(Error::dim(
            "multihead_forward",
            format!("X has {} columns, heads expect {d_model}", x.cols()),
        ));
    }
    let concat_dim: usize = heads.iter().map(|h| h.d_v()).sum();
    if wo.cols() != concat_dim || wo.rows() != d_model {
        return Err(Error::dim(
            "multihead_forward",
            format!(
                "Wo is {:?}, expected {}x{}",
                wo.shape(),
                d_model,
                concat_dim
            ),
        ));
    }

    let t_len = x.rows();
    let mut traces = Vec::with_capacity(heads.len());
    let mut concat = Matrix::zeros(t_len, concat_dim);
    let mut offset = 0;
    for (h_idx, w) in heads.iter().enumerate() {
        let head_reg = reg.with_substream(h_idx as u64);
        let trace = attn_forward(x, w, &head_reg, false, train_mode)?;
        for t in 0..t_len {
            concat.row_mut(t)[offset..offset + w.d_v()].copy_from_slice(trace.h.row(t));
        }
        offset += w.d_v();
        traces.push(trace);
    }

    let mut out = concat.matmul_nt(wo)?;
    if residual {
        out = out.add(x);
    }
    Ok((out, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn zero_scores_give_uniform_alpha_and_mean_values() {
        let d = 4;
        let t = 5;
        let mut rng = SplitMix64::new(1);
        let x = random_matrix(&mut rng, t, d);
        let w = AttnWeights::new(
            Matrix::zeros(d, d),
            Matrix::zeros(d, d),
            random_matrix(&mut rng, d, d),
        )
        .unwrap();
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        for i in 0..t {
            for j in 0..t {
                assert!((trace.alpha.get(i, j) - 1.0 / t as f64).abs() < 1e-15);
            }
        }
        // h_i = mean of the value vectors
        let mut mean = vec![0.0; d];
        for m in 0..t {
            for (c, acc) in mean.iter_mut().enumerate() {
                *acc += trace.v.get(m, c) / t as f64;
            }
        }
        for i in 0..t {
            for c in 0..d {
                assert!((trace.h.get(i, c) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_no_regularizer() {
        let d = 3;
        let mut rng = SplitMix64::new(2);
        let x = random_matrix(&mut rng, 1, d);
        let w = AttnWeights::init(d, d, d, 7);
        let trace = attn_forward(&x, &w, &Regularizer::none(), true, false).unwrap();
        assert_eq!(trace.alpha.get(0, 0), 1.0);
        let expect = w.wv.matvec(&x.row_vec(0));
        for c in 0..d {
            assert!((trace.h.get(0, c) - expect.get(c)).abs() < 1e-14);
            assert!((trace.output.get(0, c) - (expect.get(c) + x.get(0, c))).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_matches_per_definition_reference() {
        // step-by-step reference computed with explicit loops
        let (t, d) = (4, 8);
        let mut rng = SplitMix64::new(3);
        let x = random_matrix(&mut rng, t, d);
        let w = AttnWeights::init(d, d, d, 11);
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();

        for i in 0..t {
            // q_i, k_j, v_j from definitions
            let qi: Vec<f64> = (0..d)
                .map(|r| (0..d).map(|c| w.wq.get(r, c) * x.get(i, c)).sum())
                .collect();
            let mut scores = vec![0.0; t];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj: Vec<f64> = (0..d)
                    .map(|r| (0..d).map(|c| w.wk.get(r, c) * x.get(j, c)).sum())
                    .collect();
                *s = qi
                    .iter()
                    .zip(&kj)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / (d as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut h = vec![0.0; d];
            for (m, em) in exps.iter().enumerate() {
                let vm: Vec<f64> = (0..d)
                    .map(|r| (0..d).map(|c| w.wv.get(r, c) * x.get(m, c)).sum())
                    .collect();
                for (c, acc) in h.iter_mut().enumerate() {
                    *acc += em / z * vm[c];
                }
            }
            for c in 0..d {
                assert!(
                    (trace.h.get(i, c) - h[c]).abs() < 1e-12,
                    "h[{i}][{c}]: {} vs {}",
                    trace.h.get(i, c),
                    h[c]
                );
            }
        }
    }

    #[test]
    fn trace_invariants_hold() {
        let mut rng = SplitMix64::new(4);
        let (t, d) = (6, 8);
        let x = random_matrix(&mut rng, t, d);
        let w = AttnWeights::init(d, 5, 7, 13);
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        // raw scores
        for i in 0..t {
            for j in 0..t {
                let e = trace.q.row_vec(i).dot(&trace.k.row_vec(j)) / (5f64).sqrt();
                assert!((trace.e.get(i, j) - e).abs() < 1e-12);
            }
        }
        // row sums and the H identity
        for i in 0..t {
            let sum: f64 = trace.alpha.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for c in 0..7 {
                let h: f64 = (0..t).map(|m| trace.alpha.get(i, m) * trace.v.get(m, c)).sum();
                assert!((trace.h.get(i, c) - h).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn residual_requires_square_values() {
        let mut rng = SplitMix64::new(5);
        let x = random_matrix(&mut rng, 3, 4);
        let w = AttnWeights::init(4, 4, 3, 1);
        let err = attn_forward(&x, &w, &Regularizer::none(), true, false);
        assert!(matches!(err, Err(Error::ResidualShape { .. })));
    }

    #[test]
    fn penalty_examples() {
        let e0 = Matrix::zeros(3, 3);
        assert_eq!(apply_diag_penalty(&e0, 0.0), e0);
        let p = apply_diag_penalty(&e0, -0.1);
        for i in 0..3 {
            assert_eq!(p.get(i, i), -0.1);
        }
        let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let p = apply_diag_penalty(&e, -0.1);
        assert_eq!(p.get(0, 0), 0.9);
        assert_eq!(p.get(0, 1), 2.0);
        assert_eq!(p.get(1, 0), 3.0);
        assert_eq!(p.get(1, 1), 3.9);
    }

    #[test]
    fn penalty_strictly_shrinks_diagonal_weight() {
        let mut rng = SplitMix64::new(6);
        for _ in 0..20 {
            let t = 2 + rng.below(6);
            let x = random_matrix(&mut rng, t, 6);
            let w = AttnWeights::init(6, 6, 6, rng.next_u64());
            let base = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
            let pen = attn_forward(&x, &w, &Regularizer::penalty(-0.1), false, false).unwrap();
            for i in 0..t {
                assert!(pen.alpha.get(i, i) < base.alpha.get(i, i));
            }
        }
    }

    #[test]
    fn mask_zeroes_diagonal_rows_still_stochastic() {
        let e = Matrix::zeros(2, 2);
        let m = apply_diag_mask(&e).unwrap();
        let a0 = softmax_slice(m.row(0)).unwrap();
        assert_eq!(a0, vec![0.0, 1.0]);
        let a1 = softmax_slice(m.row(1)).unwrap();
        assert_eq!(a1, vec![1.0, 0.0]);

        let mut rng = SplitMix64::new(7);
        let x = random_matrix(&mut rng, 3, 4);
        let w = AttnWeights::init(4, 4, 4, 3);
        let trace = attn_forward(&x, &w, &Regularizer::mask(), false, false).unwrap();
        for i in 0..3 {
            // stored scores reflect the applied regularization
            assert_eq!(trace.e.get(i, i), NEG_LARGE);
            assert_eq!(trace.alpha.get(i, i), 0.0);
            let sum: f64 = trace.alpha.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_on_single_step_is_error() {
        let e = Matrix::zeros(1, 1);
        assert!(matches!(apply_diag_mask(&e), Err(Error::MaskSingleStep)));
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let w = AttnWeights::init(2, 2, 2, 1);
        assert!(attn_forward(&x, &w, &Regularizer::mask(), false, false).is_err());
    }

    #[test]
    fn dropout_edge_cases() {
        let mut rng = SplitMix64::new(8);
        let t = 5;
        let mut alpha = Matrix::from_fn(t, t, |_, _| rng.uniform(0.01, 1.0));
        for i in 0..t {
            let s: f64 = alpha.row(i).iter().sum();
            for j in 0..t {
                let v = alpha.get(i, j) / s;
                alpha.set(i, j, v);
            }
        }
        let (same, scale) = apply_diag_dropout(&alpha, 0.0, 1);
        assert_eq!(same, alpha);
        assert!(scale.as_slice().iter().all(|&s| s == 1.0));

        let (gone, _) = apply_diag_dropout(&alpha, 1.0, 1);
        for i in 0..t {
            assert_eq!(gone.get(i, i), 0.0);
            for j in 0..t {
                if i != j {
                    assert_eq!(gone.get(i, j), alpha.get(i, j));
                }
            }
        }
    }

    #[test]
    fn dropout_rate_within_three_sigma() {
        let t = 12;
        let p = 0.2;
        let alpha = Matrix::from_fn(t, t, |_, _| 1.0 / t as f64);
        let trials = 10_000usize;
        let mut zeroed = 0usize;
        for trial in 0..trials {
            let (dropped, _) = apply_diag_dropout(&alpha, p, mix(42, trial as u64));
            for i in 0..t {
                if dropped.get(i, i) == 0.0 {
                    zeroed += 1;
                }
            }
        }
        let n = (trials * t) as f64;
        let expect = n * p;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!(
            (zeroed as f64 - expect).abs() < 3.0 * sigma,
            "zeroed {zeroed}, expected {expect} +- {sigma}"
        );
    }

    #[test]
    fn dropout_preserves_diagonal_in_expectation() {
        let t = 4;
        let p = 0.3;
        let alpha = Matrix::from_fn(t, t, |i, j| if i == j { 0.4 } else { 0.2 });
        let trials = 20_000;
        let mut mean_diag = vec![0.0; t];
        for trial in 0..trials {
            let (dropped, _) = apply_diag_dropout(&alpha, p, mix(9, trial as u64));
            for (i, m) in mean_diag.iter_mut().enumerate() {
                *m += dropped.get(i, i) / trials as f64;
            }
        }
        for m in mean_diag {
            assert!((m - 0.4).abs() < 0.01, "mean diagonal {m}");
        }
    }

    #[test]
    fn dropout_ignored_outside_train_mode() {
        let mut rng = SplitMix64::new(10);
        let x = random_matrix(&mut rng, 4, 4);
        let w = AttnWeights::init(4, 4, 4, 5);
        let eval = attn_forward(&x, &w, &Regularizer::dropout(0.9, 123), false, false).unwrap();
        let base = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        assert_eq!(eval.alpha, base.alpha);
    }

    #[test]
    fn shift_invariance_of_rows() {
        let mut rng = SplitMix64::new(11);
        let t = 5;
        let e = Matrix::from_fn(t, t, |_, _| rng.uniform(-2.0, 2.0));
        let mut shifted = e.clone();
        for j in 0..t {
            let v = shifted.get(2, j) + 3.7;
            shifted.set(2, j, v);
        }
        let a = softmax_slice(e.row(2)).unwrap();
        let b = softmax_slice(shifted.row(2)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pe_row_zero_is_sin_cos_interleave() {
        let pe = sinusoidal_table(3, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe.get(0, 2 * i), 0.0);
            assert_eq!(pe.get(0, 2 * i + 1), 1.0);
        }
    }

    #[test]
    fn pe_values_match_direct_formula() {
        let pe = sinusoidal_table(2, 4).unwrap();
        // t = 1, d_model = 4: angles 1/10000^0 and 1/10000^(1/2)
        let a0 = 1.0f64;
        let a1 = 1.0 / 10000f64.powf(0.5);
        assert!((pe.get(1, 0) - a0.sin()).abs() < 1e-15);
        assert!((pe.get(1, 1) - a0.cos()).abs() < 1e-15);
        assert!((pe.get(1, 2) - a1.sin()).abs() < 1e-15);
        assert!((pe.get(1, 3) - a1.cos()).abs() < 1e-15);
    }

    #[test]
    fn pe_none_identity_and_odd_error() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        assert_eq!(positional_encode(&x, PeScheme::None).unwrap(), x);
        assert!(matches!(
            positional_encode(&x, PeScheme::AbsoluteSinusoidal),
            Err(Error::OddDModel(3))
        ));
    }

    #[test]
    fn multihead_single_head_identity_projection_reduces() {
        let d = 6;
        let mut rng = SplitMix64::new(12);
        let x = random_matrix(&mut rng, 4, d);
        let w = AttnWeights::init(d, d, d, 17);
        let single = attn_forward(&x, &w, &Regularizer::none(), true, false).unwrap();
        let (out, traces) = multihead_forward(
            &x,
            std::slice::from_ref(&w),
            &Matrix::identity(d),
            &Regularizer::none(),
            true,
            false,
        )
        .unwrap();
        assert_eq!(traces.len(), 1);
        assert!(out.sub(&single.output).max_abs() < 1e-12);
    }

    #[test]
    fn multihead_identical_heads_identical_traces() {
        let d = 4;
        let mut rng = SplitMix64::new(13);
        let x = random_matrix(&mut rng, 3, d);
        let w = AttnWeights::init(d, 2, 2, 3);
        let wo = Matrix::from_fn(d, 4, |_, _| rng.uniform(-1.0, 1.0));
        let (_, traces) =
            multihead_forward(&x, &[w.clone(), w], &wo, &Regularizer::none(), false, false)
                .unwrap();
        assert_eq!(traces[0].alpha, traces[1].alpha);
        assert_eq!(traces[0].h, traces[1].h);
    }

    #[test]
    fn multihead_matches_concat_project_reference() {
        let d = 8;
        let n_heads = 8;
        let d_v = 2;
        let mut rng = SplitMix64::new(14);
        let x = random_matrix(&mut rng, 5, d);
        let heads: Vec<AttnWeights> = (0..n_heads)
            .map(|h| AttnWeights::init(d, 2, d_v, 100 + h as u64))
            .collect();
        let wo = Matrix::from_fn(d, n_heads * d_v, |_, _| rng.uniform(-0.5, 0.5));
        let (out, traces) =
            multihead_forward(&x, &heads, &wo, &Regularizer::none(), true, false).unwrap();

        // reference: run each head independently, concatenate, project, add x
        for t in 0..5 {
            let mut concat = Vec::new();
            for trace in &traces {
                concat.extend_from_slice(trace.h.row(t));
            }
            for r in 0..d {
                let proj: f64 = concat
                    .iter()
                    .enumerate()
                    .map(|(c, v)| wo.get(r, c) * v)
                    .sum();
                let expect = proj + x.get(t, r);
                assert!((out.get(t, r) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multihead_shape_mismatch_errors() {
        let x = Matrix::zeros(3, 4);
        let heads = vec![AttnWeights::init(4, 2, 2, 1)];
        let wo = Matrix::zeros(4, 3); // wrong concat dim
        assert!(multihead_forward(&x, &heads, &wo, &Regularizer::none(), false, false).is_err());
    }
}
