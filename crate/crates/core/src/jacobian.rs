//! Exact analytic Jacobians d h_i / d x_j of the attention layer, split into
//! the value, key and query paths, plus a central finite-difference oracle
//! used to verify them.
//!
//! With alpha the (regularized) attention weights, h_i the pre-residual
//! hidden state and kbar_i = sum_k alpha_ik k_k:
//!
//! ```text
//! value path:  alpha_ij * Wv
//! key path:    (alpha_ij / sqrt(d_k)) (v_j - h_i) (Wkᵀ q_i)ᵀ
//! query path:  delta_ij / sqrt(d_k) * sum_m alpha_im v_m (Wqᵀ (k_m - kbar_i))ᵀ
//! ```
//!
//! A diagonal penalty adds a constant to e_ii, so the same forms hold with
//! the penalized alpha. A diagonal mask pins e_ii, which is equivalent to
//! evaluating the forms with alpha_ii = 0. Dropout samples a mask, so there
//! is no Jacobian to speak of; the finite-difference oracle rejects it.

use crate::attention::{attn_forward, AttnTrace, AttnWeights, Regularizer};
use crate::error::{Error, Result};
use crate::linalg::{outer, Matrix, Vector};
use crate::rng::{mix, SplitMix64};

/// The per-(i, j) Jacobian pieces and their totals.
#[derive(Debug, Clone)]
pub struct JacobianParts {
    pub i: usize,
    pub j: usize,
    pub value: Matrix,
    pub key: Matrix,
    pub query: Matrix,
    pub total_no_res: Matrix,
    /// total_no_res + delta_ij I; present only when requested with the
    /// residual flag (which requires d_v = d_model).
    pub total_with_res: Option<Matrix>,
}

fn check_indices(trace: &AttnTrace, i: usize, j: usize) -> Result<()> {
    let t = trace.seq_len();
    if i >= t || j >= t {
        return Err(Error::IndexOutOfRange(format!(
            "(i, j) = ({i}, {j}) for sequence length {t}"
        )));
    }
    Ok(())
}

/// Value path: alpha_ij * Wv.
pub fn jac_value(trace: &AttnTrace, w: &AttnWeights, i: usize, j: usize) -> Result<Matrix> {
    check_indices(trace, i, j)?;
    Ok(w.wv.scale(trace.alpha.get(i, j)))
}

/// Key path: the rank-one matrix (alpha_ij / sqrt(d_k)) (v_j - h_i) ⊗ Wkᵀ q_i.
pub fn jac_key(trace: &AttnTrace, w: &AttnWeights, i: usize, j: usize) -> Result<Matrix> {
    check_indices(trace, i, j)?;
    let coeff = trace.alpha.get(i, j) / (w.d_k() as f64).sqrt();
    let left = trace.v.row_vec(j).sub(&trace.h.row_vec(i));
    let right = w.wk.matvec_t(&trace.q.row_vec(i));
    Ok(outer(&left, &right).scale(coeff))
}

/// Query path, nonzero only on the diagonal:
/// (1 / sqrt(d_k)) sum_m alpha_im v_m ⊗ Wqᵀ (k_m - kbar_i).
pub fn jac_query(trace: &AttnTrace, w: &AttnWeights, i: usize, j: usize) -> Result<Matrix> {
    check_indices(trace, i, j)?;
    let (d_v, d_model) = (w.d_v(), w.d_model());
    if i != j {
        return Ok(Matrix::zeros(d_v, d_model));
    }
    let t = trace.seq_len();
    // kbar_i = sum_k alpha_ik k_k
    let mut kbar = Vector::zeros(w.d_k());
    for m in 0..t {
        for (c, acc) in kbar.as_mut_slice().iter_mut().enumerate() {
            *acc += trace.alpha.get(i, m) * trace.k.get(m, c);
        }
    }
    let mut sum = Matrix::zeros(d_v, d_model);
    for m in 0..t {
        let a = trace.alpha.get(i, m);
        if a == 0.0 {
            continue;
        }
        let centered = trace.k.row_vec(m).sub(&kbar);
        let right = w.wq.matvec_t(&centered);
        let vm = trace.v.row_vec(m);
        sum.add_assign(&outer(&vm, &right).scale(a));
    }
    Ok(sum.scale(1.0 / (w.d_k() as f64).sqrt()))
}

/// All paths and their totals. The residual form adds delta_ij I and
/// requires d_v = d_model.
pub fn jac_total(
    trace: &AttnTrace,
    w: &AttnWeights,
    i: usize,
    j: usize,
    residual: bool,
) -> Result<JacobianParts> {
    check_indices(trace, i, j)?;
    if residual && w.d_v() != w.d_model() {
        return Err(Error::ResidualShape {
            d_v: w.d_v(),
            d_model: w.d_model(),
        });
    }
    let value = jac_value(trace, w, i, j)?;
    let key = jac_key(trace, w, i, j)?;
    let query = jac_query(trace, w, i, j)?;
    let mut total_no_res = value.clone();
    total_no_res.add_assign(&key);
    total_no_res.add_assign(&query);
    let total_with_res = if residual {
        let mut tr = total_no_res.clone();
        if i == j {
            tr.add_assign(&Matrix::identity(w.d_model()));
        }
        Some(tr)
    } else {
        None
    };
    Ok(JacobianParts {
        i,
        j,
        value,
        key,
        query,
        total_no_res,
        total_with_res,
    })
}

/// Jacobian of one softmax row: entries alpha_m (delta_mk - alpha_k).
/// Every row of the result sums to zero.
pub fn softmax_jacobian_row(alpha_row: &Vector) -> Matrix {
    let t = alpha_row.dim();
    let a = alpha_row.as_slice();
    Matrix::from_fn(t, t, |m, k| {
        let delta = if m == k { 1.0 } else { 0.0 };
        a[m] * (delta - a[k])
    })
}

/// Central finite differences of the attention output row i with respect to
/// the input row j: column c holds (out_i(x_jc + h) - out_i(x_jc - h)) / 2h.
///
/// Only deterministic regularizers are allowed; dropout makes the forward
/// pass a random function and is rejected.
pub fn finite_diff_jacobian(
    x: &Matrix,
    w: &AttnWeights,
    reg: &Regularizer,
    residual: bool,
    i: usize,
    j: usize,
    step: f64,
) -> Result<Matrix> {
    if reg.is_stochastic() {
        return Err(Error::NonDeterministicRegularizer);
    }
    assert!(step > 0.0, "step must be positive");
    let t = x.rows();
    if i >= t || j >= t {
        return Err(Error::IndexOutOfRange(format!(
            "(i, j) = ({i}, {j}) for sequence length {t}"
        )));
    }
    let d_model = x.cols();
    let d_v = w.d_v();
    let mut jac = Matrix::zeros(d_v, d_model);
    let mut xp = x.clone();
    for c in 0..d_model {
        let orig = x.get(j, c);
        xp.set(j, c, orig + step);
        let plus = attn_forward(&xp, w, reg, residual, false)?;
        xp.set(j, c, orig - step);
        let minus = attn_forward(&xp, w, reg, residual, false)?;
        xp.set(j, c, orig);
        for r in 0..d_v {
            jac.set(
                r,
                c,
                (plus.output.get(i, r) - minus.output.get(i, r)) / (2.0 * step),
            );
        }
    }
    Ok(jac)
}

// ---------------------------------------------------------------------------
// Agreement suites (shared by the CLI gradcheck command and the test suite)
// ---------------------------------------------------------------------------

/// One random attention configuration drawn for a verification sweep.
#[derive(Debug, Clone, Copy)]
pub struct DrawnConfig {
    pub index: usize,
    pub seed: u64,
    pub t: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub reg: Regularizer,
}

#[derive(Debug, Clone)]
pub struct FdCheckConfig {
    pub n_configs: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub abs_floor: f64,
    /// Pin the sequence length instead of drawing it (reproduction aid).
    pub fixed_t: Option<usize>,
}

impl Default for FdCheckConfig {
    fn default() -> Self {
        FdCheckConfig {
            n_configs: 200,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-5,
            abs_floor: 1e-8,
            fixed_t: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdCheckReport {
    pub n_configs: usize,
    pub n_entries: usize,
    pub max_rel_err: f64,
    /// Raw largest |analytic - fd| before the floor is applied; nonzero
    /// whenever the comparison actually ran.
    pub max_abs_diff: f64,
    pub worst: Option<DrawnConfig>,
    pub passed: bool,
}

/// Relative disagreement with an absolute floor: differences below the floor
/// count as zero, everything else is measured relative to the larger
/// magnitude.
pub fn effective_rel_err(a: f64, b: f64, abs_floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

pub fn draw_config(sweep_seed: u64, index: usize, fixed_t: Option<usize>) -> DrawnConfig {
    let seed = mix(sweep_seed, index as u64);
    let mut rng = SplitMix64::new(seed);
    let drawn_t = 2 + rng.below(7); // 2..=8
    let t = fixed_t.unwrap_or(drawn_t);
    let d_model = 2 + rng.below(15); // 2..=16
    let d_k = 2 + rng.below(15);
    let d_v = 2 + rng.below(15);
    let reg = match index % 3 {
        0 => Regularizer::none(),
        1 => Regularizer::penalty(-0.1),
        _ => Regularizer::mask(),
    };
    DrawnConfig {
        index,
        seed,
        t,
        d_model,
        d_k,
        d_v,
        reg,
    }
}

pub fn instantiate(cfg: &DrawnConfig) -> (Matrix, AttnWeights) {
    let mut rng = SplitMix64::new(mix(cfg.seed, 1));
    let x = Matrix::from_fn(cfg.t, cfg.d_model, |_, _| rng.uniform(-1.0, 1.0));
    let w = AttnWeights::init(cfg.d_model, cfg.d_k, cfg.d_v, mix(cfg.seed, 2));
    (x, w)
}

/// Sweeps random configurations and compares `jac_total` (no residual)
/// against central finite differences, entry by entry, over every (i, j).
pub fn check_total_vs_fd(cfg: &FdCheckConfig) -> Result<FdCheckReport> {
    let mut max_err = 0.0f64;
    let mut max_abs_diff = 0.0f64;
    let mut worst = None;
    let mut n_entries = 0usize;
    for idx in 0..cfg.n_configs {
        let drawn = draw_config(cfg.seed, idx, cfg.fixed_t);
        let (x, w) = instantiate(&drawn);
        let trace = attn_forward(&x, &w, &drawn.reg, false, false)?;
        for j in 0..drawn.t {
            // one FD sweep per j yields rows for every i
            let mut fd_rows: Vec<Matrix> = (0..drawn.t)
                .map(|_| Matrix::zeros(drawn.d_v, drawn.d_model))
                .collect();
            let mut xp = x.clone();
            for c in 0..drawn.d_model {
                let orig = x.get(j, c);
                xp.set(j, c, orig + cfg.step);
                let plus = attn_forward(&xp, &w, &drawn.reg, false, false)?;
                xp.set(j, c, orig - cfg.step);
                let minus = attn_forward(&xp, &w, &drawn.reg, false, false)?;
                xp.set(j, c, orig);
                for i in 0..drawn.t {
                    for r in 0..drawn.d_v {
                        fd_rows[i].set(
                            r,
                            c,
                            (plus.output.get(i, r) - minus.output.get(i, r)) / (2.0 * cfg.step),
                        );
                    }
                }
            }
            for (i, fd) in fd_rows.iter().enumerate() {
                let analytic = jac_total(&trace, &w, i, j, false)?.total_no_res;
                for (a, f) in analytic.data().iter().zip(fd.data()) {
                    n_entries += 1;
                    max_abs_diff = max_abs_diff.max((a - f).abs());
                    let err = effective_rel_err(*a, *f, cfg.abs_floor);
                    if err > max_err {
                        max_err = err;
                        worst = Some(drawn);
                    }
                }
            }
        }
    }
    Ok(FdCheckReport {
        n_configs: cfg.n_configs,
        n_entries,
        max_rel_err: max_err,
        max_abs_diff,
        worst,
        passed: max_err < cfg.tolerance,
    })
}

/// Checks the row-sum identity of the softmax Jacobian on random stochastic
/// rows; returns the largest absolute row sum seen.
pub fn check_softmax_rows(n_rows: usize, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_rows {
        let t = 2 + rng.below(7);
        let scores: Vec<f64> = (0..t).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let alpha = crate::linalg::softmax_row(&Vector::from(scores)).expect("finite scores");
        let jac = softmax_jacobian_row(&alpha);
        for m in 0..t {
            let sum: f64 = jac.row(m).iter().sum();
            worst = worst.max(sum.abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::MatNorm;

    fn random_instance(seed: u64, t: usize, d_model: usize, d_k: usize, d_v: usize)
        -> (Matrix, AttnWeights) {
        let mut rng = SplitMix64::new(seed);
        let x = Matrix::from_fn(t, d_model, |_, _| rng.uniform(-1.0, 1.0));
        let w = AttnWeights::init(d_model, d_k, d_v, mix(seed, 77));
        (x, w)
    }

    #[test]
    fn jac_value_uniform_alpha() {
        let d = 4;
        let t = 5;
        let mut rng = SplitMix64::new(1);
        let x = Matrix::from_fn(t, d, |_, _| rng.uniform(-1.0, 1.0));
        let w = AttnWeights::new(
            Matrix::zeros(d, d),
            Matrix::zeros(d, d),
            AttnWeights::init(d, d, d, 2).wv,
        )
        .unwrap();
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        for i in 0..t {
            for j in 0..t {
                let jv = jac_value(&trace, &w, i, j).unwrap();
                let expect = w.wv.scale(1.0 / t as f64);
                assert!(jv.sub(&expect).max_abs() < 1e-14);
            }
        }
    }

    #[test]
    fn jac_value_masked_diagonal_is_zero() {
        let (x, w) = random_instance(3, 4, 5, 5, 5);
        let trace = attn_forward(&x, &w, &Regularizer::mask(), false, false).unwrap();
        for i in 0..4 {
            assert_eq!(jac_value(&trace, &w, i, i).unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn jac_value_matches_value_only_finite_difference() {
        // value-only pathway: freeze alpha at the base trace, vary only V
        let (x, w) = random_instance(5, 4, 6, 5, 3);
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        let (i, j) = (1, 2);
        let analytic = jac_value(&trace, &w, i, j).unwrap();
        let h = 1e-5;
        let mut xp = x.clone();
        for c in 0..x.cols() {
            let orig = x.get(j, c);
            let eval = |xm: &Matrix| -> Vec<f64> {
                // h_i with frozen alpha, values recomputed from xm
                let v = xm.matmul(&w.wv.transpose()).unwrap();
                (0..w.d_v())
                    .map(|r| {
                        (0..x.rows())
                            .map(|m| trace.alpha.get(i, m) * v.get(m, r))
                            .sum()
                    })
                    .collect()
            };
            xp.set(j, c, orig + h);
            let plus = eval(&xp);
            xp.set(j, c, orig - h);
            let minus = eval(&xp);
            xp.set(j, c, orig);
            for r in 0..w.d_v() {
                let fd = (plus[r] - minus[r]) / (2.0 * h);
                assert!(
                    effective_rel_err(analytic.get(r, c), fd, 1e-9) < 1e-6,
                    "entry ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn jac_key_zero_cases() {
        // Wq = 0 makes q_i = 0 and the right factor vanish
        let d = 4;
        let mut rng = SplitMix64::new(6);
        let x = Matrix::from_fn(3, d, |_, _| rng.uniform(-1.0, 1.0));
        let wk = AttnWeights::init(d, d, d, 8);
        let w = AttnWeights::new(Matrix::zeros(d, d), wk.wk.clone(), wk.wv.clone()).unwrap();
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        assert_eq!(jac_key(&trace, &w, 0, 1).unwrap().max_abs(), 0.0);

        // identical rows of X make every value vector equal, so v_j = h_i
        let x_same = Matrix::from_fn(3, d, |_, c| (c as f64) / 3.0);
        let w2 = AttnWeights::init(d, d, d, 9);
        let trace2 = attn_forward(&x_same, &w2, &Regularizer::none(), false, false).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(jac_key(&trace2, &w2, i, j).unwrap().max_abs() < 1e-14);
            }
        }
    }

    #[test]
    fn jac_query_off_diagonal_exactly_zero() {
        let (x, w) = random_instance(7, 5, 6, 4, 3);
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(jac_query(&trace, &w, i, j).unwrap().max_abs(), 0.0);
                }
            }
        }
    }

    #[test]
    fn jac_query_vanishes_for_equal_keys() {
        // identical input rows -> all keys equal -> centered keys vanish
        let d = 4;
        let x = Matrix::from_fn(4, d, |_, c| 0.3 * (c as f64 + 1.0));
        let w = AttnWeights::init(d, 3, 3, 11);
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        for i in 0..4 {
            assert!(jac_query(&trace, &w, i, i).unwrap().max_abs() < 1e-13);
        }
    }

    #[test]
    fn jac_total_uniform_alpha_is_value_only() {
        // zero Wq/Wk: alpha constant in the inputs, weight path vanishes
        let d = 4;
        let t = 3;
        let mut rng = SplitMix64::new(12);
        let x = Matrix::from_fn(t, d, |_, _| rng.uniform(-1.0, 1.0));
        let w = AttnWeights::new(
            Matrix::zeros(d, d),
            Matrix::zeros(d, d),
            AttnWeights::init(d, d, d, 13).wv,
        )
        .unwrap();
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        for i in 0..t {
            for j in 0..t {
                let parts = jac_total(&trace, &w, i, j, false).unwrap();
                let expect = w.wv.scale(1.0 / t as f64);
                assert!(parts.total_no_res.sub(&expect).max_abs() < 1e-14);
            }
        }
    }

    #[test]
    fn jac_total_pure_residual_is_identity() {
        let d = 3;
        let x = Matrix::from_fn(2, d, |i, c| (i + c) as f64 * 0.1);
        let w =
            AttnWeights::new(Matrix::zeros(d, d), Matrix::zeros(d, d), Matrix::zeros(d, d))
                .unwrap();
        let trace = attn_forward(&x, &w, &Regularizer::none(), true, false).unwrap();
        let parts = jac_total(&trace, &w, 1, 1, true).unwrap();
        let with_res = parts.total_with_res.unwrap();
        assert!(with_res.sub(&Matrix::identity(d)).max_abs() < 1e-15);
        assert_eq!(parts.total_no_res.max_abs(), 0.0);
    }

    #[test]
    fn path_decomposition_is_exact_and_residual_shift_holds() {
        let (x, w) = random_instance(20, 4, 6, 6, 6);
        let trace = attn_forward(&x, &w, &Regularizer::none(), true, false).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let p = jac_total(&trace, &w, i, j, true).unwrap();
                let mut sum = p.value.clone();
                sum.add_assign(&p.key);
                sum.add_assign(&p.query);
                assert_eq!(sum, p.total_no_res);
                // with_res is no_res plus delta_ij I, bit for bit
                let expect = if i == j {
                    p.total_no_res.add(&Matrix::identity(6))
                } else {
                    p.total_no_res.clone()
                };
                assert_eq!(p.total_with_res.unwrap(), expect);
            }
        }
    }

    #[test]
    fn total_matches_finite_differences_small_sweep() {
        let cfg = FdCheckConfig {
            n_configs: 24,
            seed: 5,
            ..FdCheckConfig::default()
        };
        let report = check_total_vs_fd(&cfg).unwrap();
        assert!(
            report.passed,
            "max rel err {} at {:?}",
            report.max_rel_err, report.worst
        );
    }

    #[test]
    fn key_path_is_rank_one_by_norm_identity() {
        // spectral norm of the rank-1 key path equals the product of the
        // factor norms; a rank-2 matrix would exceed neither factor bound
        let (x, w) = random_instance(30, 5, 6, 4, 3);
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let jk = jac_key(&trace, &w, i, j).unwrap();
                let coeff = trace.alpha.get(i, j) / (w.d_k() as f64).sqrt();
                let left = trace.v.row_vec(j).sub(&trace.h.row_vec(i)).norm2();
                let right = w.wk.matvec_t(&trace.q.row_vec(i)).norm2();
                let expect = coeff * left * right;
                assert!((jk.norm(MatNorm::Spectral) - expect).abs() < 1e-10);
                // rank-1 also means Frobenius == spectral
                assert!((jk.frobenius_norm() - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn finite_diff_recovers_linear_map() {
        // T = 1: softmax is [[1]], so h = Wv x and FD must recover Wv
        let d = 4;
        let mut rng = SplitMix64::new(40);
        let x = Matrix::from_fn(1, d, |_, _| rng.uniform(-1.0, 1.0));
        let w = AttnWeights::init(d, 3, 3, 41);
        let fd =
            finite_diff_jacobian(&x, &w, &Regularizer::none(), false, 0, 0, 1e-5).unwrap();
        assert!(fd.sub(&w.wv).max_abs() < 1e-9);
    }

    #[test]
    fn finite_diff_rejects_dropout() {
        let x = Matrix::zeros(2, 2);
        let w = AttnWeights::init(2, 2, 2, 1);
        let err = finite_diff_jacobian(&x, &w, &Regularizer::dropout(0.5, 1), false, 0, 0, 1e-5);
        assert!(matches!(err, Err(Error::NonDeterministicRegularizer)));
    }

    #[test]
    fn finite_diff_step_halving_reduces_disagreement() {
        let (x, w) = random_instance(50, 4, 6, 6, 6);
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        let analytic = jac_total(&trace, &w, 1, 2, false).unwrap().total_no_res;
        let err_at = |h: f64| {
            let fd =
                finite_diff_jacobian(&x, &w, &Regularizer::none(), false, 1, 2, h).unwrap();
            fd.sub(&analytic).max_abs()
        };
        let coarse = err_at(1e-3);
        let fine = err_at(1e-4);
        assert!(
            fine < coarse,
            "expected second-order decay: err(1e-4) = {fine} vs err(1e-3) = {coarse}"
        );
    }

    #[test]
    fn softmax_jacobian_row_cases() {
        let uniform = softmax_jacobian_row(&Vector::from(vec![0.5, 0.5]));
        assert!((uniform.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((uniform.get(0, 1) + 0.25).abs() < 1e-15);
        assert!((uniform.get(1, 0) + 0.25).abs() < 1e-15);
        assert!((uniform.get(1, 1) - 0.25).abs() < 1e-15);

        let onehot = softmax_jacobian_row(&Vector::from(vec![0.0, 1.0, 0.0]));
        assert_eq!(onehot.max_abs(), 0.0);

        assert!(check_softmax_rows(200, 3) < 1e-14);
    }

    #[test]
    fn index_out_of_range_errors() {
        let (x, w) = random_instance(60, 3, 4, 4, 4);
        let trace = attn_forward(&x, &w, &Regularizer::none(), false, false).unwrap();
        assert!(jac_value(&trace, &w, 3, 0).is_err());
        assert!(jac_total(&trace, &w, 0, 3, false).is_err());
    }
}
