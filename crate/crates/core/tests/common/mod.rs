//! Shared test oracles, independent of the library's computation paths:
//! a one-sided Jacobi SVD, a compensated-summation softmax, and small
//! comparison helpers.

// each test binary uses its own subset of these helpers
#![allow(dead_code)]

use tempattn::linalg::{Matrix, NEG_LARGE};

/// Singular values by one-sided (Hestenes) Jacobi rotations, descending.
/// Accurate to near machine precision for the small matrices used in tests.
pub fn jacobi_singular_values(m: &Matrix) -> Vec<f64> {
    let a = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let (rows, cols) = a.shape();
    // column-major copy
    let mut u: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a.get(i, j)).collect())
        .collect();

    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, b)| a * b).sum() };
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if gamma.abs() <= 1e-30 || gamma.abs() <= 1e-16 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let up = u[p][i];
                    let uq = u[q][i];
                    u[p][i] = c * up - s * uq;
                    u[q][i] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigmas: Vec<f64> = u
        .iter()
        .map(|col| dot(col, col).sqrt())
        .collect();
    sigmas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sigmas
}

/// Softmax with Neumaier-compensated summation of the exponentials, an
/// evaluation order independent of the library implementation. Entries
/// equal to NEG_LARGE are masked to exactly zero.
pub fn softmax_oracle(scores: &[f64]) -> Vec<f64> {
    let max = scores
        .iter()
        .filter(|&&x| x != NEG_LARGE)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(max.is_finite(), "empty softmax support");
    let exps: Vec<f64> = scores
        .iter()
        .map(|&x| if x == NEG_LARGE { 0.0 } else { (x - max).exp() })
        .collect();
    // Neumaier summation
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &e in &exps {
        let t = sum + e;
        if sum.abs() >= e.abs() {
            comp += (sum - t) + e;
        } else {
            comp += (e - t) + sum;
        }
        sum = t;
    }
    let total = sum + comp;
    exps.iter().map(|&e| e / total).collect()
}

/// Deterministic tree comparison: relative paths and bytes of every file,
/// `skip` names excluded.
pub fn dir_fingerprint(root: &std::path::Path, skip: &[&str]) -> Vec<(String, Vec<u8>)> {
    fn walk(
        base: &std::path::Path,
        dir: &std::path::Path,
        skip: &[&str],
        out: &mut Vec<(String, Vec<u8>)>,
    ) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .expect("read dir")
            .map(|e| e.expect("entry").path())
            .collect();
        entries.sort();
        for path in entries {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if skip.contains(&name.as_str()) {
                continue;
            }
            if path.is_dir() {
                walk(base, &path, skip, out);
            } else {
                let rel = path
                    .strip_prefix(base)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, std::fs::read(&path).expect("read file")));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, skip, &mut out);
    out
}
