//! Training loop (AdamW, linear warm-up + cosine decay), masked forecasting
//! metrics, and a multi-seed experiment runner that aggregates mean ± std
//! per horizon and exports attention heatmaps plus per-epoch diagonal-mass
//! curves.

use crate::attention::Regularizer;
use crate::bounds::diag_mass;
use crate::data::{window, Scaler, SeriesDataset, Split, WindowSample};
use crate::error::{Error, Result};
use crate::export::{fmt_f64, write_atomic, write_matrix_csv, write_matrix_pgm};
use crate::linalg::Matrix;
use crate::model::checkpoint::{save as save_checkpoint, Checkpoint};
use crate::model::{model_backward, model_forward, ModelConfig, TnSModel};
use crate::rng::{derive, mix, SplitMix64};
use rayon::prelude::*;
use std::path::Path;

/// Linear warm-up from 0 to lr0 over `warmup_steps`, then cosine decay
/// lr0 * (1 + cos(pi * progress)) / 2 down to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, lr0: f64) -> f64 {
    assert!(step <= total_steps, "step beyond schedule");
    if warmup_steps > 0 && step < warmup_steps {
        return lr0 * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return lr0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First/second moment buffers and the step counter for AdamW.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(shapes: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = shapes
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        AdamWState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step: parameters are shrunk by
/// (1 - lr * wd) before the bias-corrected moment update.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut AdamWState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count");
    assert_eq!(params.len(), state.m.len(), "optimizer state count");
    state.step += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..pd.len() {
            pd[i] *= 1.0 - lr * weight_decay;
            m[i] = b1 * m[i] + (1.0 - b1) * gd[i];
            v[i] = b2 * v[i] + (1.0 - b2) * gd[i] * gd[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Per-horizon-step forecasting metrics over masked entries. MAPE is in
/// percent and additionally excludes |target| < 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct HorizonMetrics {
    /// 1-based horizon step.
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub count: usize,
}

pub const MAPE_TARGET_FLOOR: f64 = 1e-8;

/// Computes MAE/RMSE/MAPE per horizon step over `samples` of (pred, target,
/// mask) matrices shaped nodes x horizon. Predictions must already be in
/// target units. Empty horizons produce NaN sentinels and a warning.
pub fn metrics(preds: &[Matrix], targets: &[Matrix], masks: &[Matrix]) -> Vec<HorizonMetrics> {
    assert_eq!(preds.len(), targets.len());
    assert_eq!(preds.len(), masks.len());
    if preds.is_empty() {
        return Vec::new();
    }
    let h_out = preds[0].cols();
    let mut out = Vec::with_capacity(h_out);
    for h in 0..h_out {
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        let mut count = 0usize;
        let mut ape_sum = 0.0;
        let mut ape_count = 0usize;
        for ((p, t), m) in preds.iter().zip(targets).zip(masks) {
            for n in 0..p.rows() {
                if m.get(n, h) == 0.0 {
                    continue;
                }
                let diff = p.get(n, h) - t.get(n, h);
                abs_sum += diff.abs();
                sq_sum += diff * diff;
                count += 1;
                if t.get(n, h).abs() >= MAPE_TARGET_FLOOR {
                    ape_sum += (diff / t.get(n, h)).abs();
                    ape_count += 1;
                }
            }
        }
        if count == 0 {
            log::warn!("horizon step {} has no valid targets", h + 1);
        }
        out.push(HorizonMetrics {
            horizon: h + 1,
            mae: if count > 0 {
                abs_sum / count as f64
            } else {
                f64::NAN
            },
            rmse: if count > 0 {
                (sq_sum / count as f64).sqrt()
            } else {
                f64::NAN
            },
            mape: if ape_count > 0 {
                100.0 * ape_sum / ape_count as f64
            } else {
                f64::NAN
            },
            count,
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// The five trained variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    NoResidual,
    NoReg,
    Mask,
    Dropout,
    Penalty,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::NoResidual,
        Variant::NoReg,
        Variant::Mask,
        Variant::Dropout,
        Variant::Penalty,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::NoResidual => "no_residual",
            Variant::NoReg => "no_reg",
            Variant::Mask => "mask",
            Variant::Dropout => "dropout",
            Variant::Penalty => "penalty",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seeds: Vec<u64>,
    pub horizons_report: Vec<usize>,
    pub stride: usize,
    /// Penalty strength used by the penalty variant.
    pub penalty_lambda: f64,
    /// Dropout probability used by the dropout variant.
    pub dropout_p: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            epochs: 150,
            warmup_epochs: 5,
            batch_size: 16,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seeds: vec![0, 1, 2, 3],
            horizons_report: vec![3, 6, 12],
            stride: 1,
            penalty_lambda: -0.1,
            dropout_p: 0.2,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config("warmup_epochs must be below epochs".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config("batch_size and stride must be positive".into()));
        }
        for &h in &self.horizons_report {
            if h == 0 || h > self.model.h_out {
                return Err(Error::Config(format!(
                    "reported horizon {h} outside 1..={}",
                    self.model.h_out
                )));
            }
        }
        Ok(())
    }

    /// Model configuration for one variant: residual flag and regularizer
    /// set accordingly, dropout seed derived per run later.
    pub fn model_for_variant(&self, variant: Variant) -> ModelConfig {
        let mut cfg = self.model.clone();
        cfg.residual = !matches!(variant, Variant::NoResidual);
        cfg.reg = match variant {
            Variant::NoResidual | Variant::NoReg => Regularizer::none(),
            Variant::Mask => Regularizer::mask(),
            Variant::Dropout => Regularizer::dropout(self.dropout_p, 0),
            Variant::Penalty => Regularizer::penalty(self.penalty_lambda),
        };
        cfg
    }
}

/// Per-seed outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub seed: u64,
    pub diverged: bool,
    pub final_train_loss: f64,
    pub best_val_mae: f64,
    pub test_metrics: Vec<HorizonMetrics>,
    /// MAE averaged over every horizon step.
    pub test_mae_overall: f64,
    /// Head-averaged diagonal/off-diagonal mass of the final-epoch probe
    /// attention, and their ratio.
    pub final_mean_diag: f64,
    pub final_mean_offdiag: f64,
    pub final_diag_ratio: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct HorizonAgg {
    pub horizon: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mape_mean: f64,
    pub mape_std: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub per_horizon: Vec<HorizonAgg>,
    pub overall_mae_mean: f64,
    pub overall_mae_std: f64,
    pub final_train_loss_mean: f64,
    pub final_diag_ratio_mean: f64,
    pub failed_seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// De-normalized predictions for a window set, evaluated in batches with
/// dropout off. Returns (preds, targets, masks).
pub fn evaluate(
    model: &TnSModel,
    windows: &[WindowSample],
    scaler: &Scaler,
    batch_size: usize,
) -> Result<(Vec<Matrix>, Vec<Matrix>, Vec<Matrix>)> {
    let mut preds = Vec::with_capacity(windows.len());
    let mut targets = Vec::with_capacity(windows.len());
    let mut masks = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let cache = model_forward(chunk, model, false)?;
        for (pred, sample) in cache.preds.iter().zip(chunk) {
            preds.push(Matrix::from_fn(pred.rows(), pred.cols(), |n, h| {
                scaler.denormalize(0, pred.get(n, h))
            }));
            targets.push(sample.target.clone());
            masks.push(sample.mask.clone());
        }
    }
    Ok((preds, targets, masks))
}

/// Node-averaged per-head attention matrices of the model on a probe
/// window, dropout off.
pub fn probe_attention(model: &TnSModel, probe: &WindowSample) -> Result<Vec<Matrix>> {
    let cache = model_forward(std::slice::from_ref(probe), model, false)?;
    let n_heads = model.cfg.n_heads;
    let n_nodes = model.cfg.n_nodes;
    let t = model.cfg.w_in;
    let mut heads = vec![Matrix::zeros(t, t); n_heads];
    for node_traces in &cache.traces[0] {
        for (h, trace) in node_traces.iter().enumerate() {
            heads[h].add_scaled(&trace.alpha, 1.0 / n_nodes as f64);
        }
    }
    Ok(heads)
}

struct EpochDiagRow {
    epoch: usize,
    mean_diag: f64,
    mean_offdiag: f64,
}

fn head_averaged_diag(heads: &[Matrix]) -> (f64, f64) {
    let mut d = 0.0;
    let mut o = 0.0;
    for alpha in heads {
        let dm = diag_mass(alpha);
        d += dm.mean_diag / heads.len() as f64;
        o += dm.mean_offdiag / heads.len() as f64;
    }
    (d, o)
}

#[allow(clippy::too_many_arguments)]
fn train_single_run(
    variant: Variant,
    cfg: &TrainConfig,
    ds: &SeriesDataset,
    seed: u64,
    out_dir: &Path,
) -> Result<RunSummary> {
    let mut model_cfg = cfg.model_for_variant(variant);
    model_cfg.reg.rng_seed = derive(seed, "dropout-root");
    let mut model = TnSModel::init(model_cfg, derive(seed, "model-init"))?;

    let w_in = cfg.model.w_in;
    let h_out = cfg.model.h_out;
    let train: Vec<WindowSample> = window(ds, w_in, h_out, cfg.stride, Split::Train).collect();
    let val: Vec<WindowSample> = window(ds, w_in, h_out, cfg.stride, Split::Val).collect();
    let test: Vec<WindowSample> = window(ds, w_in, h_out, cfg.stride, Split::Test).collect();
    if train.is_empty() {
        return Err(Error::Data("training split yields no windows".into()));
    }
    let probe = test.first().or(val.first()).or(train.first()).cloned();
    let scaler = ds.scaler.clone();

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let dropout_root = derive(seed, "dropout-steps");

    let mut shuffle_rng = SplitMix64::new(derive(seed, "shuffle"));
    let mut state = AdamWState::new(&model.param_refs());
    let mut best_val = f64::INFINITY;
    let mut best_model = model.clone();
    let mut final_train_loss = f64::NAN;
    let mut diverged = false;
    let mut diag_rows: Vec<EpochDiagRow> = Vec::new();
    let mut global_step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<WindowSample> =
                batch_idx.iter().map(|&i| train[i].clone()).collect();
            model.cfg.reg.rng_seed = mix(dropout_root, global_step as u64);
            let (loss, grads) = model_backward(&batch, &model, &scaler, true)?;
            if !loss.is_finite() || !grads.is_finite() {
                log::warn!("{} seed {seed}: diverged at step {global_step}", variant.name());
                diverged = true;
                break 'epochs;
            }
            let lr = lr_schedule(global_step, total_steps, warmup_steps, cfg.lr0);
            let bufs = grads.bufs();
            let mut params = model.param_refs_mut();
            adamw_step(
                &mut params,
                &bufs,
                &mut state,
                lr,
                cfg.betas,
                cfg.eps,
                cfg.weight_decay,
            );
            epoch_loss += loss;
            epoch_batches += 1;
            global_step += 1;
        }
        final_train_loss = epoch_loss / epoch_batches.max(1) as f64;

        // validation MAE for checkpoint selection
        if !val.is_empty() {
            let (p, t, m) = evaluate(&model, &val, &scaler, cfg.batch_size)?;
            let val_mae = overall_mae(&metrics(&p, &t, &m));
            if val_mae < best_val {
                best_val = val_mae;
                best_model = model.clone();
            }
        } else {
            best_model = model.clone();
        }

        // per-epoch diagonal-mass instrumentation on the probe
        if let Some(probe) = &probe {
            let heads = probe_attention(&model, probe)?;
            let (d, o) = head_averaged_diag(&heads);
            diag_rows.push(EpochDiagRow {
                epoch,
                mean_diag: d,
                mean_offdiag: o,
            });
        }
    }

    if cfg.epochs == 0 {
        best_model = model.clone();
        if let Some(probe) = &probe {
            let heads = probe_attention(&model, probe)?;
            let (d, o) = head_averaged_diag(&heads);
            diag_rows.push(EpochDiagRow {
                epoch: 0,
                mean_diag: d,
                mean_offdiag: o,
            });
        }
    }

    // test metrics from the best-validation checkpoint
    let test_metrics = if test.is_empty() {
        Vec::new()
    } else {
        let (p, t, m) = evaluate(&best_model, &test, &scaler, cfg.batch_size)?;
        metrics(&p, &t, &m)
    };
    let test_mae_overall = overall_mae(&test_metrics);

    // exports: final-epoch attention (heatmaps + CSV), diag-mass curve,
    // final and best checkpoints
    std::fs::create_dir_all(out_dir)?;
    let mut final_mean_diag = f64::NAN;
    let mut final_mean_offdiag = f64::NAN;
    if let Some(probe) = &probe {
        let heads = probe_attention(&model, probe)?;
        let mut summary = String::new();
        for (h, alpha) in heads.iter().enumerate() {
            write_matrix_csv(&out_dir.join(format!("attn_head_{h}.csv")), alpha)?;
            write_matrix_pgm(&out_dir.join(format!("attn_head_{h}.pgm")), alpha)?;
            let dm = diag_mass(alpha);
            summary.push_str(&format!(
                "head {h}: mean_diag={} mean_offdiag={} ratio={}\n",
                fmt_f64(dm.mean_diag),
                fmt_f64(dm.mean_offdiag),
                dm.ratio.map(|r| fmt_f64(r)).unwrap_or_else(|| "nan".into()),
            ));
        }
        write_atomic(&out_dir.join("attn_summary.txt"), summary.as_bytes())?;
        let (d, o) = head_averaged_diag(&heads);
        final_mean_diag = d;
        final_mean_offdiag = o;
    }
    let mut diag_csv = String::from("epoch,mean_diag,mean_offdiag,ratio\n");
    for row in &diag_rows {
        let ratio = if row.mean_offdiag.abs() < 1e-15 {
            f64::NAN
        } else {
            row.mean_diag / row.mean_offdiag
        };
        diag_csv.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch,
            fmt_f64(row.mean_diag),
            fmt_f64(row.mean_offdiag),
            fmt_f64(ratio)
        ));
    }
    write_atomic(&out_dir.join("diag_mass.csv"), diag_csv.as_bytes())?;
    save_checkpoint(
        &out_dir.join("checkpoint_final.bin"),
        &Checkpoint {
            model: model.clone(),
            scaler: scaler.clone(),
            run_seed: seed,
            probe: probe.as_ref().map(|p| p.inputs.clone()),
        },
    )?;
    save_checkpoint(
        &out_dir.join("checkpoint_best.bin"),
        &Checkpoint {
            model: best_model,
            scaler,
            run_seed: seed,
            probe: probe.as_ref().map(|p| p.inputs.clone()),
        },
    )?;

    let final_diag_ratio = if final_mean_offdiag.abs() < 1e-15 {
        f64::NAN
    } else {
        final_mean_diag / final_mean_offdiag
    };
    Ok(RunSummary {
        seed,
        diverged,
        final_train_loss,
        best_val_mae: best_val,
        test_metrics,
        test_mae_overall,
        final_mean_diag,
        final_mean_offdiag,
        final_diag_ratio,
    })
}

/// MAE averaged over all horizon steps (NaN-free entries only).
pub fn overall_mae(per_horizon: &[HorizonMetrics]) -> f64 {
    let vals: Vec<f64> = per_horizon
        .iter()
        .map(|m| m.mae)
        .filter(|m| m.is_finite())
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Trains one model per seed (in parallel), selects per-seed checkpoints by
/// best validation MAE, evaluates on the test split and aggregates
/// mean ± std over the non-diverged seeds. Writes per-seed exports under
/// `out_dir/<variant>/seed_<s>/` and the aggregate CSV at
/// `out_dir/<variant>/results.csv`.
pub fn run_experiment(
    variant: Variant,
    cfg: &TrainConfig,
    ds: &SeriesDataset,
    out_dir: &Path,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let variant_dir = out_dir.join(variant.name());
    std::fs::create_dir_all(&variant_dir)?;

    let runs: Vec<Result<RunSummary>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            train_single_run(
                variant,
                cfg,
                ds,
                seed,
                &variant_dir.join(format!("seed_{seed}")),
            )
        })
        .collect();
    let mut summaries = Vec::with_capacity(runs.len());
    for r in runs {
        summaries.push(r?);
    }

    let good: Vec<&RunSummary> = summaries.iter().filter(|r| !r.diverged).collect();
    let failed_seeds: Vec<u64> = summaries
        .iter()
        .filter(|r| r.diverged)
        .map(|r| r.seed)
        .collect();

    let mut per_horizon = Vec::new();
    for &h in &cfg.horizons_report {
        let pick = |f: &dyn Fn(&HorizonMetrics) -> f64| -> Vec<f64> {
            good.iter()
                .filter_map(|r| r.test_metrics.get(h - 1).map(f))
                .collect()
        };
        let (mae_mean, mae_std) = mean_std(&pick(&|m| m.mae));
        let (rmse_mean, rmse_std) = mean_std(&pick(&|m| m.rmse));
        let (mape_mean, mape_std) = mean_std(&pick(&|m| m.mape));
        per_horizon.push(HorizonAgg {
            horizon: h,
            mae_mean,
            mae_std,
            rmse_mean,
            rmse_std,
            mape_mean,
            mape_std,
        });
    }
    let (overall_mae_mean, overall_mae_std) =
        mean_std(&good.iter().map(|r| r.test_mae_overall).collect::<Vec<_>>());
    let (final_train_loss_mean, _) =
        mean_std(&good.iter().map(|r| r.final_train_loss).collect::<Vec<_>>());
    let (final_diag_ratio_mean, _) =
        mean_std(&good.iter().map(|r| r.final_diag_ratio).collect::<Vec<_>>());

    let result = ExperimentResult {
        variant,
        per_horizon,
        overall_mae_mean,
        overall_mae_std,
        final_train_loss_mean,
        final_diag_ratio_mean,
        failed_seeds,
        runs: summaries,
    };
    write_experiment_files(&result, &variant_dir)?;
    Ok(result)
}

fn write_experiment_files(result: &ExperimentResult, dir: &Path) -> Result<()> {
    let mut csv =
        String::from("horizon,mae_mean,mae_std,rmse_mean,rmse_std,mape_mean,mape_std\n");
    for h in &result.per_horizon {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            h.horizon,
            fmt_f64(h.mae_mean),
            fmt_f64(h.mae_std),
            fmt_f64(h.rmse_mean),
            fmt_f64(h.rmse_std),
            fmt_f64(h.mape_mean),
            fmt_f64(h.mape_std)
        ));
    }
    write_atomic(&dir.join("results.csv"), csv.as_bytes())?;

    let mut runs = String::from(
        "seed,diverged,final_train_loss,best_val_mae,test_mae_overall,final_diag_ratio\n",
    );
    for r in &result.runs {
        runs.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.seed,
            r.diverged as u8,
            fmt_f64(r.final_train_loss),
            fmt_f64(r.best_val_mae),
            fmt_f64(r.test_mae_overall),
            fmt_f64(r.final_diag_ratio)
        ));
    }
    write_atomic(&dir.join("runs.csv"), runs.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};

    #[test]
    fn schedule_endpoints() {
        let lr0 = 0.001;
        assert_eq!(lr_schedule(0, 100, 10, lr0), 0.0);
        assert_eq!(lr_schedule(10, 100, 10, lr0), lr0);
        assert!(lr_schedule(100, 100, 10, lr0).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape_monotone() {
        let lr0 = 0.01;
        let (total, warm) = (200, 20);
        for s in 1..=warm {
            assert!(lr_schedule(s, total, warm, lr0) >= lr_schedule(s - 1, total, warm, lr0));
        }
        for s in warm + 1..=total {
            assert!(lr_schedule(s, total, warm, lr0) <= lr_schedule(s - 1, total, warm, lr0));
        }
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut p = Matrix::from_rows(&[vec![1.0, -2.0]]);
        let g = Matrix::zeros(1, 2);
        let mut state = AdamWState::new(&[&p]);
        let before = p.clone();
        adamw_step(
            &mut [&mut p],
            &[&g],
            &mut state,
            0.01,
            (0.9, 0.999),
            1e-8,
            0.0,
        );
        assert_eq!(p, before);
    }

    #[test]
    fn adamw_single_step_matches_hand_computation() {
        // grad 1 on a scalar: bias-corrected mhat = 1, vhat = 1,
        // so the update is -lr / (1 + eps)
        let lr = 0.01;
        let eps = 1e-8;
        let mut p = Matrix::from_rows(&[vec![0.5]]);
        let g = Matrix::from_rows(&[vec![1.0]]);
        let mut state = AdamWState::new(&[&p]);
        adamw_step(&mut [&mut p], &[&g], &mut state, lr, (0.9, 0.999), eps, 0.0);
        let expect = 0.5 - lr / (1.0 + eps);
        assert!((p.get(0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_only_shrinks() {
        let lr = 0.1;
        let wd = 0.5;
        let mut p = Matrix::from_rows(&[vec![2.0]]);
        let g = Matrix::zeros(1, 1);
        let mut state = AdamWState::new(&[&p]);
        adamw_step(&mut [&mut p], &[&g], &mut state, lr, (0.9, 0.999), 1e-8, wd);
        assert!((p.get(0, 0) - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn adamw_constant_gradient_strictly_decreases() {
        let mut p = Matrix::from_rows(&[vec![1.0]]);
        let g = Matrix::from_rows(&[vec![0.3]]);
        let mut state = AdamWState::new(&[&p]);
        let mut prev = p.get(0, 0);
        for _ in 0..20 {
            adamw_step(
                &mut [&mut p],
                &[&g],
                &mut state,
                0.01,
                (0.9, 0.999),
                1e-8,
                0.0,
            );
            assert!(p.get(0, 0) < prev);
            prev = p.get(0, 0);
        }
    }

    #[test]
    fn metrics_trivial_cases() {
        let t = Matrix::from_fn(2, 3, |_, _| 2.0);
        let mask = Matrix::from_fn(2, 3, |_, _| 1.0);
        let exact = metrics(&[t.clone()], &[t.clone()], &[mask.clone()]);
        for m in &exact {
            assert_eq!(m.mae, 0.0);
            assert_eq!(m.rmse, 0.0);
            assert_eq!(m.mape, 0.0);
        }
        let off = Matrix::from_fn(2, 3, |_, _| 3.0);
        let shifted = metrics(&[off], &[t], &[mask]);
        for m in &shifted {
            assert!((m.mae - 1.0).abs() < 1e-15);
            assert!((m.rmse - 1.0).abs() < 1e-15);
            assert!((m.mape - 50.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_empty_mask_is_nan_sentinel() {
        let t = Matrix::from_fn(2, 2, |_, _| 1.0);
        let mask = Matrix::zeros(2, 2);
        let out = metrics(&[t.clone()], &[t], &[mask]);
        assert!(out[0].mae.is_nan());
        assert_eq!(out[0].count, 0);
    }

    #[test]
    fn metrics_match_naive_loop_and_rmse_dominates() {
        let mut rng = SplitMix64::new(77);
        for _ in 0..30 {
            let s = 1 + rng.below(4);
            let n = 1 + rng.below(5);
            let h = 1 + rng.below(6);
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            let mut masks = Vec::new();
            for _ in 0..s {
                preds.push(Matrix::from_fn(n, h, |_, _| rng.uniform(-10.0, 10.0)));
                targets.push(Matrix::from_fn(n, h, |_, _| rng.uniform(-10.0, 10.0)));
                masks.push(Matrix::from_fn(n, h, |_, _| {
                    if rng.next_f64() < 0.8 {
                        1.0
                    } else {
                        0.0
                    }
                }));
            }
            let got = metrics(&preds, &targets, &masks);
            for hh in 0..h {
                // naive reference
                let mut abs = Vec::new();
                let mut sq = Vec::new();
                let mut ape = Vec::new();
                for s_idx in 0..s {
                    for nn in 0..n {
                        if masks[s_idx].get(nn, hh) == 0.0 {
                            continue;
                        }
                        let d = preds[s_idx].get(nn, hh) - targets[s_idx].get(nn, hh);
                        abs.push(d.abs());
                        sq.push(d * d);
                        if targets[s_idx].get(nn, hh).abs() >= 1e-8 {
                            ape.push((d / targets[s_idx].get(nn, hh)).abs());
                        }
                    }
                }
                if abs.is_empty() {
                    assert!(got[hh].mae.is_nan());
                    continue;
                }
                let mae = abs.iter().sum::<f64>() / abs.len() as f64;
                let rmse = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
                let mape = 100.0 * ape.iter().sum::<f64>() / ape.len() as f64;
                assert!((got[hh].mae - mae).abs() < 1e-12);
                assert!((got[hh].rmse - rmse).abs() < 1e-12);
                assert!((got[hh].mape - mape).abs() < 1e-12);
                assert!(got[hh].rmse >= got[hh].mae - 1e-15);
            }
        }
    }

    fn tiny_train_setup() -> (TrainConfig, SeriesDataset) {
        let synth = SynthConfig {
            n_nodes: 3,
            len: 200,
            seed: 5,
            graph_density: 0.3,
            noise_std: 0.1,
            window: 6,
            horizon: 4,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic(&synth).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 8,
            seeds: vec![0, 1],
            horizons_report: vec![1, 4],
            model: ModelConfig {
                n_nodes: 3,
                d_model: 8,
                n_heads: 2,
                d_k: 4,
                d_v: 4,
                d_gc: 4,
                w_in: 6,
                h_out: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        (cfg, ds)
    }

    #[test]
    fn zero_epochs_still_aggregates() {
        let (mut cfg, ds) = tiny_train_setup();
        cfg.epochs = 0;
        cfg.warmup_epochs = 0;
        let dir = std::env::temp_dir().join(format!("tempattn_e0_{}", std::process::id()));
        let result = run_experiment(Variant::NoReg, &cfg, &ds, &dir).unwrap();
        assert_eq!(result.runs.len(), 2);
        assert!(result.overall_mae_mean.is_finite());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn identical_seeds_give_zero_std() {
        let (mut cfg, ds) = tiny_train_setup();
        cfg.epochs = 1;
        cfg.warmup_epochs = 0;
        cfg.seeds = vec![7, 7];
        let dir = std::env::temp_dir().join(format!("tempattn_std_{}", std::process::id()));
        let result = run_experiment(Variant::NoReg, &cfg, &ds, &dir).unwrap();
        for h in &result.per_horizon {
            assert_eq!(h.mae_std, 0.0);
            assert_eq!(h.rmse_std, 0.0);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn reruns_are_deterministic() {
        let (cfg, ds) = tiny_train_setup();
        let dir_a = std::env::temp_dir().join(format!("tempattn_da_{}", std::process::id()));
        let dir_b = std::env::temp_dir().join(format!("tempattn_db_{}", std::process::id()));
        let a = run_experiment(Variant::Dropout, &cfg, &ds, &dir_a).unwrap();
        let b = run_experiment(Variant::Dropout, &cfg, &ds, &dir_b).unwrap();
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            assert_eq!(ra.final_train_loss.to_bits(), rb.final_train_loss.to_bits());
            assert_eq!(ra.test_mae_overall.to_bits(), rb.test_mae_overall.to_bits());
        }
        // exported files are byte-identical too
        for sub in ["dropout/results.csv", "dropout/seed_0/diag_mass.csv"] {
            let fa = std::fs::read(dir_a.join(sub)).unwrap();
            let fb = std::fs::read(dir_b.join(sub)).unwrap();
            assert_eq!(fa, fb, "{sub}");
        }
        std::fs::remove_dir_all(&dir_a).ok();
        std::fs::remove_dir_all(&dir_b).ok();
    }

    #[test]
    fn long_horizon_configuration_runs() {
        // 36-step window and horizon, reported at steps 24 and 36
        let synth = SynthConfig {
            n_nodes: 2,
            len: 500,
            seed: 11,
            window: 36,
            horizon: 36,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic(&synth).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            batch_size: 8,
            seeds: vec![0],
            horizons_report: vec![24, 36],
            model: ModelConfig {
                n_nodes: 2,
                d_model: 8,
                n_heads: 2,
                d_k: 4,
                d_v: 4,
                d_gc: 4,
                w_in: 36,
                h_out: 36,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let dir = std::env::temp_dir().join(format!("tempattn_lh_{}", std::process::id()));
        let result = run_experiment(Variant::Penalty, &cfg, &ds, &dir).unwrap();
        assert_eq!(result.per_horizon.len(), 2);
        assert_eq!(result.per_horizon[0].horizon, 24);
        assert_eq!(result.per_horizon[1].horizon, 36);
        assert!(result.per_horizon[1].mae_mean.is_finite());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn diverged_runs_are_flagged_and_excluded() {
        let (mut cfg, ds) = tiny_train_setup();
        cfg.lr0 = 1e12; // forces overflow within the first epoch
        cfg.epochs = 2;
        cfg.warmup_epochs = 0;
        cfg.seeds = vec![0];
        let dir = std::env::temp_dir().join(format!("tempattn_div_{}", std::process::id()));
        let result = run_experiment(Variant::NoReg, &cfg, &ds, &dir).unwrap();
        assert_eq!(result.failed_seeds, vec![0]);
        assert!(result.runs[0].diverged);
        // everything failed, so the aggregates carry NaN sentinels
        assert!(result.overall_mae_mean.is_nan());
        let runs_csv = std::fs::read_to_string(dir.join("no_reg/runs.csv")).unwrap();
        assert!(runs_csv.lines().nth(1).unwrap().starts_with("0,1,"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn adjacency_stays_stochastic_during_training() {
        let (mut cfg, ds) = tiny_train_setup();
        cfg.epochs = 1;
        cfg.warmup_epochs = 0;
        cfg.seeds = vec![0];
        let model_cfg = cfg.model_for_variant(Variant::NoReg);
        let mut model = TnSModel::init(model_cfg, 5).unwrap();
        let train: Vec<WindowSample> =
            window(&ds, cfg.model.w_in, cfg.model.h_out, 1, Split::Train).collect();
        let mut state = AdamWState::new(&model.param_refs());
        for step in 0..10 {
            let batch = vec![train[step].clone()];
            let (_, grads) = model_backward(&batch, &model, &ds.scaler, true).unwrap();
            let bufs = grads.bufs();
            let mut params = model.param_refs_mut();
            adamw_step(&mut params, &bufs, &mut state, 0.01, (0.9, 0.999), 1e-8, 0.0);
            drop(params);
            let (a_fwd, a_bwd) =
                crate::model::learned_adjacency(&model.e1, &model.e2).unwrap();
            for i in 0..a_fwd.rows() {
                let sf: f64 = a_fwd.row(i).iter().sum();
                let sb: f64 = a_bwd.row(i).iter().sum();
                assert!((sf - 1.0).abs() < 1e-12);
                assert!((sb - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn variant_configs_pin_penalty_and_dropout_values() {
        let cfg = TrainConfig::default();
        let pen = cfg.model_for_variant(Variant::Penalty);
        assert_eq!(
            pen.reg.kind,
            crate::attention::RegKind::DiagPenalty { lambda: -0.1 }
        );
        let drop = cfg.model_for_variant(Variant::Dropout);
        assert_eq!(
            drop.reg.kind,
            crate::attention::RegKind::DiagDropout { p: 0.2 }
        );
        let nores = cfg.model_for_variant(Variant::NoResidual);
        assert!(!nores.residual);
        assert!(cfg.model_for_variant(Variant::Mask).residual);
    }

    #[test]
    fn losses_are_bit_identical_for_five_steps() {
        let (cfg, ds) = tiny_train_setup();
        let model_cfg = cfg.model_for_variant(Variant::NoReg);
        let run = |_: ()| -> Vec<u64> {
            let mut model = TnSModel::init(model_cfg.clone(), 42).unwrap();
            let train: Vec<WindowSample> =
                window(&ds, cfg.model.w_in, cfg.model.h_out, 1, Split::Train).collect();
            let mut state = AdamWState::new(&model.param_refs());
            let mut out = Vec::new();
            for step in 0..5 {
                let batch: Vec<WindowSample> =
                    train[step * 4..(step + 1) * 4].to_vec();
                let (loss, grads) = model_backward(&batch, &model, &ds.scaler, true).unwrap();
                out.push(loss.to_bits());
                let bufs = grads.bufs();
                let mut params = model.param_refs_mut();
                adamw_step(
                    &mut params,
                    &bufs,
                    &mut state,
                    0.001,
                    (0.9, 0.999),
                    1e-8,
                    1e-4,
                );
            }
            out
        };
        assert_eq!(run(()), run(()));
    }
}
