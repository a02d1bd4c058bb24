//! Command-line surface: flat dotted-key configuration with hard errors on
//! unknown keys, resolved-config snapshots, run manifests, and the four
//! subcommands (gradcheck, bounds-sweep, train, attn-export).
//!
//! Exit codes: 0 success, 1 assertion/tolerance failure, 2 usage/config
//! error.

use crate::attention::{PeScheme, Regularizer};
use crate::bounds::{sweep_t, BoundReport, SweepConfig};
use crate::data::{gen_synthetic, ingest_csv, SeriesDataset, SplitFractions, SynthConfig};
use crate::error::{Error, Result};
use crate::export::{fmt_f64, write_atomic, write_matrix_csv, write_matrix_pgm};
use crate::jacobian::{check_softmax_rows, check_total_vs_fd, FdCheckConfig};
use crate::linalg::MatNorm;
use crate::model::checkpoint;
use crate::model::{gradcheck_model, ModelConfig};
use crate::train::{run_experiment, ExperimentResult, TrainConfig, Variant};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Resolved run configuration. Every key is settable from the config file
/// and from `--set key=value` overrides; unknown keys are hard errors.
#[derive(Debug, Clone)]
pub struct Config {
    pub seed: u64,

    pub data_source: String, // synthetic | csv
    pub data_csv_path: String,
    pub data_n_nodes: usize,
    pub data_length: usize,
    pub data_noise_std: f64,
    pub data_noise_ar: f64,
    pub data_graph_density: f64,
    pub data_time_of_day: bool,
    pub data_window: usize,
    pub data_horizon: usize,
    pub data_stride: usize,
    pub data_train_frac: f64,
    pub data_val_frac: f64,

    pub model_d_model: usize,
    pub model_heads: usize,
    pub model_d_k: usize,
    pub model_d_v: usize,
    pub model_d_emb: usize,
    pub model_d_gc: usize,
    pub model_pe: String, // sinusoidal | none
    pub model_residual: bool,
    pub model_reg: String, // none | mask | dropout | penalty
    pub model_reg_p: f64,
    pub model_reg_lambda: f64,
    pub model_shared_graph_weights: bool,

    pub train_variant: String, // one variant name or "all"
    pub train_epochs: usize,
    pub train_warmup_epochs: usize,
    pub train_batch_size: usize,
    pub train_lr0: f64,
    pub train_weight_decay: f64,
    pub train_seeds: Vec<u64>,
    pub train_horizons: Vec<usize>,

    pub bounds_t_values: Vec<usize>,
    pub bounds_samples: usize,
    pub bounds_d_model: usize,
    pub bounds_d_k: usize,
    pub bounds_norm: String, // spectral | frobenius

    pub gradcheck_configs: usize,
    pub gradcheck_coords: usize,
    pub gradcheck_step: f64,
    pub gradcheck_fixed_t: usize, // 0 = draw per config
    pub gradcheck_jacobian_tolerance: f64,
    pub gradcheck_model_tolerance: f64,
    pub gradcheck_softmax_tolerance: f64,

    pub export_checkpoint: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data_source: "synthetic".into(),
            data_csv_path: String::new(),
            data_n_nodes: 20,
            data_length: 2016,
            data_noise_std: 0.1,
            data_noise_ar: 0.9,
            data_graph_density: 0.2,
            data_time_of_day: false,
            data_window: 12,
            data_horizon: 12,
            data_stride: 1,
            data_train_frac: 0.7,
            data_val_frac: 0.1,
            model_d_model: 16,
            model_heads: 8,
            model_d_k: 2,
            model_d_v: 2,
            model_d_emb: 2,
            model_d_gc: 4,
            model_pe: "sinusoidal".into(),
            model_residual: true,
            model_reg: "none".into(),
            model_reg_p: 0.2,
            model_reg_lambda: -0.1,
            model_shared_graph_weights: false,
            train_variant: "no_reg".into(),
            train_epochs: 150,
            train_warmup_epochs: 5,
            train_batch_size: 16,
            train_lr0: 0.001,
            train_weight_decay: 1e-4,
            train_seeds: vec![0, 1, 2, 3],
            train_horizons: vec![3, 6, 12],
            bounds_t_values: vec![2, 4, 8, 16, 32, 64],
            bounds_samples: 100,
            bounds_d_model: 16,
            bounds_d_k: 16,
            bounds_norm: "spectral".into(),
            gradcheck_configs: 200,
            gradcheck_coords: 50,
            gradcheck_step: 1e-5,
            gradcheck_fixed_t: 0,
            gradcheck_jacobian_tolerance: 1e-5,
            gradcheck_model_tolerance: 1e-4,
            gradcheck_softmax_tolerance: 1e-14,
            export_checkpoint: String::new(),
        }
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::Config(format!("cannot parse value {value:?} for key {key}"))
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_val(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean {other:?} for key {key}"))),
    }
}

impl Config {
    /// Sets one dotted key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_val(key, v)?,
            "data.source" => {
                if v != "synthetic" && v != "csv" {
                    return Err(Error::Config(format!("data.source must be synthetic or csv, got {v:?}")));
                }
                self.data_source = v.into();
            }
            "data.csv_path" => self.data_csv_path = v.into(),
            "data.n_nodes" => self.data_n_nodes = parse_val(key, v)?,
            "data.length" => self.data_length = parse_val(key, v)?,
            "data.noise_std" => self.data_noise_std = parse_val(key, v)?,
            "data.noise_ar" => self.data_noise_ar = parse_val(key, v)?,
            "data.graph_density" => self.data_graph_density = parse_val(key, v)?,
            "data.time_of_day" => self.data_time_of_day = parse_bool(key, v)?,
            "data.window" => self.data_window = parse_val(key, v)?,
            "data.horizon" => self.data_horizon = parse_val(key, v)?,
            "data.stride" => self.data_stride = parse_val(key, v)?,
            "data.train_frac" => self.data_train_frac = parse_val(key, v)?,
            "data.val_frac" => self.data_val_frac = parse_val(key, v)?,
            "model.d_model" => self.model_d_model = parse_val(key, v)?,
            "model.heads" => self.model_heads = parse_val(key, v)?,
            "model.d_k" => self.model_d_k = parse_val(key, v)?,
            "model.d_v" => self.model_d_v = parse_val(key, v)?,
            "model.d_emb" => self.model_d_emb = parse_val(key, v)?,
            "model.d_gc" => self.model_d_gc = parse_val(key, v)?,
            "model.pe" => {
                if v != "sinusoidal" && v != "none" {
                    return Err(Error::Config(format!("model.pe must be sinusoidal or none, got {v:?}")));
                }
                self.model_pe = v.into();
            }
            "model.residual" => self.model_residual = parse_bool(key, v)?,
            "model.reg" => {
                if !["none", "mask", "dropout", "penalty"].contains(&v) {
                    return Err(Error::Config(format!("unknown regularizer {v:?}")));
                }
                self.model_reg = v.into();
            }
            "model.reg_p" => self.model_reg_p = parse_val(key, v)?,
            "model.reg_lambda" => self.model_reg_lambda = parse_val(key, v)?,
            "model.shared_graph_weights" => {
                self.model_shared_graph_weights = parse_bool(key, v)?
            }
            "train.variant" => {
                if v != "all" && Variant::parse(v).is_none() {
                    return Err(Error::Config(format!("unknown variant {v:?}")));
                }
                self.train_variant = v.into();
            }
            "train.epochs" => self.train_epochs = parse_val(key, v)?,
            "train.warmup_epochs" => self.train_warmup_epochs = parse_val(key, v)?,
            "train.batch_size" => self.train_batch_size = parse_val(key, v)?,
            "train.lr0" => self.train_lr0 = parse_val(key, v)?,
            "train.weight_decay" => self.train_weight_decay = parse_val(key, v)?,
            "train.seeds" => self.train_seeds = parse_list(key, v)?,
            "train.horizons" => self.train_horizons = parse_list(key, v)?,
            "bounds.t_values" => self.bounds_t_values = parse_list(key, v)?,
            "bounds.samples" => self.bounds_samples = parse_val(key, v)?,
            "bounds.d_model" => self.bounds_d_model = parse_val(key, v)?,
            "bounds.d_k" => self.bounds_d_k = parse_val(key, v)?,
            "bounds.norm" => {
                if v != "spectral" && v != "frobenius" {
                    return Err(Error::Config(format!("bounds.norm must be spectral or frobenius, got {v:?}")));
                }
                self.bounds_norm = v.into();
            }
            "gradcheck.configs" => self.gradcheck_configs = parse_val(key, v)?,
            "gradcheck.coords" => self.gradcheck_coords = parse_val(key, v)?,
            "gradcheck.step" => self.gradcheck_step = parse_val(key, v)?,
            "gradcheck.fixed_t" => self.gradcheck_fixed_t = parse_val(key, v)?,
            "gradcheck.jacobian_tolerance" => {
                self.gradcheck_jacobian_tolerance = parse_val(key, v)?
            }
            "gradcheck.model_tolerance" => self.gradcheck_model_tolerance = parse_val(key, v)?,
            "gradcheck.softmax_tolerance" => {
                self.gradcheck_softmax_tolerance = parse_val(key, v)?
            }
            "export.checkpoint" => self.export_checkpoint = v.into(),
            unknown => return Err(Error::UnknownKey(unknown.to_string())),
        }
        Ok(())
    }

    /// Loads `key = value` lines; `#` starts a comment, blank lines are
    /// ignored.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected key = value, got {raw:?}"),
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// The resolved configuration as a re-loadable snapshot. Output paths
    /// are deliberately not part of the snapshot so reruns into different
    /// directories stay byte-identical.
    pub fn snapshot(&self) -> String {
        let list_u64 = |v: &[u64]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let list_usize = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut s = String::new();
        let mut kv = |k: &str, val: String| {
            let _ = writeln!(s, "{k} = {val}");
        };
        kv("seed", self.seed.to_string());
        kv("data.source", self.data_source.clone());
        kv("data.csv_path", self.data_csv_path.clone());
        kv("data.n_nodes", self.data_n_nodes.to_string());
        kv("data.length", self.data_length.to_string());
        kv("data.noise_std", format!("{}", self.data_noise_std));
        kv("data.noise_ar", format!("{}", self.data_noise_ar));
        kv("data.graph_density", format!("{}", self.data_graph_density));
        kv("data.time_of_day", self.data_time_of_day.to_string());
        kv("data.window", self.data_window.to_string());
        kv("data.horizon", self.data_horizon.to_string());
        kv("data.stride", self.data_stride.to_string());
        kv("data.train_frac", format!("{}", self.data_train_frac));
        kv("data.val_frac", format!("{}", self.data_val_frac));
        kv("model.d_model", self.model_d_model.to_string());
        kv("model.heads", self.model_heads.to_string());
        kv("model.d_k", self.model_d_k.to_string());
        kv("model.d_v", self.model_d_v.to_string());
        kv("model.d_emb", self.model_d_emb.to_string());
        kv("model.d_gc", self.model_d_gc.to_string());
        kv("model.pe", self.model_pe.clone());
        kv("model.residual", self.model_residual.to_string());
        kv("model.reg", self.model_reg.clone());
        kv("model.reg_p", format!("{}", self.model_reg_p));
        kv("model.reg_lambda", format!("{}", self.model_reg_lambda));
        kv(
            "model.shared_graph_weights",
            self.model_shared_graph_weights.to_string(),
        );
        kv("train.variant", self.train_variant.clone());
        kv("train.epochs", self.train_epochs.to_string());
        kv("train.warmup_epochs", self.train_warmup_epochs.to_string());
        kv("train.batch_size", self.train_batch_size.to_string());
        kv("train.lr0", format!("{}", self.train_lr0));
        kv("train.weight_decay", format!("{}", self.train_weight_decay));
        kv("train.seeds", list_u64(&self.train_seeds));
        kv("train.horizons", list_usize(&self.train_horizons));
        kv("bounds.t_values", list_usize(&self.bounds_t_values));
        kv("bounds.samples", self.bounds_samples.to_string());
        kv("bounds.d_model", self.bounds_d_model.to_string());
        kv("bounds.d_k", self.bounds_d_k.to_string());
        kv("bounds.norm", self.bounds_norm.clone());
        kv("gradcheck.configs", self.gradcheck_configs.to_string());
        kv("gradcheck.coords", self.gradcheck_coords.to_string());
        kv("gradcheck.step", format!("{}", self.gradcheck_step));
        kv("gradcheck.fixed_t", self.gradcheck_fixed_t.to_string());
        kv(
            "gradcheck.jacobian_tolerance",
            format!("{}", self.gradcheck_jacobian_tolerance),
        );
        kv(
            "gradcheck.model_tolerance",
            format!("{}", self.gradcheck_model_tolerance),
        );
        kv(
            "gradcheck.softmax_tolerance",
            format!("{}", self.gradcheck_softmax_tolerance),
        );
        kv("export.checkpoint", self.export_checkpoint.clone());
        s
    }

    fn regularizer(&self) -> Result<Regularizer> {
        let reg = match self.model_reg.as_str() {
            "none" => Regularizer::none(),
            "mask" => Regularizer::mask(),
            "dropout" => Regularizer::dropout(self.model_reg_p, 0),
            "penalty" => Regularizer::penalty(self.model_reg_lambda),
            other => return Err(Error::Config(format!("unknown regularizer {other:?}"))),
        };
        reg.validate()?;
        Ok(reg)
    }

    fn pe(&self) -> Result<PeScheme> {
        match self.model_pe.as_str() {
            "sinusoidal" => Ok(PeScheme::AbsoluteSinusoidal),
            "none" => Ok(PeScheme::None),
            other => Err(Error::Config(format!("unknown pe scheme {other:?}"))),
        }
    }

    fn norm(&self) -> Result<MatNorm> {
        match self.bounds_norm.as_str() {
            "spectral" => Ok(MatNorm::Spectral),
            "frobenius" => Ok(MatNorm::Frobenius),
            other => Err(Error::Config(format!("unknown norm {other:?}"))),
        }
    }

    pub fn dataset(&self) -> Result<SeriesDataset> {
        let fractions = SplitFractions {
            train: self.data_train_frac,
            val: self.data_val_frac,
        };
        match self.data_source.as_str() {
            "synthetic" => gen_synthetic(&SynthConfig {
                n_nodes: self.data_n_nodes,
                len: self.data_length,
                seed: crate::rng::derive(self.seed, "dataset"),
                graph_density: self.data_graph_density,
                noise_std: self.data_noise_std,
                noise_ar: self.data_noise_ar,
                time_of_day: self.data_time_of_day,
                window: self.data_window,
                horizon: self.data_horizon,
                fractions,
            }),
            "csv" => {
                if self.data_csv_path.is_empty() {
                    return Err(Error::Config("data.csv_path is required for csv source".into()));
                }
                ingest_csv(
                    Path::new(&self.data_csv_path),
                    fractions,
                    self.data_window,
                    self.data_horizon,
                )
            }
            other => Err(Error::Config(format!("unknown data source {other:?}"))),
        }
    }

    pub fn model_config(&self, n_nodes: usize, d_x: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            n_nodes,
            d_x,
            d_model: self.model_d_model,
            n_heads: self.model_heads,
            d_k: self.model_d_k,
            d_v: self.model_d_v,
            d_emb: self.model_d_emb,
            d_gc: self.model_d_gc,
            w_in: self.data_window,
            h_out: self.data_horizon,
            reg: self.regularizer()?,
            residual: self.model_residual,
            pe: self.pe()?,
            shared_graph_weights: self.model_shared_graph_weights,
        })
    }

    pub fn train_config(&self, n_nodes: usize, d_x: usize) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr0: self.train_lr0,
            epochs: self.train_epochs,
            warmup_epochs: self.train_warmup_epochs,
            batch_size: self.train_batch_size,
            weight_decay: self.train_weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seeds: self.train_seeds.clone(),
            horizons_report: self.train_horizons.clone(),
            stride: self.data_stride,
            penalty_lambda: self.model_reg_lambda,
            dropout_p: self.model_reg_p,
            model: self.model_config(n_nodes, d_x)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Run scaffolding
// ---------------------------------------------------------------------------

fn write_snapshot(cfg: &Config, out_dir: &Path) -> Result<()> {
    write_atomic(&out_dir.join("config.resolved.txt"), cfg.snapshot().as_bytes())
}

/// Manifest with the wall time and code hash. The wall time makes this the
/// one output file that is not byte-stable across reruns.
fn write_manifest(out_dir: &Path, command: &str, cfg: &Config, started: Instant) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "command = {command}");
    let _ = writeln!(s, "package_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "code_version = {}", env!("TEMPATTN_CODE_HASH"));
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(
        s,
        "seeds = {}",
        cfg.train_seeds
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    let _ = writeln!(s, "wall_time_s = {:.3}", started.elapsed().as_secs_f64());
    write_atomic(&out_dir.join("manifest.txt"), s.as_bytes())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

/// Analytic-vs-finite-difference verification: softmax row Jacobian
/// identity, attention Jacobian against central differences, and the
/// composed-model gradcheck. Prints one line per suite; exit 0 iff all
/// pass.
pub fn cmd_gradcheck(cfg: &Config, out_dir: &Path) -> Result<i32> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    write_snapshot(cfg, out_dir)?;
    let mut report = String::new();
    let mut all_pass = true;

    let softmax_worst = check_softmax_rows(500, crate::rng::derive(cfg.seed, "softmax-rows"));
    let softmax_pass = softmax_worst < cfg.gradcheck_softmax_tolerance;
    all_pass &= softmax_pass;
    let _ = writeln!(
        report,
        "softmax-jacobian: max_abs_row_sum={} tolerance={} {}",
        fmt_f64(softmax_worst),
        fmt_f64(cfg.gradcheck_softmax_tolerance),
        if softmax_pass { "PASS" } else { "FAIL" }
    );

    let fd_cfg = FdCheckConfig {
        n_configs: cfg.gradcheck_configs,
        seed: crate::rng::derive(cfg.seed, "jacobian-fd"),
        step: cfg.gradcheck_step,
        tolerance: cfg.gradcheck_jacobian_tolerance,
        abs_floor: 1e-8,
        fixed_t: if cfg.gradcheck_fixed_t > 0 {
            Some(cfg.gradcheck_fixed_t)
        } else {
            None
        },
    };
    let fd = check_total_vs_fd(&fd_cfg)?;
    all_pass &= fd.passed;
    let _ = writeln!(
        report,
        "attention-jacobian: max_rel_err={} tolerance={} {} ({} configs, {} entries)",
        fmt_f64(fd.max_rel_err),
        fmt_f64(fd_cfg.tolerance),
        if fd.passed { "PASS" } else { "FAIL" },
        fd.n_configs,
        fd.n_entries
    );
    if !fd.passed {
        if let Some(worst) = fd.worst {
            let _ = writeln!(
                report,
                "  worst: config #{} T={} d_model={} d_k={} d_v={} reg={:?} seed={:#x}",
                worst.index, worst.t, worst.d_model, worst.d_k, worst.d_v, worst.reg.kind,
                worst.seed
            );
        }
    }

    let model_report = gradcheck_model(
        crate::rng::derive(cfg.seed, "model-gradcheck"),
        cfg.gradcheck_coords,
        cfg.gradcheck_step,
        cfg.gradcheck_model_tolerance,
        1e-6,
    )?;
    all_pass &= model_report.passed;
    let _ = writeln!(
        report,
        "model-gradcheck: max_rel_err={} tolerance={} {} ({} coordinates)",
        fmt_f64(model_report.max_rel_err),
        fmt_f64(cfg.gradcheck_model_tolerance),
        if model_report.passed { "PASS" } else { "FAIL" },
        model_report.n_coords
    );

    print!("{report}");
    write_atomic(&out_dir.join("gradcheck_report.txt"), report.as_bytes())?;
    write_manifest(out_dir, "gradcheck", cfg, started)?;
    Ok(if all_pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn bounds_csv(aggregates: &[BoundReport]) -> String {
    let mut s = String::from(
        "t,i,norm,c_k,c_q,e_value_norm,e_key_measured,e_query_measured,key_bound,\
         query_bound,offdiag_bound,diag_bound,measured_offdiag_mean,\
         measured_total_uniform_mean,measured_diag,mean_diag_alpha\n",
    );
    for r in aggregates {
        let norm = match r.norm {
            MatNorm::Spectral => "spectral",
            MatNorm::Frobenius => "frobenius",
        };
        let _ = writeln!(
            s,
            "{},{},{norm},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.i,
            fmt_f64(r.c_k),
            fmt_f64(r.c_q),
            fmt_f64(r.e_value_norm),
            fmt_f64(r.e_key_measured),
            fmt_f64(r.e_query_measured),
            fmt_f64(r.key_bound),
            fmt_f64(r.query_bound),
            fmt_f64(r.offdiag_bound),
            fmt_f64(r.diag_bound),
            fmt_f64(r.measured_offdiag_mean),
            fmt_f64(r.measured_total_uniform_mean),
            fmt_f64(r.measured_diag),
            fmt_f64(r.mean_diag_alpha)
        );
    }
    s
}

/// Sequence-length sweep of the sensitivity bounds. Writes the aggregate
/// CSV plus gnuplot-ready (T, bound) and (T, measured) files; exit 0 iff no
/// per-sample bound was violated.
pub fn cmd_bounds_sweep(cfg: &Config, out_dir: &Path) -> Result<i32> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    write_snapshot(cfg, out_dir)?;
    let sweep_cfg = SweepConfig {
        t_values: cfg.bounds_t_values.clone(),
        samples: cfg.bounds_samples,
        d_model: cfg.bounds_d_model,
        d_k: cfg.bounds_d_k,
        seed: crate::rng::derive(cfg.seed, "bounds-sweep"),
        norm: cfg.norm()?,
    };
    let outcome = sweep_t(&sweep_cfg)?;

    write_atomic(
        &out_dir.join("bounds.csv"),
        bounds_csv(&outcome.aggregates).as_bytes(),
    )?;
    let mut bound_dat = String::new();
    let mut measured_dat = String::new();
    for r in &outcome.aggregates {
        let _ = writeln!(bound_dat, "{} {}", r.t, fmt_f64(r.offdiag_bound));
        let _ = writeln!(measured_dat, "{} {}", r.t, fmt_f64(r.measured_offdiag_mean));
    }
    write_atomic(&out_dir.join("bound_vs_t.dat"), bound_dat.as_bytes())?;
    write_atomic(&out_dir.join("measured_vs_t.dat"), measured_dat.as_bytes())?;

    for r in &outcome.aggregates {
        println!(
            "T={:>3}: offdiag bound {:.6} measured {:.6} | diag bound {:.6} measured {:.6}",
            r.t, r.offdiag_bound, r.measured_offdiag_mean, r.diag_bound, r.measured_diag
        );
    }
    write_manifest(out_dir, "bounds-sweep", cfg, started)?;
    if outcome.violations.is_empty() {
        println!("no bound violations over {} samples", sweep_cfg.samples);
        Ok(EXIT_OK)
    } else {
        for v in &outcome.violations {
            eprintln!(
                "violation: {} at T={} sample={} seed={:#x}: {} > {}",
                v.check,
                v.t,
                v.sample_index,
                v.sample_seed,
                fmt_f64(v.lhs),
                fmt_f64(v.rhs)
            );
        }
        Ok(EXIT_CHECK_FAILED)
    }
}

fn print_experiment(result: &ExperimentResult) {
    println!("variant {}:", result.variant.name());
    for h in &result.per_horizon {
        println!(
            "  horizon {:>2}: MAE {:.4}±{:.4}  RMSE {:.4}±{:.4}  MAPE {:.3}±{:.3}",
            h.horizon, h.mae_mean, h.mae_std, h.rmse_mean, h.rmse_std, h.mape_mean, h.mape_std
        );
    }
    println!(
        "  overall MAE {:.4}±{:.4}, final diag ratio {:.3}{}",
        result.overall_mae_mean,
        result.overall_mae_std,
        result.final_diag_ratio_mean,
        if result.failed_seeds.is_empty() {
            String::new()
        } else {
            format!(", FAILED seeds {:?}", result.failed_seeds)
        }
    );
}

/// Trains one variant (or all five) on the configured dataset and writes
/// result CSVs, per-seed attention exports and diagonal-mass curves.
pub fn cmd_train(cfg: &Config, out_dir: &Path) -> Result<i32> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    write_snapshot(cfg, out_dir)?;
    let ds = cfg.dataset()?;
    let train_cfg = cfg.train_config(ds.n_nodes(), ds.d_x())?;
    let variants: Vec<Variant> = if cfg.train_variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![Variant::parse(&cfg.train_variant)
            .ok_or_else(|| Error::Config(format!("unknown variant {:?}", cfg.train_variant)))?]
    };
    for variant in variants {
        let result = run_experiment(variant, &train_cfg, &ds, out_dir)?;
        print_experiment(&result);
    }
    write_manifest(out_dir, "train", cfg, started)?;
    Ok(EXIT_OK)
}

/// Loads a checkpoint and writes the per-head attention of its stored probe
/// window as CSV + PGM, plus a diagonal-mass summary line per head.
pub fn cmd_attn_export(cfg: &Config, out_dir: &Path) -> Result<i32> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    write_snapshot(cfg, out_dir)?;
    if cfg.export_checkpoint.is_empty() {
        return Err(Error::Config("export.checkpoint is required".into()));
    }
    let ckpt = match checkpoint::load(Path::new(&cfg.export_checkpoint)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cannot load checkpoint: {e}");
            return Ok(EXIT_CHECK_FAILED);
        }
    };
    let probe = match &ckpt.probe {
        Some(p) => crate::data::WindowSample {
            start: 0,
            inputs: p.clone(),
            target: crate::linalg::Matrix::zeros(ckpt.model.cfg.n_nodes, ckpt.model.cfg.h_out),
            mask: crate::linalg::Matrix::zeros(ckpt.model.cfg.n_nodes, ckpt.model.cfg.h_out),
        },
        None => {
            eprintln!("checkpoint carries no probe window");
            return Ok(EXIT_CHECK_FAILED);
        }
    };
    let heads = crate::train::probe_attention(&ckpt.model, &probe)?;
    let mut summary = String::new();
    for (h, alpha) in heads.iter().enumerate() {
        write_matrix_csv(&out_dir.join(format!("attn_head_{h}.csv")), alpha)?;
        write_matrix_pgm(&out_dir.join(format!("attn_head_{h}.pgm")), alpha)?;
        let dm = crate::bounds::diag_mass(alpha);
        let line = format!(
            "head {h}: mean_diag={} mean_offdiag={} ratio={}",
            fmt_f64(dm.mean_diag),
            fmt_f64(dm.mean_offdiag),
            dm.ratio.map(|r| fmt_f64(r)).unwrap_or_else(|| "nan".into())
        );
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
    }
    write_atomic(&out_dir.join("attn_summary.txt"), summary.as_bytes())?;
    write_manifest(out_dir, "attn-export", cfg, started)?;
    Ok(EXIT_OK)
}

/// Maps an error to the documented exit code.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::UnknownKey(_) | Error::Config(_) | Error::Parse { .. } => EXIT_USAGE,
        Error::Checkpoint(_) => EXIT_CHECK_FAILED,
        _ => EXIT_USAGE,
    }
}

/// Shared entry used by `main` and the integration tests.
pub fn run(
    command: &str,
    config_file: Option<&Path>,
    overrides: &[(String, String)],
    out_dir: &Path,
) -> Result<i32> {
    let mut cfg = Config::default();
    if let Some(path) = config_file {
        cfg.load_file(path)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    match command {
        "gradcheck" => cmd_gradcheck(&cfg, out_dir),
        "bounds-sweep" => cmd_bounds_sweep(&cfg, out_dir),
        "train" => cmd_train(&cfg, out_dir),
        "attn-export" => cmd_attn_export(&cfg, out_dir),
        other => Err(Error::Config(format!("unknown subcommand {other:?}"))),
    }
}

/// Parse a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override must be key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn default_out_dir(command: &str) -> PathBuf {
    PathBuf::from("out").join(command)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let mut cfg = Config::default();
        let err = cfg.set("train.epocs", "10").unwrap_err();
        match err {
            Error::UnknownKey(k) => assert_eq!(k, "train.epocs"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn snapshot_reloads_to_identical_state() {
        let mut cfg = Config::default();
        cfg.set("train.epochs", "20").unwrap();
        cfg.set("model.reg", "penalty").unwrap();
        cfg.set("train.seeds", "5,6").unwrap();
        cfg.set("bounds.t_values", "2,4").unwrap();
        let snap = cfg.snapshot();

        let mut reloaded = Config::default();
        for line in snap.lines() {
            let (k, v) = line.split_once('=').unwrap();
            reloaded.set(k, v).unwrap();
        }
        assert_eq!(reloaded.snapshot(), snap);
        assert_eq!(reloaded.train_epochs, 20);
        assert_eq!(reloaded.train_seeds, vec![5, 6]);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = Config::default();
        assert!(matches!(
            cfg.set("train.epochs", "ten"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cfg.set("model.reg", "quux"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cfg.set("data.time_of_day", "maybe"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn override_parsing() {
        let (k, v) = parse_override("train.lr0 = 0.01").unwrap();
        assert_eq!((k.as_str(), v.as_str()), ("train.lr0", "0.01"));
        assert!(parse_override("no-equals").is_err());
    }

    #[test]
    fn config_file_comments_and_errors() {
        let dir = std::env::temp_dir().join(format!("tempattn_cfg_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(
            &path,
            "# a comment\ntrain.epochs = 3\n\nmodel.reg = mask # inline comment\n",
        )
        .unwrap();
        let mut cfg = Config::default();
        cfg.load_file(&path).unwrap();
        assert_eq!(cfg.train_epochs, 3);
        assert_eq!(cfg.model_reg, "mask");

        std::fs::write(&path, "not a key value line\n").unwrap();
        let mut cfg = Config::default();
        assert!(matches!(
            cfg.load_file(&path),
            Err(Error::Parse { line: 1, .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
