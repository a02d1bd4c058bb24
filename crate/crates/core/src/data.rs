//! Synthetic spatio-temporal series generation, wide-CSV ingestion and
//! export, train-split z-score normalization, and windowing into
//! (input, horizon) samples.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive, SplitMix64};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Steps per simulated day (5-minute sampling).
pub const STEPS_PER_DAY: usize = 288;

/// Steps a neighbor signal takes to reach a node (15 simulated minutes).
pub const DIFFUSION_LAG: usize = 3;

/// Per-feature z-score scaler, fitted on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn normalize(&self, feature: usize, x: f64) -> f64 {
        (x - self.mean[feature]) / self.std[feature]
    }

    pub fn denormalize(&self, feature: usize, z: f64) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }
}

/// Dataset split, contiguous and ordered in time: train < val < test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Train/val fractions of the timeline; test takes the remainder.
#[derive(Debug, Clone, Copy)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
        }
    }
}

/// Windowed multivariate node series: `n_nodes` x `len` steps x `d_x`
/// features, immutable once constructed.
#[derive(Debug, Clone)]
pub struct SeriesDataset {
    values: Vec<f64>, // [node][step][feature]
    n_nodes: usize,
    len: usize,
    d_x: usize,
    pub timestamps: Option<Vec<f64>>,
    pub scaler: Scaler,
    /// Half-open step ranges for (train, val, test).
    pub splits: [(usize, usize); 3],
    pub window: usize,
    pub horizon: usize,
}

/// One training sample: per-node normalized input windows, targets and the
/// missing-data mask in original units.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// Start step of the input window.
    pub start: usize,
    /// Per node: window x d_x matrix of z-scored inputs.
    pub inputs: Vec<Matrix>,
    /// n_nodes x horizon targets, original units (feature 0).
    pub target: Matrix,
    /// n_nodes x horizon; 0.0 marks missing readings (zero in the raw data).
    pub mask: Matrix,
}

impl SeriesDataset {
    pub fn new(
        values: Vec<f64>,
        n_nodes: usize,
        len: usize,
        d_x: usize,
        timestamps: Option<Vec<f64>>,
        fractions: SplitFractions,
        window: usize,
        horizon: usize,
    ) -> Result<Self> {
        if values.len() != n_nodes * len * d_x {
            return Err(Error::Data(format!(
                "value buffer has {} entries, expected {}",
                values.len(),
                n_nodes * len * d_x
            )));
        }
        if n_nodes == 0 || d_x == 0 {
            return Err(Error::Data("need at least one node and one feature".into()));
        }
        if len < window + horizon {
            return Err(Error::Data(format!(
                "series length {len} shorter than window {window} + horizon {horizon}"
            )));
        }
        if !(0.0..1.0).contains(&fractions.train)
            || fractions.val < 0.0
            || fractions.train + fractions.val >= 1.0
        {
            return Err(Error::Config("split fractions must leave room for test".into()));
        }
        let train_end = (len as f64 * fractions.train).floor() as usize;
        let val_end = (len as f64 * (fractions.train + fractions.val)).floor() as usize;
        let splits = [(0, train_end), (train_end, val_end), (val_end, len)];

        // scaler from the train range only
        let mut mean = vec![0.0; d_x];
        let mut std = vec![0.0; d_x];
        let count = (n_nodes * train_end) as f64;
        for n in 0..n_nodes {
            for t in 0..train_end {
                for f in 0..d_x {
                    mean[f] += values[(n * len + t) * d_x + f];
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for n in 0..n_nodes {
            for t in 0..train_end {
                for f in 0..d_x {
                    let d = values[(n * len + t) * d_x + f] - mean[f];
                    std[f] += d * d;
                }
            }
        }
        for s in &mut std {
            *s = (*s / count).sqrt();
            if *s < 1e-12 {
                *s = 1.0; // constant feature: leave it unscaled
            }
        }

        Ok(SeriesDataset {
            values,
            n_nodes,
            len,
            d_x,
            timestamps,
            scaler: Scaler { mean, std },
            splits,
            window,
            horizon,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    #[inline]
    pub fn value(&self, node: usize, step: usize, feature: usize) -> f64 {
        self.values[(node * self.len + step) * self.d_x + feature]
    }

    pub fn split_range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => self.splits[0],
            Split::Val => self.splits[1],
            Split::Test => self.splits[2],
        }
    }

    /// Number of windows a split yields at the given stride.
    pub fn window_count(&self, split: Split, w_in: usize, h_out: usize, stride: usize) -> usize {
        let (s, e) = self.split_range(split);
        let span = e - s;
        if span < w_in + h_out {
            return 0;
        }
        (span - w_in - h_out) / stride + 1
    }
}

/// Iterator over the windows of one split. Inputs are z-scored with the
/// train-split scaler; targets stay in original units.
pub struct WindowIter<'a> {
    ds: &'a SeriesDataset,
    w_in: usize,
    h_out: usize,
    stride: usize,
    next_start: usize,
    end: usize,
}

impl<'a> Iterator for WindowIter<'a> {
    type Item = WindowSample;

    fn next(&mut self) -> Option<WindowSample> {
        let t0 = self.next_start;
        if t0 + self.w_in + self.h_out > self.end {
            return None;
        }
        self.next_start += self.stride;
        let ds = self.ds;
        let mut inputs = Vec::with_capacity(ds.n_nodes);
        for n in 0..ds.n_nodes {
            inputs.push(Matrix::from_fn(self.w_in, ds.d_x, |t, f| {
                ds.scaler.normalize(f, ds.value(n, t0 + t, f))
            }));
        }
        let target = Matrix::from_fn(ds.n_nodes, self.h_out, |n, h| {
            ds.value(n, t0 + self.w_in + h, 0)
        });
        let mask = Matrix::from_fn(ds.n_nodes, self.h_out, |n, h| {
            if target.get(n, h) == 0.0 {
                0.0
            } else {
                1.0
            }
        });
        Some(WindowSample {
            start: t0,
            inputs,
            target,
            mask,
        })
    }
}

/// Yields (input, target) windows of a split. Windows never cross split
/// boundaries; a split shorter than `w_in + h_out` yields nothing (with a
/// warning).
pub fn window(
    ds: &SeriesDataset,
    w_in: usize,
    h_out: usize,
    stride: usize,
    split: Split,
) -> WindowIter<'_> {
    assert!(w_in >= 1 && h_out >= 1 && stride >= 1, "degenerate window");
    let (s, e) = ds.split_range(split);
    if e - s < w_in + h_out {
        log::warn!(
            "split {:?} spans {} steps, too short for window {} + horizon {}: no samples",
            split,
            e - s,
            w_in,
            h_out
        );
    }
    WindowIter {
        ds,
        w_in,
        h_out,
        stride,
        next_start: s,
        end: e,
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub len: usize,
    pub seed: u64,
    /// Probability of a directed neighbor edge in the diffusion graph.
    pub graph_density: f64,
    /// Marginal standard deviation of the Gaussian noise process.
    pub noise_std: f64,
    /// Lag-1 autocorrelation of the noise. Traffic-like residuals are far
    /// from white, so short-horizon forecasts genuinely depend on the most
    /// recent readings, not just on the smooth daily profile.
    pub noise_ar: f64,
    /// Adds a second input channel with the time of day in [0, 1).
    pub time_of_day: bool,
    pub window: usize,
    pub horizon: usize,
    pub fractions: SplitFractions,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 20,
            len: 2016, // one simulated week
            seed: 0,
            graph_density: 0.2,
            noise_std: 0.1,
            noise_ar: 0.9,
            time_of_day: false,
            window: 12,
            horizon: 12,
            fractions: SplitFractions::default(),
        }
    }
}

/// Generates the synthetic dataset: per node a daily sinusoid
/// (period 288 steps) plus a lagged diffusion of neighbor signals (noise
/// included) over a random seeded adjacency, plus Gaussian noise (AR(1)
/// over time, independent across nodes, marginal std `noise_std`).
/// Deterministic per seed.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SeriesDataset> {
    if cfg.n_nodes < 1 {
        return Err(Error::Data("need at least one node".into()));
    }
    if cfg.len < cfg.window + cfg.horizon {
        return Err(Error::Data(format!(
            "length {} shorter than window {} + horizon {}",
            cfg.len, cfg.window, cfg.horizon
        )));
    }
    if !(0.0..1.0).contains(&cfg.noise_ar) {
        return Err(Error::Data(format!(
            "noise autocorrelation must be in [0, 1), got {}",
            cfg.noise_ar
        )));
    }
    let n = cfg.n_nodes;
    let mut params_rng = SplitMix64::new(derive(cfg.seed, "synth-params"));
    let offsets: Vec<f64> = (0..n).map(|_| params_rng.uniform(4.0, 6.0)).collect();
    let amps: Vec<f64> = (0..n).map(|_| params_rng.uniform(1.0, 2.0)).collect();
    let phases: Vec<f64> = (0..n)
        .map(|_| params_rng.uniform(0.0, 2.0 * std::f64::consts::PI))
        .collect();

    // random diffusion adjacency, rows normalized, total weight 0.3
    let mut adj_rng = SplitMix64::new(derive(cfg.seed, "synth-adjacency"));
    let mut adj = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            if r != c && adj_rng.next_f64() < cfg.graph_density {
                adj[r * n + c] = adj_rng.next_f64();
            }
        }
    }
    for r in 0..n {
        let row_sum: f64 = adj[r * n..(r + 1) * n].iter().sum();
        if row_sum > 0.0 {
            for c in 0..n {
                adj[r * n + c] *= 0.3 / row_sum;
            }
        }
    }

    let base = |node: usize, t: usize| -> f64 {
        offsets[node]
            + amps[node]
                * (2.0 * std::f64::consts::PI * t as f64 / STEPS_PER_DAY as f64 + phases[node])
                    .sin()
    };

    let d_x = if cfg.time_of_day { 2 } else { 1 };
    let mut noise_rng = SplitMix64::new(derive(cfg.seed, "synth-noise"));
    // AR(1) Gaussian noise per node, stationary with marginal std noise_std,
    // independent across nodes
    let innovation = cfg.noise_std * (1.0 - cfg.noise_ar * cfg.noise_ar).sqrt();
    let mut noise = vec![0.0; n * cfg.len];
    if cfg.noise_std > 0.0 {
        for node in 0..n {
            let mut current = 0.0;
            for t in 0..cfg.len {
                current = if t == 0 {
                    cfg.noise_std * noise_rng.normal()
                } else {
                    cfg.noise_ar * current + innovation * noise_rng.normal()
                };
                noise[node * cfg.len + t] = current;
            }
        }
    }

    // neighbor signals (with their noise) diffuse in with a propagation lag
    let mut values = vec![0.0; n * cfg.len * d_x];
    for node in 0..n {
        for t in 0..cfg.len {
            let mut v = base(node, t) + noise[node * cfg.len + t];
            let lagged = t.saturating_sub(DIFFUSION_LAG);
            for m in 0..n {
                let wgt = adj[node * n + m];
                if wgt != 0.0 {
                    v += wgt * (base(m, lagged) + noise[m * cfg.len + lagged]);
                }
            }
            let idx = (node * cfg.len + t) * d_x;
            values[idx] = v;
            if cfg.time_of_day {
                values[idx + 1] = (t % STEPS_PER_DAY) as f64 / STEPS_PER_DAY as f64;
            }
        }
    }

    let timestamps = Some((0..cfg.len).map(|t| t as f64).collect());
    SeriesDataset::new(
        values,
        n,
        cfg.len,
        d_x,
        timestamps,
        cfg.fractions,
        cfg.window,
        cfg.horizon,
    )
}

// ---------------------------------------------------------------------------
// Wide CSV
// ---------------------------------------------------------------------------

/// Reads a wide CSV: a header line, then one row per step with the
/// timestamp in the first column and one sensor per remaining column.
/// Produces a single-feature dataset. Zero readings are kept verbatim and
/// masked out of losses and metrics downstream.
pub fn ingest_csv(
    path: &Path,
    fractions: SplitFractions,
    window: usize,
    horizon: usize,
) -> Result<SeriesDataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        None => {
            return Err(Error::Parse {
                line: 0,
                msg: "empty file".into(),
            })
        }
        Some((_, line)) => line?,
    };
    let n_cols = header.trim_end_matches('\r').split(',').count();
    if n_cols < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "need a timestamp column and at least one sensor column".into(),
        });
    }
    let n_nodes = n_cols - 1;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut timestamps: Vec<f64> = Vec::new();
    let mut timestamps_numeric = true;
    for (idx, line) in lines {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1; // 1-based, header is line 1
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_cols {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {n_cols} cells, found {}", cells.len()),
            });
        }
        match cells[0].trim().parse::<f64>() {
            Ok(ts) => timestamps.push(ts),
            Err(_) => timestamps_numeric = false,
        }
        let mut row = Vec::with_capacity(n_nodes);
        for (c, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("non-numeric cell in column {} ({cell:?})", c + 2),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    }

    let len = rows.len();
    let mut values = vec![0.0; n_nodes * len];
    for (t, row) in rows.iter().enumerate() {
        for (n, &v) in row.iter().enumerate() {
            values[n * len + t] = v;
        }
    }
    let timestamps = if timestamps_numeric && timestamps.len() == len {
        Some(timestamps)
    } else {
        None
    };
    SeriesDataset::new(
        values,
        n_nodes,
        len,
        1,
        timestamps,
        fractions,
        window,
        horizon,
    )
}

/// Writes feature 0 as a wide CSV with 17 significant digits, so a
/// re-ingest reproduces the values exactly.
pub fn export_csv(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("timestamp");
    for n in 0..ds.n_nodes() {
        out.push_str(&format!(",sensor_{n}"));
    }
    out.push('\n');
    for t in 0..ds.len() {
        let ts = ds
            .timestamps
            .as_ref()
            .map(|v| v[t])
            .unwrap_or(t as f64);
        out.push_str(&crate::export::fmt_f64(ts));
        for n in 0..ds.n_nodes() {
            out.push(',');
            out.push_str(&crate::export::fmt_f64(ds.value(n, t, 0)));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
