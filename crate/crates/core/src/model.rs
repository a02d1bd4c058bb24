//! The toy spatio-temporal forecaster: per-node multi-head temporal
//! attention over the input window, a single graph convolution per time
//! step with learned forward/backward adjacency, and a linear readout over
//! the horizon. Backpropagation is hand-derived for every layer.
//!
//! Parameter order (used by checkpoints, gradients and the optimizer):
//! embed_w, embed_b, then per head wq, wk, wv, then wo, e1, e2, wg_fwd,
//! wg_bwd, bg, w_out, b_out.

use crate::attention::{positional_encode, AttnTrace, AttnWeights, PeScheme, Regularizer};
use crate::data::{Scaler, WindowSample};
use crate::error::{Error, Result};
use crate::linalg::{softmax_slice, Matrix};
use crate::rng::{derive, mix, SplitMix64};

pub mod checkpoint;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub d_x: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Node-embedding dimension of the adjacency factors.
    pub d_emb: usize,
    /// Graph-convolution output dimension.
    pub d_gc: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub reg: Regularizer,
    pub residual: bool,
    pub pe: PeScheme,
    /// Tie the backward graph weight to the forward one.
    pub shared_graph_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_nodes: 20,
            d_x: 1,
            d_model: 16,
            n_heads: 8,
            d_k: 2,
            d_v: 2,
            d_emb: 2,
            d_gc: 4,
            w_in: 12,
            h_out: 12,
            reg: Regularizer::none(),
            residual: true,
            pe: PeScheme::AbsoluteSinusoidal,
            shared_graph_weights: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TnSModel {
    pub cfg: ModelConfig,
    pub embed_w: Matrix, // d_model x d_x
    pub embed_b: Matrix, // 1 x d_model
    pub heads: Vec<AttnWeights>,
    pub wo: Matrix, // d_model x (n_heads * d_v)
    pub e1: Matrix, // n_nodes x d_emb
    pub e2: Matrix, // n_nodes x d_emb
    pub wg_fwd: Matrix, // d_gc x d_model
    pub wg_bwd: Matrix, // d_gc x d_model
    pub bg: Matrix,     // 1 x d_gc
    pub w_out: Matrix,  // h_out x (w_in * d_gc)
    pub b_out: Matrix,  // 1 x h_out
}

/// One gradient buffer per parameter tensor, shape-matched.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub embed_w: Matrix,
    pub embed_b: Matrix,
    pub heads: Vec<(Matrix, Matrix, Matrix)>, // (wq, wk, wv)
    pub wo: Matrix,
    pub e1: Matrix,
    pub e2: Matrix,
    pub wg_fwd: Matrix,
    pub wg_bwd: Matrix,
    pub bg: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl TnSModel {
    /// Seeded init: all weight matrices uniform in ±1/sqrt(d_model),
    /// biases zero. Warns when the graph block is not roughly a quarter
    /// of the attention block (4±1x).
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.n_heads == 0 || cfg.n_nodes == 0 || cfg.w_in == 0 || cfg.h_out == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if cfg.pe == PeScheme::AbsoluteSinusoidal && cfg.d_model % 2 != 0 {
            return Err(Error::OddDModel(cfg.d_model));
        }
        cfg.reg.validate()?;
        let bound = 1.0 / (cfg.d_model as f64).sqrt();
        let stream = |name: &str| SplitMix64::new(derive(seed, name));
        let rand_mat = |rng: &mut SplitMix64, r: usize, c: usize| {
            Matrix::from_fn(r, c, |_, _| rng.uniform(-bound, bound))
        };

        let mut rng = stream("embed");
        let embed_w = rand_mat(&mut rng, cfg.d_model, cfg.d_x);
        let embed_b = Matrix::zeros(1, cfg.d_model);

        let heads: Vec<AttnWeights> = (0..cfg.n_heads)
            .map(|h| {
                AttnWeights::init(
                    cfg.d_model,
                    cfg.d_k,
                    cfg.d_v,
                    derive(seed, &format!("head-{h}")),
                )
            })
            .collect();

        let mut rng = stream("wo");
        let wo = rand_mat(&mut rng, cfg.d_model, cfg.n_heads * cfg.d_v);

        let mut rng = stream("adjacency");
        let e1 = rand_mat(&mut rng, cfg.n_nodes, cfg.d_emb);
        let e2 = rand_mat(&mut rng, cfg.n_nodes, cfg.d_emb);

        let mut rng = stream("graph");
        let wg_fwd = rand_mat(&mut rng, cfg.d_gc, cfg.d_model);
        let wg_bwd = if cfg.shared_graph_weights {
            Matrix::zeros(cfg.d_gc, cfg.d_model)
        } else {
            rand_mat(&mut rng, cfg.d_gc, cfg.d_model)
        };
        let bg = Matrix::zeros(1, cfg.d_gc);

        let mut rng = stream("readout");
        let w_out = rand_mat(&mut rng, cfg.h_out, cfg.w_in * cfg.d_gc);
        let b_out = Matrix::zeros(1, cfg.h_out);

        let model = TnSModel {
            cfg,
            embed_w,
            embed_b,
            heads,
            wo,
            e1,
            e2,
            wg_fwd,
            wg_bwd,
            bg,
            w_out,
            b_out,
        };
        let (ta, graph) = model.block_param_counts();
        let ratio = ta as f64 / graph as f64;
        if !(3.0..=5.0).contains(&ratio) {
            log::warn!(
                "attention/graph parameter ratio {ratio:.2} outside the 4±1 band \
                 (attention {ta}, graph {graph})"
            );
        }
        Ok(model)
    }

    /// (attention block, graph block) parameter counts.
    pub fn block_param_counts(&self) -> (usize, usize) {
        let ta: usize = self.heads.iter().map(|h| h.n_params()).sum::<usize>()
            + self.wo.rows() * self.wo.cols();
        let count = |m: &Matrix| m.rows() * m.cols();
        let mut graph = count(&self.e1) + count(&self.e2) + count(&self.wg_fwd) + count(&self.bg);
        if !self.cfg.shared_graph_weights {
            graph += count(&self.wg_bwd);
        }
        (ta, graph)
    }

    /// Parameters in the documented fixed order.
    pub fn param_refs(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.embed_w, &self.embed_b];
        for h in &self.heads {
            v.push(&h.wq);
            v.push(&h.wk);
            v.push(&h.wv);
        }
        v.extend([
            &self.wo,
            &self.e1,
            &self.e2,
            &self.wg_fwd,
            &self.wg_bwd,
            &self.bg,
            &self.w_out,
            &self.b_out,
        ]);
        v
    }

    pub fn param_refs_mut(&mut self) -> Vec<&mut Matrix> {
        let TnSModel {
            cfg: _,
            embed_w,
            embed_b,
            heads,
            wo,
            e1,
            e2,
            wg_fwd,
            wg_bwd,
            bg,
            w_out,
            b_out,
        } = self;
        let mut v: Vec<&mut Matrix> = vec![embed_w, embed_b];
        for h in heads.iter_mut() {
            v.push(&mut h.wq);
            v.push(&mut h.wk);
            v.push(&mut h.wv);
        }
        v.extend([wo, e1, e2, wg_fwd, wg_bwd, bg, w_out, b_out]);
        v
    }

    pub fn n_params(&self) -> usize {
        self.param_refs().iter().map(|m| m.rows() * m.cols()).sum()
    }
}

impl GradientSet {
    pub fn zeros_like(model: &TnSModel) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        GradientSet {
            embed_w: z(&model.embed_w),
            embed_b: z(&model.embed_b),
            heads: model
                .heads
                .iter()
                .map(|h| (z(&h.wq), z(&h.wk), z(&h.wv)))
                .collect(),
            wo: z(&model.wo),
            e1: z(&model.e1),
            e2: z(&model.e2),
            wg_fwd: z(&model.wg_fwd),
            wg_bwd: z(&model.wg_bwd),
            bg: z(&model.bg),
            w_out: z(&model.w_out),
            b_out: z(&model.b_out),
        }
    }

    /// Buffers in the same order as [`TnSModel::param_refs`].
    pub fn bufs(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.embed_w, &self.embed_b];
        for (wq, wk, wv) in &self.heads {
            v.push(wq);
            v.push(wk);
            v.push(wv);
        }
        v.extend([
            &self.wo,
            &self.e1,
            &self.e2,
            &self.wg_fwd,
            &self.wg_bwd,
            &self.bg,
            &self.w_out,
            &self.b_out,
        ]);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.bufs().iter().all(|m| m.is_finite())
    }
}

/// A_fwd = row_softmax(relu(E1 E2ᵀ)), A_bwd = row_softmax(relu(E2 E1ᵀ)).
/// Both are row-stochastic by construction.
pub fn learned_adjacency(e1: &Matrix, e2: &Matrix) -> Result<(Matrix, Matrix)> {
    let s_fwd = e1.matmul(&e2.transpose())?;
    let s_bwd = s_fwd.transpose();
    Ok((row_softmax_relu(&s_fwd)?, row_softmax_relu(&s_bwd)?))
}

fn row_softmax_relu(s: &Matrix) -> Result<Matrix> {
    let n = s.rows();
    let mut a = Matrix::zeros(n, s.cols());
    for i in 0..n {
        let relu_row: Vec<f64> = s.row(i).iter().map(|&x| x.max(0.0)).collect();
        let soft = softmax_slice(&relu_row)?;
        a.row_mut(i).copy_from_slice(&soft);
    }
    Ok(a)
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    /// [sample][node][head] attention traces.
    pub traces: Vec<Vec<Vec<AttnTrace>>>,
    /// [sample][node] multi-head outputs (w_in x d_model).
    pub y: Vec<Vec<Matrix>>,
    /// [sample][t] pre-relu graph activations (n_nodes x d_gc).
    pub g_pre: Vec<Vec<Matrix>>,
    /// [sample][t] post-relu graph activations.
    pub g: Vec<Vec<Matrix>>,
    pub a_fwd: Matrix,
    pub a_bwd: Matrix,
    pub s_fwd: Matrix,
    /// [sample] predictions in normalized units (n_nodes x h_out).
    pub preds: Vec<Matrix>,
}

/// Forward pass over a batch of windows. Per node: embed to d_model, add
/// the positional encoding, run multi-head temporal attention over the
/// window (with the model regularizer), then per time step one graph
/// convolution h' = relu(A_fwd H Wfᵀ + A_bwd H Wbᵀ + bg), flatten time and
/// read out the horizon. Predictions are in normalized units.
pub fn model_forward(
    batch: &[WindowSample],
    model: &TnSModel,
    train_mode: bool,
) -> Result<ForwardCache> {
    let cfg = &model.cfg;
    let (a_fwd, a_bwd) = learned_adjacency(&model.e1, &model.e2)?;
    let s_fwd = model.e1.matmul(&model.e2.transpose())?;
    let wg_bwd = if cfg.shared_graph_weights {
        &model.wg_fwd
    } else {
        &model.wg_bwd
    };

    let mut traces = Vec::with_capacity(batch.len());
    let mut ys = Vec::with_capacity(batch.len());
    let mut g_pres = Vec::with_capacity(batch.len());
    let mut gs = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());

    for (s_idx, sample) in batch.iter().enumerate() {
        if sample.inputs.len() != cfg.n_nodes {
            return Err(Error::dim(
                "model_forward",
                format!(
                    "sample has {} nodes, model expects {}",
                    sample.inputs.len(),
                    cfg.n_nodes
                ),
            ));
        }
        let mut node_traces = Vec::with_capacity(cfg.n_nodes);
        let mut node_y = Vec::with_capacity(cfg.n_nodes);
        for (n, input) in sample.inputs.iter().enumerate() {
            if input.shape() != (cfg.w_in, cfg.d_x) {
                return Err(Error::dim(
                    "model_forward",
                    format!(
                        "node input is {:?}, expected {:?}",
                        input.shape(),
                        (cfg.w_in, cfg.d_x)
                    ),
                ));
            }
            // embed + bias + positional encoding
            let mut xe = input.matmul_nt(&model.embed_w)?;
            for t in 0..cfg.w_in {
                for c in 0..cfg.d_model {
                    let v = xe.get(t, c) + model.embed_b.get(0, c);
                    xe.set(t, c, v);
                }
            }
            let xp = positional_encode(&xe, cfg.pe)?;

            // per-(sample, node) dropout stream
            let reg = cfg
                .reg
                .with_substream(s_idx as u64)
                .with_substream(n as u64);
            let (y, head_traces) = crate::attention::multihead_forward(
                &xp,
                &model.heads,
                &model.wo,
                &reg,
                cfg.residual,
                train_mode,
            )?;
            node_traces.push(head_traces);
            node_y.push(y);
        }

        // graph convolution per time step
        let mut g_pre_t = Vec::with_capacity(cfg.w_in);
        let mut g_t = Vec::with_capacity(cfg.w_in);
        for t in 0..cfg.w_in {
            let h_t = Matrix::from_fn(cfg.n_nodes, cfg.d_model, |n, c| node_y[n].get(t, c));
            let fwd = a_fwd.matmul(&h_t)?.matmul_nt(&model.wg_fwd)?;
            let bwd = a_bwd.matmul(&h_t)?.matmul_nt(wg_bwd)?;
            let mut pre = fwd.add(&bwd);
            for n in 0..cfg.n_nodes {
                for c in 0..cfg.d_gc {
                    let v = pre.get(n, c) + model.bg.get(0, c);
                    pre.set(n, c, v);
                }
            }
            let post = Matrix::from_fn(cfg.n_nodes, cfg.d_gc, |n, c| pre.get(n, c).max(0.0));
            g_pre_t.push(pre);
            g_t.push(post);
        }

        // flatten time per node and read out
        let mut pred = Matrix::zeros(cfg.n_nodes, cfg.h_out);
        for n in 0..cfg.n_nodes {
            let flat: Vec<f64> = (0..cfg.w_in)
                .flat_map(|t| g_t[t].row(n).to_vec())
                .collect();
            for h in 0..cfg.h_out {
                let w_row = model.w_out.row(h);
                let acc: f64 = w_row.iter().zip(&flat).map(|(w, f)| w * f).sum();
                pred.set(n, h, acc + model.b_out.get(0, h));
            }
        }

        traces.push(node_traces);
        ys.push(node_y);
        g_pres.push(g_pre_t);
        gs.push(g_t);
        preds.push(pred);
    }

    Ok(ForwardCache {
        traces,
        y: ys,
        g_pre: g_pres,
        g: gs,
        a_fwd,
        a_bwd,
        s_fwd,
        preds,
    })
}

/// Masked MAE in original units: predictions are de-normalized with the
/// target-feature scaler before the residual is taken.
pub fn masked_mae(cache_preds: &[Matrix], batch: &[WindowSample], scaler: &Scaler) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for (pred, sample) in cache_preds.iter().zip(batch) {
        for n in 0..pred.rows() {
            for h in 0..pred.cols() {
                if sample.mask.get(n, h) == 0.0 {
                    continue;
                }
                let p = scaler.denormalize(0, pred.get(n, h));
                total += (p - sample.target.get(n, h)).abs();
                count += 1.0;
            }
        }
    }
    if count == 0.0 {
        0.0
    } else {
        total / count
    }
}

/// Forward + loss, no gradients.
pub fn model_loss(
    batch: &[WindowSample],
    model: &TnSModel,
    scaler: &Scaler,
    train_mode: bool,
) -> Result<f64> {
    let cache = model_forward(batch, model, train_mode)?;
    Ok(masked_mae(&cache.preds, batch, scaler))
}

/// Forward + analytic reverse-mode gradients of the masked MAE for every
/// parameter. The MAE subgradient is sign(pred - target), zero at ties;
/// dropout is straight-through (the sampled diagonal multiplier is a
/// constant during backprop).
pub fn model_backward(
    batch: &[WindowSample],
    model: &TnSModel,
    scaler: &Scaler,
    train_mode: bool,
) -> Result<(f64, GradientSet)> {
    let cfg = &model.cfg;
    let cache = model_forward(batch, model, train_mode)?;
    let loss = masked_mae(&cache.preds, batch, scaler);
    let mut grads = GradientSet::zeros_like(model);

    // total masked count over the batch for the mean
    let mut count = 0.0;
    for sample in batch {
        count += sample.mask.data().iter().sum::<f64>();
    }
    if count == 0.0 {
        log::warn!("batch has no valid targets; zero gradients");
        return Ok((loss, grads));
    }
    let std0 = scaler.std[0];
    let inv_dk_sqrt = 1.0 / (cfg.d_k as f64).sqrt();
    let wg_bwd = if cfg.shared_graph_weights {
        &model.wg_fwd
    } else {
        &model.wg_bwd
    };

    let mut d_a_fwd = Matrix::zeros(cfg.n_nodes, cfg.n_nodes);
    let mut d_a_bwd = Matrix::zeros(cfg.n_nodes, cfg.n_nodes);

    for (s_idx, sample) in batch.iter().enumerate() {
        let pred = &cache.preds[s_idx];
        // d loss / d pred (normalized units)
        let d_pred = Matrix::from_fn(cfg.n_nodes, cfg.h_out, |n, h| {
            if sample.mask.get(n, h) == 0.0 {
                return 0.0;
            }
            let r = scaler.denormalize(0, pred.get(n, h)) - sample.target.get(n, h);
            let sign = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            sign * std0 / count
        });

        // readout: pred_n = W_out flat_n + b_out
        let mut d_g: Vec<Matrix> = (0..cfg.w_in)
            .map(|_| Matrix::zeros(cfg.n_nodes, cfg.d_gc))
            .collect();
        for n in 0..cfg.n_nodes {
            let flat: Vec<f64> = (0..cfg.w_in)
                .flat_map(|t| cache.g[s_idx][t].row(n).to_vec())
                .collect();
            for h in 0..cfg.h_out {
                let dp = d_pred.get(n, h);
                if dp == 0.0 {
                    continue;
                }
                let gw_row = grads.w_out.row_mut(h);
                for (c, f) in flat.iter().enumerate() {
                    gw_row[c] += dp * f;
                }
                let v = grads.b_out.get(0, h) + dp;
                grads.b_out.set(0, h, v);
                let w_row = model.w_out.row(h);
                for t in 0..cfg.w_in {
                    for c in 0..cfg.d_gc {
                        let v = d_g[t].get(n, c) + dp * w_row[t * cfg.d_gc + c];
                        d_g[t].set(n, c, v);
                    }
                }
            }
        }

        // graph convolution backward per time step
        let mut d_y: Vec<Matrix> = (0..cfg.n_nodes)
            .map(|_| Matrix::zeros(cfg.w_in, cfg.d_model))
            .collect();
        for t in 0..cfg.w_in {
            // relu
            let mut d_gpre = d_g[t].clone();
            for n in 0..cfg.n_nodes {
                for c in 0..cfg.d_gc {
                    if cache.g_pre[s_idx][t].get(n, c) <= 0.0 {
                        d_gpre.set(n, c, 0.0);
                    }
                }
            }
            // bias
            for n in 0..cfg.n_nodes {
                for c in 0..cfg.d_gc {
                    let v = grads.bg.get(0, c) + d_gpre.get(n, c);
                    grads.bg.set(0, c, v);
                }
            }
            let h_t = Matrix::from_fn(cfg.n_nodes, cfg.d_model, |n, c| {
                cache.y[s_idx][n].get(t, c)
            });
            let afh = cache.a_fwd.matmul(&h_t)?; // N x d_model
            let abh = cache.a_bwd.matmul(&h_t)?;
            // weight gradients: dW += dGᵀ (A H)
            grads.wg_fwd.add_assign(&d_gpre.matmul_tn(&afh)?);
            if cfg.shared_graph_weights {
                grads.wg_fwd.add_assign(&d_gpre.matmul_tn(&abh)?);
            } else {
                grads.wg_bwd.add_assign(&d_gpre.matmul_tn(&abh)?);
            }
            // adjacency gradients: dA += dG W Hᵀ
            d_a_fwd.add_assign(&d_gpre.matmul(&model.wg_fwd)?.matmul_nt(&h_t)?);
            d_a_bwd.add_assign(&d_gpre.matmul(wg_bwd)?.matmul_nt(&h_t)?);
            // hidden-state gradient: dH += Aᵀ dG W
            let d_h = cache
                .a_fwd
                .matmul_tn(&d_gpre)?
                .matmul(&model.wg_fwd)?
                .add(&cache.a_bwd.matmul_tn(&d_gpre)?.matmul(wg_bwd)?);
            for n in 0..cfg.n_nodes {
                for c in 0..cfg.d_model {
                    let v = d_y[n].get(t, c) + d_h.get(n, c);
                    d_y[n].set(t, c, v);
                }
            }
        }

        // multi-head attention backward per node
        for n in 0..cfg.n_nodes {
            let dy = &d_y[n];
            let head_traces = &cache.traces[s_idx][n];
            // concat of per-head hidden states
            let concat = Matrix::from_fn(cfg.w_in, cfg.n_heads * cfg.d_v, |t, c| {
                head_traces[c / cfg.d_v].h.get(t, c % cfg.d_v)
            });
            grads.wo.add_assign(&dy.matmul_tn(&concat)?);
            let d_concat = dy.matmul(&model.wo)?; // w_in x heads*d_v

            // the attention input (embedded + PE), identical across heads
            let x_attn = &head_traces[0].x;
            let mut d_x = Matrix::zeros(cfg.w_in, cfg.d_model);
            if cfg.residual {
                d_x.add_assign(dy);
            }

            for (h_idx, trace) in head_traces.iter().enumerate() {
                let off = h_idx * cfg.d_v;
                let d_h_head =
                    Matrix::from_fn(cfg.w_in, cfg.d_v, |t, c| d_concat.get(t, off + c));
                // H = alpha V
                let d_v_mat = trace.alpha.matmul_tn(&d_h_head)?;
                let mut d_alpha = d_h_head.matmul_nt(&trace.v)?;
                // dropout straight-through on the diagonal
                for i in 0..cfg.w_in {
                    let v = d_alpha.get(i, i) * trace.diag_scale.get(i);
                    d_alpha.set(i, i, v);
                }
                // softmax rows (masked entries have alpha 0 and drop out)
                let ap = &trace.alpha_pre_dropout;
                let mut d_e = Matrix::zeros(cfg.w_in, cfg.w_in);
                for i in 0..cfg.w_in {
                    let dot: f64 = (0..cfg.w_in)
                        .map(|m| d_alpha.get(i, m) * ap.get(i, m))
                        .sum();
                    for k in 0..cfg.w_in {
                        d_e.set(i, k, ap.get(i, k) * (d_alpha.get(i, k) - dot));
                    }
                }
                // scores E = Q Kᵀ / sqrt(d_k)
                let d_q = d_e.matmul(&trace.k)?.scale(inv_dk_sqrt);
                let d_k_mat = d_e.matmul_tn(&trace.q)?.scale(inv_dk_sqrt);
                // projections Q = X Wqᵀ etc.
                let (gwq, gwk, gwv) = &mut grads.heads[h_idx];
                gwq.add_assign(&d_q.matmul_tn(x_attn)?);
                gwk.add_assign(&d_k_mat.matmul_tn(x_attn)?);
                gwv.add_assign(&d_v_mat.matmul_tn(x_attn)?);
                d_x.add_assign(&d_q.matmul(&model.heads[h_idx].wq)?);
                d_x.add_assign(&d_k_mat.matmul(&model.heads[h_idx].wk)?);
                d_x.add_assign(&d_v_mat.matmul(&model.heads[h_idx].wv)?);
            }

            // positional encoding is additive, gradient passes through;
            // embed: Xe = X_in W_eᵀ + b_e
            grads
                .embed_w
                .add_assign(&d_x.matmul_tn(&sample.inputs[n])?);
            for t in 0..cfg.w_in {
                for c in 0..cfg.d_model {
                    let v = grads.embed_b.get(0, c) + d_x.get(t, c);
                    grads.embed_b.set(0, c, v);
                }
            }
        }
    }

    // adjacency factors: A = row_softmax(relu(S)), S_fwd = E1 E2ᵀ
    let backprop_adjacency = |d_a: &Matrix, a: &Matrix, s: &Matrix| -> Matrix {
        let n = a.rows();
        let mut d_s = Matrix::zeros(n, n);
        for i in 0..n {
            let dot: f64 = (0..n).map(|m| d_a.get(i, m) * a.get(i, m)).sum();
            for k in 0..n {
                let g = a.get(i, k) * (d_a.get(i, k) - dot);
                // relu: S <= 0 contributes nothing
                d_s.set(i, k, if s.get(i, k) > 0.0 { g } else { 0.0 });
            }
        }
        d_s
    };
    let d_s_fwd = backprop_adjacency(&d_a_fwd, &cache.a_fwd, &cache.s_fwd);
    let s_bwd = cache.s_fwd.transpose();
    let d_s_bwd = backprop_adjacency(&d_a_bwd, &cache.a_bwd, &s_bwd);
    grads.e1.add_assign(&d_s_fwd.matmul(&model.e2)?);
    grads.e2.add_assign(&d_s_fwd.transpose().matmul(&model.e1)?);
    grads.e2.add_assign(&d_s_bwd.matmul(&model.e1)?);
    grads.e1.add_assign(&d_s_bwd.transpose().matmul(&model.e2)?);

    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub n_coords: usize,
    pub max_rel_err: f64,
    pub worst_param: Option<(usize, usize)>, // (parameter index, flat coordinate)
    pub passed: bool,
}

/// Builds a small random model + batch and compares analytic gradients with
/// central finite differences of the loss at `n_coords` random parameter
/// coordinates (dropout off).
pub fn gradcheck_model(
    seed: u64,
    n_coords: usize,
    step: f64,
    tolerance: f64,
    abs_floor: f64,
) -> Result<GradcheckReport> {
    let cfg = ModelConfig {
        n_nodes: 3,
        d_x: 1,
        d_model: 8,
        n_heads: 2,
        d_k: 4,
        d_v: 4,
        d_emb: 2,
        d_gc: 4,
        w_in: 4,
        h_out: 3,
        reg: Regularizer::none(),
        residual: true,
        pe: PeScheme::AbsoluteSinusoidal,
        shared_graph_weights: false,
    };
    let model = TnSModel::init(cfg.clone(), derive(seed, "gradcheck-model"))?;
    let batch = synthetic_batch(&cfg, 2, derive(seed, "gradcheck-batch"));
    let scaler = Scaler {
        mean: vec![0.0; cfg.d_x],
        std: vec![1.0; cfg.d_x],
    };
    gradcheck_against_fd(&model, &batch, &scaler, seed, n_coords, step, tolerance, abs_floor)
}

/// Random windows with targets on the scale of the inputs.
pub fn synthetic_batch(cfg: &ModelConfig, n_samples: usize, seed: u64) -> Vec<WindowSample> {
    let mut rng = SplitMix64::new(seed);
    (0..n_samples)
        .map(|_| WindowSample {
            start: 0,
            inputs: (0..cfg.n_nodes)
                .map(|_| Matrix::from_fn(cfg.w_in, cfg.d_x, |_, _| rng.uniform(-1.0, 1.0)))
                .collect(),
            target: Matrix::from_fn(cfg.n_nodes, cfg.h_out, |_, _| rng.uniform(-1.0, 1.0)),
            mask: Matrix::from_fn(cfg.n_nodes, cfg.h_out, |_, _| 1.0),
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn gradcheck_against_fd(
    model: &TnSModel,
    batch: &[WindowSample],
    scaler: &Scaler,
    seed: u64,
    n_coords: usize,
    step: f64,
    tolerance: f64,
    abs_floor: f64,
) -> Result<GradcheckReport> {
    let (_, grads) = model_backward(batch, model, scaler, false)?;
    let bufs = grads.bufs();
    let sizes: Vec<usize> = bufs.iter().map(|m| m.rows() * m.cols()).collect();
    let total: usize = sizes.iter().sum();

    let mut rng = SplitMix64::new(mix(seed, 0xC0));
    let mut max_err = 0.0f64;
    let mut worst = None;
    let mut scratch = model.clone();
    for _ in 0..n_coords {
        let flat = rng.below(total);
        // locate (parameter, offset)
        let mut p_idx = 0;
        let mut offset = flat;
        while offset >= sizes[p_idx] {
            offset -= sizes[p_idx];
            p_idx += 1;
        }
        let analytic = bufs[p_idx].data()[offset];

        let base = model.param_refs()[p_idx].data()[offset];
        {
            let mut refs = scratch.param_refs_mut();
            refs[p_idx].data_mut()[offset] = base + step;
        }
        let plus = model_loss(batch, &scratch, scaler, false)?;
        {
            let mut refs = scratch.param_refs_mut();
            refs[p_idx].data_mut()[offset] = base - step;
        }
        let minus = model_loss(batch, &scratch, scaler, false)?;
        {
            let mut refs = scratch.param_refs_mut();
            refs[p_idx].data_mut()[offset] = base;
        }
        let fd = (plus - minus) / (2.0 * step);
        let err = crate::jacobian::effective_rel_err(analytic, fd, abs_floor);
        if err > max_err {
            max_err = err;
            worst = Some((p_idx, offset));
        }
    }
    Ok(GradcheckReport {
        n_coords,
        max_rel_err: max_err,
        worst_param: worst,
        passed: max_err < tolerance,
    })
}
