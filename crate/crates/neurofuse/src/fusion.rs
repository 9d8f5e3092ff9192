//! Model heads: transformer fusion of graph-window tokens with a tabular
//! embedding (early, causal, and late variants), order-invariant pooling,
//! and the GC-LSTM baselines. Every variant ends in the same three-layer
//! projection head with a 2-class log-softmax.
//!
//! Token order follows the data-generating process: the early variant reads
//! a leading cls token over [cls, tabular, g_1..g_S]; the causal variant
//! places the tabular token second-to-last and the cls token last over a
//! strictly causal attention mask, reading the final position.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph_encoder::{adjacency_pattern, encode_graph_var, Backbone, EncoderParams, EncoderVars, Readout};
use crate::numerics::params::{ParamId, ParamSet};
use crate::numerics::tape::{BnState, Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::rng::Rng;

/// Per-subject tabular covariates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularCovariates {
    pub sex: u8,
    pub age: f64,
}

impl TabularCovariates {
    pub fn new(sex: u8, age: f64) -> Result<Self> {
        if sex > 1 {
            return Err(Error::contract("TabularCovariates", format!("sex must be 0 or 1, got {}", sex)));
        }
        if !(age > 0.0 && age < 120.0) {
            return Err(Error::contract("TabularCovariates", format!("age {} outside (0, 120)", age)));
        }
        Ok(TabularCovariates { sex, age })
    }
}

/// Everything the models consume for one subject. Graphs are stored both
/// degree-normalized (GCN propagation) and raw (attention patterns and
/// explanation masks).
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: String,
    pub covariates: TabularCovariates,
    pub label: u8,
    pub dynamic_norm: Vec<Arc<Tensor>>,
    pub dynamic_raw: Vec<Arc<Tensor>>,
    pub static_norm: Arc<Tensor>,
    pub static_raw: Arc<Tensor>,
}

impl SubjectData {
    /// Copy with the dynamic window order permuted (same permutation for the
    /// normalized and raw forms).
    pub fn with_permuted_windows(&self, rng: &mut Rng) -> SubjectData {
        let mut order: Vec<usize> = (0..self.dynamic_norm.len()).collect();
        rng.shuffle(&mut order);
        SubjectData {
            id: self.id.clone(),
            covariates: self.covariates,
            label: self.label,
            dynamic_norm: order.iter().map(|&i| self.dynamic_norm[i].clone()).collect(),
            dynamic_raw: order.iter().map(|&i| self.dynamic_raw[i].clone()).collect(),
            static_norm: self.static_norm.clone(),
            static_raw: self.static_raw.clone(),
        }
    }
}

/// How window tokens are aggregated over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalMode {
    /// Transformer over [cls, tabular, g_1..g_S], read position 0.
    TfEarly,
    /// Transformer over [g_1..g_S, tabular, cls] with a causal mask, read
    /// the last position.
    TfCausal,
    /// Transformer over [cls, g_1..g_S]; tabular embedding concatenated to
    /// the transformer output before the head.
    TfLate,
    /// Order-invariant mean over window embeddings.
    Pool,
    /// LSTM recurrence over window embeddings in temporal order.
    Lstm,
}

/// Architecture description, shared by training, the CLI, and tests.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Window count when dynamic graphs are used.
    pub windows: usize,
    pub backbone: Backbone,
    pub readout: Readout,
    pub temporal: TemporalMode,
    pub use_tabular: bool,
    pub use_connectivity: bool,
    pub dynamic: bool,
}

impl ModelConfig {
    /// Resolve flag interactions; returns human-readable notes for every
    /// normalization applied.
    pub fn normalize(&mut self) -> Result<Vec<String>> {
        let mut notes = Vec::new();
        if self.hidden % (2 * self.heads) != 0 || self.hidden < 4 {
            return Err(Error::Config {
                key: "hidden".to_string(),
                detail: format!("hidden {} must be a positive multiple of 2*heads", self.hidden),
            });
        }
        if !self.use_connectivity && !self.use_tabular {
            return Err(Error::Config {
                key: "use_tabular".to_string(),
                detail: "both connectivity and tabular inputs disabled; nothing to predict from".to_string(),
            });
        }
        if self.temporal == TemporalMode::TfLate && !self.use_tabular {
            notes.push("late fusion without tabular input collapses to pooling".to_string());
            self.temporal = TemporalMode::Pool;
        }
        if !self.use_connectivity {
            if self.temporal != TemporalMode::Pool {
                notes.push("connectivity disabled; temporal aggregation is irrelevant".to_string());
            }
            self.temporal = TemporalMode::Pool;
        }
        if self.temporal == TemporalMode::Lstm && !self.use_connectivity {
            return Err(Error::Config {
                key: "model".to_string(),
                detail: "LSTM aggregation requires connectivity input".to_string(),
            });
        }
        Ok(notes)
    }

    /// Number of graph tokens after the dynamic flag is applied.
    pub fn effective_windows(&self) -> usize {
        if self.dynamic {
            self.windows
        } else {
            1
        }
    }

    /// Transformer sequence length, if a transformer is used.
    pub fn sequence_length(&self) -> Option<usize> {
        let s = self.effective_windows();
        match self.temporal {
            TemporalMode::TfEarly | TemporalMode::TfCausal => Some(1 + usize::from(self.use_tabular) + s),
            TemporalMode::TfLate => Some(1 + s),
            _ => None,
        }
    }

    /// Width of the vector entering the prediction head.
    fn head_input_width(&self) -> usize {
        match self.temporal {
            TemporalMode::TfEarly | TemporalMode::TfCausal => self.hidden,
            TemporalMode::TfLate => 2 * self.hidden,
            TemporalMode::Pool | TemporalMode::Lstm => {
                if self.use_connectivity && self.use_tabular {
                    2 * self.hidden
                } else {
                    self.hidden
                }
            }
        }
    }
}

// ── Parameter groups ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TabularParams {
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub lin_w: ParamId,
    pub lin_b: ParamId,
}

impl TabularParams {
    fn init(params: &mut ParamSet, hidden: usize, rng: &mut Rng) -> Self {
        let bn_gamma = params.push("tabular", "bn_gamma", Tensor::filled(1, 2, 1.0));
        let bn_beta = params.push("tabular", "bn_beta", Tensor::zeros(1, 2));
        let bn_mean = params.push_state("tabular", "bn_running_mean", Tensor::zeros(1, 2));
        let bn_var = params.push_state("tabular", "bn_running_var", Tensor::filled(1, 2, 1.0));
        let bound = (1.0f64 / 2.0).sqrt();
        let lin_w = params.push("tabular", "lin_w", Tensor::uniform_init(2, hidden, bound, rng));
        let lin_b = params.push("tabular", "lin_b", Tensor::zeros(1, hidden));
        TabularParams { bn_gamma, bn_beta, bn_mean, bn_var, lin_w, lin_b }
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayerParams>,
}

impl TransformerParams {
    fn init(params: &mut ParamSet, hidden: usize, seq_len: usize, n_layers: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        let cls = params.push("fusion", "cls", Tensor::uniform_init(1, hidden, bound, rng));
        let pos = params.push("fusion", "pos", Tensor::uniform_init(seq_len, hidden, bound, rng));
        let ff = 4 * hidden;
        let layers = (0..n_layers)
            .map(|l| {
                let w = |params: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut Rng| {
                    let b = (1.0 / rows as f64).sqrt();
                    params.push("fusion", &format!("l{}_{}", l, name), Tensor::uniform_init(rows, cols, b, rng))
                };
                let zeros = |params: &mut ParamSet, name: &str, cols: usize| {
                    params.push("fusion", &format!("l{}_{}", l, name), Tensor::zeros(1, cols))
                };
                let ones = |params: &mut ParamSet, name: &str, cols: usize| {
                    params.push("fusion", &format!("l{}_{}", l, name), Tensor::filled(1, cols, 1.0))
                };
                TransformerLayerParams {
                    wq: w(params, "wq", hidden, hidden, rng),
                    bq: zeros(params, "bq", hidden),
                    wk: w(params, "wk", hidden, hidden, rng),
                    bk: zeros(params, "bk", hidden),
                    wv: w(params, "wv", hidden, hidden, rng),
                    bv: zeros(params, "bv", hidden),
                    wo: w(params, "wo", hidden, hidden, rng),
                    bo: zeros(params, "bo", hidden),
                    ln1_g: ones(params, "ln1_g", hidden),
                    ln1_b: zeros(params, "ln1_b", hidden),
                    ff_w1: w(params, "ff_w1", hidden, ff, rng),
                    ff_b1: zeros(params, "ff_b1", ff),
                    ff_w2: w(params, "ff_w2", ff, hidden, rng),
                    ff_b2: zeros(params, "ff_b2", hidden),
                    ln2_g: ones(params, "ln2_g", hidden),
                    ln2_b: zeros(params, "ln2_b", hidden),
                }
            })
            .collect();
        TransformerParams { cls, pos, layers }
    }
}

#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w: [ParamId; 4],
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
}

impl LstmParams {
    fn init(params: &mut ParamSet, hidden: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        let gates = ["i", "f", "o", "g"];
        let w = std::array::from_fn(|k| {
            params.push("lstm", &format!("w_{}", gates[k]), Tensor::uniform_init(hidden, hidden, bound, rng))
        });
        let u = std::array::from_fn(|k| {
            params.push("lstm", &format!("u_{}", gates[k]), Tensor::uniform_init(hidden, hidden, bound, rng))
        });
        let b = std::array::from_fn(|k| params.push("lstm", &format!("b_{}", gates[k]), Tensor::zeros(1, hidden)));
        LstmParams { w, u, b }
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

impl HeadParams {
    fn init(params: &mut ParamSet, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let h2 = hidden / 2;
        let h4 = hidden / 4;
        let w = |params: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut Rng| {
            let b = (1.0 / rows as f64).sqrt();
            params.push("head", name, Tensor::uniform_init(rows, cols, b, rng))
        };
        HeadParams {
            w1: w(params, "w1", input, h2, rng),
            b1: params.push("head", "b1", Tensor::zeros(1, h2)),
            w2: w(params, "w2", h2, h4, rng),
            b2: params.push("head", "b2", Tensor::zeros(1, h4)),
            w3: w(params, "w3", h4, 2, rng),
            b3: params.push("head", "b3", Tensor::zeros(1, 2)),
        }
    }
}

/// A complete model: architecture handles plus the parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: Option<EncoderParams>,
    pub tabular: Option<TabularParams>,
    pub transformer: Option<TransformerParams>,
    pub lstm: Option<LstmParams>,
    pub head: HeadParams,
}

impl Model {
    /// Deterministic initialization from a seed; parameter registration
    /// order fixes the flat checkpoint layout.
    pub fn init(mut config: ModelConfig, feature_width: usize, seed: u64) -> Result<Model> {
        config.normalize()?;
        let mut rng = Rng::derived(seed, "model-init", &[]);
        let mut params = ParamSet::new();
        let encoder = if config.use_connectivity {
            Some(EncoderParams::init(
                &mut params,
                feature_width,
                config.hidden,
                config.backbone,
                config.readout,
                &mut rng,
            ))
        } else {
            None
        };
        let tabular = if config.use_tabular { Some(TabularParams::init(&mut params, config.hidden, &mut rng)) } else { None };
        let transformer = match config.sequence_length() {
            Some(l) => Some(TransformerParams::init(&mut params, config.hidden, l, config.layers, &mut rng)),
            None => None,
        };
        let lstm = if config.temporal == TemporalMode::Lstm {
            Some(LstmParams::init(&mut params, config.hidden, &mut rng))
        } else {
            None
        };
        let head = HeadParams::init(&mut params, config.head_input_width(), config.hidden, &mut rng);
        Ok(Model { config, params, encoder, tabular, transformer, lstm, head })
    }

    /// Trainable parameter counts per group.
    pub fn census(&self) -> Vec<(String, usize)> {
        self.params.census()
    }
}

/// Train vs inference forward behaviour (batch-norm statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

// ── Forward pieces ───────────────────────────────────────────────────

fn bind(params: &ParamSet, tape: &mut Tape, id: ParamId, frozen: bool) -> Result<Var> {
    if frozen {
        params.bind_frozen(tape, id)
    } else {
        params.bind(tape, id)
    }
}

/// Batch-normalized, linearly projected, SELU-activated covariate embedding.
pub fn tabular_embed(
    tape: &mut Tape,
    cov: Var,
    params: &mut ParamSet,
    tab: &TabularParams,
    mode: Mode,
    frozen: bool,
) -> Result<Var> {
    let gamma = bind(params, tape, tab.bn_gamma, frozen)?;
    let beta = bind(params, tape, tab.bn_beta, frozen)?;
    let mut state = BnState::new(2);
    state.mean = params.tensor(tab.bn_mean).data().to_vec();
    state.var = params.tensor(tab.bn_var).data().to_vec();
    let train = mode == Mode::Train;
    let normed = tape.batch_norm_1d(cov, gamma, beta, &mut state, train)?;
    if train {
        params.tensor_mut(tab.bn_mean).data_mut().copy_from_slice(&state.mean);
        params.tensor_mut(tab.bn_var).data_mut().copy_from_slice(&state.var);
    }
    let w = bind(params, tape, tab.lin_w, frozen)?;
    let b = bind(params, tape, tab.lin_b, frozen)?;
    let lin = tape.matmul(normed, w)?;
    let lin = tape.add(lin, b)?;
    tape.selu(lin)
}

/// Three projection layers with SELU between, ending in row log-softmax.
pub fn predict_head(tape: &mut Tape, z: Var, params: &ParamSet, head: &HeadParams, frozen: bool) -> Result<Var> {
    let w1 = bind(params, tape, head.w1, frozen)?;
    let b1 = bind(params, tape, head.b1, frozen)?;
    let w2 = bind(params, tape, head.w2, frozen)?;
    let b2 = bind(params, tape, head.b2, frozen)?;
    let w3 = bind(params, tape, head.w3, frozen)?;
    let b3 = bind(params, tape, head.b3, frozen)?;
    let mut x = tape.matmul(z, w1)?;
    x = tape.add(x, b1)?;
    x = tape.selu(x)?;
    x = tape.matmul(x, w2)?;
    x = tape.add(x, b2)?;
    x = tape.selu(x)?;
    x = tape.matmul(x, w3)?;
    x = tape.add(x, b3)?;
    tape.row_log_softmax(x)
}

struct TransformerLayerVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_g: Var,
    ln1_b: Var,
    ff_w1: Var,
    ff_b1: Var,
    ff_w2: Var,
    ff_b2: Var,
    ln2_g: Var,
    ln2_b: Var,
}

fn bind_layer(params: &ParamSet, tape: &mut Tape, l: &TransformerLayerParams, frozen: bool) -> Result<TransformerLayerVars> {
    Ok(TransformerLayerVars {
        wq: bind(params, tape, l.wq, frozen)?,
        bq: bind(params, tape, l.bq, frozen)?,
        wk: bind(params, tape, l.wk, frozen)?,
        bk: bind(params, tape, l.bk, frozen)?,
        wv: bind(params, tape, l.wv, frozen)?,
        bv: bind(params, tape, l.bv, frozen)?,
        wo: bind(params, tape, l.wo, frozen)?,
        bo: bind(params, tape, l.bo, frozen)?,
        ln1_g: bind(params, tape, l.ln1_g, frozen)?,
        ln1_b: bind(params, tape, l.ln1_b, frozen)?,
        ff_w1: bind(params, tape, l.ff_w1, frozen)?,
        ff_b1: bind(params, tape, l.ff_b1, frozen)?,
        ff_w2: bind(params, tape, l.ff_w2, frozen)?,
        ff_b2: bind(params, tape, l.ff_b2, frozen)?,
        ln2_g: bind(params, tape, l.ln2_g, frozen)?,
        ln2_b: bind(params, tape, l.ln2_b, frozen)?,
    })
}

fn causal_mask(l: usize) -> Arc<Vec<bool>> {
    let mut m = vec![false; l * l];
    for i in 0..l {
        for j in 0..=i {
            m[i * l + j] = true;
        }
    }
    Arc::new(m)
}

const LN_EPS: f64 = 1e-5;

/// Post-layer-norm transformer encoder stack over a batch of same-length
/// sequences, stacked subject-major into one (B*L)xH matrix. Positional
/// embeddings are added before the first layer.
#[allow(clippy::too_many_arguments)]
fn transformer_stack(
    tape: &mut Tape,
    x0: Var,
    batch: usize,
    seq_len: usize,
    heads: usize,
    pos: Var,
    layers: &[TransformerLayerVars],
    causal: bool,
) -> Result<Var> {
    let hidden = tape.shape(x0).1;
    let head_dim = hidden / heads;
    let pos_tiled = tape.tile_rows(pos, batch)?;
    let mut x = tape.add(x0, pos_tiled)?;
    let mask = if causal { Some(causal_mask(seq_len)) } else { None };
    let scale = 1.0 / (head_dim as f64).sqrt();
    for layer in layers {
        let q_all = tape.matmul(x, layer.wq)?;
        let q_all = tape.add(q_all, layer.bq)?;
        let k_all = tape.matmul(x, layer.wk)?;
        let k_all = tape.add(k_all, layer.bk)?;
        let v_all = tape.matmul(x, layer.wv)?;
        let v_all = tape.add(v_all, layer.bv)?;

        let mut subject_ctx = Vec::with_capacity(batch);
        for s in 0..batch {
            let q_s = tape.slice_rows(q_all, s * seq_len, seq_len)?;
            let k_s = tape.slice_rows(k_all, s * seq_len, seq_len)?;
            let v_s = tape.slice_rows(v_all, s * seq_len, seq_len)?;
            let mut head_ctx = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = tape.slice_cols(q_s, h * head_dim, head_dim)?;
                let k = tape.slice_cols(k_s, h * head_dim, head_dim)?;
                let v = tape.slice_cols(v_s, h * head_dim, head_dim)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, scale)?;
                let alpha = match &mask {
                    Some(m) => tape.masked_row_softmax(scores, m.clone())?,
                    None => tape.row_softmax(scores)?,
                };
                head_ctx.push(tape.matmul(alpha, v)?);
            }
            subject_ctx.push(tape.concat_cols(&head_ctx)?);
        }
        let ctx = tape.concat_rows(&subject_ctx)?;
        let attn = tape.matmul(ctx, layer.wo)?;
        let attn = tape.add(attn, layer.bo)?;
        let res = tape.add(x, attn)?;
        x = tape.layer_norm(res, layer.ln1_g, layer.ln1_b, LN_EPS)?;

        let ff = tape.matmul(x, layer.ff_w1)?;
        let ff = tape.add(ff, layer.ff_b1)?;
        let ff = tape.selu(ff)?;
        let ff = tape.matmul(ff, layer.ff_w2)?;
        let ff = tape.add(ff, layer.ff_b2)?;
        let res = tape.add(x, ff)?;
        x = tape.layer_norm(res, layer.ln2_g, layer.ln2_b, LN_EPS)?;
    }
    Ok(x)
}

/// Fuse one ordered token sequence (LxH) and return the designated read
/// position: position 0 with bidirectional attention for the early variant,
/// the last position under a causal mask for the causal variant.
pub fn transformer_fuse(
    tape: &mut Tape,
    tokens: Var,
    params: &ParamSet,
    tf: &TransformerParams,
    heads: usize,
    causal: bool,
    frozen: bool,
) -> Result<Var> {
    let (l, _) = tape.shape(tokens);
    let pos = bind(params, tape, tf.pos, frozen)?;
    if tape.shape(pos).0 != l {
        return Err(Error::dim(
            "transformer_fuse",
            format!("sequence length {} vs positional table {}", l, tape.shape(pos).0),
        ));
    }
    let layers: Vec<TransformerLayerVars> =
        tf.layers.iter().map(|lp| bind_layer(params, tape, lp, frozen)).collect::<Result<_>>()?;
    let out = transformer_stack(tape, tokens, 1, l, heads, pos, &layers, causal)?;
    if causal {
        tape.slice_rows(out, l - 1, 1)
    } else {
        tape.slice_rows(out, 0, 1)
    }
}

// ── Whole-model forward ──────────────────────────────────────────────

/// Encode every (subject, window) graph into a (B*S_eff)xH token matrix,
/// subject-major.
fn encode_all_windows(
    tape: &mut Tape,
    model: &Model,
    enc_vars: &EncoderVars,
    h0: Var,
    subjects: &[&SubjectData],
) -> Result<Var> {
    let cfg = &model.config;
    let enc = model.encoder.as_ref().expect("encoder present");
    let s_eff = cfg.effective_windows();
    match cfg.backbone {
        Backbone::Gcn => {
            let mut mats: Vec<Arc<Tensor>> = Vec::with_capacity(subjects.len() * s_eff);
            for subj in subjects {
                if cfg.dynamic {
                    if subj.dynamic_norm.len() != s_eff {
                        return Err(Error::dim(
                            "forward",
                            format!("subject {} has {} windows, model expects {}", subj.id, subj.dynamic_norm.len(), s_eff),
                        ));
                    }
                    mats.extend(subj.dynamic_norm.iter().cloned());
                } else {
                    mats.push(subj.static_norm.clone());
                }
            }
            let n = tape.shape(h0).0;
            let mats = Arc::new(mats);
            // Layer 1: H0 W1 is shared by every window.
            let z0 = tape.matmul(h0, enc_vars.w1)?;
            let z0_tiled = tape.tile_rows(z0, subjects.len() * s_eff)?;
            let x1 = tape.block_lmul(z0_tiled, mats.clone())?;
            let x1 = tape.selu(x1)?;
            // Layer 2.
            let u = tape.matmul(x1, enc_vars.w2)?;
            let x2 = tape.block_lmul(u, mats)?;
            let x2 = tape.selu(x2)?;
            // Projection.
            let p = tape.matmul(x2, enc_vars.proj_w)?;
            let p = tape.add(p, enc_vars.proj_b)?;
            let p = tape.selu(p)?;
            match cfg.readout {
                Readout::Mean => tape.block_mean_rows(p, n),
                Readout::Max => tape.block_max_rows(p, n),
            }
        }
        Backbone::Gat => {
            // Attention scores need the per-graph pattern; loop per graph.
            let mut tokens = Vec::with_capacity(subjects.len() * s_eff);
            for subj in subjects {
                let graphs: Vec<&Arc<Tensor>> = if cfg.dynamic {
                    subj.dynamic_raw.iter().collect()
                } else {
                    vec![&subj.static_raw]
                };
                for g in graphs {
                    let pattern = adjacency_pattern(g);
                    let adj = tape.leaf((**g).clone())?;
                    tokens.push(encode_graph_var(tape, adj, &pattern, h0, enc_vars, Backbone::Gat, enc.readout)?);
                }
            }
            tape.concat_rows(&tokens)
        }
    }
}

/// Full forward pass over a batch of subjects; returns the tape and the
/// Bx2 log-probability node.
pub fn forward_batch(
    model: &mut Model,
    atlas_features: &Tensor,
    subjects: &[&SubjectData],
    mode: Mode,
) -> Result<(Tape, Var)> {
    let (tape, logprobs, _) = forward_batch_inner(model, atlas_features, subjects, mode, false)?;
    Ok((tape, logprobs))
}

/// Forward pass with every parameter bound as a constant; used by the
/// explainer and evaluation paths that must not touch parameters.
pub fn forward_batch_frozen(
    model: &Model,
    atlas_features: &Tensor,
    subjects: &[&SubjectData],
) -> Result<(Tape, Var)> {
    // Inference never writes back batch-norm state, so the clone is cheap
    // insurance-free: we only read from it.
    let mut scratch = model.clone();
    let (tape, logprobs, _) = forward_batch_inner(&mut scratch, atlas_features, subjects, Mode::Infer, true)?;
    Ok((tape, logprobs))
}

fn forward_batch_inner(
    model: &mut Model,
    atlas_features: &Tensor,
    subjects: &[&SubjectData],
    mode: Mode,
    frozen: bool,
) -> Result<(Tape, Var, usize)> {
    if subjects.is_empty() {
        return Err(Error::contract("forward", "empty batch"));
    }
    let cfg = model.config.clone();
    if mode == Mode::Train && cfg.use_tabular && subjects.len() < 2 {
        return Err(Error::contract("forward", "training with tabular batch-norm needs batch size >= 2"));
    }
    let mut tape = Tape::new();
    let b = subjects.len();
    let s_eff = cfg.effective_windows();

    // Graph tokens.
    let tokens = if cfg.use_connectivity {
        let h0 = tape.leaf(atlas_features.clone())?;
        let enc = model.encoder.as_ref().expect("encoder present").clone();
        let enc_vars = enc.bind(&model.params, &mut tape, frozen)?;
        Some(encode_all_windows(&mut tape, model, &enc_vars, h0, subjects)?)
    } else {
        None
    };

    // Tabular embedding.
    let tab_emb = if cfg.use_tabular {
        let mut cov = Tensor::zeros(b, 2);
        for (i, s) in subjects.iter().enumerate() {
            cov.set(i, 0, f64::from(s.covariates.sex));
            cov.set(i, 1, s.covariates.age);
        }
        let cov = tape.leaf(cov)?;
        let tab = model.tabular.clone().expect("tabular params present");
        Some(tabular_embed(&mut tape, cov, &mut model.params, &tab, mode, frozen)?)
    } else {
        None
    };

    // Temporal aggregation into the head input.
    let z = match cfg.temporal {
        TemporalMode::TfEarly | TemporalMode::TfCausal | TemporalMode::TfLate => {
            let tokens = tokens.expect("transformer requires graph tokens");
            let tf = model.transformer.clone().expect("transformer params present");
            let cls = bind(&model.params, &mut tape, tf.cls, frozen)?;
            let pos = bind(&model.params, &mut tape, tf.pos, frozen)?;
            let layers: Vec<TransformerLayerVars> =
                tf.layers.iter().map(|lp| bind_layer(&model.params, &mut tape, lp, frozen)).collect::<Result<_>>()?;
            let l = cfg.sequence_length().expect("sequence length defined");
            if tape.shape(pos).0 != l {
                return Err(Error::dim(
                    "forward",
                    format!("positional table {} vs sequence length {}", tape.shape(pos).0, l),
                ));
            }
            // One gather over [cls; tabular; tokens] assembles every
            // subject's sequence.
            let mut parts = vec![cls];
            let tab_offset = 1;
            let mut tok_offset = 1;
            if let Some(t) = tab_emb {
                parts.push(t);
                tok_offset += b;
            }
            parts.push(tokens);
            let base = tape.concat_rows(&parts)?;
            let mut indices = Vec::with_capacity(b * l);
            for i in 0..b {
                match cfg.temporal {
                    TemporalMode::TfEarly => {
                        indices.push(0);
                        if cfg.use_tabular {
                            indices.push(tab_offset + i);
                        }
                        indices.extend((0..s_eff).map(|w| tok_offset + i * s_eff + w));
                    }
                    TemporalMode::TfCausal => {
                        indices.extend((0..s_eff).map(|w| tok_offset + i * s_eff + w));
                        if cfg.use_tabular {
                            indices.push(tab_offset + i);
                        }
                        indices.push(0);
                    }
                    TemporalMode::TfLate => {
                        indices.push(0);
                        indices.extend((0..s_eff).map(|w| tok_offset + i * s_eff + w));
                    }
                    _ => unreachable!(),
                }
            }
            let x0 = tape.gather_rows(base, Arc::new(indices))?;
            let causal = cfg.temporal == TemporalMode::TfCausal;
            let out = transformer_stack(&mut tape, x0, b, l, cfg.heads, pos, &layers, causal)?;
            let read: Vec<usize> = (0..b)
                .map(|i| if causal { i * l + (l - 1) } else { i * l })
                .collect();
            let read_out = tape.gather_rows(out, Arc::new(read))?;
            if cfg.temporal == TemporalMode::TfLate {
                let t = tab_emb.expect("late fusion requires tabular");
                tape.concat_cols(&[read_out, t])?
            } else {
                read_out
            }
        }
        TemporalMode::Pool => match (tokens, tab_emb) {
            (Some(tok), tab) => {
                let pooled = tape.block_mean_rows(tok, s_eff)?;
                match tab {
                    Some(t) => tape.concat_cols(&[pooled, t])?,
                    None => pooled,
                }
            }
            (None, Some(t)) => t,
            (None, None) => unreachable!("normalize() rejects this"),
        },
        TemporalMode::Lstm => {
            let tok = tokens.expect("LSTM requires graph tokens");
            let lstm = model.lstm.clone().expect("lstm params present");
            let wv: Vec<Var> = lstm.w.iter().map(|&id| bind(&model.params, &mut tape, id, frozen)).collect::<Result<_>>()?;
            let uv: Vec<Var> = lstm.u.iter().map(|&id| bind(&model.params, &mut tape, id, frozen)).collect::<Result<_>>()?;
            let bv: Vec<Var> = lstm.b.iter().map(|&id| bind(&model.params, &mut tape, id, frozen)).collect::<Result<_>>()?;
            let mut h = tape.leaf(Tensor::zeros(b, cfg.hidden))?;
            let mut c = tape.leaf(Tensor::zeros(b, cfg.hidden))?;
            for t in 0..s_eff {
                let idx: Vec<usize> = (0..b).map(|i| i * s_eff + t).collect();
                let x_t = tape.gather_rows(tok, Arc::new(idx))?;
                let gate = |tape: &mut Tape, k: usize, x: Var, h: Var| -> Result<Var> {
                    let a = tape.matmul(x, wv[k])?;
                    let bterm = tape.matmul(h, uv[k])?;
                    let s = tape.add(a, bterm)?;
                    tape.add(s, bv[k])
                };
                let i_t = gate(&mut tape, 0, x_t, h)?;
                let i_t = tape.sigmoid(i_t)?;
                let f_t = gate(&mut tape, 1, x_t, h)?;
                let f_t = tape.sigmoid(f_t)?;
                let o_t = gate(&mut tape, 2, x_t, h)?;
                let o_t = tape.sigmoid(o_t)?;
                let g_t = gate(&mut tape, 3, x_t, h)?;
                let g_t = tape.tanh(g_t)?;
                let fc = tape.hadamard(f_t, c)?;
                let ig = tape.hadamard(i_t, g_t)?;
                c = tape.add(fc, ig)?;
                let tc = tape.tanh(c)?;
                h = tape.hadamard(o_t, tc)?;
            }
            match tab_emb {
                Some(t) => tape.concat_cols(&[h, t])?,
                None => h,
            }
        }
    };

    let logprobs = predict_head(&mut tape, z, &model.params, &model.head, frozen)?;
    Ok((tape, logprobs, b))
}

/// Positive-class probabilities for a batch, inference mode, parameters
/// untouched.
pub fn predict_probs(model: &Model, atlas_features: &Tensor, subjects: &[&SubjectData]) -> Result<Vec<f64>> {
    let (tape, logprobs) = forward_batch_frozen(model, atlas_features, subjects)?;
    let lp = tape.value(logprobs);
    Ok((0..lp.rows()).map(|i| lp.get(i, 1).exp()).collect())
}

/// Single-subject log-probabilities for any transformer/pooling variant.
pub fn gnn_tf_forward(model: &Model, atlas_features: &Tensor, subject: &SubjectData) -> Result<[f64; 2]> {
    let (tape, logprobs) = forward_batch_frozen(model, atlas_features, &[subject])?;
    let lp = tape.value(logprobs);
    Ok([lp.get(0, 0), lp.get(0, 1)])
}

/// Single-subject log-probabilities for the GC-LSTM variants.
pub fn gclstm_forward(model: &Model, atlas_features: &Tensor, subject: &SubjectData) -> Result<[f64; 2]> {
    if model.config.temporal != TemporalMode::Lstm {
        return Err(Error::contract("gclstm_forward", "model is not an LSTM variant"));
    }
    gnn_tf_forward(model, atlas_features, subject)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::{build_dynamic_graphs, build_static_graph, WindowPlan};
    use crate::graph_encoder::{node_feature_matrix, AtlasMetadata, AtlasRegion};

    pub(crate) fn tiny_atlas(r: usize) -> AtlasMetadata {
        let mut rng = Rng::from_seed(1);
        AtlasMetadata::new(
            (0..r)
                .map(|i| AtlasRegion {
                    id: format!("R{}", i),
                    x: rng.uniform(-90.0, 90.0),
                    y: rng.uniform(-126.0, 126.0),
                    z: rng.uniform(-72.0, 72.0),
                    system: if i % 2 == 0 { "even".into() } else { "odd".into() },
                })
                .collect(),
        )
        .unwrap()
    }

    pub(crate) fn tiny_subject(id: &str, seed: u64, r: usize, windows: usize, label: u8) -> SubjectData {
        let mut rng = Rng::from_seed(seed);
        let t = 40 + (windows - 1) * 10;
        let mut series = Tensor::zeros(t, r);
        for v in series.data_mut() {
            *v = rng.normal();
        }
        let plan = WindowPlan::fixed(t, 40, 10, windows).unwrap();
        let seq = build_dynamic_graphs(&series, &plan, 0.3).unwrap();
        let stat = build_static_graph(&series, 0.3).unwrap();
        let norm = |a: &Tensor| Arc::new(crate::graph_encoder::normalize_adjacency(a).unwrap());
        SubjectData {
            id: id.to_string(),
            covariates: TabularCovariates::new(u8::from(seed % 2 == 0), 12.0 + (seed % 10) as f64).unwrap(),
            label,
            dynamic_norm: seq.adjacencies.iter().map(|a| norm(a)).collect(),
            dynamic_raw: seq.adjacencies.iter().cloned().map(Arc::new).collect(),
            static_norm: norm(&stat.adjacencies[0]),
            static_raw: Arc::new(stat.adjacencies[0].clone()),
        }
    }

    pub(crate) fn tiny_config(temporal: TemporalMode, windows: usize) -> ModelConfig {
        ModelConfig {
            hidden: 16,
            heads: 4,
            layers: 3,
            windows,
            backbone: Backbone::Gcn,
            readout: Readout::Mean,
            temporal,
            use_tabular: true,
            use_connectivity: true,
            dynamic: true,
        }
    }

    fn probs_sum_to_one(lp: &[f64; 2]) {
        assert!((lp[0].exp() + lp[1].exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn every_variant_emits_a_log_distribution() {
        let atlas = tiny_atlas(6);
        let h0 = node_feature_matrix(&atlas).unwrap();
        let subject = tiny_subject("s0", 3, 6, 4, 1);
        for temporal in [
            TemporalMode::TfEarly,
            TemporalMode::TfCausal,
            TemporalMode::TfLate,
            TemporalMode::Pool,
            TemporalMode::Lstm,
        ] {
            let model = Model::init(tiny_config(temporal, 4), atlas.feature_width(), 11).unwrap();
            let lp = gnn_tf_forward(&model, &h0, &subject).unwrap();
            probs_sum_to_one(&lp);
        }
    }

    #[test]
    fn head_with_zero_params_is_uniform() {
        let atlas = tiny_atlas(5);
        let h0 = node_feature_matrix(&atlas).unwrap();
        let subject = tiny_subject("s0", 5, 5, 3, 0);
        let mut model = Model::init(tiny_config(TemporalMode::Pool, 3), atlas.feature_width(), 2).unwrap();
        // Zero the head: log-softmax of equal logits is uniform.
        for name in ["w1", "w2", "w3"] {
            let id = model
                .params
                .entries()
                .iter()
                .position(|e| e.group == "head" && e.name == name)
                .unwrap();
            let t = model.params.tensor_mut(id);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let lp = gnn_tf_forward(&model, &h0, &subject).unwrap();
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-12);
        assert!((lp[1] - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn covariates_do_not_leak_into_graph_only_model() {
        let atlas = tiny_atlas(6);
        let h0 = node_feature_matrix(&atlas).unwrap();
        let mut cfg = tiny_config(TemporalMode::Pool, 3);
        cfg.use_tabular = false;
        cfg.dynamic = false;
        let model = Model::init(cfg, atlas.feature_width(), 7).unwrap();
        let mut subject = tiny_subject("s0", 9, 6, 3, 1);
        let a = gnn_tf_forward(&model, &h0, &subject).unwrap();
        subject.covariates = TabularCovariates::new(1, 99.0).unwrap();
        let b = gnn_tf_forward(&model, &h0, &subject).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn late_fusion_without_tabular_normalizes_to_pooling() {
        let mut cfg = tiny_config(TemporalMode::TfLate, 3);
        cfg.use_tabular = false;
        let notes = cfg.normalize().unwrap();
        assert!(!notes.is_empty());
        assert_eq!(cfg.temporal, TemporalMode::Pool);
    }

    #[test]
    fn no_inputs_at_all_is_a_config_error() {
        let mut cfg = tiny_config(TemporalMode::Pool, 3);
        cfg.use_tabular = false;
        cfg.use_connectivity = false;
        assert!(cfg.normalize().is_err());
    }

    #[test]
    fn batched_forward_matches_single_subject_forward() {
        let atlas = tiny_atlas(6);
        let h0 = node_feature_matrix(&atlas).unwrap();
        let subjects: Vec<SubjectData> = (0..4).map(|i| tiny_subject(&format!("s{}", i), 20 + i, 6, 4, (i % 2) as u8)).collect();
        for temporal in [TemporalMode::TfEarly, TemporalMode::TfCausal, TemporalMode::Pool, TemporalMode::Lstm] {
            let model = Model::init(tiny_config(temporal, 4), atlas.feature_width(), 31).unwrap();
            let refs: Vec<&SubjectData> = subjects.iter().collect();
            let batched = predict_probs(&model, &h0, &refs).unwrap();
            for (i, s) in subjects.iter().enumerate() {
                let single = gnn_tf_forward(&model, &h0, s).unwrap();
                assert!(
                    (batched[i] - single[1].exp()).abs() < 1e-12,
                    "{:?} subject {}: {} vs {}",
                    temporal,
                    i,
                    batched[i],
                    single[1].exp()
                );
            }
        }
    }

    #[test]
    fn causal_mask_blocks_information_from_later_tokens() {
        let atlas = tiny_atlas(6);
        let h0 = node_feature_matrix(&atlas).unwrap();
        let model = Model::init(tiny_config(TemporalMode::TfCausal, 4), atlas.feature_width(), 13).unwrap();

        let subject = tiny_subject("s0", 41, 6, 4, 1);
        // Perturbing the LAST window token must not change any activation at
        // position 0; read it via a probe that swaps the final window.
        let mut perturbed = subject.clone();
        let mut other = tiny_subject("sX", 99, 6, 4, 0);
        perturbed.dynamic_norm[3] = other.dynamic_norm.pop().unwrap();
        perturbed.dynamic_raw[3] = other.dynamic_raw.pop().unwrap();

        let first_pos = |s: &SubjectData| -> Vec<f64> {
            let mut scratch = model.clone();
            let (tape, _) = {
                let (t, lp, _) = super::forward_batch_inner(&mut scratch, &h0, &[s], Mode::Infer, true).unwrap();
                (t, lp)
            };
            // Recompute the stack output by re-running and slicing position 0
            // is invasive; instead compare through the public read: for the
            // causal variant position 0 is g_1, so compare the full forward
            // of a 1-window-truncated model? Simplest faithful probe: rerun
            // with an early-read helper below.
            drop(tape);
            causal_position_activation(&model, &h0, s, 0)
        };
        let a = first_pos(&subject);
        let b = first_pos(&perturbed);
        assert_eq!(a, b, "position-0 activations changed when a later token changed");

        // Sanity: the model output itself does change.
        let full_a = gnn_tf_forward(&model, &h0, &subject).unwrap();
        let full_b = gnn_tf_forward(&model, &h0, &perturbed).unwrap();
        assert_ne!(full_a, full_b);
    }

    /// Activation of one sequence position after the full causal stack.
    fn causal_position_activation(model: &Model, h0: &Tensor, subject: &SubjectData, position: usize) -> Vec<f64> {
        let mut scratch = model.clone();
        let cfg = &model.config;
        let mut tape = Tape::new();
        let enc = model.encoder.as_ref().unwrap().clone();
        let h0v = tape.leaf(h0.clone()).unwrap();
        let enc_vars = enc.bind(&scratch.params, &mut tape, true).unwrap();
        let tokens = super::encode_all_windows(&mut tape, &scratch, &enc_vars, h0v, &[subject]).unwrap();
        let mut cov = Tensor::zeros(1, 2);
        cov.set(0, 0, f64::from(subject.covariates.sex));
        cov.set(0, 1, subject.covariates.age);
        let covv = tape.leaf(cov).unwrap();
        let tabp = scratch.tabular.clone().unwrap();
        let tab = tabular_embed(&mut tape, covv, &mut scratch.params, &tabp, Mode::Infer, true).unwrap();
        let tf = model.transformer.clone().unwrap();
        let cls = scratch.params.bind_frozen(&mut tape, tf.cls).unwrap();
        let pos = scratch.params.bind_frozen(&mut tape, tf.pos).unwrap();
        let layers: Vec<_> = tf.layers.iter().map(|lp| bind_layer(&scratch.params, &mut tape, lp, true).unwrap()).collect();
        let seq = tape.concat_rows(&[tokens, tab, cls]).unwrap();
        let l = cfg.sequence_length().unwrap();
        let out = transformer_stack(&mut tape, seq, 1, l, cfg.heads, pos, &layers, true).unwrap();
        let row = tape.slice_rows(out, position, 1).unwrap();
        tape.value(row).data().to_vec()
    }

    #[test]
    fn early_fusion_is_window_order_sensitive_only_through_positions() {
        let atlas = tiny_atlas(6);
        let h0 = node_feature_matrix(&atlas).unwrap();
        let subject = tiny_subject("s0", 55, 6, 4, 1);
        let mut swapped = subject.clone();
        swapped.dynamic_norm.swap(1, 2);
        swapped.dynamic_raw.swap(1, 2);

        // With all positional embeddings equal, attention cannot see order.
        let mut model = Model::init(tiny_config(TemporalMode::TfEarly, 4), atlas.feature_width(), 17).unwrap();
        let pos_id = model.transformer.as_ref().unwrap().pos;
        let rows = model.params.tensor(pos_id).rows();
        let cols = model.params.tensor(pos_id).cols();
        let flat = Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| 0.01 * ((i % cols) as f64)).collect(),
        )
        .unwrap();
        *model.params.tensor_mut(pos_id) = flat;
        let a = gnn_tf_forward(&model, &h0, &subject).unwrap();
        let b = gnn_tf_forward(&model, &h0, &swapped).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);

        // With distinct positional embeddings the outputs differ.
        let model = Model::init(tiny_config(TemporalMode::TfEarly, 4), atlas.feature_width(), 17).unwrap();
        let a = gnn_tf_forward(&model, &h0, &subject).unwrap();
        let b = gnn_tf_forward(&model, &h0, &swapped).unwrap();
        assert!((a[0] - b[0]).abs() > 1e-12 || (a[1] - b[1]).abs() > 1e-12);

        // Pooling stays exactly invariant.
        let model = Model::init(tiny_config(TemporalMode::Pool, 4), atlas.feature_width(), 17).unwrap();
        let a = gnn_tf_forward(&model, &h0, &subject).unwrap();
        let b = gnn_tf_forward(&model, &h0, &swapped).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_lstm_behaves_like_hand_recurrence() {
        // All LSTM weights zero: gates are sigmoid(0)=0.5, candidate
        // tanh(0)=0, so c stays 0 and h stays 0; with a zero head the
        // prediction is uniform.
        let atlas = tiny_atlas(5);
        let h0 = node_feature_matrix(&atlas).unwrap();
        let mut cfg = tiny_config(TemporalMode::Lstm, 3);
        cfg.use_tabular = false;
        let mut model = Model::init(cfg, atlas.feature_width(), 3).unwrap();
        for e in 0..model.params.len() {
            let group = model.params.entries()[e].group.clone();
            if group == "lstm" || group == "head" {
                for v in model.params.tensor_mut(e).data_mut() {
                    *v = 0.0;
                }
            }
        }
        let subject = tiny_subject("s0", 8, 5, 3, 1);
        let lp = gclstm_forward(&model, &h0, &subject).unwrap();
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-12);
        assert!((lp[1] - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn census_accounts_every_shape_product() {
        let atlas = tiny_atlas(6);
        let cfg = tiny_config(TemporalMode::TfEarly, 4);
        let model = Model::init(cfg.clone(), atlas.feature_width(), 1).unwrap();
        let census = model.census();
        let total: usize = census.iter().map(|(_, n)| n).sum();
        assert_eq!(total, model.params.total_trainable());
        let h = cfg.hidden;
        let f = atlas.feature_width();
        let encoder_expected = f * h + h * h + h * h + h;
        assert_eq!(census.iter().find(|(g, _)| g == "encoder").unwrap().1, encoder_expected);
        let l = cfg.sequence_length().unwrap();
        let per_layer = 4 * (h * h + h) + 2 * (2 * h) + (h * 4 * h + 4 * h) + (4 * h * h + h);
        let fusion_expected = h + l * h + 3 * per_layer;
        assert_eq!(census.iter().find(|(g, _)| g == "fusion").unwrap().1, fusion_expected);
        let head_expected = h * (h / 2) + h / 2 + (h / 2) * (h / 4) + h / 4 + (h / 4) * 2 + 2;
        assert_eq!(census.iter().find(|(g, _)| g == "head").unwrap().1, head_expected);
        let tabular_expected = 2 + 2 + 2 * h + h;
        assert_eq!(census.iter().find(|(g, _)| g == "tabular").unwrap().1, tabular_expected);
    }

    #[test]
    fn tabular_embed_width_and_gradcheck() {
        use crate::numerics::gradcheck::{check_gradient, finite_diff_grad};
        let cfg = tiny_config(TemporalMode::Pool, 2);
        let mut model = Model::init(cfg, 5, 77).unwrap();
        let tab = model.tabular.clone().unwrap();
        let cov = Tensor::from_vec(4, 2, vec![1.0, 15.0, 0.0, 17.5, 1.0, 20.0, 0.0, 13.0]).unwrap();

        let mut tape = Tape::new();
        let c = tape.leaf(cov.clone()).unwrap();
        let emb = tabular_embed(&mut tape, c, &mut model.params, &tab, Mode::Train, false).unwrap();
        assert_eq!(tape.shape(emb), (4, 16));

        // Gradient of a scalar functional w.r.t. the linear weight.
        let run = |pset: &ParamSet| -> Result<(f64, crate::numerics::tape::Gradients)> {
            let mut p = pset.clone();
            let mut tape = Tape::new();
            let c = tape.leaf(cov.clone())?;
            let emb = tabular_embed(&mut tape, c, &mut p, &tab, Mode::Train, false)?;
            let sq = tape.hadamard(emb, emb)?;
            let loss = tape.sum_all(sq)?;
            let v = tape.value(loss).item()?;
            let g = tape.backward(loss, p.len())?;
            Ok((v, g))
        };
        let (_, grads) = run(&model.params).unwrap();
        for &id in &[tab.bn_gamma, tab.bn_beta, tab.lin_w, tab.lin_b] {
            let analytic = grads.get(id).unwrap().clone();
            let numeric = finite_diff_grad(
                |x| {
                    let mut probe = model.params.clone();
                    *probe.tensor_mut(id) = x.clone();
                    run(&probe).map(|(v, _)| v)
                },
                model.params.tensor(id),
                1e-5,
            )
            .unwrap();
            let chk = check_gradient(&analytic, &numeric).unwrap();
            assert!(chk.passes(1e-4), "param {} rel err {}", id, chk.max_rel_error);
        }
    }

    #[test]
    fn transformer_fuse_reads_requested_position() {
        let cfg = tiny_config(TemporalMode::TfEarly, 2);
        let model = Model::init(cfg.clone(), 5, 5).unwrap();
        let tf = model.transformer.clone().unwrap();
        let l = cfg.sequence_length().unwrap();
        let mut tape = Tape::new();
        let mut rng = Rng::from_seed(2);
        let tokens = tape.leaf(Tensor::uniform_init(l, cfg.hidden, 1.0, &mut rng)).unwrap();
        let fused = transformer_fuse(&mut tape, tokens, &model.params, &tf, cfg.heads, false, true).unwrap();
        assert_eq!(tape.shape(fused), (1, cfg.hidden));
        // Wrong length errors.
        let mut tape = Tape::new();
        let bad = tape.leaf(Tensor::uniform_init(l + 1, cfg.hidden, 1.0, &mut rng)).unwrap();
        assert!(transformer_fuse(&mut tape, bad, &model.params, &tf, cfg.heads, false, true).is_err());
    }
}
