//! The network: signal encoder, parallel long-term (full attention) and
//! short-term (sliding-window attention) decoders, temporal fusion and heads.
//!
//! Every block is pre-norm: `x + Drop(Attn(LN(x)))` followed by
//! `x + Drop(FFN(LN(x)))`. Each stack ends with its own layer norm.

mod checkpoint;
mod params;

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_diff, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::ParameterStore;

use crate::error::{Result, StetError};
use crate::rng::{tag, RngState, StetRng};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Which decoder streams feed the fusion head. A disabled stream contributes
/// zeros, so every variant shares one parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Fused,
    LongOnly,
    ShortOnly,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Fused => "fused",
            Ablation::LongOnly => "long-only",
            Ablation::ShortOnly => "short-only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HeadKind {
    Classify { n_classes: usize },
    Regress { n_joints: usize },
}

impl HeadKind {
    pub fn n_outputs(self) -> usize {
        match self {
            HeadKind::Classify { n_classes } => n_classes,
            HeadKind::Regress { n_joints } => n_joints,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Sensors per time step.
    pub c: usize,
    /// Time steps per window.
    pub t: usize,
    /// Hidden width.
    pub h: usize,
    /// Encoder layers.
    pub layers: usize,
    /// Attention heads.
    pub heads: usize,
    pub long_layers: usize,
    pub short_layers: usize,
    /// One odd window size per short layer, applied in layer order.
    pub short_windows: Vec<usize>,
    /// Feed-forward width as a multiple of `h`.
    pub ffn_mult: usize,
    pub head: HeadKind,
    pub dropout: f64,
    /// Scale scores by `1/√(h/heads)` instead of `1/√h`.
    pub per_head_scale: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c: 8,
            t: 64,
            h: 64,
            layers: 2,
            heads: 4,
            long_layers: 2,
            short_layers: 2,
            short_windows: vec![41, 21],
            ffn_mult: 4,
            head: HeadKind::Classify { n_classes: 8 },
            dropout: 0.2,
            per_head_scale: false,
            ablation: Ablation::Fused,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StetError::Config(m));
        if self.c == 0 || self.t == 0 || self.h == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("c, t, h, heads and ffn_mult must be positive".into());
        }
        if self.h % self.heads != 0 {
            return bad(format!("h = {} is not divisible by heads = {}", self.h, self.heads));
        }
        if self.short_windows.len() != self.short_layers {
            return bad(format!(
                "{} short windows given for {} short layers",
                self.short_windows.len(),
                self.short_layers
            ));
        }
        if let Some(w) = self.short_windows.iter().find(|&&w| w % 2 == 0) {
            return bad(format!("short window {w} must be odd"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.head.n_outputs() == 0 {
            return bad("head needs at least one output".into());
        }
        Ok(())
    }

    /// Short windows after clamping to the largest odd size not above `t`.
    pub fn effective_windows(&self) -> Vec<usize> {
        let cap = if self.t % 2 == 1 { self.t } else { self.t - 1 };
        self.short_windows
            .iter()
            .map(|&w| {
                if w > cap {
                    warn!("short window {w} exceeds t = {}; clamped to {cap}", self.t);
                    cap
                } else {
                    w
                }
            })
            .collect()
    }

    pub fn score_scale(&self) -> f64 {
        let denom = if self.per_head_scale {
            (self.h / self.heads) as f64
        } else {
            self.h as f64
        };
        1.0 / denom.sqrt()
    }

    pub fn ffn_dim(&self) -> usize {
        self.h * self.ffn_mult
    }
}

/// Dropout switch for a forward pass. `Train` carries the dropout stream.
pub struct Mode<'a>(Option<&'a mut StetRng>);

impl<'a> Mode<'a> {
    pub fn eval() -> Self {
        Mode(None)
    }

    pub fn train(rng: &'a mut StetRng) -> Self {
        Mode(Some(rng))
    }

    pub fn is_train(&self) -> bool {
        self.0.is_some()
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self.0.as_deref_mut() {
            Some(rng) => tape.dropout(x, p, rng),
            None => Ok(x),
        }
    }
}

/// Tape handles for one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2: (Var, Var),
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockIdx([usize; 12]);

impl BlockIdx {
    fn bind(&self, v: &[Var]) -> BlockVars {
        let i = &self.0;
        BlockVars {
            ln1: (v[i[0]], v[i[1]]),
            wq: v[i[2]],
            wk: v[i[3]],
            wv: v[i[4]],
            wo: v[i[5]],
            ln2: (v[i[6]], v[i[7]]),
            w1: v[i[8]],
            b1: v[i[9]],
            w2: v[i[10]],
            b2: v[i[11]],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stack {
    blocks: Vec<BlockIdx>,
    ln: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    pos: usize,
    enc: Stack,
    long: Stack,
    short: Stack,
    u: usize,
    fc1: (usize, usize),
    fc2: (usize, usize),
    pt: (usize, usize),
}

/// Parameters bound to a tape, indexed like the store.
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps variables already recorded in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Named intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Encoder output `X^(L)`, `t × h`.
    pub encoded: Var,
    /// Long-term stream `H^l`, `t × h` (zeros when ablated).
    pub long: Var,
    /// Short-term stream `H^s`, `t × h` (zeros when ablated).
    pub short: Var,
    /// Temporal pooling of `[H^l : H^s]`, `1 × 2h`.
    pub pooled: Var,
    /// Head output before any sigmoid, `1 × n_outputs`.
    pub logits: Var,
}

/// Flattened stream values for export.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub long: Vec<f64>,
    pub short: Vec<f64>,
    pub fused: Vec<f64>,
}

/// Standardization of regression targets, fitted on training labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    windows: Vec<usize>,
    params: ParameterStore,
    layout: Layout,
    /// Free-form key/value metadata persisted with checkpoints.
    pub meta: BTreeMap<String, String>,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut StetRng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

struct Builder<'a> {
    store: ParameterStore,
    root: &'a RngState,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.store.insert(name, t).expect("parameter names are unique")
    }

    fn rng(&self) -> StetRng {
        self.root.stream(&[tag::INIT, self.store.len() as u64])
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let t = uniform(&[fan_in, fan_out], fan_in, &mut self.rng());
        self.add(name, t)
    }

    fn zeros(&mut self, name: String, n: usize) -> usize {
        self.add(name, Tensor::zeros(&[n]))
    }

    fn layer_norm(&mut self, prefix: &str, h: usize) -> (usize, usize) {
        let g = self.add(format!("{prefix}.g"), Tensor::full(&[h], 1.0));
        let b = self.zeros(format!("{prefix}.b"), h);
        (g, b)
    }

    fn block(&mut self, prefix: &str, h: usize, f: usize) -> BlockIdx {
        let (g1, b1) = self.layer_norm(&format!("{prefix}.ln1"), h);
        let wq = self.weight(format!("{prefix}.attn.wq"), h, h);
        let wk = self.weight(format!("{prefix}.attn.wk"), h, h);
        let wv = self.weight(format!("{prefix}.attn.wv"), h, h);
        let wo = self.weight(format!("{prefix}.attn.wo"), h, h);
        let (g2, b2) = self.layer_norm(&format!("{prefix}.ln2"), h);
        let w1 = self.weight(format!("{prefix}.ffn.w1"), h, f);
        let fb1 = self.zeros(format!("{prefix}.ffn.b1"), f);
        let w2 = self.weight(format!("{prefix}.ffn.w2"), f, h);
        let fb2 = self.zeros(format!("{prefix}.ffn.b2"), h);
        BlockIdx([g1, b1, wq, wk, wv, wo, g2, b2, w1, fb1, w2, fb2])
    }

    fn stack(&mut self, prefix: &str, n: usize, h: usize, f: usize) -> Stack {
        let blocks = (0..n).map(|i| self.block(&format!("{prefix}.{i}"), h, f)).collect();
        let ln = self.layer_norm(&format!("{prefix}.ln_f"), h);
        Stack { blocks, ln }
    }
}

impl Model {
    /// A freshly initialized model. Initialization draws from streams derived
    /// from `seed` and each parameter's position in the store.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let windows = config.effective_windows();
        let root = RngState::new(seed);
        let mut b = Builder {
            store: ParameterStore::new(),
            root: &root,
        };
        let (c, t, h, f) = (config.c, config.t, config.h, config.ffn_dim());
        let embed_w = b.weight("embed.w".into(), c, h);
        let embed_b = b.zeros("embed.b".into(), h);
        let pos = {
            let mut rng = b.rng();
            let normal = Normal::new(0.0, 0.02).expect("constant sigma");
            let data = (0..t * h).map(|_| normal.sample(&mut rng)).collect();
            b.add("embed.pos".into(), Tensor::new(vec![t, h], data)?)
        };
        let enc = b.stack("enc", config.layers, h, f);
        let long = b.stack("long", config.long_layers, h, f);
        let short = b.stack("short", config.short_layers, h, f);
        let u = b.add("fuse.u".into(), Tensor::full(&[t], 1.0 / t as f64));
        let n_out = config.head.n_outputs();
        let fc1 = (b.weight("head.w1".into(), 2 * h, h), b.zeros("head.b1".into(), h));
        let fc2 = (b.weight("head.w2".into(), h, n_out), b.zeros("head.b2".into(), n_out));
        let pt = (b.weight("pretrain.w".into(), h, c), b.zeros("pretrain.b".into(), c));
        let layout = Layout {
            embed_w,
            embed_b,
            pos,
            enc,
            long,
            short,
            u,
            fc1,
            fc2,
            pt,
        };
        Ok(Self {
            config,
            windows,
            params: b.store,
            layout,
            meta: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Short-layer windows actually used (after clamping).
    pub fn windows(&self) -> &[usize] {
        &self.windows
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Switches the ablation mode; the parameter layout is unaffected.
    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.config.ablation = ablation;
    }

    /// Copies the encoder, input projection and position table from a
    /// pretrained model. Decoders and heads keep their fresh values.
    pub fn load_backbone(&mut self, pretrained: &Model) -> Result<usize> {
        let (a, b) = (&self.config, &pretrained.config);
        if (a.c, a.t, a.h, a.layers, a.heads, a.ffn_mult) != (b.c, b.t, b.h, b.layers, b.heads, b.ffn_mult) {
            return Err(StetError::ConfigMismatch(config_diff(b, a).join("; ")));
        }
        let mut copied = 0;
        for p in pretrained.params.iter() {
            if p.name.starts_with("embed.") || p.name.starts_with("enc.") {
                self.params.assign(&p.name, &p.tensor)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn target_stats(&self) -> Option<TargetStats> {
        self.meta
            .get("target_stats")
            .and_then(|s| serde_json::from_str(s).ok())
    }

    pub fn set_target_stats(&mut self, stats: &TargetStats) {
        self.meta.insert(
            "target_stats".into(),
            serde_json::to_string(stats).expect("serializable"),
        );
    }

    // ---- tape construction ------------------------------------------------

    /// Records every parameter on `tape`. Trainable bindings report gradients
    /// under the parameter's store id.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .enumerate()
                .map(|(id, p)| {
                    if trainable {
                        tape.param(id, &p.tensor)
                    } else {
                        tape.constant(&p.tensor)
                    }
                })
                .collect(),
        )
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.config.t, self.config.c];
        if x.shape() != want {
            return Err(StetError::dim("model input", x.shape(), &want));
        }
        Ok(())
    }

    fn stack_forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        stack: &Stack,
        mut x: Var,
        windows: Option<&[usize]>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let v = &b.0;
        for (i, blk) in stack.blocks.iter().enumerate() {
            let w = windows.map(|ws| ws[i]);
            x = transformer_block(
                tape,
                x,
                &blk.bind(v),
                self.config.heads,
                self.config.score_scale(),
                w,
                self.config.dropout,
                mode,
            )?;
        }
        tape.layer_norm(x, v[stack.ln.0], v[stack.ln.1], LN_EPS)
    }

    /// `X^(L)`: input projection plus position table, then the encoder stack.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, x: &Tensor, mode: &mut Mode) -> Result<Var> {
        self.check_input(x)?;
        let v = &b.0;
        let l = &self.layout;
        let xv = tape.constant(x);
        let proj = tape.linear(xv, v[l.embed_w], Some(v[l.embed_b]))?;
        let mut e = tape.add(proj, v[l.pos])?;
        e = mode.dropout(tape, e, self.config.dropout)?;
        self.stack_forward(tape, b, &l.enc, e, None, mode)
    }

    /// `H^l`: full self-attention stack.
    pub fn long_term_decode(&self, tape: &mut Tape, b: &Bound, x: Var, mode: &mut Mode) -> Result<Var> {
        self.stack_forward(tape, b, &self.layout.long, x, None, mode)
    }

    /// `H^s`: sliding-window self-attention stack, stride 1.
    pub fn short_term_decode(&self, tape: &mut Tape, b: &Bound, x: Var, mode: &mut Mode) -> Result<Var> {
        let windows = self.windows.clone();
        self.stack_forward(tape, b, &self.layout.short, x, Some(&windows), mode)
    }

    /// `uᵀ·[H^l : H^s]`, a `1 × 2h` row.
    pub fn fuse_and_pool(&self, tape: &mut Tape, b: &Bound, hl: Var, hs: Var) -> Result<Var> {
        if tape.shape(hl) != tape.shape(hs) {
            return Err(StetError::dim("fuse_and_pool", tape.shape(hl), tape.shape(hs)));
        }
        let cat = tape.concat_cols(&[hl, hs])?;
        let u = tape.reshape(b.0[self.layout.u], vec![1, self.config.t])?;
        tape.matmul(u, cat)
    }

    fn head(&self, tape: &mut Tape, b: &Bound, pooled: Var, mode: &mut Mode) -> Result<Var> {
        let v = &b.0;
        let l = &self.layout;
        let z = tape.linear(pooled, v[l.fc1.0], Some(v[l.fc1.1]))?;
        let z = tape.gelu(z);
        let z = mode.dropout(tape, z, self.config.dropout)?;
        tape.linear(z, v[l.fc2.0], Some(v[l.fc2.1]))
    }

    /// Shared trunk for classification and regression.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: &Tensor, mode: &mut Mode) -> Result<Forward> {
        let encoded = self.encode(tape, b, x, mode)?;
        let zeros = || Tensor::zeros(&[self.config.t, self.config.h]);
        let long = match self.config.ablation {
            Ablation::ShortOnly => tape.constant(&zeros()),
            _ => self.long_term_decode(tape, b, encoded, mode)?,
        };
        let short = match self.config.ablation {
            Ablation::LongOnly => tape.constant(&zeros()),
            _ => self.short_term_decode(tape, b, encoded, mode)?,
        };
        let pooled = self.fuse_and_pool(tape, b, long, short)?;
        let logits = self.head(tape, b, pooled, mode)?;
        Ok(Forward {
            encoded,
            long,
            short,
            pooled,
            logits,
        })
    }

    /// Per-class independent probabilities `σ(logits)`.
    pub fn forward_classify(&self, tape: &mut Tape, b: &Bound, x: &Tensor, mode: &mut Mode) -> Result<(Forward, Var)> {
        if !matches!(self.config.head, HeadKind::Classify { .. }) {
            return Err(StetError::Config("model has a regression head".into()));
        }
        let f = self.forward(tape, b, x, mode)?;
        let probs = tape.sigmoid(f.logits);
        Ok((f, probs))
    }

    /// Standardized joint-angle prediction (undo with [`TargetStats`]).
    pub fn forward_regress(&self, tape: &mut Tape, b: &Bound, x: &Tensor, mode: &mut Mode) -> Result<Forward> {
        if !matches!(self.config.head, HeadKind::Regress { .. }) {
            return Err(StetError::Config("model has a classification head".into()));
        }
        self.forward(tape, b, x, mode)
    }

    /// `t × c` reconstruction from an already masked input.
    pub fn forward_pretrain(&self, tape: &mut Tape, b: &Bound, x_masked: &Tensor, mode: &mut Mode) -> Result<Var> {
        let enc = self.encode(tape, b, x_masked, mode)?;
        let (w, bias) = self.layout.pt;
        tape.linear(enc, b.0[w], Some(b.0[bias]))
    }

    // ---- eval conveniences -------------------------------------------------

    /// Class probabilities for one window, dropout off.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let (_, p) = self.forward_classify(&mut tape, &b, x, &mut Mode::eval())?;
        Ok(tape.value(p).to_vec())
    }

    pub fn predict_class(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    /// Joint angles in original units for one window.
    pub fn predict_regress(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let f = self.forward_regress(&mut tape, &b, x, &mut Mode::eval())?;
        let mut out = tape.value(f.logits).to_vec();
        if let Some(s) = self.target_stats() {
            for (j, o) in out.iter_mut().enumerate() {
                *o = *o * s.std[j] + s.mean[j];
            }
        }
        Ok(out)
    }

    pub fn embeddings(&self, x: &Tensor) -> Result<Embeddings> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &b, x, &mut Mode::eval())?;
        Ok(Embeddings {
            long: tape.value(f.long).to_vec(),
            short: tape.value(f.short).to_vec(),
            fused: tape.value(f.pooled).to_vec(),
        })
    }

    // ---- persistence -------------------------------------------------------

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tensors: self.params.as_slice().to_vec(),
            meta: self.meta.clone(),
        }
    }

    /// Rebuilds a model from a checkpoint; every parameter must be present
    /// with the shape the configuration implies.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(ck.config.clone(), 0)?;
        let mut seen = 0;
        for nt in &ck.tensors {
            if nt.name.starts_with("opt.") {
                continue;
            }
            model.params.assign(&nt.name, &nt.tensor)?;
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(StetError::ConfigMismatch(format!(
                "checkpoint holds {seen} model tensors, configuration needs {}",
                model.params.len()
            )));
        }
        model.meta = ck.meta.clone();
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Loads a checkpoint and rejects it unless its configuration equals
    /// `expected`, reporting the differing fields.
    pub fn load_expecting(path: &std::path::Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let diff = config_diff(expected, &ck.config);
        if !diff.is_empty() {
            return Err(StetError::ConfigMismatch(diff.join("; ")));
        }
        Self::from_checkpoint(&ck)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Multi-head self-attention. `window = None` attends over the whole
/// sequence; `Some(w)` restricts each query to its `w` nearest steps, with
/// out-of-range slots masked before the softmax. Returns the projected output
/// and each head's attention weights (`t × t` or `t × w`).
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    scale: f64,
    window: Option<usize>,
) -> Result<(Var, Vec<Var>)> {
    let h = tape.shape(x)[1];
    if heads == 0 || h % heads != 0 {
        return Err(StetError::Config(format!("h = {h} not divisible by {heads} heads")));
    }
    let dh = h / heads;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for i in 0..heads {
        let (qi, ki, vi) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, i * dh, dh)?,
                tape.slice_cols(k, i * dh, dh)?,
                tape.slice_cols(v, i * dh, dh)?,
            )
        };
        let (p, o) = match window {
            None => {
                let s = tape.matmul_nt(qi, ki)?;
                let s = tape.scale(s, scale);
                let p = tape.softmax(s)?;
                (p, tape.matmul(p, vi)?)
            }
            Some(w) => {
                let (kw, keep) = tape.unfold_time(ki, w)?;
                let (vw, _) = tape.unfold_time(vi, w)?;
                let s = tape.window_scores(qi, kw)?;
                let s = tape.scale(s, scale);
                let s = tape.mask_fill_neg_inf(s, &keep)?;
                let p = tape.softmax(s)?;
                (p, tape.window_mix(p, vw)?)
            }
        };
        probs.push(p);
        outs.push(o);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((tape.matmul(cat, wo)?, probs))
}

/// One pre-norm transformer block.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    p: &BlockVars,
    heads: usize,
    scale: f64,
    window: Option<usize>,
    dropout: f64,
    mode: &mut Mode,
) -> Result<Var> {
    let a = tape.layer_norm(x, p.ln1.0, p.ln1.1, LN_EPS)?;
    let (a, _) = multi_head_attention(tape, a, p.wq, p.wk, p.wv, p.wo, heads, scale, window)?;
    let a = mode.dropout(tape, a, dropout)?;
    let x = tape.add(x, a)?;
    let f = tape.layer_norm(x, p.ln2.0, p.ln2.1, LN_EPS)?;
    let f = tape.linear(f, p.w1, Some(p.b1))?;
    let f = tape.gelu(f);
    let f = tape.linear(f, p.w2, Some(p.b2))?;
    let f = mode.dropout(tape, f, dropout)?;
    tape.add(x, f)
}
