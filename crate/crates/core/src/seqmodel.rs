//! Gain tuner, force planner and the joint baseline as windowed sequence regressors.
//!
//! All three share one network shape: each input stream (for example state,
//! extended action, return) gets its own linear embedding applied at every
//! history position plus the current step, a backbone mixes positions, and a
//! tanh MLP trunk feeds one linear output per head. Padded history positions
//! are skipped entirely, so outputs depend only on unmasked content.
//!
//! Bounded heads (gains, motion increments) pass through a scaled sigmoid;
//! the force head is an affine map around the dataset force statistics.
//! Losses are mean squared errors in standardized target units (error divided
//! by the dataset standard deviation of that target), which keeps the motion
//! and force terms of the planner loss on a comparable scale.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, DatasetRow, FpWindow, GtWindow};
use crate::dynamics::{Pose, Twist, Vector, Wrench};
use crate::envsim::TaskConfig;
use crate::math;
use crate::nn::{self, Adam, Layout, Linear, Normalizer};
use crate::{rng_from_seed, Error, Result, Rng};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Learned per-position, per-channel weighting of each stream, concatenated.
    #[default]
    WindowedMlp,
    /// One head of causal attention from the current step over the window.
    TinyCausalAttention,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// History length `H`.
    pub window: usize,
    pub embed_width: usize,
    pub backbone: Backbone,
    pub hidden: Vec<usize>,
    pub dof: usize,
    pub k_min: f64,
    pub k_max: f64,
    /// Symmetric per-axis bound on the motion increment.
    pub dx_max: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_task(&TaskConfig::default())
    }
}

impl ModelConfig {
    pub fn for_task(task: &TaskConfig) -> Self {
        ModelConfig {
            window: 20,
            embed_width: 128,
            backbone: Backbone::WindowedMlp,
            hidden: vec![128, 128],
            dof: task.dx_max.len(),
            k_min: task.k_min,
            k_max: task.k_max,
            dx_max: task.dx_max.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::usage("model window must be at least 1"));
        }
        if self.embed_width < 1 {
            return Err(Error::usage("embed_width must be at least 1"));
        }
        if self.hidden.iter().any(|h| *h == 0) {
            return Err(Error::usage("hidden layer sizes must be positive"));
        }
        if self.dof == 0 || self.dof > crate::dynamics::MAX_DOF {
            return Err(Error::usage(alloc::format!("unsupported dof {}", self.dof)));
        }
        if !(self.k_min > 0.0 && self.k_max > self.k_min) {
            return Err(Error::usage("gain bounds must satisfy 0 < k_min < k_max"));
        }
        if self.dx_max.len() != self.dof || self.dx_max.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::usage("dx_max needs one positive bound per axis"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `k_t` from `(f^d_{t+1}, Δx_t, x_t, ẋ_t)` and the gain-tuner window.
    GainTuner,
    /// `(Δx_t, f^d_{t+1})` from `(x_t, ẋ_t, f_t, R_t)` and the planner window.
    ForcePlanner,
    /// `(Δx_t, k_t)` from `(x_t, ẋ_t, f_t, R_t)` and a state/action/return window.
    Joint,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::GainTuner => "gt",
            ModelKind::ForcePlanner => "fp",
            ModelKind::Joint => "joint",
        }
    }
}

/// Frozen input normalization, fitted once on the training dataset.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FeatureStats {
    pub x: Normalizer,
    pub v: Normalizer,
    pub f: Normalizer,
    pub dx: Normalizer,
    pub k: Normalizer,
    pub ret: Normalizer,
}

impl FeatureStats {
    pub fn identity(dof: usize) -> Self {
        let n = Normalizer::identity(dof);
        FeatureStats { x: n.clone(), v: n.clone(), f: n.clone(), dx: n.clone(), k: n, ret: Normalizer::identity(1) }
    }

    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let first = dataset.trajectories.first().ok_or_else(|| Error::usage("cannot fit statistics on an empty dataset"))?;
        let dof = first.x[0].dof();
        let trajs = &dataset.trajectories;
        Ok(FeatureStats {
            x: Normalizer::fit(dof, trajs.iter().flat_map(|t| t.x.iter().map(|p| p.as_slice()))),
            v: Normalizer::fit(dof, trajs.iter().flat_map(|t| t.v.iter().map(|p| p.as_slice()))),
            f: Normalizer::fit(dof, trajs.iter().flat_map(|t| t.f.iter().map(|p| p.as_slice()))),
            dx: Normalizer::fit(dof, trajs.iter().flat_map(|t| t.dx.iter().map(|p| p.as_slice()))),
            k: Normalizer::fit(dof, trajs.iter().flat_map(|t| t.k.iter().map(|p| p.as_slice()))),
            ret: Normalizer::fit(1, dataset.returns.iter().flat_map(|r| r.chunks(1))),
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct StreamSpec {
    dim: usize,
    /// Whether the stream has an entry at the current step (position `H`).
    current: bool,
}

#[derive(Clone, PartialEq, Debug)]
enum HeadKind {
    Bounded { lo: Vec<f64>, hi: Vec<f64>, std: Vec<f64> },
    Free { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Clone, PartialEq, Debug)]
struct Head {
    name: &'static str,
    kind: HeadKind,
}

impl Head {
    fn dim(&self) -> usize {
        match &self.kind {
            HeadKind::Bounded { lo, .. } => lo.len(),
            HeadKind::Free { mean, .. } => mean.len(),
        }
    }
}

/// Normalized features for every stream at every position, plus the history mask.
#[derive(Clone, PartialEq, Debug)]
pub struct NetInput {
    /// Per stream, `(H + 1) * dim` values, oldest position first.
    pub feats: Vec<Vec<f64>>,
    /// Validity of the `H` history positions.
    pub mask: Vec<bool>,
}

/// The differentiable network; parameters live outside in a flat vector.
#[derive(Clone, PartialEq, Debug)]
pub struct SeqNet {
    window: usize,
    embed: usize,
    backbone: Backbone,
    streams: Vec<StreamSpec>,
    layout: Layout,
    embedders: Vec<Linear>,
    /// Windowed MLP: per-stream `(H + 1) × E` position weights.
    pos_weights: Vec<usize>,
    /// Attention: `(H + 1) × E` positional embedding and the q/k/v maps.
    pos_embed: usize,
    attn: Option<[Linear; 3]>,
    trunk: Vec<Linear>,
    out_dim: usize,
}

/// Forward activations and backward scratch for one sample.
#[derive(Clone, Debug)]
pub struct Tape {
    emb: Vec<Vec<f64>>,
    h: Vec<f64>,
    q: Vec<f64>,
    keys: Vec<f64>,
    vals: Vec<f64>,
    alpha: Vec<f64>,
    acts: Vec<Vec<f64>>,
    dacts: Vec<Vec<f64>>,
    dh: Vec<f64>,
    de: Vec<f64>,
    tmp: Vec<f64>,
    dq: Vec<f64>,
}

impl SeqNet {
    fn new(config: &ModelConfig, streams: Vec<StreamSpec>, out_dim: usize) -> Self {
        let (h, e) = (config.window, config.embed_width);
        let npos = h + 1;
        let mut layout = Layout::default();
        let embedders: Vec<Linear> = streams
            .iter()
            .enumerate()
            .map(|(s, st)| Linear::new(&mut layout, &alloc::format!("embed{s}"), st.dim, e, true))
            .collect();
        let mut pos_weights = Vec::new();
        let mut pos_embed = 0;
        let mut attn = None;
        let trunk_in = match config.backbone {
            Backbone::WindowedMlp => {
                for s in 0..streams.len() {
                    pos_weights.push(layout.alloc(alloc::format!("mix{s}"), &[npos, e]));
                }
                streams.len() * e
            }
            Backbone::TinyCausalAttention => {
                pos_embed = layout.alloc("pos", &[npos, e]);
                attn = Some([
                    Linear::new(&mut layout, "attn.q", e, e, false),
                    Linear::new(&mut layout, "attn.k", e, e, false),
                    Linear::new(&mut layout, "attn.v", e, e, false),
                ]);
                2 * e
            }
        };
        let mut trunk = Vec::new();
        let mut width = trunk_in;
        for (l, hid) in config.hidden.iter().enumerate() {
            trunk.push(Linear::new(&mut layout, &alloc::format!("trunk{l}"), width, *hid, true));
            width = *hid;
        }
        trunk.push(Linear::new(&mut layout, "out", width, out_dim, true));
        SeqNet { window: h, embed: e, backbone: config.backbone, streams, layout, embedders, pos_weights, pos_embed, attn, trunk, out_dim }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.size
    }

    fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.layout.size];
        let npos = self.window + 1;
        for lin in &self.embedders {
            lin.init(&mut p, rng, 1.0);
        }
        for off in &self.pos_weights {
            for j in 0..npos {
                // Current step at full weight, history averaged.
                let w = if j == self.window { 1.0 } else { 1.0 / self.window as f64 };
                p[off + j * self.embed..off + (j + 1) * self.embed].fill(w);
            }
        }
        if let Some(qkv) = &self.attn {
            for v in &mut p[self.pos_embed..self.pos_embed + npos * self.embed] {
                *v = 0.02 * rng.random_range(-1.0..=1.0);
            }
            for lin in qkv {
                lin.init(&mut p, rng, 1.0);
            }
        }
        let last = self.trunk.len() - 1;
        for (l, lin) in self.trunk.iter().enumerate() {
            // Small output layer so every head starts near the middle of its range.
            lin.init(&mut p, rng, if l == last { 0.1 } else { 1.0 });
        }
        p
    }

    pub fn new_input(&self) -> NetInput {
        NetInput {
            feats: self.streams.iter().map(|s| vec![0.0; (self.window + 1) * s.dim]).collect(),
            mask: vec![false; self.window],
        }
    }

    pub fn new_tape(&self) -> Tape {
        let npos = self.window + 1;
        let e = self.embed;
        let mut widths = vec![self.trunk[0].inp];
        widths.extend(self.trunk.iter().map(|l| l.out));
        Tape {
            emb: self.streams.iter().map(|_| vec![0.0; npos * e]).collect(),
            h: vec![0.0; npos * e],
            q: vec![0.0; e],
            keys: vec![0.0; npos * e],
            vals: vec![0.0; npos * e],
            alpha: vec![0.0; npos],
            acts: widths.iter().map(|w| vec![0.0; *w]).collect(),
            dacts: widths.iter().map(|w| vec![0.0; *w]).collect(),
            dh: vec![0.0; npos * e],
            de: vec![0.0; e],
            tmp: vec![0.0; e],
            dq: vec![0.0; e],
        }
    }

    #[inline]
    fn pos_valid(&self, mask: &[bool], j: usize) -> bool {
        if j < self.window {
            mask[j]
        } else {
            true
        }
    }

    #[inline]
    fn active(&self, mask: &[bool], s: usize, j: usize) -> bool {
        if j < self.window {
            mask[j]
        } else {
            self.streams[s].current
        }
    }

    fn check_input(&self, input: &NetInput) -> Result<()> {
        if input.mask.len() != self.window {
            return Err(Error::DimensionMismatch { expected: self.window, got: input.mask.len() });
        }
        for (st, f) in self.streams.iter().zip(&input.feats) {
            let want = (self.window + 1) * st.dim;
            if f.len() != want {
                return Err(Error::DimensionMismatch { expected: want, got: f.len() });
            }
        }
        if input.feats.len() != self.streams.len() {
            return Err(Error::DimensionMismatch { expected: self.streams.len(), got: input.feats.len() });
        }
        Ok(())
    }

    /// Raw head pre-activations end up in the last entry of `tape.acts`.
    pub fn forward<'t>(&self, p: &[f64], input: &NetInput, tape: &'t mut Tape) -> &'t [f64] {
        let npos = self.window + 1;
        let e = self.embed;
        for (s, lin) in self.embedders.iter().enumerate() {
            let d = self.streams[s].dim;
            for j in 0..npos {
                let dst = &mut tape.emb[s][j * e..(j + 1) * e];
                if self.active(&input.mask, s, j) {
                    lin.forward(p, &input.feats[s][j * d..(j + 1) * d], dst);
                } else {
                    dst.fill(0.0);
                }
            }
        }
        match self.backbone {
            Backbone::WindowedMlp => {
                let z = &mut tape.acts[0];
                z.fill(0.0);
                for (s, off) in self.pos_weights.iter().enumerate() {
                    let zs = &mut z[s * e..(s + 1) * e];
                    for j in 0..npos {
                        if !self.active(&input.mask, s, j) {
                            continue;
                        }
                        let a = &p[off + j * e..off + (j + 1) * e];
                        let es = &tape.emb[s][j * e..(j + 1) * e];
                        for c in 0..e {
                            zs[c] += a[c] * es[c];
                        }
                    }
                }
            }
            Backbone::TinyCausalAttention => {
                let [wq, wk, wv] = self.attn.as_ref().expect("attention layers");
                let scale = 1.0 / math::sqrt(e as f64);
                for j in 0..npos {
                    let hj = &mut tape.h[j * e..(j + 1) * e];
                    if !self.pos_valid(&input.mask, j) {
                        hj.fill(0.0);
                        continue;
                    }
                    hj.copy_from_slice(&p[self.pos_embed + j * e..self.pos_embed + (j + 1) * e]);
                    for s in 0..self.streams.len() {
                        if self.active(&input.mask, s, j) {
                            nn::axpy(1.0, &tape.emb[s][j * e..(j + 1) * e], hj);
                        }
                    }
                }
                let cur = &tape.h[self.window * e..];
                wq.forward(p, cur, &mut tape.q);
                let mut max = f64::NEG_INFINITY;
                for j in 0..npos {
                    if !self.pos_valid(&input.mask, j) {
                        continue;
                    }
                    let hj = &tape.h[j * e..(j + 1) * e];
                    wk.forward(p, hj, &mut tape.keys[j * e..(j + 1) * e]);
                    wv.forward(p, hj, &mut tape.vals[j * e..(j + 1) * e]);
                    let sj = scale * nn::dot(&tape.q, &tape.keys[j * e..(j + 1) * e]);
                    tape.alpha[j] = sj;
                    max = max.max(sj);
                }
                let mut total = 0.0;
                for j in 0..npos {
                    if self.pos_valid(&input.mask, j) {
                        tape.alpha[j] = math::exp(tape.alpha[j] - max);
                        total += tape.alpha[j];
                    } else {
                        tape.alpha[j] = 0.0;
                    }
                }
                let z = &mut tape.acts[0];
                z[..e].copy_from_slice(&tape.h[self.window * e..]);
                let ctx = &mut z[e..];
                ctx.fill(0.0);
                for j in 0..npos {
                    if tape.alpha[j] != 0.0 {
                        tape.alpha[j] /= total;
                        nn::axpy(tape.alpha[j], &tape.vals[j * e..(j + 1) * e], ctx);
                    }
                }
            }
        }
        let last = self.trunk.len() - 1;
        for (l, lin) in self.trunk.iter().enumerate() {
            let (lo, hi) = tape.acts.split_at_mut(l + 1);
            lin.forward(p, &lo[l], &mut hi[0]);
            if l < last {
                hi[0].iter_mut().for_each(|a| *a = math::tanh(*a));
            }
        }
        &tape.acts[last + 1]
    }

    /// Accumulate `∂L/∂p` into `g` given `du = ∂L/∂(raw outputs)`; `tape` must hold
    /// the forward pass of the same input.
    pub fn backward(&self, p: &[f64], input: &NetInput, tape: &mut Tape, du: &[f64], g: &mut [f64]) {
        let npos = self.window + 1;
        let e = self.embed;
        let last = self.trunk.len() - 1;
        tape.dacts[last + 1].copy_from_slice(du);
        for l in (0..=last).rev() {
            let (dlo, dhi) = tape.dacts.split_at_mut(l + 1);
            if l < last {
                for (d, a) in dhi[0].iter_mut().zip(&tape.acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            self.trunk[l].backward(p, &tape.acts[l], &dhi[0], g, Some(&mut dlo[l]));
        }
        match self.backbone {
            Backbone::WindowedMlp => {
                for (s, off) in self.pos_weights.iter().enumerate() {
                    let d = self.streams[s].dim;
                    let dz = &tape.dacts[0][s * e..(s + 1) * e];
                    for j in 0..npos {
                        if !self.active(&input.mask, s, j) {
                            continue;
                        }
                        let base = off + j * e;
                        let es = &tape.emb[s][j * e..(j + 1) * e];
                        for c in 0..e {
                            g[base + c] += dz[c] * es[c];
                            tape.de[c] = dz[c] * p[base + c];
                        }
                        self.embedders[s].backward(p, &input.feats[s][j * d..(j + 1) * d], &tape.de, g, None);
                    }
                }
            }
            Backbone::TinyCausalAttention => {
                let [wq, wk, wv] = self.attn.as_ref().expect("attention layers");
                let scale = 1.0 / math::sqrt(e as f64);
                let dcur = &tape.dacts[0][..e];
                let dctx = &tape.dacts[0][e..];
                // Softmax backward.
                let mut weighted = 0.0;
                for j in 0..npos {
                    if tape.alpha[j] != 0.0 {
                        let da = nn::dot(dctx, &tape.vals[j * e..(j + 1) * e]);
                        weighted += tape.alpha[j] * da;
                    }
                }
                tape.dq.fill(0.0);
                tape.dh.fill(0.0);
                for j in 0..npos {
                    if !self.pos_valid(&input.mask, j) {
                        continue;
                    }
                    let a = tape.alpha[j];
                    let da = nn::dot(dctx, &tape.vals[j * e..(j + 1) * e]);
                    let ds = a * (da - weighted) * scale;
                    nn::axpy(ds, &tape.keys[j * e..(j + 1) * e], &mut tape.dq);
                    let hj = &tape.h[j * e..(j + 1) * e];
                    // Key path.
                    for c in 0..e {
                        tape.de[c] = ds * tape.q[c];
                    }
                    wk.backward(p, hj, &tape.de, g, Some(&mut tape.tmp));
                    nn::axpy(1.0, &tape.tmp, &mut tape.dh[j * e..(j + 1) * e]);
                    // Value path.
                    for c in 0..e {
                        tape.de[c] = a * dctx[c];
                    }
                    wv.backward(p, hj, &tape.de, g, Some(&mut tape.tmp));
                    nn::axpy(1.0, &tape.tmp, &mut tape.dh[j * e..(j + 1) * e]);
                }
                let cur = self.window * e;
                wq.backward(p, &tape.h[cur..cur + e], &tape.dq, g, Some(&mut tape.tmp));
                nn::axpy(1.0, &tape.tmp, &mut tape.dh[cur..cur + e]);
                nn::axpy(1.0, dcur, &mut tape.dh[cur..cur + e]);
                for j in 0..npos {
                    if !self.pos_valid(&input.mask, j) {
                        continue;
                    }
                    let dhj = &tape.dh[j * e..(j + 1) * e];
                    nn::axpy(1.0, dhj, &mut g[self.pos_embed + j * e..self.pos_embed + (j + 1) * e]);
                    for s in 0..self.streams.len() {
                        if self.active(&input.mask, s, j) {
                            let d = self.streams[s].dim;
                            self.embedders[s].backward(p, &input.feats[s][j * d..(j + 1) * d], dhj, g, None);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
struct ModelFile {
    kind: ModelKind,
    config: ModelConfig,
    stats: FeatureStats,
    params: Vec<f64>,
}

/// A trained (or freshly initialized) model with its frozen normalization.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct SeqModel {
    kind: ModelKind,
    config: ModelConfig,
    stats: FeatureStats,
    pub params: Vec<f64>,
    net: SeqNet,
    heads: Vec<Head>,
}

impl TryFrom<ModelFile> for SeqModel {
    type Error = Error;
    fn try_from(f: ModelFile) -> Result<Self> {
        let mut m = SeqModel::with_params(f.kind, f.config, f.stats, Vec::new())?;
        if f.params.len() != m.net.num_params() {
            return Err(Error::DimensionMismatch { expected: m.net.num_params(), got: f.params.len() });
        }
        m.params = f.params;
        Ok(m)
    }
}

impl From<SeqModel> for ModelFile {
    fn from(m: SeqModel) -> Self {
        ModelFile { kind: m.kind, config: m.config, stats: m.stats, params: m.params }
    }
}

impl SeqModel {
    /// Fresh model with deterministic initialization from `seed`.
    pub fn new(kind: ModelKind, config: ModelConfig, stats: FeatureStats, seed: u64) -> Result<Self> {
        let mut m = Self::with_params(kind, config, stats, Vec::new())?;
        m.params = m.net.init(&mut rng_from_seed(seed));
        Ok(m)
    }

    fn with_params(kind: ModelKind, config: ModelConfig, stats: FeatureStats, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let dof = config.dof;
        for n in [&stats.x, &stats.v, &stats.f, &stats.dx, &stats.k] {
            if n.mean.len() != dof || n.std.len() != dof {
                return Err(Error::DimensionMismatch { expected: dof, got: n.mean.len() });
            }
        }
        let gains = Head {
            name: "k",
            kind: HeadKind::Bounded { lo: vec![config.k_min; dof], hi: vec![config.k_max; dof], std: stats.k.std.clone() },
        };
        let motion = Head {
            name: "dx",
            kind: HeadKind::Bounded {
                lo: config.dx_max.iter().map(|d| -d).collect(),
                hi: config.dx_max.clone(),
                std: stats.dx.std.clone(),
            },
        };
        let force = Head { name: "f", kind: HeadKind::Free { mean: stats.f.mean.clone(), std: stats.f.std.clone() } };
        let (streams, heads) = match kind {
            ModelKind::GainTuner => (
                vec![
                    StreamSpec { dim: 3 * dof, current: true },
                    StreamSpec { dim: dof, current: false },
                    StreamSpec { dim: dof, current: true },
                ],
                vec![gains],
            ),
            ModelKind::ForcePlanner => (
                vec![
                    StreamSpec { dim: 3 * dof, current: true },
                    StreamSpec { dim: 2 * dof, current: false },
                    StreamSpec { dim: 1, current: true },
                ],
                vec![motion, force],
            ),
            ModelKind::Joint => (
                vec![
                    StreamSpec { dim: 3 * dof, current: true },
                    StreamSpec { dim: 2 * dof, current: false },
                    StreamSpec { dim: 1, current: true },
                ],
                vec![motion, gains],
            ),
        };
        let out_dim = heads.iter().map(Head::dim).sum();
        let net = SeqNet::new(&config, streams, out_dim);
        Ok(SeqModel { kind, config, stats, params, net, heads })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn net(&self) -> &SeqNet {
        &self.net
    }

    pub fn head_names(&self) -> Vec<&'static str> {
        self.heads.iter().map(|h| h.name).collect()
    }

    pub fn out_dim(&self) -> usize {
        self.net.out_dim
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::usage(alloc::format!("expected a {} model, got {}", kind.name(), self.kind.name())));
        }
        Ok(())
    }

    /// Map raw outputs to physical units.
    pub fn decode(&self, u: &[f64], out: &mut [f64]) {
        let mut o = 0;
        for head in &self.heads {
            match &head.kind {
                HeadKind::Bounded { lo, hi, .. } => {
                    for i in 0..lo.len() {
                        out[o + i] = math::clamp(lo[i] + (hi[i] - lo[i]) * math::sigmoid(u[o + i]), lo[i], hi[i]);
                    }
                }
                HeadKind::Free { mean, std } => {
                    for i in 0..mean.len() {
                        out[o + i] = mean[i] + std[i] * u[o + i];
                    }
                }
            }
            o += head.dim();
        }
    }

    /// Map physical targets to the standardized units the loss is measured in.
    pub fn encode_target(&self, y: &[f64], out: &mut [f64]) {
        let mut o = 0;
        for head in &self.heads {
            match &head.kind {
                HeadKind::Bounded { lo, std, .. } => {
                    for i in 0..lo.len() {
                        out[o + i] = (y[o + i] - lo[i]) / std[i];
                    }
                }
                HeadKind::Free { mean, std } => {
                    for i in 0..mean.len() {
                        out[o + i] = (y[o + i] - mean[i]) / std[i];
                    }
                }
            }
            o += head.dim();
        }
    }

    /// Per-head squared error `‖ŷ − y‖²` in standardized units; writes `∂/∂u` scaled by `weight`.
    pub fn head_losses(&self, u: &[f64], target: &[f64], weight: f64, du: &mut [f64], losses: &mut [f64]) {
        let mut o = 0;
        for (h, head) in self.heads.iter().enumerate() {
            let mut sum = 0.0;
            for (j, i) in (o..o + head.dim()).enumerate() {
                let (pred, slope) = match &head.kind {
                    HeadKind::Bounded { lo, hi, std } => {
                        let s = math::sigmoid(u[i]);
                        let span = (hi[j] - lo[j]) / std[j];
                        (span * s, span * s * (1.0 - s))
                    }
                    HeadKind::Free { .. } => (u[i], 1.0),
                };
                let err = pred - target[i];
                sum += err * err;
                du[i] = weight * 2.0 * err * slope;
            }
            losses[h] = sum;
            o += head.dim();
        }
    }

    fn predict(&self, input: &NetInput) -> Result<Vec<f64>> {
        self.net.check_input(input)?;
        let mut tape = self.net.new_tape();
        let u = self.net.forward(&self.params, input, &mut tape);
        let mut out = vec![0.0; self.out_dim()];
        self.decode(u, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model output"));
        }
        Ok(out)
    }

    fn check_window(&self, len: usize) -> Result<()> {
        if len != self.config.window {
            return Err(Error::DimensionMismatch { expected: self.config.window, got: len });
        }
        Ok(())
    }

    pub fn gt_input(&self, window: &GtWindow, x: &Pose, v: &Twist, dx: &Pose, f_next: &Wrench, input: &mut NetInput) -> Result<()> {
        self.expect(ModelKind::GainTuner)?;
        self.check_window(window.len())?;
        check_dof(self.config.dof, &[x.as_slice(), v.as_slice(), dx.as_slice(), f_next.as_slice()])?;
        let st = &self.stats;
        let h = self.config.window;
        let d = self.config.dof;
        input.mask.copy_from_slice(&window.mask);
        for j in 0..=h {
            let (xs, vs, dxs, ks, fs) = if j < h {
                let s = &window.slots[j];
                (s.x.as_slice(), s.v.as_slice(), s.dx.as_slice(), Some(s.k.as_slice()), s.f_next.as_slice())
            } else {
                (x.as_slice(), v.as_slice(), dx.as_slice(), None, f_next.as_slice())
            };
            let valid = j == h || window.mask[j];
            let s0 = &mut input.feats[0][j * 3 * d..(j + 1) * 3 * d];
            put(&mut s0[..d], xs, &st.x, valid);
            put(&mut s0[d..2 * d], vs, &st.v, valid);
            put(&mut s0[2 * d..], dxs, &st.dx, valid);
            let s1 = &mut input.feats[1][j * d..(j + 1) * d];
            match ks {
                Some(k) => put(s1, k, &st.k, valid),
                None => s1.fill(0.0),
            }
            put(&mut input.feats[2][j * d..(j + 1) * d], fs, &st.f, valid);
        }
        Ok(())
    }

    /// Shared by the planner and the joint model; `act` is the per-slot second
    /// half of the extended action (planned force or gain) with its statistics.
    #[allow(clippy::too_many_arguments)]
    fn state_action_return_input(
        &self,
        window: &FpWindow,
        act: &dyn Fn(usize) -> Vector,
        act_stats: &Normalizer,
        x: &Pose,
        v: &Twist,
        f: &Wrench,
        ret: f64,
        input: &mut NetInput,
    ) -> Result<()> {
        self.check_window(window.len())?;
        check_dof(self.config.dof, &[x.as_slice(), v.as_slice(), f.as_slice()])?;
        if !ret.is_finite() {
            return Err(Error::NonFinite("return-to-go"));
        }
        let st = &self.stats;
        let h = self.config.window;
        let d = self.config.dof;
        input.mask.copy_from_slice(&window.mask);
        for j in 0..=h {
            let valid = j == h || window.mask[j];
            let (xs, vs, fs, r) = if j < h {
                let s = &window.slots[j];
                (s.x.as_slice(), s.v.as_slice(), s.f.as_slice(), s.ret)
            } else {
                (x.as_slice(), v.as_slice(), f.as_slice(), ret)
            };
            let s0 = &mut input.feats[0][j * 3 * d..(j + 1) * 3 * d];
            put(&mut s0[..d], xs, &st.x, valid);
            put(&mut s0[d..2 * d], vs, &st.v, valid);
            put(&mut s0[2 * d..], fs, &st.f, valid);
            let s1 = &mut input.feats[1][j * 2 * d..(j + 1) * 2 * d];
            if j < h && valid {
                put(&mut s1[..d], window.slots[j].dx.as_slice(), &st.dx, true);
                put(&mut s1[d..], act(j).as_slice(), act_stats, true);
            } else {
                s1.fill(0.0);
            }
            put(&mut input.feats[2][j..j + 1], &[r], &st.ret, valid);
        }
        Ok(())
    }

    pub fn fp_input(&self, window: &FpWindow, x: &Pose, v: &Twist, f: &Wrench, ret: f64, input: &mut NetInput) -> Result<()> {
        self.expect(ModelKind::ForcePlanner)?;
        let forces = |j: usize| window.slots[j].f_next.0;
        self.state_action_return_input(window, &forces, &self.stats.f, x, v, f, ret, input)
    }

    /// The joint model reads gains from the gain-tuner window and everything
    /// else from the planner window of the same step.
    #[allow(clippy::too_many_arguments)]
    pub fn joint_input(&self, gt: &GtWindow, fp: &FpWindow, x: &Pose, v: &Twist, f: &Wrench, ret: f64, input: &mut NetInput) -> Result<()> {
        self.expect(ModelKind::Joint)?;
        if gt.len() != fp.len() {
            return Err(Error::DimensionMismatch { expected: fp.len(), got: gt.len() });
        }
        let gains = |j: usize| gt.slots[j].k;
        self.state_action_return_input(fp, &gains, &self.stats.k, x, v, f, ret, input)
    }

    /// Normalized inputs and physical targets for one dataset row.
    pub fn example(&self, dataset: &Dataset, row: &DatasetRow, input: &mut NetInput, target: &mut [f64]) -> Result<()> {
        let traj = &dataset.trajectories[row.traj];
        let t = row.t;
        let (gtw, fpw) = dataset.windows(row, self.config.window)?;
        let d = self.config.dof;
        match self.kind {
            ModelKind::GainTuner => {
                self.gt_input(&gtw, &traj.x[t], &traj.v[t], &traj.dx[t], &row.f_next, input)?;
                target[..d].copy_from_slice(traj.k[t].as_slice());
            }
            ModelKind::ForcePlanner => {
                self.fp_input(&fpw, &traj.x[t], &traj.v[t], &traj.f[t], row.ret, input)?;
                target[..d].copy_from_slice(traj.dx[t].as_slice());
                target[d..2 * d].copy_from_slice(row.f_next.as_slice());
            }
            ModelKind::Joint => {
                self.joint_input(&gtw, &fpw, &traj.x[t], &traj.v[t], &traj.f[t], row.ret, input)?;
                target[..d].copy_from_slice(traj.dx[t].as_slice());
                target[d..2 * d].copy_from_slice(traj.k[t].as_slice());
            }
        }
        Ok(())
    }

    /// Mean per-head losses (normalized units) over the given rows.
    pub fn dataset_loss(&self, dataset: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        let mut scratch = Scratch::new(self);
        let mut total = vec![0.0; self.heads.len()];
        for &r in rows {
            scratch.forward_row(self, dataset, r)?;
            nn::axpy(1.0, &scratch.losses, &mut total);
        }
        let n = rows.len().max(1) as f64;
        total.iter_mut().for_each(|l| *l /= n);
        Ok(total)
    }
}

fn check_dof(dof: usize, parts: &[&[f64]]) -> Result<()> {
    for p in parts {
        if p.len() != dof {
            return Err(Error::DimensionMismatch { expected: dof, got: p.len() });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }
    }
    Ok(())
}

#[inline]
fn put(dst: &mut [f64], src: &[f64], norm: &Normalizer, valid: bool) {
    for i in 0..dst.len() {
        dst[i] = if valid { norm.apply(i, src[i]) } else { 0.0 };
    }
}

/// Gain tuner prediction `k̂_t` in `[k_min, k_max]`.
pub fn gt_forward(model: &SeqModel, window: &GtWindow, x: &Pose, v: &Twist, dx: &Pose, f_next: &Wrench) -> Result<Vector> {
    let mut input = model.net.new_input();
    model.gt_input(window, x, v, dx, f_next, &mut input)?;
    Vector::from_slice(&model.predict(&input)?)
}

/// Force planner prediction `(Δx̂_t, f̂^d_{t+1})`.
pub fn fp_forward(model: &SeqModel, window: &FpWindow, x: &Pose, v: &Twist, f: &Wrench, ret: f64) -> Result<(Pose, Wrench)> {
    let mut input = model.net.new_input();
    model.fp_input(window, x, v, f, ret, &mut input)?;
    let out = model.predict(&input)?;
    let d = model.config.dof;
    Ok((Pose::from_slice(&out[..d])?, Wrench::from_slice(&out[d..])?))
}

/// Joint baseline prediction `(Δx̂_t, k̂_t)`.
#[allow(clippy::too_many_arguments)]
pub fn joint_forward(model: &SeqModel, gt: &GtWindow, fp: &FpWindow, x: &Pose, v: &Twist, f: &Wrench, ret: f64) -> Result<(Pose, Vector)> {
    let mut input = model.net.new_input();
    model.joint_input(gt, fp, x, v, f, ret, &mut input)?;
    let out = model.predict(&input)?;
    let d = model.config.dof;
    Ok((Pose::from_slice(&out[..d])?, Vector::from_slice(&out[d..])?))
}

/// Per-sample buffers for loss evaluation and training.
#[derive(Clone, Debug)]
struct Scratch {
    input: NetInput,
    tape: Tape,
    target: Vec<f64>,
    target_n: Vec<f64>,
    du: Vec<f64>,
    losses: Vec<f64>,
}

impl Scratch {
    fn new(model: &SeqModel) -> Self {
        Scratch {
            input: model.net.new_input(),
            tape: model.net.new_tape(),
            target: vec![0.0; model.out_dim()],
            target_n: vec![0.0; model.out_dim()],
            du: vec![0.0; model.out_dim()],
            losses: vec![0.0; model.heads.len()],
        }
    }

    fn forward_row(&mut self, model: &SeqModel, dataset: &Dataset, row: usize) -> Result<()> {
        let row = dataset.rows.get(row).ok_or_else(|| Error::usage("dataset row out of range"))?;
        model.example(dataset, row, &mut self.input, &mut self.target)?;
        model.encode_target(&self.target, &mut self.target_n);
        let u = model.net.forward(&model.params, &self.input, &mut self.tape);
        model.head_losses(u, &self.target_n, 1.0, &mut self.du, &mut self.losses);
        Ok(())
    }
}

/// Loss and gradient summary of one model for one update.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ModelReport {
    pub kind: ModelKind,
    /// Sum of the head losses.
    pub loss: f64,
    pub head_losses: Vec<f64>,
    pub grad_norm: f64,
}

/// One training update across all models being trained.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub step: u64,
    pub models: Vec<ModelReport>,
    /// Seconds since training started, as reported by [`TrainHooks::now`].
    pub wall_time: f64,
}

impl TrainReport {
    pub fn loss(&self, kind: ModelKind) -> Option<f64> {
        self.models.iter().find(|m| m.kind == kind).map(|m| m.loss)
    }

    pub fn loss_gt(&self) -> Option<f64> {
        self.loss(ModelKind::GainTuner)
    }

    pub fn loss_fp(&self) -> Option<f64> {
        self.loss(ModelKind::ForcePlanner)
    }
}

/// A model with its optimizer state and gradient buffers.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: SeqModel,
    pub opt: Adam,
    grads: Vec<f64>,
    scratch: Scratch,
}

impl Learner {
    pub fn new(model: SeqModel, lr: f64) -> Self {
        let n = model.params.len();
        let scratch = Scratch::new(&model);
        Learner { model, opt: Adam::new(n, lr), grads: vec![0.0; n], scratch }
    }

    pub fn into_model(self) -> SeqModel {
        self.model
    }

    /// Gradient of the batch-mean loss, without updating parameters.
    pub fn gradient(&mut self, dataset: &Dataset, rows: &[usize]) -> Result<ModelReport> {
        if rows.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        self.grads.fill(0.0);
        let w = 1.0 / rows.len() as f64;
        let mut head_losses = vec![0.0; self.model.heads.len()];
        for &r in rows {
            let s = &mut self.scratch;
            let row = dataset.rows.get(r).ok_or_else(|| Error::usage("dataset row out of range"))?;
            self.model.example(dataset, row, &mut s.input, &mut s.target)?;
            self.model.encode_target(&s.target, &mut s.target_n);
            let u = self.model.net.forward(&self.model.params, &s.input, &mut s.tape);
            self.model.head_losses(u, &s.target_n, w, &mut s.du, &mut s.losses);
            nn::axpy(w, &s.losses, &mut head_losses);
            self.model.net.backward(&self.model.params, &s.input, &mut s.tape, &s.du, &mut self.grads);
        }
        Ok(ModelReport {
            kind: self.model.kind,
            loss: head_losses.iter().sum(),
            head_losses,
            grad_norm: nn::norm(&self.grads),
        })
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    /// One Adam update on the batch.
    pub fn step(&mut self, dataset: &Dataset, rows: &[usize], step: u64) -> Result<ModelReport> {
        let report = self.gradient(dataset, rows)?;
        if !report.loss.is_finite() || !report.grad_norm.is_finite() {
            return Err(Error::NanLoss { step, what: self.model.kind.name() });
        }
        self.opt.step(&mut self.model.params, &self.grads);
        Ok(report)
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Emit a report every this many steps (and after the last one).
    pub log_every: u64,
    /// Call the checkpoint hook every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 20_000, batch_size: 64, lr: 5e-4, seed: 0, log_every: 500, checkpoint_every: 5_000 }
    }
}

/// Observation points of a training run; every method has a no-op default.
pub trait TrainHooks {
    /// Elapsed seconds; the core crate has no clock of its own.
    fn now(&self) -> f64 {
        0.0
    }

    /// Called at every logging step with the models after that step's update.
    fn on_report(&mut self, _report: &TrainReport, _models: &[&SeqModel]) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: u64, _models: &[&SeqModel]) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// One update of every learner on the same batch.
pub fn train_step(learners: &mut [Learner], dataset: &Dataset, rows: &[usize], step: u64) -> Result<TrainReport> {
    let mut models = Vec::with_capacity(learners.len());
    for l in learners.iter_mut() {
        models.push(l.step(dataset, rows, step)?);
    }
    Ok(TrainReport { step, models, wall_time: 0.0 })
}

/// Uniform batch sampling with replacement, deterministic in `config.seed`.
pub fn train(learners: &mut [Learner], dataset: &Dataset, config: &TrainConfig, hooks: &mut dyn TrainHooks) -> Result<Vec<TrainReport>> {
    if dataset.is_empty() {
        return Err(Error::usage("cannot train on an empty dataset"));
    }
    if config.batch_size == 0 {
        return Err(Error::usage("batch_size must be positive"));
    }
    for l in learners.iter_mut() {
        l.opt.lr = config.lr;
    }
    let mut rng = rng_from_seed(config.seed);
    let mut batch = vec![0usize; config.batch_size];
    let mut reports = Vec::new();
    for step in 0..config.steps {
        for b in batch.iter_mut() {
            *b = rng.random_range(0..dataset.len());
        }
        let mut report = train_step(learners, dataset, &batch, step)?;
        let done = step + 1;
        if done % config.log_every.max(1) == 0 || done == config.steps {
            report.wall_time = hooks.now();
            let models: Vec<&SeqModel> = learners.iter().map(|l| &l.model).collect();
            hooks.on_report(&report, &models)?;
            reports.push(report);
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done != config.steps {
            let models: Vec<&SeqModel> = learners.iter().map(|l| &l.model).collect();
            hooks.on_checkpoint(done, &models)?;
        }
    }
    Ok(reports)
}

/// Fresh gain tuner and force planner sharing statistics fitted on `dataset`.
pub fn init_gt_fp(dataset: &Dataset, model: &ModelConfig, seed: u64) -> Result<(SeqModel, SeqModel)> {
    let stats = FeatureStats::fit(dataset)?;
    let gt = SeqModel::new(ModelKind::GainTuner, model.clone(), stats.clone(), seed ^ 0x6774)?;
    let fp = SeqModel::new(ModelKind::ForcePlanner, model.clone(), stats, seed ^ 0x6670)?;
    Ok((gt, fp))
}

/// Train a gain tuner and force planner together from fresh initializations.
pub fn train_gt_fp(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<(SeqModel, SeqModel, Vec<TrainReport>)> {
    let (gt, fp) = init_gt_fp(dataset, model, config.seed)?;
    let mut learners = [Learner::new(gt, config.lr), Learner::new(fp, config.lr)];
    let reports = train(&mut learners, dataset, config, hooks)?;
    let [gt, fp] = learners;
    Ok((gt.into_model(), fp.into_model(), reports))
}

/// Every `stride`-th row index, used for cheap held-out loss estimates.
pub fn strided_rows(dataset: &Dataset, max_rows: usize) -> Vec<usize> {
    let n = dataset.len();
    if n == 0 || max_rows == 0 {
        return Vec::new();
    }
    let stride = n.div_ceil(max_rows).max(1);
    (0..n).step_by(stride).collect()
}

/// Display name of a head, used in loss-curve columns.
pub fn head_label(kind: ModelKind, head: &str) -> String {
    alloc::format!("{}_{}", kind.name(), head)
}
