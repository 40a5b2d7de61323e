//! Event-independent track-wise network.
//!
//! Two convolutional branches with independent weights: the SED branch sees
//! the four log-mel channels, the DoA branch all seven feature channels.
//! Each block is conv3x3-BN-ReLU-conv3x3-BN-ReLU-avgpool; the first block
//! also pools time so the output runs at the label rate. Frequency is then
//! averaged out and three bidirectional GRU stacks produce the heads:
//!
//! * SED: `n_track x (n_cla + 1)` logits (the last class is silence),
//! * DoA: `n_track x 2` raw (azimuth, elevation) radians,
//! * EAD: `n_track` activity logits from a GRU over the concatenated SED and
//!   DoA embeddings.

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BatchStats, DType, Float, Graph, Var};
use crate::features::{FeatureTensor, N_FEATURE_CHANNELS};

/// Number of log-mel channels consumed by the SED branch.
pub const N_LOGMEL_CHANNELS: usize = 4;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input geometry mismatch: {0}")]
    Geometry(String),
    #[error("no graph was recorded for this forward pass (evaluation mode)")]
    GraphNotRecorded,
    #[error("gradient shape mismatch: {0}")]
    GradientShape(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_cla: usize,
    pub n_track: usize,
    pub n_mels: usize,
    pub conv_channels: Vec<usize>,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub time_pool: usize,
    pub freq_pool: usize,
    pub precision: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_cla: 3,
            n_track: 2,
            n_mels: 64,
            conv_channels: vec![16, 32, 64, 128],
            gru_hidden: 64,
            gru_layers: 2,
            time_pool: 5,
            freq_pool: 2,
            precision: DType::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_cla == 0 {
            return fail("n_cla must be at least 1");
        }
        if self.n_track < 2 {
            return fail("n_track must be at least 2");
        }
        if self.n_mels == 0 {
            return fail("n_mels must be positive");
        }
        if self.conv_channels.is_empty() {
            return fail("at least one convolutional block is required");
        }
        if self.conv_channels.contains(&0) {
            return fail("convolution widths must be positive");
        }
        if self.gru_hidden == 0 || self.gru_layers == 0 {
            return fail("recurrent stack needs a positive hidden size and at least one layer");
        }
        if self.time_pool == 0 || self.freq_pool == 0 {
            return fail("pooling factors must be positive");
        }
        Ok(())
    }

    /// Output frames for `stft_frames` input frames.
    pub fn output_frames(&self, stft_frames: usize) -> usize {
        stft_frames.div_ceil(self.time_pool)
    }

    fn n_sed(&self) -> usize {
        self.n_cla + 1
    }
}

/// Per-frame, per-track network outputs for one clip, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutputs {
    /// `[T, n_track, n_cla + 1]`.
    pub sed_logits: Array3<f64>,
    /// `[T, n_track]`; probabilities are `sigmoid(ead_logits)`.
    pub ead_logits: Array2<f64>,
    /// `[T, n_track, 2]` azimuth and elevation in radians.
    pub doa: Array3<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl TrackOutputs {
    pub fn zeros(n_frames: usize, n_track: usize, n_cla: usize) -> Self {
        Self {
            sed_logits: Array3::zeros((n_frames, n_track, n_cla + 1)),
            ead_logits: Array2::zeros((n_frames, n_track)),
            doa: Array3::zeros((n_frames, n_track, 2)),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.sed_logits.shape()[0]
    }

    pub fn n_track(&self) -> usize {
        self.sed_logits.shape()[1]
    }

    pub fn n_cla(&self) -> usize {
        self.sed_logits.shape()[2] - 1
    }

    /// Activity probability, clamped into the open unit interval.
    pub fn ead_prob(&self, frame: usize, track: usize) -> f64 {
        sigmoid(self.ead_logits[[frame, track]]).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
    }

    pub fn sed_softmax(&self, frame: usize, track: usize) -> Vec<f64> {
        let row = self.sed_logits.slice(s![frame, track, ..]);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }
}

/// Gradients of a scalar objective with respect to [`TrackOutputs`].
pub type OutputGrads = TrackOutputs;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, graph recorded for backward.
    Train,
    /// Running statistics, nothing recorded, no state touched.
    Eval,
}

#[derive(Debug, Clone)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: usize,
    bn1: BnLayer,
    conv2: usize,
    bn2: BnLayer,
}

#[derive(Debug, Clone)]
struct GruDir {
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
}

#[derive(Debug, Clone)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    sed_in_bn: BnLayer,
    doa_in_bn: BnLayer,
    sed_conv: Vec<ConvBlock>,
    doa_conv: Vec<ConvBlock>,
    sed_gru: Vec<[GruDir; 2]>,
    doa_gru: Vec<[GruDir; 2]>,
    ead_gru: Vec<[GruDir; 2]>,
    sed_fc: Dense,
    doa_fc: Dense,
    ead_fc: Dense,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `+-sqrt(6 / fan_in)`, for convolutions followed by ReLU.
    He(usize),
    /// Uniform in `+-1 / sqrt(fan_in)`.
    Uniform(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    stat_names: Vec<(String, usize)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnLayer {
        let gamma = self.add(format!("{prefix}.gamma"), &[c], Init::Ones);
        let beta = self.add(format!("{prefix}.beta"), &[c], Init::Zeros);
        self.stat_names.push((prefix.to_string(), c));
        BnLayer {
            gamma,
            beta,
            stats: self.stat_names.len() - 1,
        }
    }

    fn conv_stack(&mut self, prefix: &str, in_ch: usize, widths: &[usize]) -> Vec<ConvBlock> {
        let mut c_in = in_ch;
        widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let p = format!("{prefix}.block{i}");
                let conv1 = self.add(format!("{p}.conv1.weight"), &[c, c_in, 3, 3], Init::He(c_in * 9));
                let bn1 = self.bn(&format!("{p}.bn1"), c);
                let conv2 = self.add(format!("{p}.conv2.weight"), &[c, c, 3, 3], Init::He(c * 9));
                let bn2 = self.bn(&format!("{p}.bn2"), c);
                c_in = c;
                ConvBlock {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                }
            })
            .collect()
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize, layers: usize) -> Vec<[GruDir; 2]> {
        let mut d = input;
        (0..layers)
            .map(|l| {
                let mut dir = |name: &str| {
                    let p = format!("{prefix}.layer{l}.{name}");
                    GruDir {
                        w_ih: self.add(format!("{p}.w_ih"), &[d, 3 * hidden], Init::Uniform(hidden)),
                        w_hh: self.add(format!("{p}.w_hh"), &[hidden, 3 * hidden], Init::Uniform(hidden)),
                        b_ih: self.add(format!("{p}.b_ih"), &[3 * hidden], Init::Uniform(hidden)),
                        b_hh: self.add(format!("{p}.b_hh"), &[3 * hidden], Init::Uniform(hidden)),
                    }
                };
                let pair = [dir("fwd"), dir("bwd")];
                d = 2 * hidden;
                pair
            })
            .collect()
    }

    fn dense(&mut self, prefix: &str, input: usize, output: usize) -> Dense {
        Dense {
            w: self.add(format!("{prefix}.weight"), &[input, output], Init::Uniform(input)),
            b: self.add(format!("{prefix}.bias"), &[output], Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, LayoutBuilder) {
    let mut b = LayoutBuilder::default();
    let emb = *cfg.conv_channels.last().expect("validated non-empty");
    let h = cfg.gru_hidden;
    let layout = Layout {
        sed_in_bn: b.bn("sed.input_bn", N_LOGMEL_CHANNELS),
        doa_in_bn: b.bn("doa.input_bn", N_FEATURE_CHANNELS),
        sed_conv: b.conv_stack("sed.conv", N_LOGMEL_CHANNELS, &cfg.conv_channels),
        doa_conv: b.conv_stack("doa.conv", N_FEATURE_CHANNELS, &cfg.conv_channels),
        sed_gru: b.gru("sed.gru", emb, h, cfg.gru_layers),
        doa_gru: b.gru("doa.gru", emb, h, cfg.gru_layers),
        ead_gru: b.gru("ead.gru", 2 * emb, h, cfg.gru_layers),
        sed_fc: b.dense("sed.fc", 2 * h, cfg.n_track * cfg.n_sed()),
        doa_fc: b.dense("doa.fc", 2 * h, cfg.n_track * 2),
        ead_fc: b.dense("ead.fc", 2 * h, cfg.n_track),
    };
    (layout, b)
}

/// Batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub name: String,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Network parameters and running statistics.
#[derive(Debug, Clone)]
pub struct Model<F: Float> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<ArrayD<F>>,
    stats: Vec<RunningStats<F>>,
}

/// One parameter gradient per parameter slot, in slot order.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub tensors: Vec<ArrayD<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn scaled(mut self, k: F) -> Self {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * k);
        }
        self
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Result of [`Model::forward`].
pub struct ForwardPass<F: Float> {
    pub outputs: Vec<TrackOutputs>,
    graph: Option<Graph<F>>,
    heads: Option<[Var; 3]>,
    batch_stats: Vec<(usize, BatchStats)>,
}

impl<F: Float> ForwardPass<F> {
    pub fn is_recorded(&self) -> bool {
        self.graph.is_some()
    }
}

impl<F: Float> Model<F> {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = builder
            .specs
            .iter()
            .map(|spec| {
                let shape = IxDyn(&spec.shape);
                match spec.init {
                    Init::Zeros => ArrayD::zeros(shape),
                    Init::Ones => ArrayD::ones(shape),
                    Init::He(fan_in) | Init::Uniform(fan_in) => {
                        let bound = match spec.init {
                            Init::He(_) => (6.0 / fan_in as f64).sqrt(),
                            _ => 1.0 / (fan_in as f64).sqrt(),
                        };
                        ArrayD::from_shape_simple_fn(shape, || F::of(rng.random_range(-bound..bound)))
                    }
                }
            })
            .collect();
        let stats = builder
            .stat_names
            .iter()
            .map(|(name, c)| RunningStats {
                name: name.clone(),
                mean: vec![F::zero(); *c],
                var: vec![F::one(); *c],
            })
            .collect();
        Ok(Self {
            names: builder.specs.iter().map(|s| s.name.clone()).collect(),
            config,
            layout,
            params,
            stats,
        })
    }

    /// Rebuilds a model from named tensors, e.g. a checkpoint.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<(String, ArrayD<F>)>,
        stats: Vec<RunningStats<F>>,
    ) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if params.len() != model.params.len() || stats.len() != model.stats.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters and {} statistics, got {} and {}",
                model.params.len(),
                model.stats.len(),
                params.len(),
                stats.len()
            )));
        }
        for (slot, (name, value)) in params.into_iter().enumerate() {
            if name != model.names[slot] || value.shape() != model.params[slot].shape() {
                return Err(ModelError::Config(format!(
                    "parameter {slot}: expected {} {:?}, got {name} {:?}",
                    model.names[slot],
                    model.params[slot].shape(),
                    value.shape()
                )));
            }
            model.params[slot] = value;
        }
        for (slot, st) in stats.into_iter().enumerate() {
            let want = &model.stats[slot];
            if st.name != want.name || st.mean.len() != want.mean.len() || st.var.len() != want.var.len() {
                return Err(ModelError::Config(format!("statistics {slot} ({}) do not match", st.name)));
            }
            model.stats[slot] = st;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[ArrayD<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ArrayD<F>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<F>] {
        &self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Stacks feature tensors into an `[N, 7, T, K]` batch.
    pub fn batch_input(&self, features: &[&FeatureTensor]) -> Result<Array4<F>> {
        let first = features
            .first()
            .ok_or_else(|| ModelError::Geometry("empty batch".into()))?;
        let (t, k) = (first.n_frames(), first.n_mels());
        if k != self.config.n_mels {
            return Err(ModelError::Geometry(format!(
                "features have {k} mel bins, model expects {}",
                self.config.n_mels
            )));
        }
        if t == 0 {
            return Err(ModelError::Geometry("features have no frames".into()));
        }
        let mut out = Array4::<F>::zeros((features.len(), N_FEATURE_CHANNELS, t, k));
        for (i, f) in features.iter().enumerate() {
            if f.n_frames() != t || f.n_mels() != k {
                return Err(ModelError::Geometry(format!(
                    "batch item {i} is {}x{}, expected {t}x{k}",
                    f.n_frames(),
                    f.n_mels()
                )));
            }
            out.index_axis_mut(Axis(0), i)
                .zip_mut_with(f.data(), |o, &v| *o = F::of(v as f64));
        }
        Ok(out)
    }

    pub fn forward(&self, features: &[&FeatureTensor], mode: Mode) -> Result<ForwardPass<F>> {
        let input = self.batch_input(features)?;
        self.forward_array(input, mode)
    }

    /// Forward pass on a raw `[N, 7, T, n_mels]` array.
    pub fn forward_array(&self, input: Array4<F>, mode: Mode) -> Result<ForwardPass<F>> {
        let (n, c, t, k) = input.dim();
        if c != N_FEATURE_CHANNELS || k != self.config.n_mels || t == 0 || n == 0 {
            return Err(ModelError::Geometry(format!(
                "input {:?}, expected [N, {N_FEATURE_CHANNELS}, T, {}]",
                input.dim(),
                self.config.n_mels
            )));
        }
        let mut g = Graph::<F>::new(self.params.len());
        let p: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, v)| g.param(i, v.clone()))
            .collect();
        let x = g.input(input.into_dyn());
        let mut batch_stats = Vec::new();
        let cfg = &self.config;

        let sed_in = g.channels(x, 0, N_LOGMEL_CHANNELS);
        let l = &self.layout;
        let sed_emb = self.conv_branch(&mut g, &p, sed_in, &l.sed_in_bn, &l.sed_conv, mode, &mut batch_stats);
        let doa_emb = self.conv_branch(&mut g, &p, x, &l.doa_in_bn, &l.doa_conv, mode, &mut batch_stats);
        let t_out = g.value(sed_emb).shape()[0] / n;

        let sed_seq = self.bigru(&mut g, &p, sed_emb, n, t_out, &self.layout.sed_gru);
        let doa_seq = self.bigru(&mut g, &p, doa_emb, n, t_out, &self.layout.doa_gru);
        let joint = g.concat_cols(&[sed_emb, doa_emb]);
        let ead_seq = self.bigru(&mut g, &p, joint, n, t_out, &self.layout.ead_gru);

        let sed = g.linear(sed_seq, p[l.sed_fc.w], p[l.sed_fc.b]);
        let ead = g.linear(ead_seq, p[l.ead_fc.w], p[l.ead_fc.b]);
        let doa = g.linear(doa_seq, p[l.doa_fc.w], p[l.doa_fc.b]);

        let outputs = (0..n)
            .map(|b| {
                let sv = g.value(sed);
                let ev = g.value(ead);
                let dv = g.value(doa);
                TrackOutputs {
                    sed_logits: Array3::from_shape_fn((t_out, cfg.n_track, cfg.n_sed()), |(ti, tr, c)| {
                        sv[[ti * n + b, tr * cfg.n_sed() + c]].f64()
                    }),
                    ead_logits: Array2::from_shape_fn((t_out, cfg.n_track), |(ti, tr)| ev[[ti * n + b, tr]].f64()),
                    doa: Array3::from_shape_fn((t_out, cfg.n_track, 2), |(ti, tr, a)| {
                        dv[[ti * n + b, tr * 2 + a]].f64()
                    }),
                }
            })
            .collect();

        Ok(match mode {
            Mode::Train => ForwardPass {
                outputs,
                graph: Some(g),
                heads: Some([sed, ead, doa]),
                batch_stats,
            },
            Mode::Eval => ForwardPass {
                outputs,
                graph: None,
                heads: None,
                batch_stats: Vec::new(),
            },
        })
    }

    fn batch_norm(
        &self,
        g: &mut Graph<F>,
        p: &[Var],
        x: Var,
        bn: &BnLayer,
        mode: Mode,
        batch_stats: &mut Vec<(usize, BatchStats)>,
    ) -> Var {
        let st = &self.stats[bn.stats];
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((st.mean.as_slice(), st.var.as_slice())),
        };
        let (y, stats) = g.batch_norm(x, p[bn.gamma], p[bn.beta], running);
        if let Some(stats) = stats {
            batch_stats.push((bn.stats, stats));
        }
        y
    }

    /// Input batch norm, then the conv blocks, then the mean over frequency.
    #[allow(clippy::too_many_arguments)]
    fn conv_branch(
        &self,
        g: &mut Graph<F>,
        p: &[Var],
        x: Var,
        input_bn: &BnLayer,
        blocks: &[ConvBlock],
        mode: Mode,
        batch_stats: &mut Vec<(usize, BatchStats)>,
    ) -> Var {
        let mut h = self.batch_norm(g, p, x, input_bn, mode, batch_stats);
        for (i, blk) in blocks.iter().enumerate() {
            for (conv, bn) in [(blk.conv1, &blk.bn1), (blk.conv2, &blk.bn2)] {
                h = g.conv3x3(h, p[conv]);
                let y = self.batch_norm(g, p, h, bn, mode, batch_stats);
                h = g.relu(y);
            }
            let kt = if i == 0 { self.config.time_pool } else { 1 };
            h = g.avg_pool(h, kt, self.config.freq_pool);
        }
        g.freq_mean(h)
    }

    fn bigru(&self, g: &mut Graph<F>, p: &[Var], x: Var, n: usize, t: usize, layers: &[[GruDir; 2]]) -> Var {
        let mut h = x;
        for [fwd, bwd] in layers {
            let f = self.gru_direction(g, p, h, n, t, fwd, false);
            let b = self.gru_direction(g, p, h, n, t, bwd, true);
            h = g.concat_cols(&[f, b]);
        }
        h
    }

    /// Standard GRU cell: `r = s(x Wr + h Ur)`, `z = s(x Wz + h Uz)`,
    /// `n = tanh(x Wn + r * (h Un))`, `h' = (1 - z) n + z h`.
    #[allow(clippy::too_many_arguments)]
    fn gru_direction(&self, g: &mut Graph<F>, p: &[Var], x: Var, n: usize, t: usize, d: &GruDir, reverse: bool) -> Var {
        let hid = self.config.gru_hidden;
        let gx = g.linear(x, p[d.w_ih], p[d.b_ih]);
        let mut h = g.input(ArrayD::zeros(IxDyn(&[n, hid])));
        let mut outs = vec![h; t];
        let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in steps {
            let gxt = g.slice_rows(gx, step * n, n);
            let gh = g.linear(h, p[d.w_hh], p[d.b_hh]);
            let xr = g.slice_cols(gxt, 0, hid);
            let hr = g.slice_cols(gh, 0, hid);
            let r_in = g.add(xr, hr);
            let r = g.sigmoid(r_in);
            let xz = g.slice_cols(gxt, hid, hid);
            let hz = g.slice_cols(gh, hid, hid);
            let z_in = g.add(xz, hz);
            let z = g.sigmoid(z_in);
            let xn = g.slice_cols(gxt, 2 * hid, hid);
            let hn = g.slice_cols(gh, 2 * hid, hid);
            let rhn = g.mul(r, hn);
            let n_in = g.add(xn, rhn);
            let cand = g.tanh(n_in);
            let diff = g.sub(h, cand);
            let zd = g.mul(z, diff);
            h = g.add(cand, zd);
            outs[step] = h;
        }
        g.concat_rows(&outs)
    }

    /// Backpropagates output gradients through a recorded training pass.
    pub fn backward(&self, pass: &ForwardPass<F>, grads: &[OutputGrads]) -> Result<Gradients<F>> {
        let (graph, heads) = match (&pass.graph, &pass.heads) {
            (Some(g), Some(h)) => (g, h),
            _ => return Err(ModelError::GraphNotRecorded),
        };
        let n = pass.outputs.len();
        if grads.len() != n {
            return Err(ModelError::GradientShape(format!("{} gradient sets for a batch of {n}", grads.len())));
        }
        for (gr, out) in grads.iter().zip(&pass.outputs) {
            if gr.sed_logits.dim() != out.sed_logits.dim()
                || gr.ead_logits.dim() != out.ead_logits.dim()
                || gr.doa.dim() != out.doa.dim()
            {
                return Err(ModelError::GradientShape("output gradient shapes differ from outputs".into()));
            }
        }
        let cfg = &self.config;
        let t = pass.outputs[0].n_frames();
        let sed = Array2::from_shape_fn((t * n, cfg.n_track * cfg.n_sed()), |(row, col)| {
            F::of(grads[row % n].sed_logits[[row / n, col / cfg.n_sed(), col % cfg.n_sed()]])
        });
        let ead = Array2::from_shape_fn((t * n, cfg.n_track), |(row, col)| {
            F::of(grads[row % n].ead_logits[[row / n, col]])
        });
        let doa = Array2::from_shape_fn((t * n, cfg.n_track * 2), |(row, col)| {
            F::of(grads[row % n].doa[[row / n, col / 2, col % 2]])
        });
        let seeds = vec![
            (heads[0], sed.into_dyn()),
            (heads[1], ead.into_dyn()),
            (heads[2], doa.into_dyn()),
        ];
        let tensors = graph
            .backward(seeds)
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| ArrayD::zeros(p.raw_dim())))
            .collect();
        Ok(Gradients { tensors })
    }

    /// Folds the batch statistics of a training pass into the running
    /// averages (momentum 0.1, unbiased variance).
    pub fn commit_batch_stats(&mut self, pass: &ForwardPass<F>) {
        let m = BN_MOMENTUM;
        for (slot, st) in &pass.batch_stats {
            let run = &mut self.stats[*slot];
            let correction = if st.count > 1 {
                st.count as f64 / (st.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..run.mean.len() {
                run.mean[c] = F::of((1.0 - m) * run.mean[c].f64() + m * st.mean[c]);
                run.var[c] = F::of((1.0 - m) * run.var[c].f64() + m * st.var[c] * correction);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureTensor;
    use ndarray::Array3 as A3;
    use proptest::prelude::*;
    use rand::Rng;

    fn features(t: usize, k: usize, seed: u64) -> FeatureTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureTensor::new(
            A3::from_shape_simple_fn((7, t, k), || rng.random_range(-1.0f32..1.0)),
            24_000,
        )
        .unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_cla: 2,
            n_mels: 8,
            conv_channels: vec![3, 4],
            gru_hidden: 3,
            ..Default::default()
        }
    }

    /// Independent hand count of every layer's parameters.
    fn closed_form_count(cfg: &ModelConfig) -> usize {
        let conv = |c_in: usize| {
            let mut total = 0;
            let mut prev = c_in;
            for &c in &cfg.conv_channels {
                total += prev * c * 9 + c * c * 9 + 2 * (2 * c);
                prev = c;
            }
            total
        };
        let h = cfg.gru_hidden;
        let gru = |d_in: usize| {
            (0..cfg.gru_layers)
                .map(|l| {
                    let d = if l == 0 { d_in } else { 2 * h };
                    2 * (3 * h * d + 3 * h * h + 6 * h)
                })
                .sum::<usize>()
        };
        let emb = *cfg.conv_channels.last().unwrap();
        let fc = |out: usize| 2 * h * out + out;
        // Input batch norms: gamma and beta per feature channel.
        2 * 4 + 2 * 7
            + conv(4)
            + conv(7)
            + gru(emb)
            + gru(emb)
            + gru(2 * emb)
            + fc(cfg.n_track * (cfg.n_cla + 1))
            + fc(cfg.n_track * 2)
            + fc(cfg.n_track)
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        let m = Model::<f32>::init(cfg.clone(), 0).unwrap();
        assert_eq!(m.param_count(), closed_form_count(&cfg));
        let cfg = tiny();
        assert_eq!(Model::<f64>::init(cfg.clone(), 0).unwrap().param_count(), closed_form_count(&cfg));
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = Model::<f32>::init(tiny(), 5).unwrap();
        let b = Model::<f32>::init(tiny(), 5).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::<f32>::init(tiny(), 6).unwrap();
        assert_ne!(a.params(), c.params());
        let zero_layers = ModelConfig {
            conv_channels: vec![],
            ..tiny()
        };
        assert!(matches!(Model::<f32>::init(zero_layers, 0), Err(ModelError::Config(_))));
        let one_track = ModelConfig { n_track: 1, ..tiny() };
        assert!(Model::<f32>::init(one_track, 0).is_err());
    }

    #[test]
    fn five_second_input_framing() {
        let cfg = ModelConfig::default();
        let m = Model::<f32>::init(cfg.clone(), 1).unwrap();
        let f = features(crate::features::n_stft_frames(5 * 24_000), 64, 1);
        let pass = m.forward(&[&f], Mode::Eval).unwrap();
        let out = &pass.outputs[0];
        assert_eq!(out.n_frames(), 50);
        assert_eq!(out.sed_logits.shape()[2], cfg.n_cla + 1);
        assert_eq!(out.doa.shape(), &[50, 2, 2]);
    }

    #[test]
    fn eval_mode_is_pure_and_deterministic() {
        let m = Model::<f32>::init(tiny(), 2).unwrap();
        let f = features(12, 8, 3);
        let a = m.forward(&[&f], Mode::Eval).unwrap();
        let b = m.forward(&[&f], Mode::Eval).unwrap();
        assert_eq!(a.outputs, b.outputs);
        assert!(!a.is_recorded());
        let out_grads = vec![TrackOutputs::zeros(3, 2, 2)];
        assert!(matches!(m.backward(&a, &out_grads), Err(ModelError::GraphNotRecorded)));
    }

    #[test]
    fn rejects_geometry_mismatch() {
        let m = Model::<f32>::init(tiny(), 2).unwrap();
        let f = features(12, 9, 3);
        assert!(matches!(m.forward(&[&f], Mode::Eval), Err(ModelError::Geometry(_))));
        let a = features(12, 8, 3);
        let b = features(13, 8, 3);
        assert!(m.forward(&[&a, &b], Mode::Eval).is_err());
    }

    #[test]
    fn running_stats_move_only_on_commit() {
        let mut m = Model::<f64>::init(tiny(), 2).unwrap();
        let before = m.running_stats().to_vec();
        let f = features(12, 8, 3);
        let pass = m.forward(&[&f], Mode::Train).unwrap();
        assert_eq!(m.running_stats(), &before[..]);
        m.commit_batch_stats(&pass);
        assert_ne!(m.running_stats(), &before[..]);
    }

    #[test]
    fn unused_head_gets_zero_gradient() {
        let m = Model::<f64>::init(tiny(), 2).unwrap();
        let f = features(10, 8, 4);
        let pass = m.forward(&[&f], Mode::Train).unwrap();
        // Gradient only on the SED head: DoA and EAD-only parameters stay 0.
        let mut g = TrackOutputs::zeros(2, 2, 2);
        g.sed_logits.fill(1.0);
        let grads = m.backward(&pass, &[g]).unwrap();
        for (name, t) in m.param_names().iter().zip(&grads.tensors) {
            let zero = t.iter().all(|&v| v == 0.0);
            if name.starts_with("doa.gru") || name.starts_with("doa.fc") || name.starts_with("ead.") {
                assert!(zero, "{name} should have no gradient");
            }
            if name.starts_with("doa.conv") {
                assert!(zero, "{name} feeds only the DoA and EAD heads");
            }
        }
    }

    #[test]
    fn gradients_scale_linearly() {
        let m = Model::<f64>::init(tiny(), 2).unwrap();
        let f = features(10, 8, 4);
        let pass = m.forward(&[&f], Mode::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = TrackOutputs::zeros(2, 2, 2);
        g.sed_logits.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        g.ead_logits.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        g.doa.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let mut g2 = g.clone();
        g2.sed_logits *= 2.0;
        g2.ead_logits *= 2.0;
        g2.doa *= 2.0;
        let a = m.backward(&pass, &[g]).unwrap();
        let b = m.backward(&pass, &[g2]).unwrap();
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            for (u, v) in x.iter().zip(y) {
                assert!((2.0 * u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn output_contract_holds(t in 1usize..23, batch in 1usize..3, seed in any::<u64>()) {
            let m = Model::<f32>::init(tiny(), seed).unwrap();
            let feats: Vec<_> = (0..batch).map(|i| features(t, 8, seed ^ i as u64)).collect();
            let refs: Vec<_> = feats.iter().collect();
            let pass = m.forward(&refs, Mode::Train).unwrap();
            for out in &pass.outputs {
                prop_assert_eq!(out.n_frames(), t.div_ceil(5));
                prop_assert_eq!(out.n_track(), 2);
                prop_assert_eq!(out.n_cla(), 2);
                for fr in 0..out.n_frames() {
                    for tr in 0..2 {
                        let sm: f64 = out.sed_softmax(fr, tr).iter().sum();
                        prop_assert!((sm - 1.0).abs() < 1e-6);
                        let p = out.ead_prob(fr, tr);
                        prop_assert!(p > 0.0 && p < 1.0);
                    }
                }
            }
        }
    }
}
