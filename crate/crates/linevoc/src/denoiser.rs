//! The patch-token Transformer denoiser.
//!
//! Waveform samples are grouped into non-overlapping patches, projected to
//! hidden tokens, and refined by blocks of step-adaptive layer norm,
//! self-attention, cross-attention over projected mel frames, and a
//! convolutional MLP. A location-variable post-convolution stack restores
//! waveform-rate detail; its per-frame kernels are predicted from the mel
//! features and the step embedding.
//!
//! Blocks start as the identity: attention output projections, the MLP's
//! second convolution, and the post-conv head are zero-initialized, and the
//! adaptive norm starts as plain layer norm.

use crate::diffusion::{Predictor, TrainSchedule};
use crate::dsp::{MelCondition, HOP, N_MELS};
use crate::grad::{Graph, Node, Param, Parameterized, Scalar, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Architecture settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Dimension of the sinusoidal step encoding (fixed at 128).
    pub step_pe_dim: usize,
    pub postconv_channels: usize,
    pub lvc_kernel: usize,
    pub lvc_layers: usize,
    pub max_tokens: usize,
    /// Step range the model is trained to condition on.
    pub t_train_max: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            patch_size: 64,
            hidden_dim: 256,
            n_layers: 4,
            n_heads: 4,
            step_pe_dim: 128,
            postconv_channels: 32,
            lvc_kernel: 3,
            lvc_layers: 2,
            max_tokens: 3600,
            t_train_max: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even".into()));
        }
        if self.patch_size == 0 || HOP % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must divide {HOP}",
                self.patch_size
            )));
        }
        if self.step_pe_dim == 0 || self.step_pe_dim % 2 != 0 {
            return Err(Error::Config("step_pe_dim must be even".into()));
        }
        if self.lvc_kernel % 2 == 0 {
            return Err(Error::Config("lvc_kernel must be odd".into()));
        }
        if self.n_layers == 0 || self.max_tokens == 0 || self.t_train_max == 0 {
            return Err(Error::Config("layer/token/step counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Split a 1-D signal into non-overlapping `[len/patch, patch]` tokens.
pub fn patchify<S: Scalar>(x: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    if x.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "patchify expects 1-D input, got {:?}",
            x.shape()
        )));
    }
    let len = x.numel();
    if patch == 0 || len % patch != 0 {
        return Err(Error::Shape(format!(
            "length {len} is not divisible by patch size {patch}"
        )));
    }
    Ok(x.reshaped(&[len / patch, patch]))
}

/// Inverse of [`patchify`].
pub fn depatchify<S: Scalar>(tokens: &Tensor<S>) -> Result<Tensor<S>> {
    let s = tokens.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "depatchify expects [tokens, patch], got {:?}",
            s
        )));
    }
    Ok(tokens.reshaped(&[s[0] * s[1]]))
}

/// Sinusoidal encoding: `pe[2i] = sin(pos / 10000^(2i/dim))`,
/// `pe[2i+1] = cos(pos / 10000^(2i/dim))`. Entries lie in [-1, 1].
pub fn sinusoidal_pe(pos: f64, dim: usize) -> Vec<f64> {
    debug_assert!(dim % 2 == 0);
    let mut pe = vec![0.0f64; dim];
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        pe[2 * i] = (pos * freq).sin();
        pe[2 * i + 1] = (pos * freq).cos();
    }
    pe
}

/// The 128-dimensional step encoding fed to the step projection.
#[derive(Debug, Clone)]
pub struct StepEmbedding {
    pub pe: Vec<f64>,
}

/// Build the step encoding for a (training-range) step index.
pub fn step_embedding(t_index: usize, dim: usize) -> StepEmbedding {
    StepEmbedding {
        pe: sinusoidal_pe(t_index as f64, dim),
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct Linear<S: Scalar> {
    pub w: Param<S>,
    pub b: Option<Param<S>>,
}

impl<S: Scalar> Linear<S> {
    /// Uniform init with limit `1/sqrt(fan_in)`, zero bias.
    fn init(name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let limit = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: Param::new(
                format!("{name}/w"),
                Tensor::rand_uniform(&[d_in, d_out], limit, rng),
            ),
            b: Some(Param::new(format!("{name}/b"), Tensor::zeros(&[d_out]))),
        }
    }

    /// Bias-free projection. Used for attention Q/K/V, where a key bias
    /// shifts every logit in a softmax row equally and so can never receive
    /// gradient.
    fn init_no_bias(name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let limit = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: Param::new(
                format!("{name}/w"),
                Tensor::rand_uniform(&[d_in, d_out], limit, rng),
            ),
            b: None,
        }
    }

    /// All-zero weight with a constant bias (identity-style starts).
    fn init_const(name: &str, d_in: usize, d_out: usize, bias: f64) -> Self {
        Linear {
            w: Param::new(format!("{name}/w"), Tensor::zeros(&[d_in, d_out])),
            b: Some(Param::new(
                format!("{name}/b"),
                Tensor::full(&[d_out], S::from_f64(bias)),
            )),
        }
    }

    fn forward(&self, g: &Graph<S>, x: &Node<S>) -> Node<S> {
        let w = g.param(&self.w);
        let y = x.matmul(&w);
        match &self.b {
            Some(b) => y.add(&g.param(b)),
            None => y,
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.w);
        if let Some(b) = &self.b {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv1dLayer<S: Scalar> {
    pub w: Param<S>,
    pub b: Param<S>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
}

impl<S: Scalar> Conv1dLayer<S> {
    #[allow(clippy::too_many_arguments)]
    fn init(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (c_in / groups) * k;
        let limit = 1.0 / (fan_in as f64).sqrt();
        Conv1dLayer {
            w: Param::new(
                format!("{name}/w"),
                Tensor::rand_uniform(&[c_out, c_in / groups, k], limit, rng),
            ),
            b: Param::new(format!("{name}/b"), Tensor::zeros(&[c_out])),
            stride,
            padding,
            dilation,
            groups,
        }
    }

    fn zero_weights(&mut self) {
        self.w.value = Tensor::zeros(self.w.value.shape());
        self.b.value = Tensor::zeros(self.b.value.shape());
    }

    fn forward(&self, g: &Graph<S>, x: &Node<S>) -> Node<S> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        x.conv1d(&w, Some(&b), self.stride, self.padding, self.dilation, self.groups)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.w);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Layer norm whose scale and shift are linear functions of the step
/// embedding. Initialized to the identity: scale projection emits 1, shift
/// projection emits 0, so the layer starts as plain layer norm.
#[derive(Debug, Clone)]
pub(crate) struct AdaLayerNorm<S: Scalar> {
    pub g_proj: Linear<S>,
    pub b_proj: Linear<S>,
}

impl<S: Scalar> AdaLayerNorm<S> {
    fn init(name: &str, hidden: usize, dim: usize) -> Self {
        AdaLayerNorm {
            g_proj: Linear::init_const(&format!("{name}/scale"), hidden, dim, 1.0),
            b_proj: Linear::init_const(&format!("{name}/shift"), hidden, dim, 0.0),
        }
    }

    /// `x` is `[tokens, dim]`, `t_emb` is `[1, hidden]`.
    fn forward(&self, g: &Graph<S>, x: &Node<S>, t_emb: &Node<S>) -> Node<S> {
        let dim = x.shape()[1];
        let ln = x.layer_norm(1, 1e-5);
        let scale = self.g_proj.forward(g, t_emb).reshape(&[dim]);
        let shift = self.b_proj.forward(g, t_emb).reshape(&[dim]);
        ln.mul(&scale).add(&shift)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.g_proj.visit(f);
        self.b_proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.g_proj.visit_mut(f);
        self.b_proj.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Attention<S: Scalar> {
    wq: Linear<S>,
    wk: Linear<S>,
    wv: Linear<S>,
    wo: Linear<S>,
    n_heads: usize,
}

impl<S: Scalar> Attention<S> {
    fn init(name: &str, hidden: usize, n_heads: usize, rng: &mut Rng) -> Self {
        let mut a = Attention {
            wq: Linear::init_no_bias(&format!("{name}/wq"), hidden, hidden, rng),
            wk: Linear::init_no_bias(&format!("{name}/wk"), hidden, hidden, rng),
            wv: Linear::init_no_bias(&format!("{name}/wv"), hidden, hidden, rng),
            wo: Linear::init(&format!("{name}/wo"), hidden, hidden, rng),
            n_heads,
        };
        // Identity residual branch at init.
        a.wo.w.value = Tensor::zeros(a.wo.w.value.shape());
        a
    }

    /// Returns `(output, per-head attention weights)`.
    fn forward_with_weights(
        &self,
        g: &Graph<S>,
        queries: &Node<S>,
        keys_values: &Node<S>,
    ) -> (Node<S>, Vec<Node<S>>) {
        let hidden = queries.shape()[1];
        let dh = hidden / self.n_heads;
        // Scaling the queries once is equivalent to scaling every score
        // matrix and far cheaper.
        let q = self
            .wq
            .forward(g, queries)
            .scale(1.0 / (dh as f64).sqrt());
        let k = self.wk.forward(g, keys_values);
        let v = self.wv.forward(g, keys_values);
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.slice(1, h * dh, dh);
            let kh = k.slice(1, h * dh, dh);
            let vh = v.slice(1, h * dh, dh);
            let scores = qh.matmul(&kh.transpose()).softmax(1);
            heads.push(scores.matmul(&vh));
            weights.push(scores);
        }
        let merged = Node::concat(&heads, 1);
        (self.wo.forward(g, &merged), weights)
    }

    fn forward(&self, g: &Graph<S>, queries: &Node<S>, keys_values: &Node<S>) -> Node<S> {
        self.forward_with_weights(g, queries, keys_values).0
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.wq.visit(f);
        self.wk.visit(f);
        self.wv.visit(f);
        self.wo.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.wq.visit_mut(f);
        self.wk.visit_mut(f);
        self.wv.visit_mut(f);
        self.wo.visit_mut(f);
    }
}

/// Token MLP realized as two kernel-3 convolutions over the token axis with
/// a 4x expansion and gelu between; the second conv starts at zero.
#[derive(Debug, Clone)]
pub(crate) struct ConvMlp<S: Scalar> {
    conv1: Conv1dLayer<S>,
    conv2: Conv1dLayer<S>,
}

impl<S: Scalar> ConvMlp<S> {
    fn init(name: &str, hidden: usize, rng: &mut Rng) -> Self {
        let mut mlp = ConvMlp {
            conv1: Conv1dLayer::init(&format!("{name}/conv1"), hidden, 4 * hidden, 3, 1, 1, 1, 1, rng),
            conv2: Conv1dLayer::init(&format!("{name}/conv2"), 4 * hidden, hidden, 3, 1, 1, 1, 1, rng),
        };
        mlp.conv2.zero_weights();
        mlp
    }

    fn forward(&self, g: &Graph<S>, x: &Node<S>) -> Node<S> {
        let xt = x.transpose();
        let h = self.conv1.forward(g, &xt).gelu();
        self.conv2.forward(g, &h).transpose()
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block<S: Scalar> {
    norm_sa: AdaLayerNorm<S>,
    self_attn: Attention<S>,
    norm_ca: AdaLayerNorm<S>,
    cross_attn: Attention<S>,
    norm_mlp: AdaLayerNorm<S>,
    mlp: ConvMlp<S>,
}

impl<S: Scalar> Block<S> {
    fn init(name: &str, hidden: usize, n_heads: usize, rng: &mut Rng) -> Self {
        Block {
            norm_sa: AdaLayerNorm::init(&format!("{name}/norm_sa"), hidden, hidden),
            self_attn: Attention::init(&format!("{name}/self_attn"), hidden, n_heads, rng),
            norm_ca: AdaLayerNorm::init(&format!("{name}/norm_ca"), hidden, hidden),
            cross_attn: Attention::init(&format!("{name}/cross_attn"), hidden, n_heads, rng),
            norm_mlp: AdaLayerNorm::init(&format!("{name}/norm_mlp"), hidden, hidden),
            mlp: ConvMlp::init(&format!("{name}/mlp"), hidden, rng),
        }
    }

    /// Residual around each sub-layer; queries are the audio tokens, keys
    /// and values of the cross step are the mel hidden frames.
    fn forward(
        &self,
        g: &Graph<S>,
        tokens: &Node<S>,
        mel_hidden: &Node<S>,
        t_emb: &Node<S>,
    ) -> Node<S> {
        let normed = self.norm_sa.forward(g, tokens, t_emb);
        let x = tokens.add(&self.self_attn.forward(g, &normed, &normed));
        let x = x.add(&self.cross_attn.forward(g, &self.norm_ca.forward(g, &x, t_emb), mel_hidden));
        x.add(&self.mlp.forward(g, &self.norm_mlp.forward(g, &x, t_emb)))
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.norm_sa.visit(f);
        self.self_attn.visit(f);
        self.norm_ca.visit(f);
        self.cross_attn.visit(f);
        self.norm_mlp.visit(f);
        self.mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.norm_sa.visit_mut(f);
        self.self_attn.visit_mut(f);
        self.norm_ca.visit_mut(f);
        self.cross_attn.visit_mut(f);
        self.norm_mlp.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}

/// One location-variable convolution layer: kernels and biases for each mel
/// frame come from a two-layer predictor over (mel hidden + step embedding),
/// and each frame's 256 samples are convolved with its own kernel. Boundary
/// samples use neighbor frames' values with the local kernel.
#[derive(Debug, Clone)]
pub(crate) struct LvcLayer<S: Scalar> {
    kp_hidden: Linear<S>,
    kp_out: Linear<S>,
    channels: usize,
    kernel: usize,
}

impl<S: Scalar> LvcLayer<S> {
    fn init(name: &str, hidden: usize, channels: usize, kernel: usize, rng: &mut Rng) -> Self {
        let kp_dim = hidden.min(64).max(16);
        let kdim = channels * channels * kernel + channels;
        LvcLayer {
            kp_hidden: Linear::init(&format!("{name}/kp_hidden"), hidden, kp_dim, rng),
            kp_out: Linear::init(&format!("{name}/kp_out"), kp_dim, kdim, rng),
            channels,
            kernel,
        }
    }

    /// Per-frame kernel parameters `[frames, c*c*k + c]`.
    fn predict_kernels(&self, g: &Graph<S>, mel_hidden: &Node<S>, t_emb: &Node<S>) -> Node<S> {
        let hidden = t_emb.shape()[1];
        let cond = mel_hidden.add(&t_emb.reshape(&[hidden]));
        let h = self.kp_hidden.forward(g, &cond).gelu();
        self.kp_out.forward(g, &h)
    }

    fn forward(
        &self,
        g: &Graph<S>,
        x: &Node<S>,
        mel_hidden: &Node<S>,
        t_emb: &Node<S>,
    ) -> Node<S> {
        let c = self.channels;
        let k = self.kernel;
        let frames = mel_hidden.shape()[0];
        debug_assert_eq!(x.shape()[1], frames * HOP);
        let kp = self.predict_kernels(g, mel_hidden, t_emb);
        let kernels = kp.slice(1, 0, c * c * k).reshape(&[frames, c, c, k]);
        let biases = kp.slice(1, c * c * k, c);
        x.lv_conv1d(&kernels, &biases, HOP)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.kp_hidden.visit(f);
        self.kp_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.kp_hidden.visit_mut(f);
        self.kp_out.visit_mut(f);
    }
}

/// Waveform-rate refinement: channel lift, alternating location-variable and
/// plain convolutions, a zero-initialized head, and a residual add of the
/// incoming estimate.
#[derive(Debug, Clone)]
pub(crate) struct PostConv<S: Scalar> {
    in_conv: Conv1dLayer<S>,
    lvc: Vec<LvcLayer<S>>,
    mid: Vec<Conv1dLayer<S>>,
    out_conv: Conv1dLayer<S>,
}

impl<S: Scalar> PostConv<S> {
    fn init(name: &str, cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        let c = cfg.postconv_channels;
        let mut lvc = Vec::new();
        let mut mid = Vec::new();
        for i in 0..cfg.lvc_layers {
            lvc.push(LvcLayer::init(
                &format!("{name}/lvc{i}"),
                cfg.hidden_dim,
                c,
                cfg.lvc_kernel,
                rng,
            ));
            // Alternate dilation 1/2 on the plain convolutions.
            let dilation = 1 + (i % 2);
            mid.push(Conv1dLayer::init(
                &format!("{name}/mid{i}"),
                c,
                c,
                3,
                1,
                dilation,
                dilation,
                1,
                rng,
            ));
        }
        let mut out_conv = Conv1dLayer::init(&format!("{name}/out"), c, 1, 3, 1, 1, 1, 1, rng);
        out_conv.zero_weights();
        PostConv {
            in_conv: Conv1dLayer::init(&format!("{name}/in"), 1, c, 3, 1, 1, 1, 1, rng),
            lvc,
            mid,
            out_conv,
        }
    }

    fn forward(
        &self,
        g: &Graph<S>,
        estimate: &Node<S>,
        mel_hidden: &Node<S>,
        t_emb: &Node<S>,
    ) -> Node<S> {
        // Waveform-rate activations are leaky rectifiers: millions of
        // positions per clip make transcendental activations the dominant
        // cost, with no quality rationale at this point in the network.
        let mut x = self.in_conv.forward(g, estimate).leaky_relu(0.2);
        for (lvc, mid) in self.lvc.iter().zip(&self.mid) {
            x = lvc.forward(g, &x, mel_hidden, t_emb).leaky_relu(0.2);
            x = mid.forward(g, &x).leaky_relu(0.2);
        }
        let refine = self.out_conv.forward(g, &x);
        estimate.add(&refine)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.in_conv.visit(f);
        for l in &self.lvc {
            l.visit(f);
        }
        for m in &self.mid {
            m.visit(f);
        }
        self.out_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.in_conv.visit_mut(f);
        for l in &mut self.lvc {
            l.visit_mut(f);
        }
        for m in &mut self.mid {
            m.visit_mut(f);
        }
        self.out_conv.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

/// The denoising network `f(x_t, c, t) -> x_hat_data`.
#[derive(Debug, Clone)]
pub struct Denoiser<S: Scalar> {
    cfg: DenoiserConfig,
    patch_proj: Linear<S>,
    mel_proj: Linear<S>,
    step_proj: Linear<S>,
    blocks: Vec<Block<S>>,
    depatch: Linear<S>,
    post: PostConv<S>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(cfg: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::init(&format!("denoiser/block{i}"), h, cfg.n_heads, rng))
            .collect();
        Ok(Denoiser {
            cfg,
            patch_proj: Linear::init("denoiser/patch_proj", cfg.patch_size, h, rng),
            mel_proj: Linear::init("denoiser/mel_proj", N_MELS, h, rng),
            step_proj: Linear::init("denoiser/step_proj", cfg.step_pe_dim, h, rng),
            blocks,
            depatch: Linear::init("denoiser/depatch", h, cfg.patch_size, rng),
            post: PostConv::init("denoiser/post", &cfg, rng),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn check_inputs(&self, len: usize, mel: &MelCondition, t_index: usize) -> Result<()> {
        if len != mel.num_frames() * HOP {
            return Err(Error::Shape(format!(
                "waveform length {len} does not match {} mel frames x {HOP}",
                mel.num_frames()
            )));
        }
        let tokens = len / self.cfg.patch_size;
        if tokens > self.cfg.max_tokens {
            return Err(Error::Shape(format!(
                "input of {tokens} tokens exceeds max_tokens {}",
                self.cfg.max_tokens
            )));
        }
        if t_index > self.cfg.t_train_max {
            return Err(Error::Config(format!(
                "step index {t_index} outside [0, {}]",
                self.cfg.t_train_max
            )));
        }
        Ok(())
    }

    /// Project mel frames into hidden space and add frame positions scaled to
    /// token units so cross-attention sees aligned positional cues.
    ///
    /// Log-mel values span roughly [-11.5, 4.5] (silence floor to loud
    /// harmonics); they are standardized with fixed constants so the
    /// projection starts at unit scale instead of having to unlearn the
    /// floor offset.
    fn mel_hidden(&self, g: &Graph<S>, mel: &MelCondition) -> Node<S> {
        const MEL_SHIFT: f64 = 5.0;
        const MEL_SCALE: f64 = 4.0;
        let frames = mel.num_frames();
        let h = self.cfg.hidden_dim;
        let tokens_per_frame = (HOP / self.cfg.patch_size) as f64;
        let mel_node = g.constant(Tensor::from_fn(&[frames, N_MELS], |i| {
            S::from_f64((mel.data()[i] as f64 + MEL_SHIFT) / MEL_SCALE)
        }));
        let projected = self.mel_proj.forward(g, &mel_node);
        let pos = g.constant(position_table::<S>(frames, h, tokens_per_frame));
        projected.add(&pos)
    }

    fn t_emb(&self, g: &Graph<S>, t_index: usize) -> Node<S> {
        let pe = step_embedding(t_index, self.cfg.step_pe_dim);
        let pe_node = g.constant(Tensor::from_f64_slice(&[1, self.cfg.step_pe_dim], &pe.pe));
        self.step_proj.forward(g, &pe_node)
    }

    /// Build the full forward computation on an existing graph. `x` must be a
    /// 1-D node of length `256 * num_frames(mel)`.
    pub fn forward_node(
        &self,
        g: &Graph<S>,
        x: &Node<S>,
        mel: &MelCondition,
        t_index: usize,
    ) -> Result<Node<S>> {
        let len = x.numel();
        self.check_inputs(len, mel, t_index)?;
        let patch = self.cfg.patch_size;
        let tokens_n = len / patch;
        let h = self.cfg.hidden_dim;

        let t_emb = self.t_emb(g, t_index);
        let mel_hidden = self.mel_hidden(g, mel);

        let tokens = x.reshape(&[tokens_n, patch]);
        let mut state = self.patch_proj.forward(g, &tokens);
        let pos = g.constant(position_table::<S>(tokens_n, h, 1.0));
        state = state.add(&pos);
        for block in &self.blocks {
            state = block.forward(g, &state, &mel_hidden, &t_emb);
        }
        let estimate = self
            .depatch
            .forward(g, &state)
            .reshape(&[1, tokens_n * patch]);
        let refined = self.post.forward(g, &estimate, &mel_hidden, &t_emb);
        Ok(refined.reshape(&[len]))
    }

    /// Inference helper: run the forward pass on a fresh graph with constant
    /// inputs and return the predicted clean waveform values.
    pub fn predict_tensor(
        &self,
        x_t: &Tensor<S>,
        mel: &MelCondition,
        t_index: usize,
    ) -> Result<Tensor<S>> {
        let g = Graph::new();
        let x = g.constant(x_t.clone());
        let out = self.forward_node(&g, &x, mel, t_index)?;
        Ok(out.value())
    }
}

impl<S: Scalar> Parameterized<S> for Denoiser<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.patch_proj.visit(f);
        self.mel_proj.visit(f);
        self.step_proj.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.depatch.visit(f);
        self.post.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.patch_proj.visit_mut(f);
        self.mel_proj.visit_mut(f);
        self.step_proj.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.depatch.visit_mut(f);
        self.post.visit_mut(f);
    }
}

impl<S: Scalar> Predictor<S> for Denoiser<S> {
    fn predict(&self, x_t: &Tensor<S>, cond: &MelCondition, t_index: usize) -> Result<Tensor<S>> {
        self.predict_tensor(x_t, cond, t_index)
    }

    fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            t_train_max: self.cfg.t_train_max,
        }
    }
}

fn position_table<S: Scalar>(rows: usize, dim: usize, scale: f64) -> Tensor<S> {
    let mut out = Tensor::zeros(&[rows, dim]);
    for r in 0..rows {
        let pe = sinusoidal_pe(r as f64 * scale, dim);
        for (j, &v) in pe.iter().enumerate() {
            out.data_mut()[r * dim + j] = S::from_f64(v);
        }
    }
    out
}

/// Randomize every parameter (including the zero-initialized projections).
/// Used by connectivity and gradient checks, never by training.
pub fn randomize_params<S: Scalar>(model: &mut dyn Parameterized<S>, rng: &mut Rng) {
    model.visit_params_mut(&mut |p| {
        let shape = p.value.shape().to_vec();
        let fan_in = if shape.len() >= 2 {
            shape[..shape.len() - 1].iter().product::<usize>()
        } else {
            shape[0]
        };
        let limit = 1.0 / (fan_in as f64).sqrt().max(1.0);
        p.value = Tensor::rand_uniform(&shape, limit, rng);
    });
}

/// Finite-difference probes of individual sub-layers, used by the runtime
/// verification suite. Lives here because the layer types are private.
pub(crate) mod test_surface {
    use super::*;
    use crate::grad::check::{grad_check_multi_h, CheckReport};
    use crate::verify::NamedCheck;

    fn randomize<V>(visit_mut: &mut V, rng: &mut Rng)
    where
        V: FnMut(&mut dyn FnMut(&mut Param<f64>)),
    {
        visit_mut(&mut |p| {
            let shape = p.value.shape().to_vec();
            let fan_in = if shape.len() >= 2 {
                shape[..shape.len() - 1].iter().product::<usize>()
            } else {
                shape[0]
            };
            let limit = 1.0 / (fan_in as f64).sqrt().max(1.0);
            p.value = Tensor::rand_uniform(&shape, limit, rng);
        });
    }

    /// Weighted mean-square reduction that keeps every output coordinate's
    /// gradient alive.
    fn reduce(g: &Graph<f64>, out: &Node<f64>, seed: u64) -> Node<f64> {
        let mut r = Rng::seed_from(seed);
        let shape = out.shape();
        let w = g.constant(Tensor::from_fn(&shape, |_| r.uniform(0.5, 1.5)));
        out.mul(&w).square().mean()
    }

    pub fn sublayer_checks(hidden: usize, h: f64) -> crate::Result<Vec<NamedCheck>> {
        let mut rng = Rng::seed_from(0x5b1a);
        let mut out = Vec::new();
        let named = |name: &str, r: CheckReport| NamedCheck {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            worst_param: r.worst_param,
        };

        // Step-adaptive layer norm on two tokens.
        {
            let mut layer = AdaLayerNorm::<f64>::init("ada_layer_norm", hidden, hidden);
            randomize(&mut |f| layer.visit_mut(f), &mut rng);
            let mut probe = Rng::seed_from(1);
            let x = Tensor::from_fn(&[2, hidden], |_| probe.uniform(-1.0, 1.0));
            let t_emb = Tensor::from_fn(&[1, hidden], |_| probe.uniform(-1.0, 1.0));
            let report = grad_check_multi_h(
                &mut layer,
                &mut |l, f| l.visit_mut(f),
                &mut |l| {
                    let g = Graph::new();
                    let xn = g.constant(x.clone());
                    let tn = g.constant(t_emb.clone());
                    let y = l.forward(&g, &xn, &tn);
                    let loss = reduce(&g, &y, 11);
                    (g, loss)
                },
                &[3e-5, h],
            );
            out.push(named("ada_layer_norm", report));
        }

        // Self- and cross-attention.
        for (name, kv_rows) in [("self_attention", 4usize), ("cross_attention", 3)] {
            let mut layer = Attention::<f64>::init(name, hidden, 2, &mut rng);
            randomize(&mut |f| layer.visit_mut(f), &mut rng);
            let mut probe = Rng::seed_from(2);
            let q = Tensor::from_fn(&[4, hidden], |_| probe.uniform(-1.0, 1.0));
            let kv = if name == "self_attention" {
                q.clone()
            } else {
                Tensor::from_fn(&[kv_rows, hidden], |_| probe.uniform(-1.0, 1.0))
            };
            let report = grad_check_multi_h(
                &mut layer,
                &mut |l, f| l.visit_mut(f),
                &mut |l| {
                    let g = Graph::new();
                    let qn = g.constant(q.clone());
                    let kn = g.constant(kv.clone());
                    let y = l.forward(&g, &qn, &kn);
                    let loss = reduce(&g, &y, 13);
                    (g, loss)
                },
                &[3e-5, h],
            );
            out.push(named(name, report));
        }

        // Convolutional token MLP.
        {
            let mut layer = ConvMlp::<f64>::init("conv_mlp", hidden, &mut rng);
            randomize(&mut |f| layer.visit_mut(f), &mut rng);
            let mut probe = Rng::seed_from(3);
            let x = Tensor::from_fn(&[5, hidden], |_| probe.uniform(-1.0, 1.0));
            let report = grad_check_multi_h(
                &mut layer,
                &mut |l, f| l.visit_mut(f),
                &mut |l| {
                    let g = Graph::new();
                    let xn = g.constant(x.clone());
                    let y = l.forward(&g, &xn);
                    let loss = reduce(&g, &y, 17);
                    (g, loss)
                },
                &[3e-5, h],
            );
            out.push(named("conv_mlp", report));
        }

        // Location-variable post-convolution stack.
        {
            let cfg = DenoiserConfig {
                patch_size: 64,
                hidden_dim: hidden,
                n_layers: 1,
                n_heads: 2,
                step_pe_dim: 16,
                postconv_channels: 2,
                lvc_kernel: 3,
                lvc_layers: 1,
                max_tokens: 64,
                t_train_max: 100,
            };
            let mut layer = PostConv::<f64>::init("lvc_postconv", &cfg, &mut rng);
            randomize(&mut |f| layer.visit_mut(f), &mut rng);
            let mut probe = Rng::seed_from(4);
            let est = Tensor::from_fn(&[1, 2 * HOP], |_| probe.uniform(-0.5, 0.5));
            let mel_hidden = Tensor::from_fn(&[2, hidden], |_| probe.uniform(-1.0, 1.0));
            let t_emb = Tensor::from_fn(&[1, hidden], |_| probe.uniform(-1.0, 1.0));
            let report = grad_check_multi_h(
                &mut layer,
                &mut |l, f| l.visit_mut(f),
                &mut |l| {
                    let g = Graph::new();
                    let en = g.constant(est.clone());
                    let mn = g.constant(mel_hidden.clone());
                    let tn = g.constant(t_emb.clone());
                    let y = l.forward(&g, &en, &mn, &tn);
                    let loss = reduce(&g, &y, 19);
                    (g, loss)
                },
                &[3e-5, h],
            );
            out.push(named("lvc_postconv", report));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;
    use crate::grad::check::{grad_check_multi_h, GRAD_TOL};
    use std::collections::BTreeMap;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            patch_size: 64,
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            step_pe_dim: 128,
            postconv_channels: 4,
            lvc_kernel: 3,
            lvc_layers: 1,
            max_tokens: 64,
            t_train_max: 1000,
        }
    }

    // Moderate mel magnitudes keep every gelu away from its saturated tail,
    // so no gradient coordinate sinks to the finite-difference noise floor.
    fn mel_random(frames: usize, seed: u64) -> MelCondition {
        let mut rng = Rng::seed_from(seed);
        MelCondition::from_rows(
            (0..frames * N_MELS)
                .map(|_| rng.uniform(-2.0, 1.0) as f32)
                .collect(),
            frames,
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn patchify_examples() {
        let x = Tensor::<f64>::from_fn(&[256], |i| i as f64);
        let tokens = patchify(&x, 64).unwrap();
        assert_eq!(tokens.shape(), &[4, 64]);
        let back = depatchify(&tokens).unwrap();
        assert_eq!(back.data(), x.data());
        let bad = Tensor::<f64>::zeros(&[100]);
        assert!(patchify(&bad, 64).is_err());
    }

    #[test]
    fn step_encoding_at_zero_alternates_zero_one() {
        let pe = step_embedding(0, 128).pe;
        for i in 0..64 {
            assert_eq!(pe[2 * i], 0.0);
            assert_eq!(pe[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn step_encodings_are_bounded_and_distinct() {
        let dim = 128;
        let pes: Vec<Vec<f64>> = (0..=1000).map(|t| step_embedding(t, dim).pe).collect();
        for pe in &pes {
            assert!(pe.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
        let mut min_l2 = f64::MAX;
        for i in 0..pes.len() {
            for j in i + 1..pes.len() {
                let d2: f64 = pes[i]
                    .iter()
                    .zip(&pes[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                min_l2 = min_l2.min(d2.sqrt());
            }
        }
        assert!(min_l2 > 0.0, "two step encodings collide");
    }

    #[test]
    fn ada_norm_at_init_equals_plain_layer_norm() {
        let norm = AdaLayerNorm::<f64>::init("t", 16, 8);
        let g = Graph::new();
        let mut rng = Rng::seed_from(4);
        let x = g.constant(Tensor::from_fn(&[3, 8], |_| rng.uniform(-1.0, 1.0)));
        let t_emb = g.constant(Tensor::from_fn(&[1, 16], |_| rng.uniform(-1.0, 1.0)));
        let out = norm.forward(&g, &x, &t_emb);
        let plain = x.layer_norm(1, 1e-5);
        assert_eq!(out.value().data(), plain.value().data());
    }

    #[test]
    fn ada_norm_of_constant_token_is_the_shift() {
        let mut norm = AdaLayerNorm::<f64>::init("t", 16, 8);
        let mut rng = Rng::seed_from(9);
        norm.g_proj.w.value = Tensor::from_fn(&[16, 8], |_| rng.uniform(-0.5, 0.5));
        norm.b_proj.w.value = Tensor::from_fn(&[16, 8], |_| rng.uniform(-0.5, 0.5));
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 8], 2.5f64));
        let t_emb = g.constant(Tensor::from_fn(&[1, 16], |_| rng.uniform(-1.0, 1.0)));
        let out = norm.forward(&g, &x, &t_emb);
        // LN of a constant row is ~0, so output reduces to the shift vector.
        let shift = norm.b_proj.forward(&g, &t_emb);
        for (o, s) in out.value().data().iter().zip(shift.value().data()) {
            assert!((o - s).abs() < 1e-6, "got {o}, want {s}");
        }
    }

    #[test]
    fn attention_rows_are_probability_distributions() {
        let mut rng = Rng::seed_from(21);
        let attn = Attention::<f64>::init("t", 16, 2, &mut rng);
        let g = Graph::new();
        let q = g.constant(Tensor::from_fn(&[5, 16], |_| rng.uniform(-1.0, 1.0)));
        let kv = g.constant(Tensor::from_fn(&[7, 16], |_| rng.uniform(-1.0, 1.0)));
        let (_, weights) = attn.forward_with_weights(&g, &q, &kv);
        for w in weights {
            let t = w.value();
            assert_eq!(t.shape(), &[5, 7]);
            for row in 0..5 {
                let sum: f64 = t.data()[row * 7..(row + 1) * 7].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
            }
        }
    }

    #[test]
    fn block_is_identity_at_init() {
        let mut rng = Rng::seed_from(33);
        let block = Block::<f64>::init("t", 16, 2, &mut rng);
        let g = Graph::new();
        let tokens = g.constant(Tensor::from_fn(&[4, 16], |_| rng.uniform(-1.0, 1.0)));
        let mel = g.constant(Tensor::from_fn(&[2, 16], |_| rng.uniform(-1.0, 1.0)));
        let t_emb = g.constant(Tensor::from_fn(&[1, 16], |_| rng.uniform(-1.0, 1.0)));
        let out = block.forward(&g, &tokens, &mel, &t_emb);
        assert_eq!(out.value().data(), tokens.value().data());
    }

    #[test]
    fn cross_attention_is_order_sensitive_only_with_positions() {
        let mut rng = Rng::seed_from(55);
        let mut model = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        randomize_params(&mut model, &mut rng);

        let mel = mel_random(3, 7);
        // Permute the three mel frames.
        let mut permuted = Vec::new();
        for f in [2usize, 0, 1] {
            permuted.extend_from_slice(mel.frame(f));
        }
        let mel_perm = MelCondition::from_rows(permuted, 3, SAMPLE_RATE).unwrap();

        let g = Graph::new();
        let with_pos_a = model.mel_hidden(&g, &mel);
        let with_pos_b = model.mel_hidden(&g, &mel_perm);
        let q = g.constant(Tensor::from_fn(&[4, 16], |_| rng.uniform(-1.0, 1.0)));
        let attn = &model.blocks[0].cross_attn;
        let out_a = attn.forward(&g, &q, &with_pos_a);
        let out_b = attn.forward(&g, &q, &with_pos_b);
        let diff = out_a
            .value()
            .data()
            .iter()
            .zip(out_b.value().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-4, "positions should break permutation symmetry");

        // Without positions, attention over keys/values is a weighted sum
        // that cannot see frame order.
        let mel_node = |m: &MelCondition| {
            g.constant(Tensor::from_fn(&[3, N_MELS], |i| m.data()[i] as f64))
        };
        let plain_a = model.mel_proj.forward(&g, &mel_node(&mel));
        let plain_b = model.mel_proj.forward(&g, &mel_node(&mel_perm));
        let out_a = attn.forward(&g, &q, &plain_a);
        let out_b = attn.forward(&g, &q, &plain_b);
        let diff = out_a
            .value()
            .data()
            .iter()
            .zip(out_b.value().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-9, "bare attention should be order-invariant, diff {diff}");
    }

    #[test]
    fn forward_preserves_length_and_is_deterministic() {
        let mut rng = Rng::seed_from(3);
        let model = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        let mel = mel_random(2, 11);
        let x = Tensor::from_fn(&[2 * HOP], |_| rng.uniform(-0.5, 0.5));
        let a = model.predict_tensor(&x, &mel, 17).unwrap();
        let b = model.predict_tensor(&x, &mel, 17).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forward_rejects_mismatched_and_oversized_inputs() {
        let mut rng = Rng::seed_from(3);
        let model = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        let mel = mel_random(2, 11);
        let x = Tensor::from_fn(&[3 * HOP], |_| rng.uniform(-0.5, 0.5));
        assert!(model.predict_tensor(&x, &mel, 0).is_err());

        // 65 frames = 260 tokens > max_tokens 64 at patch 64.
        let mel_big = mel_random(65, 12);
        let x_big = Tensor::from_fn(&[65 * HOP], |_| rng.uniform(-0.5, 0.5));
        let err = model.predict_tensor(&x_big, &mel_big, 0).unwrap_err();
        assert!(err.to_string().contains("max_tokens"), "got {err}");
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        // Connectivity: with all params randomized (including the
        // zero-initialized projections), one backward pass reaches every
        // parameter tensor.
        let mut rng = Rng::seed_from(77);
        let mut model = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        randomize_params(&mut model, &mut rng);
        let mel = mel_random(2, 5);
        let x_t = Tensor::from_fn(&[2 * HOP], |_| rng.uniform(-1.0, 1.0));
        let target = Tensor::from_fn(&[2 * HOP], |_| rng.uniform(-1.0, 1.0));

        let g = Graph::new();
        let x = g.constant(x_t);
        let out = model.forward_node(&g, &x, &mel, 13).unwrap();
        let tgt = g.constant(target);
        let loss = out.sub(&tgt).square().mean();
        g.backward(&loss);
        let grads: BTreeMap<String, Tensor<f64>> = g.param_grads().into_iter().collect();

        model.visit_params(&mut |p| {
            let grad = grads
                .get(&p.name)
                .unwrap_or_else(|| panic!("no gradient entry for {}", p.name));
            assert!(
                grad.max_abs() > 0.0,
                "dead branch: {} got all-zero gradient",
                p.name
            );
        });
    }

    #[test]
    fn lvc_kernels_vary_with_conditioning() {
        let mut rng = Rng::seed_from(99);
        let model = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        let mel = mel_random(2, 21);
        let g = Graph::new();
        let mel_hidden = model.mel_hidden(&g, &mel);
        let t_emb = model.t_emb(&g, 5);
        let kp = model.post.lvc[0].predict_kernels(&g, &mel_hidden, &t_emb);
        let v = kp.value();
        let kdim = v.shape()[1];
        let row0 = &v.data()[0..kdim];
        let row1 = &v.data()[kdim..2 * kdim];
        let diff = row0
            .iter()
            .zip(row1)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-6, "two frames predicted identical kernels");
    }

    #[test]
    fn zero_kernel_predictor_silences_the_lvc_layer() {
        let mut rng = Rng::seed_from(101);
        let mut model = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        // Zero the final kernel-predictor projection of the first LVC layer.
        let lvc = &mut model.post.lvc[0];
        lvc.kp_out.w.value = Tensor::zeros(lvc.kp_out.w.value.shape());
        if let Some(b) = &mut lvc.kp_out.b {
            b.value = Tensor::zeros(b.value.shape());
        }
        let mel = mel_random(2, 31);
        let g = Graph::new();
        let mel_hidden = model.mel_hidden(&g, &mel);
        let t_emb = model.t_emb(&g, 3);
        let x = g.constant(Tensor::from_fn(&[4, 2 * HOP], |_| rng.uniform(-1.0, 1.0)));
        let out = model.post.lvc[0].forward(&g, &x, &mel_hidden, &t_emb);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_model_passes_finite_difference_check() {
        // Full forward + MSE loss against finite differences. Uses one layer
        // at hidden 8 to keep the probe count small.
        let cfg = DenoiserConfig {
            patch_size: 64,
            hidden_dim: 8,
            n_layers: 1,
            n_heads: 2,
            step_pe_dim: 16,
            postconv_channels: 2,
            lvc_kernel: 3,
            lvc_layers: 1,
            max_tokens: 16,
            t_train_max: 100,
        };
        let mut rng = Rng::seed_from(2024);
        let mut model = Denoiser::<f64>::new(cfg, &mut rng).unwrap();
        randomize_params(&mut model, &mut rng);
        let mel = mel_random(2, 41);
        let x_t = Tensor::from_fn(&[2 * HOP], |_| rng.uniform(-0.8, 0.8));
        let target = Tensor::from_fn(&[2 * HOP], |_| rng.uniform(-0.8, 0.8));

        let report = grad_check_multi_h(
            &mut model,
            &mut |m, f| m.visit_params_mut(f),
            &mut |m| {
                let g = Graph::new();
                let x = g.constant(x_t.clone());
                let out = m.forward_node(&g, &x, &mel, 7).unwrap();
                let tgt = g.constant(target.clone());
                let loss = out.sub(&tgt).square().mean();
                (g, loss)
            },
            // Deep composite: the small step resolves high-curvature
            // coordinates, the large one keeps tiny gradients above the
            // difference-quotient noise floor.
            &[3e-5, 5e-4],
        );
        assert!(
            report.max_rel_err < GRAD_TOL,
            "denoiser FD check failed: {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }
}
