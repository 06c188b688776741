//! Network layers: grouped KAN activation / transform, patch embedding, and
//! the convolutional blocks of the encoder/decoder path.

use std::cell::Cell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::spline::{kan_param_count, KanLinear, SplineGrid};
use crate::tensor::ops::{self, Activation};
use crate::tensor::{Tape, Tensor};

/// A tensor with a stable name inside the model tree; `trainable` is false
/// for buffers like batch-norm running statistics.
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

fn named(out: &mut Vec<NamedTensor>, prefix: &str, name: &str, t: &Tensor, trainable: bool) {
    out.push(NamedTensor {
        name: format!("{prefix}.{name}"),
        tensor: t.clone(),
        trainable,
    });
}

fn conv_weight<R: Rng>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Tensor::rand_uniform(&[c_out, c_in, k, k], -bound, bound, rng).as_param()
}

fn conv_bias<R: Rng>(c_out: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(&[c_out], -bound, bound, rng).as_param()
}

/// Reshape [B,C,H,W] into the token sequence [B, H*W, C].
pub fn spatial_to_tokens(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("expected [B,C,H,W], got {s:?}")));
    }
    let moved = ops::permute(tape, x, &[0, 2, 3, 1])?;
    ops::reshape(tape, &moved, &[s[0], s[2] * s[3], s[1]])
}

/// Reshape tokens [B, N, C] back to [B, C, h, w] with N == h*w.
pub fn tokens_to_spatial(tape: &Tape, t: &Tensor, spatial: (usize, usize)) -> Result<Tensor> {
    let s = t.shape();
    let (h, w) = spatial;
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::Dimension(format!(
            "token tensor {s:?} does not match spatial {h}x{w}"
        )));
    }
    let unflat = ops::reshape(tape, t, &[s[0], h, w, s[2]])?;
    ops::permute(tape, &unflat, &[0, 3, 1, 2])
}

// ---------------------------------------------------------------------------
// batch norm with running statistics
// ---------------------------------------------------------------------------

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Buffers, not parameters; updated in training forward passes.
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Tensor::ones(&[channels]).as_param(),
            beta: Tensor::zeros(&[channels]).as_param(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            let (y, stats) = ops::batch_norm2d_train(tape, x, &self.gamma, &self.beta, self.eps)?;
            let s = x.shape();
            let n = (s[0] * s[2] * s[3]) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            self.running_mean.update_data(|d| {
                for (r, &b) in d.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
            });
            self.running_var.update_data(|d| {
                for (r, &b) in d.iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * b * unbias;
                }
            });
            Ok(y)
        } else {
            let mean = self.running_mean.data_vec();
            let var = self.running_var.data_vec();
            ops::batch_norm2d_eval(tape, x, &self.gamma, &self.beta, &mean, &var, self.eps)
        }
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        named(out, prefix, "gamma", &self.gamma, true);
        named(out, prefix, "beta", &self.beta, true);
        named(out, prefix, "running_mean", &self.running_mean, false);
        named(out, prefix, "running_var", &self.running_var, false);
    }
}

// ---------------------------------------------------------------------------
// conv blocks
// ---------------------------------------------------------------------------

/// 3x3 stride-1 conv + batch norm + activation. Down/upsampling happens
/// outside the block (max-pool in the encoder, nearest upsample in the
/// decoder).
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: BatchNorm2d,
    pub act: Activation,
    in_ch: usize,
    out_ch: usize,
}

impl ConvBlock {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, act: Activation, rng: &mut R) -> ConvBlock {
        ConvBlock {
            weight: conv_weight(out_ch, in_ch, 3, rng),
            bias: conv_bias(out_ch, in_ch * 9, rng),
            bn: BatchNorm2d::new(out_ch),
            act,
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        let conv = ops::conv2d(tape, x, &self.weight, 1, 1)?;
        let bias = ops::reshape(tape, &self.bias, &[self.out_ch, 1, 1])?;
        let conv = ops::add(tape, &conv, &bias)?;
        let normed = self.bn.forward(tape, &conv, train)?;
        Ok(self.act.apply(tape, &normed))
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * 9 + self.out_ch + 2 * self.out_ch
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        named(out, prefix, "weight", &self.weight, true);
        named(out, prefix, "bias", &self.bias, true);
        self.bn.collect(&format!("{prefix}.bn"), out);
    }
}

/// 1x1 conv + batch norm + activation, used to fuse concatenated skip
/// connections back to the stage width.
pub struct FuseConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: BatchNorm2d,
    pub act: Activation,
    in_ch: usize,
    out_ch: usize,
}

impl FuseConv {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, act: Activation, rng: &mut R) -> FuseConv {
        FuseConv {
            weight: conv_weight(out_ch, in_ch, 1, rng),
            bias: conv_bias(out_ch, in_ch, rng),
            bn: BatchNorm2d::new(out_ch),
            act,
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        let conv = ops::conv2d(tape, x, &self.weight, 1, 0)?;
        let bias = ops::reshape(tape, &self.bias, &[self.out_ch, 1, 1])?;
        let conv = ops::add(tape, &conv, &bias)?;
        let normed = self.bn.forward(tape, &conv, train)?;
        Ok(self.act.apply(tape, &normed))
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch + self.out_ch + 2 * self.out_ch
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        named(out, prefix, "weight", &self.weight, true);
        named(out, prefix, "bias", &self.bias, true);
        self.bn.collect(&format!("{prefix}.bn"), out);
    }
}

// ---------------------------------------------------------------------------
// patch embedding
// ---------------------------------------------------------------------------

/// 3x3 stride-2 convolution that halves the resolution, followed by a layer
/// norm over the token channels.
pub struct PatchEmbedding {
    pub weight: Tensor,
    pub bias: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    in_ch: usize,
    out_ch: usize,
}

impl PatchEmbedding {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> PatchEmbedding {
        PatchEmbedding {
            weight: conv_weight(out_ch, in_ch, 3, rng),
            bias: conv_bias(out_ch, in_ch * 9, rng),
            ln_gamma: Tensor::ones(&[out_ch]).as_param(),
            ln_beta: Tensor::zeros(&[out_ch]).as_param(),
            in_ch,
            out_ch,
        }
    }

    /// Returns the token sequence [B, N, C_out] and the embedded spatial
    /// extents (ceil(H/2), ceil(W/2)).
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let conv = ops::conv2d(tape, x, &self.weight, 2, 1)?;
        let bias = ops::reshape(tape, &self.bias, &[self.out_ch, 1, 1])?;
        let conv = ops::add(tape, &conv, &bias)?;
        let s = conv.shape();
        let spatial = (s[2], s[3]);
        let tokens = spatial_to_tokens(tape, &conv)?;
        let tokens = ops::layer_norm(tape, &tokens, &self.ln_gamma, &self.ln_beta, 1e-5)?;
        Ok((tokens, spatial))
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * 9 + self.out_ch + 2 * self.out_ch
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        named(out, prefix, "weight", &self.weight, true);
        named(out, prefix, "bias", &self.bias, true);
        named(out, prefix, "ln_gamma", &self.ln_gamma, true);
        named(out, prefix, "ln_beta", &self.ln_beta, true);
    }
}

// ---------------------------------------------------------------------------
// grouped KAN activation
// ---------------------------------------------------------------------------

/// How GKA assigns spline functions to channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GkaMode {
    /// All channels in a group share one 1D spline.
    SharedPerGroup,
    /// Every channel carries its own 1D spline (diagonal operator).
    PerChannel,
}

/// Token-wise spline nonlinearity: each scalar channel value is passed
/// through a learnable 1D function; channel j's output depends only on
/// channel j's input.
pub struct GroupedKanActivation {
    pub channels: usize,
    pub groups: usize,
    pub mode: GkaMode,
    /// One 1->1 KanLinear per group (shared) or per channel (diagonal).
    pub splines: Vec<KanLinear>,
}

impl GroupedKanActivation {
    pub fn new<R: Rng>(
        channels: usize,
        groups: usize,
        mode: GkaMode,
        grid: SplineGrid,
        base_activation: Activation,
        rng: &mut R,
    ) -> Result<GroupedKanActivation> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Configuration(format!(
                "GKA groups {groups} must divide channels {channels}"
            )));
        }
        let count = match mode {
            GkaMode::SharedPerGroup => groups,
            GkaMode::PerChannel => channels,
        };
        let splines = (0..count)
            .map(|_| KanLinear::new(1, 1, grid, base_activation, rng))
            .collect();
        Ok(GroupedKanActivation {
            channels,
            groups,
            mode,
            splines,
        })
    }

    /// Apply to a token tensor [B, N, C]; output has the same shape.
    pub fn forward(&self, tape: &Tape, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::Dimension(format!(
                "GKA expects [B,N,{}], got {s:?}",
                self.channels
            )));
        }
        let m = s[0] * s[1];
        let flat = ops::reshape(tape, t, &[m, self.channels])?;
        let cg = self.channels / self.groups;
        let mut pieces = Vec::with_capacity(self.channels);
        match self.mode {
            GkaMode::SharedPerGroup => {
                for g in 0..self.groups {
                    let slice = ops::narrow(tape, &flat, 1, g * cg, cg)?;
                    let col = ops::reshape(tape, &slice, &[m * cg, 1])?;
                    let mapped = self.splines[g].forward(tape, &col)?;
                    pieces.push(ops::reshape(tape, &mapped, &[m, cg])?);
                }
            }
            GkaMode::PerChannel => {
                for c in 0..self.channels {
                    let col = ops::narrow(tape, &flat, 1, c, 1)?;
                    pieces.push(self.splines[c].forward(tape, &col)?);
                }
            }
        }
        let refs: Vec<&Tensor> = pieces.iter().collect();
        let joined = ops::concat(tape, &refs, 1)?;
        ops::reshape(tape, &joined, &s)
    }

    pub fn param_count(&self) -> usize {
        self.splines.iter().map(|k| k.param_count()).sum()
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        for (i, k) in self.splines.iter().enumerate() {
            for (name, t) in k.parameters() {
                named(out, prefix, &format!("spline{i}.{name}"), &t, true);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// grouped KAN transform
// ---------------------------------------------------------------------------

/// The channel-mixing stage inside a GKT layer. `Grouped` is the paper's
/// operator; `Mlp` and `Identity` exist for the ablation variants.
pub enum TokenMixStage {
    Grouped(Vec<KanLinear>),
    Mlp { weight: Tensor, bias: Tensor },
    Identity,
}

/// Which channel-mixing stage a GKT layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    GroupedKan,
    Mlp,
    Identity,
}

/// Construction switches for [`GroupedKanTransform`]; the defaults build the
/// full layer.
#[derive(Clone, Copy, Debug)]
pub struct GktOptions {
    pub stage: StageKind,
    pub use_pwconv: bool,
    pub use_dwconv: bool,
    pub sigma: Activation,
}

impl Default for GktOptions {
    fn default() -> Self {
        GktOptions {
            stage: StageKind::GroupedKan,
            use_pwconv: true,
            use_dwconv: true,
            sigma: Activation::Gelu,
        }
    }
}

/// One Grouped KAN Transform layer: per-group C_g -> C_g spline mapping,
/// then pointwise conv, nonlinearity, depthwise conv for cross-group and
/// spatial mixing, and a residual + layer norm.
pub struct GroupedKanTransform {
    pub channels: usize,
    pub groups: usize,
    pub stage: TokenMixStage,
    pub pw: Option<(Tensor, Tensor)>,
    pub dw: Option<(Tensor, Tensor)>,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub sigma: Activation,
    forward_calls: Cell<usize>,
}

impl GroupedKanTransform {
    pub fn new<R: Rng>(
        channels: usize,
        groups: usize,
        grid: SplineGrid,
        base_activation: Activation,
        opts: GktOptions,
        rng: &mut R,
    ) -> Result<GroupedKanTransform> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Configuration(format!(
                "GKT groups {groups} must divide channels {channels}"
            )));
        }
        let cg = channels / groups;
        let stage = match opts.stage {
            StageKind::GroupedKan => TokenMixStage::Grouped(
                (0..groups)
                    .map(|_| KanLinear::new(cg, cg, grid, base_activation, rng))
                    .collect(),
            ),
            StageKind::Mlp => {
                let bound = 1.0 / (channels as f64).sqrt();
                TokenMixStage::Mlp {
                    weight: Tensor::rand_uniform(&[channels, channels], -bound, bound, rng)
                        .as_param(),
                    bias: Tensor::rand_uniform(&[channels], -bound, bound, rng).as_param(),
                }
            }
            StageKind::Identity => TokenMixStage::Identity,
        };
        let pw = opts.use_pwconv.then(|| {
            (
                conv_weight(channels, channels, 1, rng),
                conv_bias(channels, channels, rng),
            )
        });
        let dw = opts.use_dwconv.then(|| {
            let bound = (6.0 / 9.0f64).sqrt();
            (
                Tensor::rand_uniform(&[channels, 1, 3, 3], -bound, bound, rng).as_param(),
                conv_bias(channels, 9, rng),
            )
        });
        Ok(GroupedKanTransform {
            channels,
            groups,
            stage,
            pw,
            dw,
            ln_gamma: Tensor::ones(&[channels]).as_param(),
            ln_beta: Tensor::zeros(&[channels]).as_param(),
            sigma: opts.sigma,
            forward_calls: Cell::new(0),
        })
    }

    /// The grouped spline stage alone, on flattened tokens [M, C]. Output
    /// channels in group g depend only on input channels in group g.
    pub fn spline_stage_forward(&self, tape: &Tape, flat: &Tensor) -> Result<Tensor> {
        let s = flat.shape();
        if s.len() != 2 || s[1] != self.channels {
            return Err(Error::Dimension(format!(
                "spline stage expects [M,{}], got {s:?}",
                self.channels
            )));
        }
        match &self.stage {
            TokenMixStage::Grouped(kans) => {
                let cg = self.channels / self.groups;
                let mut pieces = Vec::with_capacity(self.groups);
                for (g, kan) in kans.iter().enumerate() {
                    let slice = ops::narrow(tape, flat, 1, g * cg, cg)?;
                    pieces.push(kan.forward(tape, &slice)?);
                }
                let refs: Vec<&Tensor> = pieces.iter().collect();
                ops::concat(tape, &refs, 1)
            }
            TokenMixStage::Mlp { weight, bias } => {
                let wt = ops::permute(tape, weight, &[1, 0])?;
                let out = ops::matmul(tape, flat, &wt)?;
                ops::add(tape, &out, bias)
            }
            TokenMixStage::Identity => Ok(flat.clone()),
        }
    }

    /// Full layer on tokens [B, N, C] with N == h*w.
    pub fn forward(&self, tape: &Tape, x: &Tensor, spatial: (usize, usize)) -> Result<Tensor> {
        self.forward_calls.set(self.forward_calls.get() + 1);
        let s = x.shape();
        let (h, w) = spatial;
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::Dimension(format!(
                "GKT expects [B,N,{}], got {s:?}",
                self.channels
            )));
        }
        if s[1] != h * w {
            return Err(Error::Dimension(format!(
                "GKT got N={} tokens but spatial {h}x{w}",
                s[1]
            )));
        }
        let m = s[0] * s[1];
        let flat = ops::reshape(tape, x, &[m, self.channels])?;
        let mixed = self.spline_stage_forward(tape, &flat)?;
        let z = ops::reshape(tape, &mixed, &s)?;

        let zmap = tokens_to_spatial(tape, &z, spatial)?;
        let after_pw = match &self.pw {
            Some((wt, bias)) => {
                let conv = ops::conv2d(tape, &zmap, wt, 1, 0)?;
                let b = ops::reshape(tape, bias, &[self.channels, 1, 1])?;
                ops::add(tape, &conv, &b)?
            }
            None => zmap,
        };
        let activated = self.sigma.apply(tape, &after_pw);
        let after_dw = match &self.dw {
            Some((wt, bias)) => {
                let conv = ops::depthwise_conv2d(tape, &activated, wt, 1, 1)?;
                let b = ops::reshape(tape, bias, &[self.channels, 1, 1])?;
                ops::add(tape, &conv, &b)?
            }
            None => activated,
        };
        let y = spatial_to_tokens(tape, &after_dw)?;

        let resid = ops::add(tape, &y, x)?;
        ops::layer_norm(tape, &resid, &self.ln_gamma, &self.ln_beta, 1e-5)
    }

    /// Times `forward` has run (used by structural tests).
    pub fn forward_count(&self) -> usize {
        self.forward_calls.get()
    }

    pub fn param_count(&self) -> usize {
        let pw = self
            .pw
            .as_ref()
            .map_or(0, |_| self.channels * self.channels + self.channels);
        let dw = self.dw.as_ref().map_or(0, |_| 9 * self.channels + self.channels);
        self.spline_stage_param_count() + pw + dw + 2 * self.channels
    }

    /// Parameter count of the channel-mixing stage alone.
    pub fn spline_stage_param_count(&self) -> usize {
        match &self.stage {
            TokenMixStage::Grouped(kans) => kans.iter().map(|k| k.param_count()).sum(),
            TokenMixStage::Mlp { .. } => self.channels * self.channels + self.channels,
            TokenMixStage::Identity => 0,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        match &self.stage {
            TokenMixStage::Grouped(kans) => {
                for (g, k) in kans.iter().enumerate() {
                    for (name, t) in k.parameters() {
                        named(out, prefix, &format!("kan{g}.{name}"), &t, true);
                    }
                }
            }
            TokenMixStage::Mlp { weight, bias } => {
                named(out, prefix, "mlp.weight", weight, true);
                named(out, prefix, "mlp.bias", bias, true);
            }
            TokenMixStage::Identity => {}
        }
        if let Some((wt, b)) = &self.pw {
            named(out, prefix, "pw.weight", wt, true);
            named(out, prefix, "pw.bias", b, true);
        }
        if let Some((wt, b)) = &self.dw {
            named(out, prefix, "dw.weight", wt, true);
            named(out, prefix, "dw.bias", b, true);
        }
        named(out, prefix, "ln_gamma", &self.ln_gamma, true);
        named(out, prefix, "ln_beta", &self.ln_beta, true);
    }
}

/// Analytic parameter count of one full GKT layer at width `c` with `g`
/// groups: spline stage `c^2 (g+k+1) / g` plus pointwise conv (c^2 + c),
/// depthwise conv (9c + c), and layer norm (2c).
pub fn gkt_param_count(c: usize, g: usize, grid: &SplineGrid) -> Result<usize> {
    Ok(gkt_spline_param_count(c, g, grid)? + (c * c + c) + (9 * c + c) + 2 * c)
}

/// Spline-stage parameter count alone: `c^2 (g+k+1) / g`.
pub fn gkt_spline_param_count(c: usize, g: usize, grid: &SplineGrid) -> Result<usize> {
    if g == 0 || c % g != 0 {
        return Err(Error::Configuration(format!(
            "GKT groups {g} must divide channels {c}"
        )));
    }
    let cg = c / g;
    Ok(g * kan_param_count(cg, cg, grid))
}

// ---------------------------------------------------------------------------
// Group ToK-KAN block
// ---------------------------------------------------------------------------

/// Activation inserted once after patch embedding.
pub enum EmbedActivation {
    Gka(GroupedKanActivation),
    Fixed(Activation),
    None,
}

impl EmbedActivation {
    fn forward(&self, tape: &Tape, t: &Tensor) -> Result<Tensor> {
        match self {
            EmbedActivation::Gka(gka) => gka.forward(tape, t),
            EmbedActivation::Fixed(act) => Ok(act.apply(tape, t)),
            EmbedActivation::None => Ok(t.clone()),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            EmbedActivation::Gka(g) => g.param_count(),
            _ => 0,
        }
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        if let EmbedActivation::Gka(g) = self {
            g.collect(prefix, out);
        }
    }
}

/// Encoder bottleneck block: patch embedding, one grouped KAN activation,
/// then `n` chained grouped KAN transforms; returns a spatial map at half
/// the input resolution.
pub struct TokKanBlock {
    pub embed: PatchEmbedding,
    pub act: EmbedActivation,
    pub layers: Vec<GroupedKanTransform>,
}

impl TokKanBlock {
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let (mut tokens, spatial) = self.embed.forward(tape, x)?;
        tokens = self.act.forward(tape, &tokens)?;
        for layer in &self.layers {
            tokens = layer.forward(tape, &tokens, spatial)?;
        }
        tokens_to_spatial(tape, &tokens, spatial)
    }

    pub fn param_count(&self) -> usize {
        self.embed.param_count()
            + self.act.param_count()
            + self.layers.iter().map(|l| l.param_count()).sum::<usize>()
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        self.embed.collect(&format!("{prefix}.embed"), out);
        self.act.collect(&format!("{prefix}.gka"), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.gkt{i}"), out);
        }
    }
}
