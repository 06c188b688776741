//! The GroupKAN encoder-decoder: configuration, assembly, forward inference,
//! parameter/FLOP accounting, and checkpoint serialization.
//!
//! Layout (input resolution H, W divisible by 32):
//!
//! ```text
//! enc1 conv(in -> C1/8) @H      -> pool -> s1 @H/2
//! enc2 conv(C1/8 -> C1/4) @H/2  -> pool -> s2 @H/4
//! enc3 conv(C1/4 -> C1) @H/4    -> pool -> s3 @H/8
//! tok1 [patch embed + GKA + GKT x n] (C1 -> C2)  -> t1 @H/16
//! tok2 [patch embed + GKA + GKT x n] (C2 -> C3)  -> t2 @H/32
//! dtok_c3: GKT x n @C3,H/32     (decoder mirror of tok2)
//! dec1: conv(C3->C3), conv(C3->C2), up, concat t1, fuse -> C2 @H/16
//! dtok_c2: GKT x n @C2,H/16     (decoder mirror of tok1)
//! dec2: conv(C2->C2), conv(C2->C1), up, concat s3, fuse -> C1 @H/8
//! dec3: conv(C1->C1), conv(C1->C1/4), up, concat s2, fuse -> C1/4 @H/4
//! dec4: conv(C1/4->C1/4), conv(C1/4->C1/8), up, concat s1, fuse -> C1/8 @H/2
//! dec5: conv(C1/8->C1/8) @H/2, up -> @H, 1x1 conv -> num_classes
//! ```

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    ConvBlock, EmbedActivation, FuseConv, GkaMode, GktOptions, GroupedKanActivation,
    GroupedKanTransform, NamedTensor, PatchEmbedding, StageKind, TokKanBlock,
    spatial_to_tokens, tokens_to_spatial,
};
use crate::spline::SplineGrid;
use crate::tensor::kernels::bilinear_resize;
use crate::tensor::ops::{self, Activation};
use crate::tensor::serialize::{read_u32, read_u64, write_u32, write_u64};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor};

/// Activation applied once after each patch embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedActKind {
    Gka,
    NoActivation,
    Relu,
    Gelu,
}

impl EmbedActKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbedActKind::Gka => "gka",
            EmbedActKind::NoActivation => "none",
            EmbedActKind::Relu => "relu",
            EmbedActKind::Gelu => "gelu",
        }
    }
}

impl FromStr for EmbedActKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gka" => Ok(EmbedActKind::Gka),
            "none" => Ok(EmbedActKind::NoActivation),
            "relu" => Ok(EmbedActKind::Relu),
            "gelu" => Ok(EmbedActKind::Gelu),
            other => Err(Error::Configuration(format!(
                "unknown embed activation '{other}' (expected gka|none|relu|gelu)"
            ))),
        }
    }
}

fn stage_kind_name(k: StageKind) -> &'static str {
    match k {
        StageKind::GroupedKan => "gkt",
        StageKind::Mlp => "mlp",
        StageKind::Identity => "identity",
    }
}

fn stage_kind_from_str(s: &str) -> Result<StageKind> {
    match s {
        "gkt" => Ok(StageKind::GroupedKan),
        "mlp" => Ok(StageKind::Mlp),
        "identity" => Ok(StageKind::Identity),
        other => Err(Error::Configuration(format!(
            "unknown token layer kind '{other}' (expected gkt|mlp|identity)"
        ))),
    }
}

/// Full architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupKanConfig {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub g_gka: usize,
    pub g_gkt: usize,
    pub n_gkt_layers: usize,
    pub grid_intervals: usize,
    pub spline_order: usize,
    pub grid_range: (f64, f64),
    pub input_channels: usize,
    pub num_classes: usize,
    pub gka_mode: GkaMode,
    /// Nonlinearity between the pointwise and depthwise convs of each GKT.
    pub sigma: Activation,
    /// Base activation inside every learnable spline edge.
    pub base_activation: Activation,
    pub embed_activation: EmbedActKind,
    /// Per-layer channel-mixing stage inside the ToK-KAN blocks; must have
    /// `n_gkt_layers` entries. All-GroupedKan is the paper configuration.
    pub token_layers: Vec<StageKind>,
    pub use_pwconv: bool,
    pub use_dwconv: bool,
}

impl GroupKanConfig {
    pub fn with_channels(c1: usize, c2: usize, c3: usize) -> GroupKanConfig {
        GroupKanConfig {
            c1,
            c2,
            c3,
            g_gka: 16,
            g_gkt: 16,
            n_gkt_layers: 3,
            grid_intervals: 5,
            spline_order: 3,
            grid_range: (-1.0, 1.0),
            input_channels: 3,
            num_classes: 1,
            gka_mode: GkaMode::SharedPerGroup,
            sigma: Activation::Gelu,
            base_activation: Activation::Silu,
            embed_activation: EmbedActKind::Gka,
            token_layers: vec![StageKind::GroupedKan; 3],
            use_pwconv: true,
            use_dwconv: true,
        }
    }

    /// Desk-scale preset for smoke runs and synthetic-data training.
    pub fn tiny() -> GroupKanConfig {
        let mut cfg = GroupKanConfig::with_channels(32, 32, 64);
        cfg.g_gka = 4;
        cfg.g_gkt = 4;
        cfg.n_gkt_layers = 2;
        cfg.token_layers = vec![StageKind::GroupedKan; 2];
        cfg.input_channels = 1;
        cfg
    }

    /// Small variant (C1/C2/C3 = 64/96/128).
    pub fn small() -> GroupKanConfig {
        GroupKanConfig::with_channels(64, 96, 128)
    }

    /// Base variant (C1/C2/C3 = 128/160/256).
    pub fn base() -> GroupKanConfig {
        GroupKanConfig::with_channels(128, 160, 256)
    }

    /// Large variant (C1/C2/C3 = 256/320/512).
    pub fn large() -> GroupKanConfig {
        GroupKanConfig::with_channels(256, 320, 512)
    }

    pub fn preset(name: &str) -> Result<GroupKanConfig> {
        match name {
            "tiny" => Ok(GroupKanConfig::tiny()),
            "s" | "small" => Ok(GroupKanConfig::small()),
            "base" => Ok(GroupKanConfig::base()),
            "l" | "large" => Ok(GroupKanConfig::large()),
            other => Err(Error::Configuration(format!(
                "unknown preset '{other}' (expected tiny|s|base|l)"
            ))),
        }
    }

    pub fn grid(&self) -> Result<SplineGrid> {
        SplineGrid::new(
            self.grid_range.0,
            self.grid_range.1,
            self.grid_intervals,
            self.spline_order,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 % 8 != 0 {
            return Err(Error::Configuration(format!(
                "C1={} must be divisible by 8 (encoder uses C1/8, C1/4, C1)",
                self.c1
            )));
        }
        for (name, c) in [("C2", self.c2), ("C3", self.c3)] {
            for (gname, g) in [("G_GKA", self.g_gka), ("G_GKT", self.g_gkt)] {
                if g == 0 || c % g != 0 {
                    return Err(Error::Configuration(format!(
                        "{name}={c} is not divisible by {gname}={g}"
                    )));
                }
            }
        }
        if self.n_gkt_layers == 0 {
            return Err(Error::Configuration("n_gkt_layers must be >= 1".into()));
        }
        if self.token_layers.len() != self.n_gkt_layers {
            return Err(Error::Configuration(format!(
                "token_layers has {} entries but n_gkt_layers={}",
                self.token_layers.len(),
                self.n_gkt_layers
            )));
        }
        if self.input_channels == 0 || self.num_classes == 0 {
            return Err(Error::Configuration(
                "input_channels and num_classes must be >= 1".into(),
            ));
        }
        self.grid()?;
        Ok(())
    }

    /// Canonical text form (stable key order) used in checkpoints and the
    /// frozen run config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "c1 = {}", self.c1);
        let _ = writeln!(s, "c2 = {}", self.c2);
        let _ = writeln!(s, "c3 = {}", self.c3);
        let _ = writeln!(s, "g_gka = {}", self.g_gka);
        let _ = writeln!(s, "g_gkt = {}", self.g_gkt);
        let _ = writeln!(s, "n_gkt_layers = {}", self.n_gkt_layers);
        let _ = writeln!(s, "grid_intervals = {}", self.grid_intervals);
        let _ = writeln!(s, "spline_order = {}", self.spline_order);
        let _ = writeln!(s, "grid_min = {}", self.grid_range.0);
        let _ = writeln!(s, "grid_max = {}", self.grid_range.1);
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(
            s,
            "gka_mode = {}",
            match self.gka_mode {
                GkaMode::SharedPerGroup => "shared",
                GkaMode::PerChannel => "per_channel",
            }
        );
        let _ = writeln!(s, "sigma = {}", self.sigma.name());
        let _ = writeln!(s, "base_activation = {}", self.base_activation.name());
        let _ = writeln!(s, "embed_activation = {}", self.embed_activation.name());
        let kinds: Vec<&str> = self.token_layers.iter().map(|&k| stage_kind_name(k)).collect();
        let _ = writeln!(s, "token_layers = {}", kinds.join(","));
        let _ = writeln!(s, "use_pwconv = {}", self.use_pwconv);
        let _ = writeln!(s, "use_dwconv = {}", self.use_dwconv);
        s
    }

    /// Apply one `key = value` assignment (keys as produced by `to_text`).
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| {
                Error::Configuration(format!("invalid value '{v}' for key '{key}'"))
            })
        }
        match key {
            "c1" => self.c1 = parse(key, value)?,
            "c2" => self.c2 = parse(key, value)?,
            "c3" => self.c3 = parse(key, value)?,
            "g_gka" => self.g_gka = parse(key, value)?,
            "g_gkt" => self.g_gkt = parse(key, value)?,
            "n_gkt_layers" => {
                self.n_gkt_layers = parse(key, value)?;
                self.token_layers = vec![StageKind::GroupedKan; self.n_gkt_layers];
            }
            "grid_intervals" => self.grid_intervals = parse(key, value)?,
            "spline_order" => self.spline_order = parse(key, value)?,
            "grid_min" => self.grid_range.0 = parse(key, value)?,
            "grid_max" => self.grid_range.1 = parse(key, value)?,
            "input_channels" => self.input_channels = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "gka_mode" => {
                self.gka_mode = match value {
                    "shared" => GkaMode::SharedPerGroup,
                    "per_channel" => GkaMode::PerChannel,
                    other => {
                        return Err(Error::Configuration(format!(
                            "invalid gka_mode '{other}' (expected shared|per_channel)"
                        )))
                    }
                }
            }
            "sigma" => self.sigma = value.parse()?,
            "base_activation" => self.base_activation = value.parse()?,
            "embed_activation" => self.embed_activation = value.parse()?,
            "token_layers" => {
                let kinds: Result<Vec<StageKind>> =
                    value.split(',').map(|s| stage_kind_from_str(s.trim())).collect();
                self.token_layers = kinds?;
                self.n_gkt_layers = self.token_layers.len();
            }
            "use_pwconv" => self.use_pwconv = parse(key, value)?,
            "use_dwconv" => self.use_dwconv = parse(key, value)?,
            other => {
                return Err(Error::Configuration(format!(
                    "unknown model config key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Parse the canonical text form produced by `to_text`.
    pub fn from_text(text: &str) -> Result<GroupKanConfig> {
        let mut cfg = GroupKanConfig::base();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('[') || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Configuration(format!("expected 'key = value', got '{line}'"))
            })?;
            cfg.set_key(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// network
// ---------------------------------------------------------------------------

struct DecoderStage {
    conv_a: ConvBlock,
    conv_b: ConvBlock,
    fuse: FuseConv,
    in_ch: usize,
    out_ch: usize,
    skip_ch: usize,
}

impl DecoderStage {
    fn new(in_ch: usize, out_ch: usize, skip_ch: usize, rng: &mut ChaCha8Rng) -> DecoderStage {
        DecoderStage {
            conv_a: ConvBlock::new(in_ch, in_ch, Activation::Relu, rng),
            conv_b: ConvBlock::new(in_ch, out_ch, Activation::Relu, rng),
            fuse: FuseConv::new(out_ch + skip_ch, out_ch, Activation::Relu, rng),
            in_ch,
            out_ch,
            skip_ch,
        }
    }

    fn forward(&self, tape: &Tape, x: &Tensor, skip: &Tensor, train: bool) -> Result<Tensor> {
        let a = self.conv_a.forward(tape, x, train)?;
        let b = self.conv_b.forward(tape, &a, train)?;
        let up = ops::upsample_nearest2(tape, &b)?;
        let cat = ops::concat(tape, &[&up, skip], 1)?;
        self.fuse.forward(tape, &cat, train)
    }

    fn param_count(&self) -> usize {
        self.conv_a.param_count() + self.conv_b.param_count() + self.fuse.param_count()
    }

    /// Conv MAC*2 with 3x3 convs at `(h, w)` and the 1x1 fuse at `(2h, 2w)`.
    fn flops(&self, h: usize, w: usize) -> u64 {
        let pre = (h * w) as u64;
        let post = (4 * h * w) as u64;
        2 * (self.in_ch * self.in_ch * 9) as u64 * pre
            + 2 * (self.in_ch * self.out_ch * 9) as u64 * pre
            + 2 * ((self.out_ch + self.skip_ch) * self.out_ch) as u64 * post
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        self.conv_a.collect(&format!("{prefix}.conv_a"), out);
        self.conv_b.collect(&format!("{prefix}.conv_b"), out);
        self.fuse.collect(&format!("{prefix}.fuse"), out);
    }
}

/// Per-component parameter or FLOP totals. Patch embeddings count toward the
/// encoder; `gkt_spline` / `gkt_conv` cover the GKT layers of both the
/// encoder blocks and their decoder mirrors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Breakdown {
    pub encoder: u64,
    pub gka: u64,
    pub gkt_spline: u64,
    pub gkt_conv: u64,
    pub decoder: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.encoder + self.gka + self.gkt_spline + self.gkt_conv + self.decoder
    }
}

/// The assembled network. Immutable during forward passes; training mutates
/// parameters between passes through the optimizer.
pub struct GroupKanNet {
    pub cfg: GroupKanConfig,
    enc1: ConvBlock,
    enc2: ConvBlock,
    enc3: ConvBlock,
    tok1: TokKanBlock,
    tok2: TokKanBlock,
    dtok_c3: Vec<GroupedKanTransform>,
    dtok_c2: Vec<GroupedKanTransform>,
    dec1: DecoderStage,
    dec2: DecoderStage,
    dec3: DecoderStage,
    dec4: DecoderStage,
    dec5: ConvBlock,
    final_w: Tensor,
    final_b: Tensor,
}

/// Whether a forward pass uses batch statistics (training) or running
/// statistics (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn make_tok_block(
    cfg: &GroupKanConfig,
    in_ch: usize,
    out_ch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TokKanBlock> {
    let grid = cfg.grid()?;
    let act = match cfg.embed_activation {
        EmbedActKind::Gka => EmbedActivation::Gka(GroupedKanActivation::new(
            out_ch,
            cfg.g_gka,
            cfg.gka_mode,
            grid,
            cfg.base_activation,
            rng,
        )?),
        EmbedActKind::NoActivation => EmbedActivation::None,
        EmbedActKind::Relu => EmbedActivation::Fixed(Activation::Relu),
        EmbedActKind::Gelu => EmbedActivation::Fixed(Activation::Gelu),
    };
    Ok(TokKanBlock {
        embed: PatchEmbedding::new(in_ch, out_ch, rng),
        act,
        layers: make_gkt_stack(cfg, out_ch, rng)?,
    })
}

fn make_gkt_stack(
    cfg: &GroupKanConfig,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupedKanTransform>> {
    let grid = cfg.grid()?;
    cfg.token_layers
        .iter()
        .map(|&kind| {
            GroupedKanTransform::new(
                channels,
                cfg.g_gkt,
                grid,
                cfg.base_activation,
                GktOptions {
                    stage: kind,
                    use_pwconv: cfg.use_pwconv,
                    use_dwconv: cfg.use_dwconv,
                    sigma: cfg.sigma,
                },
                rng,
            )
        })
        .collect()
}

/// Build a network with deterministic, seed-driven initialization.
pub fn build(cfg: &GroupKanConfig, seed: u64) -> Result<GroupKanNet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c1, c2, c3) = (cfg.c1, cfg.c2, cfg.c3);
    let (c8, c4) = (c1 / 8, c1 / 4);
    let enc1 = ConvBlock::new(cfg.input_channels, c8, Activation::Relu, &mut rng);
    let enc2 = ConvBlock::new(c8, c4, Activation::Relu, &mut rng);
    let enc3 = ConvBlock::new(c4, c1, Activation::Relu, &mut rng);
    let tok1 = make_tok_block(cfg, c1, c2, &mut rng)?;
    let tok2 = make_tok_block(cfg, c2, c3, &mut rng)?;
    let dtok_c3 = make_gkt_stack(cfg, c3, &mut rng)?;
    let dtok_c2 = make_gkt_stack(cfg, c2, &mut rng)?;
    let dec1 = DecoderStage::new(c3, c2, c2, &mut rng);
    let dec2 = DecoderStage::new(c2, c1, c1, &mut rng);
    let dec3 = DecoderStage::new(c1, c4, c4, &mut rng);
    let dec4 = DecoderStage::new(c4, c8, c8, &mut rng);
    let dec5 = ConvBlock::new(c8, c8, Activation::Relu, &mut rng);
    let fan_in = c8 as f64;
    let bound = (1.0 / fan_in).sqrt();
    let final_w = Tensor::rand_uniform(&[cfg.num_classes, c8, 1, 1], -bound, bound, &mut rng)
        .as_param();
    let final_b = Tensor::rand_uniform(&[cfg.num_classes], -bound, bound, &mut rng).as_param();
    Ok(GroupKanNet {
        cfg: cfg.clone(),
        enc1,
        enc2,
        enc3,
        tok1,
        tok2,
        dtok_c3,
        dtok_c2,
        dec1,
        dec2,
        dec3,
        dec4,
        dec5,
        final_w,
        final_b,
    })
}

impl GroupKanNet {
    fn run_gkt_stack(
        &self,
        tape: &Tape,
        layers: &[GroupedKanTransform],
        x: &Tensor,
    ) -> Result<Tensor> {
        let s = x.shape();
        let spatial = (s[2], s[3]);
        let mut tokens = spatial_to_tokens(tape, x)?;
        for layer in layers {
            tokens = layer.forward(tape, &tokens, spatial)?;
        }
        tokens_to_spatial(tape, &tokens, spatial)
    }

    /// Forward pass returning logits plus the bottleneck feature map (the
    /// deepest encoder representation, used for activation-map analysis).
    pub fn forward_with_bottleneck(
        &self,
        tape: &Tape,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Tensor)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.input_channels {
            return Err(Error::Dimension(format!(
                "forward expects [B,{},H,W], got {s:?}",
                self.cfg.input_channels
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Dimension(format!(
                "input resolution {h}x{w} must be a multiple of 32 (five 2x resolution changes)"
            )));
        }
        let train = mode == Mode::Train;

        let s1 = ops::max_pool2d(tape, &self.enc1.forward(tape, x, train)?)?;
        let s2 = ops::max_pool2d(tape, &self.enc2.forward(tape, &s1, train)?)?;
        let s3 = ops::max_pool2d(tape, &self.enc3.forward(tape, &s2, train)?)?;

        let t1 = self.tok1.forward(tape, &s3)?;
        let t2 = self.tok2.forward(tape, &t1)?;

        let mid = self.run_gkt_stack(tape, &self.dtok_c3, &t2)?;
        let d1 = self.dec1.forward(tape, &mid, &t1, train)?;
        let d1 = self.run_gkt_stack(tape, &self.dtok_c2, &d1)?;
        let d2 = self.dec2.forward(tape, &d1, &s3, train)?;
        let d3 = self.dec3.forward(tape, &d2, &s2, train)?;
        let d4 = self.dec4.forward(tape, &d3, &s1, train)?;

        let d5 = self.dec5.forward(tape, &d4, train)?;
        let up = ops::upsample_nearest2(tape, &d5)?;
        let logits = ops::conv2d(tape, &up, &self.final_w, 1, 0)?;
        let bias = ops::reshape(tape, &self.final_b, &[self.cfg.num_classes, 1, 1])?;
        let logits = ops::add(tape, &logits, &bias)?;
        Ok((logits, t2))
    }

    /// Segmentation logits at the input resolution.
    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_with_bottleneck(tape, x, mode)?.0)
    }

    /// Mean absolute bottleneck activation, bilinearly upsampled to the
    /// input resolution. Takes a single sample [1, C_in, H, W].
    pub fn activation_map(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::Dimension(format!(
                "activation_map expects a single sample [1,C,H,W], got {s:?}"
            )));
        }
        let tape = Tape::inference();
        let (_, bottleneck) = self.forward_with_bottleneck(&tape, x, Mode::Eval)?;
        let bs = bottleneck.shape();
        let (c, bh, bw) = (bs[1], bs[2], bs[3]);
        let data = bottleneck.data();
        let mut map = vec![0.0; bh * bw];
        for ci in 0..c {
            for (i, m) in map.iter_mut().enumerate() {
                *m += data[ci * bh * bw + i].abs();
            }
        }
        for m in map.iter_mut() {
            *m /= c as f64;
        }
        let resized = bilinear_resize(&map, bh, bw, s[2], s[3]);
        Tensor::from_vec(&[s[2], s[3]], resized)
    }

    /// Every tensor in the model with a stable name; the walk order is the
    /// checkpoint order.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.enc1.collect("enc1", &mut out);
        self.enc2.collect("enc2", &mut out);
        self.enc3.collect("enc3", &mut out);
        self.tok1.collect("tok1", &mut out);
        self.tok2.collect("tok2", &mut out);
        for (i, l) in self.dtok_c3.iter().enumerate() {
            l.collect(&format!("dtok_c3.gkt{i}"), &mut out);
        }
        for (i, l) in self.dtok_c2.iter().enumerate() {
            l.collect(&format!("dtok_c2.gkt{i}"), &mut out);
        }
        self.dec1.collect("dec1", &mut out);
        self.dec2.collect("dec2", &mut out);
        self.dec3.collect("dec3", &mut out);
        self.dec4.collect("dec4", &mut out);
        self.dec5.collect("dec5", &mut out);
        out.push(NamedTensor {
            name: "final.weight".into(),
            tensor: self.final_w.clone(),
            trainable: true,
        });
        out.push(NamedTensor {
            name: "final.bias".into(),
            tensor: self.final_b.clone(),
            trainable: true,
        });
        out
    }

    /// Trainable parameters in walk order.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_tensors()
            .into_iter()
            .filter(|n| n.trainable)
            .map(|n| n.tensor)
            .collect()
    }

    pub fn zero_grads(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    /// Analytic per-component trainable-parameter counts.
    pub fn count_params(&self) -> Breakdown {
        let encoder = (self.enc1.param_count()
            + self.enc2.param_count()
            + self.enc3.param_count()
            + self.tok1.embed.param_count()
            + self.tok2.embed.param_count()) as u64;
        let gka = (self.tok1.act_param_count() + self.tok2.act_param_count()) as u64;
        let mut gkt_spline = 0u64;
        let mut gkt_conv = 0u64;
        for l in self.all_gkt_layers() {
            let spline = l.spline_stage_param_count() as u64;
            gkt_spline += spline;
            gkt_conv += l.param_count() as u64 - spline;
        }
        let decoder = (self.dec1.param_count()
            + self.dec2.param_count()
            + self.dec3.param_count()
            + self.dec4.param_count()
            + self.dec5.param_count()
            + self.final_w.numel()
            + self.final_b.numel()) as u64;
        Breakdown {
            encoder,
            gka,
            gkt_spline,
            gkt_conv,
            decoder,
        }
    }

    fn all_gkt_layers(&self) -> impl Iterator<Item = &GroupedKanTransform> {
        self.tok1
            .layers
            .iter()
            .chain(self.tok2.layers.iter())
            .chain(self.dtok_c3.iter())
            .chain(self.dtok_c2.iter())
    }

    /// Analytic FLOPs (multiply-accumulates x 2) of a forward pass at the
    /// given input resolution. Counts the MAC-bearing stages (convolutions,
    /// spline-coefficient application, GKA/base-weight application);
    /// normalization, activation, pooling, and bias terms are excluded.
    pub fn count_flops(&self, h: usize, w: usize) -> Result<Breakdown> {
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Dimension(format!(
                "input resolution {h}x{w} must be a multiple of 32"
            )));
        }
        let cfg = &self.cfg;
        let (c1, c2, c3) = (cfg.c1 as u64, cfg.c2 as u64, cfg.c3 as u64);
        let (c8, c4) = (c1 / 8, c1 / 4);
        let ppe = (cfg.grid_intervals + cfg.spline_order + 1) as u64;
        let conv = |cin: u64, cout: u64, k: u64, pix: u64| 2 * cin * cout * k * k * pix;

        let pix0 = (h * w) as u64;
        let encoder = conv(cfg.input_channels as u64, c8, 3, pix0)
            + conv(c8, c4, 3, pix0 / 4)
            + conv(c4, c1, 3, pix0 / 16)
            + conv(c1, c2, 3, pix0 / 256) // patch embed 1 output at H/16
            + conv(c2, c3, 3, pix0 / 1024); // patch embed 2 output at H/32

        let n1 = pix0 / 256; // tokens at H/16
        let n2 = pix0 / 1024; // tokens at H/32
        let gka = match cfg.embed_activation {
            EmbedActKind::Gka => 2 * ppe * (n1 * c2 + n2 * c3),
            _ => 0,
        };

        let mut gkt_spline = 0u64;
        let mut gkt_conv = 0u64;
        for (layers, c, n) in [
            (&self.tok1.layers, c2, n1),
            (&self.tok2.layers, c3, n2),
            (&self.dtok_c3, c3, n2),
            (&self.dtok_c2, c2, n1),
        ] {
            for l in layers.iter() {
                gkt_spline += 2 * n * l.spline_stage_param_count() as u64;
                if l.pw.is_some() {
                    gkt_conv += 2 * n * c * c;
                }
                if l.dw.is_some() {
                    gkt_conv += 2 * n * c * 9;
                }
            }
        }

        let decoder = self.dec1.flops(h / 32, w / 32)
            + self.dec2.flops(h / 16, w / 16)
            + self.dec3.flops(h / 8, w / 8)
            + self.dec4.flops(h / 4, w / 4)
            + conv(c8, c8, 3, pix0 / 4)
            + conv(c8, cfg.num_classes as u64, 1, pix0);

        Ok(Breakdown {
            encoder,
            gka,
            gkt_spline,
            gkt_conv,
            decoder,
        })
    }
}

impl TokKanBlock {
    fn act_param_count(&self) -> usize {
        match &self.act {
            EmbedActivation::Gka(g) => g.param_count(),
            _ => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"GKCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize config text plus all model tensors (parameters and buffers).
pub fn write_checkpoint<W: Write>(w: &mut W, net: &GroupKanNet) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    let cfg_text = net.cfg.to_text();
    write_u64(w, cfg_text.len() as u64)?;
    w.write_all(cfg_text.as_bytes())?;
    let tensors = net.named_tensors();
    write_u64(w, tensors.len() as u64)?;
    for nt in &tensors {
        write_u64(w, nt.name.len() as u64)?;
        w.write_all(nt.name.as_bytes())?;
        write_tensor(w, &nt.tensor)?;
    }
    Ok(())
}

pub fn checkpoint_bytes(net: &GroupKanNet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, net)?;
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, net: &GroupKanNet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, net)
}

/// Rebuild a network from a checkpoint stream.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<GroupKanNet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = read_u64(r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let cfg_text = String::from_utf8(cfg_buf)
        .map_err(|e| Error::Format(format!("checkpoint config is not utf-8: {e}")))?;
    let cfg = GroupKanConfig::from_text(&cfg_text)?;
    let net = build(&cfg, 0)?;

    let count = read_u64(r)? as usize;
    let expected = net.named_tensors();
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, model expects {}",
            expected.len()
        )));
    }
    for nt in &expected {
        let name_len = read_u64(r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Format(format!("tensor name is not utf-8: {e}")))?;
        if name != nt.name {
            return Err(Error::Format(format!(
                "checkpoint tensor '{name}' does not match expected '{}'",
                nt.name
            )));
        }
        let loaded = read_tensor(r)?;
        if loaded.shape() != nt.tensor.shape() {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                loaded.shape(),
                nt.tensor.shape()
            )));
        }
        let data = loaded.data_vec();
        nt.tensor.update_data(|d| d.copy_from_slice(&data));
    }
    Ok(net)
}

pub fn load_checkpoint(path: &Path) -> Result<GroupKanNet> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_tiny() -> GroupKanConfig {
        // The 16/16/16 probe configuration on 32x32 inputs.
        let mut cfg = GroupKanConfig::with_channels(16, 16, 16);
        cfg.g_gka = 4;
        cfg.g_gkt = 4;
        cfg.n_gkt_layers = 1;
        cfg.token_layers = vec![StageKind::GroupedKan];
        cfg.input_channels = 1;
        cfg
    }

    #[test]
    fn presets_build() {
        for cfg in [GroupKanConfig::base(), GroupKanConfig::small()] {
            assert!(build(&cfg, 1).is_ok(), "{:?} {:?} {:?}", cfg.c1, cfg.c2, cfg.c3);
        }
    }

    #[test]
    fn divisibility_violation_is_reported_with_the_pair() {
        let mut cfg = GroupKanConfig::base();
        cfg.c2 = 100;
        let err = match build(&cfg, 0) {
            Err(e) => e,
            Ok(_) => panic!("expected a configuration error"),
        };
        let msg = err.to_string();
        assert!(msg.contains("C2=100") && msg.contains("G_GKA=16"), "{msg}");
    }

    #[test]
    fn forward_shape_contract() {
        let net = build(&tiny_tiny(), 7).unwrap();
        let tape = Tape::inference();
        let x = Tensor::zeros(&[1, 1, 64, 64]);
        let y = net.forward(&tape, &x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 64, 64]);
    }

    #[test]
    fn forward_rejects_resolution_not_divisible_by_32() {
        let net = build(&tiny_tiny(), 7).unwrap();
        let tape = Tape::inference();
        let err = net
            .forward(&tape, &Tensor::zeros(&[1, 1, 48, 48]), Mode::Eval)
            .unwrap_err();
        assert!(err.to_string().contains("multiple of 32"));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = build(&tiny_tiny(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 1, 32, 32], 1.0, &mut rng);
        let tape = Tape::inference();
        let y1 = net.forward(&tape, &x, Mode::Eval).unwrap().data_vec();
        let y2 = net.forward(&tape, &x, Mode::Eval).unwrap().data_vec();
        assert_eq!(y1, y2);
    }

    #[test]
    fn count_params_matches_allocation_walk() {
        let net = build(&tiny_tiny(), 5).unwrap();
        let analytic = net.count_params().total();
        let walked: u64 = net
            .named_tensors()
            .iter()
            .filter(|n| n.trainable)
            .map(|n| n.tensor.numel() as u64)
            .sum();
        assert_eq!(analytic, walked);
    }

    #[test]
    fn spline_param_ratio_exact_across_groups() {
        let mut counts = Vec::new();
        for g in [1usize, 2, 4, 8, 16] {
            let mut cfg = GroupKanConfig::base();
            cfg.g_gkt = g;
            cfg.g_gka = g;
            let net = build(&cfg, 0).unwrap();
            counts.push(net.count_params().gkt_spline);
        }
        for (i, &g) in [1u64, 2, 4, 8, 16].iter().enumerate() {
            assert_eq!(counts[i] * g, counts[0]);
        }
    }

    #[test]
    fn doubling_channels_roughly_quadruples_spline_params() {
        let a = build(&GroupKanConfig::with_channels(64, 64, 128), 0)
            .unwrap()
            .count_params()
            .gkt_spline as f64;
        let b = build(&GroupKanConfig::with_channels(128, 128, 256), 0)
            .unwrap()
            .count_params()
            .gkt_spline as f64;
        let ratio = b / a;
        assert!((3.9..=4.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn single_conv_flops_closed_form() {
        let net = build(&tiny_tiny(), 0).unwrap();
        let f = net.count_flops(64, 64).unwrap();
        // encoder's first conv: 2 * 1 * 2 * 9 * 64 * 64, plus the rest;
        // just pin the closed form of the first term via subtraction of a
        // one-channel-different config is overkill -- assert the documented
        // formula directly on a standalone stage instead.
        let expect_first = 2 * 1 * (16 / 8) * 9 * 64 * 64;
        assert!(f.encoder >= expect_first as u64);
        // spline FLOP ratio is exact in G
        let mut counts = Vec::new();
        for g in [1usize, 2, 4] {
            let mut cfg = tiny_tiny();
            cfg.g_gkt = g;
            cfg.g_gka = g.min(4);
            let net = build(&cfg, 0).unwrap();
            counts.push(net.count_flops(64, 64).unwrap().gkt_spline);
        }
        assert_eq!(counts[1] * 2, counts[0]);
        assert_eq!(counts[2] * 4, counts[0]);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = GroupKanConfig::base();
        cfg.token_layers = vec![StageKind::Mlp, StageKind::GroupedKan, StageKind::GroupedKan];
        cfg.use_dwconv = false;
        let text = cfg.to_text();
        let back = GroupKanConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_rejects_unknown_key() {
        let mut cfg = GroupKanConfig::base();
        let err = cfg.set_key("c9", "1").unwrap_err();
        assert!(err.to_string().contains("c9"));
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_bits() {
        let net = build(&tiny_tiny(), 42).unwrap();
        let bytes = checkpoint_bytes(&net).unwrap();
        let restored = read_checkpoint(&mut bytes.as_slice()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 1, 32, 32], 1.0, &mut rng);
        let tape = Tape::inference();
        let y1 = net.forward(&tape, &x, Mode::Eval).unwrap().data_vec();
        let y2 = restored.forward(&tape, &x, Mode::Eval).unwrap().data_vec();
        assert_eq!(y1, y2);
        // serialized forms are identical too
        assert_eq!(bytes, checkpoint_bytes(&restored).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corrupt_magic() {
        let net = build(&tiny_tiny(), 42).unwrap();
        let mut bytes = checkpoint_bytes(&net).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn seeds_change_parameters() {
        let a = build(&tiny_tiny(), 1).unwrap();
        let b = build(&tiny_tiny(), 2).unwrap();
        assert_ne!(
            checkpoint_bytes(&a).unwrap(),
            checkpoint_bytes(&b).unwrap()
        );
        let a2 = build(&tiny_tiny(), 1).unwrap();
        assert_eq!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&a2).unwrap());
    }

    #[test]
    fn activation_map_has_input_resolution() {
        let net = build(&tiny_tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 1, 32, 32], 1.0, &mut rng);
        let map = net.activation_map(&x).unwrap();
        assert_eq!(map.shape(), vec![32, 32]);
        assert!(map.data().iter().all(|&v| v >= 0.0));
    }
}
