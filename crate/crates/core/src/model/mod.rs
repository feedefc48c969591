//! The co-learning fusion network and the three baseline fusion networks
//! (multi-branch, multi-channel and fused-input), built from shared blocks.
//!
//! Layout for an `h x w` input with `c` channels per block:
//!
//! ```text
//! encoder block s (s = 0..3): [conv-bn-lrelu] x2 -> tap_s (h/2^s) -> maxpool
//! co-learning unit s:          fusion_s = lrelu(conv3d(stack(ct_s, pet_s)))   (2c)
//!                              fused_s  = fusion_s * concat(ct_s, pet_s)        (2c)
//! bottleneck:                  pooled output of block 3                         (h/16)
//! reconstruction block j:      [conv-bn-lrelu] x2 over concat(skip_{3-j}, up(prev))
//! head:                        1x1 conv to R+1 logits, softmax
//! ```
//!
//! The baselines swap the skip tensors: plain concatenations (MB) or the
//! taps of a single encoder (MC, FS).

pub mod baselines;
pub mod weights;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::conv::Padding;
use crate::ops::pointwise::check_alpha;
use crate::params::{Mode, ModelParams};
use crate::tensor::Tensor;

pub use baselines::{display_ct, display_pet, intermix, FusionRatio};

/// Number of encoder blocks, co-learning units and reconstruction blocks.
pub const NUM_SCALES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Colearn,
    Mb,
    Mc,
    Fs,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Colearn, Variant::Mb, Variant::Mc, Variant::Fs];

    /// Two-byte tag appended to the weight-file magic.
    pub fn code(self) -> [u8; 2] {
        match self {
            Variant::Colearn => *b"CL",
            Variant::Mb => *b"MB",
            Variant::Mc => *b"MC",
            Variant::Fs => *b"FS",
        }
    }

    pub fn from_code(code: [u8; 2]) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Colearn => "colearn",
            Variant::Mb => "mb",
            Variant::Mc => "mc",
            Variant::Fs => "fs",
        }
    }

    /// Encoders as `(name, input channels)`.
    fn encoders(self) -> &'static [(&'static str, usize)] {
        match self {
            Variant::Colearn | Variant::Mb => &[("ct", 1), ("pet", 1)],
            Variant::Mc => &[("mix", 2)],
            Variant::Fs => &[("mix", 1)],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColearnConfig {
    /// `[h, w]`, both multiples of 16.
    pub input_size: [usize; 2],
    pub channels: usize,
    pub num_rois: usize,
    pub kernel2d: usize,
    /// `[k, k, modalities]` of the co-learning kernel.
    pub kernel3d: [usize; 3],
    pub alpha: f32,
    /// Restrict each fusion channel to one input channel across both modalities.
    pub depthwise_fusion: bool,
}

impl Default for ColearnConfig {
    fn default() -> Self {
        ColearnConfig {
            input_size: [256, 256],
            channels: 64,
            num_rois: 3,
            kernel2d: 3,
            kernel3d: [3, 3, 2],
            alpha: 0.1,
            depthwise_fusion: false,
        }
    }
}

impl ColearnConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of 16"
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        if self.num_rois == 0 || self.num_rois > 254 {
            return Err(Error::Config(format!(
                "number of ROIs must lie in 1..=254, got {}",
                self.num_rois
            )));
        }
        if self.kernel2d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "2D kernel size must be odd, got {}",
                self.kernel2d
            )));
        }
        let [k1, k2, m] = self.kernel3d;
        if k1 != k2 || k1 % 2 == 0 || m != 2 {
            return Err(Error::Config(format!(
                "co-learning kernel must be k x k x 2 with odd k, got {k1}x{k2}x{m}"
            )));
        }
        check_alpha(self.alpha)
    }

    pub fn num_classes(&self) -> usize {
        self.num_rois + 1
    }
}

/// One recorded feature map of a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub layer: String,
    pub shape: Vec<usize>,
    pub var: Var,
}

/// Interventions used to probe the network.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Replace the fusion map of unit s by this constant.
    pub fixed_fusion: [Option<f32>; NUM_SCALES],
    /// Cut the gradient between the pooled output of block s and everything
    /// downstream of it, leaving the tap of block s as its only outlet.
    pub detach_pool: [bool; NUM_SCALES],
}

pub struct ForwardOutput {
    pub logits: Var,
    pub prob: Var,
    /// One per co-learning unit, shallowest first; empty for the baselines.
    pub fusion_maps: Vec<Var>,
    pub trace: Vec<TraceEntry>,
}

impl ForwardOutput {
    /// The recorded feature map of a traced layer, e.g. `enc.ct.b0`.
    pub fn feature(&self, layer: &str) -> Option<Var> {
        self.trace.iter().find(|e| e.layer == layer).map(|e| e.var)
    }
}

/// Probabilities and fusion maps of a forward pass, detached from any tape.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub prob: Tensor,
    pub fusion_maps: Vec<Tensor>,
}

impl Prediction {
    /// Per-pixel argmax over classes (first index on ties).
    pub fn labels(&self) -> Vec<u8> {
        argmax_labels(&self.prob)
    }
}

pub fn argmax_labels(prob: &Tensor) -> Vec<u8> {
    let classes = *prob.shape().last().unwrap();
    prob.data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// A network architecture: which variant, its hyperparameters and, for the
/// fused-input baseline, the intermixing ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub variant: Variant,
    pub config: ColearnConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_ratio: Option<FusionRatio>,
}

impl Network {
    pub fn new(variant: Variant, config: ColearnConfig, fusion_ratio: Option<FusionRatio>) -> Result<Self> {
        config.validate()?;
        match (variant, fusion_ratio) {
            (Variant::Fs, None) => {
                return Err(Error::Config(
                    "the fused-input variant needs a fusion ratio".into(),
                ))
            }
            (Variant::Fs, Some(_)) | (_, None) => {}
            (v, Some(_)) => {
                return Err(Error::Config(format!(
                    "a fusion ratio only applies to the fused-input variant, not `{v}`"
                )))
            }
        }
        Ok(Network {
            variant,
            config,
            fusion_ratio,
        })
    }

    pub fn colearn(config: ColearnConfig) -> Result<Self> {
        Network::new(Variant::Colearn, config, None)
    }

    fn ratio(&self) -> Result<FusionRatio> {
        self.fusion_ratio
            .ok_or_else(|| Error::Config("the fused-input variant needs a fusion ratio".into()))
    }

    fn skip_channels(&self) -> usize {
        match self.variant {
            Variant::Colearn | Variant::Mb => 2 * self.config.channels,
            Variant::Mc | Variant::Fs => self.config.channels,
        }
    }

    /// Registers every parameter with zero values (and fresh running statistics).
    pub fn empty_params(&self) -> Result<ModelParams> {
        self.config.validate()?;
        let cfg = &self.config;
        let (k, c) = (cfg.kernel2d, cfg.channels);
        let mut params = ModelParams::new();
        for &(name, cin) in self.variant.encoders() {
            for s in 0..NUM_SCALES {
                let block_in = if s == 0 { cin } else { c };
                add_conv(&mut params, &format!("enc.{name}.b{s}.c0"), k, block_in, c, true)?;
                add_conv(&mut params, &format!("enc.{name}.b{s}.c1"), k, c, c, true)?;
            }
        }
        if self.variant == Variant::Colearn {
            let [k3, _, m] = cfg.kernel3d;
            for s in 0..NUM_SCALES {
                params.insert(format!("colearn.u{s}.w"), Tensor::zeros([k3, k3, m, c, 2 * c]))?;
                params.insert(format!("colearn.u{s}.b"), Tensor::zeros([2 * c]))?;
            }
        }
        let skip = self.skip_channels();
        for j in 0..NUM_SCALES {
            // The bottleneck has the skip width; later blocks see c channels.
            let prev = if j == 0 { skip } else { c };
            add_conv(&mut params, &format!("rec.b{j}.c0"), k, skip + prev, c, true)?;
            add_conv(&mut params, &format!("rec.b{j}.c1"), k, c, c, true)?;
        }
        add_conv(&mut params, "head", 1, c, cfg.num_classes(), false)?;
        Ok(params)
    }

    /// He-normal kernels (variance `2 / fan_in`), zero biases, unit gamma and
    /// zero beta. Kernels are drawn in sorted id order from one seeded stream.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        let mut params = self.empty_params()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = self.fusion_mask();
        for p in params.iter_mut() {
            if p.id.ends_with(".gamma") {
                p.value.fill(1.0);
                continue;
            }
            if !p.id.ends_with(".w") {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let cout = *shape.last().unwrap();
            let mut fan_in = p.value.len() / cout;
            let is_fusion = p.id.starts_with("colearn.");
            if is_fusion && mask.is_some() {
                // Each output sees k*k*m inputs instead of k*k*m*c.
                fan_in /= self.config.channels;
            }
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                .expect("positive standard deviation");
            for v in p.value.data_mut() {
                *v = normal.sample(&mut rng);
            }
            if let (true, Some(m)) = (is_fusion, &mask) {
                p.value = p.value.zip_map(m, |a, b| a * b)?;
            }
        }
        Ok(params)
    }

    /// 0/1 mask restricting fusion channel `o` to input channel `o mod c`.
    fn fusion_mask(&self) -> Option<Tensor> {
        if !self.config.depthwise_fusion {
            return None;
        }
        let c = self.config.channels;
        let [k, _, m] = self.config.kernel3d;
        let shape = [k, k, m, c, 2 * c];
        Some(Tensor::from_fn(shape, |i| {
            let o = i % (2 * c);
            let ch = (i / (2 * c)) % c;
            if o % c == ch {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Maps display-normalized CT and PET (`[b,h,w,1]` each) to the input
    /// tensors of each encoder.
    pub fn encoder_inputs(&self, ct: &Tensor, pet: &Tensor) -> Result<Vec<Tensor>> {
        let (_, h, w, c) = ct.dims4()?;
        ct.expect_same_shape(pet, "network input")?;
        if c != 1 {
            return Err(Error::dim(
                "network input",
                format!("expected single-channel images, got {c} channels"),
            ));
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "input extents {h}x{w} are not multiples of 16"
            )));
        }
        Ok(match self.variant {
            Variant::Colearn | Variant::Mb => vec![ct.clone(), pet.clone()],
            Variant::Mc => vec![crate::ops::spatial::concat_last(ct, pet)?],
            Variant::Fs => vec![intermix(ct, pet, self.ratio()?)?],
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        ct: &Tensor,
        pet: &Tensor,
        mode: Mode,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let inputs = self.encoder_inputs(ct, pet)?;
        let mut trace = Vec::new();
        let mut taps = Vec::new();
        let mut pooled = Vec::new();
        for (&(name, _), x) in self.variant.encoders().iter().zip(inputs) {
            let x = tape.constant(x);
            let (t, p) = self.encoder_forward(tape, params, x, name, mode, opts, &mut trace)?;
            taps.push(t);
            pooled.push(p);
        }

        let mut fusion_maps = Vec::new();
        let skips: Vec<Var> = match self.variant {
            Variant::Colearn => (0..NUM_SCALES)
                .map(|s| {
                    let (fused, map) =
                        self.colearn_fuse(tape, params, s, taps[0][s], taps[1][s], opts, &mut trace)?;
                    fusion_maps.push(map);
                    Ok(fused)
                })
                .collect::<Result<_>>()?,
            Variant::Mb => (0..NUM_SCALES)
                .map(|s| {
                    let v = tape.concat_channels(taps[0][s], taps[1][s])?;
                    record(&mut trace, tape, format!("skip.s{s}"), v);
                    Ok(v)
                })
                .collect::<Result<_>>()?,
            Variant::Mc | Variant::Fs => taps[0].clone(),
        };
        let bottleneck = if pooled.len() == 2 {
            tape.concat_channels(pooled[0], pooled[1])?
        } else {
            pooled[0]
        };
        record(&mut trace, tape, "bottleneck".into(), bottleneck);

        let features = self.reconstruct_forward(tape, params, &skips, bottleneck, mode, &mut trace)?;
        let w = tape.param(params, "head.w")?;
        let b = tape.param(params, "head.b")?;
        let logits = tape.conv2d(features, w, b, 1, Padding::Same)?;
        record(&mut trace, tape, "head".into(), logits);
        let prob = tape.softmax(logits);
        Ok(ForwardOutput {
            logits,
            prob,
            fusion_maps,
            trace,
        })
    }

    /// Returns the pre-pooling tap of every block and the pooled output of the last one.
    #[allow(clippy::too_many_arguments)]
    fn encoder_forward(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        mut x: Var,
        name: &str,
        mode: Mode,
        opts: &ForwardOptions,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<(Vec<Var>, Var)> {
        let mut taps = Vec::with_capacity(NUM_SCALES);
        for s in 0..NUM_SCALES {
            let prefix = format!("enc.{name}.b{s}");
            let h = self.conv_bn_act(tape, params, x, &format!("{prefix}.c0"), mode)?;
            let h = self.conv_bn_act(tape, params, h, &format!("{prefix}.c1"), mode)?;
            record(trace, tape, prefix.clone(), h);
            taps.push(h);
            let mut p = tape.max_pool2d(h)?;
            record(trace, tape, format!("{prefix}.pool"), p);
            if opts.detach_pool[s] {
                p = tape.detach(p);
            }
            x = p;
        }
        Ok((taps, x))
    }

    /// Co-learning unit `s`: returns `(fused, fusion_map)`.
    #[allow(clippy::too_many_arguments)]
    fn colearn_fuse(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        s: usize,
        f_ct: Var,
        f_pet: Var,
        opts: &ForwardOptions,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<(Var, Var)> {
        let stacked = tape.stack_modality(f_ct, f_pet)?;
        let mut w = tape.param(params, &format!("colearn.u{s}.w"))?;
        if let Some(mask) = self.fusion_mask() {
            let m = tape.constant(mask);
            w = tape.mul(w, m)?;
        }
        let b = tape.param(params, &format!("colearn.u{s}.b"))?;
        let pre = tape.conv3d_modality(stacked, w, b)?;
        let mut map = tape.leaky_relu(pre, self.config.alpha)?;
        if let Some(v) = opts.fixed_fusion[s] {
            let fixed = Tensor::full(tape.value(map).shape().to_vec(), v);
            map = tape.constant(fixed);
        }
        record(trace, tape, format!("colearn.u{s}"), map);
        let both = tape.concat_channels(f_ct, f_pet)?;
        let fused = tape.mul(map, both)?;
        record(trace, tape, format!("fused.u{s}"), fused);
        Ok((fused, map))
    }

    /// `skips` are shallowest first; reconstruction consumes them deepest first.
    fn reconstruct_forward(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        skips: &[Var],
        bottleneck: Var,
        mode: Mode,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<Var> {
        let mut prev = bottleneck;
        for j in 0..NUM_SCALES {
            let up = tape.upsample_nearest(prev)?;
            let x = tape.concat_channels(skips[NUM_SCALES - 1 - j], up)?;
            let h = self.conv_bn_act(tape, params, x, &format!("rec.b{j}.c0"), mode)?;
            prev = self.conv_bn_act(tape, params, h, &format!("rec.b{j}.c1"), mode)?;
            record(trace, tape, format!("rec.b{j}"), prev);
        }
        Ok(prev)
    }

    fn conv_bn_act(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        x: Var,
        layer: &str,
        mode: Mode,
    ) -> Result<Var> {
        let w = tape.param(params, &format!("{layer}.w"))?;
        let b = tape.param(params, &format!("{layer}.b"))?;
        let y = tape.conv2d(x, w, b, 1, Padding::Same)?;
        let y = tape.batch_norm(y, params, &format!("{layer}.bn"), mode)?;
        tape.leaky_relu(y, self.config.alpha)
    }

    /// Forward pass on a private tape. Training-mode batch statistics are discarded.
    pub fn predict(&self, params: &ModelParams, ct: &Tensor, pet: &Tensor, mode: Mode) -> Result<Prediction> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, ct, pet, mode, &ForwardOptions::default())?;
        Ok(Prediction {
            prob: tape.value(out.prob).clone(),
            fusion_maps: out
                .fusion_maps
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
        })
    }
}

fn add_conv(
    params: &mut ModelParams,
    layer: &str,
    k: usize,
    cin: usize,
    cout: usize,
    norm: bool,
) -> Result<()> {
    params.insert(format!("{layer}.w"), Tensor::zeros([k, k, cin, cout]))?;
    params.insert(format!("{layer}.b"), Tensor::zeros([cout]))?;
    if norm {
        params.insert_batch_norm(&format!("{layer}.bn"), cout)?;
    }
    Ok(())
}

fn record(trace: &mut Vec<TraceEntry>, tape: &Tape, layer: String, v: Var) {
    trace.push(TraceEntry {
        layer,
        shape: tape.value(v).shape().to_vec(),
        var: v,
    });
}
