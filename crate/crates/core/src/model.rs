//! Dual-channel POC-ViT: per-channel patch embedding, a stack of
//! cross-attention encoder blocks, mean pooling and a PReLU classifier.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::GrayImage;
use crate::poc_attention::{multi_head_poc_ca_cached, ConvCache, ConvParams, PocHeadWeights};
use crate::tensor::{concat, read_archive, write_archive, Dtype, Tape, Tensor, Var};

/// Division guard of the input standardization.
pub const INPUT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Hidden width of the block MLPs; `2 * embed_dim` when absent.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    pub n_classes: usize,
    /// Query convolution reuses the value convolution.
    #[serde(default)]
    pub share_vq_weights: bool,
    /// Each head convolves only its own `d / n` column block.
    #[serde(default)]
    pub grouped_heads: bool,
    /// The key of a channel is the other channel's value convolution applied
    /// to the cross input, instead of a separate key convolution.
    #[serde(default)]
    pub cross_channel_key: bool,
    #[serde(default)]
    pub activation: Activation,
    /// Shift and scale each input image to zero mean and unit variance
    /// before patching. Without it the flat background dominates every
    /// token and training barely moves.
    #[serde(default)]
    pub standardize_input: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// 64x64 inputs, 8x8 patches, 64 tokens, width 128, 4 heads, 2 blocks,
    /// all three weight-sharing options on.
    pub fn desk(n_classes: usize) -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            n_blocks: 2,
            n_heads: 4,
            mlp_hidden: Some(256),
            n_classes,
            share_vq_weights: true,
            grouped_heads: true,
            cross_channel_key: true,
            activation: Activation::Gelu,
            standardize_input: true,
            seed: 0,
        }
    }

    pub fn n_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size.max(1);
        g * g
    }

    /// Convolution kernel size `h = N_e / n`.
    pub fn kernel_size(&self) -> usize {
        self.n_tokens() / self.n_heads.max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads.max(1)
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp_hidden.unwrap_or(2 * self.embed_dim)
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        let n_e = self.n_tokens();
        if !n_e.is_power_of_two() || n_e < 2 {
            return bad(format!("token count {n_e} is not a power of two >= 2"));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if n_e % self.n_heads != 0 {
            return bad(format!(
                "token count {n_e} is not divisible by n_heads {}",
                self.n_heads
            ));
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be >= 2 for layer normalization".into());
        }
        if self.n_blocks == 0 || self.mlp_width() == 0 || self.n_classes == 0 {
            return bad("n_blocks, mlp_hidden and n_classes must be positive".into());
        }
        Ok(())
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamKind {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
    Gain,
    Slope,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor>,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct HeadSlots {
    value: Affine,
    query: Affine,
    key: Affine,
}

#[derive(Clone, Debug)]
struct ChannelSlots {
    heads: Vec<HeadSlots>,
    norm1: Affine,
    mlp_in: Affine,
    mlp_out: Affine,
    norm2: Affine,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: [Affine; 2],
    blocks: Vec<[ChannelSlots; 2]>,
    head_in: Affine,
    slope: usize,
    head_out: Affine,
}

/// Output of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward<'t> {
    pub logits: Var<'t>,
    /// Concatenated pooled channel features, `[2d]`.
    pub features: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct PocVit {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

struct Builder {
    params: Vec<Param>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], kind: ParamKind) -> usize {
        let value = match kind {
            ParamKind::Gain => Tensor::full(shape, 1.0),
            ParamKind::Slope => Tensor::full(shape, 0.25),
            _ => Tensor::zeros(shape),
        };
        self.params.push(Param {
            name,
            kind,
            value: Arc::new(value),
        });
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Affine {
        Affine {
            weight: self.add(
                format!("{name}.weight"),
                &[out, inp],
                ParamKind::Weight {
                    fan_in: inp,
                    fan_out: out,
                },
            ),
            bias: self.add(format!("{name}.bias"), &[out], ParamKind::Bias),
        }
    }

    fn conv(&mut self, name: &str, out: usize, in_group: usize, h: usize) -> Affine {
        Affine {
            weight: self.add(
                format!("{name}.weight"),
                &[out, in_group, h],
                ParamKind::Weight {
                    fan_in: in_group * h,
                    fan_out: out * h,
                },
            ),
            bias: self.add(format!("{name}.bias"), &[out], ParamKind::Bias),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Affine {
        Affine {
            weight: self.add(format!("{name}.gain"), &[d], ParamKind::Gain),
            bias: self.add(format!("{name}.bias"), &[d], ParamKind::Bias),
        }
    }
}

impl PocVit {
    /// Builds the parameter set and applies [`PocVit::init_xavier`] with the
    /// config seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Self::uninitialized(config);
        model.init_xavier(model.config.seed);
        Ok(model)
    }

    fn uninitialized(config: ModelConfig) -> Self {
        let d = config.embed_dim;
        let p = config.patch_size;
        let hd = config.head_dim();
        let h = config.kernel_size();
        let in_group = if config.grouped_heads { hd } else { d };
        let mut b = Builder { params: Vec::new() };

        let embed = [0, 1].map(|c| {
            let name = format!("embed.{c}");
            Affine {
                weight: b.add(
                    format!("{name}.weight"),
                    &[d, p * p],
                    ParamKind::Weight {
                        fan_in: p * p,
                        fan_out: d * p * p,
                    },
                ),
                bias: b.add(format!("{name}.bias"), &[d], ParamKind::Bias),
            }
        });

        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let mut value_convs = [Vec::new(), Vec::new()];
            let mut channels: Vec<ChannelSlots> = Vec::with_capacity(2);
            for c in 0..2 {
                let mut heads = Vec::with_capacity(config.n_heads);
                for j in 0..config.n_heads {
                    let base = format!("block.{i}.ch{c}.head{j}");
                    let value = b.conv(&format!("{base}.value"), hd, in_group, h);
                    let query = if config.share_vq_weights {
                        value
                    } else {
                        b.conv(&format!("{base}.query"), hd, in_group, h)
                    };
                    let key = if config.cross_channel_key {
                        // patched below once the other channel exists
                        value
                    } else {
                        b.conv(&format!("{base}.key"), hd, in_group, h)
                    };
                    value_convs[c].push(value);
                    heads.push(HeadSlots { value, query, key });
                }
                let base = format!("block.{i}.ch{c}");
                let norm1 = b.norm(&format!("{base}.norm1"), d);
                let mlp_in = b.linear(&format!("{base}.mlp_in"), config.mlp_width(), d);
                let mlp_out = b.linear(&format!("{base}.mlp_out"), d, config.mlp_width());
                let norm2 = b.norm(&format!("{base}.norm2"), d);
                channels.push(ChannelSlots {
                    heads,
                    norm1,
                    mlp_in,
                    mlp_out,
                    norm2,
                });
            }
            if config.cross_channel_key {
                for c in 0..2 {
                    for (j, head) in channels[c].heads.iter_mut().enumerate() {
                        head.key = value_convs[1 - c][j];
                    }
                }
            }
            let ch1 = channels.pop().expect("two channels");
            let ch0 = channels.pop().expect("two channels");
            blocks.push([ch0, ch1]);
        }

        let head_in = b.linear("classifier.hidden", d, 2 * d);
        let slope = b.add("classifier.prelu".into(), &[1], ParamKind::Slope);
        let head_out = b.linear("classifier.out", config.n_classes, d);

        PocVit {
            config,
            params: b.params,
            layout: Layout {
                embed,
                blocks,
                head_in,
                slope,
                head_out,
            },
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases 0, norm
    /// gains 1, PReLU slope 0.25. Parameter `i` draws from ChaCha8 stream `i`
    /// of `seed`, so the result does not depend on iteration order.
    pub fn init_xavier(&mut self, seed: u64) {
        for (i, p) in self.params.iter_mut().enumerate() {
            let shape = p.value.shape().to_vec();
            let value = match p.kind {
                ParamKind::Weight { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(&shape, data).expect("shape")
                }
                ParamKind::Bias => Tensor::zeros(&shape),
                ParamKind::Gain => Tensor::full(&shape, 1.0),
                ParamKind::Slope => Tensor::full(&shape, 0.25),
            };
            p.value = Arc::new(value);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.value.as_ref())
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Replaces every parameter, in [`PocVit::params`] order.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = Arc::new(v);
        }
        Ok(())
    }

    /// Puts every parameter on `tape` (trainable when the tape records).
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.param(Arc::clone(&p.value)))
            .collect()
    }

    fn check_image(&self, img: &GrayImage) -> Result<()> {
        let s = self.config.image_size;
        if img.width() != s || img.height() != s {
            return Err(Error::Shape(format!(
                "model expects {s}x{s} images, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    /// Non-overlapping `d_p x d_p` patches projected to `d` channels, in
    /// row-major patch order: `[N_e, d]`.
    pub fn patch_sequence<'t>(
        &self,
        vars: &[Var<'t>],
        channel: usize,
        img: &GrayImage,
    ) -> Result<Var<'t>> {
        self.check_image(img)?;
        let tape = vars[0].tape();
        let s = self.config.image_size;
        let mut px = img.data().to_vec();
        if self.config.standardize_input {
            let (mu, sd) = (img.mean(), img.std());
            px.iter_mut().for_each(|v| *v = (*v - mu) / (sd + INPUT_EPS));
        }
        let raster = tape.constant(Tensor::new(&[s, s], px)?);
        let e = self.layout.embed[channel];
        raster
            .patches(self.config.patch_size)?
            .linear(vars[e.weight], vars[e.bias])
    }

    fn heads<'t>(&self, vars: &[Var<'t>], slots: &ChannelSlots) -> Vec<PocHeadWeights<'t>> {
        let conv = |a: Affine| ConvParams {
            weight: vars[a.weight],
            bias: vars[a.bias],
        };
        slots
            .heads
            .iter()
            .map(|h| PocHeadWeights {
                value: conv(h.value),
                query: conv(h.query),
                key: conv(h.key),
            })
            .collect()
    }

    fn activate<'t>(&self, x: Var<'t>) -> Var<'t> {
        match self.config.activation {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }

    /// One block: per channel `c` with cross input `c'`,
    /// `a = LN(x_c + POC(x_c, x_c'))`, `out_c = LN(a + MLP(a))`.
    pub fn encoder_block<'t>(
        &self,
        vars: &[Var<'t>],
        block: usize,
        x: [Var<'t>; 2],
    ) -> Result<[Var<'t>; 2]> {
        let slots = self
            .layout
            .blocks
            .get(block)
            .ok_or_else(|| Error::Contract(format!("no encoder block {block}")))?;
        let mut out = [x[0]; 2];
        let mut cache = ConvCache::default();
        for c in 0..2 {
            let s = &slots[c];
            let attn = multi_head_poc_ca_cached(x[c], x[1 - c], &self.heads(vars, s), &mut cache)?;
            let a = x[c]
                .add(attn.values)?
                .layer_norm(1, vars[s.norm1.weight], vars[s.norm1.bias])?;
            let hidden = self.activate(a.linear(vars[s.mlp_in.weight], vars[s.mlp_in.bias])?);
            let mlp = hidden.linear(vars[s.mlp_out.weight], vars[s.mlp_out.bias])?;
            out[c] = a
                .add(mlp)?
                .layer_norm(1, vars[s.norm2.weight], vars[s.norm2.bias])?;
        }
        Ok(out)
    }

    /// Forward pass with parameters already bound by [`PocVit::bind`] (or any
    /// variables of matching shapes in the same order).
    pub fn forward_with<'t>(
        &self,
        vars: &[Var<'t>],
        forehead: &GrayImage,
        periocular: &GrayImage,
    ) -> Result<Forward<'t>> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter variables, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let mut x = [
            self.patch_sequence(vars, 0, forehead)?,
            self.patch_sequence(vars, 1, periocular)?,
        ];
        for i in 0..self.config.n_blocks {
            x = self.encoder_block(vars, i, x)?;
        }
        let pooled = [x[0].mean_axis(0)?, x[1].mean_axis(0)?];
        let features = concat(&pooled, 0)?;
        let l = &self.layout;
        let hidden = features
            .reshape(&[1, self.config.feature_dim()])?
            .linear(vars[l.head_in.weight], vars[l.head_in.bias])?
            .prelu(vars[l.slope])?;
        let logits = hidden
            .linear(vars[l.head_out.weight], vars[l.head_out.bias])?
            .reshape(&[self.config.n_classes])?;
        Ok(Forward { logits, features })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        forehead: &GrayImage,
        periocular: &GrayImage,
    ) -> Result<Forward<'t>> {
        let vars = self.bind(tape);
        self.forward_with(&vars, forehead, periocular)
    }

    /// Logits and features as plain tensors, without recording gradients.
    pub fn infer(&self, forehead: &GrayImage, periocular: &GrayImage) -> Result<(Tensor, Tensor)> {
        let tape = Tape::inference();
        let out = self.forward(&tape, forehead, periocular)?;
        Ok(((*out.logits.value()).clone(), (*out.features.value()).clone()))
    }

    /// Writes `model.json` and `weights.json` + `weights.bin` (f32) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("model.json");
        let json = serde_json::to_vec_pretty(&self.config).map_err(|e| Error::json(&cfg, e))?;
        fs::write(&cfg, json).map_err(|e| Error::io(&cfg, e))?;
        let named: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.as_ref()))
            .collect();
        write_archive(&dir.join("weights.json"), &named, Dtype::F32)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = dir.join("model.json");
        let text = fs::read(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let config: ModelConfig = serde_json::from_slice(&text).map_err(|e| Error::json(&cfg, e))?;
        config.validate()?;
        let mut model = Self::uninitialized(config);
        let weights = dir.join("weights.json");
        let stored = read_archive(&weights)?;
        if stored.len() != model.params.len() {
            return Err(Error::Format {
                path: weights,
                msg: format!(
                    "{} tensors stored, model has {}",
                    stored.len(),
                    model.params.len()
                ),
            });
        }
        for (p, (name, t)) in model.params.iter_mut().zip(stored) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Format {
                    path: weights,
                    msg: format!("entry {name} {:?} does not match {} {:?}", t.shape(), p.name, p.value.shape()),
                });
            }
            p.value = Arc::new(t);
        }
        Ok(model)
    }
}
