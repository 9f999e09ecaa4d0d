use serde::{Deserialize, Serialize};

use crate::dataset::{STATE_DIM, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::init::trunc_normal;
use crate::nn::layers::{Attention, BatchNorm, Conv2d, Dense, LayerNorm, Lstm, PatchEmbed};
use crate::nn::params::{ParamKind, ParamStore};
use crate::nn::tensor::{Real, Tensor};
use crate::rng::{self, Rng};

/// Temporal length of the recurrent decoder input: five frames then five states.
pub const SEQUENCE_LEN: usize = 2 * WINDOW_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fc,
    Cnn,
    Vit,
    Rcnn,
    Rvit,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Fc, Variant::Cnn, Variant::Vit, Variant::Rcnn, Variant::Rvit];

    pub fn is_recurrent(self) -> bool {
        matches!(self, Variant::Rcnn | Variant::Rvit)
    }

    pub fn uses_vision(self) -> bool {
        self != Variant::Fc
    }

    /// Frames consumed per window: none, the last one, or all of them.
    pub fn frames_used(self) -> usize {
        match self {
            Variant::Fc => 0,
            Variant::Cnn | Variant::Vit => 1,
            Variant::Rcnn | Variant::Rvit => WINDOW_LEN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fc => "fc",
            Variant::Cnn => "cnn",
            Variant::Vit => "vit",
            Variant::Rcnn => "rcnn",
            Variant::Rvit => "rvit",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config("model", format!("unknown model `{s}` (fc, cnn, vit, rcnn, rvit)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    /// Output channels of the stem and of each residual block.
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    pub hidden: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub image_size: usize,
    pub latent_dim: usize,
    pub cnn: CnnConfig,
    pub vit: VitConfig,
    /// Hidden and output widths of the MLP decoder.
    pub mlp: Vec<usize>,
    pub lstm: LstmConfig,
    pub recurrent: bool,
}

impl ModelSpec {
    /// Desk-scale defaults for a variant.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            image_size: crate::dataset::DEFAULT_IMAGE_SIZE,
            latent_dim: 128,
            cnn: CnnConfig {
                channels: vec![16, 32, 64, 128],
            },
            vit: VitConfig {
                patch: 16,
                depth: 4,
                heads: 4,
                embed_dim: 128,
                mlp_ratio: 2,
            },
            mlp: vec![84, 180, 50, 3],
            lstm: LstmConfig {
                hidden: 128,
                layers: 2,
            },
            recurrent: variant.is_recurrent(),
        }
    }

    /// Small configuration for tests and quick experiments.
    pub fn tiny(variant: Variant, image_size: usize) -> Self {
        Self {
            image_size,
            latent_dim: 64,
            cnn: CnnConfig {
                channels: vec![8, 16],
            },
            vit: VitConfig {
                patch: (image_size / 4).max(1),
                depth: 1,
                heads: 2,
                embed_dim: 32,
                mlp_ratio: 2,
            },
            lstm: LstmConfig {
                hidden: 32,
                layers: 2,
            },
            ..Self::new(variant)
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            recurrent: variant.is_recurrent(),
            ..self.clone()
        }
    }

    /// Width of the MLP decoder input.
    pub fn decoder_input(&self) -> usize {
        match self.variant {
            Variant::Fc => STATE_DIM,
            _ => self.latent_dim + STATE_DIM,
        }
    }

    /// Full MLP width list including the input.
    pub fn mlp_dims(&self) -> Vec<usize> {
        std::iter::once(self.decoder_input())
            .chain(self.mlp.iter().copied())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.recurrent != self.variant.is_recurrent() {
            return err(
                "recurrent",
                format!("must be {} for {}", self.variant.is_recurrent(), self.variant.name()),
            );
        }
        if self.mlp.last() != Some(&3) || self.mlp.contains(&0) {
            return err("mlp", "channel list must be positive and end in 3".into());
        }
        if self.latent_dim == 0 {
            return err("latent_dim", "must be positive".into());
        }
        if self.variant.uses_vision() && self.image_size == 0 {
            return err("image_size", "must be positive".into());
        }
        if self.variant.is_recurrent() {
            if self.latent_dim < STATE_DIM {
                return err(
                    "latent_dim",
                    format!("{} is smaller than the {STATE_DIM}-element state it must hold", self.latent_dim),
                );
            }
            if self.lstm.hidden == 0 || self.lstm.layers == 0 {
                return err("lstm", "hidden size and layer count must be positive".into());
            }
        }
        match self.variant {
            Variant::Cnn | Variant::Rcnn => {
                if self.cnn.channels.is_empty() || self.cnn.channels.contains(&0) {
                    return err("cnn.channels", "need at least one positive channel count".into());
                }
            }
            Variant::Vit | Variant::Rvit => {
                let v = &self.vit;
                if v.patch == 0 || self.image_size % v.patch != 0 {
                    return err(
                        "vit.patch",
                        format!("image size {} is not divisible by patch {}", self.image_size, v.patch),
                    );
                }
                if v.heads == 0 || v.embed_dim % v.heads != 0 {
                    return err(
                        "vit.heads",
                        format!("embed dim {} is not divisible by {} heads", v.embed_dim, v.heads),
                    );
                }
                if v.depth == 0 || v.mlp_ratio == 0 {
                    return err("vit.depth", "depth and mlp ratio must be positive".into());
                }
            }
            Variant::Fc => {}
        }
        Ok(())
    }
}

/// `relu(F(x) + shortcut(x))` with `F = bn(conv(relu(bn(conv(x)))))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, &format!("{name}.down"), cin, cout, 1, stride, 0, rng),
                BatchNorm::new(store, &format!("{name}.down_bn"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
            + self
                .shortcut
                .as_ref()
                .map_or(0, |(c, b)| c.param_count() + b.param_count())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let f = self.conv1.forward(g, x);
        let f = self.bn1.forward_spatial(g, f);
        let f = g.relu(f);
        let f = self.conv2.forward(g, f);
        let f = self.bn2.forward_spatial(g, f);
        let s = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, x);
                bn.forward_spatial(g, s)
            }
            None => x,
        };
        let y = g.add(f, s);
        g.relu(y)
    }
}

/// Strided stem, residual stages, global average pool, linear projection.
#[derive(Debug, Clone)]
pub struct CnnEncoder {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<ResidualBlock>,
    pub proj: Dense,
}

impl CnnEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &CnnConfig, latent: usize, rng: &mut Rng) -> Self {
        let c0 = cfg.channels[0];
        let stem = Conv2d::new(store, "cnn.stem", 3, c0, 3, 2, 1, rng);
        let stem_bn = BatchNorm::new(store, "cnn.stem_bn", c0);
        let mut blocks = Vec::new();
        let mut cin = c0;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(ResidualBlock::new(store, &format!("cnn.block{i}"), cin, c, stride, rng));
            cin = c;
        }
        let proj = Dense::new(store, "cnn.proj", cin, latent, rng);
        Self {
            stem,
            stem_bn,
            blocks,
            proj,
        }
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.stem_bn.param_count()
            + self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.proj.param_count()
    }

    /// `[n, 3, s, s] -> [n, latent]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let y = self.stem.forward(g, x);
        let y = self.stem_bn.forward_spatial(g, y);
        let mut y = g.relu(y);
        for b in &self.blocks {
            y = b.forward(g, y);
        }
        let s = g.shape(y).to_vec();
        let y = g.reshape(y, &[s[0], s[1], s[2] * s[3]]);
        let y = g.mean_axis(y, 2);
        self.proj.forward(g, y)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl TransformerBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &VitConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Dense::new(store, &format!("{name}.fc1"), d, d * cfg.mlp_ratio, rng),
            fc2: Dense::new(store, &format!("{name}.fc2"), d * cfg.mlp_ratio, d, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.ln1.param_count()
            + self.attn.param_count()
            + self.ln2.param_count()
            + self.fc1.param_count()
            + self.fc2.param_count()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let h = self.attn.forward(g, h);
        let x = g.add(x, h);
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub patch: PatchEmbed,
    pub cls: crate::nn::params::ParamId,
    pub pos: crate::nn::params::ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub proj: Dense,
    pub tokens: usize,
    pub dim: usize,
}

impl VitEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &VitConfig, image_size: usize, latent: usize, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let tokens = (image_size / cfg.patch).pow(2) + 1;
        let patch = PatchEmbed::new(store, "vit.patch", 3, cfg.patch, d, rng);
        let cls = store.add("vit.cls", ParamKind::Embedding, trunc_normal(&[d], 0.02, rng));
        let pos = store.add("vit.pos", ParamKind::Embedding, trunc_normal(&[tokens, d], 0.02, rng));
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("vit.block{i}"), cfg, rng))
            .collect();
        Self {
            patch,
            cls,
            pos,
            blocks,
            ln: LayerNorm::new(store, "vit.ln", d),
            proj: Dense::new(store, "vit.proj", d, latent, rng),
            tokens,
            dim: d,
        }
    }

    pub fn param_count(&self) -> usize {
        self.patch.param_count()
            + self.dim * (self.tokens + 1)
            + self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.ln.param_count()
            + self.proj.param_count()
    }

    /// Token sequence `[n, tokens, dim]` after the final norm.
    pub fn tokens<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = g.shape(x)[0];
        let patches = self.patch.forward(g, x);
        let cls = g.param(self.cls);
        let zeros = g.input(Tensor::zeros(&[n, 1, self.dim]));
        let cls = g.add_bcast(zeros, cls);
        let t = g.concat(&[cls, patches], 1);
        let pos = g.param(self.pos);
        let mut t = g.add_bcast(t, pos);
        for b in &self.blocks {
            t = b.forward(g, t);
        }
        self.ln.forward(g, t)
    }

    /// `[n, 3, s, s] -> [n, latent]` from the CLS token.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = g.shape(x)[0];
        let t = self.tokens(g, x);
        let first = g.slice(t, 1, 0, 1);
        let first = g.reshape(first, &[n, self.dim]);
        self.proj.forward(g, first)
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Cnn(CnnEncoder),
    Vit(VitEncoder),
}

impl Encoder {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Encoder::Cnn(e) => e.forward(g, x),
            Encoder::Vit(e) => e.forward(g, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Encoder::Cnn(e) => e.param_count(),
            Encoder::Vit(e) => e.param_count(),
        }
    }
}

/// Dense → batch norm → ReLU between hidden widths, plain dense output.
#[derive(Debug, Clone)]
pub struct MlpDecoder {
    pub hidden: Vec<(Dense, BatchNorm)>,
    pub out: Dense,
    pub dims: Vec<usize>,
}

impl MlpDecoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, dims: &[usize], rng: &mut Rng) -> Self {
        let n = dims.len() - 1;
        let hidden = (0..n - 1)
            .map(|i| {
                (
                    Dense::new(store, &format!("mlp.fc{i}"), dims[i], dims[i + 1], rng),
                    BatchNorm::new(store, &format!("mlp.bn{i}"), dims[i + 1]),
                )
            })
            .collect();
        let out = Dense::new(store, &format!("mlp.fc{}", n - 1), dims[n - 1], dims[n], rng);
        Self {
            hidden,
            out,
            dims: dims.to_vec(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden
            .iter()
            .map(|(d, b)| d.param_count() + b.param_count())
            .sum::<usize>()
            + self.out.param_count()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.dims[0] {
            return Err(Error::shape(format!(
                "MLP decoder expects [batch, {}], got {s:?}",
                self.dims[0]
            )));
        }
        let mut h = x;
        for (dense, bn) in &self.hidden {
            h = dense.forward(g, h);
            h = bn.forward(g, h);
            h = g.relu(h);
        }
        Ok(self.out.forward(g, h))
    }
}

/// Stacked LSTM over the 10-step sequence, last hidden state to a dense head.
#[derive(Debug, Clone)]
pub struct LstmDecoder {
    pub layers: Vec<Lstm>,
    pub head: Dense,
}

impl LstmDecoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, inputs: usize, cfg: &LstmConfig, rng: &mut Rng) -> Self {
        let mut layers = Vec::new();
        let mut width = inputs;
        for i in 0..cfg.layers {
            layers.push(Lstm::new(store, &format!("lstm{i}"), width, cfg.hidden, rng));
            width = cfg.hidden;
        }
        Self {
            layers,
            head: Dense::new(store, "head", cfg.hidden, 3, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum::<usize>() + self.head.param_count()
    }

    /// `[b, 10, features] -> [b, 3]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 3 || s[1] != SEQUENCE_LEN || s[2] != self.layers[0].inputs {
            return Err(Error::shape(format!(
                "LSTM decoder expects [batch, {SEQUENCE_LEN}, {}], got {s:?}",
                self.layers[0].inputs
            )));
        }
        let mut h = seq;
        for l in &self.layers {
            h = l.forward(g, h);
        }
        let hid = self.layers.last().unwrap().hidden;
        let last = g.slice(h, 1, SEQUENCE_LEN - 1, 1);
        let last = g.reshape(last, &[s[0], hid]);
        Ok(self.head.forward(g, last))
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    Mlp(MlpDecoder),
    Lstm(LstmDecoder),
}

/// Layer structure of a model; parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ModelSpec,
    pub encoder: Option<Encoder>,
    pub decoder: Decoder,
}

impl Network {
    pub fn build<T: Real>(spec: &ModelSpec, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng: Rng = rng::stream(seed, &[rng::label("init")]);
        let encoder = match spec.variant {
            Variant::Fc => None,
            Variant::Cnn | Variant::Rcnn => Some(Encoder::Cnn(CnnEncoder::new(store, &spec.cnn, spec.latent_dim, &mut rng))),
            Variant::Vit | Variant::Rvit => Some(Encoder::Vit(VitEncoder::new(
                store,
                &spec.vit,
                spec.image_size,
                spec.latent_dim,
                &mut rng,
            ))),
        };
        let decoder = if spec.recurrent {
            Decoder::Lstm(LstmDecoder::new(store, spec.latent_dim, &spec.lstm, &mut rng))
        } else {
            Decoder::Mlp(MlpDecoder::new(store, &spec.mlp_dims(), &mut rng))
        };
        Ok(Self {
            spec: spec.clone(),
            encoder,
            decoder,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.as_ref().map_or(0, |e| e.param_count())
            + match &self.decoder {
                Decoder::Mlp(d) => d.param_count(),
                Decoder::Lstm(d) => d.param_count(),
            }
    }

    /// Encodes `[n, 3, s, s]` images to `[n, latent]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Var> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::shape(format!("{} has no image encoder", self.spec.variant.name())))?;
        let s = g.shape(images);
        let size = self.spec.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::shape(format!("encoder expects [n, 3, {size}, {size}], got {s:?}")));
        }
        Ok(enc.forward(g, images))
    }

    /// Recurrent input: encoded frames followed by zero-padded states, `[b, 10, latent]`.
    pub fn sequence<T: Real>(&self, g: &mut Graph<'_, T>, frames: Var, states: Var) -> Result<Var> {
        let fs = g.shape(frames).to_vec();
        let b = fs[0];
        let s = self.spec.image_size;
        let flat = g.reshape(frames, &[b * WINDOW_LEN, 3, s, s]);
        let latent = self.encode(g, flat)?;
        let l = self.spec.latent_dim;
        let latent = g.reshape(latent, &[b, WINDOW_LEN, l]);
        let padded = if l > STATE_DIM {
            let zeros = g.input(Tensor::zeros(&[b, WINDOW_LEN, l - STATE_DIM]));
            g.concat(&[states, zeros], 2)
        } else {
            states
        };
        Ok(g.concat(&[latent, padded], 1))
    }

    /// Forward pass on a batch.
    ///
    /// `frames` is `[b, f, 3, s, s]` with `f` the variant's frame count (the
    /// last frame of the window when `f = 1`); `states` is `[b, 5, 54]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, frames: Option<Var>, states: Var) -> Result<Var> {
        let ss = g.shape(states).to_vec();
        if ss.len() != 3 || ss[1] != WINDOW_LEN || ss[2] != STATE_DIM {
            return Err(Error::shape(format!(
                "states must be [batch, {WINDOW_LEN}, {STATE_DIM}], got {ss:?}"
            )));
        }
        let b = ss[0];
        let need = self.spec.variant.frames_used();
        let frames = if need > 0 {
            let f = frames.ok_or_else(|| Error::shape(format!("{} needs frames", self.spec.variant.name())))?;
            let fs = g.shape(f).to_vec();
            if fs.len() != 5 || fs[0] != b || fs[1] < need {
                return Err(Error::shape(format!(
                    "frames must be [{b}, {need}, 3, s, s], got {fs:?}"
                )));
            }
            // Keep the trailing frames the variant consumes.
            Some(if fs[1] > need { g.slice(f, 1, fs[1] - need, need) } else { f })
        } else {
            None
        };
        match &self.decoder {
            Decoder::Lstm(dec) => {
                let seq = self.sequence(g, frames.unwrap(), states)?;
                dec.forward(g, seq)
            }
            Decoder::Mlp(dec) => {
                let last = g.slice(states, 1, WINDOW_LEN - 1, 1);
                let last = g.reshape(last, &[b, STATE_DIM]);
                let features = match frames {
                    Some(f) => {
                        let s = self.spec.image_size;
                        let img = g.reshape(f, &[b, 3, s, s]);
                        let latent = self.encode(g, img)?;
                        g.concat(&[latent, last], 1)
                    }
                    None => last,
                };
                dec.forward(g, features)
            }
        }
    }
}

/// A network with its single-precision parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(spec, &mut params, seed)?;
        Ok(Self { net, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.net.spec
    }

    /// Eval-mode prediction on a batch, `[b, 3]`.
    pub fn predict(&self, frames: Option<&Tensor<f32>>, states: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::inference(&self.params);
        let f = frames.map(|f| g.input(f.clone()));
        let s = g.input(states.clone());
        let y = self.net.forward(&mut g, f, s)?;
        Ok(g.value(y).clone())
    }

    /// Applies buffer updates recorded by a training-mode pass.
    pub fn apply_updates(&mut self, updates: Vec<(crate::nn::params::ParamId, Tensor<f32>)>) {
        for (id, t) in updates {
            *self.params.value_mut(id) = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::checkpoint::{Checkpoint, CheckpointMeta};
    use rand::{Rng as _, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = Rng::seed_from_u64(seed);
        Tensor {
            shape: shape.to_vec(),
            data: (0..crate::nn::tensor::numel(shape))
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    fn zero_param(store: &mut ParamStore<f32>, id: crate::nn::ParamId) {
        store.value_mut(id).data.fill(0.0);
    }

    #[test]
    fn mlp_parameter_count_matches_closed_form() {
        let spec = ModelSpec::tiny(Variant::Cnn, 16);
        let model = Model::new(&spec, 0).unwrap();
        let Decoder::Mlp(mlp) = &model.net.decoder else { panic!() };
        let dims = spec.mlp_dims();
        assert_eq!(dims, vec![spec.latent_dim + STATE_DIM, 84, 180, 50, 3]);
        let dense: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let bn: usize = dims[1..dims.len() - 1].iter().map(|d| 2 * d).sum();
        assert_eq!(mlp.param_count(), dense + bn);
        assert_eq!(model.net.param_count(), model.params.trainable_count());
    }

    #[test]
    fn every_variant_counts_all_trainable_parameters() {
        for v in Variant::ALL {
            let model = Model::new(&ModelSpec::tiny(v, 16), 1).unwrap();
            assert_eq!(model.net.param_count(), model.params.trainable_count(), "{v:?}");
        }
    }

    #[test]
    fn fc_zero_state_zero_output_layer_gives_zero() {
        let mut model = Model::new(&ModelSpec::tiny(Variant::Fc, 16), 2).unwrap();
        let Decoder::Mlp(mlp) = model.net.decoder.clone() else { panic!() };
        zero_param(&mut model.params, mlp.out.w);
        let y = model.predict(None, &Tensor::zeros(&[2, WINDOW_LEN, STATE_DIM])).unwrap();
        assert_eq!(y.shape, vec![2, 3]);
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic_and_batch_independent() {
        let model = Model::new(&ModelSpec::tiny(Variant::Cnn, 16), 3).unwrap();
        let one_state = random(&[1, WINDOW_LEN, STATE_DIM], 4);
        let one_frame = random(&[1, 1, 3, 16, 16], 5);
        let mut states = one_state.clone();
        states.shape[0] = 3;
        states.data = one_state.data.repeat(3);
        let mut frames = one_frame.clone();
        frames.shape[0] = 3;
        frames.data = one_frame.data.repeat(3);
        let a = model.predict(Some(&frames), &states).unwrap();
        let b = model.predict(Some(&frames), &states).unwrap();
        assert_eq!(a, b);
        for row in a.data.chunks(3) {
            assert_eq!(row, &a.data[..3]);
        }
    }

    #[test]
    fn cnn_zero_projection_gives_zero_latent() {
        let spec = ModelSpec::tiny(Variant::Cnn, 16);
        let mut model = Model::new(&spec, 6).unwrap();
        let Some(Encoder::Cnn(enc)) = model.net.encoder.clone() else { panic!() };
        zero_param(&mut model.params, enc.proj.w);
        let mut g = Graph::inference(&model.params);
        let x = g.input(Tensor::zeros(&[1, 3, 16, 16]));
        let y = model.net.encode(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, spec.latent_dim]);
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_block_with_zero_weights_is_its_shortcut() {
        let mut rng = Rng::seed_from_u64(7);
        let mut store = ParamStore::<f32>::new();
        let block = ResidualBlock::new(&mut store, "b", 4, 4, 1, &mut rng);
        assert!(block.shortcut.is_none());
        zero_param(&mut store, block.conv1.w);
        zero_param(&mut store, block.conv2.w);
        let x = random(&[2, 4, 5, 5], 8).map(|v| v.abs());
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let y = block.forward(&mut g, xv);
        for (a, b) in g.value(y).data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn vit_token_count() {
        let spec = ModelSpec::new(Variant::Vit);
        assert_eq!(spec.image_size, 256);
        assert_eq!((spec.image_size / spec.vit.patch).pow(2) + 1, 257);
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::seed_from_u64(9);
        let cfg = VitConfig {
            depth: 1,
            embed_dim: 8,
            heads: 2,
            ..spec.vit.clone()
        };
        let enc = VitEncoder::new(&mut store, &cfg, 256, 64, &mut rng);
        assert_eq!(enc.tokens, 257);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(&[1, 3, 256, 256]));
        let t = enc.tokens(&mut g, x);
        assert_eq!(g.shape(t), &[1, 257, 8]);
    }

    #[test]
    fn zero_sequence_zero_gates_gives_head_bias() {
        let mut rng = Rng::seed_from_u64(10);
        let mut store = ParamStore::<f32>::new();
        let cfg = LstmConfig { hidden: 6, layers: 2 };
        let dec = LstmDecoder::new(&mut store, 64, &cfg, &mut rng);
        for l in &dec.layers {
            zero_param(&mut store, l.w_ih);
            zero_param(&mut store, l.w_hh);
        }
        store.value_mut(dec.head.b).data = vec![0.5, -1.0, 2.0];
        let mut g = Graph::inference(&store);
        let seq = g.input(Tensor::zeros(&[2, SEQUENCE_LEN, 64]));
        let y = dec.forward(&mut g, seq).unwrap();
        assert_eq!(g.value(y).data, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        let bad = g.input(Tensor::zeros(&[2, 9, 64]));
        assert!(matches!(dec.forward(&mut g, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn recurrent_output_depends_on_state_order() {
        let model = Model::new(&ModelSpec::tiny(Variant::Rcnn, 16), 11).unwrap();
        let frames = random(&[1, WINDOW_LEN, 3, 16, 16], 12);
        let states = random(&[1, WINDOW_LEN, STATE_DIM], 13);
        let mut swapped = states.clone();
        for j in 0..STATE_DIM {
            swapped.data.swap(j, 3 * STATE_DIM + j);
        }
        let a = model.predict(Some(&frames), &states).unwrap();
        let b = model.predict(Some(&frames), &swapped).unwrap();
        assert!(a.data.iter().zip(&b.data).any(|(p, q)| p != q));
    }

    #[test]
    fn rcnn_matches_manual_composition() {
        let spec = ModelSpec::tiny(Variant::Rcnn, 16);
        let model = Model::new(&spec, 14).unwrap();
        let frames = random(&[2, WINDOW_LEN, 3, 16, 16], 15);
        let states = random(&[2, WINDOW_LEN, STATE_DIM], 16);
        let want = model.predict(Some(&frames), &states).unwrap();

        let Decoder::Lstm(dec) = &model.net.decoder else { panic!() };
        let l = spec.latent_dim;
        let mut seq = vec![0.0f32; 2 * SEQUENCE_LEN * l];
        let mut g = Graph::inference(&model.params);
        for b in 0..2 {
            for t in 0..WINDOW_LEN {
                let n = 3 * 16 * 16;
                let start = (b * WINDOW_LEN + t) * n;
                let img = g.input(Tensor {
                    shape: vec![1, 3, 16, 16],
                    data: frames.data[start..start + n].to_vec(),
                });
                let z = model.net.encode(&mut g, img).unwrap();
                let row = (b * SEQUENCE_LEN + t) * l;
                seq[row..row + l].copy_from_slice(&g.value(z).data);
                let srow = (b * SEQUENCE_LEN + WINDOW_LEN + t) * l;
                let s0 = (b * WINDOW_LEN + t) * STATE_DIM;
                seq[srow..srow + STATE_DIM].copy_from_slice(&states.data[s0..s0 + STATE_DIM]);
            }
        }
        let seq = g.input(Tensor {
            shape: vec![2, SEQUENCE_LEN, l],
            data: seq,
        });
        let y = dec.forward(&mut g, seq).unwrap();
        for (a, b) in g.value(y).data.iter().zip(&want.data) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn cnn_ignores_all_but_the_last_frame() {
        let model = Model::new(&ModelSpec::tiny(Variant::Cnn, 16), 17).unwrap();
        let states = random(&[1, WINDOW_LEN, STATE_DIM], 18);
        let mut frames = random(&[1, WINDOW_LEN, 3, 16, 16], 19);
        let a = model.predict(Some(&frames), &states).unwrap();
        let n = 3 * 16 * 16;
        for v in &mut frames.data[..4 * n] {
            *v = -*v + 0.3;
        }
        let b = model.predict(Some(&frames), &states).unwrap();
        assert_eq!(a, b);
        let last = Tensor {
            shape: vec![1, 1, 3, 16, 16],
            data: frames.data[4 * n..].to_vec(),
        };
        assert_eq!(model.predict(Some(&last), &states).unwrap(), a);
    }

    #[test]
    fn spec_validation() {
        let mut spec = ModelSpec::tiny(Variant::Rvit, 16);
        spec.latent_dim = 32;
        assert!(matches!(spec.validate(), Err(Error::Config { .. })));
        let mut spec = ModelSpec::tiny(Variant::Vit, 16);
        spec.vit.patch = 5;
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::new(Variant::Cnn);
        spec.recurrent = true;
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::new(Variant::Fc);
        spec.mlp = vec![84, 180, 50, 2];
        assert!(spec.validate().is_err());
        assert_eq!("RViT".parse::<Variant>().unwrap(), Variant::Rvit);
        assert!("resnet".parse::<Variant>().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = ModelSpec::tiny(Variant::Rvit, 16);
        let model = Model::new(&spec, 20).unwrap();
        let meta = CheckpointMeta {
            spec: spec.clone(),
            normalizer: Some(crate::dataset::Normalizer::identity()),
            config_digest: "abc".into(),
            config: serde_json::json!({"epochs": 3}),
        };
        let ckpt = Checkpoint::from_model(&model, meta);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored = back.to_model().unwrap();
        assert_eq!(restored.params, model.params);
        let frames = random(&[1, WINDOW_LEN, 3, 16, 16], 21);
        let states = random(&[1, WINDOW_LEN, STATE_DIM], 22);
        assert_eq!(
            restored.predict(Some(&frames), &states).unwrap(),
            model.predict(Some(&frames), &states).unwrap()
        );
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut dup = ckpt.clone();
        dup.params.push(dup.params[0].clone());
        assert!(dup.to_model().is_err());
        let mut missing = ckpt.clone();
        missing.params.pop();
        assert!(missing.to_model().is_err());
    }
}
