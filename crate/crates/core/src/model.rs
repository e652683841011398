//! Desk-scale prompt segmentation model: patch-attention image encoder, box
//! prompt encoder, optional condition block, convolutional mask decoder.

use rand::Rng;

use crate::cemb::{self, cemb_forward, CembConfig, CembParams, SubGroupCondition};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attention_block, conv2d, conv_transpose2d, AttentionBlockParams, Conv2dParams, ConvTranspose2dParams, LinearParams};
use crate::params::{Bindings, ParamGroup, ParamStore};
use crate::rng::stream;
use crate::tensor::{Float, Tensor};

/// How the condition block's output reaches the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    /// Decoder sees `cemb(f)`.
    #[default]
    Replace,
    /// Decoder sees `f + cemb(f)`.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side length in pixels.
    pub image_size: usize,
    pub in_channels: usize,
    /// Embedding width `C`.
    pub channels: usize,
    pub patch: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Number of sub-groups `m`.
    pub subgroups: usize,
    pub cemb: CembConfig,
    pub insertion: Insertion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            channels: 32,
            patch: 8,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2,
            subgroups: 3,
            cemb: CembConfig::default(),
            insertion: Insertion::Replace,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.in_channels == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return fail("model dimensions must be positive".into());
        }
        if !self.patch.is_power_of_two() {
            return fail(format!("model.patch must be a power of two, got {}", self.patch));
        }
        if self.image_size % self.patch != 0 {
            return fail(format!(
                "model.image_size {} not divisible by model.patch {}",
                self.image_size, self.patch
            ));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "model.channels {} not divisible by model.heads {}",
                self.channels, self.heads
            ));
        }
        if self.subgroups == 0 {
            return fail("model.subgroups must be >= 1".into());
        }
        if !(self.cemb.eps > 0.0) {
            return fail(format!("model.cemb.eps must be > 0, got {}", self.cemb.eps));
        }
        Ok(())
    }

    /// Feature-map side length `image_size / patch`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Output channels of each stride-2 upsampling stage.
    pub fn up_channels(&self) -> Vec<usize> {
        let ups = self.patch.trailing_zeros() as usize;
        (0..ups).map(|i| (self.channels >> i).max(2)).collect()
    }
}

/// Axis-aligned box with exclusive maxima, in resized-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct BBoxPrompt {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBoxPrompt {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x_min < self.x_max && self.x_max <= width && self.y_min < self.y_max && self.y_max <= height {
            Ok(())
        } else {
            Err(Error::invalid(
                "bbox",
                format!("{self:?} is not a valid box in a {width}×{height} image"),
            ))
        }
    }

    /// Corners scaled to `[0, 1]`: `[x_min/W, y_min/H, x_max/W, y_max/H]`.
    pub fn normalized(&self, width: usize, height: usize) -> [f64; 4] {
        let (w, h) = (width as f64, height as f64);
        [
            self.x_min as f64 / w,
            self.y_min as f64 / h,
            self.x_max as f64 / w,
            self.y_max as f64 / h,
        ]
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }
}

/// Training stage; decides which parameter groups are frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Encoder, prompt encoder and decoder train without conditioning.
    Pretrain,
    /// Encoders frozen; condition block and decoder train.
    Finetune,
}

impl Stage {
    pub fn frozen(self, group: ParamGroup) -> bool {
        match self {
            Stage::Pretrain => group == ParamGroup::Cemb,
            Stage::Finetune => matches!(group, ParamGroup::Encoder | ParamGroup::PromptEncoder),
        }
    }
}

/// Configuration plus every named parameter of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn uniform_fan_in<T: Float, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

fn insert_linear<T: Float, R: Rng + ?Sized>(
    s: &mut ParamStore<T>,
    name: &str,
    out: usize,
    inp: usize,
    bias: bool,
    rng: &mut R,
) -> Result<()> {
    s.insert(format!("{name}.weight"), uniform_fan_in(vec![out, inp], inp, rng))?;
    if bias {
        s.insert(format!("{name}.bias"), uniform_fan_in(vec![out], inp, rng))?;
    }
    Ok(())
}

impl<T: Float> ModelBundle<T> {
    /// Fresh parameters. Each group draws from its own stream of `seed`, so
    /// a bundle with and without the condition block agree on every shared
    /// parameter.
    pub fn init(config: ModelConfig, seed: u64, with_cemb: bool) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut s = ParamStore::new();

        let mut r = stream(seed, "init.encoder", 0);
        let patch_in = config.in_channels * config.patch * config.patch;
        insert_linear(&mut s, "encoder.patch", c, patch_in, true, &mut r)?;
        s.insert("encoder.pos", Tensor::normal(vec![config.tokens(), c], 0.02, &mut r))?;
        let hidden = c * config.mlp_ratio;
        for i in 0..config.blocks {
            let p = format!("encoder.block{i}");
            s.insert(format!("{p}.norm1.scale"), Tensor::ones([c]))?;
            s.insert(format!("{p}.norm1.shift"), Tensor::zeros([c]))?;
            insert_linear(&mut s, &format!("{p}.query"), c, c, true, &mut r)?;
            insert_linear(&mut s, &format!("{p}.key"), c, c, false, &mut r)?;
            insert_linear(&mut s, &format!("{p}.value"), c, c, true, &mut r)?;
            insert_linear(&mut s, &format!("{p}.out"), c, c, true, &mut r)?;
            s.insert(format!("{p}.norm2.scale"), Tensor::ones([c]))?;
            s.insert(format!("{p}.norm2.shift"), Tensor::zeros([c]))?;
            insert_linear(&mut s, &format!("{p}.mlp_in"), hidden, c, true, &mut r)?;
            insert_linear(&mut s, &format!("{p}.mlp_out"), c, hidden, true, &mut r)?;
        }

        let mut r = stream(seed, "init.prompt", 0);
        insert_linear(&mut s, "prompt.fc1", c, 4, true, &mut r)?;
        insert_linear(&mut s, "prompt.fc2", c, c, true, &mut r)?;
        s.insert("prompt.dense.weight", uniform_fan_in(vec![c], 1, &mut r))?;
        s.insert("prompt.dense.bias", uniform_fan_in(vec![c], 1, &mut r))?;

        if with_cemb {
            let mut r = stream(seed, "init.cemb", 0);
            cemb::init_params(&mut s, "cemb", c, config.subgroups, &config.cemb, &mut r)?;
        }

        let mut r = stream(seed, "init.decoder", 0);
        for l in ["conv1", "conv2"] {
            s.insert(format!("decoder.{l}.weight"), uniform_fan_in(vec![c, c, 3, 3], c * 9, &mut r))?;
            s.insert(format!("decoder.{l}.bias"), uniform_fan_in(vec![c], c * 9, &mut r))?;
        }
        let mut cin = c;
        for (i, cout) in config.up_channels().into_iter().enumerate() {
            s.insert(format!("decoder.up{i}.weight"), uniform_fan_in(vec![cin, cout, 2, 2], cin, &mut r))?;
            s.insert(format!("decoder.up{i}.bias"), uniform_fan_in(vec![cout], cin, &mut r))?;
            cin = cout;
        }
        s.insert("decoder.head.weight", uniform_fan_in(vec![1, cin, 3, 3], cin * 9, &mut r))?;
        s.insert("decoder.head.bias", uniform_fan_in(vec![1], cin * 9, &mut r))?;

        Ok(Self { config, params: s })
    }

    pub fn has_cemb(&self) -> bool {
        self.params.has_group(ParamGroup::Cemb)
    }

    /// The unconditioned variant: same parameters minus the condition block.
    pub fn without_cemb(&self) -> Self {
        let mut params = ParamStore::new();
        for p in self.params.iter().filter(|p| p.group != ParamGroup::Cemb) {
            params
                .insert(p.name.clone(), p.value.clone())
                .expect("names were unique in the source store");
            params.get_mut(&p.name).expect("just inserted").frozen = p.frozen;
        }
        Self { config: self.config, params }
    }

    /// Adds a freshly initialized condition block, e.g. after pretraining.
    pub fn attach_cemb(&mut self, seed: u64) -> Result<()> {
        if self.has_cemb() {
            return Ok(());
        }
        let mut r = stream(seed, "init.cemb", 0);
        cemb::init_params(&mut self.params, "cemb", self.config.channels, self.config.subgroups, &self.config.cemb, &mut r)
    }

    pub fn set_stage(&mut self, stage: Stage) {
        for g in ParamGroup::ALL {
            self.params.set_group_frozen(g, stage.frozen(g));
        }
    }

    /// Image → feature map without recording gradients.
    pub fn encode_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let net = Net::new(&self.config, &b);
        let x = g.constant(images.clone());
        let f = net.encode_image(&mut g, x)?;
        Ok(g.value(f).clone())
    }

    /// Mask logits `N×1×H×W` without recording gradients.
    pub fn predict(
        &self,
        images: &Tensor<T>,
        boxes: &[BBoxPrompt],
        conds: Option<&[SubGroupCondition]>,
        use_cemb: bool,
    ) -> Result<Tensor<T>> {
        let f = self.encode_features(images)?;
        self.predict_from_features(&f, boxes, conds, use_cemb)
    }

    pub fn predict_from_features(
        &self,
        features: &Tensor<T>,
        boxes: &[BBoxPrompt],
        conds: Option<&[SubGroupCondition]>,
        use_cemb: bool,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let net = Net::new(&self.config, &b);
        let f = g.constant(features.clone());
        let y = net.forward_from_features(&mut g, f, boxes, conds, use_cemb)?;
        Ok(g.value(y).clone())
    }
}

/// Fraction of each of the `cells×cells` square cells of a `side×side` image
/// covered by `b`, row-major.
pub fn box_coverage(b: &BBoxPrompt, side: usize, cells: usize) -> Vec<f64> {
    let cell = side as f64 / cells as f64;
    let overlap = |lo: usize, hi: usize, i: usize| {
        let (a, z) = (i as f64 * cell, (i + 1) as f64 * cell);
        ((hi as f64).min(z) - (lo as f64).max(a)).max(0.0) / cell
    };
    let mut out = Vec::with_capacity(cells * cells);
    for i in 0..cells {
        let fy = overlap(b.y_min, b.y_max, i);
        for j in 0..cells {
            out.push(fy * overlap(b.x_min, b.x_max, j));
        }
    }
    out
}

/// A model whose parameters are bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct Net<'a> {
    pub config: &'a ModelConfig,
    pub bindings: &'a Bindings,
}

impl<'a> Net<'a> {
    pub fn new(config: &'a ModelConfig, bindings: &'a Bindings) -> Self {
        Self { config, bindings }
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.bindings.var(name)
    }

    fn linear(&self, name: &str) -> Result<LinearParams> {
        Ok(LinearParams {
            weight: self.var(&format!("{name}.weight"))?,
            bias: self.bindings.opt(&format!("{name}.bias")),
        })
    }

    fn block(&self, i: usize) -> Result<AttentionBlockParams> {
        let p = format!("encoder.block{i}");
        Ok(AttentionBlockParams {
            heads: self.config.heads,
            norm1_scale: self.var(&format!("{p}.norm1.scale"))?,
            norm1_shift: self.var(&format!("{p}.norm1.shift"))?,
            query: self.linear(&format!("{p}.query"))?,
            key: self.linear(&format!("{p}.key"))?,
            value: self.linear(&format!("{p}.value"))?,
            out: self.linear(&format!("{p}.out"))?,
            norm2_scale: self.var(&format!("{p}.norm2.scale"))?,
            norm2_shift: self.var(&format!("{p}.norm2.shift"))?,
            mlp_in: self.linear(&format!("{p}.mlp_in"))?,
            mlp_out: self.linear(&format!("{p}.mlp_out"))?,
        })
    }

    /// `N×ch×H×W` image → `N×C×(H/p)×(W/p)` embedding.
    pub fn encode_image<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let cfg = self.config;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::invalid(
                "encode_image",
                format!(
                    "expected N×{}×{}×{}, got {s:?}",
                    cfg.in_channels, cfg.image_size, cfg.image_size
                ),
            ));
        }
        let n = s[0];
        let tokens = g.patchify(x, cfg.patch)?;
        let mut h = crate::nn::linear(g, tokens, &self.linear("encoder.patch")?)?;
        let pos = self.var("encoder.pos")?;
        h = g.add(h, pos)?;
        for i in 0..cfg.blocks {
            h = attention_block(g, h, &self.block(i)?)?;
        }
        let h = g.permute(h, &[0, 2, 1])?;
        g.reshape(h, &[n, cfg.channels, cfg.grid(), cfg.grid()])
    }

    /// Boxes → sparse `N×C` embeddings through `4 → C → C`, plus a dense
    /// `N×C×h×w` map from each box's coverage of the feature cells.
    pub fn encode_prompt<T: Float>(&self, g: &mut Graph<T>, boxes: &[BBoxPrompt]) -> Result<(Var, Var)> {
        let cfg = self.config;
        let side = cfg.image_size;
        let (n, c, h) = (boxes.len().max(1), cfg.channels, cfg.grid());
        let mut coords = Vec::with_capacity(n * 4);
        let mut cover = Vec::with_capacity(n * h * h);
        for b in boxes {
            b.validate(side, side)?;
            coords.extend(b.normalized(side, side).map(T::of));
            cover.extend(box_coverage(b, side, h).into_iter().map(T::of));
        }
        let x = g.constant(Tensor::new([n, 4], coords)?);
        let sparse = crate::nn::linear(g, x, &self.linear("prompt.fc1")?)?;
        let sparse = g.relu(sparse);
        let sparse = crate::nn::linear(g, sparse, &self.linear("prompt.fc2")?)?;
        let cover = g.constant(Tensor::new([n, 1, h, h], cover)?);
        let w = g.reshape(self.var("prompt.dense.weight")?, &[1, c, 1, 1])?;
        let bias = g.reshape(self.var("prompt.dense.bias")?, &[1, c, 1, 1])?;
        let dense = g.mul(cover, w)?;
        let dense = g.add(dense, bias)?;
        Ok((sparse, dense))
    }

    /// Features `N×C×h×w` plus sparse `N×C` and dense `N×C×h×w` prompts →
    /// logits `N×1×H×W`.
    pub fn decode_mask<T: Float>(&self, g: &mut Graph<T>, features: Var, prompt: (Var, Var)) -> Result<Var> {
        let cfg = self.config;
        let (sparse, dense) = prompt;
        let s = g.shape(features).to_vec();
        let expect = [s.first().copied().unwrap_or(0), cfg.channels, cfg.grid(), cfg.grid()];
        if s != expect || g.shape(sparse) != [s[0], cfg.channels] || g.shape(dense) != expect {
            return Err(Error::shape("decode_mask", &s, g.shape(sparse)));
        }
        let p = g.reshape(sparse, &[s[0], cfg.channels, 1, 1])?;
        let mut h = g.add(features, p)?;
        h = g.add(h, dense)?;
        for l in ["conv1", "conv2"] {
            let conv = Conv2dParams {
                weight: self.var(&format!("decoder.{l}.weight"))?,
                bias: Some(self.var(&format!("decoder.{l}.bias"))?),
                stride: 1,
                padding: 1,
            };
            h = conv2d(g, h, &conv)?;
            h = g.relu(h);
        }
        for i in 0..cfg.up_channels().len() {
            let up = ConvTranspose2dParams {
                weight: self.var(&format!("decoder.up{i}.weight"))?,
                bias: Some(self.var(&format!("decoder.up{i}.bias"))?),
                stride: 2,
                padding: 0,
            };
            h = conv_transpose2d(g, h, &up)?;
            h = g.relu(h);
        }
        let head = Conv2dParams {
            weight: self.var("decoder.head.weight")?,
            bias: Some(self.var("decoder.head.bias")?),
            stride: 1,
            padding: 1,
        };
        conv2d(g, h, &head)
    }

    pub fn forward_from_features<T: Float>(
        &self,
        g: &mut Graph<T>,
        features: Var,
        boxes: &[BBoxPrompt],
        conds: Option<&[SubGroupCondition]>,
        use_cemb: bool,
    ) -> Result<Var> {
        let n = g.shape(features)[0];
        if boxes.len() != n {
            return Err(Error::invalid("forward", format!("{} boxes for a batch of {n}", boxes.len())));
        }
        let h = if use_cemb {
            let conds = conds.ok_or_else(|| Error::invalid("forward", "conditioned forward needs sub-group ids"))?;
            if self.bindings.opt("cemb.conv0.weight").is_none() {
                return Err(Error::Config("model has no condition block".into()));
            }
            if conds.iter().any(|c| c.count() != self.config.subgroups) {
                return Err(Error::invalid(
                    "forward",
                    format!("conditions must range over {} sub-groups", self.config.subgroups),
                ));
            }
            let p = CembParams::from_bindings(self.bindings, "cemb", &self.config.cemb)?;
            let z = cemb_forward(g, features, conds, &p)?;
            match self.config.insertion {
                Insertion::Replace => z,
                Insertion::Residual => g.add(features, z)?,
            }
        } else {
            features
        };
        let prompt = self.encode_prompt(g, boxes)?;
        self.decode_mask(g, h, prompt)
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        images: Var,
        boxes: &[BBoxPrompt],
        conds: Option<&[SubGroupCondition]>,
        use_cemb: bool,
    ) -> Result<Var> {
        let f = self.encode_image(g, images)?;
        self.forward_from_features(g, f, boxes, conds, use_cemb)
    }
}
