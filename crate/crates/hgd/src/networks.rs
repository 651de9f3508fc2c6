//! Content/attribute encoders, generators, and the two discriminators.
//! Compact residual encoder/decoder backbone with configurable scale.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgdError, Result};
use crate::nn::{Binding, Conv2d, InstanceNorm, Linear, ParamStore};
use crate::tape::{Id, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub resolution: usize,
    /// content map spatial side H' = W'
    pub content_hw: usize,
    pub content_channels: usize,
    /// attribute code length C_a
    pub attr_dim: usize,
    /// channel width of the first encoder block
    pub base_channels: usize,
    pub content_res_blocks: usize,
    pub gen_res_blocks: usize,
    pub n_modalities: usize,
    pub share_content_encoders: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetConfig {
    pub fn toy() -> Self {
        NetConfig {
            resolution: 64,
            content_hw: 16,
            content_channels: 64,
            attr_dim: 8,
            base_channels: 8,
            content_res_blocks: 4,
            gen_res_blocks: 2,
            n_modalities: 2,
            share_content_encoders: true,
        }
    }

    pub fn clinical() -> Self {
        NetConfig {
            resolution: 256,
            content_hw: 54,
            content_channels: 256,
            attr_dim: 8,
            base_channels: 16,
            content_res_blocks: 4,
            gen_res_blocks: 2,
            n_modalities: 2,
            share_content_encoders: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % 4 != 0 || self.resolution < 16 {
            return Err(HgdError::Config("resolution must be a multiple of 4, >= 16".into()));
        }
        if self.content_hw == 0 || self.content_hw > self.resolution / 4 {
            return Err(HgdError::Config(format!(
                "content_hw must be in [1, {}]",
                self.resolution / 4
            )));
        }
        if self.content_channels % 4 != 0 {
            return Err(HgdError::Config("content_channels must be divisible by 4".into()));
        }
        if self.attr_dim == 0 || self.base_channels == 0 {
            return Err(HgdError::Config("attr_dim and base_channels must be >= 1".into()));
        }
        if self.n_modalities < 2 {
            return Err(HgdError::Config("need at least 2 modalities".into()));
        }
        Ok(())
    }

    /// Kernel of the valid conv taking the post-downsampling grid to the
    /// content resolution; 0 means a padded 3x3 (sizes already agree).
    fn fit_kernel(&self) -> usize {
        let side = self.resolution / 4;
        if side == self.content_hw {
            0
        } else {
            side - self.content_hw + 1
        }
    }
}

#[derive(Clone, Copy)]
enum Act {
    Relu,
    LeakyRelu,
    Tanh,
    None,
}

#[derive(Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: Option<InstanceNorm>,
    act: Act,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        norm: bool,
        act: Act,
    ) -> Self {
        let conv = Conv2d::new(store, rng, name, ci, co, k, stride, pad);
        let norm = norm.then(|| InstanceNorm::new(store, &format!("{name}.in"), co));
        ConvBlock { conv, norm, act }
    }

    fn forward(&self, t: &mut Tape, store: &ParamStore, bind: &mut Binding, x: Id) -> Id {
        let mut y = self.conv.apply(t, store, bind, x);
        if let Some(n) = &self.norm {
            y = n.apply(t, store, bind, y);
        }
        match self.act {
            Act::Relu => t.relu(y),
            Act::LeakyRelu => t.leaky_relu(y, 0.2),
            Act::Tanh => t.tanh(y),
            Act::None => y,
        }
    }
}

/// Bottleneck residual block: 1x1 down, 3x3, 1x1 up, instance norm, skip.
#[derive(Clone)]
struct ResBlock {
    reduce: ConvBlock,
    mid: ConvBlock,
    expand: ConvBlock,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ch: usize) -> Self {
        let inner = ch / 4;
        ResBlock {
            reduce: ConvBlock::new(store, rng, &format!("{name}.reduce"), ch, inner, 1, 1, 0, true, Act::Relu),
            mid: ConvBlock::new(store, rng, &format!("{name}.mid"), inner, inner, 3, 1, 1, true, Act::Relu),
            expand: ConvBlock::new(store, rng, &format!("{name}.expand"), inner, ch, 1, 1, 0, true, Act::None),
        }
    }

    fn forward(&self, t: &mut Tape, store: &ParamStore, bind: &mut Binding, x: Id) -> Id {
        let y = self.reduce.forward(t, store, bind, x);
        let y = self.mid.forward(t, store, bind, y);
        let y = self.expand.forward(t, store, bind, y);
        t.add(x, y)
    }
}

/// Three downsampling blocks (the first at stride 1) into a fitted conv at
/// the content resolution, then residual blocks.
pub struct ContentEncoder {
    stem: ConvBlock,
    down1: ConvBlock,
    down2: ConvBlock,
    fit: ConvBlock,
    res: Vec<ResBlock>,
}

impl ContentEncoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &NetConfig) -> Self {
        let b = cfg.base_channels;
        let c = cfg.content_channels;
        let fk = cfg.fit_kernel();
        let fit = if fk == 0 {
            ConvBlock::new(store, rng, &format!("{name}.fit"), 4 * b, c, 3, 1, 1, true, Act::Relu)
        } else {
            ConvBlock::new(store, rng, &format!("{name}.fit"), 4 * b, c, fk, 1, 0, true, Act::Relu)
        };
        ContentEncoder {
            stem: ConvBlock::new(store, rng, &format!("{name}.stem"), 1, b, 3, 1, 1, true, Act::Relu),
            down1: ConvBlock::new(store, rng, &format!("{name}.down1"), b, 2 * b, 3, 2, 1, true, Act::Relu),
            down2: ConvBlock::new(store, rng, &format!("{name}.down2"), 2 * b, 4 * b, 3, 2, 1, true, Act::Relu),
            fit,
            res: (0..cfg.content_res_blocks)
                .map(|k| ResBlock::new(store, rng, &format!("{name}.res{k}"), c))
                .collect(),
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        cfg: &NetConfig,
        image: Id,
    ) -> Result<Id> {
        let r = cfg.resolution;
        if t.shape(image) != [1, r, r] {
            return Err(HgdError::Shape(format!(
                "content encoder expects [1, {r}, {r}], got {:?}",
                t.shape(image)
            )));
        }
        let mut y = self.stem.forward(t, store, bind, image);
        y = self.down1.forward(t, store, bind, y);
        y = self.down2.forward(t, store, bind, y);
        y = self.fit.forward(t, store, bind, y);
        for rb in &self.res {
            y = rb.forward(t, store, bind, y);
        }
        Ok(y)
    }
}

/// Four stride-2 blocks, global average pooling, linear head to C_a.
pub struct AttrEncoder {
    downs: Vec<ConvBlock>,
    head: Linear,
}

impl AttrEncoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &NetConfig) -> Self {
        let b = cfg.base_channels;
        let chans = [1, b, b, b, b];
        let downs = (0..4)
            .map(|k| {
                ConvBlock::new(
                    store,
                    rng,
                    &format!("{name}.down{k}"),
                    chans[k],
                    chans[k + 1],
                    3,
                    2,
                    1,
                    false,
                    Act::Relu,
                )
            })
            .collect();
        AttrEncoder { downs, head: Linear::new(store, rng, &format!("{name}.head"), b, cfg.attr_dim) }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        cfg: &NetConfig,
        image: Id,
    ) -> Result<Id> {
        let r = cfg.resolution;
        if t.shape(image) != [1, r, r] {
            return Err(HgdError::Shape(format!(
                "attribute encoder expects [1, {r}, {r}], got {:?}",
                t.shape(image)
            )));
        }
        let mut y = image;
        for d in &self.downs {
            y = d.forward(t, store, bind, y);
        }
        let pooled = t.global_avg_pool(y);
        Ok(self.head.apply(t, store, bind, pooled))
    }
}

/// Attribute injection, residual blocks, two upsampling stages, tanh output.
pub struct Generator {
    inject: ConvBlock,
    res: Vec<ResBlock>,
    up1_reduce: ConvBlock,
    up1_conv: ConvBlock,
    up2_conv: ConvBlock,
    out: ConvBlock,
}

impl Generator {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &NetConfig) -> Self {
        let c = cfg.content_channels;
        let b = cfg.base_channels;
        let (u1, u2) = (2 * b, b);
        Generator {
            inject: ConvBlock::new(
                store,
                rng,
                &format!("{name}.inject"),
                c + 2 * cfg.attr_dim,
                c,
                1,
                1,
                0,
                true,
                Act::Relu,
            ),
            res: (0..cfg.gen_res_blocks)
                .map(|k| ResBlock::new(store, rng, &format!("{name}.res{k}"), c))
                .collect(),
            up1_reduce: ConvBlock::new(store, rng, &format!("{name}.up1_reduce"), c, u1, 1, 1, 0, true, Act::Relu),
            up1_conv: ConvBlock::new(store, rng, &format!("{name}.up1"), u1, u1, 3, 1, 1, true, Act::Relu),
            up2_conv: ConvBlock::new(store, rng, &format!("{name}.up2"), u1, u2, 3, 1, 1, true, Act::Relu),
            out: ConvBlock::new(store, rng, &format!("{name}.out"), u2, 1, 3, 1, 1, false, Act::Tanh),
        }
    }

    /// `attr_combined` is the channel-stacked `[2*C_a, H', W']` map from
    /// the bank combine step.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        cfg: &NetConfig,
        content: Id,
        attr_combined: Id,
    ) -> Result<Id> {
        let hw = cfg.content_hw;
        if t.shape(content) != [cfg.content_channels, hw, hw] {
            return Err(HgdError::Shape(format!(
                "generator expects content [{}, {hw}, {hw}], got {:?}",
                cfg.content_channels,
                t.shape(content)
            )));
        }
        if t.shape(attr_combined) != [2 * cfg.attr_dim, hw, hw] {
            return Err(HgdError::Shape(format!(
                "generator expects combined attribute [{}, {hw}, {hw}], got {:?}",
                2 * cfg.attr_dim,
                t.shape(attr_combined)
            )));
        }
        let x = t.concat_channels(content, attr_combined);
        let mut y = self.inject.forward(t, store, bind, x);
        for rb in &self.res {
            y = rb.forward(t, store, bind, y);
        }
        y = self.up1_reduce.forward(t, store, bind, y);
        let half = cfg.resolution / 2;
        y = t.resize_nearest(y, half, half);
        y = self.up1_conv.forward(t, store, bind, y);
        y = t.resize_nearest(y, cfg.resolution, cfg.resolution);
        y = self.up2_conv.forward(t, store, bind, y);
        Ok(self.out.forward(t, store, bind, y))
    }
}

/// Two-scale patch discriminator; returns one score map per scale.
pub struct PatchDisc {
    scales: Vec<(ConvBlock, ConvBlock, ConvBlock)>,
}

impl PatchDisc {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &NetConfig) -> Self {
        let b = cfg.base_channels;
        let scales = (0..2)
            .map(|s| {
                let n = format!("{name}.s{s}");
                (
                    ConvBlock::new(store, rng, &format!("{n}.c0"), 1, b, 4, 2, 1, false, Act::LeakyRelu),
                    ConvBlock::new(store, rng, &format!("{n}.c1"), b, 2 * b, 4, 2, 1, false, Act::LeakyRelu),
                    ConvBlock::new(store, rng, &format!("{n}.c2"), 2 * b, 1, 3, 1, 1, false, Act::None),
                )
            })
            .collect();
        PatchDisc { scales }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        cfg: &NetConfig,
        image: Id,
    ) -> Result<Vec<Id>> {
        let r = cfg.resolution;
        if t.shape(image) != [1, r, r] {
            return Err(HgdError::Shape(format!(
                "domain discriminator expects [1, {r}, {r}], got {:?}",
                t.shape(image)
            )));
        }
        let mut out = Vec::with_capacity(self.scales.len());
        let mut x = image;
        let mut side = r;
        for (c0, c1, c2) in &self.scales {
            let y = c0.forward(t, store, bind, x);
            let y = c1.forward(t, store, bind, y);
            out.push(c2.forward(t, store, bind, y));
            side /= 2;
            x = t.resize_nearest(image, side, side);
        }
        Ok(out)
    }
}

/// Convolutional head over content maps ending in a scalar modality score.
pub struct ContentDisc {
    c0: ConvBlock,
    c1: ConvBlock,
    head: Linear,
}

impl ContentDisc {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &NetConfig) -> Self {
        let c = cfg.content_channels;
        let h = (c / 2).max(4);
        let h2 = (c / 4).max(4);
        ContentDisc {
            c0: ConvBlock::new(store, rng, &format!("{name}.c0"), c, h, 3, 2, 1, false, Act::LeakyRelu),
            c1: ConvBlock::new(store, rng, &format!("{name}.c1"), h, h2, 3, 2, 1, false, Act::LeakyRelu),
            head: Linear::new(store, rng, &format!("{name}.head"), h2, 1),
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        bind: &mut Binding,
        cfg: &NetConfig,
        content: Id,
    ) -> Result<Id> {
        let hw = cfg.content_hw;
        if t.shape(content) != [cfg.content_channels, hw, hw] {
            return Err(HgdError::Shape(format!(
                "content discriminator expects [{}, {hw}, {hw}], got {:?}",
                cfg.content_channels,
                t.shape(content)
            )));
        }
        let y = self.c0.forward(t, store, bind, content);
        let y = self.c1.forward(t, store, bind, y);
        let pooled = t.global_avg_pool(y);
        Ok(self.head.apply(t, store, bind, pooled))
    }
}

/// All per-modality components plus the shared content discriminator,
/// backed by one parameter store.
pub struct ModelBundle {
    pub cfg: NetConfig,
    pub store: ParamStore,
    content_encoders: Vec<ContentEncoder>,
    pub attr_encoders: Vec<AttrEncoder>,
    pub generators: Vec<Generator>,
    pub domain_discriminators: Vec<PatchDisc>,
    pub content_discriminator: ContentDisc,
}

impl ModelBundle {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = cfg.n_modalities;
        let n_content = if cfg.share_content_encoders { 1 } else { k };
        let content_encoders = (0..n_content)
            .map(|m| ContentEncoder::new(&mut store, &mut rng, &format!("content_enc{m}"), &cfg))
            .collect();
        let attr_encoders = (0..k)
            .map(|m| AttrEncoder::new(&mut store, &mut rng, &format!("attr_enc{m}"), &cfg))
            .collect();
        let generators = (0..k)
            .map(|m| Generator::new(&mut store, &mut rng, &format!("gen{m}"), &cfg))
            .collect();
        let domain_discriminators = (0..k)
            .map(|m| PatchDisc::new(&mut store, &mut rng, &format!("disc_dom{m}"), &cfg))
            .collect();
        let content_discriminator = ContentDisc::new(&mut store, &mut rng, "disc_content", &cfg);
        Ok(ModelBundle {
            cfg,
            store,
            content_encoders,
            attr_encoders,
            generators,
            domain_discriminators,
            content_discriminator,
        })
    }

    pub fn content_encoder(&self, modality: usize) -> &ContentEncoder {
        if self.cfg.share_content_encoders {
            &self.content_encoders[0]
        } else {
            &self.content_encoders[modality]
        }
    }

    pub fn check_modality(&self, modality: usize) -> Result<()> {
        if modality >= self.cfg.n_modalities {
            return Err(HgdError::Argument(format!(
                "modality {modality} outside [0, {})",
                self.cfg.n_modalities
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }
}

/// Discriminator parameters form their own optimizer group.
pub fn is_discriminator_param(name: &str) -> bool {
    name.starts_with("disc_dom") || name.starts_with("disc_content")
}
