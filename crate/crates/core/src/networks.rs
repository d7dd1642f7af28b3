//! The generator, the two AdaIN code generators, the style encoder and the
//! multi-head discriminator.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::codespace::{AdaINCodePair, Domain, LATENT_DIM, NUM_DOMAINS, STYLE_DIM};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::{Real, Tensor};

const LEAKY: f64 = 0.2;
const SKIP_SCALE: f64 = core::f64::consts::FRAC_1_SQRT_2;

pub const STORE_GENERATOR: u16 = 0;
pub const STORE_F_ENC: u16 = 1;
pub const STORE_F_DEC: u16 = 2;
pub const STORE_STYLE: u16 = 3;
pub const STORE_DISC: u16 = 4;
/// Added to every store id of a frozen teacher copy.
pub const TEACHER_OFFSET: u16 = 16;

/// Architecture sizes shared by all four modules.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub img_size: usize,
    pub width: usize,
    pub max_width: usize,
    /// Down-sampling blocks in the generator encoder (and up-sampling blocks in the decoder).
    pub n_down: usize,
    /// Intermediate blocks on each side of the bottleneck.
    pub n_mid: usize,
    /// Hidden width of the code generators.
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            img_size: 256,
            width: 64,
            max_width: 512,
            n_down: 4,
            n_mid: 2,
            mlp_hidden: 512,
        }
    }
}

impl ModelConfig {
    /// 64×64 canvas, width 16.
    pub fn desk() -> Self {
        ModelConfig {
            img_size: 64,
            width: 16,
            max_width: 128,
            n_down: 4,
            n_mid: 2,
            mlp_hidden: 64,
        }
    }

    /// 8×8 canvas, width 8; small enough for finite differences in `f64`.
    pub fn micro() -> Self {
        ModelConfig {
            img_size: 8,
            width: 8,
            max_width: 16,
            n_down: 2,
            n_mid: 1,
            mlp_hidden: 8,
        }
    }

    /// 32×32 canvas, width 8.
    pub fn micro32() -> Self {
        ModelConfig {
            img_size: 32,
            width: 8,
            max_width: 64,
            n_down: 4,
            n_mid: 2,
            mlp_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.max_width < self.width || self.mlp_hidden == 0 {
            return err(alloc::format!(
                "invalid widths {}/{}/{}",
                self.width,
                self.max_width,
                self.mlp_hidden
            ));
        }
        if !self.img_size.is_power_of_two() || self.img_size < 8 {
            return err(alloc::format!(
                "img_size must be a power of two >= 8, got {}",
                self.img_size
            ));
        }
        if self.n_down == 0 || self.img_size >> self.n_down == 0 {
            return err(alloc::format!(
                "n_down {} does not fit img_size {}",
                self.n_down,
                self.img_size
            ));
        }
        Ok(())
    }

    fn stage_width(&self, i: usize) -> usize {
        (self.width << i).min(self.max_width)
    }

    /// Residual blocks in the style encoder and discriminator trunks.
    pub fn trunk_blocks(&self) -> usize {
        self.img_size.trailing_zeros() as usize - 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resample {
    Down,
    Up,
    Keep,
}

/// Pre-activation residual block, optionally with AdaIN before each conv.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    resample: Resample,
    norm_widths: Option<[usize; 2]>,
}

impl ResBlock {
    fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        resample: Resample,
        adain: bool,
    ) -> Self {
        // Down-sampling blocks convolve at the input width and widen in conv2;
        // up-sampling blocks narrow in conv1.
        let mid = if resample == Resample::Up { cout } else { cin };
        let conv1 = Conv2d::init(
            store,
            rng,
            &alloc::format!("{name}.conv1"),
            cin,
            mid,
            3,
            1,
            true,
        );
        let conv2 = Conv2d::init(
            store,
            rng,
            &alloc::format!("{name}.conv2"),
            mid,
            cout,
            3,
            1,
            true,
        );
        let shortcut = (cin != cout).then(|| {
            Conv2d::init(
                store,
                rng,
                &alloc::format!("{name}.skip"),
                cin,
                cout,
                1,
                0,
                false,
            )
        });
        ResBlock {
            conv1,
            conv2,
            shortcut,
            resample,
            norm_widths: adain.then_some([cin, mid]),
        }
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        norm: &mut NormSource<'_>,
    ) -> Result<Var> {
        let mut skip = x;
        if self.resample == Resample::Up {
            skip = g.upsample2(skip)?;
        }
        if let Some(sc) = &self.shortcut {
            skip = sc.forward(g, p, skip)?;
        }
        if self.resample == Resample::Down {
            skip = g.avg_pool2(skip)?;
        }

        let mut h = norm.apply(g, x, self.norm_widths.map(|w| w[0]))?;
        h = g.leaky_relu(h, LEAKY);
        if self.resample == Resample::Up {
            h = g.upsample2(h)?;
        }
        h = self.conv1.forward(g, p, h)?;
        if self.resample == Resample::Down {
            h = g.avg_pool2(h)?;
        }
        h = norm.apply(g, h, self.norm_widths.map(|w| w[1]))?;
        h = g.leaky_relu(h, LEAKY);
        h = self.conv2.forward(g, p, h)?;

        let sum = g.add(h, skip)?;
        Ok(g.scale(sum, SKIP_SCALE))
    }
}

/// Supplies the normalisation applied inside each generator block.
enum NormSource<'a> {
    /// Blocks of the style encoder and discriminator are unnormalised.
    None,
    /// AdaIN consuming one `(f, g)` pair per layer, in order.
    Ada {
        layers: &'a [(Var, Var)],
        next: usize,
        eps: f64,
    },
    /// Plain instance normalisation.
    Plain { eps: f64 },
}

impl NormSource<'_> {
    fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: Var, width: Option<usize>) -> Result<Var> {
        let Some(width) = width else { return Ok(x) };
        match self {
            NormSource::None => Ok(x),
            NormSource::Plain { eps } => g.instance_norm(x, *eps),
            NormSource::Ada { layers, next, eps } => {
                let &(f, s) = layers
                    .get(*next)
                    .ok_or_else(|| Error::Config("too few AdaIN code layers".into()))?;
                *next += 1;
                if g.value(f).len() != width || g.value(s).len() != width {
                    return Err(Error::Config(alloc::format!(
                        "AdaIN layer {} expects width {width}, code has {}/{}",
                        *next - 1,
                        g.value(f).len(),
                        g.value(s).len()
                    )));
                }
                let n = g.instance_norm(x, *eps)?;
                g.channel_affine(n, f, s)
            }
        }
    }
}

/// Graph handles of an AdaIN code, one `(f, g)` pair per layer.
#[derive(Clone, Debug)]
pub struct CodeVars {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
}

impl CodeVars {
    pub fn materialize<T: Real>(&self, g: &Graph<T>) -> AdaINCodePair<T> {
        let side = |l: &[(Var, Var)]| {
            l.iter()
                .map(|&(f, s)| (g.value(f).clone(), g.value(s).clone()))
                .collect()
        };
        AdaINCodePair {
            encoder_layers: side(&self.encoder),
            decoder_layers: side(&self.decoder),
        }
    }
}

/// `f · (x − μ) / sqrt(σ² + eps) + g` per channel of a `C×H×W` map.
pub fn adain_forward<T: Real>(
    x: &Tensor<T>,
    f: &Tensor<T>,
    g: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if !(eps > 0.0) {
        return Err(Error::Precondition("eps must be > 0".into()));
    }
    let mut graph = Graph::new();
    let xv = graph.input(x.clone());
    let fv = graph.input(f.clone());
    let gv = graph.input(g.clone());
    let n = graph.instance_norm(xv, eps)?;
    let out = graph.channel_affine(n, fv, gv)?;
    Ok(graph.value(out).clone())
}

/// Instance norm with learned affine, leaky ReLU, 1×1 conv.
#[derive(Clone, Debug)]
struct OutHead {
    gamma: usize,
    beta: usize,
    conv: Conv2d,
}

impl OutHead {
    fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let gamma = store.push(alloc::format!("{name}.norm.weight"), Tensor::ones(&[cin]));
        let beta = store.push(alloc::format!("{name}.norm.bias"), Tensor::zeros(&[cin]));
        let conv = Conv2d::init(
            store,
            rng,
            &alloc::format!("{name}.conv"),
            cin,
            cout,
            1,
            0,
            true,
        );
        OutHead { gamma, beta, conv }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        let n = g.instance_norm(x, eps)?;
        let h = g.channel_affine(n, p.var(self.gamma), p.var(self.beta))?;
        let h = g.leaky_relu(h, LEAKY);
        self.conv.forward(g, p, h)
    }
}

/// Encoder-decoder generator whose task is selected by its AdaIN codes.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub params: ParamStore<T>,
    in_conv: Conv2d,
    encoder: Vec<ResBlock>,
    decoder: Vec<ResBlock>,
    image_head: OutHead,
    mask_head: OutHead,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut s = ParamStore::new(STORE_GENERATOR);
        let in_conv = Conv2d::init(&mut s, rng, "in", 1, cfg.width, 1, 0, true);
        let mut encoder = Vec::new();
        for i in 0..cfg.n_down {
            let (cin, cout) = (cfg.stage_width(i), cfg.stage_width(i + 1));
            encoder.push(ResBlock::init(
                &mut s,
                rng,
                &alloc::format!("enc{i}"),
                cin,
                cout,
                Resample::Down,
                true,
            ));
        }
        let bottleneck = cfg.stage_width(cfg.n_down);
        for i in 0..cfg.n_mid {
            let name = alloc::format!("enc_mid{i}");
            encoder.push(ResBlock::init(
                &mut s,
                rng,
                &name,
                bottleneck,
                bottleneck,
                Resample::Keep,
                true,
            ));
        }
        let mut decoder = Vec::new();
        for i in 0..cfg.n_mid {
            let name = alloc::format!("dec_mid{i}");
            decoder.push(ResBlock::init(
                &mut s,
                rng,
                &name,
                bottleneck,
                bottleneck,
                Resample::Keep,
                true,
            ));
        }
        for i in (0..cfg.n_down).rev() {
            let (cin, cout) = (cfg.stage_width(i + 1), cfg.stage_width(i));
            decoder.push(ResBlock::init(
                &mut s,
                rng,
                &alloc::format!("dec{i}"),
                cin,
                cout,
                Resample::Up,
                true,
            ));
        }
        let image_head = OutHead::init(&mut s, rng, "head_image", cfg.width, 1);
        let mask_head = OutHead::init(&mut s, rng, "head_mask", cfg.width, 2);
        Generator {
            params: s,
            in_conv,
            encoder,
            decoder,
            image_head,
            mask_head,
        }
    }

    /// Channel width of every encoder AdaIN layer, in order.
    pub fn encoder_widths(&self) -> Vec<usize> {
        self.encoder
            .iter()
            .flat_map(|b| b.norm_widths.unwrap())
            .collect()
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        self.decoder
            .iter()
            .flat_map(|b| b.norm_widths.unwrap())
            .collect()
    }

    /// Runs the generator. `head = MASK` yields 2-channel logits, image heads a
    /// 1-channel map in `[-1, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        codes: &CodeVars,
        head: Domain,
        eps: f64,
    ) -> Result<Var> {
        let (ne, nd) = (self.encoder_widths().len(), self.decoder_widths().len());
        if codes.encoder.len() != ne || codes.decoder.len() != nd {
            return Err(Error::Config(alloc::format!(
                "generator has {ne}+{nd} AdaIN layers, code has {}+{}",
                codes.encoder.len(),
                codes.decoder.len()
            )));
        }
        let mut enc = NormSource::Ada {
            layers: &codes.encoder,
            next: 0,
            eps,
        };
        let mut dec = NormSource::Ada {
            layers: &codes.decoder,
            next: 0,
            eps,
        };
        self.run(g, p, x, &mut enc, &mut dec, head, eps)
    }

    /// The same network with every AdaIN layer replaced by plain instance normalisation.
    pub fn forward_instance_norm(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        head: Domain,
        eps: f64,
    ) -> Result<Var> {
        self.run(
            g,
            p,
            x,
            &mut NormSource::Plain { eps },
            &mut NormSource::Plain { eps },
            head,
            eps,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        enc: &mut NormSource<'_>,
        dec: &mut NormSource<'_>,
        head: Domain,
        eps: f64,
    ) -> Result<Var> {
        let (c, h, w) = g.value(x).chw()?;
        let factor = 1usize
            << self
                .encoder
                .iter()
                .filter(|b| b.resample == Resample::Down)
                .count();
        if c != 1 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(alloc::format!(
                "generator input must be 1×H×W with H, W multiples of {factor}, got {c}×{h}×{w}"
            )));
        }
        let mut t = self.in_conv.forward(g, p, x)?;
        for b in &self.encoder {
            t = b.forward(g, p, t, enc)?;
        }
        for b in &self.decoder {
            t = b.forward(g, p, t, dec)?;
        }
        match head {
            Domain::Mask => self.mask_head.forward(g, p, t, eps),
            _ => {
                let o = self.image_head.forward(g, p, t, eps)?;
                Ok(g.tanh(o))
            }
        }
    }
}

/// Latent-to-code mapping network with per-domain branches and per-layer
/// affine projections for one side of the generator.
#[derive(Clone, Debug)]
pub struct CodeGenerator<T> {
    pub params: ParamStore<T>,
    trunk: Vec<Linear>,
    branches: Vec<Vec<Linear>>,
    projections: Vec<(Linear, Linear)>,
}

impl<T: Real> CodeGenerator<T> {
    /// `widths` are the AdaIN layer widths of the side this generator feeds.
    pub fn new(id: u16, hidden: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut s = ParamStore::new(id);
        let trunk = (0..4)
            .map(|i| {
                let fan_in = if i == 0 { LATENT_DIM } else { hidden };
                Linear::init(
                    &mut s,
                    rng,
                    &alloc::format!("shared{i}"),
                    fan_in,
                    hidden,
                    2.0,
                    0.0,
                )
            })
            .collect();
        let branches = Domain::ALL
            .iter()
            .map(|d| {
                let mut layers: Vec<Linear> = (0..3)
                    .map(|i| {
                        Linear::init(
                            &mut s,
                            rng,
                            &alloc::format!("{d}.{i}"),
                            hidden,
                            hidden,
                            2.0,
                            0.0,
                        )
                    })
                    .collect();
                layers.push(Linear::init(
                    &mut s,
                    rng,
                    &alloc::format!("{d}.out"),
                    hidden,
                    STYLE_DIM,
                    1.0,
                    0.0,
                ));
                layers
            })
            .collect();
        let projections = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let f = Linear::init(
                    &mut s,
                    rng,
                    &alloc::format!("proj{i}.scale"),
                    STYLE_DIM,
                    c,
                    1.0,
                    1.0,
                );
                let g = Linear::init(
                    &mut s,
                    rng,
                    &alloc::format!("proj{i}.shift"),
                    STYLE_DIM,
                    c,
                    1.0,
                    0.0,
                );
                (f, g)
            })
            .collect();
        CodeGenerator {
            params: s,
            trunk,
            branches,
            projections,
        }
    }

    /// 16-dim code from the branch of `domain`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, z: Var, domain: Domain) -> Result<Var> {
        if g.value(z).len() != LATENT_DIM {
            return Err(Error::Shape(alloc::format!(
                "latent has {} values, expected {LATENT_DIM}",
                g.value(z).len()
            )));
        }
        let mut h = z;
        for l in &self.trunk {
            h = l.forward(g, p, h)?;
            h = g.relu(h);
        }
        let branch = &self.branches[domain.index()];
        for l in &branch[..branch.len() - 1] {
            h = l.forward(g, p, h)?;
            h = g.relu(h);
        }
        branch[branch.len() - 1].forward(g, p, h)
    }

    /// Per-layer `(f, g)` vectors for a 16-dim code.
    pub fn expand(&self, g: &mut Graph<T>, p: &Bound, code: Var) -> Result<Vec<(Var, Var)>> {
        if g.value(code).len() != STYLE_DIM {
            return Err(Error::Shape(alloc::format!(
                "style code has {} values",
                g.value(code).len()
            )));
        }
        self.projections
            .iter()
            .map(|(f, s)| Ok((f.forward(g, p, code)?, s.forward(g, p, code)?)))
            .collect()
    }
}

/// Down-sampling residual trunk ending in a 1×1 feature vector, shared by
/// the style encoder and the discriminator.
#[derive(Clone, Debug)]
struct Trunk {
    blocks: Vec<ResBlock>,
    last: Conv2d,
    width: usize,
}

impl Trunk {
    fn init<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let n = cfg.trunk_blocks();
        let blocks = (0..n)
            .map(|i| {
                let (cin, cout) = (cfg.stage_width(i), cfg.stage_width(i + 1));
                ResBlock::init(
                    store,
                    rng,
                    &alloc::format!("block{i}"),
                    cin,
                    cout,
                    Resample::Down,
                    false,
                )
            })
            .collect();
        let width = cfg.stage_width(n);
        let last = Conv2d::init(store, rng, "last", width, width, 4, 0, true);
        Trunk {
            blocks,
            last,
            width,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, p, h, &mut NormSource::None)?;
        }
        h = g.leaky_relu(h, LEAKY);
        h = self.last.forward(g, p, h)?;
        Ok(g.leaky_relu(h, LEAKY))
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let (_, h, w) = g.value(x).chw()?;
        let expected = 4 << self.blocks.len();
        if h != expected || w != expected {
            return Err(Error::Shape(alloc::format!(
                "expected {expected}×{expected} input, got {h}×{w}"
            )));
        }
        Ok(())
    }
}

/// Maps an image or a mask probability map to per-domain 16-dim codes.
#[derive(Clone, Debug)]
pub struct StyleEncoder<T> {
    pub params: ParamStore<T>,
    in_image: Conv2d,
    in_mask: Conv2d,
    trunk: Trunk,
    heads: Vec<Linear>,
}

impl<T: Real> StyleEncoder<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut s = ParamStore::new(STORE_STYLE);
        let in_image = Conv2d::init(&mut s, rng, "in_image", 1, cfg.width, 1, 0, true);
        let in_mask = Conv2d::init(&mut s, rng, "in_mask", 2, cfg.width, 1, 0, true);
        let trunk = Trunk::init(&mut s, rng, cfg);
        let heads = Domain::ALL
            .iter()
            .map(|d| {
                Linear::init(
                    &mut s,
                    rng,
                    &alloc::format!("head.{d}"),
                    trunk.width,
                    STYLE_DIM,
                    1.0,
                    0.0,
                )
            })
            .collect();
        StyleEncoder {
            params: s,
            in_image,
            in_mask,
            trunk,
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, domain: Domain) -> Result<Var> {
        self.trunk.check_input(g, x)?;
        let input = match g.value(x).chw()?.0 {
            1 => &self.in_image,
            2 => &self.in_mask,
            c => {
                return Err(Error::Shape(alloc::format!(
                    "style encoder takes 1 or 2 channels, got {c}"
                )))
            }
        };
        let h = input.forward(g, p, x)?;
        let h = self.trunk.forward(g, p, h)?;
        let h = g.reshape(h, &[self.trunk.width])?;
        self.heads[domain.index()].forward(g, p, h)
    }
}

/// Shared convolutional trunk with one real/fake logit per domain.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub params: ParamStore<T>,
    in_conv: Conv2d,
    trunk: Trunk,
    heads: Vec<Conv2d>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut s = ParamStore::new(STORE_DISC);
        let in_conv = Conv2d::init(&mut s, rng, "in", 1, cfg.width, 1, 0, true);
        let trunk = Trunk::init(&mut s, rng, cfg);
        let heads = Domain::ALL
            .iter()
            .map(|d| {
                Conv2d::init(
                    &mut s,
                    rng,
                    &alloc::format!("head.{d}"),
                    trunk.width,
                    1,
                    1,
                    0,
                    true,
                )
            })
            .collect();
        Discriminator {
            params: s,
            in_conv,
            trunk,
            heads,
        }
    }

    /// Scalar logit of the `domain` head.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, domain: Domain) -> Result<Var> {
        self.trunk.check_input(g, x)?;
        if g.value(x).chw()?.0 != 1 {
            return Err(Error::Shape("discriminator takes 1-channel images".into()));
        }
        let h = self.in_conv.forward(g, p, x)?;
        let h = self.trunk.forward(g, p, h)?;
        let o = self.heads[domain.index()].forward(g, p, h)?;
        g.reshape(o, &[1])
    }
}

/// Which stores receive gradients when a model is bound to a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Trainable {
    pub generator: bool,
    pub f_enc: bool,
    pub f_dec: bool,
    pub style: bool,
    pub disc: bool,
}

impl Trainable {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Trainable {
            generator: true,
            f_enc: true,
            f_dec: true,
            style: true,
            disc: true,
        }
    }
}

/// Graph handles for every store of a [`Model`].
#[derive(Clone, Debug)]
pub struct ModelBinding {
    pub generator: Bound,
    pub f_enc: Bound,
    pub f_dec: Bound,
    pub style: Bound,
    pub disc: Bound,
}

/// All four trainable modules.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub generator: Generator<T>,
    pub f_enc: CodeGenerator<T>,
    pub f_dec: CodeGenerator<T>,
    pub style: StyleEncoder<T>,
    pub disc: Discriminator<T>,
}

impl<T: Real> Model<T> {
    /// Freshly initialised model; each module draws from its own stream of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let generator = Generator::new(cfg, &mut stream(0));
        let f_enc = CodeGenerator::new(
            STORE_F_ENC,
            cfg.mlp_hidden,
            &generator.encoder_widths(),
            &mut stream(1),
        );
        let f_dec = CodeGenerator::new(
            STORE_F_DEC,
            cfg.mlp_hidden,
            &generator.decoder_widths(),
            &mut stream(2),
        );
        let style = StyleEncoder::new(cfg, &mut stream(3));
        let disc = Discriminator::new(cfg, &mut stream(4));
        Ok(Model {
            config: cfg.clone(),
            generator,
            f_enc,
            f_dec,
            style,
            disc,
        })
    }

    pub fn stores(&self) -> [&ParamStore<T>; 5] {
        [
            &self.generator.params,
            &self.f_enc.params,
            &self.f_dec.params,
            &self.style.params,
            &self.disc.params,
        ]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 5] {
        [
            &mut self.generator.params,
            &mut self.f_enc.params,
            &mut self.f_dec.params,
            &mut self.style.params,
            &mut self.disc.params,
        ]
    }

    pub fn bind(&self, g: &mut Graph<T>, t: Trainable) -> ModelBinding {
        ModelBinding {
            generator: self.generator.params.bind(g, t.generator),
            f_enc: self.f_enc.params.bind(g, t.f_enc),
            f_dec: self.f_dec.params.bind(g, t.f_dec),
            style: self.style.params.bind(g, t.style),
            disc: self.disc.params.bind(g, t.disc),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.stores().iter().all(|s| s.all_finite())
    }

    /// A copy whose store ids are shifted so its gradients cannot alias ours.
    pub fn snapshot(&self, offset: u16) -> Self {
        let mut m = self.clone();
        for s in m.stores_mut() {
            *s = s.with_id(s.id() + offset);
        }
        m
    }

    pub fn fingerprint(&self) -> u64 {
        self.stores()
            .iter()
            .fold(0u64, |h, s| h.rotate_left(7) ^ s.fingerprint())
    }

    /// `(module name, parameter count)` for every module.
    pub fn parameter_counts(&self) -> [(&'static str, usize); 5] {
        let [g, e, d, s, di] = self.stores();
        [
            ("generator", count_parameters(g)),
            ("code_generator_enc", count_parameters(e)),
            ("code_generator_dec", count_parameters(d)),
            ("style_encoder", count_parameters(s)),
            ("discriminator", count_parameters(di)),
        ]
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            generator: Generator {
                params: self.generator.params.cast(),
                in_conv: self.generator.in_conv.clone(),
                encoder: self.generator.encoder.clone(),
                decoder: self.generator.decoder.clone(),
                image_head: self.generator.image_head.clone(),
                mask_head: self.generator.mask_head.clone(),
            },
            f_enc: self.f_enc.cast(),
            f_dec: self.f_dec.cast(),
            style: StyleEncoder {
                params: self.style.params.cast(),
                in_image: self.style.in_image.clone(),
                in_mask: self.style.in_mask.clone(),
                trunk: self.style.trunk.clone(),
                heads: self.style.heads.clone(),
            },
            disc: Discriminator {
                params: self.disc.params.cast(),
                in_conv: self.disc.in_conv.clone(),
                trunk: self.disc.trunk.clone(),
                heads: self.disc.heads.clone(),
            },
        }
    }
}

impl<T: Real> CodeGenerator<T> {
    fn cast<U: Real>(&self) -> CodeGenerator<U> {
        CodeGenerator {
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            branches: self.branches.clone(),
            projections: self.projections.clone(),
        }
    }
}

/// Total number of scalar parameters in a store.
pub fn count_parameters<T: Real>(store: &ParamStore<T>) -> usize {
    store.count()
}

/// Number of domain heads in every multi-head module.
pub const fn num_heads() -> usize {
    NUM_DOMAINS
}

/// Convenience: run a frozen generator on a concrete image and code.
pub fn generate<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    codes: &AdaINCodePair<T>,
    head: Domain,
    eps: f64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = model.generator.params.bind(&mut g, false);
    let x = g.input(image.clone());
    let c = codes.to_vars(&mut g);
    let out = model.generator.forward(&mut g, &p, x, &c, head, eps)?;
    Ok(g.value(out).clone())
}
