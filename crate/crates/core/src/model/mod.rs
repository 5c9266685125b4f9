//! Encoder with a per-depth perturbation hook and two structurally identical
//! decoders (main and auxiliary) that expose a feature tap after every
//! upsampling stage.
//!
//! Encoder stage `d` (1-based) halves the spatial size with a stride-2
//! conv block and refines with a second block. Decoder stage `j` doubles it
//! with nearest-neighbor upsampling followed by one conv block, plus the
//! encoder activation of matching size when skip connections are on; the
//! stage output is tap `j`. A 1x1 head and a channel softmax give per-pixel
//! class probabilities at input resolution.

pub mod layers;

use ndarray::{Array4, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::{inject_array, inject_backward, mix_seed, sample_noise, NoiseTensor};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;
use layers::{
    softmax_channels, softmax_channels_backward, upsample2x, upsample2x_backward, BlockCache, Conv2d, ConvBlock,
    ConvCache, Parameters,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channels after the first encoder stage.
    pub base_width: usize,
    /// Number of downsampling stages (and of decoder upsampling stages).
    pub depth: usize,
    /// Width doubles per stage up to this depth, then stays constant.
    pub width_cap_depth: usize,
    pub classes: usize,
    pub norm_groups: usize,
    /// Add encoder activations to decoder stage outputs of matching size.
    pub skip_connections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 8,
            depth: 5,
            width_cap_depth: 4,
            classes: 2,
            norm_groups: 4,
            skip_connections: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.depth == 0 || self.classes < 2 || self.norm_groups == 0
        {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        if self.width_cap_depth == 0 {
            return Err(Error::Config("width_cap_depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Channel count of the encoder activation at depth `d` (0 is the input).
    pub fn encoder_channels(&self, d: usize) -> usize {
        if d == 0 {
            self.in_channels
        } else {
            self.base_width << (d.min(self.width_cap_depth) - 1)
        }
    }

    /// Channel count of decoder tap `j` (1-based).
    pub fn decoder_channels(&self, j: usize) -> usize {
        if j < self.depth {
            self.encoder_channels(self.depth - j)
        } else {
            self.base_width
        }
    }

    /// Input side lengths must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Parameter partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Shared encoder.
    #[serde(rename = "E")]
    Encoder,
    /// Main decoder.
    #[serde(rename = "D")]
    MainDecoder,
    /// Auxiliary decoder.
    #[serde(rename = "G")]
    AuxDecoder,
}

impl ParamGroup {
    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "E",
            ParamGroup::MainDecoder => "D",
            ParamGroup::AuxDecoder => "G",
        }
    }

    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "E" => Some(ParamGroup::Encoder),
            "D" => Some(ParamGroup::MainDecoder),
            "G" => Some(ParamGroup::AuxDecoder),
            _ => None,
        }
    }
}

/// Activations at depths `0..=D`; depth 0 is the input, depth `D` is `z_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState<T> {
    pub activations: Vec<FeatureMap<T>>,
}

impl<T: Scalar> EncoderState<T> {
    /// State holding only a bottleneck, for decoding without skip connections.
    pub fn bottleneck_only(z_out: FeatureMap<T>) -> Self {
        Self { activations: vec![z_out] }
    }

    pub fn z_out(&self) -> &FeatureMap<T> {
        self.activations.last().expect("at least one activation")
    }

    pub fn at_depth(&self, d: usize) -> Option<&FeatureMap<T>> {
        self.activations.get(d)
    }

    pub fn max_depth(&self) -> usize {
        self.activations.len() - 1
    }

    pub fn detach(self) -> Self {
        Self { activations: self.activations.into_iter().map(FeatureMap::detach).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutputs<T> {
    /// `(batch, classes, H, W)` at input resolution.
    pub probs: Array4<T>,
    /// Stage outputs for `j = 1..=J`, spatial size doubling each stage.
    pub taps: Vec<FeatureMap<T>>,
}

impl<T: Scalar> DecoderOutputs<T> {
    pub fn detach(self) -> Self {
        Self { probs: self.probs, taps: self.taps.into_iter().map(FeatureMap::detach).collect() }
    }
}

/// Where and how strongly to perturb the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub depth: usize,
    pub noise_bound: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage<T> {
    pub down: ConvBlock<T>,
    pub refine: ConvBlock<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub stages: Vec<EncoderStage<T>>,
}

pub struct EncoderTrace<T> {
    stages: Vec<(BlockCache<T>, BlockCache<T>)>,
    noise: Option<(usize, NoiseTensor<T, ndarray::Ix4>)>,
}

impl<T: Scalar> Encoder<T> {
    fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (1..=config.depth)
            .map(|d| {
                let (cin, cout) = (config.encoder_channels(d - 1), config.encoder_channels(d));
                EncoderStage {
                    down: ConvBlock::init(&mut rng, cin, cout, 2, config.norm_groups),
                    refine: ConvBlock::init(&mut rng, cout, cout, 1, config.norm_groups),
                }
            })
            .collect();
        Self { stages }
    }

    fn zeros_like(&self) -> Self {
        Self {
            stages: self
                .stages
                .iter()
                .map(|s| EncoderStage { down: s.down.zeros_like(), refine: s.refine.zeros_like() })
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// Runs all stages, perturbing the output of stage `injection.depth` when given.
    pub fn forward(
        &self,
        x: &Array4<T>,
        injection: Option<Injection>,
        keep_cache: bool,
    ) -> Result<(EncoderState<T>, Option<EncoderTrace<T>>)> {
        if let Some(inj) = injection {
            if inj.depth == 0 || inj.depth > self.depth() {
                return Err(Error::DepthOutOfRange { depth: inj.depth, max: self.depth() });
            }
        }
        let mut acts = Vec::with_capacity(self.depth() + 1);
        acts.push(x.clone());
        let mut caches = Vec::with_capacity(if keep_cache { self.depth() } else { 0 });
        let mut noise = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let d = i + 1;
            let (a, c1) = stage.down.forward(&acts[i], keep_cache)?;
            let (mut b, c2) = stage.refine.forward(&a, keep_cache)?;
            if let Some(inj) = injection.filter(|inj| inj.depth == d) {
                let n = sample_noise::<T, _>(b.raw_dim(), inj.noise_bound, inj.seed)?;
                b = inject_array(&b, &n)?;
                noise = Some((d, n));
            }
            if let (Some(c1), Some(c2)) = (c1, c2) {
                caches.push((c1, c2));
            }
            acts.push(b);
        }
        let state = EncoderState {
            activations: acts
                .into_iter()
                .enumerate()
                .map(|(d, a)| if d == 0 || !keep_cache { FeatureMap::constant(a) } else { FeatureMap::new(a) })
                .collect(),
        };
        Ok((state, keep_cache.then_some(EncoderTrace { stages: caches, noise })))
    }

    /// Accumulates parameter gradients given gradients at each depth's
    /// activation (`grads_at[d]`, with `grads_at[D]` the gradient of `z_out`).
    pub fn backward(&self, trace: &EncoderTrace<T>, mut grads_at: Vec<Option<Array4<T>>>, grad: &mut Encoder<T>) {
        let depth = self.depth();
        assert_eq!(grads_at.len(), depth + 1, "one gradient slot per depth");
        let mut g: Option<Array4<T>> = grads_at[depth].take();
        for d in (1..=depth).rev() {
            if d < depth {
                g = add_opt(g, grads_at[d].take());
            }
            let Some(mut gd) = g.take() else { continue };
            if let Some((nd, noise)) = &trace.noise {
                if *nd == d {
                    gd = inject_backward(&gd, noise);
                }
            }
            let stage = &self.stages[d - 1];
            let (c1, c2) = &trace.stages[d - 1];
            let gs = &mut grad.stages[d - 1];
            let ga = stage.refine.backward(c2, &gd, &mut gs.refine, true).expect("input grad requested");
            g = stage.down.backward(c1, &ga, &mut gs.down, d > 1);
        }
    }
}

fn add_opt<T: Scalar>(a: Option<Array4<T>>, b: Option<Array4<T>>) -> Option<Array4<T>> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            a += &b;
            Some(a)
        }
        (a, None) => a,
        (None, b) => b,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub stages: Vec<ConvBlock<T>>,
    pub head: Conv2d<T>,
}

pub struct DecoderTrace<T> {
    blocks: Vec<BlockCache<T>>,
    head: ConvCache<T>,
    probs: Array4<T>,
}

impl<T: Scalar> Decoder<T> {
    fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (1..=config.depth)
            .map(|j| {
                let cin = if j == 1 { config.encoder_channels(config.depth) } else { config.decoder_channels(j - 1) };
                ConvBlock::init(&mut rng, cin, config.decoder_channels(j), 1, config.norm_groups)
            })
            .collect();
        let head = Conv2d::init(&mut rng, config.decoder_channels(config.depth), config.classes, 1, 1, 0);
        Self { stages, head }
    }

    fn zeros_like(&self) -> Self {
        Self { stages: self.stages.iter().map(ConvBlock::zeros_like).collect(), head: self.head.zeros_like() }
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn forward(
        &self,
        state: &EncoderState<T>,
        skip_connections: bool,
        keep_cache: bool,
    ) -> Result<(DecoderOutputs<T>, Option<DecoderTrace<T>>)> {
        let z = state.z_out();
        let expected_c = self.stages[0].conv.in_channels();
        if z.channels() != expected_c {
            return Err(Error::shape(&[z.batch(), expected_c, z.height(), z.width()], z.as_array().shape()));
        }
        let depth = self.depth();
        if skip_connections && state.max_depth() != depth {
            return Err(Error::InvalidShape(format!(
                "skip connections need {} encoder activations, got {}",
                depth + 1,
                state.activations.len()
            )));
        }
        let mut h = z.as_array().clone();
        let mut taps = Vec::with_capacity(depth);
        let mut blocks = Vec::with_capacity(if keep_cache { depth } else { 0 });
        for (idx, block) in self.stages.iter().enumerate() {
            let j = idx + 1;
            let (mut y, cache) = block.forward(&upsample2x(&h), keep_cache)?;
            if skip_connections && j < depth {
                let skip = state.activations[depth - j].as_array();
                if skip.dim() != y.dim() {
                    return Err(Error::shape(y.shape(), skip.shape()));
                }
                y += skip;
            }
            if let Some(c) = cache {
                blocks.push(c);
            }
            taps.push(FeatureMap::new(y.clone()));
            h = y;
        }
        let (logits, head) = self.head.forward(&h, keep_cache)?;
        let probs = softmax_channels(&logits);
        let trace = head.map(|head| DecoderTrace { blocks, head, probs: probs.clone() });
        Ok((DecoderOutputs { probs, taps }, trace))
    }

    /// Returns the gradient for every encoder depth (`None` where no
    /// gradient arrives); the last slot is the gradient of `z_out`.
    pub fn backward(
        &self,
        trace: &DecoderTrace<T>,
        d_probs: Option<&Array4<T>>,
        d_taps: &[Option<Array4<T>>],
        skip_connections: bool,
        grad: &mut Decoder<T>,
    ) -> Vec<Option<Array4<T>>> {
        let depth = self.depth();
        let mut out: Vec<Option<Array4<T>>> = vec![None; depth + 1];
        let mut g = d_probs.map(|dp| {
            let dl = softmax_channels_backward(&trace.probs, dp);
            self.head.backward(&trace.head, &dl, &mut grad.head, true).expect("input grad requested")
        });
        for j in (1..=depth).rev() {
            g = add_opt(g, d_taps.get(j - 1).cloned().flatten());
            let Some(gj) = g.take() else { continue };
            if skip_connections && j < depth {
                out[depth - j] = Some(gj.clone());
            }
            let gu = self.stages[j - 1]
                .backward(&trace.blocks[j - 1], &gj, &mut grad.stages[j - 1], true)
                .expect("input grad requested");
            g = Some(upsample2x_backward(&gu));
        }
        out[depth] = g;
        out
    }
}

impl<T: Scalar> Parameters<T> for Encoder<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.down.params(&format!("{prefix}.stage{}.down", i + 1), out);
            s.refine.params(&format!("{prefix}.stage{}.refine", i + 1), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.down.params_mut(&format!("{prefix}.stage{}.down", i + 1), out);
            s.refine.params_mut(&format!("{prefix}.stage{}.refine", i + 1), out);
        }
    }
}

impl<T: Scalar> Parameters<T> for Decoder<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.params(&format!("{prefix}.stage{}", i + 1), out);
        }
        self.head.params(&format!("{prefix}.head"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.params_mut(&format!("{prefix}.stage{}", i + 1), out);
        }
        self.head.params_mut(&format!("{prefix}.head"), out);
    }
}

/// Shared encoder `E`, main decoder `D`, auxiliary decoder `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub main: Decoder<T>,
    pub aux: Decoder<T>,
}

impl<T: Scalar> SegModel<T> {
    /// Independent initialization of the three groups from one seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        for d in 1..=config.depth {
            let c = config.encoder_channels(d);
            if !c.is_multiple_of(layers::gcd(config.norm_groups, c)) {
                return Err(Error::Config(format!("norm groups incompatible with {c} channels")));
            }
        }
        Ok(Self {
            encoder: Encoder::init(&config, mix_seed(seed, 1)),
            main: Decoder::init(&config, mix_seed(seed, 2)),
            aux: Decoder::init(&config, mix_seed(seed, 3)),
            config,
        })
    }

    /// Same-structure model with every parameter zero (gradient buffers,
    /// optimizer state).
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            main: self.main.zeros_like(),
            aux: self.aux.zeros_like(),
        }
    }

    pub fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let m = self.config.size_multiple();
        if c != self.config.in_channels || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::InvalidShape(format!(
                "input {:?} needs {} channels and sides divisible by {m}",
                x.shape(),
                self.config.in_channels
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Array4<T>) -> Result<EncoderState<T>> {
        self.check_input(x)?;
        Ok(self.encoder.forward(x, None, false)?.0)
    }

    /// Encodes with `z~ = z * n + z` applied to the depth-`depth` activation.
    pub fn encode_with_injection(
        &self,
        x: &Array4<T>,
        depth: usize,
        noise_bound: f64,
        seed: u64,
    ) -> Result<EncoderState<T>> {
        self.check_input(x)?;
        let inj = Injection { depth, noise_bound, seed };
        Ok(self.encoder.forward(x, Some(inj), false)?.0)
    }

    pub fn decode_main(&self, state: &EncoderState<T>) -> Result<DecoderOutputs<T>> {
        Ok(self.main.forward(state, self.config.skip_connections, false)?.0)
    }

    pub fn decode_aux(&self, state: &EncoderState<T>) -> Result<DecoderOutputs<T>> {
        Ok(self.aux.forward(state, self.config.skip_connections, false)?.0)
    }

    /// Main-branch class probabilities, the test-time prediction.
    pub fn predict(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let state = self.encode(x)?;
        Ok(self.decode_main(&state)?.probs)
    }

    pub fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.encoder.params(ParamGroup::Encoder.prefix(), &mut out);
        self.main.params(ParamGroup::MainDecoder.prefix(), &mut out);
        self.aux.params(ParamGroup::AuxDecoder.prefix(), &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        self.encoder.params_mut(ParamGroup::Encoder.prefix(), &mut out);
        self.main.params_mut(ParamGroup::MainDecoder.prefix(), &mut out);
        self.aux.params_mut(ParamGroup::AuxDecoder.prefix(), &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Copies `D` into `G`.
    pub fn copy_main_into_aux(&mut self) {
        self.aux = self.main.clone();
    }
}
