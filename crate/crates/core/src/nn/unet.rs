//! A compact U-Net: `depth` down levels of two 3×3 conv/BN/ReLU layers, a bottleneck, mirrored
//! up levels joined by skip connections, and a 1×1 head producing `out_channels` logits.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, BnCache};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_MOMENTUM: f64 = 0.1;
pub const UPSAMPLING: &str = "transposed_conv_2x2";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Side length of the square inputs the model is built for.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { depth: 4, base_channels: 16, in_channels: 1, out_channels: 4, image_size: 64, seed: 0 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("U-Net depth must be at least 1".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.out_channels < 2 {
            return Err(Error::Config("out_channels must be at least 2".into()));
        }
        let stride = 1usize.checked_shl(self.depth as u32).unwrap_or(0);
        if stride == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "image side {} is not divisible by 2^{} = {}",
                self.image_size, self.depth, stride
            )));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParamEntry {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// All learnable weights in one flat vector, plus the batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    pub values: Vec<T>,
    pub running: Vec<T>,
    pub entries: Vec<ParamEntry>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(&self.running).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: Range<usize>,
    b: Range<usize>,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone)]
struct Bn {
    gamma: Range<usize>,
    beta: Range<usize>,
    mean: Range<usize>,
    var: Range<usize>,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
}

#[derive(Debug, Clone)]
struct Layout {
    encoders: Vec<Block>,
    bottleneck: Block,
    ups: Vec<Conv>,
    decoders: Vec<Block>,
    head: Conv,
}

struct Builder {
    entries: Vec<ParamEntry>,
    next: usize,
    running: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, len: usize) -> Range<usize> {
        let r = self.next..self.next + len;
        self.entries.push(ParamEntry { name, offset: self.next, len });
        self.next += len;
        r
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let w = self.alloc(format!("{name}.weight"), cout * cin * k * k);
        let b = self.alloc(format!("{name}.bias"), cout);
        Conv { w, b, cout, k }
    }

    fn upconv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let w = self.alloc(format!("{name}.weight"), cin * cout * 4);
        let b = self.alloc(format!("{name}.bias"), cout);
        Conv { w, b, cout, k: 2 }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.alloc(format!("{name}.gamma"), c);
        let beta = self.alloc(format!("{name}.beta"), c);
        let mean = self.running..self.running + c;
        let var = self.running + c..self.running + 2 * c;
        self.running += 2 * c;
        Bn { gamma, beta, mean, var }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            bn1: self.bn(&format!("{name}.bn1"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            bn2: self.bn(&format!("{name}.bn2"), cout),
        }
    }
}

fn build_layout(cfg: &UNetConfig) -> (Layout, Vec<ParamEntry>, usize, usize) {
    let mut b = Builder { entries: Vec::new(), next: 0, running: 0 };
    let mut encoders = Vec::new();
    let mut cin = cfg.in_channels;
    for level in 0..cfg.depth {
        let c = cfg.channels_at(level);
        encoders.push(b.block(&format!("enc{level}"), cin, c));
        cin = c;
    }
    let bottleneck = b.block("bottleneck", cin, cfg.channels_at(cfg.depth));
    let mut ups = Vec::new();
    let mut decoders = Vec::new();
    for level in (0..cfg.depth).rev() {
        let c = cfg.channels_at(level);
        ups.push(b.upconv(&format!("up{level}"), 2 * c, c));
        decoders.push(b.block(&format!("dec{level}"), 2 * c, c));
    }
    let head = b.conv("head", cfg.base_channels, cfg.out_channels, 1);
    let (n, r) = (b.next, b.running);
    (Layout { encoders, bottleneck, ups, decoders, head }, b.entries, n, r)
}

/// Deterministically initialise parameters: He-normal conv weights, zero biases, unit BN scales.
pub fn init_model<T: Scalar>(cfg: &UNetConfig) -> Result<ModelParameters<T>> {
    cfg.validate()?;
    let (_, entries, n, r) = build_layout(cfg);
    let mut values = vec![T::zero(); n];
    let mut running = vec![T::zero(); r];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for e in &entries {
        let slot = &mut values[e.range()];
        if e.name.ends_with(".weight") {
            let cout = entries
                .iter()
                .find(|b| b.name == e.name.replace(".weight", ".bias"))
                .map_or(1, |b| b.len);
            // a transposed 2x2/stride-2 conv feeds each output pixel from cin inputs
            let fan_in = if e.name.starts_with("up") { e.len / (cout * 4) } else { e.len / cout };
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in slot.iter_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        } else if e.name.ends_with(".gamma") {
            slot.fill(T::one());
        }
    }
    let (layout, _, _, _) = build_layout(cfg);
    for blk in layout.encoders.iter().chain(std::iter::once(&layout.bottleneck)).chain(&layout.decoders) {
        for bn in [&blk.bn1, &blk.bn2] {
            running[bn.var.clone()].fill(T::one());
        }
    }
    Ok(ModelParameters { values, running, entries })
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Tensor<T>,
    bn1: BnCache<T>,
    a1: Tensor<T>,
    bn2: BnCache<T>,
    a2: Tensor<T>,
}

/// Activations kept by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    encoders: Vec<BlockCache<T>>,
    pool_args: Vec<Vec<u8>>,
    bottleneck: BlockCache<T>,
    up_inputs: Vec<Tensor<T>>,
    decoders: Vec<BlockCache<T>>,
    head_input: Tensor<T>,
}

impl<T> ForwardCache<T> {
    fn blocks(&self) -> impl Iterator<Item = &BlockCache<T>> {
        self.encoders.iter().chain(std::iter::once(&self.bottleneck)).chain(&self.decoders)
    }
}

/// Network architecture plus its parameters.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: UNetConfig,
    layout: Layout,
    pub params: ModelParameters<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        let params = init_model(&cfg)?;
        Self::with_parameters(cfg, params)
    }

    pub fn with_parameters(cfg: UNetConfig, params: ModelParameters<T>) -> Result<Self> {
        cfg.validate()?;
        let (layout, entries, n, r) = build_layout(&cfg);
        if params.values.len() != n || params.running.len() != r || params.entries != entries {
            return Err(Error::Shape("parameters do not match the U-Net configuration".into()));
        }
        Ok(Self { config: cfg, layout, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = x.shape();
        let stride = 1usize << self.config.depth;
        if n == 0 || c != self.config.in_channels || h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {:?} incompatible with {} input channels and depth {}",
                x.shape(),
                self.config.in_channels,
                self.config.depth
            )));
        }
        Ok(())
    }

    fn block_eval(&self, blk: &Block, x: &Tensor<T>) -> Tensor<T> {
        let p = &self.params.values;
        let r = &self.params.running;
        let h = layers::conv_forward(x, &p[blk.conv1.w.clone()], &p[blk.conv1.b.clone()], blk.conv1.cout, 3);
        let (mut h, _) =
            layers::bn_forward(&h, &p[blk.bn1.gamma.clone()], &p[blk.bn1.beta.clone()], Some((&r[blk.bn1.mean.clone()], &r[blk.bn1.var.clone()])));
        layers::relu_forward(&mut h);
        let h = layers::conv_forward(&h, &p[blk.conv2.w.clone()], &p[blk.conv2.b.clone()], blk.conv2.cout, 3);
        let (mut h, _) =
            layers::bn_forward(&h, &p[blk.bn2.gamma.clone()], &p[blk.bn2.beta.clone()], Some((&r[blk.bn2.mean.clone()], &r[blk.bn2.var.clone()])));
        layers::relu_forward(&mut h);
        h
    }

    fn block_train(&self, blk: &Block, x: Tensor<T>) -> BlockCache<T> {
        let p = &self.params.values;
        let h = layers::conv_forward(&x, &p[blk.conv1.w.clone()], &p[blk.conv1.b.clone()], blk.conv1.cout, 3);
        let (mut a1, bn1) = layers::bn_forward(&h, &p[blk.bn1.gamma.clone()], &p[blk.bn1.beta.clone()], None);
        layers::relu_forward(&mut a1);
        let h = layers::conv_forward(&a1, &p[blk.conv2.w.clone()], &p[blk.conv2.b.clone()], blk.conv2.cout, 3);
        let (mut a2, bn2) = layers::bn_forward(&h, &p[blk.bn2.gamma.clone()], &p[blk.bn2.beta.clone()], None);
        layers::relu_forward(&mut a2);
        BlockCache { input: x, bn1: bn1.unwrap(), a1, bn2: bn2.unwrap(), a2 }
    }

    fn block_backward(&self, blk: &Block, cache: &BlockCache<T>, mut dy: Tensor<T>, grad: &mut [T], need_dx: bool) -> Option<Tensor<T>> {
        let p = &self.params.values;
        layers::relu_backward(&mut dy, &cache.a2);
        let dh = {
            let (dg, db) = split_pair(grad, &blk.bn2.gamma, &blk.bn2.beta);
            layers::bn_backward(&dy, &cache.bn2, &p[blk.bn2.gamma.clone()], dg, db)
        };
        let mut da1 = {
            let (dw, db) = split_pair(grad, &blk.conv2.w, &blk.conv2.b);
            layers::conv_backward(&dh, &cache.a1, &p[blk.conv2.w.clone()], 3, dw, db, true).unwrap()
        };
        layers::relu_backward(&mut da1, &cache.a1);
        let dh = {
            let (dg, db) = split_pair(grad, &blk.bn1.gamma, &blk.bn1.beta);
            layers::bn_backward(&da1, &cache.bn1, &p[blk.bn1.gamma.clone()], dg, db)
        };
        let (dw, db) = split_pair(grad, &blk.conv1.w, &blk.conv1.b);
        layers::conv_backward(&dh, &cache.input, &p[blk.conv1.w.clone()], 3, dw, db, need_dx)
    }

    /// Evaluation-mode forward pass (running batch-norm statistics).
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images)?;
        let p = &self.params.values;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = images.clone();
        for blk in &self.layout.encoders {
            let a = self.block_eval(blk, &x);
            x = layers::maxpool_forward(&a).0;
            skips.push(a);
        }
        x = self.block_eval(&self.layout.bottleneck, &x);
        for (up, blk) in self.layout.ups.iter().zip(&self.layout.decoders) {
            let u = layers::upconv_forward(&x, &p[up.w.clone()], &p[up.b.clone()], up.cout);
            let skip = skips.pop().expect("one skip per level");
            x = self.block_eval(blk, &layers::concat(&skip, &u));
        }
        let h = &self.layout.head;
        Ok(layers::conv_forward(&x, &p[h.w.clone()], &p[h.b.clone()], h.cout, h.k))
    }

    /// Training-mode forward pass (batch statistics), keeping what [`Self::backward`] needs.
    pub fn forward_train(&self, images: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(images)?;
        let p = &self.params.values;
        let mut encoders = Vec::new();
        let mut pool_args = Vec::new();
        let mut x = images.clone();
        for blk in &self.layout.encoders {
            let c = self.block_train(blk, x);
            let (pooled, arg) = layers::maxpool_forward(&c.a2);
            x = pooled;
            pool_args.push(arg);
            encoders.push(c);
        }
        let bottleneck = self.block_train(&self.layout.bottleneck, x);
        let mut x = bottleneck.a2.clone();
        let mut up_inputs = Vec::new();
        let mut decoders = Vec::new();
        for (i, (up, blk)) in self.layout.ups.iter().zip(&self.layout.decoders).enumerate() {
            let u = layers::upconv_forward(&x, &p[up.w.clone()], &p[up.b.clone()], up.cout);
            up_inputs.push(x);
            let skip = &encoders[self.config.depth - 1 - i].a2;
            let c = self.block_train(blk, layers::concat(skip, &u));
            x = c.a2.clone();
            decoders.push(c);
        }
        let h = &self.layout.head;
        let logits = layers::conv_forward(&x, &p[h.w.clone()], &p[h.b.clone()], h.cout, h.k);
        Ok((logits, ForwardCache { encoders, pool_args, bottleneck, up_inputs, decoders, head_input: x }))
    }

    /// Parameter gradient of a scalar objective given its gradient w.r.t. the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Vec<T> {
        let p = &self.params.values;
        let mut grad = vec![T::zero(); p.len()];
        let h = &self.layout.head;
        let mut dx = {
            let (dw, db) = split_pair(&mut grad, &h.w, &h.b);
            layers::conv_backward(dlogits, &cache.head_input, &p[h.w.clone()], 1, dw, db, true).unwrap()
        };
        let depth = self.config.depth;
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; depth];
        for (i, (up, blk)) in self.layout.ups.iter().zip(&self.layout.decoders).enumerate().rev() {
            let dcat = self.block_backward(blk, &cache.decoders[i], dx, &mut grad, true).unwrap();
            let level = depth - 1 - i;
            let (dskip, du) = layers::split(&dcat, self.config.channels_at(level));
            dskips[level] = Some(dskip);
            let (dw, db) = split_pair(&mut grad, &up.w, &up.b);
            dx = layers::upconv_backward(&du, &cache.up_inputs[i], &p[up.w.clone()], dw, db);
        }
        dx = self.block_backward(&self.layout.bottleneck, &cache.bottleneck, dx, &mut grad, true).unwrap();
        for level in (0..depth).rev() {
            let c = &cache.encoders[level];
            let mut da = layers::maxpool_backward(&dx, &cache.pool_args[level], c.a2.shape());
            layers::add_assign(&mut da, dskips[level].as_ref().expect("decoder filled every skip"));
            match self.block_backward(&self.layout.encoders[level], c, da, &mut grad, level > 0) {
                Some(d) => dx = d,
                None => break,
            }
        }
        grad
    }

    /// Fold the batch statistics of a training pass into the running statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let mom = T::from_f64_lossy(BN_MOMENTUM);
        let blocks: Vec<&Block> =
            self.layout.encoders.iter().chain(std::iter::once(&self.layout.bottleneck)).chain(&self.layout.decoders).collect();
        for (blk, bc) in blocks.into_iter().zip(cache.blocks()) {
            for (bn, stats, shape) in [(&blk.bn1, &bc.bn1, bc.a1.shape()), (&blk.bn2, &bc.bn2, bc.a2.shape())] {
                let m = shape[0] * shape[2] * shape[3];
                let unbias = if m > 1 { T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap() } else { T::one() };
                let r = &mut self.params.running;
                for (dst, &v) in r[bn.mean.clone()].iter_mut().zip(&stats.mean) {
                    *dst = (T::one() - mom) * *dst + mom * v;
                }
                for (dst, &v) in r[bn.var.clone()].iter_mut().zip(&stats.var) {
                    *dst = (T::one() - mom) * *dst + mom * v * unbias;
                }
            }
        }
    }
}

fn split_pair<'a, T>(grad: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(a.end, b.start, "weight and bias slots are adjacent");
    let (left, right) = grad[a.start..b.end].split_at_mut(a.len());
    (left, right)
}
