//! LeNet-scale convolutional classifier (f32) and its uncertainty variants:
//! two valid 5×5 convolutions with ReLU and 2×2 max pooling, then a dense
//! softmax head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::svi::{sigmoid, softplus};
use super::{ModelError, Result};
use crate::datasets::{Image, ImageDataset};
use crate::numerics::Matrix;
use crate::seed::derive_seed;

const C1W: usize = 0;
const C1B: usize = 1;
const C2W: usize = 2;
const C2B: usize = 3;
const HW: usize = 4;
const HB: usize = 5;
const TENSORS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierVariant {
    Vanilla,
    Dropout,
    #[serde(rename = "ll_dropout")]
    LastLayerDropout,
    Svi,
    #[serde(rename = "ll_svi")]
    LastLayerSvi,
    Ensemble,
}

impl ClassifierVariant {
    pub const ALL: [ClassifierVariant; 6] = [
        Self::Vanilla,
        Self::Dropout,
        Self::LastLayerDropout,
        Self::Svi,
        Self::LastLayerSvi,
        Self::Ensemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Dropout => "dropout",
            Self::LastLayerDropout => "ll_dropout",
            Self::Svi => "svi",
            Self::LastLayerSvi => "ll_svi",
            Self::Ensemble => "ensemble",
        }
    }
}

impl std::str::FromStr for ClassifierVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown classifier variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub variant: ClassifierVariant,
    pub conv_channels: (usize, usize),
    pub kernel: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Dropout rate for the dropout variants.
    pub dropout: f64,
    /// Stochastic passes averaged at prediction (dropout and SVI variants).
    pub mc_passes: usize,
    pub ensemble_size: usize,
    pub prior_sigma: f64,
    pub kl_weight: f64,
    /// Initial pre-softplus posterior scale of the variational layers.
    pub init_rho: f64,
    /// Start the dense head at zero (uniform predictions before training).
    pub zero_init_head: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            variant: ClassifierVariant::Vanilla,
            conv_channels: (8, 16),
            kernel: 5,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 5,
            weight_decay: 0.0,
            dropout: 0.1,
            mc_passes: 30,
            ensemble_size: 5,
            prior_sigma: 1.0,
            kl_weight: 1.0,
            init_rho: -3.0,
            zero_init_head: false,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.conv_channels.0 > 0
            && self.conv_channels.1 > 0
            && self.kernel > 0
            && self.learning_rate > 0.0
            && self.batch_size > 0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.dropout)
            && self.mc_passes > 0
            && self.ensemble_size > 0
            && self.prior_sigma > 0.0
            && self.kl_weight >= 0.0;
        if !ok {
            return Err(ModelError::InvalidConfig(format!("invalid classifier config {self:?}")));
        }
        if matches!(self.variant, ClassifierVariant::Dropout | ClassifierVariant::LastLayerDropout) && self.dropout == 0.0 {
            return Err(ModelError::NoDropout);
        }
        Ok(())
    }
}

/// Layer sizes derived from the input shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(shape: (usize, usize, usize), conv: (usize, usize), kernel: usize, classes: usize) -> Result<Self> {
        let arch = Self {
            channels: shape.0,
            height: shape.1,
            width: shape.2,
            conv1: conv.0,
            conv2: conv.1,
            kernel,
            classes,
        };
        let (h, w) = arch.pool2();
        if shape.0 == 0 || classes < 2 || h == 0 || w == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input {shape:?} too small for two {kernel}x{kernel} convolutions with pooling, or fewer than 2 classes"
            )));
        }
        Ok(arch)
    }

    fn conv1_out(&self) -> (usize, usize) {
        (
            (self.height + 1).saturating_sub(self.kernel),
            (self.width + 1).saturating_sub(self.kernel),
        )
    }

    fn pool1(&self) -> (usize, usize) {
        let (h, w) = self.conv1_out();
        (h / 2, w / 2)
    }

    fn conv2_out(&self) -> (usize, usize) {
        let (h, w) = self.pool1();
        ((h + 1).saturating_sub(self.kernel), (w + 1).saturating_sub(self.kernel))
    }

    fn pool2(&self) -> (usize, usize) {
        let (h, w) = self.conv2_out();
        (h / 2, w / 2)
    }

    pub fn features(&self) -> usize {
        let (h, w) = self.pool2();
        self.conv2 * h * w
    }

    pub fn tensor_lengths(&self) -> [usize; TENSORS] {
        let k2 = self.kernel * self.kernel;
        [
            self.conv1 * self.channels * k2,
            self.conv1,
            self.conv2 * self.conv1 * k2,
            self.conv2,
            self.classes * self.features(),
            self.classes,
        ]
    }

    fn fan_ins(&self) -> [usize; TENSORS] {
        let k2 = self.kernel * self.kernel;
        let f = self.features();
        [self.channels * k2, 1, self.conv1 * k2, 1, f, 1]
    }
}

/// Network parameters: conv1 weights/bias, conv2 weights/bias, head weights/bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub arch: Architecture,
    pub tensors: Vec<Vec<f32>>,
}

impl ConvNet {
    pub fn init(arch: Architecture, zero_head: bool, rng: &mut impl Rng) -> Self {
        let lengths = arch.tensor_lengths();
        let fans = arch.fan_ins();
        let tensors = (0..TENSORS)
            .map(|t| {
                if t % 2 == 1 || (zero_head && t == HW) {
                    return vec![0.0; lengths[t]];
                }
                let gain = if t == HW { 1.0 } else { 2.0 };
                let std = (gain / fans[t] as f64).sqrt() as f32;
                (0..lengths[t])
                    .map(|_| {
                        let z: f32 = StandardNormal.sample(rng);
                        std * z
                    })
                    .collect()
            })
            .collect();
        Self { arch, tensors }
    }

    pub fn from_tensors(arch: Architecture, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let lengths = arch.tensor_lengths();
        if tensors.len() != TENSORS || tensors.iter().zip(lengths).any(|(t, n)| t.len() != n) {
            return Err(ModelError::InvalidConfig("tensor sizes do not match the architecture".into()));
        }
        Ok(Self { arch, tensors })
    }

    fn zeros_like(&self) -> Vec<Vec<f32>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }
}

fn conv_forward(input: &[f32], (cin, h, w): (usize, usize, usize), weights: &[f32], bias: &[f32], k: usize, out: &mut [f32]) {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    for (o, out_o) in out.chunks_exact_mut(oh * ow).enumerate() {
        out_o.fill(bias[o]);
        for i in 0..cin {
            let inp = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((o * cin + i) * k + ky) * k + kx];
                    for y in 0..oh {
                        let src = &inp[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        let dst = &mut out_o[y * ow..(y + 1) * ow];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f32],
    (cin, h, w): (usize, usize, usize),
    weights: &[f32],
    k: usize,
    gout: &[f32],
    gw: &mut [f32],
    gb: &mut [f32],
    mut gin: Option<&mut [f32]>,
) {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    if let Some(g) = gin.as_deref_mut() {
        g.fill(0.0);
    }
    for (o, g_o) in gout.chunks_exact(oh * ow).enumerate() {
        gb[o] += g_o.iter().sum::<f32>();
        for i in 0..cin {
            let inp = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let idx = ((o * cin + i) * k + ky) * k + kx;
                    let mut acc = 0.0f32;
                    for y in 0..oh {
                        let src = &inp[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        let g = &g_o[y * ow..(y + 1) * ow];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f32>();
                    }
                    gw[idx] += acc;
                    if let Some(gi) = gin.as_deref_mut() {
                        let wv = weights[idx];
                        let plane = &mut gi[i * h * w..(i + 1) * h * w];
                        for y in 0..oh {
                            let dst = &mut plane[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                            let g = &g_o[y * ow..(y + 1) * ow];
                            dst.iter_mut().zip(g).for_each(|(d, g)| *d += wv * g);
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 max pooling (floor), recording the flat argmax index of each window.
fn pool_forward(input: &[f32], (c, h, w): (usize, usize, usize), out: &mut [f32], arg: &mut [u32]) {
    let (ph, pw) = (h / 2, w / 2);
    for ch in 0..c {
        for py in 0..ph {
            for px in 0..pw {
                let base = ch * h * w + 2 * py * w + 2 * px;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                let o = ch * ph * pw + py * pw + px;
                out[o] = input[best];
                arg[o] = best as u32;
            }
        }
    }
}

fn relu(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Per-image activations and gradient buffers.
struct Scratch {
    a1: Vec<f32>,
    p1: Vec<f32>,
    arg1: Vec<u32>,
    m1: Vec<f32>,
    a2: Vec<f32>,
    p2: Vec<f32>,
    arg2: Vec<u32>,
    m2: Vec<f32>,
    logits: Vec<f32>,
    g_p2: Vec<f32>,
    g_a2: Vec<f32>,
    g_p1: Vec<f32>,
    g_a1: Vec<f32>,
}

impl Scratch {
    fn new(a: &Architecture) -> Self {
        let (h1, w1) = a.conv1_out();
        let (ph1, pw1) = a.pool1();
        let (h2, w2) = a.conv2_out();
        let n1 = a.conv1 * h1 * w1;
        let np1 = a.conv1 * ph1 * pw1;
        let n2 = a.conv2 * h2 * w2;
        let f = a.features();
        Self {
            a1: vec![0.0; n1],
            p1: vec![0.0; np1],
            arg1: vec![0; np1],
            m1: Vec::new(),
            a2: vec![0.0; n2],
            p2: vec![0.0; f],
            arg2: vec![0; f],
            m2: Vec::new(),
            logits: vec![0.0; a.classes],
            g_p2: vec![0.0; f],
            g_a2: vec![0.0; n2],
            g_p1: vec![0.0; np1],
            g_a1: vec![0.0; n1],
        }
    }
}

fn sample_mask(mask: &mut Vec<f32>, len: usize, rate: f64, rng: &mut impl Rng) {
    mask.clear();
    let keep = 1.0 - rate;
    let scale = (1.0 / keep) as f32;
    mask.extend((0..len).map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 }));
}

fn apply_mask(v: &mut [f32], mask: &[f32]) {
    if !mask.is_empty() {
        v.iter_mut().zip(mask).for_each(|(x, m)| *x *= m);
    }
}

/// conv1 → ReLU → pool.
fn stage1(t: &[Vec<f32>], a: &Architecture, x: &[f32], s: &mut Scratch) {
    conv_forward(x, (a.channels, a.height, a.width), &t[C1W], &t[C1B], a.kernel, &mut s.a1);
    relu(&mut s.a1);
    let (h1, w1) = a.conv1_out();
    pool_forward(&s.a1, (a.conv1, h1, w1), &mut s.p1, &mut s.arg1);
}

/// (mask) → conv2 → ReLU → pool → (mask): leaves the head features in `p2`.
fn stage2(t: &[Vec<f32>], a: &Architecture, s: &mut Scratch) {
    apply_mask(&mut s.p1, &s.m1);
    let (ph1, pw1) = a.pool1();
    conv_forward(&s.p1, (a.conv1, ph1, pw1), &t[C2W], &t[C2B], a.kernel, &mut s.a2);
    relu(&mut s.a2);
    let (h2, w2) = a.conv2_out();
    pool_forward(&s.a2, (a.conv2, h2, w2), &mut s.p2, &mut s.arg2);
    apply_mask(&mut s.p2, &s.m2);
}

fn head(weights: &[f32], bias: &[f32], features: &[f32], logits: &mut [f32]) {
    let f = features.len();
    for (c, l) in logits.iter_mut().enumerate() {
        *l = bias[c] + weights[c * f..(c + 1) * f].iter().zip(features).map(|(w, x)| w * x).sum::<f32>();
    }
}

fn softmax_into(logits: &[f32], out: &mut [f64]) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (*l as f64 - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Backpropagates `g_logits` through the network state left in `s`.
fn backward(t: &[Vec<f32>], a: &Architecture, x: &[f32], s: &mut Scratch, g_logits: &[f32], grads: &mut [Vec<f32>]) {
    let f = a.features();
    for (c, &g) in g_logits.iter().enumerate() {
        grads[HB][c] += g;
        let row = &mut grads[HW][c * f..(c + 1) * f];
        row.iter_mut().zip(&s.p2).for_each(|(gw, x)| *gw += g * x);
    }
    s.g_p2.fill(0.0);
    for (c, &g) in g_logits.iter().enumerate() {
        let row = &t[HW][c * f..(c + 1) * f];
        s.g_p2.iter_mut().zip(row).for_each(|(d, w)| *d += g * w);
    }
    apply_mask(&mut s.g_p2, &s.m2);
    s.g_a2.fill(0.0);
    for (g, &i) in s.g_p2.iter().zip(&s.arg2) {
        s.g_a2[i as usize] += g;
    }
    s.g_a2.iter_mut().zip(&s.a2).for_each(|(g, v)| {
        if *v <= 0.0 {
            *g = 0.0
        }
    });
    let (ph1, pw1) = a.pool1();
    let (g_c2w, rest) = grads[C2W..].split_at_mut(1);
    conv_backward(
        &s.p1,
        (a.conv1, ph1, pw1),
        &t[C2W],
        a.kernel,
        &s.g_a2,
        &mut g_c2w[0],
        &mut rest[0],
        Some(&mut s.g_p1),
    );
    apply_mask(&mut s.g_p1, &s.m1);
    s.g_a1.fill(0.0);
    for (g, &i) in s.g_p1.iter().zip(&s.arg1) {
        s.g_a1[i as usize] += g;
    }
    s.g_a1.iter_mut().zip(&s.a1).for_each(|(g, v)| {
        if *v <= 0.0 {
            *g = 0.0
        }
    });
    let (g_c1w, rest) = grads[C1W..].split_at_mut(1);
    conv_backward(
        x,
        (a.channels, a.height, a.width),
        &t[C1W],
        a.kernel,
        &s.g_a1,
        &mut g_c1w[0],
        &mut rest[0],
        None,
    );
}

/// How a single network is trained.
#[derive(Clone, Copy)]
struct TrainMode {
    dropout: f64,
    /// Mask pool1 output too (full dropout) rather than only the head input.
    dropout_all: bool,
    variational: [bool; TENSORS],
}

struct Trained {
    net: ConvNet,
    rho: Vec<Vec<f32>>,
}

fn fit_network(train: &ImageDataset, arch: Architecture, config: &ClassifierConfig, mode: TrainMode, seed: u64) -> Result<Trained> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ConvNet::init(arch, config.zero_init_head, &mut rng);
    let mut rho: Vec<Vec<f32>> = (0..TENSORS)
        .map(|t| {
            if mode.variational[t] {
                vec![config.init_rho as f32; net.tensors[t].len()]
            } else {
                Vec::new()
            }
        })
        .collect();
    let lengths = arch.tensor_lengths();
    let segments: Vec<usize> = lengths.iter().chain(lengths.iter()).copied().collect();
    let mut adam = Adam::new(config.learning_rate, &segments);
    let mut sampled = net.tensors.clone();
    let mut eps: Vec<Vec<f32>> = net.zeros_like();
    let mut grads = net.zeros_like();
    let mut scratch = Scratch::new(&arch);
    let mut probs = vec![0.0f64; arch.classes];
    let mut g_logits = vec![0.0f32; arch.classes];
    let n = train.len();
    let kl_coef = (config.kl_weight / n as f64) as f32;
    let sp2 = (config.prior_sigma * config.prior_sigma) as f32;
    let wd = config.weight_decay as f32;
    let (p1_len, f_len) = (scratch.p1.len(), arch.features());
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            for t in 0..TENSORS {
                if mode.variational[t] {
                    for (i, dst) in sampled[t].iter_mut().enumerate() {
                        let e: f32 = StandardNormal.sample(&mut rng);
                        eps[t][i] = e;
                        *dst = net.tensors[t][i] + softplus(rho[t][i] as f64) as f32 * e;
                    }
                } else {
                    sampled[t].copy_from_slice(&net.tensors[t]);
                }
            }
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                if mode.dropout > 0.0 {
                    if mode.dropout_all {
                        sample_mask(&mut scratch.m1, p1_len, mode.dropout, &mut rng);
                    }
                    sample_mask(&mut scratch.m2, f_len, mode.dropout, &mut rng);
                }
                let x = &train.images[i].pixels;
                stage1(&sampled, &arch, x, &mut scratch);
                stage2(&sampled, &arch, &mut scratch);
                head(&sampled[HW], &sampled[HB], &scratch.p2, &mut scratch.logits);
                softmax_into(&scratch.logits, &mut probs);
                let y = train.labels[i];
                loss -= probs[y].max(1e-300).ln();
                for (c, g) in g_logits.iter_mut().enumerate() {
                    *g = (probs[c] as f32 - if c == y { 1.0 } else { 0.0 }) * scale;
                }
                backward(&sampled, &arch, x, &mut scratch, &g_logits, &mut grads);
            }
            adam.begin_step();
            for t in 0..TENSORS {
                if mode.variational[t] {
                    let g = &grads[t];
                    let mu_grad: Vec<f32> = g
                        .iter()
                        .zip(&net.tensors[t])
                        .map(|(g, m)| g + kl_coef * m / sp2)
                        .collect();
                    let rho_grad: Vec<f32> = g
                        .iter()
                        .zip(&eps[t])
                        .zip(&rho[t])
                        .map(|((g, e), r)| {
                            let s = softplus(*r as f64) as f32;
                            (g * e + kl_coef * (s / sp2 - 1.0 / s)) * sigmoid(*r as f64) as f32
                        })
                        .collect();
                    adam.update_f32(t, &mut net.tensors[t], &mu_grad);
                    adam.update_f32(TENSORS + t, &mut rho[t], &rho_grad);
                } else {
                    if wd > 0.0 && t % 2 == 0 {
                        grads[t].iter_mut().zip(&net.tensors[t]).for_each(|(g, w)| *g += wd * w);
                    }
                    adam.update_f32(t, &mut net.tensors[t], &grads[t]);
                }
            }
        }
        if !loss.is_finite() || net.tensors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::Diverged { epoch });
        }
    }
    Ok(Trained { net, rho })
}

/// A trained probability model. Stochastic variants average their MC passes
/// (or members) inside [`Classifier::predict_proba`].
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub arch: Architecture,
    /// One network, or the ensemble members. For SVI variants these hold the posterior means.
    pub members: Vec<ConvNet>,
    /// Pre-softplus posterior scales per tensor; empty for deterministic tensors.
    pub rho: Vec<Vec<f32>>,
    /// Optional temperature applied to logits of deterministic variants.
    pub temperature: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

impl Classifier {
    pub fn from_members(config: ClassifierConfig, members: Vec<ConvNet>) -> Result<Self> {
        let arch = members
            .first()
            .ok_or_else(|| ModelError::InvalidConfig("no member networks".into()))?
            .arch;
        if members.iter().any(|m| m.arch != arch) {
            return Err(ModelError::InvalidConfig("members disagree on architecture".into()));
        }
        Ok(Self {
            config,
            arch,
            members,
            rho: vec![Vec::new(); TENSORS],
            temperature: None,
            validation_accuracy: None,
        })
    }

    pub fn variant(&self) -> ClassifierVariant {
        self.config.variant
    }

    fn check(&self, images: &[Image]) -> Result<()> {
        let a = &self.arch;
        match images
            .iter()
            .find(|im| (im.channels, im.height, im.width) != (a.channels, a.height, a.width))
        {
            Some(im) => Err(ModelError::InputDimension {
                expected: a.channels * a.height * a.width,
                got: im.pixels.len(),
            }),
            None => Ok(()),
        }
    }

    /// Logits of the first (or posterior-mean) network without any stochasticity.
    pub fn logits(&self, images: &[Image]) -> Result<Matrix> {
        self.check(images)?;
        let net = &self.members[0];
        let rows: Vec<Vec<f64>> = images
            .par_iter()
            .map_init(
                || Scratch::new(&self.arch),
                |s, im| {
                    stage1(&net.tensors, &self.arch, &im.pixels, s);
                    stage2(&net.tensors, &self.arch, s);
                    head(&net.tensors[HW], &net.tensors[HB], &s.p2, &mut s.logits);
                    s.logits.iter().map(|v| *v as f64).collect()
                },
            )
            .collect();
        Ok(to_matrix(rows, self.arch.classes))
    }

    /// `n × K` predictive probabilities; `seed` drives the MC passes.
    pub fn predict_proba(&self, images: &[Image], seed: u64) -> Result<Matrix> {
        self.check(images)?;
        let a = self.arch;
        let k = a.classes;
        let passes = self.config.mc_passes;
        let rate = self.config.dropout;
        let rows: Vec<Vec<f64>> = match self.config.variant {
            ClassifierVariant::Vanilla | ClassifierVariant::Ensemble => {
                let temperature = self.temperature.unwrap_or(1.0) as f32;
                images
                    .par_iter()
                    .map_init(
                        || (Scratch::new(&a), vec![0.0; k]),
                        |(s, p), im| {
                            let mut acc = vec![0.0; k];
                            for net in &self.members {
                                stage1(&net.tensors, &a, &im.pixels, s);
                                stage2(&net.tensors, &a, s);
                                head(&net.tensors[HW], &net.tensors[HB], &s.p2, &mut s.logits);
                                s.logits.iter_mut().for_each(|l| *l /= temperature);
                                softmax_into(&s.logits, p);
                                acc.iter_mut().zip(p.iter()).for_each(|(a, v)| *a += v);
                            }
                            let m = self.members.len() as f64;
                            acc.iter_mut().for_each(|v| *v /= m);
                            acc
                        },
                    )
                    .collect()
            }
            ClassifierVariant::Dropout | ClassifierVariant::LastLayerDropout => {
                let all = self.config.variant == ClassifierVariant::Dropout;
                let net = &self.members[0];
                images
                    .par_iter()
                    .enumerate()
                    .map_init(
                        || (Scratch::new(&a), vec![0.0; k]),
                        |(s, p), (i, im)| {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            rng.set_stream(i as u64);
                            let mut acc = vec![0.0; k];
                            s.m1.clear();
                            s.m2.clear();
                            stage1(&net.tensors, &a, &im.pixels, s);
                            let clean_p1 = s.p1.clone();
                            if !all {
                                stage2(&net.tensors, &a, s);
                            }
                            let clean_p2 = s.p2.clone();
                            let (p1_len, f_len) = (s.p1.len(), s.p2.len());
                            for _ in 0..passes {
                                if all {
                                    s.p1.copy_from_slice(&clean_p1);
                                    sample_mask(&mut s.m1, p1_len, rate, &mut rng);
                                    sample_mask(&mut s.m2, f_len, rate, &mut rng);
                                    stage2(&net.tensors, &a, s);
                                } else {
                                    sample_mask(&mut s.m2, f_len, rate, &mut rng);
                                    s.p2.copy_from_slice(&clean_p2);
                                    apply_mask(&mut s.p2, &s.m2);
                                }
                                head(&net.tensors[HW], &net.tensors[HB], &s.p2, &mut s.logits);
                                softmax_into(&s.logits, p);
                                acc.iter_mut().zip(p.iter()).for_each(|(a, v)| *a += v);
                            }
                            acc.iter_mut().for_each(|v| *v /= passes as f64);
                            acc
                        },
                    )
                    .collect()
            }
            ClassifierVariant::Svi | ClassifierVariant::LastLayerSvi => {
                let mean = &self.members[0].tensors;
                let draws: Vec<Vec<Vec<f32>>> = (0..passes)
                    .map(|d| {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[d as u64]));
                        (0..TENSORS)
                            .map(|t| {
                                if self.rho[t].is_empty() {
                                    mean[t].clone()
                                } else {
                                    mean[t]
                                        .iter()
                                        .zip(&self.rho[t])
                                        .map(|(m, r)| {
                                            let e: f32 = StandardNormal.sample(&mut rng);
                                            m + softplus(*r as f64) as f32 * e
                                        })
                                        .collect()
                                }
                            })
                            .collect()
                    })
                    .collect();
                let trunk_fixed = self.rho[C1W].is_empty() && self.rho[C2W].is_empty();
                images
                    .par_iter()
                    .map_init(
                        || (Scratch::new(&a), vec![0.0; k]),
                        |(s, p), im| {
                            let mut acc = vec![0.0; k];
                            if trunk_fixed {
                                stage1(mean, &a, &im.pixels, s);
                                stage2(mean, &a, s);
                            }
                            for w in &draws {
                                if !trunk_fixed {
                                    stage1(w, &a, &im.pixels, s);
                                    stage2(w, &a, s);
                                }
                                head(&w[HW], &w[HB], &s.p2, &mut s.logits);
                                softmax_into(&s.logits, p);
                                acc.iter_mut().zip(p.iter()).for_each(|(a, v)| *a += v);
                            }
                            acc.iter_mut().for_each(|v| *v /= passes as f64);
                            acc
                        },
                    )
                    .collect()
            }
        };
        // Renormalize away accumulated rounding so rows sum to 1.
        let rows = rows
            .into_iter()
            .map(|mut r| {
                let total: f64 = r.iter().sum();
                r.iter_mut().for_each(|v| *v /= total);
                r
            })
            .collect();
        Ok(to_matrix(rows, k))
    }
}

fn to_matrix(rows: Vec<Vec<f64>>, k: usize) -> Matrix {
    let n = rows.len();
    let mut m = Matrix::zeros(n, k);
    for (r, row) in rows.iter().enumerate() {
        m.row_mut(r).copy_from_slice(row);
    }
    m
}

/// Row-wise argmax accuracy of a probability matrix.
pub(crate) fn argmax_accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| {
            let row = probs.row(*r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub fn train_classifier(train: &ImageDataset, val: &ImageDataset, config: &ClassifierConfig) -> Result<Classifier> {
    config.validate()?;
    let shape = train
        .shape()
        .ok_or(ModelError::InsufficientData { needed: 0, got: 0 })?;
    let arch = Architecture::new(shape, config.conv_channels, config.kernel, train.num_classes)?;
    let deterministic = TrainMode {
        dropout: 0.0,
        dropout_all: false,
        variational: [false; TENSORS],
    };
    let mut classifier = match config.variant {
        ClassifierVariant::Ensemble => {
            let members = (0..config.ensemble_size)
                .into_par_iter()
                .map(|m| fit_network(train, arch, config, deterministic, derive_seed(config.seed, &[m as u64])).map(|t| t.net))
                .collect::<Result<Vec<_>>>()?;
            Classifier::from_members(config.clone(), members)?
        }
        variant => {
            let mode = match variant {
                ClassifierVariant::Dropout => TrainMode {
                    dropout: config.dropout,
                    dropout_all: true,
                    ..deterministic
                },
                ClassifierVariant::LastLayerDropout => TrainMode {
                    dropout: config.dropout,
                    ..deterministic
                },
                ClassifierVariant::Svi => TrainMode {
                    variational: [true; TENSORS],
                    ..deterministic
                },
                ClassifierVariant::LastLayerSvi => TrainMode {
                    variational: [false, false, false, false, true, true],
                    ..deterministic
                },
                _ => deterministic,
            };
            let trained = fit_network(train, arch, config, mode, config.seed)?;
            let mut c = Classifier::from_members(config.clone(), vec![trained.net])?;
            c.rho = trained.rho;
            c
        }
    };
    if !val.is_empty() {
        let probs = classifier.predict_proba(&val.images, derive_seed(config.seed, &[u64::MAX]))?;
        classifier.validation_accuracy = Some(argmax_accuracy(&probs, &val.labels));
    }
    Ok(classifier)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two classes distinguishable by which half of a 12×12 image is bright.
    fn halves(n: usize, seed: u64) -> ImageDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let mut im = Image::zeros(1, 16, 16);
            for r in 0..16 {
                for c in 0..16 {
                    let bright = (c < 8) == (label == 0);
                    *im.at_mut(0, r, c) = if bright { 0.8 } else { 0.1 } + 0.1 * rng.random::<f32>();
                }
            }
            images.push(im);
            labels.push(label);
        }
        ImageDataset::new(images, labels, 2).unwrap()
    }

    fn arch16() -> Architecture {
        Architecture::new((1, 16, 16), (4, 6), 5, 2).unwrap()
    }

    #[test]
    fn architecture_sizes() {
        let a = Architecture::new((1, 28, 28), (8, 16), 5, 10).unwrap();
        assert_eq!(a.features(), 16 * 4 * 4);
        let c = Architecture::new((3, 32, 32), (8, 16), 5, 10).unwrap();
        assert_eq!(c.features(), 16 * 5 * 5);
        assert!(Architecture::new((1, 8, 8), (8, 16), 5, 10).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = arch16();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ConvNet::init(a, false, &mut rng);
        let data = halves(1, 4);
        let x = &data.images[0].pixels;
        let y = 1;
        let loss = |t: &[Vec<f32>]| -> f64 {
            let mut s = Scratch::new(&a);
            stage1(t, &a, x, &mut s);
            stage2(t, &a, &mut s);
            head(&t[HW], &t[HB], &s.p2, &mut s.logits);
            let mut p = vec![0.0; 2];
            softmax_into(&s.logits, &mut p);
            -p[y].ln()
        };
        let mut s = Scratch::new(&a);
        stage1(&net.tensors, &a, x, &mut s);
        stage2(&net.tensors, &a, &mut s);
        head(&net.tensors[HW], &net.tensors[HB], &s.p2, &mut s.logits);
        let mut p = vec![0.0; 2];
        softmax_into(&s.logits, &mut p);
        let g: Vec<f32> = (0..2).map(|c| p[c] as f32 - if c == y { 1.0 } else { 0.0 }).collect();
        let mut grads = net.zeros_like();
        backward(&net.tensors, &a, x, &mut s, &g, &mut grads);
        for t in 0..TENSORS {
            for i in (0..net.tensors[t].len()).step_by(7) {
                let h = 1e-3f32;
                let mut up = net.tensors.clone();
                up[t][i] += h;
                let mut down = net.tensors.clone();
                down[t][i] -= h;
                let fd = (loss(&up) - loss(&down)) / (2.0 * h as f64);
                let an = grads[t][i] as f64;
                assert!((fd - an).abs() < 2e-3 * an.abs().max(0.1), "tensor {t} index {i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_head_predicts_uniformly() {
        let data = halves(4, 0);
        let config = ClassifierConfig {
            epochs: 0,
            zero_init_head: true,
            conv_channels: (4, 6),
            ..ClassifierConfig::default()
        };
        let c = train_classifier(&data, &ImageDataset::new(vec![], vec![], 2).unwrap(), &config).unwrap();
        let p = c.predict_proba(&data.images, 0).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn identical_ensemble_members_average_to_the_member() {
        let a = arch16();
        let net = ConvNet::init(a, false, &mut ChaCha8Rng::seed_from_u64(1));
        let data = halves(6, 2);
        let single = Classifier::from_members(ClassifierConfig::default(), vec![net.clone()]).unwrap();
        let triple = Classifier::from_members(
            ClassifierConfig {
                variant: ClassifierVariant::Ensemble,
                ..ClassifierConfig::default()
            },
            vec![net.clone(), net.clone(), net],
        )
        .unwrap();
        let p1 = single.predict_proba(&data.images, 0).unwrap();
        let p3 = triple.predict_proba(&data.images, 0).unwrap();
        assert!(p1.max_abs_diff(&p3) < 1e-12);
    }

    #[test]
    fn every_variant_learns_and_outputs_distributions() {
        let train = halves(120, 5);
        let val = halves(40, 6);
        for variant in ClassifierVariant::ALL {
            let config = ClassifierConfig {
                variant,
                epochs: 4,
                conv_channels: (4, 6),
                ensemble_size: 2,
                mc_passes: 5,
                dropout: 0.2,
                learning_rate: 3e-3,
                batch_size: 16,
                ..ClassifierConfig::default()
            };
            let c = train_classifier(&train, &val, &config).unwrap();
            assert!(c.validation_accuracy.unwrap() > 0.9, "{variant:?}: {:?}", c.validation_accuracy);
            let p = c.predict_proba(&val.images, 3).unwrap();
            for r in 0..p.rows() {
                let row = p.row(r);
                assert!(row.iter().all(|v| *v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            assert_eq!(p, c.predict_proba(&val.images, 3).unwrap());
            let again = train_classifier(&train, &val, &config).unwrap();
            assert_eq!(c, again);
            match variant {
                ClassifierVariant::Svi => assert!(c.rho.iter().all(|r| !r.is_empty())),
                ClassifierVariant::LastLayerSvi => {
                    assert!(c.rho[..HW].iter().all(Vec::is_empty) && !c.rho[HW].is_empty())
                }
                _ => assert!(c.rho.iter().all(Vec::is_empty)),
            }
        }
    }

    #[test]
    fn dropout_variants_require_a_rate() {
        let data = halves(4, 0);
        let config = ClassifierConfig {
            variant: ClassifierVariant::Dropout,
            dropout: 0.0,
            ..ClassifierConfig::default()
        };
        assert!(matches!(train_classifier(&data, &data, &config), Err(ModelError::NoDropout)));
    }
}
