//! Desk-scale networks: the segmentation network, the label-conditioned
//! translation generator with its latent encoder, the multi-scale patch
//! discriminator and the frozen perceptual feature extractor.
//!
//! Every network is generic over the element type so the same definitions
//! run in f32 for training and in f64 for gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, BindMode, Bound, ParamKind, ParamSet};
use crate::tensor::{Scalar, Tensor};

const BN_EPS: f64 = 1e-5;
const IN_EPS: f64 = 1e-5;
const LRELU: f64 = 0.2;

pub const LATENT_DIM: usize = 64;
pub const DISC_SCALES: usize = 2;
pub const DISC_LAYERS: usize = 3;
pub const PERCEPTUAL_LAYERS: usize = 5;

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
}

impl Conv {
    fn new<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, rng: &mut R, name: &str, c_in: usize, c_out: usize, stride: usize, gain: f64) -> Self {
        let std = gain * (2.0 / (c_in * 9) as f64).sqrt();
        let w = ps.add(format!("{name}.weight"), normal_tensor(rng, &[c_out, c_in, 3, 3], std), ParamKind::Weight);
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), ParamKind::Weight);
        Conv { w, b, stride }
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(&p[self.w], Some(&p[self.b]), self.stride)
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn new<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, rng: &mut R, name: &str, d_in: usize, d_out: usize, std: f64) -> Self {
        let w = ps.add(format!("{name}.weight"), normal_tensor(rng, &[d_in, d_out], std), ParamKind::Weight);
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), ParamKind::Weight);
        Linear { w, b }
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(&p[self.w], &p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
struct BatchNorm {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them for running averages.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Batch statistics observed by one batch-norm layer in [`BnMode::Train`].
#[derive(Clone, Debug)]
pub struct BnStat<T> {
    mean_idx: usize,
    var_idx: usize,
    mean: Vec<T>,
    var: Vec<T>,
}

impl BatchNorm {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()), ParamKind::Weight),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Weight),
            mean: ps.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer),
            var: ps.add(format!("{name}.running_var"), Tensor::full(&[c], T::one()), ParamKind::Buffer),
        }
    }

    fn forward<'t, T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        mode: BnMode,
        stats: &mut Vec<BnStat<T>>,
    ) -> Var<'t, T> {
        match mode {
            BnMode::Train => {
                let (y, mean, var) = x.batch_norm_train(&p[self.gamma], &p[self.beta], BN_EPS);
                stats.push(BnStat { mean_idx: self.mean, var_idx: self.var, mean, var });
                y
            }
            BnMode::Eval => x.batch_norm_eval(
                &p[self.gamma],
                &p[self.beta],
                ps.value(self.mean).data(),
                ps.value(self.var).data(),
                BN_EPS,
            ),
        }
    }
}

fn check_nchw<T: Scalar>(x: &Var<'_, T>, channels: usize, multiple: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::Shape(format!("{what} expects [N, {channels}, H, W], got {s:?}")));
    }
    if s[2] % multiple != 0 || s[3] % multiple != 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::Shape(format!("{what} needs H and W divisible by {multiple}, got {}x{}", s[2], s[3])));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub num_classes: usize,
    pub widths: [usize; 3],
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig { num_classes: 5, widths: [16, 32, 64] }
    }
}

/// Three-stage conv encoder with a skip-connected upsampling decoder and a
/// per-pixel classifier head.
#[derive(Clone, Debug)]
pub struct SegNet<T> {
    config: SegNetConfig,
    params: ParamSet<T>,
    enc: [(Conv, BatchNorm); 3],
    dec: [(Conv, BatchNorm); 3],
    cls: Conv,
}

pub struct SegOutput<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    pub bn_stats: Vec<BnStat<T>>,
}

/// Parameter-name prefixes left trainable by [`SegNet::freeze_partial`].
pub const SEG_ADAPTABLE_PREFIXES: [&str; 2] = ["dec1.", "cls."];

impl<T: Scalar> SegNet<T> {
    pub fn new(config: SegNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let [w1, w2, w3] = config.widths;
        let mut block = |ps: &mut ParamSet<T>, name: &str, ci: usize, co: usize| {
            (Conv::new(ps, &mut rng, name, ci, co, 1, 1.0), BatchNorm::new(ps, &format!("{name}.bn"), co))
        };
        let enc = [block(&mut ps, "enc1", 3, w1), block(&mut ps, "enc2", w1, w2), block(&mut ps, "enc3", w2, w3)];
        let dec = [block(&mut ps, "dec3", w3, w2), block(&mut ps, "dec2", w2, w1), block(&mut ps, "dec1", w1, w1)];
        let cls = Conv::new(&mut ps, &mut rng, "cls", w1, config.num_classes, 1, 0.5);
        SegNet { config, params: ps, enc, dec, cls }
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, mode: BindMode) -> Bound<'t, T> {
        self.params.bind(tape, mode)
    }

    /// Logits `[N, C, H, W]` for images `[N, 3, H, W]`; H and W must be divisible by 8.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>, mode: BnMode) -> Result<SegOutput<'t, T>> {
        check_nchw(&x, 3, 8, "segmentation network")?;
        let mut stats = Vec::new();
        let mut skips = Vec::with_capacity(3);
        let mut h = x;
        for (conv, bn) in &self.enc {
            let e = bn.forward(&self.params, p, conv.forward(p, h), mode, &mut stats).relu();
            skips.push(e);
            h = e.avg_pool2x();
        }
        for ((conv, bn), skip) in self.dec.iter().zip(skips.iter().rev()) {
            let up = h.upsample2x().add(skip);
            h = bn.forward(&self.params, p, conv.forward(p, up), mode, &mut stats).relu();
        }
        Ok(SegOutput { logits: self.cls.forward(p, h), bn_stats: stats })
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_bn_stats(&mut self, stats: &[BnStat<T>], momentum: f64) {
        let m = T::of(momentum);
        for s in stats {
            for (idx, obs) in [(s.mean_idx, &s.mean), (s.var_idx, &s.var)] {
                let v = self.params.value_mut(idx);
                for (r, &o) in v.data_mut().iter_mut().zip(obs.iter()) {
                    *r = *r * (T::one() - m) + o * m;
                }
            }
        }
    }

    /// Leaves only the last decoder block and the classifier trainable.
    pub fn freeze_partial(&mut self) {
        self.params.set_trainable_where(|n| SEG_ADAPTABLE_PREFIXES.iter().any(|p| n.starts_with(p)));
    }

    pub fn freeze_all(&mut self) {
        self.params.freeze_all();
    }

    /// Digest of the parameters that `freeze_partial` freezes.
    pub fn frozen_digest(&self) -> String {
        self.params.digest(|p| !SEG_ADAPTABLE_PREFIXES.iter().any(|pre| p.name.starts_with(pre)))
    }

    pub fn cast<U: Scalar>(&self) -> SegNet<U> {
        SegNet { config: self.config.clone(), params: self.params.cast(), enc: self.enc, dec: self.dec, cls: self.cls }
    }
}

/// Softmax probabilities and logits of a frozen or eval-mode forward pass.
pub fn seg_forward<T: Scalar>(net: &SegNet<T>, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let p = net.bind(&tape, BindMode::Frozen);
    let out = net.forward(&p, tape.constant(images.clone()), BnMode::Eval)?;
    let probs = out.logits.softmax_channels();
    Ok(((*probs.value()).clone(), (*out.logits.value()).clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub widths: [usize; 2],
    pub res_blocks: usize,
    pub latent_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { num_classes: 5, widths: [16, 32], res_blocks: 4, latent_dim: LATENT_DIM }
    }
}

/// Content-stream generator conditioned on a `C`-channel label map, with a
/// latent code modulating the full-resolution features, plus the image
/// encoder that supplies the latent posterior.
#[derive(Clone, Debug)]
pub struct TranslationGenerator<T> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    enc: [Conv; 3],
    res: Vec<(Conv, Conv)>,
    dec: [Conv; 2],
    style: Linear,
    out: Conv,
    lat_convs: [Conv; 3],
    lat_mu: Linear,
    lat_logvar: Linear,
}

pub struct Latent<'t, T: Scalar> {
    pub mu: Var<'t, T>,
    pub logvar: Var<'t, T>,
}

impl<'t, T: Scalar> Latent<'t, T> {
    /// `z = mu + exp(0.5 * logvar) * eps`.
    pub fn sample(&self, eps: &Tensor<T>) -> Var<'t, T> {
        let tape = self.mu.tape();
        let std = self.logvar.scale(0.5).exp();
        self.mu.add(&std.mul(&tape.constant(eps.clone())))
    }
}

impl<T: Scalar> TranslationGenerator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let [w1, w2] = config.widths;
        let c = config.num_classes;
        let enc = [
            Conv::new(&mut ps, &mut rng, "gen.enc1", c, w1, 1, 1.0),
            Conv::new(&mut ps, &mut rng, "gen.enc2", w1, w2, 2, 1.0),
            Conv::new(&mut ps, &mut rng, "gen.enc3", w2, w2, 2, 1.0),
        ];
        let res = (0..config.res_blocks)
            .map(|i| {
                (
                    Conv::new(&mut ps, &mut rng, &format!("gen.res{i}.a"), w2, w2, 1, 1.0),
                    Conv::new(&mut ps, &mut rng, &format!("gen.res{i}.b"), w2, w2, 1, 0.5),
                )
            })
            .collect();
        let dec = [
            Conv::new(&mut ps, &mut rng, "gen.dec1", w2, w2, 1, 1.0),
            Conv::new(&mut ps, &mut rng, "gen.dec2", w2, w1, 1, 1.0),
        ];
        let style = Linear::new(&mut ps, &mut rng, "gen.style", config.latent_dim, 2 * w1, 0.02);
        let out = Conv::new(&mut ps, &mut rng, "gen.out", w1, 3, 1, 0.5);
        let lat_convs = [
            Conv::new(&mut ps, &mut rng, "enc.conv1", 3, w1, 2, 1.0),
            Conv::new(&mut ps, &mut rng, "enc.conv2", w1, w2, 2, 1.0),
            Conv::new(&mut ps, &mut rng, "enc.conv3", w2, w2, 2, 1.0),
        ];
        let lat_std = (1.0 / w2 as f64).sqrt() * 0.1;
        let lat_mu = Linear::new(&mut ps, &mut rng, "enc.mu", w2, config.latent_dim, lat_std);
        let lat_logvar = Linear::new(&mut ps, &mut rng, "enc.logvar", w2, config.latent_dim, lat_std);
        TranslationGenerator { config, params: ps, enc, res, dec, style, out, lat_convs, lat_mu, lat_logvar }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, mode: BindMode) -> Bound<'t, T> {
        self.params.bind(tape, mode)
    }

    /// Image `[N, 3, H, W]` in `[-1, 1]` from a label encoding `[N, C, H, W]`
    /// and latent codes `[N, latent_dim]`. H and W must be divisible by 4.
    pub fn translate<'t>(&self, p: &Bound<'t, T>, labels: Var<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        check_nchw(&labels, self.config.num_classes, 4, "translation generator")?;
        let n = labels.shape()[0];
        if z.shape() != [n, self.config.latent_dim] {
            return Err(Error::Shape(format!("latent must be [{n}, {}], got {:?}", self.config.latent_dim, z.shape())));
        }
        let e1 = self.enc[0].forward(p, labels).instance_norm(IN_EPS).relu();
        let e2 = self.enc[1].forward(p, e1).instance_norm(IN_EPS).relu();
        let mut h = self.enc[2].forward(p, e2).instance_norm(IN_EPS).relu();
        for (a, b) in &self.res {
            let r = a.forward(p, h).instance_norm(IN_EPS).relu();
            h = h.add(&b.forward(p, r).instance_norm(IN_EPS));
        }
        let d1 = self.dec[0].forward(p, h.upsample2x()).instance_norm(IN_EPS).relu();
        let d2 = self.dec[1].forward(p, d1.add(&e2).upsample2x()).instance_norm(IN_EPS).add(&e1);
        let w1 = self.config.widths[0];
        let style = self.style.forward(p, z);
        let m = d2.modulate(&select_columns(style, 0, w1), &select_columns(style, w1, w1)).relu();
        Ok(self.out.forward(p, m).tanh())
    }

    /// Posterior `(mu, logvar)` of the latent code for images `[N, 3, H, W]`.
    pub fn encode_latent<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Latent<'t, T>> {
        check_nchw(&images, 3, 1, "latent encoder")?;
        let mut h = images;
        for c in &self.lat_convs {
            h = c.forward(p, h).leaky_relu(LRELU);
        }
        let pooled = h.global_avg_pool();
        Ok(Latent { mu: self.lat_mu.forward(p, pooled), logvar: self.lat_logvar.forward(p, pooled) })
    }

    pub fn cast<U: Scalar>(&self) -> TranslationGenerator<U> {
        TranslationGenerator {
            config: self.config.clone(),
            params: self.params.cast(),
            enc: self.enc,
            res: self.res.clone(),
            dec: self.dec,
            style: self.style,
            out: self.out,
            lat_convs: self.lat_convs,
            lat_mu: self.lat_mu,
            lat_logvar: self.lat_logvar,
        }
    }
}

/// Columns `start..start + width` of a `[N, D]` variable.
fn select_columns<'t, T: Scalar>(x: Var<'t, T>, start: usize, width: usize) -> Var<'t, T> {
    let (_, d) = x.value().dims2();
    let mut sel = vec![T::zero(); d * width];
    for j in 0..width {
        sel[(start + j) * width + j] = T::one();
    }
    let tape = x.tape();
    x.linear(&tape.constant(Tensor::from_vec(&[d, width], sel)), &tape.constant(Tensor::zeros(&[width])))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub widths: [usize; 3],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { widths: [16, 32, 64] }
    }
}

/// Per-scale output: the intermediate features and the patch logit map.
pub struct ScaleOutput<'t, T: Scalar> {
    pub features: Vec<Var<'t, T>>,
    pub logits: Var<'t, T>,
}

/// Two-scale patch discriminator; the second scale sees a 2x average-pooled image.
#[derive(Clone, Debug)]
pub struct MultiScalePatchDiscriminator<T> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    scales: Vec<([Conv; DISC_LAYERS], Conv)>,
}

impl<T: Scalar> MultiScalePatchDiscriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let [w1, w2, w3] = config.widths;
        let scales = (0..DISC_SCALES)
            .map(|s| {
                let convs = [
                    Conv::new(&mut ps, &mut rng, &format!("disc{s}.conv1"), 3, w1, 2, 1.0),
                    Conv::new(&mut ps, &mut rng, &format!("disc{s}.conv2"), w1, w2, 2, 1.0),
                    Conv::new(&mut ps, &mut rng, &format!("disc{s}.conv3"), w2, w3, 2, 1.0),
                ];
                (convs, Conv::new(&mut ps, &mut rng, &format!("disc{s}.logits"), w3, 1, 1, 0.5))
            })
            .collect();
        MultiScalePatchDiscriminator { config, params: ps, scales }
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, mode: BindMode) -> Bound<'t, T> {
        self.params.bind(tape, mode)
    }

    pub fn discriminate<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Vec<ScaleOutput<'t, T>>> {
        check_nchw(&images, 3, 1, "discriminator")?;
        let mut x = images;
        let mut outs = Vec::with_capacity(DISC_SCALES);
        for (s, (convs, head)) in self.scales.iter().enumerate() {
            if s > 0 {
                x = x.avg_pool2x();
            }
            let mut feats = Vec::with_capacity(DISC_LAYERS);
            let mut h = x;
            for (i, c) in convs.iter().enumerate() {
                h = c.forward(p, h);
                if i > 0 {
                    h = h.instance_norm(IN_EPS);
                }
                h = h.leaky_relu(LRELU);
                feats.push(h);
            }
            outs.push(ScaleOutput { features: feats, logits: head.forward(p, h) });
        }
        Ok(outs)
    }

    pub fn cast<U: Scalar>(&self) -> MultiScalePatchDiscriminator<U> {
        MultiScalePatchDiscriminator { config: self.config.clone(), params: self.params.cast(), scales: self.scales.clone() }
    }
}

/// Five-stage frozen convolutional feature extractor with seeded random
/// weights, used as the fixed metric space of the perceptual loss.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<T> {
    params: ParamSet<T>,
    stages: [Conv; PERCEPTUAL_LAYERS],
}

pub const PERCEPTUAL_WIDTHS: [usize; PERCEPTUAL_LAYERS] = [8, 16, 32, 64, 64];
pub const PERCEPTUAL_SEED: u64 = 0x5EED_F00D;

impl<T: Scalar> PerceptualExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut c_in = 3;
        let mut stage = 0;
        let stages = PERCEPTUAL_WIDTHS.map(|w| {
            stage += 1;
            let c = Conv::new(&mut ps, &mut rng, &format!("phi{stage}"), c_in, w, 1, 1.0);
            c_in = w;
            c
        });
        ps.freeze_all();
        PerceptualExtractor { params: ps, stages }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.params.bind(tape, BindMode::Frozen)
    }

    /// Features of every stage; stage `i` runs at `1 / 2^i` of the input resolution.
    pub fn features<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        check_nchw(&images, 3, 1, "perceptual extractor")?;
        let mut h = images;
        let mut out = Vec::with_capacity(PERCEPTUAL_LAYERS);
        for (i, c) in self.stages.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2x();
            }
            h = c.forward(p, h).relu();
            out.push(h);
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> PerceptualExtractor<U> {
        PerceptualExtractor { params: self.params.cast(), stages: self.stages }
    }
}

/// Gaussian noise `[n, dim]` for the reparameterization trick.
pub fn standard_normal<T: Scalar, R: Rng>(rng: &mut R, n: usize, dim: usize) -> Tensor<T> {
    normal_tensor(rng, &[n, dim], 1.0)
}
