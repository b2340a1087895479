//! Training objectives for the translation network and the segmentation
//! network. Every loss is built from tape operations, so gradients come for
//! free and are checked against finite differences in the test suite.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::labelops::IGNORE_INDEX;
use crate::nets::{MultiScalePatchDiscriminator, PerceptualExtractor, ScaleOutput, PERCEPTUAL_LAYERS};
use crate::params::Bound;
use crate::tensor::Scalar;

pub const PERCEPTUAL_LAYER_WEIGHTS: [f64; PERCEPTUAL_LAYERS] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

/// Per-term switches. A disabled term is neither computed nor logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub perceptual: bool,
    pub semantic: bool,
    pub kld: bool,
    pub feature_matching: bool,
    pub adversarial: bool,
    pub seg_target: bool,
    pub seg_generated: bool,
    pub seg_perceptual: bool,
    pub seg_feature_matching: bool,
    pub seg_kld: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            perceptual: true,
            semantic: true,
            kld: true,
            feature_matching: true,
            adversarial: true,
            seg_target: true,
            seg_generated: true,
            seg_perceptual: true,
            seg_feature_matching: true,
            seg_kld: true,
        }
    }
}

/// Weights of both combined objectives. Translation terms: `lambda_p`,
/// `lambda_c`, `lambda_kld`, `lambda_f`, `lambda_adv`. Segmentation terms:
/// `lambda_tgt`, `lambda_gen`, `lambda_pseg`, `lambda_seg_f`, `lambda_seg_kld`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_c: f64,
    pub lambda_kld: f64,
    pub lambda_f: f64,
    pub lambda_adv: f64,
    pub lambda_tgt: f64,
    pub lambda_gen: f64,
    pub lambda_pseg: f64,
    pub lambda_seg_f: f64,
    pub lambda_seg_kld: f64,
    pub perceptual_layers: [f64; PERCEPTUAL_LAYERS],
    pub enabled: LossToggles,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: 2.0,
            lambda_c: 3.0,
            lambda_kld: 0.05,
            lambda_f: 1.0,
            lambda_adv: 1.0,
            lambda_tgt: 1.0,
            lambda_gen: 3.0,
            lambda_pseg: 10.0,
            lambda_seg_f: 1.0,
            lambda_seg_kld: 0.05,
            perceptual_layers: PERCEPTUAL_LAYER_WEIGHTS,
            enabled: LossToggles::default(),
        }
    }
}

fn gate(on: bool, w: f64) -> f64 {
    if on {
        w
    } else {
        0.0
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_p", self.lambda_p),
            ("lambda_c", self.lambda_c),
            ("lambda_kld", self.lambda_kld),
            ("lambda_f", self.lambda_f),
            ("lambda_adv", self.lambda_adv),
            ("lambda_tgt", self.lambda_tgt),
            ("lambda_gen", self.lambda_gen),
            ("lambda_pseg", self.lambda_pseg),
            ("lambda_seg_f", self.lambda_seg_f),
            ("lambda_seg_kld", self.lambda_seg_kld),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.perceptual_layers.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss.perceptual_layers must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Effective translation weights with toggles applied.
    pub fn translation(&self) -> TranslationComponents<f64> {
        let e = &self.enabled;
        TranslationComponents {
            perceptual: gate(e.perceptual, self.lambda_p),
            semantic: gate(e.semantic, self.lambda_c),
            kld: gate(e.kld, self.lambda_kld),
            feature_matching: gate(e.feature_matching, self.lambda_f),
            adversarial: gate(e.adversarial, self.lambda_adv),
        }
    }

    /// Effective segmentation weights with toggles applied.
    pub fn segmentation(&self) -> SegmentationComponents<f64> {
        let e = &self.enabled;
        SegmentationComponents {
            target: gate(e.seg_target, self.lambda_tgt),
            generated: gate(e.seg_generated, self.lambda_gen),
            perceptual: gate(e.seg_perceptual, self.lambda_pseg),
            feature_matching: gate(e.seg_feature_matching, self.lambda_seg_f),
            kld: gate(e.seg_kld, self.lambda_seg_kld),
        }
    }
}

/// Weighted sum of per-element L1 distances between paired feature lists.
pub fn weighted_feature_l1<'t, T: Scalar>(a: &[Var<'t, T>], b: &[Var<'t, T>], weights: &[f64]) -> Result<Var<'t, T>> {
    if a.len() != b.len() || a.len() != weights.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "feature lists of length {} and {} with {} weights",
            a.len(),
            b.len(),
            weights.len()
        )));
    }
    let mut total: Option<Var<'t, T>> = None;
    for ((fa, fb), &w) in a.iter().zip(b).zip(weights) {
        if fa.shape() != fb.shape() {
            return Err(Error::Shape(format!("features {:?} vs {:?}", fa.shape(), fb.shape())));
        }
        let term = fa.l1_mean(fb).scale(w);
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `sum_i w_i * mean|phi_i(a) - phi_i(b)|`.
pub fn perceptual_loss<'t, T: Scalar>(
    phi: &PerceptualExtractor<T>,
    p: &Bound<'t, T>,
    a: Var<'t, T>,
    b: Var<'t, T>,
    weights: &[f64; PERCEPTUAL_LAYERS],
) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("perceptual loss on {:?} vs {:?}", a.shape(), b.shape())));
    }
    let fa = phi.features(p, a)?;
    let fb = phi.features(p, b)?;
    weighted_feature_l1(&fa, &fb, weights)
}

/// Cross-entropy term together with the number of pixels it averaged over.
pub struct CrossEntropy<'t, T: Scalar> {
    pub loss: Var<'t, T>,
    pub counted: usize,
}

impl<T: Scalar> CrossEntropy<'_, T> {
    /// True when every pixel was ignored and the loss is a placeholder 0.
    pub fn all_ignored(&self) -> bool {
        self.counted == 0
    }
}

/// Mean `-log p(label)` over non-ignored pixels of probabilities `[N, C, H, W]`.
/// `labels` is the row-major concatenation of the `N` label maps.
pub fn semantic_consistency_loss<'t, T: Scalar>(probs: Var<'t, T>, labels: &[u8]) -> Result<CrossEntropy<'t, T>> {
    check_labels(&probs, labels)?;
    let (loss, counted) = probs.ln_clamped(1e-30).nll_masked(labels, IGNORE_INDEX);
    Ok(CrossEntropy { loss, counted })
}

/// Same quantity as [`semantic_consistency_loss`] computed from logits through
/// a log-softmax, which is the numerically stable training path.
pub fn cross_entropy_logits<'t, T: Scalar>(logits: Var<'t, T>, labels: &[u8]) -> Result<CrossEntropy<'t, T>> {
    check_labels(&logits, labels)?;
    let (loss, counted) = logits.log_softmax_channels().nll_masked(labels, IGNORE_INDEX);
    Ok(CrossEntropy { loss, counted })
}

fn check_labels<T: Scalar>(x: &Var<'_, T>, labels: &[u8]) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || labels.len() != s[0] * s[2] * s[3] {
        return Err(Error::Shape(format!("{} labels for predictions {s:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= s[1]) {
        return Err(Error::LabelOutOfRange { value: bad, num_classes: s[1] });
    }
    Ok(())
}

/// `sum over scales and layers of mean|D_i(real) - D_i(fake)|` from
/// precomputed discriminator outputs; the real branch is detached.
pub fn feature_matching_from_outputs<'t, T: Scalar>(
    real: &[ScaleOutput<'t, T>],
    fake: &[ScaleOutput<'t, T>],
) -> Result<Var<'t, T>> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!("{} real scales vs {} fake scales", real.len(), fake.len())));
    }
    let mut fr = Vec::new();
    let mut ff = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        fr.extend(r.features.iter().map(|v| v.detach()));
        ff.extend(f.features.iter().copied());
    }
    let ones = vec![1.0; fr.len()];
    weighted_feature_l1(&ff, &fr, &ones)
}

pub fn feature_matching_loss<'t, T: Scalar>(
    disc: &MultiScalePatchDiscriminator<T>,
    p: &Bound<'t, T>,
    real: Var<'t, T>,
    fake: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!("feature matching on {:?} vs {:?}", real.shape(), fake.shape())));
    }
    let r = disc.discriminate(p, real)?;
    let f = disc.discriminate(p, fake)?;
    feature_matching_from_outputs(&r, &f)
}

/// `0.5 * sum_d (mu^2 + exp(logvar) - 1 - logvar)`, summed over latent
/// dimensions and averaged over the batch.
pub fn kld_loss<'t, T: Scalar>(mu: Var<'t, T>, logvar: Var<'t, T>) -> Result<Var<'t, T>> {
    if mu.shape() != logvar.shape() {
        return Err(Error::Shape(format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape())));
    }
    let batch = if mu.shape().len() > 1 { mu.shape()[0] } else { 1 };
    let inner = mu.square().add(&logvar.exp()).sub(&logvar).add_scalar(-1.0);
    Ok(inner.sum().scale(0.5 / batch as f64))
}

fn mean_over<'t, T: Scalar>(terms: Vec<Var<'t, T>>) -> Var<'t, T> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one scale");
    it.fold(first, |acc, t| acc.add(&t)).scale(1.0 / n as f64)
}

/// `mean(max(0, 1 - D(real))) + mean(max(0, 1 + D(fake)))`, averaged over scales.
pub fn hinge_d_loss<'t, T: Scalar>(real: &[Var<'t, T>], fake: &[Var<'t, T>]) -> Var<'t, T> {
    assert_eq!(real.len(), fake.len(), "hinge: scale count");
    let terms = real
        .iter()
        .zip(fake)
        .map(|(r, f)| r.scale(-1.0).add_scalar(1.0).relu().mean().add(&f.add_scalar(1.0).relu().mean()))
        .collect();
    mean_over(terms)
}

/// `-mean(D(fake))`, averaged over scales.
pub fn hinge_g_loss<'t, T: Scalar>(fake: &[Var<'t, T>]) -> Var<'t, T> {
    mean_over(fake.iter().map(|f| f.mean().scale(-1.0)).collect())
}

/// Loss components of the translation objective, or their weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TranslationComponents<V> {
    pub perceptual: V,
    pub semantic: V,
    pub kld: V,
    pub feature_matching: V,
    pub adversarial: V,
}

/// Loss components of the segmentation objective, or their weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegmentationComponents<V> {
    pub target: V,
    pub generated: V,
    pub perceptual: V,
    pub feature_matching: V,
    pub kld: V,
}

impl<V> TranslationComponents<V> {
    pub const NAMES: [&'static str; 5] = ["perceptual", "semantic", "kld", "feature_matching", "adversarial"];

    pub fn as_array(&self) -> [&V; 5] {
        [&self.perceptual, &self.semantic, &self.kld, &self.feature_matching, &self.adversarial]
    }
}

impl<V> SegmentationComponents<V> {
    pub const NAMES: [&'static str; 5] = ["target", "generated", "perceptual", "feature_matching", "kld"];

    pub fn as_array(&self) -> [&V; 5] {
        [&self.target, &self.generated, &self.perceptual, &self.feature_matching, &self.kld]
    }
}

/// A combined objective and the unweighted value of each computed term
/// (`None` for terms that were switched off).
pub struct Combined<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub parts: [Option<f64>; 5],
}

fn combine<'t, T: Scalar>(terms: [&Option<Var<'t, T>>; 5], weights: [&f64; 5]) -> Result<Combined<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    let mut parts = [None; 5];
    for (k, (term, &w)) in terms.into_iter().zip(weights).enumerate() {
        let Some(v) = term else { continue };
        if v.value().numel() != 1 {
            return Err(Error::Shape(format!("loss component {k} is not a scalar: {:?}", v.shape())));
        }
        parts[k] = Some(v.item().as_f64());
        let weighted = v.scale(w);
        total = Some(match total {
            Some(t) => t.add(&weighted),
            None => weighted,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("every loss term is disabled".into()))?;
    Ok(Combined { total, parts })
}

/// `lambda_p*L_p + lambda_c*L_c + lambda_kld*L_kld + lambda_f*L_f + lambda_adv*L_adv`
/// over the terms that are present.
pub fn translation_loss<'t, T: Scalar>(
    terms: &TranslationComponents<Option<Var<'t, T>>>,
    weights: &TranslationComponents<f64>,
) -> Result<Combined<'t, T>> {
    combine(terms.as_array(), weights.as_array())
}

/// `lambda_tgt*L_c(tgt) + lambda_gen*L_c(gen) + lambda_pseg*L_p + lambda_f*L_f + lambda_kld*L_kld`
/// over the terms that are present.
pub fn segmentation_loss<'t, T: Scalar>(
    terms: &SegmentationComponents<Option<Var<'t, T>>>,
    weights: &SegmentationComponents<f64>,
) -> Result<Combined<'t, T>> {
    combine(terms.as_array(), weights.as_array())
}
