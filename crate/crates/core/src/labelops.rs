//! Label-space operations: one-hot encoding, arg-max with confidence, and
//! the class-wise confidence filter that turns pseudo labels into their
//! filtered counterparts.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Reserved label value excluded from losses and evaluation.
pub const IGNORE_INDEX: u8 = 255;

/// `H x W` class indices. Every value is in `[0, num_classes)` or [`IGNORE_INDEX`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} map", data.len())));
        }
        if num_classes == 0 || num_classes > IGNORE_INDEX as usize {
            return Err(Error::InvalidArgument(format!("num_classes {num_classes} out of range")));
        }
        if let Some(&value) = data.iter().find(|&&v| v != IGNORE_INDEX && v as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { value, num_classes });
        }
        Ok(LabelMap { height, width, num_classes, data })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, value: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Pixel count per class; ignore pixels are not counted.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &v in &self.data {
            if v != IGNORE_INDEX {
                h[v as usize] += 1;
            }
        }
        h
    }

    pub fn count_ignored(&self) -> usize {
        self.data.iter().filter(|&&v| v == IGNORE_INDEX).count()
    }
}

/// `H x W` per-pixel confidence of the arg-max class.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} confidences for a {height}x{width} map", data.len())));
        }
        Ok(ConfidenceMap { height, width, data })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// `C x H x W` class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    num_classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbMap {
    /// Validates non-negativity and per-pixel normalization within 1e-5.
    pub fn new(num_classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != num_classes * height * width {
            return Err(Error::Shape(format!(
                "{} probabilities for {num_classes}x{height}x{width}",
                data.len()
            )));
        }
        let hw = height * width;
        for p in 0..hw {
            let mut s = 0.0f64;
            for c in 0..num_classes {
                let v = data[c * hw + p];
                if !(v >= 0.0) {
                    return Err(Error::InvalidArgument(format!("probability {v} at pixel {p}")));
                }
                s += v as f64;
            }
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!("probabilities at pixel {p} sum to {s}")));
            }
        }
        Ok(ProbMap { num_classes, height, width, data })
    }

    /// Item `n` of a `[N, C, H, W]` softmax output.
    pub fn from_batch<T: Scalar>(probs: &Tensor<T>, n: usize) -> Result<Self> {
        let (_, c, h, w) = probs.dims4();
        let data = probs.item_slice(n).iter().map(|v| v.as_f64() as f32).collect();
        Self::new(c, h, w, data)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `[1, C, H, W]` tensor view.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.num_classes, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }
}

/// `C x H x W` one-hot (or soft) class encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotMap {
    num_classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl OneHotMap {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// `[1, C, H, W]` tensor view.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.num_classes, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }
}

impl From<ProbMap> for OneHotMap {
    fn from(p: ProbMap) -> Self {
        OneHotMap { num_classes: p.num_classes, height: p.height, width: p.width, data: p.data }
    }
}

/// Channel `c` is the indicator of class `c`; ignore pixels get an all-zero column.
pub fn one_hot(labels: &LabelMap, num_classes: usize) -> Result<OneHotMap> {
    let hw = labels.height * labels.width;
    let mut data = vec![0.0f32; num_classes * hw];
    for (p, &v) in labels.data.iter().enumerate() {
        if v == IGNORE_INDEX {
            continue;
        }
        if v as usize >= num_classes {
            return Err(Error::LabelOutOfRange { value: v, num_classes });
        }
        data[v as usize * hw + p] = 1.0;
    }
    Ok(OneHotMap { num_classes, height: labels.height, width: labels.width, data })
}

/// Per-pixel arg-max class and its probability. Ties go to the lower class index.
pub fn argmax_labels(probs: &ProbMap) -> (LabelMap, ConfidenceMap) {
    let hw = probs.height * probs.width;
    let mut labels = vec![0u8; hw];
    let mut conf = vec![0.0f32; hw];
    for p in 0..hw {
        let mut best = 0;
        let mut best_v = probs.data[p];
        for c in 1..probs.num_classes {
            let v = probs.data[c * hw + p];
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        labels[p] = best as u8;
        conf[p] = best_v;
    }
    (
        LabelMap { height: probs.height, width: probs.width, num_classes: probs.num_classes, data: labels },
        ConfidenceMap { height: probs.height, width: probs.width, data: conf },
    )
}

/// Number of pixels kept out of `n` at `keep_fraction`: `ceil(keep_fraction * n)`.
///
/// A 1e-9 slack absorbs binary rounding of products that are integers in
/// exact arithmetic (`0.1 * 30` evaluates to `3.0000000000000004`).
pub fn keep_count(keep_fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let k = (keep_fraction * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

fn check_fraction(keep_fraction: f64) -> Result<()> {
    if keep_fraction > 0.0 && keep_fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("keep_fraction {keep_fraction} is outside (0, 1]")))
    }
}

// Higher confidence first; equal confidence keeps the earlier pixel.
fn by_confidence(a: &(f32, usize), b: &(f32, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Keeps, for every class, the `ceil(keep_fraction * n_c)` most confident
/// pixels and demotes the rest to [`IGNORE_INDEX`].
pub fn filter_by_class_confidence(labels: &LabelMap, conf: &ConfidenceMap, keep_fraction: f64) -> Result<LabelMap> {
    check_fraction(keep_fraction)?;
    if conf.data.len() != labels.data.len() {
        return Err(Error::Shape("label and confidence maps differ in size".into()));
    }
    let mut per_class: Vec<Vec<(f32, usize)>> = vec![Vec::new(); labels.num_classes];
    for (p, &v) in labels.data.iter().enumerate() {
        if v != IGNORE_INDEX {
            per_class[v as usize].push((conf.data[p], p));
        }
    }
    let mut out = vec![IGNORE_INDEX; labels.data.len()];
    for (c, mut pixels) in per_class.into_iter().enumerate() {
        let k = keep_count(keep_fraction, pixels.len());
        pixels.sort_by(by_confidence);
        for &(_, p) in &pixels[..k] {
            out[p] = c as u8;
        }
    }
    Ok(LabelMap { data: out, ..labels.clone() })
}

/// Dataset-scope variant: the per-class quota is computed over all maps
/// jointly. Ties are broken by map order, then pixel order.
pub fn filter_by_class_confidence_global(
    items: &[(LabelMap, ConfidenceMap)],
    keep_fraction: f64,
) -> Result<Vec<LabelMap>> {
    check_fraction(keep_fraction)?;
    let Some(first) = items.first() else { return Ok(Vec::new()) };
    let c = first.0.num_classes;
    let mut offsets = Vec::with_capacity(items.len());
    let mut total = 0;
    for (l, conf) in items {
        if conf.data.len() != l.data.len() || l.num_classes != c {
            return Err(Error::Shape("inconsistent label/confidence maps".into()));
        }
        offsets.push(total);
        total += l.data.len();
    }
    let mut per_class: Vec<Vec<(f32, usize)>> = vec![Vec::new(); c];
    for ((l, conf), &off) in items.iter().zip(&offsets) {
        for (p, &v) in l.data.iter().enumerate() {
            if v != IGNORE_INDEX {
                per_class[v as usize].push((conf.data[p], off + p));
            }
        }
    }
    let mut flat = vec![IGNORE_INDEX; total];
    for (cls, mut pixels) in per_class.into_iter().enumerate() {
        let k = keep_count(keep_fraction, pixels.len());
        pixels.sort_by(by_confidence);
        for &(_, p) in &pixels[..k] {
            flat[p] = cls as u8;
        }
    }
    Ok(items
        .iter()
        .zip(&offsets)
        .map(|((l, _), &off)| LabelMap { data: flat[off..off + l.data.len()].to_vec(), ..l.clone() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(h: usize, w: usize, c: usize, data: &[u8]) -> LabelMap {
        LabelMap::new(h, w, c, data.to_vec()).unwrap()
    }

    #[test]
    fn one_hot_matches_definition() {
        let oh = one_hot(&labels(2, 2, 3, &[0, 1, 2, 0]), 3).unwrap();
        assert_eq!(oh.channel(0), &[1., 0., 0., 1.]);
        assert_eq!(oh.channel(1), &[0., 1., 0., 0.]);
        assert_eq!(oh.channel(2), &[0., 0., 1., 0.]);
    }

    #[test]
    fn one_hot_ignore_is_zero_column() {
        let oh = one_hot(&labels(1, 3, 3, &[1, 255, 2]), 3).unwrap();
        for c in 0..3 {
            assert_eq!(oh.channel(c)[1], 0.0);
        }
    }

    #[test]
    fn one_hot_rejects_label_at_or_above_c() {
        let l = labels(1, 2, 5, &[0, 4]);
        let err = one_hot(&l, 3).unwrap_err();
        assert!(err.to_string().contains("label value 4"), "{err}");
        assert!(LabelMap::new(1, 1, 3, vec![3]).is_err());
    }

    #[test]
    fn argmax_uniform_ties_to_zero() {
        let p = ProbMap::new(4, 2, 2, vec![0.25; 16]).unwrap();
        let (l, c) = argmax_labels(&p);
        assert!(l.data().iter().all(|&v| v == 0));
        assert!(c.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn argmax_picks_dominant_channel() {
        // one pixel, channel 2 carries 0.9
        let p = ProbMap::new(3, 1, 1, vec![0.05, 0.05, 0.9]).unwrap();
        let (l, c) = argmax_labels(&p);
        assert_eq!(l.data(), &[2]);
        assert_eq!(c.data(), &[0.9]);
    }

    #[test]
    fn prob_map_rejects_unnormalized() {
        assert!(ProbMap::new(2, 1, 1, vec![0.5, 0.6]).is_err());
        assert!(ProbMap::new(2, 1, 1, vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn filter_identity_at_full_fraction() {
        let l = labels(2, 3, 3, &[0, 1, 2, 0, 255, 1]);
        let c = ConfidenceMap::new(2, 3, vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.4]).unwrap();
        assert_eq!(filter_by_class_confidence(&l, &c, 1.0).unwrap(), l);
    }

    #[test]
    fn filter_keeps_most_confident_third() {
        let l = labels(1, 3, 2, &[0, 0, 0]);
        let c = ConfidenceMap::new(1, 3, vec![0.5, 0.9, 0.4]).unwrap();
        let f = filter_by_class_confidence(&l, &c, 0.33).unwrap();
        assert_eq!(f.data(), &[255, 0, 255]);
    }

    #[test]
    fn filter_single_pixel_survives() {
        let l = labels(1, 4, 3, &[0, 1, 0, 0]);
        let c = ConfidenceMap::new(1, 4, vec![0.9, 0.1, 0.8, 0.7]).unwrap();
        let f = filter_by_class_confidence(&l, &c, 0.01).unwrap();
        assert_eq!(f.data()[1], 1);
    }

    #[test]
    fn filter_breaks_ties_row_major() {
        let l = labels(1, 4, 2, &[1, 1, 1, 1]);
        let c = ConfidenceMap::new(1, 4, vec![0.5; 4]).unwrap();
        let f = filter_by_class_confidence(&l, &c, 0.5).unwrap();
        assert_eq!(f.data(), &[1, 1, 255, 255]);
    }

    #[test]
    fn filter_rejects_bad_fraction() {
        let l = labels(1, 1, 2, &[0]);
        let c = ConfidenceMap::new(1, 1, vec![1.0]).unwrap();
        for f in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(filter_by_class_confidence(&l, &c, f).is_err());
        }
    }

    #[test]
    fn keep_count_absorbs_rounding() {
        assert_eq!(keep_count(0.1, 30), 3);
        assert_eq!(keep_count(0.33, 3), 1);
        assert_eq!(keep_count(0.33, 100), 33);
        assert_eq!(keep_count(0.33, 101), 34);
        assert_eq!(keep_count(0.5, 0), 0);
    }

    #[test]
    fn global_filter_pools_classes_across_maps() {
        let a = (labels(1, 2, 2, &[0, 0]), ConfidenceMap::new(1, 2, vec![0.9, 0.8]).unwrap());
        let b = (labels(1, 2, 2, &[0, 1]), ConfidenceMap::new(1, 2, vec![0.1, 0.2]).unwrap());
        let out = filter_by_class_confidence_global(&[a, b], 0.5).unwrap();
        assert_eq!(out[0].data(), &[0, 0]);
        assert_eq!(out[1].data(), &[255, 1]);
    }

    fn label_conf() -> impl Strategy<Value = (Vec<u8>, Vec<f32>)> {
        (1usize..64).prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![4 => 0u8..4, 1 => Just(IGNORE_INDEX)], n),
                prop::collection::vec(prop_oneof![0.0f32..1.0, Just(0.5f32)], n),
            )
        })
    }

    proptest! {
        #[test]
        fn argmax_inverts_one_hot((data, _) in label_conf()) {
            let l = labels(1, data.len(), 4, &data);
            let oh = one_hot(&l, 4).unwrap();
            let n = data.len();
            for (p, &v) in data.iter().enumerate() {
                if v == IGNORE_INDEX { continue; }
                let best = (0..4).max_by(|&a, &b| oh.data()[a * n + p].total_cmp(&oh.data()[b * n + p]).then(b.cmp(&a))).unwrap();
                prop_assert_eq!(best as u8, v);
            }
        }

        #[test]
        fn filter_is_monotone_and_class_preserving((data, conf) in label_conf(), f in 0.01f64..1.0, df in 0.0f64..0.5) {
            let n = data.len();
            let l = labels(1, n, 4, &data);
            let c = ConfidenceMap::new(1, n, conf).unwrap();
            let lo = filter_by_class_confidence(&l, &c, f).unwrap();
            let hi = filter_by_class_confidence(&l, &c, (f + df).min(1.0)).unwrap();
            for p in 0..n {
                if lo.data()[p] != IGNORE_INDEX {
                    prop_assert_eq!(lo.data()[p], data[p]);
                    prop_assert_eq!(hi.data()[p], data[p]);
                }
            }
            let before = l.histogram();
            let after = lo.histogram();
            for cls in 0..4 {
                prop_assert_eq!(after[cls], keep_count(f, before[cls]));
            }
        }
    }
}
