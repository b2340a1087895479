//! Oracles shared by the integration tests. Everything here is written from
//! the definitions, without calling the library code it is compared against.

#![allow(dead_code)]

use std::collections::BTreeSet;

use regen::autograd::{Tape, Var};
use regen::tensor::Tensor;

pub const IGNORE: u8 = 255;

/// Step halvings tried for an element whose stencil straddles a kink.
const REFINEMENTS: usize = 8;

/// Comparison of tape gradients against central differences.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    /// Worst relative error over elements whose difference stencil is smooth.
    pub worst: f64,
    /// Worst relative error over every element, kinks included.
    pub raw_worst: f64,
    /// Elements whose stencil `[x - h, x + h]` straddles a kink (ReLU, |.|).
    pub kinks: usize,
    /// Worst relative error of kink elements at the refined step.
    pub refined_worst: f64,
    /// Kink elements that disagree at the refined step, or never reach a
    /// smooth stencil.
    pub kink_violations: usize,
    pub elements: usize,
}

impl GradCheck {
    pub fn merge(&mut self, o: GradCheck) {
        self.worst = self.worst.max(o.worst);
        self.raw_worst = self.raw_worst.max(o.raw_worst);
        self.kinks += o.kinks;
        self.refined_worst = self.refined_worst.max(o.refined_worst);
        self.kink_violations += o.kink_violations;
        self.elements += o.elements;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst <= tol && self.kink_violations == 0
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks the tape gradient of `f` against central differences with step `h`
/// on every element of every input. An element over `tol` is re-measured at
/// `h / 2`: a smooth function gives nearly the same estimate, while a kink
/// inside the stencil moves it. For such elements the step keeps halving
/// until two successive estimates agree, and the gradient must match there.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, tol: f64, f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut out = GradCheck::default();
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let mut at = |d: f64| {
                xs[i].data_mut()[j] = orig + d;
                let v = eval(&xs);
                xs[i].data_mut()[j] = orig;
                v
            };
            let (up, down) = (at(h), at(-h));
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = rel(a, numeric);
            out.elements += 1;
            out.raw_worst = out.raw_worst.max(err);
            if err <= tol {
                out.worst = out.worst.max(err);
                continue;
            }
            // The stencil at `step` counts as smooth when halving the step
            // leaves the estimate unchanged.
            let (mut step, mut estimate) = (h, numeric);
            let mut resolved = None;
            for k in 0..REFINEMENTS {
                step /= 2.0;
                let finer = (at(step) - at(-step)) / (2.0 * step);
                if rel(estimate, finer) <= 1e-4 {
                    resolved = Some(estimate);
                    break;
                }
                if k == 0 {
                    out.kinks += 1;
                }
                estimate = finer;
            }
            if resolved == Some(numeric) {
                out.worst = out.worst.max(err);
                continue;
            }
            match resolved {
                Some(d) if rel(a, d) <= tol => out.refined_worst = out.refined_worst.max(rel(a, d)),
                _ => out.kink_violations += 1,
            }
        }
    }
    out
}

/// Pixels kept per class by sorting each class's pixels by confidence
/// (ties: earlier pixel first) and taking the first `ceil(percent/100 * n)`.
pub fn filter_oracle(labels: &[u8], conf: &[f32], num_classes: usize, percent: usize) -> Vec<u8> {
    let mut out = vec![IGNORE; labels.len()];
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&p| labels[p] as usize == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap().then(a.cmp(&b)));
        let keep = (percent * idx.len()).div_ceil(100);
        for &p in &idx[..keep] {
            out[p] = c as u8;
        }
    }
    out
}

/// mIoU from pixel sets: for each class, `|P_c ∩ G_c| / |P_c ∪ G_c|` where
/// pixels with ignored ground truth belong to neither set. Classes with an
/// empty union are left out; no defined class gives 0.
pub fn miou_oracle(pairs: &[(Vec<u8>, Vec<u8>)], num_classes: usize) -> f64 {
    let mut scores = Vec::new();
    for c in 0..num_classes as u8 {
        let mut pred = BTreeSet::new();
        let mut gt = BTreeSet::new();
        for (n, (p, g)) in pairs.iter().enumerate() {
            for k in 0..g.len() {
                if g[k] == IGNORE {
                    continue;
                }
                if p[k] == c {
                    pred.insert((n, k));
                }
                if g[k] == c {
                    gt.insert((n, k));
                }
            }
        }
        let union = pred.union(&gt).count();
        if union > 0 {
            scores.push(pred.intersection(&gt).count() as f64 / union as f64);
        }
    }
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}
