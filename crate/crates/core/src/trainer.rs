//! Training algorithms: source pretraining, self-training warm-up,
//! translation pretraining and joint training. Everything here works on
//! in-memory networks and data; file handling lives in [`crate::pipeline`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::{FilterScope, TrainSchedule};
use crate::error::{Error, Result};
use crate::eval::{iou, ConfusionMatrix, IoUReport, UndefinedPolicy};
use crate::labelops::{argmax_labels, filter_by_class_confidence, filter_by_class_confidence_global, one_hot, ConfidenceMap, LabelMap, ProbMap};
use crate::losses::{
    cross_entropy_logits, feature_matching_from_outputs, hinge_d_loss, hinge_g_loss, kld_loss, perceptual_loss,
    segmentation_loss, translation_loss, LossWeights, SegmentationComponents, TranslationComponents,
};
use crate::metrics::Row;
use crate::nets::{
    seg_forward, standard_normal, BnMode, MultiScalePatchDiscriminator, PerceptualExtractor, SegNet, TranslationGenerator,
};
use crate::optim::{poly_lr, Adam, Sgd};
use crate::params::BindMode;
use crate::synthdata::ImageTensor;
use crate::tensor::Tensor;

/// Images per forward pass when only predictions are needed.
const INFERENCE_BATCH: usize = 16;

/// The translation network: generator (with its latent encoder) and discriminator.
#[derive(Clone, Debug)]
pub struct Translator {
    pub gen: TranslationGenerator<f32>,
    pub disc: MultiScalePatchDiscriminator<f32>,
}

/// Stacks images into a `[N, 3, H, W]` tensor.
pub fn image_batch(images: &[&ImageTensor]) -> Tensor<f32> {
    Tensor::concat(&images.iter().map(|im| im.to_tensor()).collect::<Vec<_>>())
}

/// Stacks hard one-hot encodings into a `[N, C, H, W]` tensor.
pub fn onehot_batch(labels: &[&LabelMap], num_classes: usize) -> Result<Tensor<f32>> {
    let items = labels.iter().map(|l| Ok(one_hot(l, num_classes)?.to_tensor())).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat(&items))
}

fn label_batch(labels: &[&LabelMap]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.data().iter().copied()).collect()
}

/// Arg-max labels and confidences of `net` (running-statistics mode).
pub fn predict(net: &SegNet<f32>, images: &[ImageTensor]) -> Result<Vec<(LabelMap, ConfidenceMap)>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFERENCE_BATCH) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let (probs, _) = seg_forward(net, &image_batch(&refs))?;
        for i in 0..chunk.len() {
            out.push(argmax_labels(&ProbMap::from_batch(&probs, i)?));
        }
    }
    Ok(out)
}

/// Confidence-filtered copies of `predictions`, per image or over the whole set.
pub fn filter_predictions(predictions: &[(LabelMap, ConfidenceMap)], keep: f64, scope: FilterScope) -> Result<Vec<LabelMap>> {
    match scope {
        FilterScope::Image => predictions.iter().map(|(l, c)| filter_by_class_confidence(l, c, keep)).collect(),
        FilterScope::Dataset => filter_by_class_confidence_global(predictions, keep),
    }
}

/// Scores segmentation networks against a labelled evaluation split.
pub struct Evaluator<'a> {
    pub pairs: &'a [(ImageTensor, LabelMap)],
    pub subset: Option<&'a [usize]>,
    pub policy: UndefinedPolicy,
}

impl Evaluator<'_> {
    pub fn run(&self, net: &SegNet<f32>) -> Result<IoUReport> {
        let images: Vec<ImageTensor> = self.pairs.iter().map(|(im, _)| im.clone()).collect();
        let preds = predict(net, &images)?;
        let mut cm = ConfusionMatrix::new(net.num_classes());
        for ((pred, _), (_, gt)) in preds.iter().zip(self.pairs) {
            cm.accumulate(pred, gt)?;
        }
        iou(&cm, self.subset, self.policy)
    }
}

/// Cycles through a seeded permutation of `0..n`, reshuffling after each pass.
pub struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler { order: (0..n).collect(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn ensure_finite(v: f64, phase: &str, iteration: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { phase: phase.to_string(), iteration })
    }
}

fn should_log(i: usize, total: usize, every: usize) -> bool {
    i % every == 0 || i == total
}

/// Supervised cross-entropy training of `net` on labelled source pairs,
/// with batch statistics and poly-decayed SGD.
pub fn pretrain_source(
    net: &mut SegNet<f32>,
    pairs: &[(ImageTensor, LabelMap)],
    sched: &TrainSchedule,
    seed: u64,
    log: &mut dyn FnMut(Row),
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("the source split is empty".into()));
    }
    let per_epoch = pairs.len().div_ceil(sched.pretrain_batch);
    let total = sched.pretrain_epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::new(sched.seg_momentum, sched.seg_weight_decay);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut it = 0;
    for _ in 0..sched.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(sched.pretrain_batch) {
            let lr = poly_lr(sched.pretrain_lr, it, total, sched.poly_power);
            it += 1;
            let images: Vec<&ImageTensor> = chunk.iter().map(|&k| &pairs[k].0).collect();
            let labels: Vec<&LabelMap> = chunk.iter().map(|&k| &pairs[k].1).collect();
            let tape = Tape::new();
            let p = net.bind(&tape, BindMode::Train);
            let out = net.forward(&p, tape.constant(image_batch(&images)), BnMode::Train)?;
            let ce = cross_entropy_logits(out.logits, &label_batch(&labels))?;
            let value = ce.loss.item() as f64;
            ensure_finite(value, "pretrain", it)?;
            let grads = p.grads(&tape.backward(ce.loss));
            sgd.step(net.params_mut(), &grads, lr);
            net.update_bn_stats(&out.bn_stats, sched.bn_momentum);
            if should_log(it, total, sched.log_every) {
                log(Row::new("pretrain", it).lr(lr).set("ce", value).set("loss_total", value));
            }
        }
    }
    Ok(())
}

/// Self-training rounds on the target split. Each round labels every target
/// image with the round-start model, keeps the most confident pixels per
/// class, and trains the unfrozen layers on the result. `after_round` sees
/// the round number, the update count so far and the model.
pub fn warmup_selftrain(
    student: &mut SegNet<f32>,
    targets: &[ImageTensor],
    sched: &TrainSchedule,
    seed: u64,
    log: &mut dyn FnMut(Row),
    after_round: &mut dyn FnMut(usize, usize, &SegNet<f32>) -> Result<()>,
) -> Result<()> {
    if targets.is_empty() && sched.warmup_rounds > 0 {
        return Err(Error::InvalidArgument("the target split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut it = 0;
    for round in 1..=sched.warmup_rounds {
        let preds = predict(student, targets)?;
        let filtered = filter_predictions(&preds, sched.filter_keep_fraction, sched.filter_scope)?;
        let kept: usize = filtered.iter().map(|l| l.data().len() - l.count_ignored()).sum();
        let all: usize = filtered.iter().map(|l| l.data().len()).sum();
        let mut sgd = Sgd::new(sched.seg_momentum, sched.seg_weight_decay);
        let mut order: Vec<usize> = (0..targets.len()).collect();
        for _ in 0..sched.warmup_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(sched.warmup_batch) {
                it += 1;
                let images: Vec<&ImageTensor> = chunk.iter().map(|&k| &targets[k]).collect();
                let labels: Vec<&LabelMap> = chunk.iter().map(|&k| &filtered[k]).collect();
                let tape = Tape::new();
                let p = student.bind(&tape, BindMode::Train);
                let out = student.forward(&p, tape.constant(image_batch(&images)), BnMode::Eval)?;
                let ce = cross_entropy_logits(out.logits, &label_batch(&labels))?;
                let value = ce.loss.item() as f64;
                ensure_finite(value, "warmup", it)?;
                let grads = p.grads(&tape.backward(ce.loss));
                sgd.step(student.params_mut(), &grads, sched.warmup_lr);
                if it % sched.log_every == 0 {
                    log(Row::new("warmup", it).lr(sched.warmup_lr).set("ce", value).set("loss_total", value));
                }
            }
        }
        log(Row::new("warmup", it).set("kept_fraction", kept as f64 / all.max(1) as f64));
        after_round(round, it, student)?;
    }
    Ok(())
}

/// Fixed inputs of the translation objective.
pub struct TranslationContext<'a> {
    pub teacher: &'a SegNet<f32>,
    pub phi: &'a PerceptualExtractor<f32>,
    pub weights: &'a LossWeights,
    pub num_classes: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TranslationStats {
    pub parts: [Option<f64>; 5],
    pub total: f64,
    pub d_hinge: Option<f64>,
}

impl TranslationStats {
    fn row(&self, phase: &str, it: usize, lr: f64) -> Row {
        let cols = ["t_perceptual", "t_semantic", "t_kld", "t_feature_matching", "t_adversarial"];
        let mut row = Row::new(phase, it).lr(lr).set("loss_total", self.total).set_opt("d_hinge", self.d_hinge);
        for (c, v) in cols.into_iter().zip(self.parts) {
            row = row.set_opt(c, v);
        }
        row
    }
}

/// One generator update followed by one discriminator update on the same
/// generated batch. `labels` are the teacher's arg-max maps of `images`.
pub fn translation_step(
    tr: &mut Translator,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    ctx: &TranslationContext<'_>,
    images: &[&ImageTensor],
    labels: &[&LabelMap],
    rng: &mut ChaCha8Rng,
    phase: &str,
    iteration: usize,
) -> Result<TranslationStats> {
    let w = ctx.weights.translation();
    let x = image_batch(images);
    let y = onehot_batch(labels, ctx.num_classes)?;
    let flat = label_batch(labels);
    let eps: Tensor<f32> = standard_normal(rng, images.len(), tr.gen.latent_dim());
    let use_disc = w.feature_matching > 0.0 || w.adversarial > 0.0;

    let (parts, total, generated) = {
        let tape = Tape::new();
        let pg = tr.gen.bind(&tape, BindMode::Train);
        let pd = tr.disc.bind(&tape, BindMode::Frozen);
        let pt = ctx.teacher.bind(&tape, BindMode::Frozen);
        let pphi = ctx.phi.bind(&tape);
        let real = tape.constant(x.clone());
        let lat = tr.gen.encode_latent(&pg, real)?;
        let fake = tr.gen.translate(&pg, tape.constant(y), lat.sample(&eps))?;

        let mut terms = TranslationComponents::default();
        if w.perceptual > 0.0 {
            terms.perceptual = Some(perceptual_loss(ctx.phi, &pphi, fake, real, &ctx.weights.perceptual_layers)?);
        }
        if w.semantic > 0.0 {
            let logits = ctx.teacher.forward(&pt, fake, BnMode::Eval)?.logits;
            terms.semantic = Some(cross_entropy_logits(logits, &flat)?.loss);
        }
        if w.kld > 0.0 {
            terms.kld = Some(kld_loss(lat.mu, lat.logvar)?);
        }
        if use_disc {
            let d_fake = tr.disc.discriminate(&pd, fake)?;
            if w.feature_matching > 0.0 {
                let d_real = tr.disc.discriminate(&pd, real)?;
                terms.feature_matching = Some(feature_matching_from_outputs(&d_real, &d_fake)?);
            }
            if w.adversarial > 0.0 {
                let logits: Vec<_> = d_fake.iter().map(|s| s.logits).collect();
                terms.adversarial = Some(hinge_g_loss(&logits));
            }
        }
        let combined = translation_loss(&terms, &w)?;
        let total = combined.total.item() as f64;
        ensure_finite(total, phase, iteration)?;
        let grads = pg.grads(&tape.backward(combined.total));
        opt_g.step(tr.gen.params_mut(), &grads);
        (combined.parts, total, (*fake.value()).clone())
    };

    let mut d_hinge = None;
    if use_disc {
        let tape = Tape::new();
        let pd = tr.disc.bind(&tape, BindMode::Train);
        let real = tr.disc.discriminate(&pd, tape.constant(x))?;
        let fake = tr.disc.discriminate(&pd, tape.constant(generated))?;
        let rl: Vec<_> = real.iter().map(|s| s.logits).collect();
        let fl: Vec<_> = fake.iter().map(|s| s.logits).collect();
        let loss = hinge_d_loss(&rl, &fl);
        let v = loss.item() as f64;
        ensure_finite(v, phase, iteration)?;
        let grads = pd.grads(&tape.backward(loss));
        opt_d.step(tr.disc.params_mut(), &grads);
        d_hinge = Some(v);
    }
    Ok(TranslationStats { parts, total, d_hinge })
}

/// Mean cross-entropy of the teacher on images the generator renders from
/// the teacher's own labels, with the latent at the prior mean.
pub fn semantic_probe(tr: &Translator, ctx: &TranslationContext<'_>, labels: &[LabelMap]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&LabelMap> = labels.iter().collect();
    let tape = Tape::new();
    let pg = tr.gen.bind(&tape, BindMode::Frozen);
    let pt = ctx.teacher.bind(&tape, BindMode::Frozen);
    let z = tape.constant(Tensor::zeros(&[labels.len(), tr.gen.latent_dim()]));
    let img = tr.gen.translate(&pg, tape.constant(onehot_batch(&refs, ctx.num_classes)?), z)?;
    let logits = ctx.teacher.forward(&pt, img, BnMode::Eval)?.logits;
    Ok(cross_entropy_logits(logits, &label_batch(&refs))?.loss.item() as f64)
}

/// Teacher outputs on the target split, computed once: the teacher never changes.
pub struct TeacherLabels {
    pub raw: Vec<LabelMap>,
    pub filtered: Vec<LabelMap>,
}

impl TeacherLabels {
    pub fn compute(teacher: &SegNet<f32>, images: &[ImageTensor], sched: &TrainSchedule) -> Result<Self> {
        let preds = predict(teacher, images)?;
        let filtered = filter_predictions(&preds, sched.filter_keep_fraction, sched.filter_scope)?;
        Ok(TeacherLabels { raw: preds.into_iter().map(|(l, _)| l).collect(), filtered })
    }
}

/// Generator and discriminator training against the fixed teacher.
/// `on_iteration` runs after every update with the 1-based iteration count.
pub fn train_translation(
    tr: &mut Translator,
    ctx: &TranslationContext<'_>,
    targets: &[ImageTensor],
    teacher_labels: &[LabelMap],
    sched: &TrainSchedule,
    seed: u64,
    log: &mut dyn FnMut(Row),
    on_iteration: &mut dyn FnMut(usize, &Translator) -> Result<()>,
) -> Result<()> {
    if targets.is_empty() && sched.iter_tr > 0 {
        return Err(Error::InvalidArgument("the target split is empty".into()));
    }
    let mut sampler = Sampler::new(targets.len(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A7A);
    let mut opt_g = Adam::new(sched.gen_lr, sched.adam_beta1, sched.adam_beta2);
    let mut opt_d = Adam::new(sched.disc_lr, sched.adam_beta1, sched.adam_beta2);
    for it in 1..=sched.iter_tr {
        let batch = sampler.next_batch(sched.batch_translation);
        let images: Vec<&ImageTensor> = batch.iter().map(|&k| &targets[k]).collect();
        let labels: Vec<&LabelMap> = batch.iter().map(|&k| &teacher_labels[k]).collect();
        let stats = translation_step(tr, &mut opt_g, &mut opt_d, ctx, &images, &labels, &mut rng, "translation", it)?;
        if should_log(it, sched.iter_tr, sched.log_every) {
            log(stats.row("translation", it, sched.gen_lr));
        }
        on_iteration(it, tr)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct SegmentationStats {
    pub parts: [Option<f64>; 5],
    pub total: f64,
}

/// One student update on the combined segmentation objective with the
/// translation network frozen and its latent at the prior mean.
#[allow(clippy::too_many_arguments)]
pub fn segmentation_step(
    student: &mut SegNet<f32>,
    sgd: &mut Sgd,
    lr: f64,
    tr: &Translator,
    ctx: &TranslationContext<'_>,
    images: &[&ImageTensor],
    teacher_labels: &[&LabelMap],
    filtered_labels: &[&LabelMap],
    hard_onehot: bool,
    iteration: usize,
) -> Result<SegmentationStats> {
    let w = ctx.weights.segmentation();
    let n = images.len();
    let tape = Tape::new();
    let ps = student.bind(&tape, BindMode::Train);
    let pg = tr.gen.bind(&tape, BindMode::Frozen);
    let pd = tr.disc.bind(&tape, BindMode::Frozen);
    let pphi = ctx.phi.bind(&tape);
    let real = tape.constant(image_batch(images));
    let z = tape.constant(Tensor::zeros(&[n, tr.gen.latent_dim()]));
    let logits = student.forward(&ps, real, BnMode::Eval)?.logits;

    let mut terms = SegmentationComponents::default();
    if w.target > 0.0 {
        terms.target = Some(cross_entropy_logits(logits, &label_batch(filtered_labels))?.loss);
    }
    if w.perceptual > 0.0 || w.feature_matching > 0.0 {
        let probs = logits.softmax_channels();
        let cond = if hard_onehot { probs.straight_through_onehot() } else { probs };
        let regenerated = tr.gen.translate(&pg, cond, z)?;
        if w.perceptual > 0.0 {
            terms.perceptual = Some(perceptual_loss(ctx.phi, &pphi, regenerated, real, &ctx.weights.perceptual_layers)?);
        }
        if w.feature_matching > 0.0 {
            let d_real = tr.disc.discriminate(&pd, real)?;
            let d_fake = tr.disc.discriminate(&pd, regenerated)?;
            terms.feature_matching = Some(feature_matching_from_outputs(&d_real, &d_fake)?);
        }
    }
    if w.generated > 0.0 {
        let y = tape.constant(onehot_batch(teacher_labels, ctx.num_classes)?);
        let generated = tr.gen.translate(&pg, y, z)?.detach();
        let gen_logits = student.forward(&ps, generated, BnMode::Eval)?.logits;
        terms.generated = Some(cross_entropy_logits(gen_logits, &label_batch(teacher_labels))?.loss);
    }
    if w.kld > 0.0 {
        let lat = tr.gen.encode_latent(&pg, real)?;
        terms.kld = Some(kld_loss(lat.mu, lat.logvar)?);
    }
    let combined = segmentation_loss(&terms, &w)?;
    let total = combined.total.item() as f64;
    ensure_finite(total, "joint", iteration)?;
    let grads = ps.grads(&tape.backward(combined.total));
    sgd.step(student.params_mut(), &grads, lr);
    Ok(SegmentationStats { parts: combined.parts, total })
}

/// Joint phase: per iteration one translation update, then one student
/// update with poly-decayed SGD. The teacher is read-only throughout.
#[allow(clippy::too_many_arguments)]
pub fn train_joint(
    tr: &mut Translator,
    student: &mut SegNet<f32>,
    ctx: &TranslationContext<'_>,
    targets: &[ImageTensor],
    teacher: &TeacherLabels,
    sched: &TrainSchedule,
    seed: u64,
    log: &mut dyn FnMut(Row),
    on_iteration: &mut dyn FnMut(usize, &Translator, &SegNet<f32>) -> Result<()>,
) -> Result<()> {
    if targets.is_empty() && sched.iter_joint > 0 {
        return Err(Error::InvalidArgument("the target split is empty".into()));
    }
    let mut sampler = Sampler::new(targets.len(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A7A);
    let mut opt_g = Adam::new(sched.gen_lr, sched.adam_beta1, sched.adam_beta2);
    let mut opt_d = Adam::new(sched.disc_lr, sched.adam_beta1, sched.adam_beta2);
    let mut sgd = Sgd::new(sched.seg_momentum, sched.seg_weight_decay);
    for it in 1..=sched.iter_joint {
        let batch = sampler.next_batch(sched.batch_joint);
        let images: Vec<&ImageTensor> = batch.iter().map(|&k| &targets[k]).collect();
        let raw: Vec<&LabelMap> = batch.iter().map(|&k| &teacher.raw[k]).collect();
        let filtered: Vec<&LabelMap> = batch.iter().map(|&k| &teacher.filtered[k]).collect();
        let nt = sched.batch_translation.min(batch.len());
        let t_stats =
            translation_step(tr, &mut opt_g, &mut opt_d, ctx, &images[..nt], &raw[..nt], &mut rng, "joint", it)?;
        let lr = poly_lr(sched.seg_lr, it - 1, sched.iter_joint, sched.poly_power);
        let s = segmentation_step(student, &mut sgd, lr, tr, ctx, &images, &raw, &filtered, sched.hard_onehot, it)?;
        if should_log(it, sched.iter_joint, sched.log_every) {
            let cols = ["s_target", "s_generated", "s_perceptual", "s_feature_matching", "s_kld"];
            let mut row = t_stats.row("joint", it, lr).set("loss_total", s.total);
            for (c, v) in cols.into_iter().zip(s.parts) {
                row = row.set_opt(c, v);
            }
            log(row);
        }
        on_iteration(it, tr, student)?;
    }
    Ok(())
}
