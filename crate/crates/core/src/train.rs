//! Offline IoU-network training: reference/test pairs cut from sequences,
//! backbone features cached once, fresh candidate boxes every epoch, MSE
//! on targets `2·IoU − 1`, ADAM with step decay.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BnMode, Tape, Var};
use crate::backbone::{FeatureExtractor, Features};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::imaging::{extract_patch, Image};
use crate::iounet::{generate_candidates, geometric_iou, Ctx, IouNet, IouVariant};
use crate::model::Models;
use crate::optim::{adam, AdamConfig, AdamState};
use crate::prpool::BoundingBox;
use crate::sequence::Sequence;
use crate::synth::{synth_sequence, training_specs};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Image pairs per batch.
    pub batch: usize,
    pub candidates: usize,
    pub min_iou: f64,
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub max_gap: usize,
    pub patch: usize,
    pub area_factor: f64,
    /// Test-patch center noise, fraction of the box side.
    pub center_jitter: f64,
    /// Test-patch log-scale noise.
    pub scale_jitter: f64,
    /// Per-channel gain noise (±).
    pub color_jitter: f64,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch: 64,
            candidates: 16,
            min_iou: 0.1,
            lr: 1e-3,
            decay: 0.2,
            decay_every: 15,
            seed: 0,
            train_pairs: 2048,
            val_pairs: 256,
            max_gap: 50,
            patch: 160,
            area_factor: 5.0,
            center_jitter: 0.75,
            scale_jitter: 0.15,
            color_jitter: 0.1,
            flip: true,
        }
    }
}

const KEYS: [&str; 17] = [
    "epochs",
    "batch",
    "candidates",
    "min_iou",
    "lr",
    "decay",
    "decay_every",
    "seed",
    "train_pairs",
    "val_pairs",
    "max_gap",
    "patch",
    "area_factor",
    "center_jitter",
    "scale_jitter",
    "color_jitter",
    "flip",
];

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&KEYS)?;
        let mut c = TrainConfig::default();
        kv.set("epochs", &mut c.epochs)?;
        kv.set("batch", &mut c.batch)?;
        kv.set("candidates", &mut c.candidates)?;
        kv.set("min_iou", &mut c.min_iou)?;
        kv.set("lr", &mut c.lr)?;
        kv.set("decay", &mut c.decay)?;
        kv.set("decay_every", &mut c.decay_every)?;
        kv.set("seed", &mut c.seed)?;
        kv.set("train_pairs", &mut c.train_pairs)?;
        kv.set("val_pairs", &mut c.val_pairs)?;
        kv.set("max_gap", &mut c.max_gap)?;
        kv.set("patch", &mut c.patch)?;
        kv.set("area_factor", &mut c.area_factor)?;
        kv.set("center_jitter", &mut c.center_jitter)?;
        kv.set("scale_jitter", &mut c.scale_jitter)?;
        kv.set("color_jitter", &mut c.color_jitter)?;
        kv.set("flip", &mut c.flip)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.candidates == 0 || self.decay_every == 0 {
            return Err(Error::invalid(
                "epochs, batch, candidates and decay_every must be positive",
            ));
        }
        if self.train_pairs == 0 || self.val_pairs == 0 {
            return Err(Error::invalid("need at least one train and one validation pair"));
        }
        if self.patch == 0 || self.patch % 16 != 0 {
            return Err(Error::invalid(format!(
                "patch {} must be a positive multiple of 16",
                self.patch
            )));
        }
        if !(self.lr > 0.0 && self.decay > 0.0 && self.area_factor > 0.0) {
            return Err(Error::invalid("lr, decay and area_factor must be positive"));
        }
        Ok(())
    }

    /// Step-decayed learning rate of `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// IoU on `[0, 1]` to the regression target on `[-1, 1]`.
pub fn iou_target(iou: f64) -> f64 {
    2.0 * iou - 1.0
}

/// Reference and test patches with their target boxes in patch pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub reference: Image,
    pub ref_box: BoundingBox,
    pub test: Image,
    pub test_box: BoundingBox,
}

/// Source of training pairs; real datasets plug in here.
pub trait PairSampler {
    fn sample_pair(&self, rng: &mut ChaCha8Rng) -> Result<Pair>;
}

/// Pairs from frames of the same sequence at most `max_gap` apart.
pub struct SequencePairs<'a> {
    pub sequences: &'a [Sequence],
    pub cfg: TrainConfig,
}

impl PairSampler for SequencePairs<'_> {
    fn sample_pair(&self, rng: &mut ChaCha8Rng) -> Result<Pair> {
        if self.sequences.is_empty() {
            return Err(Error::invalid("no sequences to sample pairs from"));
        }
        let seq = &self.sequences[rng.random_range(0..self.sequences.len())];
        let n = seq.len();
        let i = rng.random_range(0..n);
        let lo = i.saturating_sub(self.cfg.max_gap);
        let hi = (i + self.cfg.max_gap).min(n - 1);
        let j = rng.random_range(lo..=hi);
        let gt = seq.ground_truth();
        make_pair(&seq.frame(i)?, &gt[i], &seq.frame(j)?, &gt[j], &self.cfg, rng)
    }
}

/// Crop and augment one pair: the reference is centered on its target,
/// the test crop is centered on a jittered copy of its target.
pub fn make_pair<R: Rng>(
    ref_frame: &Image,
    ref_gt: &BoundingBox,
    test_frame: &Image,
    test_gt: &BoundingBox,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Pair> {
    let (reference, tf0) = extract_patch(ref_frame, ref_gt, cfg.area_factor, cfg.patch)?;
    let mut ref_box = tf0.box_to_patch(ref_gt);
    let center = Normal::new(0.0, cfg.center_jitter.max(1e-12)).map_err(|e| Error::invalid(e.to_string()))?;
    let scale = Normal::new(0.0, cfg.scale_jitter.max(1e-12)).map_err(|e| Error::invalid(e.to_string()))?;
    let s = scale.sample(rng).exp();
    let jittered = BoundingBox {
        cx: test_gt.cx + center.sample(rng) * test_gt.w,
        cy: test_gt.cy + center.sample(rng) * test_gt.h,
        w: test_gt.w * s,
        h: test_gt.h * s,
    };
    let (test, tf) = extract_patch(test_frame, &jittered, cfg.area_factor, cfg.patch)?;
    let mut test_box = tf.box_to_patch(test_gt);
    let (mut reference, mut test) = (reference, test);
    if cfg.flip && rng.random_bool(0.5) {
        reference = reference.flip_horizontal();
        test = test.flip_horizontal();
        ref_box.cx = cfg.patch as f64 - ref_box.cx;
        test_box.cx = cfg.patch as f64 - test_box.cx;
    }
    let mut gains = || {
        let c = cfg.color_jitter as f32;
        [
            1.0 + rng.random_range(-c..=c),
            1.0 + rng.random_range(-c..=c),
            1.0 + rng.random_range(-c..=c),
        ]
    };
    if cfg.color_jitter > 0.0 {
        reference = reference.color_scale(gains());
        test = test.color_scale(gains());
    }
    Ok(Pair {
        reference,
        ref_box,
        test,
        test_box,
    })
}

/// A pair after feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair<T> {
    pub ref_feats: Features<T>,
    pub ref_box: BoundingBox,
    pub test_feats: Features<T>,
    pub test_box: BoundingBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset<T> {
    pub train: Vec<FeaturePair<T>>,
    pub val: Vec<FeaturePair<T>>,
}

impl<T: Scalar> FeatureDataset<T> {
    /// Sample and featurize `cfg.train_pairs + cfg.val_pairs` pairs.
    pub fn build<E: FeatureExtractor<T>>(extractor: &E, sampler: &dyn PairSampler, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut all = Vec::with_capacity(cfg.train_pairs + cfg.val_pairs);
        for _ in 0..cfg.train_pairs + cfg.val_pairs {
            let p = sampler.sample_pair(&mut rng)?;
            all.push(FeaturePair {
                ref_feats: extractor.extract(&p.reference)?,
                ref_box: p.ref_box,
                test_feats: extractor.extract(&p.test)?,
                test_box: p.test_box,
            });
        }
        let val = all.split_off(cfg.train_pairs);
        Ok(FeatureDataset { train: all, val })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// MSE on the `[0, 1]` IoU scale.
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    /// Validation MSE of always predicting the mean training IoU.
    pub constant_val_mse: f64,
    pub mean_train_iou: f64,
}

impl TrainReport {
    pub fn final_val_mse(&self) -> f64 {
        self.history.last().map(|e| e.val_mse).unwrap_or(f64::NAN)
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for e in &self.history {
            s.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.train_mse, e.val_mse));
        }
        s
    }
}

fn stack<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shape = parts[0].shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        if p.shape() != shape.as_slice() {
            return Err(Error::invalid(format!(
                "cannot batch shapes {:?} and {:?}",
                shape,
                p.shape()
            )));
        }
        data.extend_from_slice(p.data());
    }
    let mut s = vec![parts.len()];
    s.extend(shape);
    Tensor::new(s, data)
}

fn boxes_tensor<T: Scalar>(boxes: &[BoundingBox]) -> Result<Tensor<T>> {
    Tensor::new(
        vec![boxes.len(), 4],
        boxes.iter().flat_map(|b| b.to_array().map(T::of)).collect(),
    )
}

/// Records predictions for `cands[k]` in pair `k`; returns the node.
fn batch_forward<T: Scalar>(
    net: &IouNet<T>,
    ctx: &mut Ctx<T>,
    pairs: &[&FeaturePair<T>],
    cands: &[Vec<BoundingBox>],
) -> Result<Var> {
    let blocks = |f: &dyn Fn(&FeaturePair<T>) -> &Features<T>| -> Result<[Tensor<T>; 2]> {
        let b3: Vec<&Tensor<T>> = pairs.iter().map(|p| &f(p).block3).collect();
        let b4: Vec<&Tensor<T>> = pairs.iter().map(|p| &f(p).block4).collect();
        Ok([stack(&b3)?, stack(&b4)?])
    };
    let [r3, r4] = blocks(&|p| &p.ref_feats)?;
    let [t3, t4] = blocks(&|p| &p.test_feats)?;
    let f0 = [ctx.tape.constant(r3), ctx.tape.constant(r4)];
    let f1 = [ctx.tape.constant(t3), ctx.tape.constant(t4)];
    let b0: Vec<BoundingBox> = pairs.iter().map(|p| p.ref_box).collect();
    let b0 = ctx.tape.constant(boxes_tensor(&b0)?);
    let refs = net.reference_on(ctx, &f0, b0)?;
    let maps = net.test_maps_on(ctx, &f1)?;
    let flat: Vec<BoundingBox> = cands.iter().flatten().copied().collect();
    let idx: Vec<usize> = cands
        .iter()
        .enumerate()
        .flat_map(|(k, c)| std::iter::repeat_n(k, c.len()))
        .collect();
    let bv = ctx.tape.constant(boxes_tensor(&flat)?);
    net.head_on(ctx, &refs, &maps, bv, &Rc::new(idx))
}

fn targets(pairs: &[&FeaturePair<impl Scalar>], cands: &[Vec<BoundingBox>]) -> Vec<f64> {
    pairs
        .iter()
        .zip(cands)
        .flat_map(|(p, c)| c.iter().map(move |b| iou_target(geometric_iou(b, &p.test_box))))
        .collect()
}

fn draw_candidates<T: Scalar>(
    pairs: &[FeaturePair<T>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<BoundingBox>>> {
    pairs
        .iter()
        .map(|p| generate_candidates(&p.test_box, cfg.candidates, cfg.min_iou, rng))
        .collect()
}

/// Mean squared error (`[0, 1]` scale) of `net` in eval mode.
pub fn evaluate<T: Scalar>(
    net: &IouNet<T>,
    pairs: &[FeaturePair<T>],
    cands: &[Vec<BoundingBox>],
    chunk: usize,
) -> Result<f64> {
    let mut se = 0.0;
    let mut count = 0usize;
    for (ps, cs) in pairs.chunks(chunk.max(1)).zip(cands.chunks(chunk.max(1))) {
        let refs: Vec<&FeaturePair<T>> = ps.iter().collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = net.params().iter().map(|p| tape.constant(p.clone())).collect();
        let mut stats = net.stats().to_vec();
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            stats: &mut stats,
            mode: BnMode::Eval,
        };
        let y = batch_forward(net, &mut ctx, &refs, cs)?;
        let pred = tape.value(y).to_f64_vec();
        for (p, t) in pred.iter().zip(targets(&refs, cs)) {
            se += (p - t).powi(2) / 4.0;
            count += 1;
        }
    }
    Ok(se / count.max(1) as f64)
}

/// Train `net` in place. `progress` sees every finished epoch.
pub fn train_offline<T: Scalar>(
    net: &mut IouNet<T>,
    data: &FeatureDataset<T>,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("empty training or validation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let val_cands = draw_candidates(&data.val, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)))?;
    let mut adam_state: Vec<AdamState<T>> = net.params().iter().map(|p| AdamState::new(p.len())).collect();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let acfg = AdamConfig {
            lr,
            ..Default::default()
        };
        order.shuffle(&mut rng);
        let (mut se, mut n) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let pairs: Vec<&FeaturePair<T>> = chunk.iter().map(|&i| &data.train[i]).collect();
            let cands: Vec<Vec<BoundingBox>> = pairs
                .iter()
                .map(|p| generate_candidates(&p.test_box, cfg.candidates, cfg.min_iou, &mut rng))
                .collect::<Result<_>>()?;
            let tgt = targets(&pairs, &cands);
            if epoch == 0 {
                iou_sum += tgt.iter().map(|t| (t + 1.0) / 2.0).sum::<f64>();
                iou_n += tgt.len();
            }
            let context = || format!("epoch {epoch}, batch {b}");
            let mut tape = Tape::new();
            let vars: Vec<Var> = net.params().iter().map(|p| tape.leaf(p.clone())).collect();
            let mut stats = net.stats().to_vec();
            let step = (|| -> Result<(f64, Vec<Tensor<T>>)> {
                let mut ctx = Ctx {
                    tape: &mut tape,
                    vars: &vars,
                    stats: &mut stats,
                    mode: BnMode::Train,
                };
                let y = batch_forward(net, &mut ctx, &pairs, &cands)?;
                let m = tgt.len();
                let t = tape.constant(Tensor::new(vec![m], tgt.iter().map(|&v| T::of(v)).collect())?);
                let d = tape.sub(y, t)?;
                let sq = tape.dot(d, d)?;
                let loss = tape.scale(sq, T::of(1.0 / m as f64))?;
                let lv = tape.value(loss).item().f64();
                Ok((lv, tape.backprop(loss, &vars)?))
            })();
            let (lv, grads) = match step {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { context: context() }),
                Err(e) => return Err(e),
            };
            if !lv.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { context: context() });
            }
            for ((p, g), st) in net.params_mut().iter_mut().zip(&grads).zip(adam_state.iter_mut()) {
                adam(p.data_mut(), g.data(), st, &acfg)?;
            }
            net.stats_mut().clone_from_slice(&stats);
            se += lv / 4.0 * tgt.len() as f64;
            n += tgt.len();
        }
        let val_mse = evaluate(net, &data.val, &val_cands, cfg.batch)?;
        let stats = EpochStats {
            epoch,
            lr,
            train_mse: se / n as f64,
            val_mse,
        };
        progress(&stats);
        history.push(stats);
    }
    let mean = iou_sum / iou_n.max(1) as f64;
    let (mut se, mut n) = (0.0, 0usize);
    for (p, cs) in data.val.iter().zip(&val_cands) {
        for c in cs {
            se += (geometric_iou(c, &p.test_box) - mean).powi(2);
            n += 1;
        }
    }
    Ok(TrainReport {
        history,
        constant_val_mse: se / n.max(1) as f64,
        mean_train_iou: mean,
    })
}

/// Synthetic training sequences: every category, each with neighbouring
/// look-alikes of the target.
pub fn training_sequences(per_category: usize, n_frames: usize, seed: u64) -> Result<Vec<Sequence>> {
    training_specs(per_category, n_frames, seed)
        .into_iter()
        .map(|(name, spec, s)| synth_sequence(&spec, s, &name))
        .collect()
}

/// Seeded desk-scale models with the IoU network trained on `sequences`.
pub fn train_desk<T: Scalar>(
    variant: IouVariant,
    sequences: &[Sequence],
    cfg: &TrainConfig,
    model_seed: u64,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<(Models<T>, TrainReport)> {
    let mut models = Models::<T>::desk(variant, model_seed)?;
    let sampler = SequencePairs {
        sequences,
        cfg: cfg.clone(),
    };
    let data = FeatureDataset::build(&models.backbone, &sampler, cfg)?;
    let report = train_offline(&mut models.iou, &data, cfg, progress)?;
    Ok((models, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iounet::{IouNetConfig, IouVariant};

    #[test]
    fn lr_schedule_steps() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(14), 1e-3);
        assert!((c.lr_at(15) - 2e-4).abs() < 1e-18);
        assert!((c.lr_at(29) - 2e-4).abs() < 1e-18);
        assert!((c.lr_at(30) - 4e-5).abs() < 1e-18);
        assert!((c.lr_at(39) - 4e-5).abs() < 1e-18);
    }

    #[test]
    fn target_normalization() {
        assert_eq!(iou_target(0.5), 0.0);
        assert_eq!(iou_target(1.0), 1.0);
        assert_eq!(iou_target(0.0), -1.0);
    }

    #[test]
    fn config_from_text() {
        let kv = KeyValues::parse("epochs = 3\nlr = 0.01\nflip = false\n", Path::new("t.cfg")).unwrap();
        let c = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!((c.epochs, c.lr, c.flip), (3, 0.01, false));
        let kv = KeyValues::parse("epoch = 3\n", Path::new("t.cfg")).unwrap();
        assert!(TrainConfig::from_kv(&kv).is_err());
        let kv = KeyValues::parse("patch = 100\n", Path::new("t.cfg")).unwrap();
        assert!(TrainConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn pair_boxes_land_on_target() {
        let frame = Image::filled(120, 100, [0.2, 0.2, 0.2]);
        let gt = BoundingBox::new(60.0, 50.0, 16.0, 16.0).unwrap();
        let cfg = TrainConfig {
            patch: 64,
            flip: false,
            center_jitter: 0.0,
            scale_jitter: 0.0,
            ..Default::default()
        };
        let p = make_pair(&frame, &gt, &frame, &gt, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((p.ref_box.cx - 32.0).abs() < 1e-9 && (p.ref_box.w - 12.8).abs() < 1e-9);
        assert!((p.test_box.cx - 32.0).abs() < 1e-6);
    }

    #[derive(Clone)]
    struct Fixed(Pair);

    impl PairSampler for Fixed {
        fn sample_pair(&self, _: &mut ChaCha8Rng) -> Result<Pair> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn tiny_training_reduces_loss() {
        let mut img = Image::filled(32, 32, [0.1, 0.1, 0.1]);
        for y in 10..22 {
            for x in 12..24 {
                img.set_pixel(x, y, [0.9, 0.3, 0.1]);
            }
        }
        let b = BoundingBox::from_corners(12.0, 10.0, 24.0, 22.0).unwrap();
        let pair = Pair {
            reference: img.clone(),
            ref_box: b,
            test: img,
            test_box: b,
        };
        let cfg = TrainConfig {
            epochs: 20,
            batch: 2,
            train_pairs: 2,
            val_pairs: 1,
            lr: 2e-3,
            patch: 32,
            ..Default::default()
        };
        let bb = crate::backbone::Backbone::<f64>::seeded([4, 4, 4, 4], 0).unwrap();
        let data = FeatureDataset::build(&bb, &Fixed(pair), &cfg).unwrap();
        let mut ncfg = IouNetConfig::new(IouVariant::Modulation, (4, 4));
        ncfg.d_z = 4;
        ncfg.hidden = [16, 16];
        let mut net = IouNet::new(ncfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut seen = 0;
        let r = train_offline(&mut net, &data, &cfg, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 20);
        let late = r.history[15..].iter().map(|e| e.train_mse).sum::<f64>() / 5.0;
        assert!(late < r.history[0].train_mse, "{:?}", r.history);
        assert!(r.history_csv().starts_with("epoch,train_mse,val_mse\n0,"));
        assert!(r.constant_val_mse.is_finite());
        net.param_mut("iou.out.b").unwrap().data_mut()[0] = 1e300;
        let e = train_offline(&mut net, &data, &cfg, &mut |_| {}).unwrap_err();
        assert!(
            matches!(&e, Error::NonFiniteLoss { context } if context == "epoch 0, batch 0"),
            "{e}"
        );
    }
}
