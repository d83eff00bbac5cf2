//! Online tracking: classifier localization, IoU-guided box refinement and
//! the periodic model update, plus the ablation variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{FeatureExtractor, Features};
use crate::classifier::{
    augment_first_frame, classify, find_peak, make_label, train_initial, train_update, ClassifierConfig,
    ClassifierWeights, Optimizer, Peak, SampleMemory,
};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::imaging::{crop_side, extract_patch, extract_square, Image, PatchTransform};
use crate::iounet::{refine_boxes, ModulationVector};
use crate::model::Models;
use crate::optim::OptimizerRun;
use crate::prpool::BoundingBox;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackerMode {
    Full,
    /// Classifier-only search over a few scales, fixed aspect ratio.
    MultiScale,
    /// IoU refinement around the previous box, no classifier.
    NoClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub patch: usize,
    pub area_factor: f64,
    pub proposals: usize,
    pub ascent_steps: usize,
    pub step_len: f64,
    pub top_k: usize,
    pub update_interval: usize,
    pub lost_threshold: f64,
    pub hn_boost: f64,
    /// Secondary peak must exceed this fraction of the primary.
    pub hn_ratio: f64,
    /// Secondary peak must lie further than this fraction of the map side.
    pub hn_radius: f64,
    pub hard_negatives: bool,
    /// Uniform proposal noise: centers ±noise·(w, h), log-size ±noise.
    pub proposal_noise: f64,
    pub no_classifier_area: f64,
    pub scale_ratio: f64,
    pub n_scales: usize,
    pub mode: TrackerMode,
    pub optimizer: Optimizer,
    pub classifier: ClassifierConfig,
    /// Feature block the classifier reads (0 = stride 8, 1 = stride 16).
    pub classifier_block: usize,
    /// Smallest box side kept, frame pixels.
    pub min_side: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            patch: 288,
            area_factor: 5.0,
            proposals: 10,
            ascent_steps: 5,
            step_len: 1.0,
            top_k: 3,
            update_interval: 10,
            lost_threshold: 0.25,
            hn_boost: 2.0,
            hn_ratio: 0.5,
            hn_radius: 0.2,
            hard_negatives: true,
            proposal_noise: 0.1,
            no_classifier_area: 6.0,
            scale_ratio: 1.02,
            n_scales: 5,
            mode: TrackerMode::Full,
            optimizer: Optimizer::GaussNewton,
            classifier: ClassifierConfig::default(),
            classifier_block: 1,
            min_side: 4.0,
        }
    }
}

/// Learning rate and momentum of the gradient-descent ablations.
pub const GD_LR: f64 = 1e-3;
pub const GD_MOMENTUM: f64 = 0.9;

impl TrackerConfig {
    /// Smaller patch matching the desk-scale models.
    pub fn desk() -> Self {
        TrackerConfig {
            patch: 160,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 16 != 0 {
            return Err(Error::invalid(format!(
                "patch {} must be a positive multiple of 16",
                self.patch
            )));
        }
        if self.proposals == 0 || self.top_k == 0 || self.top_k > self.proposals {
            return Err(Error::invalid("need 1 <= top_k <= proposals"));
        }
        if self.update_interval == 0 || self.n_scales == 0 || self.classifier_block > 1 {
            return Err(Error::invalid(
                "update_interval and n_scales must be positive, classifier_block 0 or 1",
            ));
        }
        if !(self.area_factor > 0.0 && self.no_classifier_area > 0.0 && self.scale_ratio > 0.0 && self.hn_boost > 0.0) {
            return Err(Error::invalid("area factors, scale ratio and boost must be positive"));
        }
        Ok(())
    }

    /// The search scales `ratio^k`, `k` centered on zero.
    pub fn scales(&self) -> Vec<f64> {
        let half = (self.n_scales / 2) as i32;
        (0..self.n_scales as i32)
            .map(|k| self.scale_ratio.powi(k - half))
            .collect()
    }

    pub fn from_kv(kv: &KeyValues, base: TrackerConfig) -> Result<Self> {
        const KEYS: [&str; 20] = [
            "patch",
            "area_factor",
            "proposals",
            "ascent_steps",
            "step_len",
            "top_k",
            "update_interval",
            "lost_threshold",
            "hn_boost",
            "hn_ratio",
            "hn_radius",
            "hard_negatives",
            "proposal_noise",
            "no_classifier_area",
            "scale_ratio",
            "n_scales",
            "mode",
            "optimizer",
            "classifier_block",
            "min_side",
        ];
        kv.reject_unknown(&KEYS)?;
        let mut c = base;
        kv.set("patch", &mut c.patch)?;
        kv.set("area_factor", &mut c.area_factor)?;
        kv.set("proposals", &mut c.proposals)?;
        kv.set("ascent_steps", &mut c.ascent_steps)?;
        kv.set("step_len", &mut c.step_len)?;
        kv.set("top_k", &mut c.top_k)?;
        kv.set("update_interval", &mut c.update_interval)?;
        kv.set("lost_threshold", &mut c.lost_threshold)?;
        kv.set("hn_boost", &mut c.hn_boost)?;
        kv.set("hn_ratio", &mut c.hn_ratio)?;
        kv.set("hn_radius", &mut c.hn_radius)?;
        kv.set("hard_negatives", &mut c.hard_negatives)?;
        kv.set("proposal_noise", &mut c.proposal_noise)?;
        kv.set("no_classifier_area", &mut c.no_classifier_area)?;
        kv.set("scale_ratio", &mut c.scale_ratio)?;
        kv.set("n_scales", &mut c.n_scales)?;
        kv.set("classifier_block", &mut c.classifier_block)?;
        kv.set("min_side", &mut c.min_side)?;
        if let Some(m) = kv.raw("mode") {
            c.mode = match m {
                "full" => TrackerMode::Full,
                "multi-scale" => TrackerMode::MultiScale,
                "no-classifier" => TrackerMode::NoClassifier,
                other => return Err(Error::invalid(format!("unknown mode {other:?}"))),
            };
        }
        if let Some(o) = kv.raw("optimizer") {
            c = TrackerVariant::parse(match o {
                "gncg" => "full",
                "gd" => "gd",
                "gd++" => "gd++",
                other => return Err(Error::invalid(format!("unknown optimizer {other:?}"))),
            })?
            .apply_optimizer(c);
        }
        c.validate()?;
        Ok(c)
    }
}

/// Named tracker configurations of the ablation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrackerVariant {
    Full,
    MultiScale,
    NoClassifier,
    Gd,
    GdPlusPlus,
    NoHardNegatives,
}

impl TrackerVariant {
    pub const ALL: [TrackerVariant; 6] = [
        TrackerVariant::Full,
        TrackerVariant::MultiScale,
        TrackerVariant::NoClassifier,
        TrackerVariant::Gd,
        TrackerVariant::GdPlusPlus,
        TrackerVariant::NoHardNegatives,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrackerVariant::Full => "full",
            TrackerVariant::MultiScale => "multi-scale",
            TrackerVariant::NoClassifier => "no-classifier",
            TrackerVariant::Gd => "gd",
            TrackerVariant::GdPlusPlus => "gd++",
            TrackerVariant::NoHardNegatives => "no-hn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        TrackerVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown tracker variant {s:?}")))
    }

    fn apply_optimizer(self, mut c: TrackerConfig) -> TrackerConfig {
        c.optimizer = match self {
            TrackerVariant::Gd => Optimizer::Gd {
                lr: GD_LR,
                momentum: GD_MOMENTUM,
                budget_factor: 1,
            },
            TrackerVariant::GdPlusPlus => Optimizer::Gd {
                lr: GD_LR,
                momentum: GD_MOMENTUM,
                budget_factor: 5,
            },
            _ => Optimizer::GaussNewton,
        };
        c
    }

    pub fn apply(self, base: &TrackerConfig) -> TrackerConfig {
        let mut c = self.apply_optimizer(base.clone());
        c.mode = TrackerMode::Full;
        match self {
            TrackerVariant::MultiScale => c.mode = TrackerMode::MultiScale,
            TrackerVariant::NoClassifier => c.mode = TrackerMode::NoClassifier,
            TrackerVariant::NoHardNegatives => c.hard_negatives = false,
            _ => {}
        }
        c
    }
}

/// Everything a tracker carries between frames.
#[derive(Clone, Debug)]
pub struct TrackerState<T> {
    pub cfg: TrackerConfig,
    pub bbox: BoundingBox,
    pub cls: ClassifierWeights<T>,
    pub memory: SampleMemory<T>,
    pub modulation: ModulationVector<T>,
    pub frame_index: usize,
    pub lost: bool,
    pub rng: ChaCha8Rng,
    /// Backprop calls spent by the classifier optimizer so far.
    pub backprop_calls: usize,
    /// Backbone evaluations on tracked frames (excludes the first frame).
    pub features_extracted: usize,
    pub init_run: Option<OptimizerRun>,
}

impl<T: PartialEq> PartialEq for TrackerState<T> {
    fn eq(&self, o: &Self) -> bool {
        self.cfg == o.cfg
            && self.bbox == o.bbox
            && self.cls == o.cls
            && self.memory == o.memory
            && self.modulation == o.modulation
            && self.frame_index == o.frame_index
            && self.lost == o.lost
            && self.rng == o.rng
            && self.backprop_calls == o.backprop_calls
    }
}

/// Result of one tracked frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub frame_index: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub lost: bool,
    /// Classifier backprop calls spent on this frame.
    pub backprop_calls: usize,
    pub selected_scale: Option<f64>,
    pub hard_negative: bool,
}

pub const CSV_HEADER: &str = "frame_index,x,y,w,h,confidence,lost_flag";

impl FrameResult {
    pub fn csv_line(&self) -> String {
        let [x, y, w, h] = self.bbox.xywh();
        format!(
            "{},{x:.4},{y:.4},{w:.4},{h:.4},{:.6},{}",
            self.frame_index,
            self.confidence,
            u8::from(self.lost)
        )
    }
}

fn stride_of<T: Scalar>(models: &Models<T>, blk: usize) -> f64 {
    let (s3, s4) = models.backbone.strides();
    if blk == 0 {
        s3 as f64
    } else {
        s4 as f64
    }
}

/// Patch pixel to feature-cell coordinate.
pub fn cell_of(px: f64, stride: f64) -> f64 {
    px / stride - 0.5
}

fn label_sigma(cfg: &TrackerConfig, side: usize) -> f64 {
    cfg.classifier.sigma_factor * side as f64
}

fn sample_label<T: Scalar>(cfg: &TrackerConfig, x: &Tensor<T>, cx: f64, cy: f64, stride: f64) -> Result<Tensor<T>> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    make_label(
        cell_of(cx, stride),
        cell_of(cy, stride),
        label_sigma(cfg, h.max(w)),
        h,
        w,
    )
}

/// First frame: augment, fit the classifier, store the modulation vector.
pub fn initialize<T: Scalar>(
    frame: &Image,
    gt: &BoundingBox,
    cfg: &TrackerConfig,
    models: &Models<T>,
    seed: u64,
) -> Result<TrackerState<T>> {
    cfg.validate()?;
    gt.validate()?;
    if frame.is_empty() {
        return Err(Error::invalid("empty first frame"));
    }
    let (patch, tf) = extract_patch(frame, gt, cfg.area_factor, cfg.patch)?;
    let feats: Features<T> = models.backbone.extract(&patch)?;
    let b0 = tf.box_to_patch(gt);
    let modulation = models.iou.compute_modulation(&feats, &b0)?;
    let blk = cfg.classifier_block;
    let stride = stride_of(models, blk);
    let mut samples = Vec::with_capacity(cfg.classifier.init_samples);
    for (k, aug) in augment_first_frame(&patch, cfg.classifier.init_samples, seed)
        .into_iter()
        .enumerate()
    {
        let x = if k == 0 {
            feats.block(blk).clone()
        } else {
            models.backbone.extract(&aug.image)?.block(blk).clone()
        };
        let y = sample_label(cfg, &x, b0.cx + aug.shift.0, b0.cy + aug.shift.1, stride)?;
        samples.push((x, y));
    }
    let mut memory = SampleMemory::new(cfg.classifier.capacity, cfg.classifier.learning_rate)?;
    memory.reset_equal(samples)?;
    let channels = feats.block(blk).shape()[2];
    let mut cls = ClassifierWeights::init(channels, &cfg.classifier, seed)?;
    let run = if cfg.mode == TrackerMode::NoClassifier {
        None
    } else {
        Some(train_initial(&memory, &mut cls, &cfg.classifier, cfg.optimizer)?)
    };
    let calls = run.as_ref().map(|r| r.backprop_calls).unwrap_or(0);
    Ok(TrackerState {
        cfg: cfg.clone(),
        bbox: *gt,
        cls,
        memory,
        modulation,
        frame_index: 0,
        lost: false,
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        backprop_calls: calls,
        features_extracted: 0,
        init_run: run,
    })
}

/// A secondary local maximum above `ratio` times the primary peak and
/// further than `radius` times the map side from it.
pub fn detect_distractor<T: Scalar>(score: &Tensor<T>, ratio: f64, radius: f64) -> Result<Option<(usize, usize, f64)>> {
    let peak = find_peak(score)?;
    if peak.value <= 0.0 {
        return Ok(None);
    }
    let (h, w) = (score.shape()[0], score.shape()[1]);
    let d = score.data();
    let at = |r: usize, c: usize| d[r * w + c].f64();
    let min_dist = radius * h.max(w) as f64;
    let mut best: Option<(usize, usize, f64)> = None;
    for r in 0..h {
        for c in 0..w {
            let v = at(r, c);
            let dist = ((r as f64 - peak.row as f64).powi(2) + (c as f64 - peak.col as f64).powi(2)).sqrt();
            if dist <= min_dist || v <= ratio * peak.value {
                continue;
            }
            let mut is_max = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) != (0, 0)
                        && rr >= 0
                        && cc >= 0
                        && (rr as usize) < h
                        && (cc as usize) < w
                        && at(rr as usize, cc as usize) > v
                    {
                        is_max = false;
                    }
                }
            }
            if is_max && best.is_none_or(|b| v > b.2) {
                best = Some((r, c, v));
            }
        }
    }
    Ok(best)
}

/// Add the frame's sample and, when `score` shows a distractor, boost it
/// and refit immediately. Returns whether it fired and the calls spent.
pub fn hard_negative_step<T: Scalar>(
    state: &mut TrackerState<T>,
    score: &Tensor<T>,
    x: Tensor<T>,
    y: Tensor<T>,
) -> Result<(bool, usize)> {
    let fired =
        state.cfg.hard_negatives && detect_distractor(score, state.cfg.hn_ratio, state.cfg.hn_radius)?.is_some();
    let boost = if fired { state.cfg.hn_boost } else { 1.0 };
    state.memory.add_sample(x, y, boost)?;
    if fired {
        let run = train_update(
            &state.memory,
            &mut state.cls,
            &state.cfg.classifier,
            state.cfg.optimizer,
        )?;
        state.backprop_calls += run.backprop_calls;
        return Ok((true, run.backprop_calls));
    }
    Ok((false, 0))
}

fn clamp_box(b: BoundingBox, frame: &Image, min_side: f64) -> BoundingBox {
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);
    BoundingBox {
        cx: b.cx.clamp(0.0, fw),
        cy: b.cy.clamp(0.0, fh),
        w: b.w.clamp(min_side, fw),
        h: b.h.clamp(min_side, fh),
    }
}

fn proposals(b: &BoundingBox, n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<BoundingBox> {
    let mut out = vec![*b];
    while out.len() < n {
        let mut u = || rng.random_range(-noise..=noise);
        out.push(BoundingBox {
            cx: b.cx + u() * b.w,
            cy: b.cy + u() * b.h,
            w: b.w * u().exp(),
            h: b.h * u().exp(),
        });
    }
    out
}

/// Refine proposals around `init` (patch pixels); coordinate-wise mean of the
/// `top_k` best by final predicted IoU, with that mean's prediction.
fn estimate<T: Scalar>(
    state: &mut TrackerState<T>,
    models: &Models<T>,
    feats: &Features<T>,
    init: &BoundingBox,
) -> Result<(BoundingBox, f64)> {
    let cfg = &state.cfg;
    let props = proposals(init, cfg.proposals, cfg.proposal_noise, &mut state.rng);
    let maps = models.iou.test_maps(feats)?;
    let refined = refine_boxes(
        &models.iou,
        &state.modulation,
        &maps,
        &props,
        cfg.ascent_steps,
        cfg.step_len,
    )?;
    let mut order: Vec<usize> = (0..refined.len()).collect();
    let score = |i: usize| *refined[i].trace.last().unwrap_or(&f64::NEG_INFINITY);
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    let k = cfg.top_k.min(order.len());
    let mut acc = [0.0; 4];
    let mut iou = 0.0;
    for &i in &order[..k] {
        for (a, v) in acc.iter_mut().zip(refined[i].bbox.to_array()) {
            *a += v / k as f64;
        }
        iou += score(i) / k as f64;
    }
    Ok((BoundingBox::from_array(acc)?, iou))
}

/// Track one frame with the configured mode.
pub fn track_frame<T: Scalar>(state: &mut TrackerState<T>, models: &Models<T>, frame: &Image) -> Result<FrameResult> {
    match state.cfg.mode {
        TrackerMode::Full => full_track(state, models, frame),
        TrackerMode::MultiScale => multi_scale_track(state, models, frame),
        TrackerMode::NoClassifier => estimation_only_track(state, models, frame),
    }
}

/// Classifier response for a patch; returns the map and its peak.
fn localize<T: Scalar>(state: &TrackerState<T>, feats: &Features<T>) -> Result<(Tensor<T>, Peak)> {
    let score = classify(feats.block(state.cfg.classifier_block), &state.cls)?;
    let peak = find_peak(&score)?;
    Ok((score, peak))
}

/// Shared tail: lost check, sample update and scheduled refit.
fn finish<T: Scalar>(
    state: &mut TrackerState<T>,
    models: &Models<T>,
    score: &Tensor<T>,
    x: Tensor<T>,
    new_box: BoundingBox,
    tf: &PatchTransform,
    confidence: f64,
    selected_scale: Option<f64>,
) -> Result<FrameResult> {
    let mut calls = 0;
    let mut hn = false;
    state.lost = confidence < state.cfg.lost_threshold;
    if !state.lost {
        state.bbox = new_box;
        let pb = tf.box_to_patch(&new_box);
        let stride = stride_of(models, state.cfg.classifier_block);
        let y = sample_label(&state.cfg, &x, pb.cx, pb.cy, stride)?;
        let (fired, c) = hard_negative_step(state, score, x, y)?;
        hn = fired;
        calls += c;
        if !fired && state.frame_index % state.cfg.update_interval == 0 {
            let run = train_update(
                &state.memory,
                &mut state.cls,
                &state.cfg.classifier,
                state.cfg.optimizer,
            )?;
            state.backprop_calls += run.backprop_calls;
            calls += run.backprop_calls;
        }
    }
    Ok(FrameResult {
        frame_index: state.frame_index,
        bbox: state.bbox,
        confidence,
        lost: state.lost,
        backprop_calls: calls,
        selected_scale,
        hard_negative: hn,
    })
}

fn full_track<T: Scalar>(state: &mut TrackerState<T>, models: &Models<T>, frame: &Image) -> Result<FrameResult> {
    state.frame_index += 1;
    let (patch, tf) = extract_patch(frame, &state.bbox, state.cfg.area_factor, state.cfg.patch)?;
    let feats = models.backbone.extract(&patch)?;
    state.features_extracted += 1;
    let (score, peak) = localize(state, &feats)?;
    let stride = stride_of(models, state.cfg.classifier_block);
    let prev = tf.box_to_patch(&state.bbox);
    let init = BoundingBox {
        cx: (peak.x + 0.5) * stride,
        cy: (peak.y + 0.5) * stride,
        w: prev.w,
        h: prev.h,
    };
    let new_box = if peak.value < state.cfg.lost_threshold {
        state.bbox
    } else {
        let (est, _) = estimate(state, models, &feats, &init)?;
        clamp_box(tf.box_to_frame(&est), frame, state.cfg.min_side)
    };
    let x = feats.block(state.cfg.classifier_block).clone();
    finish(state, models, &score, x, new_box, &tf, peak.value, None)
}

/// Classifier-only search over `cfg.scales()`; keeps the aspect ratio.
pub fn multi_scale_track<T: Scalar>(
    state: &mut TrackerState<T>,
    models: &Models<T>,
    frame: &Image,
) -> Result<FrameResult> {
    state.frame_index += 1;
    let stride = stride_of(models, state.cfg.classifier_block);
    let side = crop_side(&state.bbox, state.cfg.area_factor);
    let mut best: Option<(f64, Tensor<T>, Peak, Features<T>, PatchTransform)> = None;
    for s in state.cfg.scales() {
        let (patch, tf) = extract_square(frame, state.bbox.cx, state.bbox.cy, side * s, state.cfg.patch)?;
        let feats = models.backbone.extract(&patch)?;
        state.features_extracted += 1;
        let (score, peak) = localize(state, &feats)?;
        if best.as_ref().is_none_or(|b| peak.value > b.2.value) {
            best = Some((s, score, peak, feats, tf));
        }
    }
    let (s, score, peak, feats, tf) = best.expect("at least one scale");
    let (cx, cy) = tf.to_frame((peak.x + 0.5) * stride, (peak.y + 0.5) * stride);
    let new_box = clamp_box(
        BoundingBox {
            cx,
            cy,
            w: state.bbox.w * s,
            h: state.bbox.h * s,
        },
        frame,
        state.cfg.min_side,
    );
    let x = feats.block(state.cfg.classifier_block).clone();
    finish(state, models, &score, x, new_box, &tf, peak.value, Some(s))
}

/// IoU refinement around the previous box on a larger patch; the
/// classifier is never evaluated or updated.
pub fn estimation_only_track<T: Scalar>(
    state: &mut TrackerState<T>,
    models: &Models<T>,
    frame: &Image,
) -> Result<FrameResult> {
    state.frame_index += 1;
    let (patch, tf) = extract_patch(frame, &state.bbox, state.cfg.no_classifier_area, state.cfg.patch)?;
    let feats = models.backbone.extract(&patch)?;
    state.features_extracted += 1;
    let init = tf.box_to_patch(&state.bbox);
    let (est, iou) = estimate(state, models, &feats, &init)?;
    state.bbox = clamp_box(tf.box_to_frame(&est), frame, state.cfg.min_side);
    state.lost = false;
    Ok(FrameResult {
        frame_index: state.frame_index,
        bbox: state.bbox,
        confidence: iou,
        lost: false,
        backprop_calls: 0,
        selected_scale: None,
        hard_negative: false,
    })
}

/// Track a whole sequence given as a frame source; frame 0 reports the
/// ground truth with confidence 1.
pub fn track_sequence<T: Scalar>(
    frames: &mut dyn FnMut(usize) -> Result<Image>,
    n: usize,
    gt0: &BoundingBox,
    cfg: &TrackerConfig,
    models: &Models<T>,
    seed: u64,
) -> Result<(Vec<FrameResult>, TrackerState<T>)> {
    if n == 0 {
        return Err(Error::invalid("cannot track an empty sequence"));
    }
    let mut state = initialize(&frames(0)?, gt0, cfg, models, seed)?;
    let mut out = vec![FrameResult {
        frame_index: 0,
        bbox: *gt0,
        confidence: 1.0,
        lost: false,
        backprop_calls: state.backprop_calls,
        selected_scale: None,
        hard_negative: false,
    }];
    for i in 1..n {
        out.push(track_frame(&mut state, models, &frames(i)?)?);
    }
    Ok((out, state))
}

pub fn trajectory_csv(results: &[FrameResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iounet::IouVariant;

    #[test]
    fn default_matches_published_settings() {
        let c = TrackerConfig::default();
        assert_eq!(
            (c.patch, c.area_factor, c.proposals, c.ascent_steps, c.top_k),
            (288, 5.0, 10, 5, 3)
        );
        assert_eq!((c.update_interval, c.lost_threshold, c.hn_boost), (10, 0.25, 2.0));
        let s = c.scales();
        let want = [1.02f64.powi(-2), 1.02f64.powi(-1), 1.0, 1.02, 1.02f64.powi(2)];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(TrackerConfig { top_k: 11, ..c.clone() }.validate().is_err());
    }

    #[test]
    fn unimodal_map_has_no_distractor() {
        let s = make_label::<f64>(5.0, 5.0, 1.5, 11, 11).unwrap();
        assert_eq!(detect_distractor(&s, 0.5, 0.2).unwrap(), None);
    }

    #[test]
    fn two_far_peaks_fire() {
        let a = make_label::<f64>(2.0, 2.0, 1.0, 12, 12).unwrap();
        let b = make_label::<f64>(9.0, 9.0, 1.0, 12, 12).unwrap();
        let s = a.add(&b).unwrap();
        let d = detect_distractor(&s, 0.5, 0.2).unwrap().unwrap();
        assert!(d.0 == 9 || d.0 == 2);
        // close peaks do not count
        let c = make_label::<f64>(3.0, 2.0, 1.0, 12, 12).unwrap();
        assert_eq!(
            detect_distractor(&a.add(&c.scale(0.9)).unwrap(), 0.5, 0.2).unwrap(),
            None
        );
    }

    #[test]
    fn csv_line_format() {
        let r = FrameResult {
            frame_index: 3,
            bbox: BoundingBox::from_xywh(1.0, 2.0, 3.0, 4.5).unwrap(),
            confidence: 0.5,
            lost: true,
            backprop_calls: 0,
            selected_scale: None,
            hard_negative: false,
        };
        assert_eq!(r.csv_line(), "3,1.0000,2.0000,3.0000,4.5000,0.500000,1");
    }

    #[test]
    fn variants_parse_and_apply() {
        let base = TrackerConfig::desk();
        for v in TrackerVariant::ALL {
            assert_eq!(TrackerVariant::parse(v.name()).unwrap(), v);
        }
        assert_eq!(TrackerVariant::MultiScale.apply(&base).mode, TrackerMode::MultiScale);
        assert!(!TrackerVariant::NoHardNegatives.apply(&base).hard_negatives);
        assert!(matches!(
            TrackerVariant::GdPlusPlus.apply(&base).optimizer,
            Optimizer::Gd { budget_factor: 5, .. }
        ));
        let kv = KeyValues::parse("optimizer = gd\nmode = no-classifier\n", std::path::Path::new("t")).unwrap();
        let c = TrackerConfig::from_kv(&kv, base).unwrap();
        assert_eq!(c.mode, TrackerMode::NoClassifier);
        assert!(matches!(c.optimizer, Optimizer::Gd { budget_factor: 1, .. }));
    }

    fn tiny_models() -> Models<f32> {
        let mut cfg = crate::model::desk_iou_config(IouVariant::Modulation);
        cfg.channels = (8, 8);
        Models::seeded(cfg, [4, 8, 8, 8], 2).unwrap()
    }

    fn square_frame(cx: f64, cy: f64) -> Image {
        let mut img = Image::filled(96, 96, [0.2, 0.3, 0.4]);
        for y in 0..96 {
            for x in 0..96 {
                if (x as f64 + 0.5 - cx).abs() < 8.0 && (y as f64 + 0.5 - cy).abs() < 8.0 {
                    img.set_pixel(x, y, [0.9, 0.8, 0.1]);
                }
            }
        }
        img
    }

    fn small_cfg() -> TrackerConfig {
        let mut c = TrackerConfig::desk();
        c.patch = 64;
        c.classifier.hidden = 8;
        c.classifier.init_samples = 6;
        c
    }

    #[test]
    fn call_budget_is_exact() {
        let m = tiny_models();
        let gt = BoundingBox::new(48.0, 48.0, 16.0, 16.0).unwrap();
        let mut cfg = small_cfg();
        cfg.hard_negatives = false;
        cfg.update_interval = 1;
        cfg.lost_threshold = -1.0;
        let mut s = initialize(&square_frame(48.0, 48.0), &gt, &cfg, &m, 1).unwrap();
        assert_eq!(s.backprop_calls, 126);
        assert_eq!(s.memory.len(), 6);
        let r = track_frame(&mut s, &m, &square_frame(49.0, 48.0)).unwrap();
        assert_eq!(r.backprop_calls, 11);
        assert_eq!(s.backprop_calls, 137);
        assert_eq!(s.features_extracted, 1);
    }

    #[test]
    fn initialization_is_deterministic_and_modulation_fixed() {
        let m = tiny_models();
        let gt = BoundingBox::new(48.0, 48.0, 16.0, 16.0).unwrap();
        let cfg = small_cfg();
        let f = square_frame(48.0, 48.0);
        let a = initialize(&f, &gt, &cfg, &m, 5).unwrap();
        let b = initialize(&f, &gt, &cfg, &m, 5).unwrap();
        assert_eq!(a, b);
        let mut s = a.clone();
        for i in 1..4 {
            track_frame(&mut s, &m, &square_frame(48.0 + i as f64, 48.0)).unwrap();
        }
        assert_eq!(s.modulation, a.modulation);
    }

    #[test]
    fn multi_scale_keeps_aspect() {
        let m = tiny_models();
        let gt = BoundingBox::new(48.0, 48.0, 16.0, 12.0).unwrap();
        let cfg = TrackerVariant::MultiScale.apply(&small_cfg());
        let mut s = initialize(&square_frame(48.0, 48.0), &gt, &cfg, &m, 1).unwrap();
        for i in 1..4 {
            let r = track_frame(&mut s, &m, &square_frame(48.0, 48.0 + i as f64)).unwrap();
            assert!((r.bbox.w / r.bbox.h - 16.0 / 12.0).abs() < 1e-9);
            assert!(r.selected_scale.is_some());
        }
        assert_eq!(s.features_extracted, 15);
    }

    #[test]
    fn no_classifier_never_trains() {
        let m = tiny_models();
        let gt = BoundingBox::new(48.0, 48.0, 16.0, 16.0).unwrap();
        let cfg = TrackerVariant::NoClassifier.apply(&small_cfg());
        let mut s = initialize(&square_frame(48.0, 48.0), &gt, &cfg, &m, 1).unwrap();
        let w = s.cls.clone();
        for i in 1..4 {
            track_frame(&mut s, &m, &square_frame(48.0, 48.0 + i as f64)).unwrap();
        }
        assert_eq!(s.backprop_calls, 0);
        assert_eq!(s.cls, w);
    }
}
