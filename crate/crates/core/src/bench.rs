//! Evaluation metrics, suite evaluation, tracker ablations and the
//! optimizer convergence comparison.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::classifier::{ClassifierProblem, ClassifierWeights};
use crate::error::{Error, Result};
use crate::iounet::geometric_iou;
use crate::model::Models;
use crate::optim::{gauss_newton_cg, gradient_descent, OptimizerRun, TracePoint};
use crate::prpool::BoundingBox;
use crate::sequence::Sequence;
use crate::tensor::Scalar;
use crate::tracker::{
    initialize, track_frame, track_sequence, FrameResult, TrackerConfig, TrackerMode, TrackerVariant,
};

/// Number of overlap thresholds, `0, 0.01, …, 1`.
pub const OP_THRESHOLDS: usize = 101;
pub const PRECISION_PX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCurve {
    pub thresholds: Vec<f64>,
    /// Percent of frames with IoU strictly above each threshold.
    pub op: Vec<f64>,
}

impl OpCurve {
    /// OP at the threshold nearest `t`.
    pub fn at(&self, t: f64) -> f64 {
        let k = (t * (OP_THRESHOLDS - 1) as f64)
            .round()
            .clamp(0.0, (OP_THRESHOLDS - 1) as f64) as usize;
        self.op[k]
    }
}

pub fn op_curve(ious: &[f64]) -> Result<OpCurve> {
    if ious.is_empty() {
        return Err(Error::invalid("overlap curve of an empty IoU list"));
    }
    if let Some(v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("IoU {v} outside [0, 1]")));
    }
    let thresholds: Vec<f64> = (0..OP_THRESHOLDS)
        .map(|k| k as f64 / (OP_THRESHOLDS - 1) as f64)
        .collect();
    let n = ious.len() as f64;
    let op = thresholds
        .iter()
        .map(|&t| 100.0 * ious.iter().filter(|&&v| v > t).count() as f64 / n)
        .collect();
    Ok(OpCurve { thresholds, op })
}

/// Trapezoidal area under the overlap curve, in percent.
pub fn auc(curve: &OpCurve) -> f64 {
    curve
        .thresholds
        .windows(2)
        .zip(curve.op.windows(2))
        .map(|(t, o)| (t[1] - t[0]) * (o[0] + o[1]) / 2.0)
        .sum()
}

/// Percent of frames with center error at most `threshold` pixels.
pub fn precision_at(center_errors: &[f64], threshold: f64) -> Result<f64> {
    if center_errors.is_empty() {
        return Err(Error::invalid("precision of an empty error list"));
    }
    let ok = center_errors.iter().filter(|&&e| e <= threshold).count();
    Ok(100.0 * ok as f64 / center_errors.len() as f64)
}

pub fn center_error(a: &BoundingBox, b: &BoundingBox) -> f64 {
    ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sequence: String,
    pub ious: Vec<f64>,
    pub curve: OpCurve,
    pub auc: f64,
    pub op50: f64,
    pub op75: f64,
    pub precision: f64,
    pub mean_iou: f64,
    /// Frames actually tracked; shorter than the sequence after a failure.
    pub frames: usize,
    pub error: Option<String>,
    pub runtime_s: f64,
}

/// Score predictions against ground truth on frames `1..` (frame 0 is the
/// given initialization).
pub fn evaluate_trajectory(name: &str, pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<EvalReport> {
    let n = pred.len().min(gt.len());
    if n < 2 {
        return Err(Error::invalid(format!("{name}: need at least two frames to evaluate")));
    }
    let ious: Vec<f64> = (1..n).map(|i| geometric_iou(&pred[i], &gt[i])).collect();
    let errs: Vec<f64> = (1..n).map(|i| center_error(&pred[i], &gt[i])).collect();
    let curve = op_curve(&ious)?;
    Ok(EvalReport {
        sequence: name.to_string(),
        auc: auc(&curve),
        op50: curve.at(0.5),
        op75: curve.at(0.75),
        precision: precision_at(&errs, PRECISION_PX)?,
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        ious,
        curve,
        frames: n,
        error: None,
        runtime_s: 0.0,
    })
}

/// Tracked sequence: per-frame results plus the report.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub results: Vec<FrameResult>,
    pub report: EvalReport,
}

/// Track one sequence and score it. A tracking error ends the run early;
/// the frames tracked so far are scored and the error recorded.
pub fn run_sequence<T: Scalar>(
    seq: &Sequence,
    cfg: &TrackerConfig,
    models: &Models<T>,
    seed: u64,
) -> Result<SequenceRun> {
    let start = Instant::now();
    let gt = seq.ground_truth();
    let mut results = Vec::new();
    let mut error = None;
    match initialize(&seq.frame(0)?, &gt[0], cfg, models, seed) {
        Err(e) => error = Some(e.to_string()),
        Ok(mut state) => {
            results.push(FrameResult {
                frame_index: 0,
                bbox: gt[0],
                confidence: 1.0,
                lost: false,
                backprop_calls: state.backprop_calls,
                selected_scale: None,
                hard_negative: false,
            });
            for i in 1..seq.len() {
                match seq.frame(i).and_then(|f| track_frame(&mut state, models, &f)) {
                    Ok(r) => results.push(r),
                    Err(e) => {
                        error = Some(format!("frame {i}: {e}"));
                        break;
                    }
                }
            }
        }
    }
    let pred: Vec<BoundingBox> = results.iter().map(|r| r.bbox).collect();
    let mut report = if pred.len() >= 2 {
        evaluate_trajectory(&seq.name, &pred, gt)?
    } else {
        let curve = op_curve(&[0.0])?;
        EvalReport {
            sequence: seq.name.clone(),
            ious: vec![0.0],
            auc: auc(&curve),
            op50: 0.0,
            op75: 0.0,
            curve,
            precision: 0.0,
            mean_iou: 0.0,
            frames: pred.len(),
            error: None,
            runtime_s: 0.0,
        }
    };
    report.error = error;
    report.runtime_s = start.elapsed().as_secs_f64();
    Ok(SequenceRun { results, report })
}

/// Track a closure-provided sequence; thin wrapper kept for the CLI.
pub fn track_frames<T: Scalar>(
    seq: &Sequence,
    cfg: &TrackerConfig,
    models: &Models<T>,
    seed: u64,
) -> Result<Vec<FrameResult>> {
    let gt0 = seq.ground_truth()[0];
    Ok(track_sequence(&mut |i| seq.frame(i), seq.len(), &gt0, cfg, models, seed)?.0)
}

/// `sequence,frames,auc,op50,op75,precision,mean_iou,error` rows, sorted by
/// sequence name. Runtime is left out so the output is reproducible.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.sequence.cmp(&b.sequence));
    let mut s = String::from("sequence,frames,auc,op50,op75,precision,mean_iou,error\n");
    for r in sorted {
        s.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.6},{}\n",
            r.sequence,
            r.frames,
            r.auc,
            r.op50,
            r.op75,
            r.precision,
            r.mean_iou,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        ));
    }
    s
}

/// Summary JSON including runtimes.
pub fn reports_json(reports: &[EvalReport]) -> String {
    let seqs: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "sequence": r.sequence,
                "frames": r.frames,
                "auc": r.auc,
                "op50": r.op50,
                "op75": r.op75,
                "precision": r.precision,
                "mean_iou": r.mean_iou,
                "op_curve": r.curve.op,
                "error": r.error,
                "runtime_s": r.runtime_s,
                "fps": if r.runtime_s > 0.0 { r.frames as f64 / r.runtime_s } else { 0.0 },
            })
        })
        .collect();
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len().max(1) as f64;
    serde_json::to_string_pretty(&serde_json::json!({
        "mean_auc": mean(|r| r.auc),
        "mean_op50": mean(|r| r.op50),
        "mean_op75": mean(|r| r.op75),
        "mean_precision": mean(|r| r.precision),
        "total_runtime_s": reports.iter().map(|r| r.runtime_s).sum::<f64>(),
        "sequences": seqs,
    }))
    .expect("report serializes")
}

/// One variant's scores: per-run means over sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: TrackerVariant,
    pub op50: Vec<f64>,
    pub op75: Vec<f64>,
    pub auc: Vec<f64>,
    pub failures: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

impl AblationRow {
    pub fn mean_auc(&self) -> f64 {
        mean(&self.auc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: usize,
}

impl AblationTable {
    pub fn row(&self, v: TrackerVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Mean and variance of the paired per-run AUC difference `a − b`.
    pub fn paired_diff(&self, a: TrackerVariant, b: TrackerVariant) -> Option<(f64, f64)> {
        let (ra, rb) = (self.row(a)?, self.row(b)?);
        let d: Vec<f64> = ra.auc.iter().zip(&rb.auc).map(|(x, y)| x - y).collect();
        Some((mean(&d), variance(&d)))
    }

    pub fn csv(&self) -> String {
        let base = self.rows.first().map(|r| r.variant);
        let mut s = String::from("variant,runs,op50,op75,auc,auc_diff_vs_first,auc_diff_var,failures\n");
        for r in &self.rows {
            let (d, v) = base.and_then(|b| self.paired_diff(r.variant, b)).unwrap_or((0.0, 0.0));
            s.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{}\n",
                r.variant.name(),
                self.runs,
                mean(&r.op50),
                mean(&r.op75),
                r.mean_auc(),
                d,
                v,
                r.failures
            ));
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = format!("{:<14} {:>8} {:>8} {:>8}\n", "variant", "OP50", "OP75", "AUC");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14} {:>8.2} {:>8.2} {:>8.2}\n",
                r.variant.name(),
                mean(&r.op50),
                mean(&r.op75),
                r.mean_auc()
            ));
        }
        s
    }
}

/// Track every sequence with every variant for `runs` paired seeds
/// (`seed + run`, shared across variants).
pub fn run_ablation<T: Scalar>(
    suite: &[Sequence],
    variants: &[TrackerVariant],
    runs: usize,
    seed: u64,
    base: &TrackerConfig,
    models: &Models<T>,
) -> Result<AblationTable> {
    if suite.is_empty() || variants.is_empty() || runs == 0 {
        return Err(Error::invalid(
            "ablation needs sequences, variants and at least one run",
        ));
    }
    let mut order: Vec<&Sequence> = suite.iter().collect();
    order.sort_by(|a, b| a.name.cmp(&b.name));
    let mut rows = Vec::new();
    for &v in variants {
        let cfg = v.apply(base);
        let mut row = AblationRow {
            variant: v,
            op50: Vec::new(),
            op75: Vec::new(),
            auc: Vec::new(),
            failures: 0,
        };
        for run in 0..runs {
            let mut reports = Vec::new();
            for seq in &order {
                let r = run_sequence(seq, &cfg, models, seed + run as u64)?.report;
                row.failures += usize::from(r.error.is_some());
                reports.push(r);
            }
            row.op50.push(mean(&reports.iter().map(|r| r.op50).collect::<Vec<_>>()));
            row.op75.push(mean(&reports.iter().map(|r| r.op75).collect::<Vec<_>>()));
            row.auc.push(mean(&reports.iter().map(|r| r.auc).collect::<Vec<_>>()));
        }
        rows.push(row);
    }
    Ok(AblationTable { rows, runs })
}

/// First-frame classifier problem of a sequence: augmented samples of
/// the initial patch and seeded initial weights.
pub struct FirstFrameProblem<T> {
    pub problem: ClassifierProblem<T>,
    pub init: ClassifierWeights<T>,
}

pub fn first_frame_problem<T: Scalar>(
    seq: &Sequence,
    cfg: &TrackerConfig,
    models: &Models<T>,
    seed: u64,
) -> Result<FirstFrameProblem<T>> {
    // Initialization without fitting leaves the augmented memory and the
    // seeded weights in the state.
    let mut untrained = cfg.clone();
    untrained.mode = TrackerMode::NoClassifier;
    let state = initialize(&seq.frame(0)?, &seq.ground_truth()[0], &untrained, models, seed)?;
    Ok(FirstFrameProblem {
        problem: ClassifierProblem::new(&state.memory, state.cls.lambda)?,
        init: state.cls,
    })
}

/// Learning rates and momenta tried for the gradient-descent baselines.
pub const GD_LR_GRID: [f64; 11] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0, 10.0];
pub const GD_MOMENTUM_GRID: [f64; 3] = [0.0, 0.5, 0.9];

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub gn_budget: usize,
    pub gdpp_budget: usize,
    pub gd_params: (f64, f64),
    pub gdpp_params: (f64, f64),
    /// One run per problem.
    pub gn: Vec<OptimizerRun>,
    pub gd: Vec<OptimizerRun>,
    pub gdpp: Vec<OptimizerRun>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn loss_at(trace: &[TracePoint], calls: usize) -> f64 {
    trace
        .iter()
        .take_while(|p| p.backprop_calls <= calls)
        .last()
        .map(|p| p.loss)
        .unwrap_or(f64::NAN)
}

impl ConvergenceReport {
    pub fn final_losses(runs: &[OptimizerRun]) -> Vec<f64> {
        runs.iter().map(|r| r.final_loss()).collect()
    }

    pub fn median_gn(&self) -> f64 {
        median(&Self::final_losses(&self.gn))
    }

    pub fn median_gd(&self) -> f64 {
        median(&Self::final_losses(&self.gd))
    }

    pub fn median_gdpp(&self) -> f64 {
        median(&Self::final_losses(&self.gdpp))
    }

    /// `method,backprop_calls,mean_loss,median_loss` sampled every
    /// Gauss-Newton iteration's worth of calls.
    pub fn csv(&self) -> String {
        let step = (self.gn_budget / self.gn.first().map(|r| r.n_gn.max(1)).unwrap_or(1)).max(1);
        let mut s = format!(
            "# gd lr={} momentum={}; gd++ lr={} momentum={}\nmethod,backprop_calls,mean_loss,median_loss\n",
            self.gd_params.0, self.gd_params.1, self.gdpp_params.0, self.gdpp_params.1
        );
        for (name, runs, budget) in [
            ("gn-cg", &self.gn, self.gn_budget),
            ("gd", &self.gd, self.gn_budget),
            ("gd++", &self.gdpp, self.gdpp_budget),
        ] {
            let mut c = 0;
            while c <= budget {
                let l: Vec<f64> = runs.iter().map(|r| loss_at(&r.trace, c)).collect();
                s.push_str(&format!("{name},{c},{:.9e},{:.9e}\n", mean(&l), median(&l)));
                c += step;
            }
        }
        s
    }
}

fn gd_final<T: Scalar>(p: &FirstFrameProblem<T>, steps: usize, lr: f64, mom: f64) -> Result<OptimizerRun> {
    let mut w = [p.init.w1.clone(), p.init.w2.clone()];
    gradient_descent(&p.problem, &mut w, steps, lr, mom)
}

/// Best `(lr, momentum)` among `lrs × moms` by median final loss over
/// `problems`; diverged settings lose.
pub fn grid_search_gd<T: Scalar>(
    problems: &[FirstFrameProblem<T>],
    steps: usize,
    lrs: &[f64],
    moms: &[f64],
) -> Result<(f64, f64)> {
    let mut best = (f64::INFINITY, (f64::NAN, f64::NAN));
    for &lr in lrs {
        for &m in moms {
            let mut finals = Vec::new();
            for p in problems {
                finals.push(match gd_final(p, steps, lr, m) {
                    Ok(r) => r.final_loss(),
                    Err(Error::Diverged { .. }) | Err(Error::NonFiniteLoss { .. }) | Err(Error::NonFinite { .. }) => {
                        f64::INFINITY
                    }
                    Err(e) => return Err(e),
                });
            }
            let med = median(&finals);
            if med < best.0 {
                best = (med, (lr, m));
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::invalid("every gradient-descent setting diverged"));
    }
    Ok(best.1)
}

/// Gauss-Newton/CG against gradient descent at the same call budget and
/// at `gdpp_factor` times that budget. Step sizes are grid-searched on the
/// first `search_on` problems.
pub fn convergence_bench<T: Scalar>(
    problems: &[FirstFrameProblem<T>],
    iters: (usize, usize),
    gdpp_factor: usize,
    search_on: usize,
) -> Result<ConvergenceReport> {
    if problems.is_empty() {
        return Err(Error::invalid("convergence bench needs at least one problem"));
    }
    let budget = iters.0 * (1 + 2 * iters.1);
    let probe = &problems[..search_on.clamp(1, problems.len())];
    let gd_params = grid_search_gd(probe, budget, &GD_LR_GRID, &GD_MOMENTUM_GRID)?;
    // The longer run only rescans the step size around the short-run winner.
    let around = [gd_params.0 / 3.0, gd_params.0, gd_params.0 * 3.0];
    let gdpp_params = grid_search_gd(probe, budget * gdpp_factor, &around, &[gd_params.1])?;
    let mut gn = Vec::new();
    let mut gd = Vec::new();
    let mut gdpp = Vec::new();
    for p in problems {
        let mut w = [p.init.w1.clone(), p.init.w2.clone()];
        gn.push(gauss_newton_cg(&p.problem, &mut w, iters.0, iters.1)?);
        gd.push(gd_final(p, budget, gd_params.0, gd_params.1)?);
        gdpp.push(gd_final(p, budget * gdpp_factor, gdpp_params.0, gdpp_params.1)?);
    }
    Ok(ConvergenceReport {
        gn_budget: budget,
        gdpp_budget: budget * gdpp_factor,
        gd_params,
        gdpp_params,
        gn,
        gd,
        gdpp,
    })
}

/// Group sequence names by suite category prefix.
pub fn by_category(suite: &[Sequence]) -> BTreeMap<String, Vec<usize>> {
    let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in suite.iter().enumerate() {
        let key = s.name.split('-').next().unwrap_or("").to_string();
        m.entry(key).or_default().push(i);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_of_perfect_tracking() {
        let c = op_curve(&[1.0; 10]).unwrap();
        assert!(c.op[..100].iter().all(|&v| v == 100.0));
        assert_eq!(c.op[100], 0.0);
        assert!((auc(&c) - 99.5).abs() < 1e-9);
    }

    #[test]
    fn op_of_half_overlap() {
        let c = op_curve(&[0.5; 4]).unwrap();
        assert!((auc(&c) - 49.5).abs() < 1e-9);
        let c = op_curve(&[0.25, 0.75]).unwrap();
        assert_eq!(c.at(0.5), 50.0);
    }

    #[test]
    fn op_rejects_bad_input() {
        assert!(op_curve(&[]).is_err());
        assert!(op_curve(&[1.5]).is_err());
    }

    #[test]
    fn precision_cases() {
        assert_eq!(precision_at(&[0.0, 0.0], 20.0).unwrap(), 100.0);
        assert_eq!(precision_at(&[10.0, 30.0], 20.0).unwrap(), 50.0);
        assert_eq!(precision_at(&[0.0, 1e-9], 0.0).unwrap(), 50.0);
        assert!(precision_at(&[], 20.0).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn trajectory_scores_skip_first_frame() {
        let a = BoundingBox::new(10.0, 10.0, 4.0, 4.0).unwrap();
        let b = BoundingBox::new(100.0, 10.0, 4.0, 4.0).unwrap();
        let r = evaluate_trajectory("s", &[b, a, a], &[a, a, a]).unwrap();
        assert_eq!(r.ious, vec![1.0, 1.0]);
        assert_eq!(r.precision, 100.0);
        let csv = reports_csv(&[r]);
        assert!(csv.starts_with("sequence,frames,auc"));
        assert!(!csv.contains("runtime"));
    }
}
