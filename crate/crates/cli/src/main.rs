use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ioutrack_core::bench::{
    convergence_bench, first_frame_problem, reports_csv, reports_json, run_ablation, run_sequence,
};
use ioutrack_core::config::KeyValues;
use ioutrack_core::gradcheck::full_suite;
use ioutrack_core::iounet::IouVariant;
use ioutrack_core::model::Models;
use ioutrack_core::sequence::{load_sequence, write_sequence, Sequence};
use ioutrack_core::synth::{synth_suite, Category};
use ioutrack_core::tracker::{track_sequence, trajectory_csv, TrackerConfig, TrackerVariant};
use ioutrack_core::train::{train_desk, training_sequences, TrainConfig};
use ioutrack_core::Scalar;

#[derive(Parser)]
#[command(name = "ioutrack", version, about = "IoU-guided tracking at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// key=value file; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SuiteArgs {
    /// Directory of sequence directories; a synthetic suite is generated
    /// when absent.
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    per_category: usize,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    /// Only sequences of these categories (comma separated).
    #[arg(long, value_delimiter = ',')]
    category: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic sequences as image directories.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        per_category: usize,
        #[arg(long, default_value_t = 60)]
        frames: usize,
    },
    /// Train the IoU network offline on synthetic pairs.
    TrainIou {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "modulation")]
        variant: String,
        #[arg(long, default_value_t = 4)]
        per_category: usize,
        #[arg(long, default_value_t = 100)]
        frames: usize,
    },
    /// Track one sequence directory; writes trajectory.csv.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Track a suite; writes eval.csv and eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        suite: SuiteArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Compare tracker variants over paired seeds; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        suite: SuiteArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,multi-scale,no-classifier,gd,gd++,no-hn"
        )]
        variants: Vec<String>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
    /// Gauss-Newton/CG against gradient descent on first-frame problems;
    /// writes convergence.csv.
    ConvergenceBench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        problems: usize,
        /// Problems used for the gradient-descent step-size search.
        #[arg(long, default_value_t = 3)]
        search_on: usize,
    },
    /// Run every finite-difference gradient check (always 64-bit).
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn write(out: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let p = out.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn config(common: &Common) -> Result<KeyValues> {
    Ok(match &common.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    })
}

fn tracker_config(common: &Common, variant: &str) -> Result<TrackerConfig> {
    let base = TrackerConfig::from_kv(&config(common)?, TrackerConfig::desk())?;
    Ok(TrackerVariant::parse(variant)?.apply(&base))
}

fn models<T: Scalar>(path: Option<&Path>, seed: u64) -> Result<Models<T>> {
    match path {
        Some(p) => Models::load(p).with_context(|| format!("loading model {}", p.display())),
        None => {
            eprintln!("no --model given; using an untrained seeded IoU network");
            Ok(Models::desk(IouVariant::Modulation, seed)?)
        }
    }
}

fn load_suite(args: &SuiteArgs, seed: u64) -> Result<Vec<Sequence>> {
    let mut seqs = match &args.suite {
        Some(dir) => {
            let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            dirs.iter()
                .map(|d| load_sequence(d))
                .collect::<ioutrack_core::Result<Vec<_>>>()?
        }
        None => synth_suite(args.per_category, args.frames, seed)?,
    };
    if !args.category.is_empty() {
        let cats = args
            .category
            .iter()
            .map(|c| Category::parse(c))
            .collect::<ioutrack_core::Result<Vec<_>>>()?;
        seqs.retain(|s| Category::of_name(&s.name).is_some_and(|c| cats.contains(&c)));
    }
    if seqs.is_empty() {
        bail!("the suite has no sequences");
    }
    seqs.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(seqs)
}

fn train_iou<T: Scalar>(common: &Common, variant: &str, per_category: usize, frames: usize) -> Result<()> {
    let mut cfg = TrainConfig::from_kv(&config(common)?)?;
    cfg.seed = common.seed;
    let variant = IouVariant::parse(variant)?;
    let t = Instant::now();
    let seqs = training_sequences(per_category, frames, common.seed)?;
    let (models, report) = train_desk::<T>(variant, &seqs, &cfg, common.seed, &mut |e| {
        eprintln!(
            "epoch {:>3}  lr {:.1e}  train {:.5}  val {:.5}  {:.0}s",
            e.epoch,
            e.lr,
            e.train_mse,
            e.val_mse,
            t.elapsed().as_secs_f64()
        )
    })?;
    fs::create_dir_all(&common.out)?;
    let model = common.out.join("model.bin");
    models.save(&model)?;
    write(&common.out, "history.csv", &report.history_csv())?;
    println!(
        "val mse {:.5} (constant predictor {:.5}); model written to {}",
        report.final_val_mse(),
        report.constant_val_mse,
        model.display()
    );
    Ok(())
}

fn track<T: Scalar>(common: &Common, dir: &Path, model: Option<&Path>, variant: &str) -> Result<()> {
    let cfg = tracker_config(common, variant)?;
    let models = models::<T>(model, common.seed)?;
    let seq = load_sequence(dir)?;
    let gt0 = seq.ground_truth()[0];
    let (results, _) = track_sequence(&mut |i| seq.frame(i), seq.len(), &gt0, &cfg, &models, common.seed)?;
    let p = write(&common.out, "trajectory.csv", &trajectory_csv(&results))?;
    println!("{} frames written to {}", results.len(), p.display());
    Ok(())
}

fn eval<T: Scalar>(common: &Common, suite: &SuiteArgs, model: Option<&Path>, variant: &str) -> Result<()> {
    let cfg = tracker_config(common, variant)?;
    let models = models::<T>(model, common.seed)?;
    let seqs = load_suite(suite, common.seed)?;
    let mut reports = Vec::new();
    for s in &seqs {
        let r = run_sequence(s, &cfg, &models, common.seed)?.report;
        eprintln!("{:<20} auc {:>6.2}  {:.1}s", r.sequence, r.auc, r.runtime_s);
        reports.push(r);
    }
    write(&common.out, "eval.csv", &reports_csv(&reports))?;
    write(&common.out, "eval.json", &reports_json(&reports))?;
    let mean = reports.iter().map(|r| r.auc).sum::<f64>() / reports.len() as f64;
    println!("mean AUC {mean:.2} over {} sequences", reports.len());
    Ok(())
}

fn ablate<T: Scalar>(
    common: &Common,
    suite: &SuiteArgs,
    model: Option<&Path>,
    variants: &[String],
    runs: usize,
) -> Result<()> {
    let base = tracker_config(common, "full")?;
    let models = models::<T>(model, common.seed)?;
    let seqs = load_suite(suite, common.seed)?;
    let variants = variants
        .iter()
        .map(|v| TrackerVariant::parse(v))
        .collect::<ioutrack_core::Result<Vec<_>>>()?;
    let table = run_ablation(&seqs, &variants, runs, common.seed, &base, &models)?;
    write(&common.out, "ablation.csv", &table.csv())?;
    print!("{}", table.text());
    Ok(())
}

fn convergence<T: Scalar>(common: &Common, problems: usize, search_on: usize) -> Result<()> {
    if problems == 0 {
        bail!("--problems must be positive");
    }
    let t = Instant::now();
    let cfg = TrackerConfig::from_kv(&config(common)?, TrackerConfig::desk())?;
    let models = Models::<T>::desk(IouVariant::Modulation, common.seed)?;
    let per_cat = problems.div_ceil(Category::ALL.len());
    let seqs = synth_suite(per_cat, 1, common.seed)?;
    let probs = seqs
        .iter()
        .take(problems)
        .enumerate()
        .map(|(k, s)| first_frame_problem(s, &cfg, &models, common.seed + k as u64))
        .collect::<ioutrack_core::Result<Vec<_>>>()?;
    let report = convergence_bench(&probs, cfg.classifier.init_iters, 5, search_on)?;
    write(&common.out, "convergence.csv", &report.csv())?;
    println!(
        "median loss: gn-cg {:.6e} @{}  gd {:.6e} @{}  gd++ {:.6e} @{}  ({:.0}s)",
        report.median_gn(),
        report.gn_budget,
        report.median_gd(),
        report.gn_budget,
        report.median_gdpp(),
        report.gdpp_budget,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn gradcheck(common: &Common) -> Result<()> {
    let mut failed = 0;
    for c in full_suite(common.seed)? {
        let ok = c.passed();
        failed += usize::from(!ok);
        println!(
            "{:<4} {:<32} rel err {:.2e} (tol {:.0e})",
            if ok { "ok" } else { "FAIL" },
            c.name,
            c.rel_err,
            c.tol
        );
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

macro_rules! dispatch {
    ($p:expr, $f:ident($($a:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth {
            common,
            per_category,
            frames,
        } => {
            let seqs = synth_suite(per_category, frames, common.seed)?;
            for s in &seqs {
                write_sequence(s, &common.out.join(&s.name))?;
            }
            println!("{} sequences written to {}", seqs.len(), common.out.display());
            Ok(())
        }
        Cmd::TrainIou {
            common,
            variant,
            per_category,
            frames,
        } => {
            dispatch!(common.precision, train_iou(&common, &variant, per_category, frames))
        }
        Cmd::Track {
            common,
            sequence,
            model,
            variant,
        } => {
            dispatch!(common.precision, track(&common, &sequence, model.as_deref(), &variant))
        }
        Cmd::Eval {
            common,
            suite,
            model,
            variant,
        } => {
            dispatch!(common.precision, eval(&common, &suite, model.as_deref(), &variant))
        }
        Cmd::Ablate {
            common,
            suite,
            model,
            variants,
            runs,
        } => {
            dispatch!(
                common.precision,
                ablate(&common, &suite, model.as_deref(), &variants, runs)
            )
        }
        Cmd::ConvergenceBench {
            common,
            problems,
            search_on,
        } => {
            dispatch!(common.precision, convergence(&common, problems, search_on))
        }
        Cmd::Gradcheck { common } => gradcheck(&common),
    }
}
