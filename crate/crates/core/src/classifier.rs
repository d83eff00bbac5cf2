//! Online target classifier: a 1×1 projection followed by a single-output
//! k×k filter and a PELU, trained on a weighted sample memory through the
//! Gauss-Newton/CG optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::kernels::ConvParams;
use crate::optim::{gauss_newton_cg, gradient_descent, OptimizerRun, ResidualProblem};
use crate::tensor::{Scalar, Tensor};

pub const PELU_ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub lambda: [f64; 2],
    /// Label standard deviation as a fraction of the score-map side.
    pub sigma_factor: f64,
    pub capacity: usize,
    pub learning_rate: f64,
    pub init_iters: (usize, usize),
    pub update_iters: (usize, usize),
    pub init_samples: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 64,
            kernel: 4,
            lambda: [1e-2, 1e-2],
            sigma_factor: 1.0 / 12.0,
            capacity: 50,
            learning_rate: 0.01,
            init_iters: (6, 10),
            update_iters: (1, 5),
            init_samples: 30,
        }
    }
}

/// Which optimizer fits the classifier. GD variants spend the same (or
/// `budget_factor` times the) backprop calls Gauss-Newton/CG would.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    GaussNewton,
    Gd {
        lr: f64,
        momentum: f64,
        budget_factor: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub lambda: [f64; 2],
}

impl<T: Scalar> ClassifierWeights<T> {
    /// `w1 ~ N(0, 1/D)`, `w2 ~ N(0, 1/|w2|²)`.
    pub fn init(channels: usize, cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        if channels == 0 || cfg.hidden == 0 || cfg.kernel == 0 {
            return Err(Error::invalid("classifier dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n2 = cfg.kernel * cfg.kernel * cfg.hidden;
        let d1 = Normal::new(0.0, (1.0 / channels as f64).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
        let d2 = Normal::new(0.0, 1.0 / n2 as f64).map_err(|e| Error::invalid(e.to_string()))?;
        let w1: Vec<T> = (0..channels * cfg.hidden).map(|_| T::of(d1.sample(&mut rng))).collect();
        let w2: Vec<T> = (0..n2).map(|_| T::of(d2.sample(&mut rng))).collect();
        Ok(ClassifierWeights {
            w1: Tensor::new(vec![1, 1, channels, cfg.hidden], w1)?,
            w2: Tensor::new(vec![cfg.kernel, cfg.kernel, cfg.hidden, 1], w2)?,
            lambda: cfg.lambda,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[2]
    }

    pub fn kernel(&self) -> usize {
        self.w2.shape()[0]
    }
}

/// `PELU(w2 ∗ (w1 ∗ x))` on the tape. `x` is `H×W×D` or `N×H×W×D`.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() == 3 {
        let x4 = tape.reshape(x, &[1, shape[0], shape[1], shape[2]])?;
        let f = forward(tape, x4, w1, w2)?;
        return tape.reshape(f, &[shape[0], shape[1], 1]);
    }
    let hidden = tape.conv2d(x, w1, ConvParams::new(1, 0))?;
    second_layer(tape, hidden, w2)
}

fn second_layer<T: Scalar>(tape: &mut Tape<T>, hidden: Var, w2: Var) -> Result<Var> {
    let k = tape.shape(w2)[0];
    let s = tape.conv2d(hidden, w2, ConvParams::same(k))?;
    tape.pelu(s, T::of(PELU_ALPHA))
}

fn check_channels<T: Scalar>(x: &Tensor<T>, w: &ClassifierWeights<T>) -> Result<()> {
    let d = *x.shape().last().unwrap_or(&0);
    if d != w.channels() || !(x.rank() == 3 || x.rank() == 4) {
        return Err(Error::ShapeMismatch {
            op: "classify",
            lhs: x.shape().to_vec(),
            rhs: w.w1.shape().to_vec(),
        });
    }
    Ok(())
}

/// Score map `H×W` for a single `H×W×D` feature map.
pub fn classify<T: Scalar>(x: &Tensor<T>, w: &ClassifierWeights<T>) -> Result<Tensor<T>> {
    check_channels(x, w)?;
    if x.rank() != 3 {
        return Err(Error::invalid(format!("classify expects H×W×D, got {:?}", x.shape())));
    }
    let (h, wd) = (x.shape()[0], x.shape()[1]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w1 = tape.constant(w.w1.clone());
    let w2 = tape.constant(w.w2.clone());
    let f = forward(&mut tape, xv, w1, w2)?;
    tape.value(f).clone().reshape([h, wd])
}

/// Sampled Gaussian of peak 1 centered at `(cx, cy)` in cell coordinates.
pub fn make_label<T: Scalar>(cx: f64, cy: f64, sigma: f64, height: usize, width: usize) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("label sigma must be positive, got {sigma}")));
    }
    let mut data = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            data.push(T::of((-d2 / (2.0 * sigma * sigma)).exp()));
        }
    }
    Tensor::new(vec![height, width], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub gamma: f64,
}

/// Weighted training set of the online objective.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMemory<T> {
    entries: Vec<Sample<T>>,
    capacity: usize,
    eta: f64,
}

impl<T: Scalar> SampleMemory<T> {
    pub fn new(capacity: usize, eta: f64) -> Result<Self> {
        if capacity == 0 || !(eta > 0.0 && eta < 1.0) {
            return Err(Error::invalid(format!("memory capacity {capacity}, rate {eta}")));
        }
        Ok(SampleMemory {
            entries: Vec::new(),
            capacity,
            eta,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[Sample<T>] {
        &self.entries
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.gamma).collect()
    }

    fn check(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        if x.rank() != 3 || y.shape() != &x.shape()[..2] {
            return Err(Error::ShapeMismatch {
                op: "add_sample",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        if let Some(first) = self.entries.first() {
            if first.x.shape() != x.shape() {
                return Err(Error::ShapeMismatch {
                    op: "add_sample",
                    lhs: first.x.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Replace the contents with equally weighted samples.
    pub fn reset_equal(&mut self, samples: Vec<(Tensor<T>, Tensor<T>)>) -> Result<()> {
        self.entries.clear();
        let n = samples.len().min(self.capacity);
        for (x, y) in samples.into_iter().take(n) {
            self.check(&x, &y)?;
            self.entries.push(Sample {
                x,
                y,
                gamma: 1.0 / n as f64,
            });
        }
        Ok(())
    }

    /// Decay old weights by `1 - η·boost`, give the new sample `η·boost`,
    /// renormalize. At capacity the lightest entry is evicted first.
    pub fn add_sample(&mut self, x: Tensor<T>, y: Tensor<T>, boost: f64) -> Result<()> {
        self.check(&x, &y)?;
        let rate = (self.eta * boost).clamp(0.0, 1.0);
        if self.entries.is_empty() {
            self.entries.push(Sample { x, y, gamma: 1.0 });
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            let (idx, _) = self
                .entries
                .iter()
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |best, (i, e)| if e.gamma < best.1 { (i, e.gamma) } else { best },
                );
            self.entries.remove(idx);
        }
        for e in &mut self.entries {
            e.gamma *= 1.0 - rate;
        }
        self.entries.push(Sample { x, y, gamma: rate });
        let total: f64 = self.entries.iter().map(|e| e.gamma).sum();
        if total > 0.0 {
            for e in &mut self.entries {
                e.gamma /= total;
            }
        }
        Ok(())
    }

    /// `N×H×W×D` features, `N×H×W×1` labels and `√γ` broadcast like the labels.
    fn stacked(&self) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let first = self
            .entries
            .first()
            .ok_or_else(|| Error::invalid("sample memory is empty"))?;
        let n = self.entries.len();
        let [h, w, d] = [first.x.shape()[0], first.x.shape()[1], first.x.shape()[2]];
        let mut xs = Vec::with_capacity(n * h * w * d);
        let mut ys = Vec::with_capacity(n * h * w);
        let mut gs = Vec::with_capacity(n * h * w);
        for e in &self.entries {
            xs.extend_from_slice(e.x.data());
            ys.extend_from_slice(e.y.data());
            gs.extend(std::iter::repeat_n(T::of(e.gamma.sqrt()), h * w));
        }
        Ok((
            Tensor::new(vec![n, h, w, d], xs)?,
            Tensor::new(vec![n, h, w, 1], ys)?,
            Tensor::new(vec![n, h, w, 1], gs)?,
        ))
    }
}

/// The weighted, regularized least-squares objective over a memory.
/// With `frozen` set, only `w2` is optimized and the hidden activations are
/// precomputed once.
pub struct ClassifierProblem<T> {
    x: Tensor<T>,
    y: Tensor<T>,
    sqrt_gamma: Tensor<T>,
    lambda: [f64; 2],
    frozen: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ClassifierProblem<T> {
    pub fn new(memory: &SampleMemory<T>, lambda: [f64; 2]) -> Result<Self> {
        let (x, y, sqrt_gamma) = memory.stacked()?;
        Ok(ClassifierProblem {
            x,
            y,
            sqrt_gamma,
            lambda,
            frozen: None,
        })
    }

    /// Objective over `w2` only, `w1` held constant.
    pub fn with_frozen_w1(memory: &SampleMemory<T>, lambda: [f64; 2], w1: &Tensor<T>) -> Result<Self> {
        let (x, y, sqrt_gamma) = memory.stacked()?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w1v = tape.constant(w1.clone());
        let hidden = tape.conv2d(xv, w1v, ConvParams::new(1, 0))?;
        let hidden = tape.value(hidden).clone();
        Ok(ClassifierProblem {
            x,
            y,
            sqrt_gamma,
            lambda,
            frozen: Some((w1.clone(), hidden)),
        })
    }

    /// Data blocks `√γ_j (f(x_j) - y_j)` followed by `√λ_k w_k`.
    pub fn residual_vector(&self, tape: &mut Tape<T>, w1: Var, w2: Var, hidden: Option<Var>) -> Result<Var> {
        let f = match hidden {
            Some(hv) => second_layer(tape, hv, w2)?,
            None => {
                let x = tape.constant(self.x.clone());
                forward(tape, x, w1, w2)?
            }
        };
        let y = tape.constant(self.y.clone());
        let diff = tape.sub(f, y)?;
        let g = tape.constant(self.sqrt_gamma.clone());
        let data = tape.mul(diff, g)?;
        let data = tape.flatten(data)?;
        let mut parts = vec![data];
        for (w, lam) in [(w1, self.lambda[0]), (w2, self.lambda[1])] {
            let flat = tape.flatten(w)?;
            parts.push(tape.scale(flat, T::of(lam.sqrt()))?);
        }
        tape.concat(&parts, 0)
    }
}

impl<T: Scalar> ResidualProblem<T> for ClassifierProblem<T> {
    fn residuals(&self, tape: &mut Tape<T>, weights: &[Var]) -> Result<Var> {
        match (&self.frozen, weights) {
            (Some((w1, hidden)), [w2]) => {
                let w1 = tape.constant(w1.clone());
                let h = tape.constant(hidden.clone());
                self.residual_vector(tape, w1, *w2, Some(h))
            }
            (None, [w1, w2]) => self.residual_vector(tape, *w1, *w2, None),
            _ => Err(Error::invalid(format!(
                "classifier problem got {} weight tensors",
                weights.len()
            ))),
        }
    }
}

fn run_optimizer<T: Scalar>(
    problem: &ClassifierProblem<T>,
    weights: &mut [Tensor<T>],
    iters: (usize, usize),
    optimizer: Optimizer,
) -> Result<OptimizerRun> {
    match optimizer {
        Optimizer::GaussNewton => gauss_newton_cg(problem, weights, iters.0, iters.1),
        Optimizer::Gd {
            lr,
            momentum,
            budget_factor,
        } => {
            let steps = iters.0 * (1 + 2 * iters.1) * budget_factor.max(1);
            gradient_descent(problem, weights, steps, lr, momentum)
        }
    }
}

/// First-frame fit of both layers.
pub fn train_initial<T: Scalar>(
    memory: &SampleMemory<T>,
    w: &mut ClassifierWeights<T>,
    cfg: &ClassifierConfig,
    optimizer: Optimizer,
) -> Result<OptimizerRun> {
    let problem = ClassifierProblem::new(memory, w.lambda)?;
    let mut ws = [w.w1.clone(), w.w2.clone()];
    let run = run_optimizer(&problem, &mut ws, cfg.init_iters, optimizer)?;
    let [w1, w2] = ws;
    w.w1 = w1;
    w.w2 = w2;
    Ok(run)
}

/// Periodic refit of the final layer only.
pub fn train_update<T: Scalar>(
    memory: &SampleMemory<T>,
    w: &mut ClassifierWeights<T>,
    cfg: &ClassifierConfig,
    optimizer: Optimizer,
) -> Result<OptimizerRun> {
    let problem = ClassifierProblem::with_frozen_w1(memory, w.lambda, &w.w1)?;
    let mut ws = [w.w2.clone()];
    let run = run_optimizer(&problem, &mut ws, cfg.update_iters, optimizer)?;
    let [w2] = ws;
    w.w2 = w2;
    Ok(run)
}

/// One augmented view of the first patch; `shift` is how far the target
/// center moved, in patch pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPatch {
    pub image: Image,
    pub shift: (f64, f64),
}

/// The original patch followed by `n - 1` seeded views cycling through
/// translation, rotation, blur and dropout with random magnitudes.
pub fn augment_first_frame(patch: &Image, n: usize, seed: u64) -> Vec<AugmentedPatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = patch.width().max(patch.height()) as f64;
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    out.push(AugmentedPatch {
        image: patch.clone(),
        shift: (0.0, 0.0),
    });
    for i in 1..n {
        let aug = match i % 4 {
            1 => {
                let r = side / 12.0;
                let (dx, dy) = (rng.random_range(-r..r), rng.random_range(-r..r));
                AugmentedPatch {
                    image: patch.translate(dx, dy),
                    shift: (dx, dy),
                }
            }
            2 => {
                let deg: f64 = rng.random_range(5.0..45.0);
                let deg = if rng.random_bool(0.5) { deg } else { -deg };
                AugmentedPatch {
                    image: patch.rotate(deg),
                    shift: (0.0, 0.0),
                }
            }
            3 => AugmentedPatch {
                image: patch.blur(rng.random_range(0.5..2.5)),
                shift: (0.0, 0.0),
            },
            _ => AugmentedPatch {
                image: patch.dropout(rng.random_range(0.1..0.3), &mut rng),
                shift: (0.0, 0.0),
            },
        };
        out.push(aug);
    }
    out
}

/// Location of the maximum of a score map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub value: f64,
    /// Sub-cell position from a parabola through each axis' neighbours.
    pub x: f64,
    pub y: f64,
}

pub fn find_peak<T: Scalar>(score: &Tensor<T>) -> Result<Peak> {
    if score.rank() != 2 || score.is_empty() {
        return Err(Error::invalid(format!(
            "score map must be H×W, got {:?}",
            score.shape()
        )));
    }
    let (h, w) = (score.shape()[0], score.shape()[1]);
    let d = score.data();
    let mut best = 0;
    for i in 1..d.len() {
        if d[i] > d[best] {
            best = i;
        }
    }
    let (row, col) = (best / w, best % w);
    let at = |r: usize, c: usize| d[r * w + c].f64();
    let refine = |lo: Option<f64>, mid: f64, hi: Option<f64>| match (lo, hi) {
        (Some(a), Some(b)) => {
            let denom = a - 2.0 * mid + b;
            if denom < 0.0 {
                (0.5 * (a - b) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    let mid = at(row, col);
    let dx = refine(
        col.checked_sub(1).map(|c| at(row, c)),
        mid,
        (col + 1 < w).then(|| at(row, col + 1)),
    );
    let dy = refine(
        row.checked_sub(1).map(|r| at(r, col)),
        mid,
        (row + 1 < h).then(|| at(row + 1, col)),
    );
    Ok(Peak {
        row,
        col,
        value: mid,
        x: col as f64 + dx,
        y: row as f64 + dy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::jtj_apply;

    fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    fn small_config() -> ClassifierConfig {
        ClassifierConfig {
            hidden: 3,
            kernel: 2,
            ..Default::default()
        }
    }

    fn memory(n: usize, h: usize, d: usize, seed: u64) -> SampleMemory<f64> {
        let mut m = SampleMemory::new(50, 0.01).unwrap();
        let samples = (0..n)
            .map(|j| {
                let x = random_tensor(&[h, h, d], seed + j as u64, 1.0);
                let y = make_label(h as f64 / 2.0, h as f64 / 2.0, 1.0, h, h).unwrap();
                (x, y)
            })
            .collect();
        m.reset_equal(samples).unwrap();
        m
    }

    /// `Σ γ_j |f(x_j) - y_j|² + Σ λ_k |w_k|²`, one sample at a time.
    fn direct_loss(m: &SampleMemory<f64>, w: &ClassifierWeights<f64>) -> f64 {
        let mut total = 0.0;
        for e in m.entries() {
            let f = classify(&e.x, w).unwrap();
            let r = f.sub(&e.y).unwrap();
            total += e.gamma * r.norm_sq();
        }
        total + w.lambda[0] * w.w1.norm_sq() + w.lambda[1] * w.w2.norm_sq()
    }

    #[test]
    fn zero_weights_give_zero_scores() {
        let mut w = ClassifierWeights::<f64>::init(4, &small_config(), 0).unwrap();
        w.w1 = Tensor::zeros(w.w1.shape().to_vec());
        w.w2 = Tensor::zeros(w.w2.shape().to_vec());
        let s = classify(&random_tensor(&[5, 6, 4], 1, 1.0), &w).unwrap();
        assert_eq!(s.shape(), &[5, 6]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let w = ClassifierWeights::<f64>::init(4, &small_config(), 0).unwrap();
        assert!(classify(&random_tensor(&[5, 5, 3], 1, 1.0), &w).is_err());
    }

    #[test]
    fn translation_equivariance_on_interior() {
        let cfg = ClassifierConfig {
            hidden: 4,
            kernel: 4,
            ..Default::default()
        };
        let w = ClassifierWeights::<f64>::init(3, &cfg, 2).unwrap();
        let x = random_tensor(&[12, 12, 3], 3, 1.0);
        let mut shifted = Tensor::zeros(vec![12, 12, 3]);
        for i in 0..12 {
            for j in 1..12 {
                for c in 0..3 {
                    shifted.data_mut()[(i * 12 + j) * 3 + c] = x.data()[(i * 12 + j - 1) * 3 + c];
                }
            }
        }
        let a = classify(&x, &w).unwrap();
        let b = classify(&shifted, &w).unwrap();
        for i in 2..9 {
            for j in 3..9 {
                assert!((a.data()[i * 12 + j] - b.data()[i * 12 + j + 1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_values() {
        let y = make_label::<f64>(3.0, 2.0, 1.5, 5, 7).unwrap();
        assert_eq!(y.data()[2 * 7 + 3], 1.0);
        assert!((y.data()[2 * 7 + 3 + 1] - y.data()[2 * 7 + 3 - 1]).abs() < 1e-15);
        let z = make_label::<f64>(0.0, 0.0, 2.0, 1, 3).unwrap();
        assert!((z.data()[2] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((z.data()[2] - 0.6065306597).abs() < 1e-9);
        assert!(make_label::<f64>(0.0, 0.0, 0.0, 2, 2).is_err());
    }

    #[test]
    fn memory_weights() {
        let x = Tensor::<f64>::zeros(vec![2, 2, 1]);
        let y = Tensor::<f64>::zeros(vec![2, 2]);
        let mut m = SampleMemory::new(50, 0.01).unwrap();
        m.add_sample(x.clone(), y.clone(), 1.0).unwrap();
        assert_eq!(m.weights(), vec![1.0]);
        m.add_sample(x.clone(), y.clone(), 1.0).unwrap();
        let g = m.weights();
        assert!((g[0] - 0.99).abs() < 1e-15 && (g[1] - 0.01).abs() < 1e-15);

        let mut m = SampleMemory::new(50, 0.01).unwrap();
        m.add_sample(x.clone(), y.clone(), 1.0).unwrap();
        m.add_sample(x.clone(), y.clone(), 2.0).unwrap();
        assert!((m.weights()[1] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn memory_evicts_lightest_at_capacity() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 1]);
        let y = Tensor::<f64>::zeros(vec![1, 1]);
        let mut m = SampleMemory::new(3, 0.5).unwrap();
        for _ in 0..3 {
            m.add_sample(x.clone(), y.clone(), 1.0).unwrap();
        }
        // [0.25, 0.25, 0.5]: the first 0.25 goes.
        let mut marked = x.clone();
        marked.data_mut()[0] = 7.0;
        m.add_sample(marked, y.clone(), 1.0).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries()[2].x.data()[0], 7.0);
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_norm_matches_direct_loss() {
        let m = memory(3, 5, 2, 10);
        let mut w = ClassifierWeights::<f64>::init(2, &small_config(), 4).unwrap();
        w.w2 = random_tensor(w.w2.shape(), 9, 0.5);
        let p = ClassifierProblem::new(&m, w.lambda).unwrap();
        let loss = p.loss(&[w.w1.clone(), w.w2.clone()]).unwrap();
        let want = direct_loss(&m, &w);
        assert!(((loss - want) / want).abs() < 1e-12, "{loss} vs {want}");
        let frozen = ClassifierProblem::with_frozen_w1(&m, w.lambda, &w.w1).unwrap();
        let lf = frozen.loss(&[w.w2.clone()]).unwrap();
        assert!(((lf - want) / want).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_without_regularization_is_zero() {
        let mut w = ClassifierWeights::<f64>::init(2, &small_config(), 4).unwrap();
        w.lambda = [0.0, 0.0];
        let mut m = SampleMemory::new(5, 0.01).unwrap();
        let x = random_tensor(&[4, 4, 2], 1, 1.0);
        let y = classify(&x, &w).unwrap();
        m.add_sample(x, y, 1.0).unwrap();
        let p = ClassifierProblem::new(&m, w.lambda).unwrap();
        assert_eq!(p.loss(&[w.w1.clone(), w.w2.clone()]).unwrap(), 0.0);
    }

    #[test]
    fn empty_memory_is_an_error() {
        let m = SampleMemory::<f64>::new(5, 0.01).unwrap();
        assert!(ClassifierProblem::new(&m, [0.0, 0.0]).is_err());
    }

    #[test]
    fn call_counts_and_frozen_layer() {
        let cfg = small_config();
        let m = memory(4, 6, 3, 20);
        let mut w = ClassifierWeights::<f64>::init(3, &cfg, 5).unwrap();
        let run = train_initial(&m, &mut w, &cfg, Optimizer::GaussNewton).unwrap();
        assert_eq!(run.backprop_calls, 126);
        assert!(run.final_loss() < run.initial_loss());
        let w1 = w.w1.clone();
        let run = train_update(&m, &mut w, &cfg, Optimizer::GaussNewton).unwrap();
        assert_eq!(run.backprop_calls, 11);
        assert_eq!(w.w1, w1);
    }

    #[test]
    fn jtj_matches_assembled_jacobian() {
        // J column by column: d r / d w_i via one backprop per residual.
        let cfg = small_config();
        let m = memory(2, 4, 2, 30);
        let mut w = ClassifierWeights::<f64>::init(2, &cfg, 6).unwrap();
        w.w2 = random_tensor(w.w2.shape(), 8, 0.5);
        let p = ClassifierProblem::new(&m, w.lambda).unwrap();
        let weights = [w.w1.clone(), w.w2.clone()];
        let mut tape = Tape::new();
        let vars: Vec<Var> = weights.iter().map(|t| tape.leaf(t.clone())).collect();
        let r = p.residuals(&mut tape, &vars).unwrap();
        let nr = tape.value(r).len();
        let nw = weights.iter().map(|t| t.len()).sum::<usize>();
        let mut jac = vec![0.0; nr * nw];
        for i in 0..nr {
            let ri = tape.slice(r, 0, i, 1).unwrap();
            let ri = tape.sum(ri).unwrap();
            let g = tape.backprop(ri, &vars).unwrap();
            let row: Vec<f64> = g.iter().flat_map(|t| t.data().to_vec()).collect();
            jac[i * nw..(i + 1) * nw].copy_from_slice(&row);
        }
        let dir = random_tensor(&[nw], 77, 1.0);
        let mut jp = vec![0.0; nr];
        for i in 0..nr {
            jp[i] = (0..nw).map(|k| jac[i * nw + k] * dir.data()[k]).sum();
        }
        let want: Vec<f64> = (0..nw)
            .map(|k| (0..nr).map(|i| jac[i * nw + k] * jp[i]).sum())
            .collect();
        let got = jtj_apply(&p, &weights, dir.data()).unwrap();
        let err: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(err / norm < 1e-10, "{}", err / norm);
    }

    #[test]
    fn augmentation_contract() {
        let mut img = Image::new(32, 32);
        for i in 0..32 {
            for j in 0..32 {
                img.set_pixel(j, i, [(i * j % 7) as f32 / 7.0, j as f32 / 32.0, 0.3]);
            }
        }
        assert_eq!(
            augment_first_frame(&img, 1, 0),
            vec![AugmentedPatch {
                image: img.clone(),
                shift: (0.0, 0.0)
            }]
        );
        let a = augment_first_frame(&img, 30, 5);
        assert_eq!(a.len(), 30);
        assert_eq!(a[0].image, img);
        assert_eq!(a, augment_first_frame(&img, 30, 5));
        for i in 0..30 {
            for j in i + 1..30 {
                assert_ne!(a[i].image, a[j].image, "{i} {j}");
            }
        }
    }

    #[test]
    fn peak_subcell() {
        let mut s = Tensor::<f64>::zeros(vec![5, 5]);
        s.data_mut()[2 * 5 + 2] = 1.0;
        s.data_mut()[2 * 5 + 3] = 0.5;
        s.data_mut()[2 * 5 + 1] = 0.5;
        let p = find_peak(&s).unwrap();
        assert_eq!((p.row, p.col), (2, 2));
        assert_eq!((p.x, p.y), (2.0, 2.0));
        s.data_mut()[2 * 5 + 3] = 0.8;
        let p = find_peak(&s).unwrap();
        assert!(p.x > 2.0 && p.x < 2.5);
    }
}
