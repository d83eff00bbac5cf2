//! Least-squares optimizers for the online classifier, plus ADAM for
//! offline training.
//!
//! [`gauss_newton_cg`] minimizes `L(w) = |r(w)|²` with Gauss-Newton outer
//! iterations whose quadratic subproblem is solved by conjugate gradient.
//! The only operator CG needs, `J^T J p`, is evaluated with two backprop
//! calls and no hand-written Jacobian code:
//!
//! ```text
//! h  = BackProp(r·u, w)   = J^T u     (u a detached copy of r)
//! q1 = BackProp(h·p, u)   = J p       (p constant)
//! q2 = BackProp(r·q1, w)  = J^T J p   (q1 constant)
//! ```

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, Scalar, Tensor};

/// A sum-of-squares objective given by its residual vector.
pub trait ResidualProblem<T: Scalar> {
    /// Record `r(w)` on `tape` for the weight nodes `weights` (one per
    /// optimized tensor, in order) and return it as a rank-1 node.
    fn residuals(&self, tape: &mut Tape<T>, weights: &[Var]) -> Result<Var>;

    fn loss(&self, weights: &[Tensor<T>]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let r = self.residuals(&mut tape, &vars)?;
        Ok(tape.value(r).norm_sq().f64())
    }
}

/// Loss evaluated after a given number of backprop calls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub backprop_calls: usize,
    pub loss: f64,
}

/// Record of one optimizer invocation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerRun {
    pub n_gn: usize,
    pub n_cg: usize,
    pub backprop_calls: usize,
    pub trace: Vec<TracePoint>,
}

impl OptimizerRun {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map(|p| p.loss).unwrap_or(f64::NAN)
    }

    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map(|p| p.loss).unwrap_or(f64::NAN)
    }

    /// `backprop_calls,loss` lines with a header.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("backprop_calls,loss\n");
        for p in &self.trace {
            s.push_str(&format!("{},{:.9e}\n", p.backprop_calls, p.loss));
        }
        s
    }
}

/// State of the inner CG loop after one iteration, for inspection.
pub struct CgStep<'a, T> {
    pub gn_iter: usize,
    pub cg_iter: usize,
    /// Current increment `Δw`.
    pub delta: &'a [T],
    /// Current CG residual `g` (negative gradient of the half subproblem).
    pub g: &'a [T],
    pub alpha: T,
    pub beta: T,
}

/// CG stops early only on breakdown: `g·g` or the curvature `q2·p` at or
/// below this value. Anything positive keeps the fixed iteration budget.
pub const CG_TOL: f64 = 0.0;

fn split_constants<T: Scalar>(tape: &mut Tape<T>, flat: &[T], like: &[Tensor<T>]) -> Result<Vec<Var>> {
    let mut off = 0;
    let mut out = Vec::with_capacity(like.len());
    for t in like {
        let piece = Tensor::new(t.shape().to_vec(), flat[off..off + t.len()].to_vec())?;
        off += t.len();
        out.push(tape.constant(piece));
    }
    Ok(out)
}

fn values<T: Scalar>(tape: &Tape<T>, vars: &[Var]) -> Vec<T> {
    vars.iter()
        .flat_map(|v| tape.value(*v).data().iter().copied())
        .collect()
}

fn checked_loss(loss: f64, context: impl FnOnce() -> String) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss { context: context() })
    }
}

/// `J^T J p` at `weights`, via the double-backprop sequence.
pub fn jtj_apply<T: Scalar, P: ResidualProblem<T> + ?Sized>(
    problem: &P,
    weights: &[Tensor<T>],
    p: &[T],
) -> Result<Vec<T>> {
    let total: usize = weights.iter().map(|w| w.len()).sum();
    if p.len() != total {
        return Err(Error::invalid(format!(
            "direction has {} entries, weights {total}",
            p.len()
        )));
    }
    let mut tape = Tape::new();
    let wv: Vec<Var> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
    let r = problem.residuals(&mut tape, &wv)?;
    let u = tape.leaf(tape.value(r).clone());
    let ru = tape.dot(r, u)?;
    let h = tape.grad(ru, &wv)?;
    let pv = split_constants(&mut tape, p, weights)?;
    let q1 = jacobian_times(&mut tape, &h, &pv, u)?;
    let q1 = tape.constant(q1);
    let rq = tape.dot(r, q1)?;
    let q2 = tape.grad(rq, &wv)?;
    Ok(values(&tape, &q2))
}

/// `BackProp(h·p, u)` for a weight list split into several tensors.
fn jacobian_times<T: Scalar>(tape: &mut Tape<T>, h: &[Var], p: &[Var], u: Var) -> Result<Tensor<T>> {
    let mut acc: Option<Var> = None;
    for (hk, pk) in h.iter().zip(p) {
        let d = tape.dot(*hk, *pk)?;
        acc = Some(match acc {
            None => d,
            Some(a) => tape.add(a, d)?,
        });
    }
    let s = acc.ok_or_else(|| Error::invalid("no weights to optimize"))?;
    let q1 = tape.grad(s, &[u])?;
    Ok(tape.value(q1[0]).clone())
}

/// Gauss-Newton with conjugate-gradient inner solves. `weights` is updated
/// in place. Each outer iteration costs `1 + 2 n_cg` backprop calls unless
/// CG terminates early on `g·g < 1e-12` or `q2·p <= 1e-12`.
pub fn gauss_newton_cg<T: Scalar, P: ResidualProblem<T> + ?Sized>(
    problem: &P,
    weights: &mut [Tensor<T>],
    n_gn: usize,
    n_cg: usize,
) -> Result<OptimizerRun> {
    gauss_newton_cg_observed(problem, weights, n_gn, n_cg, &mut |_| {})
}

pub fn gauss_newton_cg_observed<T: Scalar, P: ResidualProblem<T> + ?Sized>(
    problem: &P,
    weights: &mut [Tensor<T>],
    n_gn: usize,
    n_cg: usize,
    observer: &mut dyn FnMut(&CgStep<'_, T>),
) -> Result<OptimizerRun> {
    if n_gn == 0 || n_cg == 0 {
        return Err(Error::invalid("Gauss-Newton needs n_gn >= 1 and n_cg >= 1"));
    }
    let mut run = OptimizerRun {
        n_gn,
        n_cg,
        ..Default::default()
    };
    let tol = T::of(CG_TOL);
    for gn in 0..n_gn {
        let mut tape = Tape::new();
        let wv: Vec<Var> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let r = problem.residuals(&mut tape, &wv)?;
        let loss = checked_loss(tape.value(r).norm_sq().f64(), || format!("Gauss-Newton iteration {gn}"))?;
        run.trace.push(TracePoint {
            backprop_calls: run.backprop_calls,
            loss,
        });

        let u = tape.leaf(tape.value(r).clone());
        let ru = tape.dot(r, u)?;
        let h = tape.grad(ru, &wv)?;
        let mut g: Vec<T> = values(&tape, &h).into_iter().map(|v| -v).collect();
        let mut p = vec![T::zero(); g.len()];
        let mut delta = vec![T::zero(); g.len()];
        let mut rho1 = T::one();
        let mark = tape.len();
        let start_calls = tape.backprop_calls();

        for cg in 0..n_cg {
            let rho2 = rho1;
            rho1 = dot(&g, &g);
            if rho1 <= tol {
                break;
            }
            let beta = rho1 / rho2;
            for (pi, &gi) in p.iter_mut().zip(&g) {
                *pi = gi + beta * *pi;
            }
            let pv = split_constants(&mut tape, &p, weights)?;
            let q1 = jacobian_times(&mut tape, &h, &pv, u)?;
            let q1 = tape.constant(q1);
            let rq = tape.dot(r, q1)?;
            let q2v = tape.grad(rq, &wv)?;
            let q2 = values(&tape, &q2v);
            tape.truncate(mark);

            let curvature = dot(&q2, &p);
            if curvature <= tol {
                break;
            }
            let alpha = rho1 / curvature;
            for i in 0..g.len() {
                g[i] = g[i] - alpha * q2[i];
                delta[i] = delta[i] + alpha * p[i];
            }
            observer(&CgStep {
                gn_iter: gn,
                cg_iter: cg,
                delta: &delta,
                g: &g,
                alpha,
                beta,
            });
        }
        run.backprop_calls += 1 + tape.backprop_calls() - start_calls;

        let mut off = 0;
        for w in weights.iter_mut() {
            let n = w.len();
            for (wi, &d) in w.data_mut().iter_mut().zip(&delta[off..off + n]) {
                *wi = *wi + d;
            }
            off += n;
        }
    }
    let loss = checked_loss(problem.loss(weights)?, || "final Gauss-Newton iterate".into())?;
    run.trace.push(TracePoint {
        backprop_calls: run.backprop_calls,
        loss,
    });
    Ok(run)
}

/// Gradient descent with heavy-ball momentum on `|r(w)|²`, one backprop
/// call per step.
pub fn gradient_descent<T: Scalar, P: ResidualProblem<T> + ?Sized>(
    problem: &P,
    weights: &mut [Tensor<T>],
    steps: usize,
    lr: f64,
    momentum: f64,
) -> Result<OptimizerRun> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    let (lr_t, mom_t) = (T::of(lr), T::of(momentum));
    let mut velocity: Vec<Vec<T>> = weights.iter().map(|w| vec![T::zero(); w.len()]).collect();
    let mut run = OptimizerRun::default();
    let mut initial = None;
    for step in 0..steps {
        let mut tape = Tape::new();
        let wv: Vec<Var> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let r = problem.residuals(&mut tape, &wv)?;
        let l = tape.dot(r, r)?;
        let loss = checked_loss(tape.value(l).item().f64(), || format!("gradient descent step {step}"))?;
        let l0 = *initial.get_or_insert(loss);
        if loss > 1e3 * l0 {
            return Err(Error::Diverged { iteration: step, loss });
        }
        run.trace.push(TracePoint {
            backprop_calls: run.backprop_calls,
            loss,
        });
        let grads = tape.backprop(l, &wv)?;
        run.backprop_calls += 1;
        for ((w, v), g) in weights.iter_mut().zip(&mut velocity).zip(&grads) {
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = mom_t * *vi - lr_t * gi;
                *wi = *wi + *vi;
            }
        }
    }
    let loss = checked_loss(problem.loss(weights)?, || "final gradient descent iterate".into())?;
    if let Some(l0) = initial {
        if loss > 1e3 * l0 {
            return Err(Error::Diverged { iteration: steps, loss });
        }
    }
    run.trace.push(TracePoint {
        backprop_calls: run.backprop_calls,
        loss,
    });
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update of `params` in place.
pub fn adam<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    state.t += 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(state.t as i32));
    let c2 = T::one() - T::of(cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.epsilon));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// r(w) = A w - b with explicit matrices.
    pub(crate) struct Linear {
        a: Tensor<f64>,
        b: Tensor<f64>,
    }

    impl ResidualProblem<f64> for Linear {
        fn residuals(&self, tape: &mut Tape<f64>, w: &[Var]) -> Result<Var> {
            let a = tape.constant(self.a.clone());
            let n = tape.value(w[0]).len();
            let wcol = tape.reshape(w[0], &[n, 1])?;
            let aw = tape.matmul(a, wcol)?;
            let aw = tape.flatten(aw)?;
            let b = tape.constant(self.b.clone());
            tape.sub(aw, b)
        }
    }

    fn diag_problem() -> Linear {
        Linear {
            a: Tensor::from_f64([2, 2], &[2.0, 0.0, 0.0, 1.0]).unwrap(),
            b: Tensor::from_f64([2], &[2.0, 1.0]).unwrap(),
        }
    }

    #[test]
    fn one_pass_solves_linear_problem() {
        let mut w = vec![Tensor::<f64>::zeros([2])];
        let run = gauss_newton_cg(&diag_problem(), &mut w, 1, 2).unwrap();
        assert!((w[0].data()[0] - 1.0).abs() < 1e-6);
        assert!((w[0].data()[1] - 1.0).abs() < 1e-6);
        assert!(run.final_loss() < 1e-12);
    }

    #[test]
    fn zero_residual_leaves_weights() {
        let mut w = vec![Tensor::from_f64([2], &[1.0, 1.0]).unwrap()];
        let before = w.clone();
        let run = gauss_newton_cg(&diag_problem(), &mut w, 2, 3).unwrap();
        assert_eq!(w, before);
        // g = 0 exits CG before any inner backprop.
        assert_eq!(run.backprop_calls, 2);
    }

    #[test]
    fn call_budget() {
        let p = Linear {
            a: Tensor::from_f64([3, 2], &[1.0, 2.0, 0.5, -1.0, 3.0, 0.2]).unwrap(),
            b: Tensor::from_f64([3], &[1.0, 0.0, -1.0]).unwrap(),
        };
        let mut w = vec![Tensor::<f64>::zeros([2])];
        // Two CG steps reach the exact solution, so a third would exit early.
        let run = gauss_newton_cg(&p, &mut w, 1, 2).unwrap();
        assert_eq!(run.backprop_calls, 1 + 2 * 2);
        assert_eq!(run.trace.len(), 2);
    }

    #[test]
    fn jtj_of_identity_residual() {
        struct Ident;
        impl ResidualProblem<f64> for Ident {
            fn residuals(&self, _t: &mut Tape<f64>, w: &[Var]) -> Result<Var> {
                Ok(w[0])
            }
        }
        let w = vec![Tensor::from_f64([3], &[0.2, -1.0, 4.0]).unwrap()];
        let p = [1.5, -2.0, 0.25];
        let q = jtj_apply(&Ident, &w, &p).unwrap();
        assert_eq!(q, p.to_vec());
    }

    #[test]
    fn gd_halves_on_half_square() {
        struct Half;
        impl ResidualProblem<f64> for Half {
            fn residuals(&self, t: &mut Tape<f64>, w: &[Var]) -> Result<Var> {
                t.scale(w[0], std::f64::consts::FRAC_1_SQRT_2)
            }
        }
        let mut w = vec![Tensor::from_f64([2], &[8.0, -4.0]).unwrap()];
        let close = |w: &Tensor<f64>, want: [f64; 2]| w.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12);
        gradient_descent(&Half, &mut w, 1, 0.5, 0.0).unwrap();
        assert!(close(&w[0], [4.0, -2.0]), "{:?}", w[0]);
        let run = gradient_descent(&Half, &mut w, 2, 0.5, 0.0).unwrap();
        assert!(close(&w[0], [1.0, -0.5]), "{:?}", w[0]);
        assert_eq!(run.backprop_calls, 2);
    }

    #[test]
    fn gd_divergence_aborts() {
        let mut w = vec![Tensor::<f64>::zeros([2])];
        let err = gradient_descent(&diag_problem(), &mut w, 50, 10.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState::new(2);
        adam(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // After bias correction mhat = g, vhat = g², so the step is
        // lr * g / (|g| + eps).
        let cfg = AdamConfig::default();
        let g = [0.3f64, -2.0, 1e-9];
        let mut p = vec![0.0f64; 3];
        let mut s = AdamState::new(3);
        adam(&mut p, &g, &mut s, &cfg).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let want = -cfg.lr * gi / (gi.abs() + cfg.epsilon);
            assert!((pi - want).abs() < 1e-15, "{pi} vs {want}");
        }
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam(&mut p, &[0.7], &mut s, &cfg).unwrap();
            last = before - p[0];
        }
        assert!((last - cfg.lr).abs() < 1e-8, "{last}");
    }
}
