//! Central finite-difference checks of every differentiable primitive.
//!
//! Each case builds a scalar function of a few inputs on a fresh tape. The
//! reference gradient perturbs one input entry at a time and re-evaluates
//! the forward pass only, so it never touches a backward rule.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, RunningStats, Tape, Var};
use crate::classifier;
use crate::error::Result;
use crate::kernels::ConvParams;
use crate::prpool::centers_to_corners;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tol
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Relative error `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

fn evaluate(build: &Build, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let s = build(&mut tape, &vars)?;
    Ok(tape.value(s).item())
}

/// Autodiff vs central differences for all inputs of `build`.
pub fn check(name: &str, build: &Build, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let s = build(&mut tape, &vars)?;
    let analytic: Vec<f64> = tape
        .backprop(s, &vars)?
        .iter()
        .flat_map(|g| g.data().to_vec())
        .collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let fp = evaluate(build, &work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let fm = evaluate(build, &work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        rel_err: relative_error(&analytic, &numeric),
        tol,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random values bounded away from zero (for kinked activations).
fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Summarize any tensor node as a scalar with a fixed random weighting, so
/// every output entry contributes a distinct coefficient.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    tape.dot(v, w)
}

/// Every primitive case. `tol` is 1e-5 except for pooling with respect to
/// box coordinates, where the hat-kernel integral is only C¹.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-5;
    let mut out = Vec::new();

    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[3, 4], -1.0, 1.0);
    out.push(check(
        "add/sub/scale",
        &|t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let d = t.scale(d, 1.7)?;
            let m = t.mul(d, s)?;
            weighted_sum(t, m, 1)
        },
        &[a.clone(), b.clone()],
        tol,
    )?);
    out.push(check(
        "mul",
        &|t, v| {
            let m = t.mul(v[0], v[1])?;
            weighted_sum(t, m, 2)
        },
        &[a.clone(), b.clone()],
        tol,
    )?);
    let c = random(&mut rng, &[4, 2], -1.0, 1.0);
    let ct = random(&mut rng, &[4, 2], -1.0, 1.0);
    out.push(check(
        "matmul",
        &|t, v| {
            let m = t.matmul(v[0], v[1])?;
            weighted_sum(t, m, 3)
        },
        &[a.clone(), c.clone()],
        tol,
    )?);
    out.push(check(
        "matmul transposed",
        &|t, v| {
            let m = t.matmul_t(v[0], v[1], true, true)?;
            weighted_sum(t, m, 4)
        },
        &[ct.clone(), a.clone()],
        tol,
    )?);
    out.push(check(
        "sum/reshape/fill",
        &|t, v| {
            let r = t.reshape(v[0], &[2, 6])?;
            let s = t.sum(r)?;
            let f = t.fill(s, &[3])?;
            let f2 = t.mul(f, f)?;
            weighted_sum(t, f2, 5)
        },
        &[a.clone()],
        tol,
    )?);
    out.push(check(
        "concat/slice",
        &|t, v| {
            let cat = t.concat(&[v[0], v[1]], 1)?;
            let s = t.slice(cat, 1, 2, 5)?;
            let s2 = t.mul(s, s)?;
            weighted_sum(t, s2, 6)
        },
        &[a.clone(), b.clone()],
        tol,
    )?);
    let x = random(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let cvec = random(&mut rng, &[4], -1.0, 1.0);
    let crows = random(&mut rng, &[2, 4], -1.0, 1.0);
    out.push(check(
        "modulate shared",
        &|t, v| {
            let m = t.modulate(v[0], v[1])?;
            weighted_sum(t, m, 7)
        },
        &[x.clone(), cvec.clone()],
        tol,
    )?);
    out.push(check(
        "modulate per-row/expand/reduce",
        &|t, v| {
            let m = t.modulate(v[0], v[1])?;
            let r = t.reduce_channels(m, true)?;
            let r2 = t.mul(r, r)?;
            let e = t.expand_channels(r2, &[2, 3, 3, 4])?;
            let e = t.mul(e, v[0])?;
            weighted_sum(t, e, 8)
        },
        &[x.clone(), crows.clone()],
        tol,
    )?);
    out.push(check(
        "gather",
        &|t, v| {
            let g = t.gather_rows(v[0], Rc::new(vec![1, 0, 1, 1]))?;
            let g2 = t.mul(g, g)?;
            weighted_sum(t, g2, 9)
        },
        &[crows.clone()],
        tol,
    )?);
    let img = random(&mut rng, &[2, 5, 6, 3], -1.0, 1.0);
    let k3 = random(&mut rng, &[3, 3, 3, 2], -0.5, 0.5);
    out.push(check(
        "conv2d 3x3 pad 1",
        &|t, v| {
            let y = t.conv2d(v[0], v[1], ConvParams::new(1, 1))?;
            weighted_sum(t, y, 10)
        },
        &[img.clone(), k3.clone()],
        tol,
    )?);
    out.push(check(
        "conv2d 3x3 stride 2",
        &|t, v| {
            let y = t.conv2d(v[0], v[1], ConvParams::new(2, 0))?;
            let y2 = t.mul(y, y)?;
            weighted_sum(t, y2, 11)
        },
        &[img.clone(), k3.clone()],
        tol,
    )?);
    let k4 = random(&mut rng, &[4, 4, 3, 1], -0.5, 0.5);
    out.push(check(
        "conv2d 4x4 same",
        &|t, v| {
            let y = t.conv2d(v[0], v[1], ConvParams::same(4))?;
            weighted_sum(t, y, 12)
        },
        &[img.clone(), k4],
        tol,
    )?);
    let act = random_away_from_zero(&mut rng, &[3, 5]);
    out.push(check(
        "relu",
        &|t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 13)
        },
        &[act.clone()],
        tol,
    )?);
    out.push(check(
        "pelu",
        &|t, v| {
            let s = t.scale(v[0], 0.1)?;
            let y = t.pelu(s, 0.05)?;
            weighted_sum(t, y, 14)
        },
        &[act.clone()],
        tol,
    )?);
    let bx = random(&mut rng, &[6, 3], -1.0, 2.0);
    let gamma = random(&mut rng, &[3], 0.5, 1.5);
    let beta = random(&mut rng, &[3], -0.5, 0.5);
    out.push(check(
        "batchnorm train",
        &|t, v| {
            let mut stats = RunningStats::new(3);
            let y = t.batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Train)?;
            let y2 = t.mul(y, y)?;
            let y3 = t.add(y2, y)?;
            weighted_sum(t, y3, 15)
        },
        &[bx.clone(), gamma.clone(), beta.clone()],
        tol,
    )?);
    out.push(check(
        "batchnorm eval",
        &|t, v| {
            let mut stats = RunningStats {
                mean: vec![0.3, -0.2, 0.1],
                var: vec![0.5, 2.0, 1.1],
                momentum: 0.1,
            };
            let y = t.batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Eval)?;
            let y2 = t.mul(y, y)?;
            weighted_sum(t, y2, 16)
        },
        &[bx, gamma, beta],
        tol,
    )?);
    let fmap = random(&mut rng, &[2, 6, 7, 2], -1.0, 1.0);
    let boxes = Tensor::from_f64([3, 4], &[2.3, 2.1, 2.7, 3.1, 3.9, 3.3, 1.9, 2.2, 1.1, 4.6, 4.3, 2.9])?;
    let pool_idx = Rc::new(vec![0usize, 1, 1]);
    let idx_map = pool_idx.clone();
    out.push(check(
        "prpool wrt map",
        &move |t, v| {
            let bx = t.constant(boxes.clone());
            let c = centers_to_corners(t, bx)?;
            let p = t.prpool(v[0], c, idx_map.clone(), 3)?;
            weighted_sum(t, p, 17)
        },
        &[fmap.clone()],
        tol,
    )?);
    let boxes = Tensor::from_f64([3, 4], &[2.3, 2.1, 2.7, 3.1, 3.9, 3.3, 1.9, 2.2, 1.1, 4.6, 4.3, 2.9])?;
    out.push(check(
        "prpool wrt box (cx, cy, w, h)",
        &move |t, v| {
            let m = t.constant(fmap.clone());
            let c = centers_to_corners(t, v[0])?;
            let p = t.prpool(m, c, pool_idx.clone(), 3)?;
            weighted_sum(t, p, 18)
        },
        &[boxes],
        1e-4,
    )?);
    Ok(out)
}

/// The two-layer classifier, differentiated with respect to both layers.
pub fn classifier_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, &[2, 5, 5, 6], -1.0, 1.0);
    let w1 = random(&mut rng, &[1, 1, 6, 4], -0.5, 0.5);
    let w2 = random(&mut rng, &[4, 4, 4, 1], -0.5, 0.5);
    let y = random(&mut rng, &[2, 5, 5, 1], 0.0, 1.0);
    let res = check(
        "classifier ||f(x; w) - y||^2",
        &move |t, v| {
            let xv = t.constant(x.clone());
            let f = classifier::forward(t, xv, v[0], v[1])?;
            let yv = t.constant(y.clone());
            let r = t.sub(f, yv)?;
            t.dot(r, r)
        },
        &[w1, w2],
        1e-5,
    )?;
    Ok(vec![res])
}

/// Everything the `gradcheck` command runs.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut all = primitive_suite(seed)?;
    all.extend(classifier_suite(seed.wrapping_add(1))?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        for c in full_suite(7).unwrap() {
            assert!(c.passed(), "{}: rel err {:.2e} (tol {:.0e})", c.name, c.rel_err, c.tol);
        }
    }
}
