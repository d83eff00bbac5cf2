//! WebAssembly bindings for the demo page in `www/`.

use wasm_bindgen::prelude::*;

use ioutrack_core::bench::first_frame_problem;
use ioutrack_core::iounet::{geometric_iou, IouVariant};
use ioutrack_core::model::Models;
use ioutrack_core::optim::{gauss_newton_cg, gradient_descent, OptimizerRun};
use ioutrack_core::prpool::prpool;
use ioutrack_core::sequence::Sequence;
use ioutrack_core::synth::{suite_specs, synth_sequence, Category};
use ioutrack_core::tracker::{TrackerConfig, GD_LR, GD_MOMENTUM};
use ioutrack_core::{BoundingBox, Error};

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A rendered synthetic sequence.
#[wasm_bindgen]
pub struct Scene {
    seq: Sequence,
    seed: u64,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(category: &str, seed: u64, frames: usize) -> Result<Scene, JsError> {
        let cat = Category::parse(category).map_err(js)?;
        let (name, spec, s) = suite_specs(1, frames.max(1), seed)
            .into_iter()
            .find(|(n, _, _)| Category::of_name(n) == Some(cat))
            .ok_or_else(|| JsError::new("category missing from the suite"))?;
        let seq = synth_sequence(&spec, s, &name).map_err(js)?;
        Ok(Scene { seq, seed })
    }

    pub fn width(&self) -> Result<usize, JsError> {
        Ok(self.seq.frame(0).map_err(js)?.width())
    }

    pub fn height(&self) -> Result<usize, JsError> {
        Ok(self.seq.frame(0).map_err(js)?.height())
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// RGBA bytes of frame `i`, for `ImageData`.
    pub fn frame_rgba(&self, i: usize) -> Result<Vec<u8>, JsError> {
        let img = self.seq.frame(i).map_err(js)?;
        let mut out = Vec::with_capacity(img.width() * img.height() * 4);
        for px in img.data().chunks(3) {
            out.extend(px.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            out.push(255);
        }
        Ok(out)
    }

    /// Ground truth of frame `i` as `[x, y, w, h]`.
    pub fn ground_truth(&self, i: usize) -> Vec<f64> {
        self.seq
            .ground_truth()
            .get(i)
            .map(|b| b.xywh().to_vec())
            .unwrap_or_default()
    }

    /// IoU of `[x, y, w, h]` against the ground truth of frame `i`.
    pub fn iou(&self, i: usize, x: f64, y: f64, w: f64, h: f64) -> Result<f64, JsError> {
        let b = BoundingBox::from_xywh(x, y, w, h).map_err(js)?;
        let gt = self
            .seq
            .ground_truth()
            .get(i)
            .ok_or_else(|| JsError::new("frame out of range"))?;
        Ok(geometric_iou(&b, gt))
    }

    /// Precise-ROI-pool the pixels of frame `i` under `[x, y, w, h]` into
    /// `bins × bins` RGB cells (row-major, values in `[0, 1]`).
    pub fn pool(&self, i: usize, x: f64, y: f64, w: f64, h: f64, bins: usize) -> Result<Vec<f64>, JsError> {
        let img = self.seq.frame(i).map_err(js)?;
        // Pixel k covers [k, k+1); its sample sits at k on the map grid.
        let b = BoundingBox::from_xywh(x - 0.5, y - 0.5, w, h).map_err(js)?;
        let pooled = prpool(&img.to_tensor::<f64>(), &b, bins.clamp(1, 16)).map_err(js)?;
        Ok(pooled.data.data().iter().map(|v| v + 0.5).collect())
    }

    /// Fit the first-frame classifier with Gauss-Newton/CG and with
    /// gradient descent at the same backprop budget.
    pub fn convergence(&self) -> Result<Convergence, JsError> {
        let mut cfg = TrackerConfig::desk();
        cfg.classifier.init_samples = 8;
        let models = Models::<f32>::desk(IouVariant::Modulation, self.seed).map_err(js)?;
        let p = first_frame_problem(&self.seq, &cfg, &models, self.seed).map_err(js)?;
        let (n_gn, n_cg) = cfg.classifier.init_iters;
        let mut w = [p.init.w1.clone(), p.init.w2.clone()];
        let gn = gauss_newton_cg(&p.problem, &mut w, n_gn, n_cg).map_err(js)?;
        let mut w = [p.init.w1.clone(), p.init.w2.clone()];
        let gd = gradient_descent(&p.problem, &mut w, gn.backprop_calls, GD_LR, GD_MOMENTUM).map_err(js)?;
        Ok(Convergence { gn, gd })
    }
}

#[wasm_bindgen]
pub struct Convergence {
    gn: OptimizerRun,
    gd: OptimizerRun,
}

fn column(run: &OptimizerRun, loss: bool) -> Vec<f64> {
    run.trace
        .iter()
        .map(|p| if loss { p.loss } else { p.backprop_calls as f64 })
        .collect()
}

#[wasm_bindgen]
impl Convergence {
    pub fn gn_calls(&self) -> Vec<f64> {
        column(&self.gn, false)
    }

    pub fn gn_loss(&self) -> Vec<f64> {
        column(&self.gn, true)
    }

    pub fn gd_calls(&self) -> Vec<f64> {
        column(&self.gd, false)
    }

    pub fn gd_loss(&self) -> Vec<f64> {
        column(&self.gd, true)
    }
}

/// Categories accepted by [`Scene::new`].
#[wasm_bindgen]
pub fn categories() -> Vec<String> {
    Category::ALL.iter().map(|c| c.name().to_string()).collect()
}
