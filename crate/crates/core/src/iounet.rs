//! Overlap predictor: a reference branch turns the first-frame target into
//! per-channel coefficients, a test branch pools features inside candidate
//! boxes, and a small MLP regresses the IoU (on the `[-1, 1]` scale).
//! Architecture variants share one parameter store and forward code.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{BnMode, RunningStats, Tape, Var};
use crate::backbone::Features;
use crate::error::{Error, Result};
use crate::kernels::ConvParams;
use crate::prpool::{centers_to_corners, BoundingBox, MIN_BOX_SIDE};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IouVariant {
    Modulation,
    Baseline,
    Concatenation,
    Siamese,
    Block3Only,
    Block4Only,
}

impl IouVariant {
    pub const ALL: [IouVariant; 6] = [
        IouVariant::Modulation,
        IouVariant::Baseline,
        IouVariant::Concatenation,
        IouVariant::Siamese,
        IouVariant::Block3Only,
        IouVariant::Block4Only,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IouVariant::Modulation => "modulation",
            IouVariant::Baseline => "baseline",
            IouVariant::Concatenation => "concatenation",
            IouVariant::Siamese => "siamese",
            IouVariant::Block3Only => "block3",
            IouVariant::Block4Only => "block4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        IouVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown IoU variant {s:?}")))
    }

    fn blocks(self) -> &'static [usize] {
        match self {
            IouVariant::Block3Only => &[0],
            IouVariant::Block4Only => &[1],
            _ => &[0, 1],
        }
    }

    fn modulated(self) -> bool {
        matches!(
            self,
            IouVariant::Modulation | IouVariant::Block3Only | IouVariant::Block4Only
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouNetConfig {
    pub variant: IouVariant,
    /// Backbone channels of (block3, block4).
    pub channels: (usize, usize),
    pub strides: (usize, usize),
    pub d_z: usize,
    pub ref_bins: usize,
    pub test_bins: usize,
    pub hidden: [usize; 2],
    /// Embedding width of the concatenation and siamese branches.
    pub embed: usize,
}

impl IouNetConfig {
    pub fn new(variant: IouVariant, channels: (usize, usize)) -> Self {
        IouNetConfig {
            variant,
            channels,
            strides: (8, 16),
            d_z: 64,
            ref_bins: 3,
            test_bins: 5,
            hidden: [256, 256],
            embed: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvBn {
    w: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
struct BlockLayout {
    ref_conv: Option<ConvBn>,
    ref_fc: Option<ConvBn>,
    ref_fc2: Option<usize>,
    test_conv1: Option<ConvBn>,
    test_conv2: Option<ConvBn>,
    test_fc: Option<ConvBn>,
    test_fc2: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Default)]
struct Layout {
    blocks: [BlockLayout; 2],
    head: Vec<ConvBn>,
    out: Option<Linear>,
}

/// Named parameter tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct IouNet<T> {
    pub cfg: IouNetConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stats: Vec<RunningStats<T>>,
    stat_names: Vec<String>,
    layout: Layout,
}

struct Builder<'a, T, R> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stats: Vec<RunningStats<T>>,
    stat_names: Vec<String>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn tensor(&mut self, name: String, shape: Vec<usize>, std: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::of(z * std)
            })
            .collect();
        self.names.push(name);
        self.params
            .push(Tensor::new(shape, data).expect("shape product matches"));
        self.params.len() - 1
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: f64) -> usize {
        self.names.push(name);
        self.params.push(Tensor::full(shape, T::of(v)));
        self.params.len() - 1
    }

    fn bn(&mut self, name: &str, w: usize, ch: usize) -> ConvBn {
        self.bn_init(name, w, ch, (1.0, 0.0))
    }

    fn bn_init(&mut self, name: &str, w: usize, ch: usize, (g, b): (f64, f64)) -> ConvBn {
        let gamma = self.constant(format!("{name}.bn.gamma"), vec![ch], g);
        let beta = self.constant(format!("{name}.bn.beta"), vec![ch], b);
        self.stats.push(RunningStats::new(ch));
        self.stat_names.push(format!("{name}.bn"));
        ConvBn {
            w,
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> ConvBn {
        let w = self.tensor(
            format!("{name}.w"),
            vec![3, 3, cin, cout],
            (2.0 / (9 * cin) as f64).sqrt(),
        );
        self.bn(name, w, cout)
    }

    fn fc(&mut self, name: &str, cin: usize, cout: usize) -> ConvBn {
        let w = self.tensor(format!("{name}.w"), vec![cin, cout], (2.0 / cin as f64).sqrt());
        self.bn(name, w, cout)
    }

    fn plain(&mut self, name: &str, cin: usize, cout: usize) -> usize {
        self.tensor(format!("{name}.w"), vec![cin, cout], (1.0 / cin as f64).sqrt())
    }
}

/// Batch-norm `(gamma, beta)` of the layer producing modulation
/// coefficients. Starting near a constant positive vector keeps every
/// test channel alive early in training.
pub const MODULATION_BN_INIT: (f64, f64) = (0.1, 1.0);

/// Per-block vectors computed once from the reference frame: modulation
/// coefficients, or reference embeddings for the concatenation/siamese
/// variants. Empty for the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationVector<T> {
    pub blocks: Vec<Tensor<T>>,
}

/// Test-branch feature maps of one patch, before pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct TestMaps<T> {
    pub blocks: Vec<Tensor<T>>,
}

/// Forward-pass context: the tape, one node per parameter, and the batch
/// norm mode.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub stats: &'a mut [RunningStats<T>],
    pub mode: BnMode,
}

impl<T: Scalar> Ctx<'_, T> {
    fn layer(&mut self, x: Var, l: ConvBn, conv: bool) -> Result<Var> {
        let y = if conv {
            self.tape.conv2d(x, self.vars[l.w], ConvParams::new(1, 1))?
        } else {
            self.tape.matmul(x, self.vars[l.w])?
        };
        let y = self.tape.batchnorm(
            y,
            self.vars[l.gamma],
            self.vars[l.beta],
            &mut self.stats[l.stats],
            self.mode,
        )?;
        self.tape.relu(y)
    }
}

impl<T: Scalar> IouNet<T> {
    pub fn new<R: Rng>(cfg: IouNetConfig, rng: &mut R) -> Result<Self> {
        if cfg.d_z == 0 || cfg.ref_bins == 0 || cfg.test_bins == 0 || cfg.hidden.contains(&0) || cfg.embed == 0 {
            return Err(Error::invalid("IoU network widths must be positive"));
        }
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            stats: Vec::new(),
            stat_names: Vec::new(),
            rng,
        };
        let mut layout = Layout::default();
        let v = cfg.variant;
        let (dz, kt, kr) = (cfg.d_z, cfg.test_bins, cfg.ref_bins);
        let pooled = kt * kt * dz;
        for &blk in v.blocks() {
            let cin = if blk == 0 { cfg.channels.0 } else { cfg.channels.1 };
            let tag = if blk == 0 { "b3" } else { "b4" };
            let l = &mut layout.blocks[blk];
            l.test_conv1 = Some(b.conv(&format!("iou.{tag}.test.conv1"), cin, dz));
            l.test_conv2 = Some(b.conv(&format!("iou.{tag}.test.conv2"), dz, dz));
            match v {
                IouVariant::Baseline => {}
                IouVariant::Concatenation | IouVariant::Siamese => {
                    l.ref_fc = Some(b.fc(&format!("iou.{tag}.ref.fc"), pooled, cfg.embed));
                    l.test_fc = Some(b.fc(&format!("iou.{tag}.test.fc"), pooled, cfg.embed));
                    if v == IouVariant::Siamese {
                        l.ref_fc2 = Some(b.plain(&format!("iou.{tag}.ref.fc2"), cfg.embed, cfg.embed));
                        l.test_fc2 = Some(b.plain(&format!("iou.{tag}.test.fc2"), cfg.embed, cfg.embed));
                    }
                }
                _ => {
                    l.ref_conv = Some(b.conv(&format!("iou.{tag}.ref.conv"), cin, dz));
                    let name = format!("iou.{tag}.ref.fc");
                    let w = b.tensor(
                        format!("{name}.w"),
                        vec![kr * kr * dz, dz],
                        (2.0 / (kr * kr * dz) as f64).sqrt(),
                    );
                    l.ref_fc = Some(b.bn_init(&name, w, dz, MODULATION_BN_INIT));
                }
            }
        }
        let nb = v.blocks().len();
        match v {
            IouVariant::Siamese => {
                let w = b.constant("iou.out.w".into(), vec![1, 1], 1.0 / (nb * cfg.embed) as f64);
                let bias = b.constant("iou.out.b".into(), vec![1], 0.0);
                layout.out = Some(Linear { w, b: bias });
            }
            IouVariant::Concatenation => {
                layout.head.push(b.fc("iou.g.fc1", 2 * nb * cfg.embed, cfg.hidden[1]));
                let w = b.tensor(
                    "iou.out.w".into(),
                    vec![cfg.hidden[1], 1],
                    (1.0 / cfg.hidden[1] as f64).sqrt(),
                );
                let bias = b.constant("iou.out.b".into(), vec![1], 0.0);
                layout.out = Some(Linear { w, b: bias });
            }
            _ => {
                layout.head.push(b.fc("iou.g.fc1", nb * pooled, cfg.hidden[0]));
                layout.head.push(b.fc("iou.g.fc2", cfg.hidden[0], cfg.hidden[1]));
                let w = b.tensor(
                    "iou.out.w".into(),
                    vec![cfg.hidden[1], 1],
                    (1.0 / cfg.hidden[1] as f64).sqrt(),
                );
                let bias = b.constant("iou.out.b".into(), vec![1], 0.0);
                layout.out = Some(Linear { w, b: bias });
            }
        }
        Ok(IouNet {
            cfg,
            names: b.names,
            params: b.params,
            stats: b.stats,
            stat_names: b.stat_names,
            layout,
        })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Tensor by name, for tests and inspection.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn variant(&self) -> IouVariant {
        self.cfg.variant
    }

    fn stride(&self, blk: usize) -> f64 {
        if blk == 0 {
            self.cfg.strides.0 as f64
        } else {
            self.cfg.strides.1 as f64
        }
    }

    /// Pixel `cx, cy, w, h` rows to feature-cell corner rows for one block.
    fn feature_corners(&self, tape: &mut Tape<T>, boxes: Var, blk: usize) -> Result<Var> {
        let corners = centers_to_corners(tape, boxes)?;
        let scaled = tape.scale(corners, T::of(1.0 / self.stride(blk)))?;
        let m = tape.shape(boxes)[0];
        let half = tape.constant(Tensor::full(vec![m, 4], T::of(-0.5)));
        tape.add(scaled, half)
    }

    fn pooled_flat(
        &self,
        ctx: &mut Ctx<T>,
        map: Var,
        boxes: Var,
        idx: &Rc<Vec<usize>>,
        blk: usize,
        bins: usize,
    ) -> Result<Var> {
        let corners = self.feature_corners(ctx.tape, boxes, blk)?;
        let pooled = ctx.tape.prpool(map, corners, idx.clone(), bins)?;
        let m = idx.len();
        let d = *ctx.tape.shape(map).last().unwrap_or(&0);
        ctx.tape.reshape(pooled, &[m, bins * bins * d])
    }

    /// Shared convolutions of the test branch, per active block.
    pub fn test_maps_on(&self, ctx: &mut Ctx<T>, feats: &[Var; 2]) -> Result<Vec<Var>> {
        let mut out = Vec::new();
        for &blk in self.cfg.variant.blocks() {
            let l = &self.layout.blocks[blk];
            let c1 = ctx.layer(feats[blk], l.test_conv1.expect("test branch"), true)?;
            out.push(ctx.layer(c1, l.test_conv2.expect("test branch"), true)?);
        }
        Ok(out)
    }

    /// Reference vectors per active block, `N×D` with one row per image.
    pub fn reference_on(&self, ctx: &mut Ctx<T>, feats0: &[Var; 2], boxes0: Var) -> Result<Vec<Var>> {
        let v = self.cfg.variant;
        if v == IouVariant::Baseline {
            return Ok(Vec::new());
        }
        let n = ctx.tape.shape(boxes0)[0];
        let idx = Rc::new((0..n).collect::<Vec<_>>());
        let mut out = Vec::new();
        if v.modulated() {
            for &blk in v.blocks() {
                let l = &self.layout.blocks[blk];
                let conv = ctx.layer(feats0[blk], l.ref_conv.expect("ref conv"), true)?;
                let flat = self.pooled_flat(ctx, conv, boxes0, &idx, blk, self.cfg.ref_bins)?;
                out.push(ctx.layer(flat, l.ref_fc.expect("ref fc"), false)?);
            }
        } else {
            let maps = self.test_maps_on(ctx, feats0)?;
            for (&blk, map) in v.blocks().iter().zip(maps) {
                let l = &self.layout.blocks[blk];
                let flat = self.pooled_flat(ctx, map, boxes0, &idx, blk, self.cfg.test_bins)?;
                let mut e = ctx.layer(flat, l.ref_fc.expect("ref fc"), false)?;
                if let Some(w2) = l.ref_fc2 {
                    e = ctx.tape.matmul(e, ctx.vars[w2])?;
                }
                out.push(e);
            }
        }
        Ok(out)
    }

    /// Normalized IoU predictions `[M]` for boxes (pixel `cx, cy, w, h`,
    /// one row each) given reference vectors and test maps. `idx[m]` is
    /// the image of box `m`.
    pub fn head_on(
        &self,
        ctx: &mut Ctx<T>,
        refs: &[Var],
        maps: &[Var],
        boxes: Var,
        idx: &Rc<Vec<usize>>,
    ) -> Result<Var> {
        let v = self.cfg.variant;
        let m = idx.len();
        let mut parts = Vec::new();
        let mut test_emb = Vec::new();
        for (i, &blk) in v.blocks().iter().enumerate() {
            let l = &self.layout.blocks[blk];
            let flat = self.pooled_flat(ctx, maps[i], boxes, idx, blk, self.cfg.test_bins)?;
            match v {
                IouVariant::Baseline => parts.push(flat),
                IouVariant::Concatenation | IouVariant::Siamese => {
                    let mut e = ctx.layer(flat, l.test_fc.expect("test fc"), false)?;
                    if let Some(w2) = l.test_fc2 {
                        e = ctx.tape.matmul(e, ctx.vars[w2])?;
                    }
                    test_emb.push(e);
                }
                _ => {
                    let c = ctx.tape.gather_rows(refs[i], idx.clone())?;
                    let kk = self.cfg.test_bins * self.cfg.test_bins;
                    let z = ctx.tape.reshape(flat, &[m, kk, self.cfg.d_z])?;
                    let z = ctx.tape.modulate(z, c)?;
                    parts.push(ctx.tape.reshape(z, &[m, kk * self.cfg.d_z])?);
                }
            }
        }
        let out = self.layout.out.expect("output layer");
        let y = match v {
            IouVariant::Siamese => {
                let mut r = Vec::new();
                for e in refs {
                    r.push(ctx.tape.gather_rows(*e, idx.clone())?);
                }
                let r = ctx.tape.concat(&r, 1)?;
                let t = ctx.tape.concat(&test_emb, 1)?;
                let prod = ctx.tape.mul(r, t)?;
                let width = ctx.tape.shape(prod)[1];
                let ones = ctx.tape.constant(Tensor::ones(vec![width, 1]));
                let dotp = ctx.tape.matmul(prod, ones)?;
                let scaled = ctx.tape.matmul(dotp, ctx.vars[out.w])?;
                ctx.tape.add_channels(scaled, ctx.vars[out.b])?
            }
            _ => {
                if v == IouVariant::Concatenation {
                    for e in refs {
                        parts.push(ctx.tape.gather_rows(*e, idx.clone())?);
                    }
                    parts.extend(test_emb.iter().copied());
                }
                let mut h = if parts.len() == 1 {
                    parts[0]
                } else {
                    ctx.tape.concat(&parts, 1)?
                };
                for l in &self.layout.head {
                    h = ctx.layer(h, *l, false)?;
                }
                let y = ctx.tape.matmul(h, ctx.vars[out.w])?;
                ctx.tape.add_channels(y, ctx.vars[out.b])?
            }
        };
        ctx.tape.reshape(y, &[m])
    }

    fn constants(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    fn feature_vars(tape: &mut Tape<T>, f: &Features<T>) -> Result<[Var; 2]> {
        let mut out = Vec::with_capacity(2);
        for t in [&f.block3, &f.block4] {
            let s = t.shape();
            if s.len() != 3 {
                return Err(Error::invalid(format!("feature block must be H×W×C, got {s:?}")));
            }
            out.push(tape.constant(t.clone().reshape([1, s[0], s[1], s[2]])?));
        }
        Ok([out[0], out[1]])
    }

    fn check_box(b: &BoundingBox) -> Result<()> {
        b.validate()?;
        if b.w <= MIN_BOX_SIDE || b.h <= MIN_BOX_SIDE {
            return Err(Error::invalid(format!("degenerate box {b:?}")));
        }
        Ok(())
    }

    fn boxes_tensor(boxes: &[BoundingBox]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(boxes.len() * 4);
        for b in boxes {
            Self::check_box(b)?;
            data.extend(b.to_array().map(T::of));
        }
        Tensor::new(vec![boxes.len(), 4], data)
    }

    /// Reference vectors for target `b0` (patch pixels) in `feats0`.
    pub fn compute_modulation(&self, feats0: &Features<T>, b0: &BoundingBox) -> Result<ModulationVector<T>> {
        Self::check_box(b0)?;
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let mut stats = self.stats.clone();
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            stats: &mut stats,
            mode: BnMode::Eval,
        };
        let fv = Self::feature_vars(ctx.tape, feats0)?;
        let bv = ctx.tape.constant(Self::boxes_tensor(&[*b0])?);
        let refs = self.reference_on(&mut ctx, &fv, bv)?;
        let blocks = refs
            .iter()
            .map(|r| {
                let t = tape.value(*r).clone();
                let n = t.len();
                t.reshape([n])
            })
            .collect::<Result<_>>()?;
        Ok(ModulationVector { blocks })
    }

    /// Test-branch maps of one patch, computed once per frame.
    pub fn test_maps(&self, feats: &Features<T>) -> Result<TestMaps<T>> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let mut stats = self.stats.clone();
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            stats: &mut stats,
            mode: BnMode::Eval,
        };
        let fv = Self::feature_vars(ctx.tape, feats)?;
        let maps = self.test_maps_on(&mut ctx, &fv)?;
        Ok(TestMaps {
            blocks: maps.iter().map(|m| tape.value(*m).clone()).collect(),
        })
    }

    /// Record predictions for `boxes` on a fresh tape; returns the tape,
    /// the box node and the prediction node.
    fn predict_graph(
        &self,
        tape: &mut Tape<T>,
        c: &ModulationVector<T>,
        maps: &TestMaps<T>,
        boxes: &[BoundingBox],
    ) -> Result<(Var, Var)> {
        let vars = self.constants(tape);
        let mut stats = self.stats.clone();
        let mut ctx = Ctx {
            tape,
            vars: &vars,
            stats: &mut stats,
            mode: BnMode::Eval,
        };
        let refs: Vec<Var> = c
            .blocks
            .iter()
            .map(|r| {
                let n = r.len();
                ctx.tape.constant(r.clone().reshape([1, n]).expect("vector reshape"))
            })
            .collect();
        let mv: Vec<Var> = maps.blocks.iter().map(|m| ctx.tape.constant(m.clone())).collect();
        let bv = ctx.tape.leaf(Self::boxes_tensor(boxes)?);
        let idx = Rc::new(vec![0; boxes.len()]);
        let y = self.head_on(&mut ctx, &refs, &mv, bv, &idx)?;
        Ok((bv, y))
    }

    /// Normalized predictions for several boxes in one patch.
    pub fn predict_many(&self, c: &ModulationVector<T>, maps: &TestMaps<T>, boxes: &[BoundingBox]) -> Result<Vec<f64>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let (_, y) = self.predict_graph(&mut tape, c, maps, boxes)?;
        Ok(tape.value(y).to_f64_vec())
    }

    /// Normalized IoU prediction for one box.
    pub fn predict_iou(&self, c: &ModulationVector<T>, maps: &TestMaps<T>, b: &BoundingBox) -> Result<f64> {
        Ok(self.predict_many(c, maps, &[*b])?[0])
    }

    /// Predictions and their gradients with respect to `cx, cy, w, h`.
    pub fn predict_with_grad(
        &self,
        c: &ModulationVector<T>,
        maps: &TestMaps<T>,
        boxes: &[BoundingBox],
    ) -> Result<(Vec<f64>, Vec<[f64; 4]>)> {
        let mut tape = Tape::new();
        let (bv, y) = self.predict_graph(&mut tape, c, maps, boxes)?;
        let s = tape.sum(y)?;
        let g = tape.backprop(s, &[bv])?;
        let gv = g[0].to_f64_vec();
        let grads = gv.chunks(4).map(|r| [r[0], r[1], r[2], r[3]]).collect();
        Ok((tape.value(y).to_f64_vec(), grads))
    }
}

/// Jaccard index of two boxes.
pub fn geometric_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Retry budget per candidate.
pub const CANDIDATE_RETRIES: usize = 1000;

/// Noise levels candidates draw from, as fractions of the box size.
pub const CANDIDATE_SIGMAS: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.5];

/// `n` boxes jittered from `gt` by Gaussian noise (center noise relative
/// to size, log-size noise), each with IoU ≥ `min_iou` against `gt`.
pub fn generate_candidates<R: Rng>(gt: &BoundingBox, n: usize, min_iou: f64, rng: &mut R) -> Result<Vec<BoundingBox>> {
    gt.validate()?;
    if n == 0 {
        return Err(Error::invalid("need at least one candidate"));
    }
    if min_iou >= 1.0 {
        return Ok(vec![*gt; n]);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let sigma = CANDIDATE_SIGMAS[rng.random_range(0..CANDIDATE_SIGMAS.len())];
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut found = None;
        for _ in 0..CANDIDATE_RETRIES {
            let c = BoundingBox {
                cx: gt.cx + noise.sample(rng) * gt.w,
                cy: gt.cy + noise.sample(rng) * gt.h,
                w: gt.w * noise.sample(rng).exp(),
                h: gt.h * noise.sample(rng).exp(),
            };
            if geometric_iou(&c, gt) >= min_iou {
                found = Some(c);
                break;
            }
        }
        out.push(found.ok_or_else(|| {
            Error::invalid(format!(
                "no candidate with IoU >= {min_iou} after {CANDIDATE_RETRIES} draws"
            ))
        })?);
    }
    Ok(out)
}

/// Result of gradient-ascent refinement of one box.
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub bbox: BoundingBox,
    /// Predicted IoU (`[0, 1]` scale) before each step and after the last.
    pub trace: Vec<f64>,
}

/// Minimum side kept during refinement, in pixels.
pub const MIN_REFINED_SIDE: f64 = 1.0;

/// Gradient ascent on the predicted IoU (`[0, 1]` scale) with the
/// gradient scaled by `(w, h, w, h)`, all boxes at once.
pub fn refine_boxes<T: Scalar>(
    net: &IouNet<T>,
    c: &ModulationVector<T>,
    maps: &TestMaps<T>,
    boxes: &[BoundingBox],
    steps: usize,
    step_len: f64,
) -> Result<Vec<Refined>> {
    let mut cur: Vec<BoundingBox> = boxes.to_vec();
    let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(steps + 1); boxes.len()];
    let mut active = vec![true; boxes.len()];
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    for _ in 0..steps {
        let (pred, grads) = net.predict_with_grad(c, maps, &cur)?;
        for i in 0..cur.len() {
            traces[i].push((pred[i] + 1.0) / 2.0);
            if !active[i] {
                continue;
            }
            let b = cur[i];
            let g = grads[i];
            let scale = [b.w, b.h, b.w, b.h];
            let mut next = [0.0; 4];
            for k in 0..4 {
                next[k] = b.to_array()[k] + step_len * 0.5 * g[k] * scale[k];
            }
            if !next.iter().all(|v| v.is_finite()) {
                active[i] = false;
                continue;
            }
            if next[2] < MIN_REFINED_SIDE || next[3] < MIN_REFINED_SIDE {
                next[2] = next[2].max(MIN_REFINED_SIDE);
                next[3] = next[3].max(MIN_REFINED_SIDE);
                active[i] = false;
            }
            cur[i] = BoundingBox {
                cx: next[0],
                cy: next[1],
                w: next[2],
                h: next[3],
            };
        }
    }
    let last = net.predict_many(c, maps, &cur)?;
    Ok(cur
        .into_iter()
        .zip(traces)
        .zip(last)
        .map(|((bbox, mut trace), p)| {
            trace.push((p + 1.0) / 2.0);
            Refined { bbox, trace }
        })
        .collect())
}

pub fn refine_box<T: Scalar>(
    net: &IouNet<T>,
    c: &ModulationVector<T>,
    maps: &TestMaps<T>,
    b: &BoundingBox,
    steps: usize,
    step_len: f64,
) -> Result<Refined> {
    Ok(refine_boxes(net, c, maps, &[*b], steps, step_len)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: IouVariant) -> IouNet<f64> {
        let mut cfg = IouNetConfig::new(variant, (4, 6));
        cfg.d_z = 4;
        cfg.hidden = [8, 6];
        cfg.embed = 5;
        IouNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn feats(seed: u64) -> Features<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |s: [usize; 3]| {
            let n = s.iter().product();
            Tensor::new(s.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
        };
        Features {
            block3: t([8, 8, 4]),
            block4: t([4, 4, 6]),
        }
    }

    fn target() -> BoundingBox {
        BoundingBox::new(30.3, 33.1, 22.4, 18.7).unwrap()
    }

    #[test]
    fn modulation_is_deterministic_and_nonnegative() {
        let net = small(IouVariant::Modulation);
        let f = feats(1);
        let a = net.compute_modulation(&f, &target()).unwrap();
        assert_eq!(a, net.compute_modulation(&f, &target()).unwrap());
        assert_eq!(a.blocks.len(), 2);
        for b in &a.blocks {
            assert_eq!(b.len(), 4);
            assert!(b.data().iter().all(|&v| v >= 0.0));
        }
        assert!(net.compute_modulation(&f, &BoundingBox { w: 0.0, ..target() }).is_err());
    }

    #[test]
    fn zero_features_follow_closed_form() {
        let mut net = small(IouVariant::Block3Only);
        let conv_beta = [0.3, -0.2, 0.7, 0.1];
        let fc_beta = [0.05, -0.4, 0.25, 0.6];
        net.param_mut("iou.b3.ref.conv.bn.beta")
            .unwrap()
            .data_mut()
            .copy_from_slice(&conv_beta);
        net.param_mut("iou.b3.ref.fc.bn.beta")
            .unwrap()
            .data_mut()
            .copy_from_slice(&fc_beta);
        let f = Features {
            block3: Tensor::zeros(vec![8, 8, 4]),
            block4: Tensor::zeros(vec![4, 4, 6]),
        };
        let c = net.compute_modulation(&f, &target()).unwrap();
        // conv(0) = 0, BN eval with fresh stats gives beta, ReLU, then a
        // constant map pools to the same vector in all 9 bins.
        let inv = 1.0 / (1.0 + crate::autodiff::BN_EPS).sqrt();
        let a: Vec<f64> = conv_beta.iter().map(|&b| b.max(0.0)).collect();
        let w = net.param("iou.b3.ref.fc.w").unwrap();
        let gamma = net.param("iou.b3.ref.fc.bn.gamma").unwrap().data().to_vec();
        for o in 0..4 {
            let mut y = 0.0;
            for bin in 0..9 {
                for (k, &ak) in a.iter().enumerate() {
                    y += ak * w.data()[(bin * 4 + k) * 4 + o];
                }
            }
            let want = (y * inv * gamma[o] + fc_beta[o]).max(0.0);
            assert!(
                (c.blocks[0].data()[o] - want).abs() < 1e-12,
                "{o}: {} vs {want}",
                c.blocks[0].data()[o]
            );
        }
    }

    #[test]
    fn zero_modulation_ignores_the_box() {
        let net = small(IouVariant::Modulation);
        let maps = net.test_maps(&feats(2)).unwrap();
        let c = ModulationVector {
            blocks: vec![Tensor::zeros(vec![4]); 2],
        };
        let boxes = [target(), BoundingBox::new(20.0, 40.0, 10.0, 30.0).unwrap()];
        let p = net.predict_many(&c, &maps, &boxes).unwrap();
        assert_eq!(p[0], p[1]);
        let r = refine_box(&net, &c, &maps, &boxes[1], 3, 1.0).unwrap();
        assert_eq!(r.bbox, boxes[1]);
        assert_eq!(r.trace.len(), 4);
    }

    #[test]
    fn box_gradient_matches_finite_differences() {
        for v in IouVariant::ALL {
            let net = small(v);
            let f0 = feats(4);
            let c = net.compute_modulation(&f0, &target()).unwrap();
            let maps = net.test_maps(&feats(5)).unwrap();
            let b = BoundingBox::new(31.7, 29.2, 19.3, 24.9).unwrap();
            let (_, g) = net.predict_with_grad(&c, &maps, &[b]).unwrap();
            let h = 1e-5;
            for k in 0..4 {
                let mut lo = b.to_array();
                let mut hi = b.to_array();
                lo[k] -= h;
                hi[k] += h;
                let fd = (net
                    .predict_iou(&c, &maps, &BoundingBox::from_array(hi).unwrap())
                    .unwrap()
                    - net
                        .predict_iou(&c, &maps, &BoundingBox::from_array(lo).unwrap())
                        .unwrap())
                    / (2.0 * h);
                let err = (g[0][k] - fd).abs() / fd.abs().max(g[0][k].abs()).max(1e-8);
                assert!(err < 1e-3, "{v:?} coord {k}: {} vs {fd}", g[0][k]);
            }
        }
    }

    #[test]
    fn baseline_ignores_reference() {
        let net = small(IouVariant::Baseline);
        let a = net.compute_modulation(&feats(6), &target()).unwrap();
        let b = net
            .compute_modulation(&feats(7), &BoundingBox::new(20.0, 20.0, 9.0, 9.0).unwrap())
            .unwrap();
        assert!(a.blocks.is_empty());
        let maps = net.test_maps(&feats(8)).unwrap();
        assert_eq!(
            net.predict_iou(&a, &maps, &target()).unwrap(),
            net.predict_iou(&b, &maps, &target()).unwrap()
        );
        assert!(net.param_names().iter().all(|n| !n.contains(".ref.")));
    }

    #[test]
    fn siamese_shares_convolutions() {
        let mut net = small(IouVariant::Siamese);
        assert!(net.param_names().iter().all(|n| !n.contains("ref.conv")));
        let f0 = feats(9);
        let maps = net.test_maps(&feats(10)).unwrap();
        let c = net.compute_modulation(&f0, &target()).unwrap();
        let before = net.predict_iou(&c, &maps, &target()).unwrap();
        for tag in ["b3", "b4"] {
            for suffix in ["fc.w", "fc2.w"] {
                let r = net.param(&format!("iou.{tag}.ref.{suffix}")).unwrap().clone();
                let t = net.param(&format!("iou.{tag}.test.{suffix}")).unwrap().clone();
                *net.param_mut(&format!("iou.{tag}.ref.{suffix}")).unwrap() = t;
                *net.param_mut(&format!("iou.{tag}.test.{suffix}")).unwrap() = r;
            }
        }
        let c2 = net.compute_modulation(&f0, &target()).unwrap();
        assert_ne!(before, net.predict_iou(&c2, &maps, &target()).unwrap());
    }

    #[test]
    fn variants_have_comparable_size() {
        let counts: Vec<usize> = IouVariant::ALL.iter().map(|&v| small(v).param_count()).collect();
        assert!(counts.iter().all(|&c| c > 0));
        for v in IouVariant::ALL {
            assert_eq!(IouVariant::parse(v.name()).unwrap(), v);
        }
    }

    #[test]
    fn refine_zero_steps_is_identity() {
        let net = small(IouVariant::Modulation);
        let c = net.compute_modulation(&feats(11), &target()).unwrap();
        let maps = net.test_maps(&feats(12)).unwrap();
        let b = BoundingBox::new(25.0, 28.0, 15.0, 20.0).unwrap();
        let r = refine_box(&net, &c, &maps, &b, 0, 1.0).unwrap();
        assert_eq!(r.bbox, b);
        assert_eq!(r.trace.len(), 1);
        let r = refine_box(&net, &c, &maps, &b, 5, 1.0).unwrap();
        assert!(r.bbox.w >= MIN_REFINED_SIDE && r.bbox.h >= MIN_REFINED_SIDE);
        assert_eq!(r.trace.len(), 6);
    }

    #[test]
    fn iou_known_values() {
        let a = BoundingBox::from_corners(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoundingBox::from_corners(1.0, 1.0, 3.0, 3.0).unwrap();
        assert!((geometric_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(geometric_iou(&a, &a), 1.0);
        let far = BoundingBox::from_corners(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(geometric_iou(&a, &far), 0.0);
    }

    #[test]
    fn candidates_respect_min_iou() {
        let gt = target();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = generate_candidates(&gt, 16, 0.1, &mut rng).unwrap();
        assert_eq!(c.len(), 16);
        assert!(c.iter().all(|b| geometric_iou(b, &gt) >= 0.1));
        assert_eq!(generate_candidates(&gt, 4, 1.0, &mut rng).unwrap(), vec![gt; 4]);
        let again = generate_candidates(&gt, 16, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(c, again);
        assert!(generate_candidates(&gt, 0, 0.1, &mut rng).is_err());
    }
}
