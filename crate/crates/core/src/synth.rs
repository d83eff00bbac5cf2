//! Procedural tracking sequences with exact ground truth: a checkered
//! rectangle moving over a static textured background, optionally with
//! same-shape distractors of perturbed color.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::prpool::BoundingBox;
use crate::sequence::{Frames, Sequence};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    Static,
    /// Constant speed in px/frame, random direction, bouncing off borders.
    Linear {
        speed: f64,
    },
    /// Smoothed random velocity with the given typical speed.
    RandomWalk {
        speed: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Flat,
    Noise,
    Stripes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    /// Initial target width and height.
    pub target: (f64, f64),
    pub motion: Motion,
    /// Size ratio reached on the last frame.
    pub scale_end: f64,
    /// Aspect-ratio (w/h) multiplier reached on the last frame, area kept.
    pub aspect_end: f64,
    /// Rotation of the target pattern, degrees per frame.
    pub rotation: f64,
    pub distractors: usize,
    pub distractor_speed: f64,
    /// Same-shape objects that stay within about two target sizes of the
    /// target, drawn with the distractor colors.
    pub neighbours: usize,
    /// RGB distance between target and distractor colors.
    pub color_offset: f64,
    pub texture: Texture,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_frames: 100,
            width: 256,
            height: 192,
            target: (30.0, 30.0),
            motion: Motion::Static,
            scale_end: 1.0,
            aspect_end: 1.0,
            rotation: 0.0,
            distractors: 0,
            distractor_speed: 3.0,
            neighbours: 0,
            color_offset: 0.35,
            texture: Texture::Noise,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Static,
    Translation,
    Scale,
    AspectChange,
    Rotation,
    Distractors,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Static,
        Category::Translation,
        Category::Scale,
        Category::AspectChange,
        Category::Rotation,
        Category::Distractors,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Static => "static",
            Category::Translation => "translation",
            Category::Scale => "scale",
            Category::AspectChange => "aspect",
            Category::Rotation => "rotation",
            Category::Distractors => "distractors",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category {s:?}")))
    }

    /// Category of a suite sequence name (`<category>-<index>`).
    pub fn of_name(name: &str) -> Option<Self> {
        Category::ALL
            .into_iter()
            .find(|c| name.starts_with(&format!("{}-", c.name())))
    }

    /// A randomized spec exercising this category.
    pub fn spec<R: Rng>(self, n_frames: usize, rng: &mut R) -> SynthSpec {
        let side = rng.random_range(24.0..36.0);
        let aspect: f64 = rng.random_range(0.75..1.33);
        let texture = [Texture::Flat, Texture::Noise, Texture::Stripes][rng.random_range(0..3)];
        let base = SynthSpec {
            n_frames,
            target: (side * aspect.sqrt(), side / aspect.sqrt()),
            texture,
            ..Default::default()
        };
        match self {
            Category::Static => base,
            Category::Translation => SynthSpec {
                motion: Motion::Linear {
                    speed: rng.random_range(1.5..3.0),
                },
                ..base
            },
            Category::Scale => SynthSpec {
                motion: Motion::Linear { speed: 1.0 },
                scale_end: if rng.random_bool(0.5) { 1.6 } else { 0.65 },
                ..base
            },
            Category::AspectChange => SynthSpec {
                motion: Motion::Linear { speed: 1.0 },
                aspect_end: if rng.random_bool(0.5) { 2.5 } else { 0.4 },
                ..base
            },
            Category::Rotation => SynthSpec {
                motion: Motion::Linear { speed: 1.0 },
                rotation: rng.random_range(2.0..4.0),
                ..base
            },
            Category::Distractors => SynthSpec {
                motion: Motion::RandomWalk { speed: 6.0 },
                distractors: 3,
                distractor_speed: 4.0,
                ..base
            },
        }
    }
}

/// Named specs `<category>-<k>` with per-sequence seeds.
pub fn suite_specs(per_category: usize, n_frames: usize, seed: u64) -> Vec<(String, SynthSpec, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for cat in Category::ALL {
        for k in 0..per_category {
            let spec = cat.spec(n_frames, &mut rng);
            out.push((format!("{}-{k:02}", cat.name()), spec, rng.random()));
        }
    }
    out
}

/// Suite specs for offline training: like [`suite_specs`] but a share of
/// the sequences carry nearby same-shape objects, so which object a box
/// belongs to can only be told from the reference appearance.
pub fn training_specs(per_category: usize, n_frames: usize, seed: u64) -> Vec<(String, SynthSpec, u64)> {
    let mut specs = suite_specs(per_category, n_frames, seed);
    for (k, (name, spec, _)) in specs.iter_mut().enumerate() {
        spec.neighbours = 2 + k % 2;
        name.insert_str(0, "train-");
    }
    specs
}

pub fn synth_suite(per_category: usize, n_frames: usize, seed: u64) -> Result<Vec<Sequence>> {
    suite_specs(per_category, n_frames, seed)
        .into_iter()
        .map(|(name, spec, s)| synth_sequence(&spec, s, &name))
        .collect()
}

type Palette = [[f32; 3]; 2];

/// Deterministic frame renderer holding the precomputed trajectories.
pub struct Renderer {
    background: Image,
    target: Vec<BoundingBox>,
    angle: Vec<f64>,
    palette: Palette,
    /// Paths, palettes, and whether each is drawn over the target.
    distractors: Vec<(Vec<BoundingBox>, Palette, bool)>,
}

impl Renderer {
    pub fn render(&self, i: usize) -> Image {
        let mut img = self.background.clone();
        for (path, pal, _) in self.distractors.iter().filter(|d| !d.2) {
            draw_object(&mut img, &path[i], self.angle[i], pal);
        }
        draw_object(&mut img, &self.target[i], self.angle[i], &self.palette);
        for (path, pal, _) in self.distractors.iter().filter(|d| d.2) {
            draw_object(&mut img, &path[i], self.angle[i], pal);
        }
        img
    }
}

fn draw_object(img: &mut Image, b: &BoundingBox, angle_deg: f64, pal: &Palette) {
    let [x1, y1, x2, y2] = b.corners();
    let (s, c) = angle_deg.to_radians().sin_cos();
    let j0 = x1.floor().max(0.0) as usize;
    let i0 = y1.floor().max(0.0) as usize;
    let j1 = (x2.ceil() as usize).min(img.width());
    let i1 = (y2.ceil() as usize).min(img.height());
    for i in i0..i1 {
        let cov_y = ((i + 1) as f64).min(y2) - (i as f64).max(y1);
        for j in j0..j1 {
            let cov_x = ((j + 1) as f64).min(x2) - (j as f64).max(x1);
            let cov = (cov_x.max(0.0) * cov_y.max(0.0)) as f32;
            if cov <= 0.0 {
                continue;
            }
            let u = (j as f64 + 0.5 - b.cx) / b.w;
            let v = (i as f64 + 0.5 - b.cy) / b.h;
            let (ru, rv) = (c * u + s * v, -s * u + c * v);
            let cell = ((ru + 0.5) * 3.0).floor() as i64 + ((rv + 0.5) * 3.0).floor() as i64;
            let col = pal[cell.rem_euclid(2) as usize];
            let bg = img.pixel(j, i);
            let mut out = [0f32; 3];
            for k in 0..3 {
                out[k] = cov * col[k] + (1.0 - cov) * bg[k];
            }
            img.set_pixel(j, i, out);
        }
    }
}

fn background<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Image {
    let (w, h) = (spec.width, spec.height);
    let base: [f32; 3] = [
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
    ];
    let mut img = Image::filled(w, h, base);
    match spec.texture {
        Texture::Flat => {}
        Texture::Noise => {
            let mut noise = Image::new(w, h);
            for i in 0..h {
                for j in 0..w {
                    let d = rng.random_range(-0.25f32..0.25);
                    let p = [base[0] + d, base[1] + d * 0.8, base[2] + d * 0.6];
                    noise.set_pixel(j, i, p);
                }
            }
            img = noise.blur(2.0);
        }
        Texture::Stripes => {
            let period = rng.random_range(12.0..30.0);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = theta.sin_cos();
            for i in 0..h {
                for j in 0..w {
                    let t = ((j as f64 * c + i as f64 * s) * 2.0 * std::f64::consts::PI / period).sin() as f32;
                    img.set_pixel(j, i, [base[0] + 0.12 * t, base[1] + 0.12 * t, base[2] - 0.08 * t]);
                }
            }
        }
    }
    img
}

fn vivid<R: Rng>(rng: &mut R) -> [f32; 3] {
    let mut c = [
        rng.random_range(0.0..1.0f32),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
    ];
    let hi = rng.random_range(0..3);
    c[hi] = rng.random_range(0.8..1.0);
    c[(hi + 1) % 3] *= 0.4;
    c
}

fn palette_of(base: [f32; 3]) -> Palette {
    [base, base.map(|v| v * 0.45)]
}

fn perturbed<R: Rng>(base: [f32; 3], dist: f64, rng: &mut R) -> [f32; 3] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let d: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
    let norm = (d.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-9);
    let mut out = [0f32; 3];
    for k in 0..3 {
        out[k] = (base[k] as f64 + dist * d[k] / norm).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Centers along a motion model, kept inside the frame with the given
/// per-frame half sizes.
fn trajectory<R: Rng>(
    start: (f64, f64),
    motion: Motion,
    half: &[(f64, f64)],
    frame: (f64, f64),
    rng: &mut R,
) -> Vec<(f64, f64)> {
    let n = half.len();
    let (mut x, mut y) = start;
    let (mut vx, mut vy) = match motion {
        Motion::Static => (0.0, 0.0),
        Motion::Linear { speed } | Motion::RandomWalk { speed } => {
            let a: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            (speed * a.cos(), speed * a.sin())
        }
    };
    let mut out = Vec::with_capacity(n);
    for (t, &(hw, hh)) in half.iter().enumerate() {
        if t > 0 {
            if let Motion::RandomWalk { speed } = motion {
                let n = Normal::new(0.0, speed * 0.5).expect("positive speed");
                vx = 0.85 * vx + n.sample(rng);
                vy = 0.85 * vy + n.sample(rng);
                let s = (vx * vx + vy * vy).sqrt();
                if s > 2.0 * speed {
                    vx *= 2.0 * speed / s;
                    vy *= 2.0 * speed / s;
                }
            }
            x += vx;
            y += vy;
        }
        let (lo_x, hi_x) = (hw + 1.0, frame.0 - hw - 1.0);
        let (lo_y, hi_y) = (hh + 1.0, frame.1 - hh - 1.0);
        if x < lo_x || x > hi_x {
            vx = -vx;
            x = x.clamp(lo_x, hi_x.max(lo_x));
        }
        if y < lo_y || y > hi_y {
            vy = -vy;
            y = y.clamp(lo_y, hi_y.max(lo_y));
        }
        out.push((x, y));
    }
    out
}

/// Render a sequence for `spec`; identical seeds give identical pixels.
pub fn synth_sequence(spec: &SynthSpec, seed: u64, name: &str) -> Result<Sequence> {
    if spec.n_frames == 0 {
        return Err(Error::invalid("a sequence needs at least one frame"));
    }
    if !(spec.scale_end > 0.0 && spec.aspect_end > 0.0 && spec.target.0 > 0.0 && spec.target.1 > 0.0) {
        return Err(Error::invalid(format!("bad synthetic spec {spec:?}")));
    }
    let n = spec.n_frames;
    let sizes: Vec<(f64, f64)> = (0..n)
        .map(|t| {
            let f = if n > 1 { t as f64 / (n - 1) as f64 } else { 0.0 };
            let s = spec.scale_end.powf(f);
            let a = spec.aspect_end.powf(f).sqrt();
            (spec.target.0 * s * a, spec.target.1 * s / a)
        })
        .collect();
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    if sizes.iter().any(|&(w, h)| w + 2.0 > fw || h + 2.0 > fh) {
        return Err(Error::invalid(format!(
            "target up to {:.1}x{:.1} does not fit a {}x{} frame",
            sizes.iter().map(|s| s.0).fold(0.0, f64::max),
            sizes.iter().map(|s| s.1).fold(0.0, f64::max),
            spec.width,
            spec.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = background(spec, &mut rng);
    let half: Vec<(f64, f64)> = sizes.iter().map(|&(w, h)| (w / 2.0, h / 2.0)).collect();
    let start = (rng.random_range(0.35..0.65) * fw, rng.random_range(0.35..0.65) * fh);
    let centers = trajectory(start, spec.motion, &half, (fw, fh), &mut rng);
    let target: Vec<BoundingBox> = centers
        .iter()
        .zip(&sizes)
        .map(|(&(x, y), &(w, h))| BoundingBox { cx: x, cy: y, w, h })
        .collect();
    let angle: Vec<f64> = (0..n).map(|t| spec.rotation * t as f64).collect();
    let base = vivid(&mut rng);
    let mut distractors = Vec::new();
    for _ in 0..spec.distractors {
        let mut p = (0.0, 0.0);
        for _ in 0..100 {
            p = (rng.random_range(0.1..0.9) * fw, rng.random_range(0.1..0.9) * fh);
            let d = ((p.0 - start.0).powi(2) + (p.1 - start.1).powi(2)).sqrt();
            if d > 2.0 * (spec.target.0 + spec.target.1) / 2.0 {
                break;
            }
        }
        let path = trajectory(
            p,
            Motion::RandomWalk {
                speed: spec.distractor_speed,
            },
            &half,
            (fw, fh),
            &mut rng,
        );
        let boxes = path
            .iter()
            .zip(&sizes)
            .map(|(&(x, y), &(w, h))| BoundingBox { cx: x, cy: y, w, h })
            .collect();
        distractors.push((boxes, palette_of(perturbed(base, spec.color_offset, &mut rng)), false));
    }
    let mean_side = (spec.target.0 + spec.target.1) / 2.0;
    for _ in 0..spec.neighbours {
        let mut angle: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let mut radius: f64 = rng.random_range(0.4..0.9);
        let above = rng.random_bool(0.5);
        let jitter = Normal::new(0.0, 1.0).expect("unit normal");
        let boxes = target
            .iter()
            .zip(&half)
            .map(|(t, &(hw, hh))| {
                angle += 0.05 * jitter.sample(&mut rng);
                radius = (radius + 0.02 * jitter.sample(&mut rng)).clamp(0.35, 1.0);
                let x = (t.cx + radius * mean_side * angle.cos()).clamp(hw + 1.0, (fw - hw - 1.0).max(hw + 1.0));
                let y = (t.cy + radius * mean_side * angle.sin()).clamp(hh + 1.0, (fh - hh - 1.0).max(hh + 1.0));
                BoundingBox {
                    cx: x,
                    cy: y,
                    w: t.w,
                    h: t.h,
                }
            })
            .collect();
        distractors.push((boxes, palette_of(vivid(&mut rng)), above));
    }
    let renderer = Renderer {
        background,
        target: target.clone(),
        angle,
        palette: palette_of(base),
        distractors,
    };
    Sequence::build(name.to_string(), n, Frames::Synth(Box::new(renderer)), target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_spec_has_constant_ground_truth() {
        let s = synth_sequence(
            &SynthSpec {
                n_frames: 5,
                ..Default::default()
            },
            1,
            "s",
        )
        .unwrap();
        let gt = s.ground_truth();
        assert!(gt.iter().all(|b| b == &gt[0]));
        assert_eq!(s.frame(0).unwrap(), s.frame(4).unwrap());
    }

    #[test]
    fn aspect_drift_reaches_target_ratio() {
        let spec = SynthSpec {
            n_frames: 20,
            aspect_end: 2.0,
            ..Default::default()
        };
        let s = synth_sequence(&spec, 2, "a").unwrap();
        let (a, b) = (s.ground_truth()[0], s.ground_truth()[19]);
        assert!(((b.w / b.h) / (a.w / a.h) - 2.0).abs() < 1e-12);
        assert!((a.area() - b.area()).abs() < 1e-9);
    }

    #[test]
    fn seeded_pixels_repeat() {
        let spec = Category::Distractors.spec(6, &mut ChaCha8Rng::seed_from_u64(4));
        let a = synth_sequence(&spec, 7, "d").unwrap();
        let b = synth_sequence(&spec, 7, "d").unwrap();
        for i in 0..6 {
            assert_eq!(a.frame(i).unwrap(), b.frame(i).unwrap());
        }
        assert_eq!(a.ground_truth(), b.ground_truth());
    }

    #[test]
    fn oversized_target_is_rejected() {
        let spec = SynthSpec {
            target: (300.0, 20.0),
            ..Default::default()
        };
        assert!(synth_sequence(&spec, 0, "x").is_err());
    }

    #[test]
    fn target_stays_in_frame() {
        let spec = SynthSpec {
            n_frames: 200,
            motion: Motion::RandomWalk { speed: 8.0 },
            ..Default::default()
        };
        let s = synth_sequence(&spec, 3, "w").unwrap();
        for b in s.ground_truth() {
            let [x1, y1, x2, y2] = b.corners();
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 256.0 && y2 <= 192.0);
        }
    }

    #[test]
    fn target_pixels_take_palette_color() {
        let spec = SynthSpec {
            n_frames: 1,
            texture: Texture::Flat,
            ..Default::default()
        };
        let s = synth_sequence(&spec, 5, "c").unwrap();
        let b = s.ground_truth()[0];
        let img = s.frame(0).unwrap();
        let bg = img.pixel(0, 0);
        let inside = img.pixel(b.cx as usize, b.cy as usize);
        assert_ne!(inside, bg);
    }

    #[test]
    fn neighbours_stay_close() {
        let spec = SynthSpec {
            n_frames: 30,
            motion: Motion::Linear { speed: 2.0 },
            neighbours: 2,
            ..Default::default()
        };
        let s = synth_sequence(&spec, 8, "n").unwrap();
        let r = s.frames_renderer().unwrap();
        assert_eq!(r.distractors.len(), 2);
        for (path, _, _) in &r.distractors {
            for (d, t) in path.iter().zip(s.ground_truth()) {
                let dist = ((d.cx - t.cx).powi(2) + (d.cy - t.cy).powi(2)).sqrt();
                assert!(dist < 1.1 * 30.0, "{dist}");
            }
        }
        assert!(training_specs(1, 10, 0).iter().all(|s| s.1.neighbours > 0));
    }

    #[test]
    fn suite_names_carry_category() {
        let specs = suite_specs(2, 10, 0);
        assert_eq!(specs.len(), 12);
        assert_eq!(Category::of_name(&specs[7].0), Some(Category::AspectChange));
    }
}
