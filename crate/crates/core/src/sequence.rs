//! Tracking sequences: ordered frames plus one ground-truth box per frame,
//! read from and written to the common `img/` + `groundtruth.txt` layout.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::prpool::BoundingBox;
use crate::synth::Renderer;

pub(crate) enum Frames {
    Memory(Vec<Image>),
    Files(Vec<PathBuf>),
    Synth(Box<Renderer>),
}

pub struct Sequence {
    pub name: String,
    frames: Frames,
    gt: Vec<BoundingBox>,
}

impl std::fmt::Debug for Sequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sequence")
            .field("name", &self.name)
            .field("frames", &self.gt.len())
            .finish()
    }
}

impl Sequence {
    pub fn from_frames(name: impl Into<String>, frames: Vec<Image>, gt: Vec<BoundingBox>) -> Result<Self> {
        Self::build(name.into(), frames.len(), Frames::Memory(frames), gt)
    }

    pub(crate) fn build(name: String, n: usize, frames: Frames, gt: Vec<BoundingBox>) -> Result<Self> {
        if n != gt.len() {
            return Err(Error::invalid(format!(
                "sequence {name}: {n} frames but {} ground-truth boxes",
                gt.len()
            )));
        }
        for b in &gt {
            b.validate()?;
        }
        Ok(Sequence { name, frames, gt })
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn ground_truth(&self) -> &[BoundingBox] {
        &self.gt
    }

    pub fn frame(&self, i: usize) -> Result<Image> {
        if i >= self.len() {
            return Err(Error::invalid(format!(
                "frame {i} out of range for {} ({} frames)",
                self.name,
                self.len()
            )));
        }
        match &self.frames {
            Frames::Memory(v) => Ok(v[i].clone()),
            Frames::Files(p) => Image::load(&p[i]),
            Frames::Synth(r) => Ok(r.render(i)),
        }
    }

    #[cfg(test)]
    pub(crate) fn frames_renderer(&self) -> Option<&Renderer> {
        match &self.frames {
            Frames::Synth(r) => Some(r),
            _ => None,
        }
    }

    /// Keep only the first `n` frames.
    pub fn truncated(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.gt.truncate(n);
        match &mut self.frames {
            Frames::Memory(v) => v.truncate(n),
            Frames::Files(p) => p.truncate(n),
            Frames::Synth(_) => {}
        }
        self
    }
}

/// Ground-truth file names tried in order.
pub const GT_FILES: [&str; 2] = ["groundtruth.txt", "groundtruth_rect.txt"];

/// One `x,y,w,h` box per non-empty line (commas, tabs or spaces).
pub fn parse_ground_truth(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(err(format!("expected x,y,w,h, got {} values", vals.len())));
        }
        let b = BoundingBox::from_xywh(vals[0], vals[1], vals[2], vals[3])
            .map_err(|_| err(format!("box must have positive finite size: {line}")))?;
        out.push(b);
    }
    Ok(out)
}

fn is_frame_file(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            .unwrap_or(false)
}

/// Frames from `dir/img/` (or `dir` itself) in name order plus
/// `groundtruth.txt`.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let gt_path = GT_FILES
        .iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(GT_FILES[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "ground-truth file not found"),
            )
        })?;
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let gt = parse_ground_truth(&text, &gt_path)?;
    let img_dir = if dir.join("img").is_dir() {
        dir.join("img")
    } else {
        dir.to_path_buf()
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_frame_file(p))
        .collect();
    files.sort();
    if files.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{}: {} frames but {} ground-truth lines",
            dir.display(),
            files.len(),
            gt.len()
        )));
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Sequence::build(name, files.len(), Frames::Files(files), gt)
}

pub fn format_xywh(b: &BoundingBox) -> String {
    let [x, y, w, h] = b.xywh();
    format!("{x:.4},{y:.4},{w:.4},{h:.4}")
}

/// Write `dir/img/00001.png …` and `dir/groundtruth.txt`.
pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let img = dir.join("img");
    fs::create_dir_all(&img).map_err(|e| Error::io(&img, e))?;
    let mut gt = String::new();
    for i in 0..seq.len() {
        seq.frame(i)?.save_png(&img.join(format!("{:05}.png", i + 1)))?;
        gt.push_str(&format_xywh(&seq.ground_truth()[i]));
        gt.push('\n');
    }
    let p = dir.join(GT_FILES[0]);
    fs::write(&p, gt).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_converts_corner_to_center() {
        let b = parse_ground_truth("10,20,30,40\n", Path::new("gt.txt")).unwrap();
        assert_eq!((b[0].cx, b[0].cy, b[0].w, b[0].h), (25.0, 40.0, 30.0, 40.0));
        let b = parse_ground_truth("1\t2\t3\t4\n\n5 6 7 8", Path::new("gt.txt")).unwrap();
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let e = parse_ground_truth("1,2,3,4\n1,2,x,4\n", Path::new("gt.txt")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_ground_truth("1,2,3\n", Path::new("gt.txt")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_ground_truth("1,2,0,4\n", Path::new("gt.txt")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn load_three_frames() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        fs::create_dir(&img).unwrap();
        for i in 0..3 {
            Image::filled(8, 8, [0.1 * i as f32, 0.0, 0.0])
                .save_png(&img.join(format!("{i:04}.png")))
                .unwrap();
        }
        fs::write(dir.path().join("groundtruth.txt"), "1,1,2,2\n1,1,3,3\n2,2,2,2\n").unwrap();
        let s = load_sequence(dir.path()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.frame(2).unwrap().width(), 8);
        assert_eq!(s.ground_truth()[1].w, 3.0);
    }

    #[test]
    fn missing_ground_truth_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let e = load_sequence(dir.path()).unwrap_err();
        assert!(e.to_string().contains("groundtruth.txt"), "{e}");
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        Image::new(4, 4).save_png(&dir.path().join("a.png")).unwrap();
        fs::write(dir.path().join("groundtruth.txt"), "1,1,2,2\n1,1,2,2\n").unwrap();
        assert!(load_sequence(dir.path()).is_err());
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![Image::filled(16, 12, [51.0 / 255.0, 204.0 / 255.0, 1.0]); 2];
        let gt = vec![BoundingBox::from_xywh(1.5, 2.0, 4.0, 5.25).unwrap(); 2];
        let s = Sequence::from_frames("s", frames, gt).unwrap();
        write_sequence(&s, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.ground_truth(), s.ground_truth());
        assert_eq!(back.frame(1).unwrap(), s.frame(1).unwrap());
    }
}
