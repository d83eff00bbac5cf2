//! Model files: magic `IOUTDSK1`, u32 tensor count, then per tensor
//! u16 name length, name, u8 dtype, u8 rank, u32 dims and the
//! little-endian payload. Everything is little-endian.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, FeatureExtractor};
use crate::error::{Error, Result};
use crate::iounet::{IouNet, IouNetConfig, IouVariant};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"IOUTDSK1";

/// A stored tensor, always read back as `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: u8,
    pub tensor: Tensor<f64>,
}

pub fn write_tensors<W: Write>(out: &mut W, tensors: &[NamedTensor]) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[t.dtype, t.tensor.rank() as u8])?;
        for &d in t.tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.tensor.data() {
            if t.dtype == f32::DTYPE {
                out.write_all(&(v as f32).to_le_bytes())?;
            } else {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::ModelFormat(format!("truncated file: {e}")))?;
    Ok(b)
}

pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<NamedTensor>> {
    if &take::<8>(input)? != MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let count = u32::from_le_bytes(take(input)?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(take(input)?) as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|e| Error::ModelFormat(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::ModelFormat("tensor name is not UTF-8".into()))?;
        let [dtype, rank] = take::<2>(input)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(input)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            d if d == f32::DTYPE => {
                for _ in 0..n {
                    data.push(f32::from_le_bytes(take(input)?) as f64);
                }
            }
            d if d == f64::DTYPE => {
                for _ in 0..n {
                    data.push(f64::from_le_bytes(take(input)?));
                }
            }
            d => return Err(Error::ModelFormat(format!("{name}: unknown dtype code {d}"))),
        }
        out.push(NamedTensor {
            name,
            dtype,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(out)
}

/// Frozen backbone plus the IoU network, shared read-only by trackers.
#[derive(Clone, Debug, PartialEq)]
pub struct Models<T> {
    pub backbone: Backbone<T>,
    pub iou: IouNet<T>,
}

/// Desk-scale backbone widths; see the README for the scale-down.
pub const DESK_BACKBONE: [usize; 4] = [16, 32, 32, 64];

/// Desk-scale IoU network for `variant` on the desk backbone.
pub fn desk_iou_config(variant: IouVariant) -> IouNetConfig {
    let mut c = IouNetConfig::new(variant, (DESK_BACKBONE[2], DESK_BACKBONE[3]));
    c.d_z = 16;
    c.hidden = [64, 32];
    c.embed = 32;
    c
}

impl<T: Scalar> Models<T> {
    /// Seeded backbone and untrained IoU network.
    pub fn seeded(cfg: IouNetConfig, backbone_channels: [usize; 4], seed: u64) -> Result<Self> {
        let backbone = Backbone::seeded(backbone_channels, seed)?;
        if backbone.channels() != cfg.channels {
            return Err(Error::invalid(format!(
                "backbone emits {:?} channels but the IoU net expects {:?}",
                backbone.channels(),
                cfg.channels
            )));
        }
        let iou = IouNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)))?;
        Ok(Models { backbone, iou })
    }

    pub fn desk(variant: IouVariant, seed: u64) -> Result<Self> {
        Self::seeded(desk_iou_config(variant), DESK_BACKBONE, seed)
    }

    pub fn cast<U: Scalar>(&self) -> Result<Models<U>> {
        let tensors = self.to_tensors();
        Models::from_tensors(&tensors)
    }

    fn meta(cfg: &IouNetConfig) -> Tensor<f64> {
        let v = IouVariant::ALL.iter().position(|&v| v == cfg.variant).unwrap_or(0);
        let vals = [
            v as f64,
            cfg.channels.0 as f64,
            cfg.channels.1 as f64,
            cfg.strides.0 as f64,
            cfg.strides.1 as f64,
            cfg.d_z as f64,
            cfg.ref_bins as f64,
            cfg.test_bins as f64,
            cfg.hidden[0] as f64,
            cfg.hidden[1] as f64,
            cfg.embed as f64,
        ];
        Tensor::vector(vals.to_vec())
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor {
            name: "meta.iou".into(),
            dtype: f64::DTYPE,
            tensor: Self::meta(&self.iou.cfg),
        }];
        let mut push = |name: String, t: Tensor<f64>| {
            out.push(NamedTensor {
                name,
                dtype: T::DTYPE,
                tensor: t,
            })
        };
        for (k, w) in self.backbone.weights().iter().enumerate() {
            push(format!("backbone.stage{}.w", k + 1), w.cast());
        }
        for (n, p) in self.iou.param_names().iter().zip(self.iou.params()) {
            push(n.clone(), p.cast());
        }
        for (n, s) in self.iou.stat_names().iter().zip(self.iou.stats()) {
            push(
                format!("{n}.running_mean"),
                Tensor::vector(s.mean.iter().map(|v| v.f64()).collect()),
            );
            push(
                format!("{n}.running_var"),
                Tensor::vector(s.var.iter().map(|v| v.f64()).collect()),
            );
        }
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor<f64>> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| &t.tensor)
                .ok_or_else(|| Error::ModelFormat(format!("missing tensor {name}")))
        };
        let m = find("meta.iou")?.data().to_vec();
        if m.len() != 11 {
            return Err(Error::ModelFormat("meta.iou must hold 11 values".into()));
        }
        let u = |i: usize| m[i] as usize;
        let variant = *IouVariant::ALL
            .get(u(0))
            .ok_or_else(|| Error::ModelFormat(format!("unknown variant index {}", m[0])))?;
        let cfg = IouNetConfig {
            variant,
            channels: (u(1), u(2)),
            strides: (u(3), u(4)),
            d_z: u(5),
            ref_bins: u(6),
            test_bins: u(7),
            hidden: [u(8), u(9)],
            embed: u(10),
        };
        let mut stages = Vec::new();
        for k in 1..=4 {
            stages.push(find(&format!("backbone.stage{k}.w"))?.cast::<T>());
        }
        let backbone = Backbone::from_weights(stages)?;
        let mut iou = IouNet::<T>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let names = iou.param_names().to_vec();
        for (name, p) in names.iter().zip(iou.params_mut()) {
            let t = find(name)?;
            if t.shape() != p.shape() {
                return Err(Error::ModelFormat(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t.cast();
        }
        let stat_names = iou.stat_names().to_vec();
        for (name, s) in stat_names.iter().zip(iou.stats_mut()) {
            let mean = find(&format!("{name}.running_mean"))?;
            let var = find(&format!("{name}.running_var"))?;
            if mean.len() != s.mean.len() || var.len() != s.var.len() {
                return Err(Error::ModelFormat(format!(
                    "{name}: running statistics have the wrong length"
                )));
            }
            s.mean = mean.data().iter().map(|&v| T::of(v)).collect();
            s.var = var.data().iter().map(|&v| T::of(v)).collect();
        }
        Ok(Models { backbone, iou })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &self.to_tensors()).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_tensors(&read_tensors(&mut bytes.as_slice())?)
    }
}
