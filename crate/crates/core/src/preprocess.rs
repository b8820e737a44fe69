//! CT preprocessing: HU clamp and window, resampling to a target spacing,
//! training-patch sampling, inference tiling and stitching.

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{Geometry, LabelVolume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub hu_min: f32,
    pub hu_max: f32,
    /// mm along (D, H, W)
    pub target_spacing: [f64; 3],
    /// cubic patch edge in voxels
    pub patch_size: usize,
    /// tile overlap in voxels for inference
    pub patch_overlap: usize,
    /// probability a training patch is centred on a foreground voxel
    pub foreground_probability: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            hu_min: -200.0,
            hu_max: 800.0,
            target_spacing: [0.8; 3],
            patch_size: 64,
            patch_overlap: 0,
            foreground_probability: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hu_min < self.hu_max) {
            return Err(Error::Config(format!(
                "hu_min ({}) must be below hu_max ({})",
                self.hu_min, self.hu_max
            )));
        }
        if self.target_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::NonPositiveSpacing(self.target_spacing));
        }
        if self.patch_size == 0 || self.patch_size % 8 != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of 8",
                self.patch_size
            )));
        }
        if self.patch_overlap >= self.patch_size {
            return Err(Error::Config("patch_overlap must be smaller than patch_size".into()));
        }
        if !(0.0..=1.0).contains(&self.foreground_probability) {
            return Err(Error::Config("foreground_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Consume the preprocessing keys from `kv`, falling back to defaults.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = PreprocessConfig {
            hu_min: kv.take_or("hu_min", d.hu_min)?,
            hu_max: kv.take_or("hu_max", d.hu_max)?,
            target_spacing: kv.take_triple("target_spacing")?.unwrap_or(d.target_spacing),
            patch_size: kv.take_or("patch_size", d.patch_size)?,
            patch_overlap: kv.take_or("patch_overlap", d.patch_overlap)?,
            foreground_probability: kv.take_or("foreground_probability", d.foreground_probability)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("hu_min", self.hu_min);
        kv.set("hu_max", self.hu_max);
        let [a, b, c] = self.target_spacing;
        kv.set("target_spacing", format!("{a},{b},{c}"));
        kv.set("patch_size", self.patch_size);
        kv.set("patch_overlap", self.patch_overlap);
        kv.set("foreground_probability", self.foreground_probability);
    }
}

/// Clamp to `[hu_min, hu_max]` and map that window affinely onto `[0, 1]`.
pub fn clamp_and_window(volume: &Volume, cfg: &PreprocessConfig) -> Volume {
    let (lo, hi) = (cfg.hu_min, cfg.hu_max);
    let span = hi - lo;
    let data = volume
        .data
        .iter()
        .map(|&v| (v.clamp(lo, hi) - lo) / span)
        .collect();
    Volume {
        geometry: volume.geometry,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Per output index: (lower source, upper source, upper weight).
fn resample_taps(len: usize, src_spacing: f64, dst_spacing: f64, out_len: usize, mode: Interp) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * dst_spacing / src_spacing - 0.5;
            match mode {
                Interp::Nearest => {
                    let i = ((src + 0.5).floor().max(0.0) as usize).min(len - 1);
                    (i, i, 0.0)
                }
                Interp::Trilinear => {
                    let s = src.clamp(0.0, (len - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(len - 1);
                    (i0, i1, s - i0 as f64)
                }
            }
        })
        .collect()
}

fn resample_axis<T: Copy>(data: &[T], ext: [usize; 3], axis: usize, taps: &[(usize, usize, f64)], mix: impl Fn(T, T, f64) -> T) -> (Vec<T>, [usize; 3]) {
    let mut out_ext = ext;
    out_ext[axis] = taps.len();
    let outer: usize = ext[..axis].iter().product();
    let inner: usize = ext[axis + 1..].iter().product();
    let len = ext[axis];
    let mut out = Vec::with_capacity(outer * taps.len() * inner);
    for o in 0..outer {
        for &(i0, i1, t) in taps {
            let a = (o * len + i0) * inner;
            let b = (o * len + i1) * inner;
            for k in 0..inner {
                out.push(mix(data[a + k], data[b + k], t));
            }
        }
    }
    (out, out_ext)
}

fn resampled_geometry(g: &Geometry, target: [f64; 3]) -> Result<Geometry> {
    if target.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::NonPositiveSpacing(target));
    }
    let ext = [0, 1, 2].map(|a| ((g.extents[a] as f64 * g.spacing[a] / target[a]).round() as usize).max(1));
    Geometry::new(ext, target)
}

fn resample_generic<T: Copy>(data: &[T], g: &Geometry, target: [f64; 3], mode: Interp, mix: impl Fn(T, T, f64) -> T + Copy) -> Result<(Vec<T>, Geometry)> {
    let out = resampled_geometry(g, target)?;
    let mut cur = data.to_vec();
    let mut ext = g.extents;
    for axis in (0..3).rev() {
        if g.spacing[axis] == target[axis] {
            continue;
        }
        let taps = resample_taps(ext[axis], g.spacing[axis], target[axis], out.extents[axis], mode);
        let (next, e) = resample_axis(&cur, ext, axis, &taps, mix);
        cur = next;
        ext = e;
    }
    Ok((cur, out))
}

/// Resample intensities onto `target_spacing` (align-corners=false sampling).
pub fn resample(volume: &Volume, target_spacing: [f64; 3], mode: Interp) -> Result<Volume> {
    let mix = move |a: f32, b: f32, t: f64| match mode {
        Interp::Nearest => a,
        Interp::Trilinear => {
            if t == 0.0 {
                a
            } else {
                (a as f64 * (1.0 - t) + b as f64 * t) as f32
            }
        }
    };
    let (data, geometry) = resample_generic(&volume.data, &volume.geometry, target_spacing, mode, mix)?;
    Volume::new(geometry, data)
}

/// Nearest-neighbour resampling of a mask; labels stay binary.
pub fn resample_labels(label: &LabelVolume, target_spacing: [f64; 3]) -> Result<LabelVolume> {
    let (data, geometry) = resample_generic(label.labels(), &label.geometry, target_spacing, Interp::Nearest, |a, _, _| a)?;
    LabelVolume::new(geometry, data)
}

/// A cubic crop with its origin (voxel index of its first corner).
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub image: Volume,
    pub label: Option<LabelVolume>,
}

impl Patch {
    /// Image as a `[1, 1, p, p, p]` tensor.
    pub fn image_tensor(&self) -> Tensor {
        let [d, h, w] = self.image.extents();
        Tensor::new(vec![1, 1, d, h, w], self.image.data.clone()).expect("patch geometry")
    }
}

fn crop_geometry(g: &Geometry, size: usize) -> Result<Geometry> {
    Geometry::new([size; 3], g.spacing)
}

fn crop<T: Copy>(data: &[T], g: &Geometry, origin: [usize; 3], size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(size * size * size);
    for d in origin[0]..origin[0] + size {
        for h in origin[1]..origin[1] + size {
            let i = g.index(d, h, origin[2]);
            out.extend_from_slice(&data[i..i + size]);
        }
    }
    out
}

pub fn crop_patch(image: &Volume, label: Option<&LabelVolume>, origin: [usize; 3], size: usize) -> Result<Patch> {
    let g = image.geometry;
    for a in 0..3 {
        if origin[a] + size > g.extents[a] {
            return Err(Error::InvalidArgument(format!("patch at {origin:?} leaves the volume on axis {a}")));
        }
    }
    let pg = crop_geometry(&g, size)?;
    Ok(Patch {
        origin,
        image: Volume::new(pg, crop(&image.data, &g, origin, size))?,
        label: label
            .map(|l| LabelVolume::new(pg, crop(l.labels(), &l.geometry, origin, size)))
            .transpose()?,
    })
}

fn check_fits(g: &Geometry, size: usize) -> Result<()> {
    if g.extents.iter().any(|&e| e < size) {
        return Err(Error::InvalidArgument(format!(
            "volume {:?} is smaller than the {size}³ patch; pad the volume or lower patch_size",
            g.extents
        )));
    }
    Ok(())
}

/// Tile origins covering every voxel with the configured overlap; the last
/// tile on each axis is flush with the far face.
pub fn tile_origins(extents: [usize; 3], size: usize, overlap: usize) -> Result<Vec<[usize; 3]>> {
    if overlap >= size {
        return Err(Error::InvalidArgument("overlap must be smaller than patch size".into()));
    }
    let step = size - overlap;
    let axis = |len: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..).map(|k| k * step).take_while(|&o| o + size < len).collect();
        v.push(len - size);
        v
    };
    if extents.iter().any(|&e| e < size) {
        return Err(Error::InvalidArgument(format!(
            "volume {extents:?} is smaller than the {size}³ patch; pad the volume or lower patch_size"
        )));
    }
    let (a, b, c) = (axis(extents[0]), axis(extents[1]), axis(extents[2]));
    let mut out = Vec::with_capacity(a.len() * b.len() * c.len());
    for &d in &a {
        for &h in &b {
            for &w in &c {
                out.push([d, h, w]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchMode {
    /// endless foreground-biased random crops
    Training,
    /// finite tiling covering the volume
    Inference,
}

/// Stream of patches from a volume (and optional label).
pub struct PatchStream<'a> {
    image: &'a Volume,
    label: Option<&'a LabelVolume>,
    size: usize,
    kind: StreamKind,
}

enum StreamKind {
    Sampler {
        rng: ChaCha8Rng,
        foreground: Vec<usize>,
        probability: f64,
    },
    Tiles {
        origins: Vec<[usize; 3]>,
        next: usize,
    },
}

/// Patches for training (seeded random, foreground-biased) or inference (tiles).
pub fn extract_patches<'a>(image: &'a Volume, label: Option<&'a LabelVolume>, cfg: &PreprocessConfig, seed: u64, mode: PatchMode) -> Result<PatchStream<'a>> {
    let size = cfg.patch_size;
    check_fits(&image.geometry, size)?;
    if let Some(l) = label {
        image.geometry.ensure_same(&l.geometry)?;
    }
    let kind = match mode {
        PatchMode::Training => StreamKind::Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            foreground: label
                .map(|l| (0..l.labels().len()).filter(|&i| l.is_fg(i)).collect())
                .unwrap_or_default(),
            probability: cfg.foreground_probability,
        },
        PatchMode::Inference => StreamKind::Tiles {
            origins: tile_origins(image.extents(), size, cfg.patch_overlap)?,
            next: 0,
        },
    };
    Ok(PatchStream { image, label, size, kind })
}

impl Iterator for PatchStream<'_> {
    type Item = Patch;

    fn next(&mut self) -> Option<Patch> {
        let g = self.image.geometry;
        let size = self.size;
        let origin = match &mut self.kind {
            StreamKind::Tiles { origins, next } => {
                let o = *origins.get(*next)?;
                *next += 1;
                o
            }
            StreamKind::Sampler { rng, foreground, probability } => {
                let biased = !foreground.is_empty() && rng.gen_bool(*probability);
                if biased {
                    let c = g.coords(foreground[rng.gen_range(0..foreground.len())]);
                    [0, 1, 2].map(|a| c[a].saturating_sub(size / 2).min(g.extents[a] - size))
                } else {
                    [0, 1, 2].map(|a| rng.gen_range(0..=g.extents[a] - size))
                }
            }
        };
        Some(crop_patch(self.image, self.label, origin, size).expect("origin inside volume"))
    }
}

/// Average overlapping per-patch probabilities into a full-volume `[1, C, D, H, W]` tensor.
///
/// Each prediction is `[1, C, p, p, p]` (or `[C, p, p, p]`).
pub fn stitch_patches(predictions: &[Tensor], origins: &[[usize; 3]], full_extents: [usize; 3]) -> Result<Tensor> {
    if predictions.len() != origins.len() {
        return Err(Error::shape("patch origins", predictions.len(), origins.len()));
    }
    let first = predictions.first().ok_or_else(|| Error::Empty("no patches to stitch".into()))?;
    let pshape = |t: &Tensor| -> Result<[usize; 4]> {
        match *t.shape() {
            [1, c, d, h, w] | [c, d, h, w] => Ok([c, d, h, w]),
            _ => Err(Error::InvalidArgument(format!("patch prediction shape {:?}", t.shape()))),
        }
    };
    let c = pshape(first)?[0];
    let [fd, fh, fw] = full_extents;
    let vol = fd * fh * fw;
    let mut sum = vec![0.0f64; c * vol];
    let mut count = vec![0u32; vol];
    for (p, o) in predictions.iter().zip(origins) {
        let [pc, pd, ph, pw] = pshape(p)?;
        if pc != c {
            return Err(Error::shape("patch channels", c, pc));
        }
        if o[0] + pd > fd || o[1] + ph > fh || o[2] + pw > fw {
            return Err(Error::InvalidArgument(format!("patch at {o:?} exceeds {full_extents:?}")));
        }
        let pv = pd * ph * pw;
        for d in 0..pd {
            for h in 0..ph {
                for w in 0..pw {
                    let fi = ((o[0] + d) * fh + o[1] + h) * fw + o[2] + w;
                    let pi = (d * ph + h) * pw + w;
                    count[fi] += 1;
                    for ch in 0..c {
                        sum[ch * vol + fi] += p.data()[ch * pv + pi] as f64;
                    }
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("voxel {i} is not covered by any patch")));
    }
    let data = (0..c * vol).map(|i| (sum[i] / count[i % vol] as f64) as f32).collect();
    Tensor::new(vec![1, c, fd, fh, fw], data)
}

/// Foreground where channel 1 beats channel 0 of a `[1, 2, D, H, W]` probability map.
pub fn argmax_labels(probs: &Tensor, geometry: Geometry) -> Result<LabelVolume> {
    let [_, c, d, h, w] = probs.dims5()?;
    if [d, h, w] != geometry.extents || c != 2 {
        return Err(Error::Geometry(format!(
            "probabilities {:?} vs geometry {:?}",
            probs.shape(),
            geometry.extents
        )));
    }
    let vol = d * h * w;
    let p = probs.data();
    LabelVolume::new(geometry, (0..vol).map(|i| (p[vol + i] > p[i]) as u8).collect())
}
