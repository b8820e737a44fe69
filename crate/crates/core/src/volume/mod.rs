//! Physical-space volumes and the `VOL1` container.
//!
//! Extents are `(D, H, W)` in voxels, width fastest in memory. Spacing is kept
//! in the same axis order, in millimetres. The `VOL1` header writes spacing in
//! `x y z` order, i.e. along width, height, depth.

mod split;
mod synthetic;

pub use split::split_dataset;
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Grid extents and voxel spacing shared by paired volumes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    /// voxels along (D, H, W)
    pub extents: [usize; 3],
    /// mm per voxel along (D, H, W)
    pub spacing: [f64; 3],
}

impl Geometry {
    pub fn new(extents: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::NonPositiveSpacing(spacing));
        }
        Ok(Geometry { extents, spacing })
    }

    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.extents[1] + h) * self.extents[2] + w
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let w = i % self.extents[2];
        let h = (i / self.extents[2]) % self.extents[1];
        let d = i / (self.extents[1] * self.extents[2]);
        [d, h, w]
    }

    /// Voxel centre in millimetres.
    pub fn position_mm(&self, i: usize) -> [f64; 3] {
        let c = self.coords(i);
        [
            c[0] as f64 * self.spacing[0],
            c[1] as f64 * self.spacing[1],
            c[2] as f64 * self.spacing[2],
        ]
    }

    pub fn ensure_same(&self, other: &Geometry) -> Result<()> {
        if self.extents != other.extents {
            return Err(Error::Geometry(format!(
                "extents {:?} vs {:?}",
                self.extents, other.extents
            )));
        }
        if self.spacing != other.spacing {
            return Err(Error::Geometry(format!(
                "spacing {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }
}

/// Scalar intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::shape("voxel count", geometry.len(), data.len()));
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        Volume {
            data: vec![value; geometry.len()],
            geometry,
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.geometry.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }
}

/// Binary mask: 0 background, 1 bone.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub geometry: Geometry,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::shape("voxel count", geometry.len(), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!(
                "label value {bad} outside {{0, 1}}"
            )));
        }
        Ok(LabelVolume { geometry, labels })
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn([usize; 3]) -> bool) -> Self {
        let labels = (0..geometry.len())
            .map(|i| f(geometry.coords(i)) as u8)
            .collect();
        LabelVolume { geometry, labels }
    }

    pub fn empty(geometry: Geometry) -> Self {
        LabelVolume {
            labels: vec![0; geometry.len()],
            geometry,
        }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn set(&mut self, i: usize, fg: bool) {
        self.labels[i] = fg as u8;
    }

    #[inline]
    pub fn is_fg(&self, i: usize) -> bool {
        self.labels[i] != 0
    }

    pub fn extents(&self) -> [usize; 3] {
        self.geometry.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Both labels present.
    pub fn is_mixed(&self) -> bool {
        let fg = self.foreground_count();
        fg > 0 && fg < self.labels.len()
    }

    /// Labels as `0.0 / 1.0` floats.
    pub fn to_f32(&self) -> Vec<f32> {
        self.labels.iter().map(|&l| l as f32).collect()
    }
}

/// What a `VOL1` file holds.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Intensity(Volume),
    Label(LabelVolume),
}

impl AnyVolume {
    pub fn geometry(&self) -> &Geometry {
        match self {
            AnyVolume::Intensity(v) => &v.geometry,
            AnyVolume::Label(l) => &l.geometry,
        }
    }
}

const MAGIC: &str = "VOL1";

fn write_header<W: Write>(out: &mut W, dtype: &str, g: &Geometry) -> std::io::Result<()> {
    let [d, h, w] = g.extents;
    let [sz, sy, sx] = g.spacing;
    writeln!(out, "{MAGIC} {dtype} {d} {h} {w} {sx} {sy} {sz}")
}

pub fn encode_volume(v: &AnyVolume) -> Vec<u8> {
    let mut buf = Vec::new();
    match v {
        AnyVolume::Intensity(v) => {
            write_header(&mut buf, "f32", &v.geometry).expect("in-memory write");
            buf.reserve(v.data.len() * 4);
            for x in &v.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        AnyVolume::Label(l) => {
            write_header(&mut buf, "u8", &l.geometry).expect("in-memory write");
            buf.extend_from_slice(&l.labels);
        }
    }
    buf
}

pub fn decode_volume<R: BufRead>(input: &mut R) -> Result<AnyVolume> {
    let mut line = String::new();
    input
        .read_line(&mut line)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    let magic = fields.first().copied().unwrap_or("");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic.chars().take(16).collect(),
        });
    }
    if fields.len() != 8 {
        return Err(Error::MalformedHeader(format!(
            "expected 8 header fields, found {}",
            fields.len()
        )));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::MalformedHeader(format!("bad extent {s:?}")))
    };
    let sp = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::MalformedHeader(format!("bad spacing {s:?}")))
    };
    let extents = [dim(fields[2])?, dim(fields[3])?, dim(fields[4])?];
    let (sx, sy, sz) = (sp(fields[5])?, sp(fields[6])?, sp(fields[7])?);
    let geometry = Geometry::new(extents, [sz, sy, sx])?;
    let n = geometry.len();
    let width = match fields[1] {
        "f32" => 4,
        "u8" => 1,
        other => return Err(Error::MalformedHeader(format!("unknown dtype {other:?}"))),
    };
    let mut payload = Vec::with_capacity(n * width);
    input
        .take((n * width) as u64)
        .read_to_end(&mut payload)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if payload.len() != n * width {
        return Err(Error::TruncatedPayload {
            expected: n * width,
            found: payload.len(),
        });
    }
    Ok(if width == 4 {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        AnyVolume::Intensity(Volume::new(geometry, data)?)
    } else {
        AnyVolume::Label(LabelVolume::new(geometry, payload)?)
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&mut BufReader::new(f))
}

pub fn write_volume(v: &AnyVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&encode_volume(v))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Read a volume that must hold intensities.
pub fn read_intensity(path: impl AsRef<Path>) -> Result<Volume> {
    match read_volume(&path)? {
        AnyVolume::Intensity(v) => Ok(v),
        AnyVolume::Label(l) => Ok(Volume::new(
            l.geometry,
            l.labels.iter().map(|&x| x as f32).collect(),
        )?),
    }
}

/// Read a volume that must hold a binary mask.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_volume(&path)? {
        AnyVolume::Label(l) => Ok(l),
        AnyVolume::Intensity(_) => Err(Error::InvalidArgument(format!(
            "{} holds intensities, expected a u8 label volume",
            path.as_ref().display()
        ))),
    }
}
