//! Exact separable Euclidean distance transform (Felzenszwalb & Huttenlocher).

use crate::error::{Error, Result};
use crate::parallel;
use crate::volume::{Geometry, LabelVolume, Volume};

/// Per-voxel signed distance in mm: negative on foreground, positive on
/// background, measured to the nearest voxel centre of the opposite label.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedDistanceField {
    pub geometry: Geometry,
    pub phi: Vec<f32>,
}

impl SignedDistanceField {
    pub fn extents(&self) -> [usize; 3] {
        self.geometry.extents
    }

    /// The field as an `f32` volume (for `VOL1` dumps).
    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry,
            data: self.phi.clone(),
        }
    }
}

/// Lower envelope of parabolas `f(p) + (w·(q-p))²`, written into `out`.
///
/// Infinite entries of `f` are not sites. A line without sites stays infinite.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let w2 = w * w;
    let key = |q: usize| f[q] + w2 * (q * q) as f64;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (key(q) - key(p)) / (2.0 * w2 * (q - p) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < z.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = w * (q as f64 - v[k] as f64);
        *o = d * d + f[v[k]];
    }
}

/// Squared distance (mm²) from every voxel to the nearest voxel where `site` holds.
pub fn squared_distance_to(geometry: &Geometry, site: impl Fn(usize) -> bool) -> Vec<f64> {
    let ext = geometry.extents;
    let mut g: Vec<f64> = (0..geometry.len())
        .map(|i| if site(i) { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in (0..3).rev() {
        let len = ext[axis];
        let inner: usize = ext[axis + 1..].iter().product();
        let outer: usize = ext[..axis].iter().product();
        let w = geometry.spacing[axis];
        let lines = parallel::map_range(outer * inner, |l| {
            let base = (l / inner) * len * inner + l % inner;
            let f: Vec<f64> = (0..len).map(|k| g[base + k * inner]).collect();
            let mut out = vec![0.0; len];
            envelope_1d(&f, w, &mut out, &mut Vec::new(), &mut Vec::new());
            out
        });
        for (l, line) in lines.into_iter().enumerate() {
            let base = (l / inner) * len * inner + l % inner;
            for (k, v) in line.into_iter().enumerate() {
                g[base + k * inner] = v;
            }
        }
    }
    g
}

/// Exact signed distance field of a binary mask.
pub fn signed_distance(mask: &LabelVolume) -> Result<SignedDistanceField> {
    if !mask.is_mixed() {
        return Err(Error::DegenerateMask);
    }
    let g = mask.geometry;
    let to_fg = squared_distance_to(&g, |i| mask.is_fg(i));
    let to_bg = squared_distance_to(&g, |i| !mask.is_fg(i));
    let phi = (0..g.len())
        .map(|i| {
            if mask.is_fg(i) {
                -to_bg[i].sqrt() as f32
            } else {
                to_fg[i].sqrt() as f32
            }
        })
        .collect();
    Ok(SignedDistanceField { geometry: g, phi })
}
