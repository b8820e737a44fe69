//! Synthetic fractured-bone CT generator.
//!
//! Bones are randomly oriented ellipsoids; fractures are planar slabs removed
//! from a body. Intensities follow a bright cortical shell around the intact
//! body, a dim cancellous interior that overlaps soft tissue, and Gaussian
//! noise, so fracture faces (which expose cancellous bone) are low contrast.
//! Intensities are emitted in HU through the inverse of the default window.

use super::{Geometry, LabelVolume, Volume};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// voxels along (D, H, W)
    pub extents: [usize; 3],
    /// mm per voxel, isotropic
    pub spacing: f64,
    pub bodies: usize,
    /// ellipsoid semi-axis range in mm
    pub radius_mm: (f64, f64),
    pub gaps: usize,
    /// fracture slab width range in mm
    pub gap_width_mm: (f64, f64),
    /// cortical shell thickness in voxels
    pub shell_voxels: usize,
    /// intensities in normalised window units
    pub shell_intensity: f32,
    pub cancellous_intensity: f32,
    pub soft_tissue_intensity: f32,
    pub noise_std: f32,
    /// HU window used to convert normalised units to HU
    pub hu_window: (f32, f32),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            extents: [48, 48, 48],
            spacing: 0.8,
            bodies: 2,
            radius_mm: (5.0, 10.0),
            gaps: 1,
            gap_width_mm: (1.6, 2.4),
            shell_voxels: 1,
            shell_intensity: 0.9,
            cancellous_intensity: 0.45,
            soft_tissue_intensity: 0.4,
            noise_std: 0.05,
            hu_window: (-200.0, 800.0),
        }
    }
}

impl SyntheticSpec {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.extents, [self.spacing; 3])
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let spec = SyntheticSpec {
            seed: kv.take_or("seed", d.seed)?,
            extents: kv.take_triple("extents")?.unwrap_or(d.extents),
            spacing: kv.take_or("spacing", d.spacing)?,
            bodies: kv.take_or("bodies", d.bodies)?,
            radius_mm: take_pair(kv, "radius_mm")?.unwrap_or(d.radius_mm),
            gaps: kv.take_or("gaps", d.gaps)?,
            gap_width_mm: take_pair(kv, "gap_width_mm")?.unwrap_or(d.gap_width_mm),
            shell_voxels: kv.take_or("shell_voxels", d.shell_voxels)?,
            shell_intensity: kv.take_or("shell_intensity", d.shell_intensity)?,
            cancellous_intensity: kv.take_or("cancellous_intensity", d.cancellous_intensity)?,
            soft_tissue_intensity: kv.take_or("soft_tissue_intensity", d.soft_tissue_intensity)?,
            noise_std: kv.take_or("noise_std", d.noise_std)?,
            hu_window: take_pair(kv, "hu_window")?.unwrap_or(d.hu_window),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        let [a, b, c] = self.extents;
        kv.set("seed", self.seed);
        kv.set("extents", format!("{a},{b},{c}"));
        kv.set("spacing", self.spacing);
        kv.set("bodies", self.bodies);
        kv.set("radius_mm", format!("{},{}", self.radius_mm.0, self.radius_mm.1));
        kv.set("gaps", self.gaps);
        kv.set("gap_width_mm", format!("{},{}", self.gap_width_mm.0, self.gap_width_mm.1));
        kv.set("shell_voxels", self.shell_voxels);
        kv.set("shell_intensity", self.shell_intensity);
        kv.set("cancellous_intensity", self.cancellous_intensity);
        kv.set("soft_tissue_intensity", self.soft_tissue_intensity);
        kv.set("noise_std", self.noise_std);
        kv.set("hu_window", format!("{},{}", self.hu_window.0, self.hu_window.1));
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        let (rmin, rmax) = self.radius_mm;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::InvalidArgument(format!("radius range {:?} is empty", self.radius_mm)));
        }
        let smallest = *self.extents.iter().min().unwrap_or(&0) as f64 * self.spacing;
        if 2.0 * rmax + 2.0 * self.spacing > smallest {
            return Err(Error::InvalidArgument(format!(
                "ellipsoid radius {rmax} mm does not fit in a {smallest} mm volume"
            )));
        }
        let (gmin, gmax) = self.gap_width_mm;
        if self.gaps > 0 && (gmin < self.spacing || gmin > gmax) {
            return Err(Error::InvalidArgument(format!(
                "gap width range {:?} mm must be ordered and at least one voxel ({} mm)",
                self.gap_width_mm, self.spacing
            )));
        }
        if self.gaps > 0 && self.bodies == 0 {
            return Err(Error::InvalidArgument("fracture gaps need at least one body".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
        }
        if !(self.hu_window.0 < self.hu_window.1) {
            return Err(Error::InvalidArgument("hu_window must be increasing".into()));
        }
        Ok(())
    }
}

fn take_pair<T: std::str::FromStr + Copy>(kv: &mut KeyValues, key: &str) -> Result<Option<(T, T)>> {
    let Some(v) = kv.take::<String>(key)? else {
        return Ok(None);
    };
    let bad = || Error::Config(format!("bad value for key `{key}`: expected `low,high`, got {v:?}"));
    let (a, b) = v.split_once(',').ok_or_else(bad)?;
    Ok(Some((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)))
}

struct Ellipsoid {
    centre: [f64; 3],
    /// rows are the body axes (orthonormal)
    axes: [[f64; 3]; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = sub(p, self.centre);
        (0..3).map(|k| (dot(self.axes[k], d) / self.radii[k]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let l = dot(v, v).sqrt();
        if l > 1e-6 {
            return [v[0] / l, v[1] / l, v[2] / l];
        }
    }
}

fn random_frame(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let a = unit_vector(rng);
    let mut b = unit_vector(rng);
    let proj = dot(a, b);
    b = [b[0] - proj * a[0], b[1] - proj * a[1], b[2] - proj * a[2]];
    let l = dot(b, b).sqrt();
    if l < 1e-6 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    b = [b[0] / l, b[1] / l, b[2] / l];
    [a, b, cross(a, b)]
}

/// Generate a paired (intensity in HU, label) volume.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phys = geometry.extents.map(|e| e as f64 * spec.spacing);

    let bodies: Vec<Ellipsoid> = (0..spec.bodies)
        .map(|_| {
            let radii = [0; 3].map(|_| rng.gen_range(spec.radius_mm.0..=spec.radius_mm.1));
            let r = radii.iter().cloned().fold(0.0, f64::max) + spec.spacing;
            let centre = [0, 1, 2].map(|a| rng.gen_range(r..=(phys[a] - spec.spacing - r).max(r)));
            Ellipsoid {
                centre,
                axes: random_frame(&mut rng),
                radii,
            }
        })
        .collect();

    // (body, point on plane, normal, half width)
    let cuts: Vec<(usize, [f64; 3], [f64; 3], f64)> = (0..spec.gaps)
        .map(|_| {
            let b = rng.gen_range(0..bodies.len());
            let e = &bodies[b];
            let normal = unit_vector(&mut rng);
            let rmin = e.radii.iter().cloned().fold(f64::INFINITY, f64::min);
            let off = rng.gen_range(-0.3..=0.3) * rmin;
            let p = [0, 1, 2].map(|k| e.centre[k] + off * normal[k]);
            let w = rng.gen_range(spec.gap_width_mm.0..=spec.gap_width_mm.1);
            (b, p, normal, w / 2.0)
        })
        .collect();

    let n = geometry.len();
    let mut intact = vec![false; n];
    let mut label = LabelVolume::empty(geometry);
    for i in 0..n {
        let p = geometry.position_mm(i);
        let mut inside_any = false;
        let mut kept = false;
        for (bi, body) in bodies.iter().enumerate() {
            if !body.contains(p) {
                continue;
            }
            inside_any = true;
            let cut = cuts
                .iter()
                .any(|&(b, q, nrm, hw)| b == bi && dot(sub(p, q), nrm).abs() < hw);
            if !cut {
                kept = true;
            }
        }
        intact[i] = inside_any;
        label.set(i, kept);
    }

    let shell = shell_mask(&geometry, &intact, spec.shell_voxels);
    let noise = Normal::new(0.0f32, spec.noise_std.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (lo, hi) = spec.hu_window;
    let data = (0..n)
        .map(|i| {
            let base = if !label.is_fg(i) {
                spec.soft_tissue_intensity
            } else if shell[i] {
                spec.shell_intensity
            } else {
                spec.cancellous_intensity
            };
            let v = base + if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            lo + v * (hi - lo)
        })
        .collect();
    Ok((Volume::new(geometry, data)?, label))
}

/// Voxels of `mask` within `thickness` 6-connected steps of the outside
/// (volume faces count as outside).
fn shell_mask(g: &Geometry, mask: &[bool], thickness: usize) -> Vec<bool> {
    let mut shell = vec![false; mask.len()];
    let mut inner = mask.to_vec();
    let [d, h, w] = g.extents;
    for _ in 0..thickness {
        let prev = inner.clone();
        for i in 0..mask.len() {
            if !prev[i] {
                continue;
            }
            let [z, y, x] = g.coords(i);
            let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w
                || !prev[g.index(z - 1, y, x)]
                || !prev[g.index(z + 1, y, x)]
                || !prev[g.index(z, y - 1, x)]
                || !prev[g.index(z, y + 1, x)]
                || !prev[g.index(z, y, x - 1)]
                || !prev[g.index(z, y, x + 1)];
            if edge {
                shell[i] = true;
                inner[i] = false;
            }
        }
    }
    shell
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_keys_round_trip() {
        let spec = SyntheticSpec {
            seed: 4,
            extents: [32, 40, 48],
            radius_mm: (4.0, 8.5),
            ..Default::default()
        };
        let mut kv = KeyValues::default();
        spec.to_kv(&mut kv);
        assert_eq!(SyntheticSpec::from_kv(&mut kv).unwrap(), spec);
        kv.finish().unwrap();
        let mut bad = KeyValues::parse("radius_mm=5").unwrap();
        assert!(SyntheticSpec::from_kv(&mut bad).unwrap_err().to_string().contains("radius_mm"));
    }

    #[test]
    fn infeasible_radius_is_rejected() {
        let spec = SyntheticSpec {
            extents: [16, 16, 16],
            radius_mm: (5.0, 20.0),
            ..Default::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn sub_voxel_gap_is_rejected() {
        let spec = SyntheticSpec {
            gap_width_mm: (0.4, 1.0),
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn paired_geometry_and_foreground() {
        let (v, l) = generate_synthetic(&SyntheticSpec::default()).unwrap();
        v.geometry.ensure_same(&l.geometry).unwrap();
        assert!(l.is_mixed());
    }
}
