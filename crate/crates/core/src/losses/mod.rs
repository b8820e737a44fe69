//! Training losses on the foreground channel of `[N, 2, D, H, W]` probabilities.

mod sdt;

pub use sdt::{signed_distance, squared_distance_to, SignedDistanceField};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::volume::LabelVolume;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfaceReduction {
    /// Σ φ·s
    Sum,
    /// Σ φ·s divided by the number of voxels in the batch
    Mean,
}

impl FromStr for SurfaceReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" | "raw-sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::Config(format!("unknown surface reduction `{s}` (sum | mean)"))),
        }
    }
}

impl fmt::Display for SurfaceReduction {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    DiceOnly,
    SurfaceOnly,
    Combined,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::DiceOnly, LossMode::SurfaceOnly, LossMode::Combined];

    pub fn needs_sdf(self) -> bool {
        self != LossMode::DiceOnly
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice-only" | "dice" => Ok(Self::DiceOnly),
            "surface-only" | "surface" => Ok(Self::SurfaceOnly),
            "combined" => Ok(Self::Combined),
            _ => Err(Error::Config(format!(
                "unknown loss mode `{s}` (dice-only | surface-only | combined)"
            ))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Self::DiceOnly => "dice-only",
            Self::SurfaceOnly => "surface-only",
            Self::Combined => "combined",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// weight of the Dice term
    pub lambda: f32,
    pub surface_reduction: SurfaceReduction,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            surface_reduction: SurfaceReduction::Mean,
            dice_smooth: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!("dice_smooth must be > 0, got {}", self.dice_smooth)));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = LossConfig {
            lambda: kv.take_or("lambda", d.lambda)?,
            surface_reduction: kv.take_or("surface_reduction", d.surface_reduction)?,
            dice_smooth: kv.take_or("dice_smooth", d.dice_smooth)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("lambda", self.lambda);
        kv.set("surface_reduction", self.surface_reduction);
        kv.set("dice_smooth", self.dice_smooth);
    }
}

/// Checks `[N, 2, D, H, W]` against `n` per-sample extents; returns voxels per sample.
fn check_batch(probs: &Tensor, extents: impl Iterator<Item = [usize; 3]>) -> Result<usize> {
    let [n, c, d, h, w] = probs.dims5()?;
    if c != 2 {
        return Err(Error::shape("prediction channels", 2, c));
    }
    let mut count = 0;
    for e in extents {
        if e != [d, h, w] {
            return Err(Error::Geometry(format!(
                "prediction extents {:?} vs target extents {e:?}",
                [d, h, w]
            )));
        }
        count += 1;
    }
    if count != n {
        return Err(Error::shape("batch size", n, count));
    }
    Ok(d * h * w)
}

/// Σ φ(q)·s(q) over the foreground channel, optionally averaged over voxels.
pub fn surface_loss(tape: &mut Tape, probs: Var, sdfs: &[SignedDistanceField], cfg: &LossConfig) -> Result<Var> {
    let p = tape.value(probs);
    let vol = check_batch(p, sdfs.iter().map(|s| s.extents()))?;
    let norm = match cfg.surface_reduction {
        SurfaceReduction::Sum => 1.0,
        SurfaceReduction::Mean => 1.0 / (vol * sdfs.len()) as f32,
    };
    let mut weights = Tensor::zeros(p.shape());
    for (n, sdf) in sdfs.iter().enumerate() {
        let fg = &mut weights.data_mut()[(2 * n + 1) * vol..(2 * n + 2) * vol];
        for (w, &phi) in fg.iter_mut().zip(&sdf.phi) {
            *w = phi * norm;
        }
    }
    tape.weighted_sum(probs, &weights)
}

/// Soft Dice loss on the foreground channel, averaged over the batch.
pub fn dice_loss(tape: &mut Tape, probs: Var, targets: &[LabelVolume], cfg: &LossConfig) -> Result<Var> {
    let p = tape.value(probs);
    let vol = check_batch(p, targets.iter().map(|t| t.extents()))?;
    let eps = cfg.dice_smooth;
    let n = targets.len();
    let g: Vec<f32> = targets.iter().flat_map(|t| t.to_f32()).collect();
    // per sample: (2·Σsg + ε, Σs + Σg + ε)
    let terms: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let s = &p.data()[(2 * i + 1) * vol..(2 * i + 2) * vol];
            let gi = &g[i * vol..(i + 1) * vol];
            let (mut inter, mut ss, mut gs) = (0.0f64, 0.0f64, 0.0f64);
            for (&a, &b) in s.iter().zip(gi) {
                inter += a as f64 * b as f64;
                ss += a as f64;
                gs += b as f64;
            }
            (2.0 * inter + eps, ss + gs + eps)
        })
        .collect();
    let loss = terms.iter().map(|(a, b)| 1.0 - a / b).sum::<f64>() / n as f64;
    Ok(tape.push(Tensor::scalar(loss as f32), &[probs], move |c| {
        let go = c.grad_out.item() as f64 / n as f64;
        let mut dx = Tensor::zeros(c.inputs[0].shape());
        for (i, &(num, den)) in terms.iter().enumerate() {
            let gi = &g[i * vol..(i + 1) * vol];
            let fg = &mut dx.data_mut()[(2 * i + 1) * vol..(2 * i + 2) * vol];
            for (d, &gq) in fg.iter_mut().zip(gi) {
                *d = (-go * (2.0 * gq as f64 * den - num) / (den * den)) as f32;
            }
        }
        Ok(vec![Some(dx)])
    }))
}

/// `L_surface + λ·L_dice`.
pub fn combined_loss(
    tape: &mut Tape,
    probs: Var,
    targets: &[LabelVolume],
    sdfs: &[SignedDistanceField],
    cfg: &LossConfig,
) -> Result<Var> {
    let s = surface_loss(tape, probs, sdfs, cfg)?;
    let d = dice_loss(tape, probs, targets, cfg)?;
    tape.add_scaled(s, d, cfg.lambda)
}

/// The training objective selected by `mode`. `sdfs` may be empty for Dice-only.
pub fn training_loss(
    tape: &mut Tape,
    mode: LossMode,
    probs: Var,
    targets: &[LabelVolume],
    sdfs: &[SignedDistanceField],
    cfg: &LossConfig,
) -> Result<Var> {
    match mode {
        LossMode::DiceOnly => dice_loss(tape, probs, targets, cfg),
        LossMode::SurfaceOnly => surface_loss(tape, probs, sdfs, cfg),
        LossMode::Combined => combined_loss(tape, probs, targets, sdfs, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn fixture() -> (LabelVolume, SignedDistanceField) {
        let g = Geometry::new([1, 1, 3], [1.0; 3]).unwrap();
        let m = LabelVolume::new(g, vec![0, 1, 0]).unwrap();
        let sdf = signed_distance(&m).unwrap();
        (m, sdf)
    }

    fn probs(fg: &[f32]) -> Tensor {
        let mut d: Vec<f32> = fg.iter().map(|p| 1.0 - p).collect();
        d.extend_from_slice(fg);
        Tensor::new(vec![1, 2, 1, 1, fg.len()], d).unwrap()
    }

    fn eval(f: impl Fn(&mut Tape, Var) -> Result<Var>, p: Tensor) -> f32 {
        let mut t = Tape::new();
        let x = t.leaf(p, true);
        let l = f(&mut t, x).unwrap();
        t.value(l).item()
    }

    #[test]
    fn surface_fixture_values() {
        let (_, sdf) = fixture();
        let cfg = LossConfig {
            surface_reduction: SurfaceReduction::Sum,
            ..Default::default()
        };
        let sdfs = [sdf];
        let f = |t: &mut Tape, x| surface_loss(t, x, &sdfs, &cfg);
        assert_eq!(eval(f, probs(&[0.0, 1.0, 0.0])), -1.0);
        assert_eq!(eval(f, probs(&[0.5, 0.5, 0.5])), 0.5);
        assert_eq!(eval(f, probs(&[0.0, 0.0, 0.0])), 0.0);
    }

    #[test]
    fn dice_limits() {
        let (m, _) = fixture();
        let targets = [m];
        let cfg = LossConfig::default();
        let f = |t: &mut Tape, x| dice_loss(t, x, &targets, &cfg);
        assert!(eval(f, probs(&[0.0, 1.0, 0.0])).abs() < 1e-5);
        assert!((eval(f, probs(&[0.0, 0.0, 0.0])) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch() {
        let (m, sdf) = fixture();
        let mut t = Tape::new();
        let x = t.leaf(probs(&[0.5; 4]), true);
        assert!(surface_loss(&mut t, x, &[sdf], &LossConfig::default()).is_err());
        assert!(dice_loss(&mut t, x, &[m], &LossConfig::default()).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in LossMode::ALL {
            assert_eq!(m.to_string().parse::<LossMode>().unwrap(), m);
        }
        assert!("focal".parse::<LossMode>().is_err());
    }
}
