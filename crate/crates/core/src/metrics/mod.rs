//! Overlap and surface-distance metrics, all in physical units.

mod kdtree;

pub use kdtree::KdTree;

use crate::error::{Error, Result};
use crate::parallel;
use crate::volume::LabelVolume;
use std::fmt::Write as _;

/// Dice similarity coefficient `2|P∩G| / (|P|+|G|)`; 1 when both are empty.
pub fn dsc(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    pred.geometry.ensure_same(&truth.geometry)?;
    let (p, t) = (pred.labels(), truth.labels());
    let inter = p.iter().zip(t).filter(|(&a, &b)| a == 1 && b == 1).count();
    let total = pred.foreground_count() + truth.foreground_count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Boundary voxel centres in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Foreground voxels with a 6-neighbour that is background or outside the volume.
fn boundary_points(mask: &LabelVolume) -> SurfacePointSet {
    let g = mask.geometry;
    let [d, h, w] = g.extents;
    let fg = |z: usize, y: usize, x: usize| mask.is_fg(g.index(z, y, x));
    let mut points = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !fg(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if edge
                    || !fg(z - 1, y, x)
                    || !fg(z + 1, y, x)
                    || !fg(z, y - 1, x)
                    || !fg(z, y + 1, x)
                    || !fg(z, y, x - 1)
                    || !fg(z, y, x + 1)
                {
                    points.push(g.position_mm(g.index(z, y, x)));
                }
            }
        }
    }
    SurfacePointSet { points }
}

/// Surface of a mask that has both labels.
pub fn extract_surface(mask: &LabelVolume) -> Result<SurfacePointSet> {
    if !mask.is_mixed() {
        return Err(Error::DegenerateMask);
    }
    Ok(boundary_points(mask))
}

/// Distance from every point of `from` to its nearest neighbour in `to`.
pub fn directed_distances(from: &SurfacePointSet, to: &SurfacePointSet) -> Result<Vec<f64>> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::Empty("surface point set".into()));
    }
    let tree = KdTree::new(to.points.clone());
    Ok(parallel::map_slice(&from.points, |&p| tree.nearest_sq(p).sqrt()))
}

fn pooled(a: &SurfacePointSet, b: &SurfacePointSet) -> Result<Vec<f64>> {
    let mut d = directed_distances(a, b)?;
    d.extend(directed_distances(b, a)?);
    Ok(d)
}

/// Average symmetric surface distance (mm).
pub fn assd(pred: &SurfacePointSet, truth: &SurfacePointSet) -> Result<f64> {
    let d = pooled(pred, truth)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Percentile `q` ∈ [0, 100] with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

/// 95th percentile of the pooled symmetric surface distances (mm).
pub fn hd95(pred: &SurfacePointSet, truth: &SurfacePointSet) -> Result<f64> {
    percentile(&pooled(pred, truth)?, 95.0)
}

/// Metrics of one case. Surface distances are `None` when undefined
/// (an empty prediction or an empty ground truth).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub dsc: f64,
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
}

pub fn evaluate_case(pred: &LabelVolume, truth: &LabelVolume) -> Result<MetricReport> {
    let dsc = dsc(pred, truth)?;
    if pred.foreground_count() == 0 || truth.foreground_count() == 0 {
        if pred.foreground_count() != truth.foreground_count() {
            log::warn!("empty mask on one side; surface distances are undefined for this case");
        }
        return Ok(MetricReport { dsc, assd: None, hd95: None });
    }
    let (p, t) = (boundary_points(pred), boundary_points(truth));
    let d = pooled(&p, &t)?;
    Ok(MetricReport {
        dsc,
        assd: Some(d.iter().sum::<f64>() / d.len() as f64),
        hd95: Some(percentile(&d, 95.0)?),
    })
}

/// Evaluate many cases, in parallel when enabled; results keep input order.
pub fn evaluate_cases(pairs: &[(LabelVolume, LabelVolume)]) -> Result<Vec<MetricReport>> {
    parallel::map_slice(pairs, |(p, t)| evaluate_case(p, t)).into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    /// population standard deviation
    pub sd: f64,
    pub count: usize,
}

/// Mean and population SD; summation order is fixed by sorting, so the
/// result does not depend on case order.
pub fn mean_sd(values: &[f64]) -> Option<MeanSd> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    Some(MeanSd {
        mean,
        sd: (sq.iter().sum::<f64>() / n).sqrt(),
        count: v.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub dsc: MeanSd,
    pub assd: Option<MeanSd>,
    pub hd95: Option<MeanSd>,
    /// cases whose surface distances were undefined and left out
    pub excluded: usize,
}

pub fn aggregate(reports: &[MetricReport]) -> Result<Aggregate> {
    let dscs: Vec<f64> = reports.iter().map(|r| r.dsc).collect();
    let dsc = mean_sd(&dscs).ok_or_else(|| Error::Empty("no cases to aggregate".into()))?;
    let assds: Vec<f64> = reports.iter().filter_map(|r| r.assd).collect();
    let hds: Vec<f64> = reports.iter().filter_map(|r| r.hd95).collect();
    let excluded = reports.len() - assds.len();
    if excluded > 0 {
        log::warn!("{excluded} case(s) excluded from surface-distance aggregation");
    }
    Ok(Aggregate {
        dsc,
        assd: mean_sd(&assds),
        hd95: mean_sd(&hds),
        excluded,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

/// `case_id,dsc,assd_mm,hd95_mm` rows followed by `mean` and `sd` rows.
pub fn report_csv(cases: &[(String, MetricReport)]) -> Result<String> {
    let reports: Vec<MetricReport> = cases.iter().map(|(_, r)| *r).collect();
    let agg = aggregate(&reports)?;
    let mut out = String::from("case_id,dsc,assd_mm,hd95_mm\n");
    for (id, r) in cases {
        let _ = writeln!(out, "{id},{},{},{}", r.dsc, cell(r.assd), cell(r.hd95));
    }
    let _ = writeln!(
        out,
        "mean,{},{},{}",
        agg.dsc.mean,
        cell(agg.assd.map(|m| m.mean)),
        cell(agg.hd95.map(|m| m.mean))
    );
    let _ = writeln!(
        out,
        "sd,{},{},{}",
        agg.dsc.sd,
        cell(agg.assd.map(|m| m.sd)),
        cell(agg.hd95.map(|m| m.sd))
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn g(ext: [usize; 3]) -> Geometry {
        Geometry::new(ext, [1.0; 3]).unwrap()
    }

    #[test]
    fn dsc_counts() {
        let a = LabelVolume::from_fn(g([1, 1, 12]), |[_, _, x]| x < 8);
        let b = LabelVolume::from_fn(g([1, 1, 12]), |[_, _, x]| x >= 4);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let e = LabelVolume::empty(g([1, 1, 12]));
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&a, &LabelVolume::from_fn(g([1, 1, 12]), |[_, _, x]| x >= 8)).unwrap(), 0.0);
    }

    #[test]
    fn cube_surface_excludes_centre() {
        let m = LabelVolume::from_fn(g([5, 5, 5]), |c| c.iter().all(|&v| (1..4).contains(&v)));
        assert_eq!(extract_surface(&m).unwrap().len(), 26);
        let one = LabelVolume::from_fn(g([3, 3, 3]), |c| c == [1, 1, 1]);
        assert_eq!(extract_surface(&one).unwrap().len(), 1);
        let sheet = LabelVolume::from_fn(g([4, 4, 4]), |[z, _, _]| z == 2);
        assert_eq!(extract_surface(&sheet).unwrap().len(), 16);
        assert!(extract_surface(&LabelVolume::empty(g([2, 2, 2]))).is_err());
    }

    #[test]
    fn parallel_sheets() {
        let a = LabelVolume::from_fn(g([6, 4, 4]), |[z, _, _]| z == 1);
        let b = LabelVolume::from_fn(g([6, 4, 4]), |[z, _, _]| z == 3);
        let (sa, sb) = (extract_surface(&a).unwrap(), extract_surface(&b).unwrap());
        assert_eq!(assd(&sa, &sb).unwrap(), 2.0);
        assert_eq!(hd95(&sa, &sb).unwrap(), 2.0);
        assert_eq!(assd(&sa, &sa).unwrap(), 0.0);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&v, 95.0).unwrap() - 95.05).abs() < 1e-12);
        assert_eq!(percentile(&[3.0; 7], 95.0).unwrap(), 3.0);
    }

    #[test]
    fn aggregate_mean_sd() {
        let r = |d| MetricReport { dsc: d, assd: Some(1.0), hd95: Some(2.0) };
        let a = aggregate(&[r(0.9), r(1.0)]).unwrap();
        assert!((a.dsc.mean - 0.95).abs() < 1e-12);
        assert!((a.dsc.sd - 0.05).abs() < 1e-12);
        let one = aggregate(&[r(0.7)]).unwrap();
        assert_eq!((one.dsc.mean, one.dsc.sd), (0.7, 0.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn empty_prediction_is_undefined() {
        let t = LabelVolume::from_fn(g([4, 4, 4]), |[z, _, _]| z == 2);
        let r = evaluate_case(&LabelVolume::empty(t.geometry), &t).unwrap();
        assert_eq!(r, MetricReport { dsc: 0.0, assd: None, hd95: None });
        let csv = report_csv(&[("a".into(), r)]).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("a,0,undefined"));
        assert_eq!(csv.lines().count(), 4);
    }
}
