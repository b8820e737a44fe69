//! Finite-difference gradient checks over every differentiable op, the
//! losses, one CSA gate and a whole small network.

use crate::error::Result;
use crate::losses::{
    combined_loss, dice_loss, signed_distance, surface_loss, LossConfig, SignedDistanceField, SurfaceReduction,
};
use crate::model::{Mode, Network, NetworkConfig};
use crate::tensor::{grad_check, BnMode, ConvSpec, GradCheckReport, Tape, Tensor, Var, FD_STEP};
use crate::volume::{Geometry, LabelVolume};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-2;
pub const NETWORK_TOLERANCE: f64 = 5e-2;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

struct Suite {
    rng: ChaCha8Rng,
    entries: Vec<SuiteEntry>,
}

impl Suite {
    fn check(
        &mut self,
        name: &str,
        tolerance: f64,
        point: &Tensor,
        coords: Option<&[usize]>,
        f: impl Fn(&mut Tape, Var) -> Result<Var>,
    ) -> Result<()> {
        let report = grad_check(f, point, coords, FD_STEP)?;
        log::debug!("{name}: {report:?}");
        self.entries.push(SuiteEntry {
            name: name.to_string(),
            tolerance,
            report,
        });
        Ok(())
    }

    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }

    /// Projection weights scaled so `⟨y, r⟩` stays O(1) and f32 rounding of
    /// the scalar does not swamp the finite differences.
    fn projection(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let k = 1.0 / (n as f32).sqrt();
        self.randn(shape).map(|v| v * k)
    }

    /// Normal values pushed away from zero so ReLU kinks stay out of reach.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor {
        self.randn(shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
    }

    /// Distinct values in random order, so max pooling has no near-ties.
    fn distinct(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.05).collect();
        v.shuffle(&mut self.rng);
        Tensor::new(shape.to_vec(), v).expect("shape matches")
    }

    fn coords(&mut self, len: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..len).collect();
        all.shuffle(&mut self.rng);
        all.truncate(k);
        all
    }
}

/// `⟨y, r⟩` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    tape.weighted_sum(y, r)
}

fn random_mask(rng: &mut ChaCha8Rng, g: Geometry) -> LabelVolume {
    loop {
        let labels = (0..g.len()).map(|_| rng.gen_bool(0.4) as u8).collect();
        let m = LabelVolume::new(g, labels).expect("binary labels");
        if m.is_mixed() {
            return m;
        }
    }
}

/// Run every check; the caller decides what to do with failures.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        entries: Vec::new(),
    };

    // convolution
    let spec = ConvSpec::cubic(2, 3, 3, 2, 1);
    let (x, w, b) = (s.randn(&[2, 2, 5, 5, 5]), s.randn(&[3, 2, 3, 3, 3]), s.randn(&[3]));
    let r = s.projection(&[2, 3, 3, 3, 3]);
    {
        let (w, b, r) = (w.clone(), b.clone(), r.clone());
        s.check("conv3d/input", OP_TOLERANCE, &x, None, move |t, xv| {
            let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv3d(xv, wv, Some(bv), spec)?;
            project(t, y, &r)
        })?;
    }
    {
        let (x, b, r) = (x.clone(), b.clone(), r.clone());
        s.check("conv3d/weight", OP_TOLERANCE, &w, None, move |t, wv| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            let y = t.conv3d(xv, wv, Some(bv), spec)?;
            project(t, y, &r)
        })?;
    }

    let tspec = ConvSpec::cubic(3, 2, 3, 2, 1).with_output_padding(1);
    let (x, w) = (s.randn(&[2, 3, 3, 3, 3]), s.randn(&[3, 2, 3, 3, 3]));
    let r = s.projection(&[2, 2, 6, 6, 6]);
    {
        let (w, r) = (w.clone(), r.clone());
        s.check("conv_transpose3d/input", OP_TOLERANCE, &x, None, move |t, xv| {
            let wv = t.constant(w.clone());
            let y = t.conv_transpose3d(xv, wv, None, tspec)?;
            project(t, y, &r)
        })?;
    }
    {
        let (x, r) = (x.clone(), r.clone());
        s.check("conv_transpose3d/weight", OP_TOLERANCE, &w, None, move |t, wv| {
            let xv = t.constant(x.clone());
            let y = t.conv_transpose3d(xv, wv, None, tspec)?;
            project(t, y, &r)
        })?;
    }

    let x = s.distinct(&[2, 2, 4, 4, 4]);
    let r = s.projection(&[2, 2, 2, 2, 2]);
    s.check("max_pool3d", OP_TOLERANCE, &x, None, move |t, xv| {
        let y = t.max_pool3d(xv, 2)?;
        project(t, y, &r)
    })?;

    let x = s.randn(&[2, 3, 3, 3, 3]);
    let (g, be) = (s.randn(&[3]), s.randn(&[3]));
    let r = s.projection(&[2, 3, 3, 3, 3]);
    s.check("batch_norm", OP_TOLERANCE, &x, None, move |t, xv| {
        let (gv, bv) = (t.constant(g.clone()), t.constant(be.clone()));
        let (y, _) = t.batch_norm(xv, gv, bv, BnMode::Train { eps: 1e-5 })?;
        project(t, y, &r)
    })?;

    let x = s.away_from_zero(&[1, 2, 3, 3, 3]);
    let r = s.projection(&[1, 2, 3, 3, 3]);
    {
        let r = r.clone();
        s.check("relu", OP_TOLERANCE, &x, None, move |t, xv| {
            let y = t.relu(xv);
            project(t, y, &r)
        })?;
    }
    {
        let r = r.clone();
        s.check("sigmoid", OP_TOLERANCE, &x, None, move |t, xv| {
            let y = t.sigmoid(xv);
            project(t, y, &r)
        })?;
    }
    s.check("softmax_channel", OP_TOLERANCE, &x, None, move |t, xv| {
        let y = t.softmax_channel(xv)?;
        project(t, y, &r)
    })?;

    let x = s.randn(&[1, 2, 2, 3, 2]);
    let r = s.projection(&[1, 2, 4, 6, 4]);
    s.check("upsample_trilinear", OP_TOLERANCE, &x, None, move |t, xv| {
        let y = t.upsample_trilinear(xv, 2)?;
        project(t, y, &r)
    })?;

    // losses, differentiated through a softmax on the logits
    let g = Geometry::new([4, 4, 4], [1.0, 1.0, 2.0])?;
    let masks: Vec<LabelVolume> = (0..2).map(|_| random_mask(&mut s.rng, g)).collect();
    let sdfs = masks.iter().map(signed_distance).collect::<Result<Vec<_>>>()?;
    let logits = s.randn(&[2, 2, 4, 4, 4]);
    for reduction in [SurfaceReduction::Sum, SurfaceReduction::Mean] {
        let cfg = LossConfig {
            surface_reduction: reduction,
            ..Default::default()
        };
        let sd = sdfs.clone();
        s.check(&format!("surface_loss/{reduction}"), LOSS_TOLERANCE, &logits, None, move |t, x| {
            let p = t.softmax_channel(x)?;
            surface_loss(t, p, &sd, &cfg)
        })?;
    }
    {
        let m = masks.clone();
        s.check("dice_loss", LOSS_TOLERANCE, &logits, None, move |t, x| {
            let p = t.softmax_channel(x)?;
            dice_loss(t, p, &m, &LossConfig::default())
        })?;
    }
    {
        let (m, sd) = (masks.clone(), sdfs.clone());
        s.check("combined_loss", LOSS_TOLERANCE, &logits, None, move |t, x| {
            let p = t.softmax_channel(x)?;
            combined_loss(t, p, &m, &sd, &LossConfig::default())
        })?;
    }

    // one CSA gate (level 2) on its own
    let csa_net = Network::new(
        NetworkConfig {
            base_width: 4,
            csa_levels: vec![2],
            ..Default::default()
        },
        seed,
    )?;
    let f1 = s.randn(&[1, 4, 8, 8, 8]);
    let fl = s.randn(&[1, 8, 4, 4, 4]);
    let fg = s.randn(&[1, 16, 2, 2, 2]);
    let r = s.projection(&[1, 8, 4, 4, 4]);
    let csa_fn = |net: Network, f1: Tensor, fl: Tensor, fg: Tensor, r: Tensor, which: Option<usize>| {
        move |t: &mut Tape, v: Var| -> Result<Var> {
            let vars: Vec<Var> = net
                .params()
                .iter()
                .enumerate()
                .map(|(i, p)| if Some(i) == which { v } else { t.constant(p.clone()) })
                .collect();
            let fl_v = if which.is_none() { v } else { t.constant(fl.clone()) };
            let (f1_v, fg_v) = (t.constant(f1.clone()), t.constant(fg.clone()));
            let mut sess = net.session_with(t, Mode::Train, vars)?;
            let (_, fl_hat) = sess.csa_attention_1(f1_v, fl_v, 2)?;
            let (_, out) = sess.csa_attention_2(fl_hat, fg_v, 2)?;
            project(sess.tape, out, &r)
        }
    };
    let f = csa_fn(csa_net.clone(), f1.clone(), fl.clone(), fg.clone(), r.clone(), None);
    s.check("csa/features", OP_TOLERANCE, &fl, None, f)?;
    for pname in ["csa2.conv_1.weight", "csa2.squeeze_1.weight", "csa2.conv_g.weight", "csa2.conv_lhat.weight"] {
        let i = csa_net.param_names().iter().position(|n| n == pname).expect("parameter exists");
        let point = csa_net.params()[i].clone();
        let f = csa_fn(csa_net.clone(), f1.clone(), fl.clone(), fg.clone(), r.clone(), Some(i));
        s.check(&format!("csa/{pname}"), OP_TOLERANCE, &point, None, f)?;
    }

    // full network on 8³ with the combined loss
    let net = Network::new(
        NetworkConfig {
            base_width: 2,
            ..Default::default()
        },
        seed,
    )?;
    let g8 = Geometry::new([8, 8, 8], [1.0; 3])?;
    let masks: Vec<LabelVolume> = (0..2).map(|_| random_mask(&mut s.rng, g8)).collect();
    let sdfs = masks.iter().map(signed_distance).collect::<Result<Vec<_>>>()?;
    let x = s.randn(&[2, 1, 8, 8, 8]);
    let net_fn = |net: Network, x: Tensor, which: Option<usize>, masks: Vec<LabelVolume>, sdfs: Vec<SignedDistanceField>| {
        move |t: &mut Tape, v: Var| -> Result<Var> {
            let vars: Vec<Var> = net
                .params()
                .iter()
                .enumerate()
                .map(|(i, p)| if Some(i) == which { v } else { t.constant(p.clone()) })
                .collect();
            let xv = if which.is_none() { v } else { t.constant(x.clone()) };
            let mut sess = net.session_with(t, Mode::Train, vars)?;
            let probs = sess.forward(xv)?;
            combined_loss(sess.tape, probs, &masks, &sdfs, &LossConfig::default())
        }
    };
    let coords = s.coords(x.len(), 10);
    let f = net_fn(net.clone(), x.clone(), None, masks.clone(), sdfs.clone());
    s.check("network/input", NETWORK_TOLERANCE, &x, Some(&coords), f)?;
    for pname in ["enc1.0.conv.weight", "csa3.conv_l.weight", "csa2.squeeze_2.weight", "dec1.up.weight", "head.weight"] {
        let i = net.param_names().iter().position(|n| n == pname).expect("parameter exists");
        let point = net.params()[i].clone();
        let coords = s.coords(point.len(), 10);
        let f = net_fn(net.clone(), x.clone(), Some(i), masks.clone(), sdfs.clone());
        s.check(&format!("network/{pname}"), NETWORK_TOLERANCE, &point, Some(&coords), f)?;
    }
    Ok(s.entries)
}
