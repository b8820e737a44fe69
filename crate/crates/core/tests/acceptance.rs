//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the summary lines are printed even
//! when every criterion passes. Set `VOLSEG_ACCEPTANCE=2,3,5` to run a subset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::process::ExitCode;
use std::time::{Duration, Instant};
use volseg::gradsuite::run_gradient_suite;
use volseg::losses::{signed_distance, surface_loss, LossConfig, LossMode, SurfaceReduction};
use volseg::metrics::evaluate_case;
use volseg::model::{read_checkpoint, write_checkpoint, Network, NetworkConfig};
use volseg::preprocess::clamp_and_window;
use volseg::tensor::{Tape, Tensor};
use volseg::trainer::{infer_prepared, run_ablation, train, variant_means, AblationSpec, Case, Dataset, TrainConfig};
use volseg::volume::{decode_volume, encode_volume, generate_synthetic, AnyVolume, Geometry, LabelVolume, SyntheticSpec, Volume};

type Criterion = (usize, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed <= limit
}

fn random_mask(rng: &mut ChaCha8Rng, extents: [usize; 3], spacing: [f64; 3]) -> LabelVolume {
    let g = Geometry::new(extents, spacing).unwrap();
    let density = rng.gen_range(0.05..0.95);
    loop {
        let labels: Vec<u8> = (0..g.len()).map(|_| rng.gen_bool(density) as u8).collect();
        let m = LabelVolume::new(g, labels).unwrap();
        if m.is_mixed() {
            return m;
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn sdt_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let extents = if case == 0 { [16; 3] } else { std::array::from_fn(|_| rng.gen_range(2..=16)) };
        let spacing = if case % 2 == 0 { [1.0; 3] } else { std::array::from_fn(|_| rng.gen_range(0.3..2.5)) };
        let m = random_mask(&mut rng, extents, spacing);
        let g = m.geometry;
        let phi = signed_distance(&m).unwrap().phi;
        let pos: Vec<[f64; 3]> = (0..g.len()).map(|i| g.position_mm(i)).collect();
        for i in 0..g.len() {
            let fg = m.is_fg(i);
            let d = (0..g.len()).filter(|&j| m.is_fg(j) != fg).map(|j| dist(pos[i], pos[j])).fold(f64::INFINITY, f64::min);
            let want = if fg { -d } else { d };
            worst = worst.max((phi[i] as f64 - want).abs());
        }
    }
    let t = start.elapsed();
    outcome(worst <= 1e-5 && within(t, Duration::from_secs(60)), format!("max |error| {worst:.2e} mm over 100 masks, {t:.1?}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let entries = run_gradient_suite(7).unwrap();
    let failed: Vec<String> = entries.iter().filter(|e| !e.passed()).map(|e| format!("{} {:.2e}", e.name, e.report.max_rel_error)).collect();
    let t = start.elapsed();
    let pass = failed.is_empty() && within(t, Duration::from_secs(300));
    outcome(pass, format!("{} checks, failures [{}], {t:.1?}", entries.len(), failed.join(", ")))
}

fn surface_points(m: &LabelVolume) -> Vec<[f64; 3]> {
    let g = m.geometry;
    let e = g.extents.map(|v| v as i64);
    let fg = |z: i64, y: i64, x: i64| {
        z >= 0 && y >= 0 && x >= 0 && z < e[0] && y < e[1] && x < e[2] && m.is_fg(g.index(z as usize, y as usize, x as usize))
    };
    (0..g.len())
        .filter(|&i| {
            let [z, y, x] = g.coords(i).map(|v| v as i64);
            fg(z, y, x) && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)].iter().any(|&(a, b, c)| !fg(z + a, y + b, x + c))
        })
        .map(|i| g.position_mm(i))
        .collect()
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut dsc_exact) = (0.0f64, true);
    for case in 0..50 {
        let spacing = if case % 2 == 0 { [1.0; 3] } else { [0.7, 1.1, 1.9] };
        let p = random_mask(&mut rng, [12; 3], spacing);
        let t = random_mask(&mut rng, [12; 3], spacing);
        let inter = p.labels().iter().zip(t.labels()).filter(|(a, b)| **a == 1 && **b == 1).count();
        let dsc = 2.0 * inter as f64 / (p.foreground_count() + t.foreground_count()) as f64;
        let (sp, st) = (surface_points(&p), surface_points(&t));
        let nearest = |a: &[[f64; 3]], b: &[[f64; 3]]| -> Vec<f64> {
            a.iter().map(|&x| b.iter().map(|&y| dist(x, y)).fold(f64::INFINITY, f64::min)).collect()
        };
        let mut d = nearest(&sp, &st);
        d.extend(nearest(&st, &sp));
        let assd = d.iter().sum::<f64>() / d.len() as f64;
        d.sort_by(f64::total_cmp);
        let h = 0.95 * (d.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hd95 = d[lo] + (h - lo as f64) * (d[(lo + 1).min(d.len() - 1)] - d[lo]);
        let r = evaluate_case(&p, &t).unwrap();
        dsc_exact &= r.dsc == dsc;
        worst = worst.max((r.assd.unwrap() - assd).abs()).max((r.hd95.unwrap() - hd95).abs());
    }
    let t = start.elapsed();
    outcome(
        dsc_exact && worst <= 1e-6 && within(t, Duration::from_secs(60)),
        format!("dsc exact: {dsc_exact}, max distance error {worst:.2e} mm over 50 pairs, {t:.1?}"),
    )
}

fn shape_and_placement() -> Outcome {
    let cfg = NetworkConfig::default();
    let net = Network::new(cfg.clone(), 1).unwrap();
    let x = Tensor::randn(&[1, 1, 32, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let p = net.predict(&x).unwrap();
    let vol = 32 * 32 * 32;
    let worst_sum = (0..vol).map(|q| (p.data()[q] + p.data()[vol + q] - 1.0).abs()).fold(0.0f32, f32::max);
    let shape_ok = p.shape() == [1, 2, 32, 32, 32] && worst_sum <= 1e-5;

    let levels: Vec<usize> = (1..4).filter(|&l| cfg.has_csa(l)).collect();
    let gated: std::collections::BTreeSet<String> =
        net.param_names().iter().filter(|n| n.starts_with("csa")).map(|n| n[..4].to_string()).collect();
    // each gate changes the output when perturbed; a plain network with shared weights differs
    let live = [2, 3].iter().all(|l| {
        let mut poked = net.clone();
        let i = poked.param_names().iter().position(|n| *n == format!("csa{l}.squeeze_2.bias")).unwrap();
        poked.params_mut()[i].data_mut()[0] = -3.0;
        poked.predict(&x).unwrap().max_abs_diff(&p) > 1e-5
    });
    let mut plain = Network::new(cfg.clone().plain(), 1).unwrap();
    for i in 0..plain.params().len() {
        let j = net.param_names().iter().position(|n| *n == plain.param_names()[i]).unwrap();
        plain.params_mut()[i] = net.params()[j].clone();
    }
    let ablation = plain.predict(&x).unwrap().max_abs_diff(&p);
    let placement_ok = levels == [2, 3] && gated.iter().map(String::as_str).eq(["csa2", "csa3"]) && live && ablation > 1e-5;
    outcome(
        shape_ok && placement_ok,
        format!("output {:?}, max |Σp − 1| {worst_sum:.1e}, CSA levels {levels:?}, ablation Δ {ablation:.3e}", p.shape()),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec { seed: 1, extents: [32; 3], ..Default::default() };
    let (hu, label) = generate_synthetic(&spec).unwrap();
    let case = Case { id: "overfit".into(), image: clamp_and_window(&hu, &Default::default()), label };
    let data = Dataset { train: vec![case.clone()], validation: vec![] };
    let mut parts = Vec::new();
    let mut pass = true;
    for mode in LossMode::ALL {
        let cfg = TrainConfig { max_epochs: 150, batch_size: 1, patch_size: 32, loss_mode: mode, seed: 1, val_every: 0, ..Default::default() };
        let mut net = Network::new(NetworkConfig::default(), 1).unwrap();
        let record = train(&mut net, &data, &cfg).unwrap();
        let pred = infer_prepared(&net, &case.image, 32, 0).unwrap();
        let dsc = evaluate_case(&pred, &case.label).unwrap().dsc;
        let l = &record.epoch_losses;
        let decreased = l[99] < l[0];
        pass &= dsc > 0.95 && decreased;
        parts.push(format!("{mode} dsc {dsc:.4} loss {:.3}→{:.3}", l[0], l[l.len() - 1]));
    }
    let t = start.elapsed();
    pass &= within(t, Duration::from_secs(20 * 60));
    outcome(pass, format!("{}; {t:.0?}", parts.join(", ")))
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let spec = AblationSpec::default();
    let results = run_ablation(&spec, |r| {
        eprintln!(
            "  ablation {} seed {}: dsc {:.4} assd {:?} hd95 {:?}",
            r.variant,
            r.seed,
            r.summary.dsc.mean,
            r.summary.assd.map(|m| m.mean),
            r.summary.hd95.map(|m| m.mean)
        )
    })
    .unwrap();
    let t = start.elapsed();
    let get = |v: &str| variant_means(&results, v).unwrap();
    let (dice, unet_comb, ours) = (get("unet-dice"), get("unet-combined"), get("csa-combined"));
    let pass = ours.1 <= dice.1
        && ours.2 <= dice.2
        && unet_comb.1 <= dice.1
        && unet_comb.2 <= dice.2
        && ours.0 >= dice.0 - 0.02
        && unet_comb.0 >= dice.0 - 0.02
        && within(t, Duration::from_secs(4 * 3600));
    let fmt = |n: &str, m: (f64, f64, f64)| format!("{n} dsc {:.4} assd {:.3} hd95 {:.3}", m.0, m.1, m.2);
    outcome(pass, format!("{}; {}; {}; {t:.0?}", fmt("unet-dice", dice), fmt("unet-combined", unet_comb), fmt("csa-combined", ours)))
}

fn surface_loss_properties() -> Outcome {
    let eval = |p: &Tensor, sdf: &volseg::losses::SignedDistanceField, cfg: &LossConfig| {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone(), false);
        let y = surface_loss(&mut tape, x, std::slice::from_ref(sdf), cfg).unwrap();
        tape.value(y).item() as f64
    };
    let probs = |s: &[f32]| {
        let mut d: Vec<f32> = s.iter().map(|v| 1.0 - v).collect();
        d.extend_from_slice(s);
        Tensor::new(vec![1, 2, 1, 1, s.len()], d).unwrap()
    };
    let g = Geometry::new([1, 1, 3], [1.0; 3]).unwrap();
    let sdf = signed_distance(&LabelVolume::new(g, vec![0, 1, 0]).unwrap()).unwrap();
    let raw = LossConfig { surface_reduction: SurfaceReduction::Sum, ..Default::default() };
    let (a, b) = (eval(&probs(&[0.0, 1.0, 0.0]), &sdf, &raw), eval(&probs(&[0.5; 3]), &sdf, &raw));
    let fixture = a == -1.0 && b == 0.5;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut linear_err, mut monotone) = (0.0f64, true);
    for _ in 0..50 {
        let m = random_mask(&mut rng, [1, 1, 64], [1.0, 1.0, 0.7]);
        let sdf = signed_distance(&m).unwrap();
        let cfg = LossConfig::default();
        let s1: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let s2: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let alpha: f32 = rng.gen();
        let mix: Vec<f32> = s1.iter().zip(&s2).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
        let lhs = eval(&probs(&mix), &sdf, &cfg);
        let rhs = alpha as f64 * eval(&probs(&s1), &sdf, &cfg) + (1.0 - alpha as f64) * eval(&probs(&s2), &sdf, &cfg);
        linear_err = linear_err.max((lhs - rhs).abs());
        let q = rng.gen_range(0..64);
        let mut s = s1.iter().map(|v| 0.25 + 0.5 * v).collect::<Vec<f32>>();
        let before = eval(&probs(&s), &sdf, &cfg);
        s[q] += if sdf.phi[q] < 0.0 { 0.2 } else { -0.2 };
        monotone &= eval(&probs(&s), &sdf, &cfg) < before;
    }
    outcome(
        fixture && linear_err <= 1e-5 && monotone,
        format!("fixture ({a}, {b}), linearity error {linear_err:.1e}, monotone: {monotone}"),
    )
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = Geometry::new([8, 8, 8], [0.8, 0.8, 0.8]).unwrap();
    let v = AnyVolume::Intensity(Volume::new(g, (0..512).map(|_| rng.gen_range(-1e3..1e3)).collect()).unwrap());
    let l = AnyVolume::Label(random_mask(&mut rng, [8; 3], [0.8, 0.9, 1.0]));
    let vol_ok = [v, l].iter().all(|x| {
        let bytes = encode_volume(x);
        let back = decode_volume(&mut bytes.as_slice()).unwrap();
        encode_volume(&back) == bytes && back == *x
    });

    let net = Network::new(NetworkConfig { base_width: 4, ..Default::default() }, 3).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&net, &Default::default(), &mut buf).unwrap();
    let (back, _) = read_checkpoint(&mut buf.as_slice()).unwrap();
    let bits = |n: &Network| n.params().iter().chain(n.buffers()).flat_map(|t| t.data().iter().map(|f| f.to_bits())).collect::<Vec<_>>();
    let ckpt_ok = bits(&back) == bits(&net) && back.param_names() == net.param_names();

    let spec = SyntheticSpec { seed: 3, extents: [24; 3], radius_mm: (3.0, 6.0), ..Default::default() };
    let (hu, label) = generate_synthetic(&spec).unwrap();
    let data = Dataset { train: vec![Case { id: "a".into(), image: clamp_and_window(&hu, &Default::default()), label }], validation: vec![] };
    let cfg = TrainConfig { max_epochs: 3, patch_size: 16, batch_size: 1, seed: 4, ..Default::default() };
    let run = || {
        let mut n = Network::new(NetworkConfig { base_width: 2, ..Default::default() }, 4).unwrap();
        train(&mut n, &data, &cfg).unwrap().loss_csv()
    };
    let trace_ok = run() == run();
    outcome(vol_ok && ckpt_ok && trace_ok, format!("VOL1 bit-exact: {vol_ok}, checkpoint bit-exact: {ckpt_ok}, same-seed loss trace identical: {trace_ok}"))
}

fn main() -> ExitCode {
    let wanted: Option<Vec<usize>> =
        std::env::var("VOLSEG_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [Criterion; 8] = [
        (2, "signed distance transform matches brute force", sdt_oracle),
        (3, "gradient suite", gradient_suite),
        (4, "metrics match brute force", metric_oracle),
        (5, "output shape and CSA placement", shape_and_placement),
        (6, "overfit sanity in every loss mode", overfit),
        (7, "directional ablation trend", ablation),
        (8, "surface-loss behaviour", surface_loss_properties),
        (9, "format round-trips and reproducible traces", round_trips),
    ];
    println!("criterion 1: SUBSTITUTED clinical-scale reproduction is out of reach on a desk; criteria 2-8 stand in");
    let mut failed = 0;
    for (n, name, run) in criteria {
        if wanted.as_ref().is_some_and(|w| !w.contains(&n)) {
            println!("criterion {n}: SKIPPED {name}");
            continue;
        }
        let o = run();
        println!("criterion {n}: {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
