//! Network shapes, cross-scale attention behaviour and gradient flow.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volseg::losses::{combined_loss, signed_distance, LossConfig};
use volseg::model::{Mode, Network, NetworkConfig};
use volseg::tensor::{Tape, Tensor};
use volseg::volume::{Geometry, LabelVolume};
use volseg::Error;

fn net(base: usize, seed: u64) -> Network {
    Network::new(NetworkConfig { base_width: base, ..Default::default() }, seed).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn set_param(net: &mut Network, name: &str, value: f32) {
    let i = net.param_names().iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
    net.params_mut()[i].data_mut().fill(value);
}

#[test]
fn encoder_and_decoder_shapes() {
    let n = net(8, 1);
    let mut tape = Tape::new();
    let mut s = n.session(&mut tape, Mode::Eval);
    let x = s.tape.leaf(randn(&[1, 1, 16, 16, 16], 2), false);
    let (f, pooled) = s.encoder_block(x, 1).unwrap();
    assert_eq!(s.tape.value(f).shape(), &[1, 8, 16, 16, 16]);
    assert_eq!(s.tape.value(pooled.unwrap()).shape(), &[1, 8, 8, 8, 8]);

    let bottleneck = s.tape.leaf(randn(&[1, 64, 2, 2, 2], 3), false);
    let skip = s.tape.leaf(randn(&[1, 32, 4, 4, 4], 4), false);
    let d = s.decoder_block(bottleneck, skip, 3).unwrap();
    assert_eq!(s.tape.value(d).shape(), &[1, 32, 4, 4, 4]);
    let bad_skip = s.tape.leaf(randn(&[1, 32, 5, 4, 4], 4), false);
    assert!(s.decoder_block(bottleneck, bad_skip, 3).is_err());
}

#[test]
fn bottleneck_has_no_pooled_output() {
    let n = net(8, 1);
    let mut tape = Tape::new();
    let mut s = n.session(&mut tape, Mode::Eval);
    let x = s.tape.leaf(randn(&[1, 32, 2, 2, 2], 3), false);
    let (f, pooled) = s.encoder_block(x, 4).unwrap();
    assert_eq!(s.tape.value(f).shape(), &[1, 64, 2, 2, 2]);
    assert!(pooled.is_none());
}

#[test]
fn zero_input_gives_zero_features() {
    let n = net(8, 1);
    for mode in [Mode::Train, Mode::Eval] {
        let mut tape = Tape::new();
        let mut s = n.session(&mut tape, mode);
        let x = s.tape.leaf(Tensor::zeros(&[2, 1, 8, 8, 8]), false);
        let (f, _) = s.encoder_block(x, 1).unwrap();
        assert!(s.tape.value(f).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_yields_a_probability_simplex() {
    let n = net(8, 3);
    let p = n.predict(&randn(&[1, 1, 32, 32, 32], 5)).unwrap();
    assert_eq!(p.shape(), &[1, 2, 32, 32, 32]);
    let vol = 32 * 32 * 32;
    for q in 0..vol {
        let (a, b) = (p.data()[q], p.data()[vol + q]);
        assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        assert!((a + b - 1.0).abs() < 1e-5);
    }
    assert_eq!(n.predict(&randn(&[1, 1, 32, 32, 32], 5)).unwrap(), p, "eval forward is deterministic");
}

#[test]
fn extents_not_divisible_by_eight_are_rejected() {
    let n = net(2, 1);
    match n.predict(&Tensor::zeros(&[1, 1, 16, 12, 16])) {
        Err(Error::NotDivisible { axis: 3, extent: 12, divisor: 8 }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn construction_is_reproducible() {
    assert_eq!(net(8, 9).parameter_count(), net(8, 9).parameter_count());
    assert_eq!(net(8, 9).params(), net(8, 9).params());
}

#[test]
fn csa_gates_exist_only_at_levels_two_and_three() {
    let n = net(8, 1);
    let gated: std::collections::BTreeSet<&str> =
        n.param_names().iter().filter(|p| p.starts_with("csa")).map(|p| &p[..4]).collect();
    assert_eq!(gated.into_iter().collect::<Vec<_>>(), vec!["csa2", "csa3"]);
    let mut tape = Tape::new();
    let mut s = n.session(&mut tape, Mode::Eval);
    let f1 = s.tape.leaf(randn(&[1, 8, 16, 16, 16], 1), false);
    assert!(s.csa_attention_1(f1, f1, 1).is_err());
}

/// Level-2 inputs: F1 1×8×16³, Fl 1×16×8³, Fg 1×32×4³.
fn level2_inputs(s: &mut volseg::model::Session<'_>) -> [volseg::tensor::Var; 3] {
    [
        s.tape.leaf(randn(&[1, 8, 16, 16, 16], 11), false),
        s.tape.leaf(randn(&[1, 16, 8, 8, 8], 12), false),
        s.tape.leaf(randn(&[1, 32, 4, 4, 4], 13), false),
    ]
}

#[test]
fn attention_ranges_and_shapes() {
    let n = net(8, 4);
    let mut tape = Tape::new();
    let mut s = n.session(&mut tape, Mode::Eval);
    let [f1, fl, fg] = level2_inputs(&mut s);
    let (att1, fl_hat) = s.csa_attention_1(f1, fl, 2).unwrap();
    let (att2, out) = s.csa_attention_2(fl_hat, fg, 2).unwrap();
    let t = &*s.tape;
    assert_eq!(t.value(att1).shape(), &[1, 1, 8, 8, 8]);
    assert_eq!(t.value(fl_hat).shape(), t.value(fl).shape());
    assert_eq!(t.value(att2).shape(), &[1, 1, 4, 4, 4]);
    assert_eq!(t.value(out).shape(), t.value(fl).shape());
    for a in [att1, att2] {
        assert!(t.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    // gating is contractive voxel by voxel
    for ((&o, &h), &l) in t.value(out).data().iter().zip(t.value(fl_hat).data()).zip(t.value(fl).data()) {
        assert!(o.abs() <= h.abs() && h.abs() <= l.abs());
    }
}

#[test]
fn saturated_detail_gate_is_the_identity() {
    let mut n = net(8, 4);
    set_param(&mut n, "csa2.squeeze_1.weight", 0.0);
    set_param(&mut n, "csa2.squeeze_1.bias", 100.0);
    let mut tape = Tape::new();
    let mut s = n.session(&mut tape, Mode::Eval);
    let [f1, fl, _] = level2_inputs(&mut s);
    let (att1, fl_hat) = s.csa_attention_1(f1, fl, 2).unwrap();
    assert!(s.tape.value(att1).data().iter().all(|&v| v == 1.0));
    assert_eq!(s.tape.value(fl_hat), s.tape.value(fl));
}

#[test]
fn zeroed_semantic_gate_halves_the_features() {
    let mut n = net(8, 4);
    for p in ["conv_g", "conv_lhat", "squeeze_2"] {
        for t in ["weight", "bias"] {
            set_param(&mut n, &format!("csa2.{p}.{t}"), 0.0);
        }
    }
    let mut tape = Tape::new();
    let mut s = n.session(&mut tape, Mode::Eval);
    let [f1, fl, fg] = level2_inputs(&mut s);
    let (_, fl_hat) = s.csa_attention_1(f1, fl, 2).unwrap();
    let (att2, out) = s.csa_attention_2(fl_hat, fg, 2).unwrap();
    assert!(s.tape.value(att2).data().iter().all(|&v| v == 0.5));
    let half = s.tape.value(fl_hat).map(|v| 0.5 * v);
    assert_eq!(s.tape.value(out), &half);
}

#[test]
fn misaligned_csa_inputs_are_errors() {
    let n = net(8, 4);
    let mut tape = Tape::new();
    let mut s = n.session(&mut tape, Mode::Eval);
    let [f1, fl, _] = level2_inputs(&mut s);
    let small_f1 = s.tape.leaf(randn(&[1, 8, 8, 8, 8], 1), false);
    assert!(s.csa_attention_1(small_f1, fl, 2).is_err());
    let (_, fl_hat) = s.csa_attention_1(f1, fl, 2).unwrap();
    let wrong_fg = s.tape.leaf(randn(&[1, 32, 8, 8, 8], 1), false);
    assert!(s.csa_attention_2(fl_hat, wrong_fg, 2).is_err());
}

#[test]
fn removing_csa_changes_the_output() {
    let with = net(4, 6);
    let mut without = Network::new(NetworkConfig { base_width: 4, ..Default::default() }.plain(), 6).unwrap();
    // share every parameter the two networks have in common
    let names = without.param_names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let j = with.param_names().iter().position(|n| n == name).unwrap();
        without.params_mut()[i] = with.params()[j].clone();
    }
    let x = randn(&[1, 1, 16, 16, 16], 7);
    let diff = with.predict(&x).unwrap().max_abs_diff(&without.predict(&x).unwrap());
    assert!(diff > 1e-4, "{diff}");

    // each gate is live on its own
    for level in [2, 3] {
        let mut poked = with.clone();
        set_param(&mut poked, &format!("csa{level}.squeeze_2.bias"), -3.0);
        assert!(poked.predict(&x).unwrap().max_abs_diff(&with.predict(&x).unwrap()) > 1e-5, "level {level}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let n = net(4, 8);
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[2, 1, 16, 16, 16], 9), false);
    let f = n.forward(&mut tape, x, Mode::Train).unwrap();
    let g = Geometry::new([16; 3], [1.0; 3]).unwrap();
    let targets: Vec<LabelVolume> = (0..2)
        .map(|k| LabelVolume::from_fn(g, move |[z, y, x]| (z + k) * (z + k) + y * y + x * x < 90))
        .collect();
    let sdfs: Vec<_> = targets.iter().map(|t| signed_distance(t).unwrap()).collect();
    let loss = combined_loss(&mut tape, f.probs, &targets, &sdfs, &LossConfig::default()).unwrap();
    tape.backward(loss).unwrap();
    for (name, v) in n.param_names().iter().zip(&f.params) {
        let gr = tape.grad(*v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(gr.data().iter().any(|&v| v != 0.0), "{name} gradient is identically zero");
        assert!(gr.all_finite(), "{name}");
    }
}
