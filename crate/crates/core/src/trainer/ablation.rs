//! Fixed synthetic benchmark comparing network/loss variants over several seeds.

use super::{infer_prepared, train, Case, Dataset, TrainConfig};
use crate::error::Result;
use crate::losses::LossMode;
use crate::metrics::{aggregate, evaluate_case, Aggregate, MetricReport};
use crate::model::{Network, NetworkConfig};
use crate::preprocess::{clamp_and_window, PreprocessConfig};
use crate::volume::{generate_synthetic, SyntheticSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub csa: bool,
    pub loss_mode: LossMode,
}

impl Variant {
    pub fn new(name: &str, csa: bool, loss_mode: LossMode) -> Self {
        Variant {
            name: name.to_string(),
            csa,
            loss_mode,
        }
    }

    /// Plain U-net + Dice, U-net + combined loss, CSA + combined loss.
    pub fn standard() -> Vec<Variant> {
        vec![
            Variant::new("unet-dice", false, LossMode::DiceOnly),
            Variant::new("unet-combined", false, LossMode::Combined),
            Variant::new("csa-combined", true, LossMode::Combined),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub volume: SyntheticSpec,
    pub train_cases: usize,
    pub test_cases: usize,
    /// synthetic seeds are `data_seed + i` (train) and `data_seed + 10_000 + i` (test)
    pub data_seed: u64,
    pub run_seeds: Vec<u64>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            volume: SyntheticSpec::default(),
            train_cases: 20,
            test_cases: 5,
            data_seed: 1000,
            run_seeds: vec![1, 2, 3],
            network: NetworkConfig::default(),
            train: TrainConfig {
                max_epochs: 60,
                val_every: 0,
                patch_overlap: 16,
                ..TrainConfig::default()
            },
            variants: Variant::standard(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub cases: Vec<MetricReport>,
    pub summary: Aggregate,
    pub final_loss: f64,
}

fn cases(spec: &AblationSpec, n: usize, offset: u64) -> Result<Vec<Case>> {
    let window = PreprocessConfig::default();
    (0..n)
        .map(|i| {
            let seed = spec.data_seed + offset + i as u64;
            let (hu, label) = generate_synthetic(&SyntheticSpec { seed, ..spec.volume.clone() })?;
            Ok(Case {
                id: format!("synth-{seed}"),
                image: clamp_and_window(&hu, &window),
                label,
            })
        })
        .collect()
}

/// The benchmark's training and test cases.
pub fn benchmark_data(spec: &AblationSpec) -> Result<(Vec<Case>, Vec<Case>)> {
    Ok((cases(spec, spec.train_cases, 0)?, cases(spec, spec.test_cases, 10_000)?))
}

/// Train every variant under every seed and score it on the test cases.
/// `progress` sees each result as it completes.
pub fn run_ablation(spec: &AblationSpec, mut progress: impl FnMut(&RunResult)) -> Result<Vec<RunResult>> {
    let (train_set, test_set) = benchmark_data(spec)?;
    let dataset = Dataset {
        train: train_set,
        validation: Vec::new(),
    };
    let mut out = Vec::new();
    for v in &spec.variants {
        for &seed in &spec.run_seeds {
            let net_cfg = if v.csa { spec.network.clone() } else { spec.network.clone().plain() };
            let mut net = Network::new(net_cfg, seed)?;
            let cfg = TrainConfig {
                seed,
                loss_mode: v.loss_mode,
                ..spec.train.clone()
            };
            let record = train(&mut net, &dataset, &cfg)?;
            let cases = test_set
                .iter()
                .map(|c| evaluate_case(&infer_prepared(&net, &c.image, cfg.patch_size, cfg.patch_overlap)?, &c.label))
                .collect::<Result<Vec<_>>>()?;
            let r = RunResult {
                variant: v.name.clone(),
                seed,
                summary: aggregate(&cases)?,
                cases,
                final_loss: record.epoch_losses.last().copied().unwrap_or(f64::NAN),
            };
            progress(&r);
            out.push(r);
        }
    }
    Ok(out)
}

/// Mean over seeds of the per-run test means: (dsc, assd, hd95).
pub fn variant_means(results: &[RunResult], variant: &str) -> Option<(f64, f64, f64)> {
    let runs: Vec<&RunResult> = results.iter().filter(|r| r.variant == variant).collect();
    if runs.is_empty() {
        return None;
    }
    let n = runs.len() as f64;
    let mean = |f: &dyn Fn(&RunResult) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
    Some((
        mean(&|r| r.summary.dsc.mean),
        mean(&|r| r.summary.assd.map_or(f64::INFINITY, |m| m.mean)),
        mean(&|r| r.summary.hd95.map_or(f64::INFINITY, |m| m.mean)),
    ))
}
