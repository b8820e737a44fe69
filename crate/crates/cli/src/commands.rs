use crate::ConfigArgs;
use std::fmt;
use std::path::{Path, PathBuf};
use volseg::config::KeyValues;
use volseg::gradsuite::run_gradient_suite;
use volseg::losses::signed_distance;
use volseg::metrics::{evaluate_cases, report_csv};
use volseg::model::{load_checkpoint, Network, NetworkConfig};
use volseg::preprocess::{resample_labels, PreprocessConfig};
use volseg::trainer::{infer as run_inference, prepare_image, train as run_training, Case, Dataset, TrainConfig};
use volseg::volume::{
    generate_synthetic, read_intensity, read_labels, split_dataset, write_volume, AnyVolume, SyntheticSpec,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(volseg::Error),
    GradientCheck(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Lib(volseg::Error::Config(_)) => 1,
            CliError::Lib(e) if e.is_numeric() => 3,
            CliError::Lib(_) => 2,
            CliError::GradientCheck(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::GradientCheck(n) => write!(f, "{n} gradient check(s) exceeded tolerance"),
        }
    }
}

impl From<volseg::Error> for CliError {
    fn from(e: volseg::Error) -> Self {
        CliError::Lib(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Lib(volseg::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// The config file (if any) with `--set` overrides applied on top.
fn load_kv(args: &ConfigArgs) -> Result<KeyValues> {
    let mut kv = match &args.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn save(v: AnyVolume, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    Ok(write_volume(&v, path)?)
}

pub fn synth(args: &ConfigArgs, count: Option<usize>, out_dir: &Path) -> Result<()> {
    let mut kv = load_kv(args)?;
    let from_file: usize = kv.take_or("count", 1)?;
    let count = count.unwrap_or(from_file);
    let spec = SyntheticSpec::from_kv(&mut kv)?;
    kv.finish()?;
    create_dir(out_dir)?;
    let mut echo = KeyValues::default();
    spec.to_kv(&mut echo);
    let mut manifest = format!("SYNTH1\n{}count={count}\n", echo.to_text());
    for i in 0..count {
        let seed = spec.seed + i as u64;
        let (hu, label) = generate_synthetic(&SyntheticSpec { seed, ..spec.clone() })?;
        let id = format!("case{seed:04}");
        let (img, lab) = (format!("{id}_image.vol"), format!("{id}_label.vol"));
        write_volume(&AnyVolume::Intensity(hu), out_dir.join(&img))?;
        write_volume(&AnyVolume::Label(label), out_dir.join(&lab))?;
        manifest.push_str(&format!("case.{id}=seed:{seed} image:{img} label:{lab}\n"));
        log::info!("wrote {id} (seed {seed})");
    }
    write_text(&out_dir.join("manifest.txt"), &manifest)
}

pub fn preprocess(args: &ConfigArgs, image: &Path, out_image: &Path, label: Option<(&Path, &Path)>) -> Result<()> {
    let mut kv = load_kv(args)?;
    let pre = PreprocessConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let hu = read_intensity(image)?;
    save(AnyVolume::Intensity(prepare_image(&hu, &pre)?), out_image)?;
    if let Some((input, out)) = label {
        let l = read_labels(input)?;
        save(AnyVolume::Label(resample_labels(&l, pre.target_spacing)?), out)?;
    }
    Ok(())
}

pub fn sdt(mask: &Path, out: &Path) -> Result<()> {
    let m = read_labels(mask)?;
    let sdf = signed_distance(&m)?;
    save(AnyVolume::Intensity(sdf.to_volume()), out)
}

/// `<id>_image.vol` / `<id>_label.vol` pairs in `dir`, sorted by id.
fn list_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let name = e.map_err(|e| io_err(dir, e))?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_image.vol") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(volseg::Error::Empty(format!("no *_image.vol files in {}", dir.display())).into());
    }
    ids.into_iter()
        .map(|id| {
            let label = dir.join(format!("{id}_label.vol"));
            if !label.exists() {
                return Err(volseg::Error::Empty(format!("{} is missing", label.display())).into());
            }
            Ok((id.clone(), dir.join(format!("{id}_image.vol")), label))
        })
        .collect()
}

pub fn train(
    args: &ConfigArgs,
    data_dir: &Path,
    out_dir: &Path,
    loss_mode: Option<String>,
    seed: Option<u64>,
    epochs: Option<usize>,
    no_csa: bool,
) -> Result<()> {
    let mut kv = load_kv(args)?;
    if let Some(m) = loss_mode {
        kv.set("loss_mode", m);
    }
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    if let Some(e) = epochs {
        kv.set("max_epochs", e);
    }
    if no_csa {
        kv.set("csa_levels", "none");
    }
    // window and spacing are read from a copy because the patch keys are shared with training
    let mut pre_kv = KeyValues::default();
    for k in ["hu_min", "hu_max", "target_spacing"] {
        if let Some(v) = kv.take::<String>(k)? {
            pre_kv.set(k, v);
        }
    }
    let pre = PreprocessConfig::from_kv(&mut pre_kv)?;
    let train_ratio: f64 = kv.take_or("train_ratio", 0.8)?;
    let net_cfg = NetworkConfig::from_kv(&mut kv)?;
    let mut cfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    if !(train_ratio > 0.0 && train_ratio <= 1.0) {
        return Err(volseg::Error::Config(format!("train_ratio {train_ratio} outside (0, 1]")).into());
    }
    cfg.checkpoint_dir = Some(out_dir.to_path_buf());

    let pairs = list_pairs(data_dir)?;
    let ids: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
    let (train_ids, val_ids) = if train_ratio >= 1.0 || ids.len() == 1 {
        (ids.clone(), Vec::new())
    } else {
        split_dataset(&ids, train_ratio, cfg.seed)?
    };
    let mut dataset = Dataset::default();
    for (id, img, lab) in &pairs {
        let case = Case {
            id: id.clone(),
            image: prepare_image(&read_intensity(img)?, &pre)?,
            label: resample_labels(&read_labels(lab)?, pre.target_spacing)?,
        };
        if val_ids.contains(id) {
            dataset.validation.push(case);
        } else {
            dataset.train.push(case);
        }
    }
    create_dir(out_dir)?;
    write_text(
        &out_dir.join("split.txt"),
        &format!("train={}\nvalidation={}\n", train_ids.join(","), val_ids.join(",")),
    )?;
    let mut net = Network::new(net_cfg, cfg.seed)?;
    let record = run_training(&mut net, &dataset, &cfg)?;
    if let Some(v) = record.validation.last() {
        write_text(&out_dir.join("validation.csv"), &report_csv(&v.cases)?)?;
    }
    log::info!(
        "finished {} epochs, final loss {:.6}",
        record.epoch_losses.len(),
        record.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn infer(args: &ConfigArgs, checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let user = load_kv(args)?;
    let (net, meta) = load_checkpoint(checkpoint)?;
    let mut kv = KeyValues::default();
    for k in ["patch_size", "patch_overlap"] {
        if let Some(v) = meta.get(k) {
            kv.set(k, v);
        }
    }
    kv.merge(user);
    let pre = PreprocessConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let hu = read_intensity(input)?;
    let labels = run_inference(&net, &hu, &pre)?;
    save(AnyVolume::Label(labels), out)
}

pub fn evaluate(pred_dir: &Path, truth_dir: &Path, out: Option<&Path>) -> Result<()> {
    let entries = std::fs::read_dir(truth_dir).map_err(|e| io_err(truth_dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let name = e.map_err(|e| io_err(truth_dir, e))?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".vol") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(volseg::Error::Empty(format!("no .vol files in {}", truth_dir.display())).into());
    }
    let mut pairs = Vec::with_capacity(names.len());
    for n in &names {
        pairs.push((read_labels(pred_dir.join(n))?, read_labels(truth_dir.join(n))?));
    }
    let reports = evaluate_cases(&pairs)?;
    let cases: Vec<(String, _)> = names
        .iter()
        .map(|n| {
            let stem = n.trim_end_matches(".vol");
            stem.strip_suffix("_label").unwrap_or(stem).to_string()
        })
        .zip(reports)
        .collect();
    let csv = report_csv(&cases)?;
    match out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn gradcheck(seed: u64) -> Result<()> {
    let entries = run_gradient_suite(seed)?;
    println!("{:<32} {:>12} {:>10}  status", "op", "max_rel_err", "tolerance");
    let mut failed = 0;
    for e in &entries {
        let ok = e.passed();
        failed += usize::from(!ok);
        println!(
            "{:<32} {:>12.3e} {:>10.0e}  {}",
            e.name,
            e.report.max_rel_error,
            e.tolerance,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(CliError::GradientCheck(failed));
    }
    Ok(())
}
