//! One function per subcommand. Each registers every file it writes with
//! the run's output tracker and returns what the manifest needs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use tempro_core::attribution::{
    frame_influence, integrated_gradients, spatial_concentration, write_influence_csv,
    AttributionConfig,
};
use tempro_core::container::{
    read_manifest, read_sequence, read_sequence_at, write_dataset, write_manifest, write_sequence,
    Manifest, ManifestEntry, CONTAINER_VERSION, MANIFEST_FILE,
};
use tempro_core::metrics::{evaluate, pd_fa, roc_auc, write_roc_csv};
use tempro_core::network::{
    load_checkpoint, save_checkpoint, symmetry_score, write_matrix_csv, Mode, Model, ModelSpec,
    Variant,
};
use tempro_core::profile::{
    correlation, extract_profile, mix_and_analyze, smooth, write_correlation_csv,
    write_profile_csv, TemporalProfile,
};
use tempro_core::simulator::{generate_dataset, track_mask, DatasetSpec, Sequence, Split};
use tempro_core::training::{detect_sequence, train as fit, write_loss_csv, TrainConfig};
use tempro_core::Tensor;

use crate::run::{CliError, CliResult, Finished, Run};

fn core<T>(r: tempro_core::Result<T>) -> CliResult<T> {
    r.map_err(CliError::from)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_split(s: &Option<String>) -> CliResult<Option<Split>> {
    match s.as_deref() {
        None | Some("all") => Ok(None),
        Some("train") => Ok(Some(Split::Train)),
        Some("test") => Ok(Some(Split::Test)),
        Some(o) => Err(CliError::Usage(format!(
            "unknown split {o:?} (train | test | all)"
        ))),
    }
}

/// Sequences named by a dataset directory, or the single sequence at `path`.
fn load_inputs(path: &Path, split: Option<Split>) -> CliResult<Vec<(Sequence, Split)>> {
    if path.is_dir() && path.join(MANIFEST_FILE).exists() {
        let m = core(read_manifest(path))?;
        return m
            .sequences
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| Ok((core(read_sequence(path, &e.name))?, e.split)))
            .collect();
    }
    Ok(vec![(core(read_sequence_at(path))?, Split::Test)])
}

pub fn model_info(spec: &ModelSpec, h: usize, w: usize) -> Value {
    let (scorm, other) = spec.analytic_params();
    let macs = spec.macs_per_frame(h, w);
    json!({
        "spec": spec,
        "params": scorm + other,
        "scorm_params": scorm,
        "other_params": other,
        "flops_frame": { "size": [h, w], "macs": macs, "mac_as_1": macs, "mac_as_2": 2.0 * macs },
    })
}

// ---------------------------------------------------------------- simulate

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    /// Dataset description (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn simulate(a: &SimulateArgs, run: &mut Run) -> CliResult<Finished> {
    let raw = fs::read(&a.config).map_err(|e| CliError::io(&a.config, e))?;
    let spec: DatasetSpec = serde_json::from_slice(&raw)
        .map_err(|e| CliError::Core(tempro_core::Error::InvalidSpec(e.to_string())))?;
    run.config["dataset"] = serde_json::to_value(&spec)?;
    let data = core(generate_dataset(&spec, a.seed))?;
    run.outputs.dir(&a.out)?;
    let written = write_dataset(&a.out, &data);
    // Register before propagating so that a partial dataset is removed.
    if let Ok(w) = &written {
        run.outputs.extend(w.iter().cloned());
    }
    core(written)?;
    Ok(Finished {
        manifest_path: Some(a.out.join("run_manifest.json")),
        seed: Some(a.seed),
        inputs: vec![a.config.clone()],
        model: None,
        stdout: Some(format!(
            "wrote {} sequences to {}",
            data.len(),
            a.out.display()
        )),
    })
}

// ------------------------------------------------------------------- train

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Dataset directory; its train split is used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "deeppro")]
    pub variant: String,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Square crop size.
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    /// Frames per clip.
    #[arg(long = "T", default_value_t = 40)]
    pub frames: usize,
    /// SCorMs per TPro (default 4 for DeepPro, 8 for DeepPro-Plus).
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Crops per training sequence and epoch.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Minimal fraction of target-bearing crops.
    #[arg(long, default_value_t = 0.75)]
    pub presence: f64,
    /// Width of the ring around each target left out of the loss (0 = off).
    #[arg(long, default_value_t = 0.0)]
    pub ignore_radius: f64,
    /// Loss curve CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

pub fn train(a: &TrainArgs, run: &mut Run) -> CliResult<Finished> {
    let variant: Variant = core(a.variant.parse())?;
    let spec = match variant {
        Variant::DeepPro => ModelSpec::deeppro(a.frames, a.m.unwrap_or(4), a.channels),
        Variant::DeepProPlus => ModelSpec::deeppro_plus(a.frames, a.m.unwrap_or(8), a.channels),
    };
    let data: Vec<Sequence> = load_inputs(&a.data, Some(Split::Train))?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    if data.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no train sequences",
            a.data.display()
        )));
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        crop: (a.crop, a.crop),
        presence: a.presence,
        repeats: a.repeats,
        seed: a.seed,
        ignore_radius: a.ignore_radius,
        ..TrainConfig::default()
    };
    run.config["train_config"] = json!({
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr, "lr_decay": cfg.lr_decay,
        "decay_every": cfg.decay_every, "crop": [cfg.crop.0, cfg.crop.1], "presence": cfg.presence,
        "repeats": cfg.repeats, "seed": cfg.seed, "ignore_radius": cfg.ignore_radius,
    });
    let mut model = core(Model::build(&spec, a.seed))?;
    let steps_per_epoch = (data.len() * cfg.repeats).div_ceil(cfg.batch_size);
    let report = core(fit(&mut model, &data, &cfg, |r| {
        if (r.step + 1) % steps_per_epoch == 0 {
            eprintln!(
                "epoch {:>3}  step {:>5}  loss {:.5}  lr {:.2e}",
                r.epoch, r.step, r.loss, r.lr
            );
        }
    }))?;
    let ckpt = run.outputs.file(&a.out)?;
    core(save_checkpoint(&model, &ckpt))?;
    let csv = a
        .loss_csv
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &report.records).map_err(|e| CliError::io(&csv, e))?;
    run.outputs.write(&csv, buf)?;
    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok(Finished {
        manifest_path: Some(with_suffix(&a.out, ".manifest.json")),
        seed: Some(a.seed),
        inputs: vec![a.data.clone()],
        model: Some(model_info(&spec, a.crop, a.crop)),
        stdout: Some(format!(
            "trained {} steps, final epoch loss {last:.5}",
            report.records.len()
        )),
    })
}

// ------------------------------------------------------------------ detect

#[derive(Args, Debug, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A sequence (`name.bin` / `name.json`) or a dataset directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Fractional overlap of consecutive windows.
    #[arg(long, default_value_t = 0.10)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Dataset split to process when `--input` is a directory.
    #[arg(long)]
    pub split: Option<String>,
    /// Output directory: one sequence per input, frames are confidences and
    /// the mask is the thresholded detection.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn detect(a: &DetectArgs, run: &mut Run) -> CliResult<Finished> {
    let model = core(load_checkpoint(&a.model))?;
    let inputs = load_inputs(&a.input, parse_split(&a.split)?)?;
    run.outputs.dir(&a.out)?;
    let mut entries = Vec::new();
    let mut summary = String::new();
    let mut dims = (0, 0);
    for (seq, split) in &inputs {
        let d = core(detect_sequence(&model, &seq.frames, a.overlap, a.threshold))?;
        let [_, h, w] = seq.dims();
        dims = (h, w);
        let mut out = core(Sequence::new(seq.name.clone(), d.confidence))?;
        out = core(out.with_masks(d.mask))?;
        let written = write_sequence(&a.out, &out);
        if let Ok(w) = &written {
            run.outputs.extend(w.iter().cloned());
        }
        core(written)?;
        let starts: Vec<usize> = d.tiling.starts.iter().map(|s| s + 1).collect();
        let _ = writeln!(
            summary,
            "{}: {} frames, windows start at {starts:?}",
            seq.name,
            seq.len()
        );
        entries.push(ManifestEntry {
            name: seq.name.clone(),
            split: *split,
            group: String::new(),
        });
    }
    let manifest = Manifest {
        version: CONTAINER_VERSION,
        sequences: entries,
    };
    run.outputs.file(&a.out.join(MANIFEST_FILE))?;
    core(write_manifest(&a.out, &manifest))?;
    Ok(Finished {
        manifest_path: Some(a.out.join("run_manifest.json")),
        seed: None,
        inputs: vec![a.model.clone(), a.input.clone()],
        model: Some(model_info(&model.spec, dims.0, dims.1)),
        stdout: Some(summary.trim_end().to_string()),
    })
}

// -------------------------------------------------------------------- eval

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Directory written by `detect`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory with ground-truth masks.
    #[arg(long)]
    pub gt: PathBuf,
    /// Report JSON; the ROC goes next to it as `<out>.roc.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Hit radius in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Maximal ROC thresholds.
    #[arg(long, default_value_t = 256)]
    pub thresholds: usize,
    /// Restrict to one split of the ground-truth dataset.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Serialize)]
struct SequenceRow {
    name: String,
    pd: Option<f64>,
    fa: f64,
    fa_e5: f64,
    auc: Option<f64>,
    targets: usize,
}

pub fn eval(a: &EvalArgs, run: &mut Run) -> CliResult<Finished> {
    let split = parse_split(&a.split)?;
    let names: Vec<String> = if a.pred.join(MANIFEST_FILE).exists() {
        let gt_manifest = core(read_manifest(&a.gt))?;
        let keep: Vec<&str> = gt_manifest.names(split);
        core(read_manifest(&a.pred))?
            .sequences
            .into_iter()
            .map(|e| e.name)
            .filter(|n| keep.contains(&n.as_str()))
            .collect()
    } else {
        core(read_manifest(&a.gt))?
            .names(split)
            .into_iter()
            .map(String::from)
            .collect()
    };
    if names.is_empty() {
        return Err(CliError::Usage("no sequences to evaluate".into()));
    }
    let mut pairs = Vec::new();
    for n in &names {
        let p = core(read_sequence(&a.pred, n))?;
        let g = core(read_sequence(&a.gt, n))?;
        let mask = g
            .masks
            .ok_or_else(|| CliError::Usage(format!("ground truth {n} has no mask")))?;
        if p.frames.shape() != mask.shape() {
            return Err(CliError::Core(tempro_core::Error::Shape {
                op: "eval",
                detail: format!(
                    "{n}: prediction {:?} vs ground truth {:?}",
                    p.frames.shape(),
                    mask.shape()
                ),
            }));
        }
        pairs.push((n.clone(), p.frames, mask));
    }
    let mut rows = Vec::new();
    for (n, conf, gt) in &pairs {
        let pred = conf.map(|c| if c > a.threshold { 1.0 } else { 0.0 });
        let c = core(pd_fa(&pred, gt, a.radius))?;
        let auc = if c.targets > 0 {
            Some(core(roc_auc(conf, gt, a.radius, a.thresholds))?.auc)
        } else {
            None
        };
        let pd = c.pd();
        rows.push(SequenceRow {
            name: n.clone(),
            pd: (!pd.is_nan()).then_some(pd),
            fa: c.fa(),
            fa_e5: c.fa() * 1e5,
            auc,
            targets: c.targets,
        });
    }
    let pooled = core(evaluate(
        pairs.iter().map(|(_, c, g)| (c, g)),
        a.threshold,
        a.radius,
        a.thresholds,
    ))?;
    let doc = json!({ "pooled": pooled, "sequences": rows });
    run.outputs
        .write(&a.out, serde_json::to_vec_pretty(&doc)?)?;
    let roc_path = with_suffix(&a.out, ".roc.csv");
    let mut buf = Vec::new();
    write_roc_csv(&mut buf, &pooled.roc).map_err(|e| CliError::io(&roc_path, e))?;
    run.outputs.write(&roc_path, buf)?;
    let fmt =
        |v: Option<f64>, scale: f64| v.map_or("n/a".to_string(), |v| format!("{:.4}", v * scale));
    let mut table = format!(
        "{:<24} {:>8} {:>12} {:>8}\n",
        "sequence", "Pd", "Fa(x1e-5)", "AUC"
    );
    for r in &rows {
        let _ = writeln!(
            table,
            "{:<24} {:>8} {:>12} {:>8}",
            r.name,
            fmt(r.pd, 1.0),
            format!("{:.4}", r.fa_e5),
            fmt(r.auc, 1.0)
        );
    }
    let _ = write!(
        table,
        "{:<24} {:>8} {:>12} {:>8}",
        "pooled",
        fmt(pooled.pd, 1.0),
        format!("{:.4}", pooled.fa * 1e5),
        format!("{:.4}", pooled.auc)
    );
    Ok(Finished {
        manifest_path: Some(with_suffix(&a.out, ".manifest.json")),
        seed: None,
        inputs: vec![a.pred.clone(), a.gt.clone()],
        model: None,
        stdout: Some(table),
    })
}

// ----------------------------------------------------------------- profile

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mix {
    /// White Gaussian noise.
    Noise,
    /// Slowly varying clutter (smoothed random walk).
    Clutter,
}

#[derive(Args, Debug, Serialize)]
pub struct ProfileArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Pixel as `x,y`.
    #[arg(long)]
    pub pixel: String,
    /// Interference added to the profile before correlating.
    #[arg(long, value_enum)]
    pub mix: Option<Mix>,
    /// Interference std, in units of the profile's peak-to-peak range.
    #[arg(long, default_value_t = 0.25)]
    pub sigma: f64,
    /// Odd moving-average window.
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Seed of the interference.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Correlation CSV; the profile goes to `<out>.profile.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_pixel(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--pixel expects x,y, got {s:?}"));
    let (x, y) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        x.trim().parse().map_err(|_| bad())?,
        y.trim().parse().map_err(|_| bad())?,
    ))
}

fn interference(kind: Mix, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    match kind {
        Mix::Noise => white,
        Mix::Clutter => {
            let walk: Vec<f64> = white
                .iter()
                .scan(0.0, |acc, v| {
                    *acc += v;
                    Some(*acc)
                })
                .collect();
            // Odd window of about an eighth of the profile, never longer than it.
            let longest_odd = if n % 2 == 1 { n } else { n.saturating_sub(1) };
            let window = ((n / 8) | 1).min(longest_odd);
            if window == 0 {
                return walk;
            }
            tempro_core::profile::smooth_values(&walk, window).unwrap_or(walk)
        }
    }
}

pub fn profile(a: &ProfileArgs, run: &mut Run) -> CliResult<Finished> {
    let (x, y) = parse_pixel(&a.pixel)?;
    let seq = core(read_sequence_at(&a.input))?;
    let p = core(extract_profile(&seq, x, y))?;
    let curve = match a.mix {
        None => core(smooth(&core(correlation(&p))?, a.window))?,
        Some(kind) => {
            let lo = p.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = p.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let range = if hi > lo { hi - lo } else { 1.0 };
            let inter = TemporalProfile::from_values(interference(kind, p.values.len(), a.seed));
            core(mix_and_analyze(&p, &inter, a.sigma * range, a.window))?
        }
    };
    let mut buf = Vec::new();
    write_correlation_csv(&mut buf, &curve).map_err(|e| CliError::io(&a.out, e))?;
    run.outputs.write(&a.out, buf)?;
    let ppath = with_suffix(&a.out, ".profile.csv");
    let mut buf = Vec::new();
    write_profile_csv(&mut buf, &p).map_err(|e| CliError::io(&ppath, e))?;
    run.outputs.write(&ppath, buf)?;
    Ok(Finished {
        manifest_path: Some(with_suffix(&a.out, ".manifest.json")),
        seed: Some(a.seed),
        inputs: vec![a.input.clone()],
        model: None,
        stdout: None,
    })
}

// --------------------------------------------------------------- attribute

#[derive(Args, Debug, Serialize)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Sequence with target tracks or a ground-truth mask.
    #[arg(long)]
    pub input: PathBuf,
    /// Which target track to explain.
    #[arg(long, default_value_t = 0)]
    pub target_index: usize,
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    /// Constant baseline gray level (default: a quarter of the target's mean).
    #[arg(long)]
    pub baseline: Option<f64>,
    /// First frame of the explained clip (default: centered on the target).
    #[arg(long)]
    pub start: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn attribute(a: &AttributeArgs, run: &mut Run) -> CliResult<Finished> {
    let model = core(load_checkpoint(&a.model))?;
    let seq = core(read_sequence_at(&a.input))?;
    let [l, h, w] = seq.dims();
    let t = model.spec.frames;
    let full_mask = match seq.tracks.get(a.target_index) {
        Some(track) => {
            let m = track_mask(track, l, h, w);
            // Restrict to labelled pixels when ground truth is available.
            match &seq.masks {
                Some(gt) => Tensor::new(
                    vec![l, h, w],
                    m.data().iter().zip(gt.data()).map(|(a, b)| a * b).collect(),
                )
                .map_err(CliError::from)?,
                None => m,
            }
        }
        None if a.target_index == 0 && seq.tracks.is_empty() => seq
            .masks
            .clone()
            .ok_or_else(|| CliError::Usage("sequence has neither tracks nor a mask".into()))?,
        None => {
            return Err(CliError::Usage(format!(
                "target index {} out of range ({} tracks)",
                a.target_index,
                seq.tracks.len()
            )))
        }
    };
    let active: Vec<usize> = (0..l)
        .filter(|&f| full_mask.frame(f).iter().any(|&v| v > 0.0))
        .collect();
    if active.is_empty() {
        return Err(CliError::Core(tempro_core::Error::EmptyMask(format!(
            "target {} has no mask pixel",
            a.target_index
        ))));
    }
    let mid = (active[0] + active[active.len() - 1]) / 2;
    let len = t.min(l);
    let start = a
        .start
        .unwrap_or_else(|| mid.saturating_sub(len / 2))
        .min(l - len);
    let plane = h * w;
    let clip = core(Tensor::new(
        vec![len, h, w],
        seq.frames.data()[start * plane..(start + len) * plane].to_vec(),
    ))?;
    let mask = core(Tensor::new(
        vec![len, h, w],
        full_mask.data()[start * plane..(start + len) * plane].to_vec(),
    ))?;
    let cfg = match a.baseline {
        Some(b) => AttributionConfig {
            baseline: b,
            steps: a.steps,
        },
        None => core(AttributionConfig::for_target(&clip, &mask, a.steps))?,
    };
    let map = core(integrated_gradients(&model, &clip, &mask, &cfg))?;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, &m) in mask.data().iter().enumerate() {
        if m > 0.0 {
            sx += ((i % plane) % w) as f64;
            sy += ((i % plane) / w) as f64;
            n += 1.0;
        }
    }
    let centroid = (sx / n, sy / n);
    let conc = core(spatial_concentration(&map.values, centroid))?;
    let influence = core(frame_influence(&map.values))?;
    run.outputs.dir(&a.out)?;
    let out_seq = core(Sequence::new("attribution", map.values.clone()))?;
    let written = write_sequence(&a.out, &out_seq);
    if let Ok(w) = &written {
        run.outputs.extend(w.iter().cloned());
    }
    core(written)?;
    let ipath = a.out.join("influence.csv");
    let mut buf = Vec::new();
    write_influence_csv(&mut buf, &influence).map_err(|e| CliError::io(&ipath, e))?;
    run.outputs.write(&ipath, buf)?;
    let summary = json!({
        "target_index": a.target_index,
        "start": start,
        "frames": len,
        "baseline": cfg.baseline,
        "steps": cfg.steps,
        "score": map.score,
        "baseline_score": map.baseline_score,
        "completeness_gap": map.completeness_gap,
        "relative_gap": map.relative_gap(),
        "centroid": [centroid.0, centroid.1],
        "r90": conc.r90,
        "r90_degenerate": conc.degenerate,
    });
    run.outputs.write(
        &a.out.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(Finished {
        manifest_path: Some(a.out.join("run_manifest.json")),
        seed: None,
        inputs: vec![a.model.clone(), a.input.clone()],
        model: Some(model_info(&model.spec, h, w)),
        stdout: Some(serde_json::to_string_pretty(&summary)?),
    })
}

// ----------------------------------------------------------- export-scorms

#[derive(Args, Debug, Serialize)]
pub struct ExportScormsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn export_scorms(a: &ExportScormsArgs, run: &mut Run) -> CliResult<Finished> {
    let model = core(load_checkpoint(&a.model))?;
    run.outputs.dir(&a.out)?;
    let mut rows = Vec::new();
    let mut table = String::from("name,file,symmetry\n");
    for s in model.scorms() {
        let file = format!("{}.csv", s.name.replace('.', "_"));
        let mut buf = Vec::new();
        core(write_matrix_csv(&mut buf, &s.value))?;
        run.outputs.write(&a.out.join(&file), buf)?;
        let score = core(symmetry_score(&s.value))?;
        let _ = writeln!(table, "{},{file},{score}", s.name);
        rows.push(json!({ "name": s.name, "file": file, "symmetry": score }));
    }
    run.outputs.write(&a.out.join("symmetry.csv"), table)?;
    let m = model.spec.spatial_multiple();
    Ok(Finished {
        manifest_path: Some(a.out.join("run_manifest.json")),
        seed: None,
        inputs: vec![a.model.clone()],
        model: Some(model_info(&model.spec, m, m)),
        stdout: Some(serde_json::to_string_pretty(&rows)?),
    })
}

// ------------------------------------------------------------------- stats

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    /// Checkpoint to inspect.
    #[arg(long, conflicts_with = "variant")]
    pub model: Option<PathBuf>,
    /// Inspect a freshly built full-width model instead of a checkpoint.
    #[arg(long)]
    pub variant: Option<String>,
    /// Frame size (square) for the FLOP count.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Frame size (square) of the throughput measurement.
    #[arg(long, default_value_t = 64)]
    pub fps_size: usize,
    /// Timed forward passes.
    #[arg(long, default_value_t = 1)]
    pub fps_runs: usize,
    /// Write the statistics here instead of printing them with the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn kilo(n: usize) -> String {
    format!("{:.1}K", n as f64 / 1000.0)
}

pub fn stats(a: &StatsArgs, run: &mut Run) -> CliResult<Finished> {
    let model = match (&a.model, &a.variant) {
        (Some(p), _) => core(load_checkpoint(p))?,
        (None, Some(v)) => core(Model::build(&ModelSpec::default_for(core(v.parse())?), 0))?,
        (None, None) => return Err(CliError::Usage("stats needs --model or --variant".into())),
    };
    let spec = &model.spec;
    let mult = spec.spatial_multiple();
    if !a.size.is_multiple_of(mult) || !a.fps_size.is_multiple_of(mult) || a.fps_runs == 0 {
        return Err(CliError::Usage(format!(
            "sizes must be multiples of {mult} and --fps-runs positive"
        )));
    }
    let (scorm, other) = model.counted_params();
    let each = spec.scorm_params();
    let macs = spec.macs_per_frame(a.size, a.size);
    let x = Tensor::from_fn(&[spec.frames, a.fps_size, a.fps_size], |i| {
        ((i * 7919) % 255) as f64
    });
    let t0 = Instant::now();
    for _ in 0..a.fps_runs {
        core(model.forward(&x, Mode::Eval))?;
    }
    let secs = t0.elapsed().as_secs_f64();
    let doc = json!({
        "variant": spec.variant,
        "frames": spec.frames,
        "channels": spec.channels,
        "m": spec.m,
        "params": scorm + other,
        "params_kb": (scorm + other) as f64 * 4.0 / 1024.0,
        "params_k": kilo(scorm + other),
        "scorm_count": spec.scorm_count(),
        "scorm_params_each": each,
        "scorm_params_each_k": kilo(each),
        "scorm_params_total": scorm,
        "other_params": other,
        "flops_per_frame": {
            "size": [a.size, a.size],
            "gmacs": macs / 1e9,
            "gflops_mac_as_1": macs / 1e9,
            "gflops_mac_as_2": 2.0 * macs / 1e9,
        },
        "fps": { "size": [a.fps_size, a.fps_size], "frames_per_second": (spec.frames * a.fps_runs) as f64 / secs },
    });
    let text = serde_json::to_string_pretty(&doc)?;
    let manifest_path = match &a.out {
        Some(p) => {
            run.outputs.write(p, &text)?;
            Some(with_suffix(p, ".manifest.json"))
        }
        None => None,
    };
    Ok(Finished {
        manifest_path,
        seed: None,
        inputs: a.model.iter().cloned().collect(),
        model: Some(model_info(spec, a.size, a.size)),
        stdout: Some(text),
    })
}
