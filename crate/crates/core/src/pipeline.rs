//! File-level orchestration behind the command-line tool.
//!
//! A harmonized data directory holds `harmonized.json` (the index),
//! `normalizer.json` fitted over every generalized state, and one
//! `generalized.csv` per clip. Frames stay with the source datasets and are
//! preprocessed on load at the image size the model asks for.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentContext;
use crate::dataset::io::{clip_id, load_frames, read_forces, read_states, harmonize_stream, FORCES_FILE, STATES_FILE};
use crate::dataset::manifest::load_manifest;
use crate::dataset::window::{build_windows, Clip};
use crate::dataset::{mix_datasets, DatasetManifest, GeneralizedState, LoadedDataset, Normalizer, SampleWindow, STATE_DIM};
use crate::error::{Error, Result};
use crate::eval::{latency_bench, write_force_series, write_rmse_series, Axis, EvalReport, Latency, LATENCY_PASSES};
use crate::geometry::Vec3;
use crate::nn::{Checkpoint, Model, ModelSpec, Tensor, Variant};
use crate::train::{predict_windows, train_with_progress, write_loss_curve, AugmentContexts, EpochRecord, Preprocessor, TrainConfig};

pub const INDEX_FILE: &str = "harmonized.json";
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const GENERALIZED_FILE: &str = "generalized.csv";
/// Samples per RMSE-over-time window: one second of the 30 Hz stream.
pub const DEFAULT_RMSE_WINDOW: usize = 30;

/// Refuses to replace an existing path unless `overwrite` is set.
pub fn guard_output(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::config(
            "out",
            format!("{} already exists; pass --overwrite to replace it", path.display()),
        ));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizedClip {
    pub id: String,
    pub dataset: String,
    /// Relative to the harmonized directory.
    pub file: PathBuf,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizedIndex {
    pub manifests: Vec<PathBuf>,
    pub clips: Vec<HarmonizedClip>,
    pub normalizer: PathBuf,
}

fn slot_header() -> Vec<String> {
    let mut h = vec!["timestamp".to_string()];
    h.extend((0..STATE_DIM).map(|i| format!("s{i:02}")));
    h.extend(["fx", "fy", "fz"].map(String::from));
    h
}

pub fn write_generalized(path: &Path, times: &[f64], states: &[GeneralizedState], forces: &[Vec3]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(slot_header())?;
    for ((t, s), f) in times.iter().zip(states).zip(forces) {
        let row = std::iter::once(*t)
            .chain(s.0.iter().copied())
            .chain(f.iter().copied())
            .map(|v| v.to_string());
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_generalized(path: &Path) -> Result<(Vec<f64>, Vec<GeneralizedState>, Vec<Vec3>)> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != slot_header() {
        return Err(Error::data(format!("{}: unexpected header", path.display())));
    }
    let (mut times, mut states, mut forces) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let v = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::data(format!("{}: row {}: {e}", path.display(), line + 2)))?;
        times.push(v[0]);
        let mut s = GeneralizedState::default();
        s.0.copy_from_slice(&v[1..=STATE_DIM]);
        states.push(s);
        forces.push(Vec3::new(v[STATE_DIM + 1], v[STATE_DIM + 2], v[STATE_DIM + 3]));
    }
    Ok((times, states, forces))
}

/// Generalizes and calibrates every clip of the given datasets into `out`.
pub fn harmonize(manifests: &[PathBuf], out: &Path, overwrite: bool) -> Result<HarmonizedIndex> {
    if manifests.is_empty() {
        return Err(Error::config("manifest", "at least one manifest is required"));
    }
    let loaded = manifests
        .iter()
        .map(|p| load_manifest(p).map(|m| (p, m)))
        .collect::<Result<Vec<_>>>()?;
    let mut names = std::collections::BTreeSet::new();
    for (_, m) in &loaded {
        if !names.insert(m.name.clone()) {
            return Err(Error::config("manifest", format!("dataset name `{}` appears twice", m.name)));
        }
    }
    guard_output(&out.join(INDEX_FILE), overwrite)?;
    create_dir(out)?;

    let mut clips = Vec::new();
    let mut all_states = Vec::new();
    for (_, m) in &loaded {
        for entry in &m.clips {
            let dir = m.clip_dir(entry);
            let raw = read_states(&dir.join(STATES_FILE), &m.layout)?;
            let forces = read_forces(&dir.join(FORCES_FILE))?;
            let (times, states, labels) = harmonize_stream(m, &raw, &forces)?;
            let file = PathBuf::from(&m.name).join(&entry.path).join(GENERALIZED_FILE);
            create_dir(out.join(&file).parent().expect("clip file has a parent"))?;
            write_generalized(&out.join(&file), &times, &states, &labels)?;
            clips.push(HarmonizedClip {
                id: clip_id(m, entry).to_string(),
                dataset: m.name.clone(),
                file,
                samples: states.len(),
            });
            all_states.extend(states);
        }
    }
    let normalizer = Normalizer::fit(all_states.iter())?;
    normalizer.save(out.join(NORMALIZER_FILE))?;
    let index = HarmonizedIndex {
        manifests: loaded
            .iter()
            .map(|(p, _)| std::path::absolute(p).map_err(|e| Error::io(p, e)))
            .collect::<Result<_>>()?,
        clips,
        normalizer: NORMALIZER_FILE.into(),
    };
    let path = out.join(INDEX_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// A harmonized directory loaded back into memory.
#[derive(Debug, Clone)]
pub struct Harmonized {
    pub index: HarmonizedIndex,
    pub manifests: Vec<DatasetManifest>,
    pub datasets: Vec<LoadedDataset>,
}

impl Harmonized {
    /// Augmentation contexts for every dataset that has a camera and a chain.
    pub fn augment_contexts(&self) -> AugmentContexts {
        self.manifests
            .iter()
            .filter_map(|m| {
                Some((
                    m.name.clone(),
                    AugmentContext {
                        camera: m.camera?.extrinsic,
                        chain: m.chain.clone()?,
                    },
                ))
            })
            .collect()
    }

    pub fn clip(&self, id: &str) -> Option<&Clip> {
        self.datasets.iter().flat_map(|d| &d.clips).find(|c| &*c.id == id)
    }

    /// Windows of every clip in index order.
    pub fn windows(&self) -> Result<Vec<SampleWindow>> {
        let mut out = Vec::new();
        for c in self.datasets.iter().flat_map(|d| &d.clips) {
            out.extend(build_windows(c)?);
        }
        Ok(out)
    }
}

pub fn read_index(dir: &Path) -> Result<HarmonizedIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_harmonized(dir: &Path, image_size: usize) -> Result<Harmonized> {
    let index = read_index(dir)?;
    let manifests = index.manifests.iter().map(load_manifest).collect::<Result<Vec<_>>>()?;
    let mut by_id: BTreeMap<&str, &HarmonizedClip> = index.clips.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut datasets = Vec::new();
    for m in &manifests {
        let mut clips = Vec::new();
        for entry in &m.clips {
            let id = clip_id(m, entry);
            let rec = by_id
                .remove(&*id)
                .ok_or_else(|| Error::data(format!("{}: clip {id} missing from the index", dir.display())))?;
            let (state_times, states, forces) = read_generalized(&dir.join(&rec.file))?;
            let clip = Clip {
                id,
                dataset: m.name.clone(),
                tags: entry.tags.clone(),
                video_rate: m.video_rate,
                frames: load_frames(m, entry, image_size)?,
                state_times,
                states,
                forces,
            };
            clip.validate()?;
            clips.push(clip);
        }
        datasets.push(LoadedDataset {
            name: m.name.clone(),
            clips,
        });
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::data(format!("{}: indexed clip {id} has no manifest entry", dir.display())));
    }
    Ok(Harmonized {
        index,
        manifests,
        datasets,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Tiny,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: Preset::default(),
            image_size: default_image_size(),
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, variant: Variant) -> ModelSpec {
        match self.preset {
            Preset::Tiny => ModelSpec::tiny(variant, self.image_size),
            Preset::Desk => ModelSpec {
                image_size: self.image_size,
                ..ModelSpec::new(variant)
            },
        }
    }
}

/// Contents of the `--config` file given to `train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Path of the loss curve written next to a checkpoint.
pub fn loss_curve_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ckpt.with_file_name(format!("{stem}.loss.csv"))
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
    pub flagged: usize,
}

/// Trains one variant on a harmonized directory and writes the checkpoint and loss curve.
pub fn train_run(
    data: &Path,
    variant: Variant,
    cfg: &RunConfig,
    out: &Path,
    overwrite: bool,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainRun> {
    cfg.train.validate()?;
    let spec = cfg.model.spec(variant);
    spec.validate()?;
    guard_output(out, overwrite)?;
    guard_output(&loss_curve_path(out), overwrite)?;
    let h = load_harmonized(data, spec.image_size)?;
    let split = mix_datasets(&h.datasets, cfg.train.mode, cfg.train.seed)?;
    let outcome = train_with_progress(&spec, &split, &h.augment_contexts(), &cfg.train, on_epoch)?;
    let checkpoint = outcome.checkpoint(&cfg.train);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    checkpoint.save(out)?;
    write_loss_curve(&loss_curve_path(out), &outcome.curve)?;
    Ok(TrainRun {
        checkpoint,
        curve: outcome.curve,
        flagged: outcome.flagged,
    })
}

/// Preprocessor rebuilt from the normalizer and occlusion stored with a checkpoint.
pub fn checkpoint_preprocessor(ckpt: &Checkpoint) -> Result<(TrainConfig, Preprocessor)> {
    let cfg: TrainConfig = serde_json::from_value(ckpt.meta.config.clone())
        .map_err(|e| Error::Checkpoint(format!("stored training config: {e}")))?;
    let normalizer = ckpt
        .meta
        .normalizer
        .clone()
        .ok_or_else(|| Error::Checkpoint("no normalizer stored".into()))?;
    let pre = Preprocessor::new(&ckpt.meta.spec, normalizer, cfg.occlusion.clone());
    Ok((cfg, pre))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub clip: String,
    pub windows: usize,
    pub report: EvalReport,
    pub forces_csv: PathBuf,
    pub rmse_csv: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: Variant,
    pub mode: crate::dataset::TrainMode,
    pub seed: u64,
    pub checkpoint_digest: String,
    pub clips: Vec<ClipEval>,
}

/// Predictions for one clip, timed at the last frame of each window.
pub fn predict_clip(model: &Model, pre: &Preprocessor, windows: &[SampleWindow]) -> Result<(Vec<f64>, Vec<Vec3>, Vec<Vec3>)> {
    let refs: Vec<&SampleWindow> = windows.iter().collect();
    let pred = predict_windows(model, pre, &refs)?;
    let times = windows.iter().map(|w| w.frame_times[crate::dataset::WINDOW_LEN - 1]).collect();
    let gt = windows.iter().map(|w| w.target).collect();
    Ok((times, pred, gt))
}

/// Evaluates a checkpoint on the test clips its own training config held out.
/// With `latency_passes > 0` every report also carries a batch-1 latency measurement.
pub fn eval_run(
    ckpt_path: &Path,
    data: &Path,
    report_dir: &Path,
    axis: Axis,
    latency_passes: usize,
    overwrite: bool,
) -> Result<EvalSummary> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (cfg, pre) = checkpoint_preprocessor(&ckpt)?;
    let model = ckpt.to_model()?;
    guard_output(&report_dir.join("summary.json"), overwrite)?;
    let h = load_harmonized(data, ckpt.meta.spec.image_size)?;
    let split = mix_datasets(&h.datasets, cfg.mode, cfg.seed)?;
    create_dir(report_dir)?;
    let latency = if latency_passes > 0 {
        Some(bench_model(&model, latency_passes)?)
    } else {
        None
    };

    let mut clips = Vec::new();
    for test in &split.test {
        let stem = test.id.replace('/', "_");
        let (times, pred, gt) = predict_clip(&model, &pre, &test.windows)?;
        let mut report = EvalReport::compute(&pred, &gt, axis, DEFAULT_RMSE_WINDOW.min(gt.len()))?;
        report.latency = latency;
        let forces_csv = PathBuf::from(format!("{stem}.forces.csv"));
        let rmse_csv = PathBuf::from(format!("{stem}.rmse.csv"));
        write_force_series(&report_dir.join(&forces_csv), &times, &pred, &gt)?;
        write_rmse_series(&report_dir.join(&rmse_csv), &times, report.rmse_window, &report.rmse_over_time)?;
        report.save(&report_dir.join(format!("{stem}.report.json")))?;
        clips.push(ClipEval {
            clip: test.id.to_string(),
            windows: test.windows.len(),
            report,
            forces_csv,
            rmse_csv,
        });
    }
    let summary = EvalSummary {
        model: ckpt.meta.spec.variant,
        mode: cfg.mode,
        seed: cfg.seed,
        checkpoint_digest: ckpt.digest()?,
        clips,
    };
    let path = report_dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Batch-1 inference latency on constant inputs of the model's shape.
pub fn bench_model(model: &Model, n: usize) -> Result<Latency> {
    let spec = model.spec();
    let f = spec.variant.frames_used();
    let s = spec.image_size;
    let frames = (f > 0).then(|| Tensor {
        shape: vec![1, f, 3, s, s],
        data: vec![0.1; f * 3 * s * s],
    });
    let states = Tensor {
        shape: vec![1, crate::dataset::WINDOW_LEN, STATE_DIM],
        data: vec![0.1; crate::dataset::WINDOW_LEN * STATE_DIM],
    };
    latency_bench(|| model.predict(frames.as_ref(), &states).map(|_| ()), n)
}

pub fn bench_checkpoint(path: &Path, n: Option<usize>) -> Result<Latency> {
    let model = Checkpoint::load(path)?.to_model()?;
    bench_model(&model, n.unwrap_or(LATENCY_PASSES))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDump {
    pub index: usize,
    pub clip: String,
    pub start: usize,
    pub frame_times: Vec<f64>,
    pub state_times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub normalized_states: Vec<Vec<f64>>,
    pub target: [f64; 3],
    pub frames: Vec<PathBuf>,
}

/// Writes window `k` (over all clips in index order) as PNG frames plus a JSON description.
pub fn inspect_window(data: &Path, k: usize, image_size: usize, out: &Path, overwrite: bool) -> Result<WindowDump> {
    let h = load_harmonized(data, image_size)?;
    let normalizer = Normalizer::load(data.join(&h.index.normalizer))?;
    let windows = h.windows()?;
    let w = windows.get(k).ok_or_else(|| {
        Error::config("window", format!("index {k} out of range; {} windows available", windows.len()))
    })?;
    guard_output(&out.join("window.json"), overwrite)?;
    create_dir(out)?;
    let mut frames = Vec::new();
    for (i, img) in w.frames.iter().enumerate() {
        let name = PathBuf::from(format!("frame_{i}.png"));
        img.to_rgb().save(out.join(&name))?;
        frames.push(name);
    }
    let dump = WindowDump {
        index: k,
        clip: w.clip.to_string(),
        start: w.start,
        frame_times: w.frame_times.to_vec(),
        state_times: w.state_times.to_vec(),
        states: w.states.iter().map(|s| s.0.to_vec()).collect(),
        normalized_states: w.states.iter().map(|s| normalizer.apply(s).0.to_vec()).collect(),
        target: [w.target.x, w.target.y, w.target.z],
        frames,
    };
    let path = out.join("window.json");
    std::fs::write(&path, serde_json::to_string_pretty(&dump)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(dump)
}
