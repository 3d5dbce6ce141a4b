//! Command implementations: prepare, gen-synthetic, train, eval, sweep.
//!
//! Every command is deterministic given its config and seed; all emitted
//! files are self-describing and re-loadable by this build.

use crate::config::RunConfigFile;
use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use trackcast::datahub::{
    downsample, generate_synthetic, load_tracks, save_canonical_csv, split, window_scenes,
    windows_to_tracks, DatasetFile, SceneWindow, SourceFormat, SplitManifest, SyntheticSpec,
    Unit, DATASET_SCHEMA_VERSION,
};
use trackcast::metrics::{self, MetricsReport};
use trackcast::model::{Checkpoint, VtModel};
use trackcast::trainer::{self, horizon_sweep, sweep_to_csv};

fn write_text(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("write {}", path.display()))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// What `prepare` did, for reproducibility audits.
#[derive(Debug, Serialize, Deserialize)]
pub struct PrepareManifest {
    pub schema_version: u32,
    pub source_format: SourceFormat,
    pub unit: Unit,
    pub native_rate_hz: u32,
    pub target_rate_hz: u32,
    pub downsample_stride: u32,
    pub window_stride: usize,
    pub t_oh: usize,
    pub t_ph: usize,
    pub canonical_horizon: bool,
    pub split_fraction: f64,
    pub seed: u64,
    pub n_windows: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

pub fn cmd_prepare(
    input: &Path,
    format: SourceFormat,
    config: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg = match config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    let mut dcfg = cfg.data.dataset_config();
    dcfg.source_format = format;
    dcfg.validate()?;

    let table = load_tracks(input, format, cfg.data.columns_for(format))?;
    let table = downsample(&table, dcfg.native_rate_hz, dcfg.target_rate_hz)?;
    let windows = window_scenes(&table, &dcfg, dcfg.target_rate_hz)?;
    let (train_set, eval_set) = split(&windows, dcfg.split_fraction, dcfg.seed)?;

    std::fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    save_canonical_csv(&table, &out.join("tracks.csv"))?;
    DatasetFile::new(
        table.unit,
        dcfg.target_rate_hz,
        dcfg.t_oh,
        dcfg.t_ph,
        windows.clone(),
    )
    .save(&out.join("windows.json"))?;
    write_json_pretty(
        &out.join("split.json"),
        &SplitManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            seed: dcfg.seed,
            fraction: dcfg.split_fraction,
            train_scene_ids: train_set.iter().map(|w| w.scene_id).collect(),
            eval_scene_ids: eval_set.iter().map(|w| w.scene_id).collect(),
        },
    )?;
    write_json_pretty(
        &out.join("manifest.json"),
        &PrepareManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            source_format: format,
            unit: table.unit,
            native_rate_hz: dcfg.native_rate_hz,
            target_rate_hz: dcfg.target_rate_hz,
            downsample_stride: dcfg.downsample_stride(),
            window_stride: dcfg.stride,
            t_oh: dcfg.t_oh,
            t_ph: dcfg.t_ph,
            canonical_horizon: dcfg.is_canonical_horizon(),
            split_fraction: dcfg.split_fraction,
            seed: dcfg.seed,
            n_windows: windows.len(),
            n_train: train_set.len(),
            n_eval: eval_set.len(),
        },
    )?;
    println!(
        "prepared {} windows ({} train / {} eval) at {} Hz into {}",
        windows.len(),
        train_set.len(),
        eval_set.len(),
        dcfg.target_rate_hz,
        out.display()
    );
    Ok(())
}

/// Sidecar describing how a synthetic dataset was produced.
#[derive(Debug, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub schema_version: u32,
    pub spec: SyntheticSpec,
    pub split_fraction: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_gen_synthetic(spec: &SyntheticSpec, split_fraction: f64, out: &Path) -> anyhow::Result<()> {
    let windows = generate_synthetic(spec)?;
    let (train_set, eval_set) = split(&windows, split_fraction, spec.seed)?;

    std::fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let table = windows_to_tracks(&windows, Unit::Meters);
    save_canonical_csv(&table, &out.join("tracks.csv"))?;
    DatasetFile::new(Unit::Meters, spec.rate_hz, spec.t_oh, spec.t_ph, windows.clone())
        .save(&out.join("windows.json"))?;
    write_json_pretty(
        &out.join("split.json"),
        &SplitManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            seed: spec.seed,
            fraction: split_fraction,
            train_scene_ids: train_set.iter().map(|w| w.scene_id).collect(),
            eval_scene_ids: eval_set.iter().map(|w| w.scene_id).collect(),
        },
    )?;
    write_json_pretty(
        &out.join("meta.json"),
        &SyntheticMeta {
            schema_version: DATASET_SCHEMA_VERSION,
            spec: spec.clone(),
            split_fraction,
        },
    )?;
    println!(
        "generated {} {} scenes with {} vehicles each into {}",
        spec.n_scenes,
        spec.scenario,
        spec.vehicles_per_scene,
        out.display()
    );
    Ok(())
}

fn load_dataset_dir(dir: &Path) -> anyhow::Result<(DatasetFile, Option<SplitManifest>)> {
    let windows_path = dir.join("windows.json");
    if !windows_path.exists() {
        bail!("dataset {} has no windows.json (run prepare or gen-synthetic first)", dir.display());
    }
    let file = DatasetFile::load(&windows_path)?;
    let split_path = dir.join("split.json");
    let manifest = if split_path.exists() {
        let text = std::fs::read_to_string(&split_path)
            .with_context(|| format!("read {}", split_path.display()))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    Ok((file, manifest))
}

fn partition(
    windows: &[SceneWindow],
    manifest: &SplitManifest,
) -> (Vec<SceneWindow>, Vec<SceneWindow>) {
    let pick = |ids: &[u64]| {
        ids.iter()
            .filter_map(|id| windows.iter().find(|w| w.scene_id == *id).cloned())
            .collect::<Vec<_>>()
    };
    (pick(&manifest.train_scene_ids), pick(&manifest.eval_scene_ids))
}

pub fn cmd_train(config_path: &Path) -> anyhow::Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    // Echo the effective configuration before anything heavy runs.
    println!("{}", serde_json::to_string_pretty(&cfg)?);

    let data_dir = PathBuf::from(
        cfg.data
            .path
            .as_ref()
            .ok_or_else(|| anyhow!("config data.path is required for train"))?,
    );
    let (file, manifest) = load_dataset_dir(&data_dir)?;
    if file.t_oh != cfg.data.t_oh || file.t_ph != cfg.data.t_ph {
        bail!(
            "horizon mismatch: dataset is t_oh={} t_ph={}, config wants t_oh={} t_ph={}",
            file.t_oh,
            file.t_ph,
            cfg.data.t_oh,
            cfg.data.t_ph
        );
    }
    let (train_set, eval_set) = match &manifest {
        Some(m) => partition(&file.windows, m),
        None => split(&file.windows, cfg.data.split_fraction, cfg.data.seed)?,
    };

    let model_cfg = cfg.model_config();
    let train_cfg = cfg.train_config();
    let out_dir = cfg.resolve_out_dir(None);
    let record = trainer::train(&train_set, &eval_set, &model_cfg, &train_cfg, &out_dir)?;
    write_json_pretty(&out_dir.join("summary.json"), &record)?;

    let last = record.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} windows: final loss {}, best eval ADE {:?}",
        record.epochs.len(),
        train_set.len(),
        last.train_loss,
        record.best_eval_ade
    );
    println!("checkpoints: {} / {}", record.final_checkpoint, record.best_checkpoint);
    Ok(())
}

/// Evaluation report wrapper: metrics plus the model's parameter count.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub checkpoint: String,
    pub data: String,
    pub split: String,
    pub params: usize,
    pub report: MetricsReport,
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = VtModel::from_checkpoint(ckpt);
    let (file, manifest) = load_dataset_dir(data)?;
    if model.cfg.t_oh != file.t_oh || model.cfg.t_ph != file.t_ph {
        bail!(
            "horizon mismatch: checkpoint expects t_oh={} t_ph={}, dataset has t_oh={} t_ph={}",
            model.cfg.t_oh,
            model.cfg.t_ph,
            file.t_oh,
            file.t_ph
        );
    }
    let (windows, split_name) = match &manifest {
        Some(m) if !m.eval_scene_ids.is_empty() => (partition(&file.windows, m).1, "eval"),
        _ => (file.windows.clone(), "all"),
    };
    let report = metrics::evaluate(&model, &windows, file.rate_hz)?;

    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| RunConfigFile::default().resolve_out_dir(None));
    std::fs::create_dir_all(&out_dir).with_context(|| format!("create {}", out_dir.display()))?;

    let eval_report = EvalReport {
        schema_version: DATASET_SCHEMA_VERSION,
        checkpoint: checkpoint.display().to_string(),
        data: data.display().to_string(),
        split: split_name.to_string(),
        params: model.param_count(),
        report: report.clone(),
    };
    write_json_pretty(&out_dir.join("eval_report.json"), &eval_report)?;

    // One-row CSV with the params count appended.
    let base_csv = report.to_csv();
    let mut lines = base_csv.lines();
    let header = format!("{},params\n", lines.next().unwrap_or_default());
    let row = format!("{},{}\n", lines.next().unwrap_or_default(), model.param_count());
    write_text(&out_dir.join("eval_report.csv"), &(header + &row))?;

    // Plot data: RMSE against the horizon in seconds.
    let mut plot = String::from("seconds,rmse\n");
    for mark in &report.rmse_at {
        plot.push_str(&format!("{},{}\n", mark.seconds, mark.value));
    }
    write_text(&out_dir.join("plot_rmse.csv"), &plot)?;

    println!("{}", serde_json::to_string_pretty(&eval_report)?);
    Ok(())
}

pub fn cmd_sweep(config_path: &Path) -> anyhow::Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);

    let data_dir = PathBuf::from(
        cfg.data
            .path
            .as_ref()
            .ok_or_else(|| anyhow!("config data.path is required for sweep"))?,
    );
    let tracks_path = data_dir.join("tracks.csv");
    if !tracks_path.exists() {
        bail!("dataset {} has no tracks.csv", data_dir.display());
    }
    let table = load_tracks(&tracks_path, SourceFormat::Canonical, None)?;

    // Re-window the same tracks for each observation horizon with all other
    // parameters fixed; longest history first.
    let mut sets = Vec::new();
    for t_oh in [15usize, 10, 5] {
        let mut dcfg = cfg.data.dataset_config();
        dcfg.t_oh = t_oh;
        dcfg.validate()?;
        let windows = window_scenes(&table, &dcfg, dcfg.target_rate_hz)?;
        if windows.is_empty() {
            bail!("no windows for t_oh={t_oh}; tracks too short?");
        }
        let (train_set, eval_set) = split(&windows, dcfg.split_fraction, dcfg.seed)?;
        sets.push((t_oh, train_set, eval_set));
    }

    let out_dir = cfg.resolve_out_dir(None);
    let rows = horizon_sweep(&sets, &cfg.model_config(), &cfg.train_config(), &out_dir)?;
    let csv = sweep_to_csv(&rows);
    std::fs::create_dir_all(&out_dir).with_context(|| format!("create {}", out_dir.display()))?;
    write_text(&out_dir.join("sweep.csv"), &csv)?;
    write_json_pretty(&out_dir.join("sweep.json"), &rows)?;
    print!("{csv}");
    Ok(())
}

/// Exit codes: 0 success, 2 usage, 3 data/config, 4 numeric divergence.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    use trackcast::numkit::NumError;
    use trackcast::trainer::TrainError;
    for cause in err.chain() {
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                TrainError::Diverged { .. } => 4,
                TrainError::Num(n) => num_code(n),
                _ => 3,
            };
        }
        if let Some(n) = cause.downcast_ref::<NumError>() {
            return num_code(n);
        }
    }
    3
}

fn num_code(err: &trackcast::numkit::NumError) -> u8 {
    use trackcast::numkit::NumError;
    match err {
        NumError::NonFinite { .. } | NumError::PoisonedGradient { .. } => 4,
        _ => 3,
    }
}
