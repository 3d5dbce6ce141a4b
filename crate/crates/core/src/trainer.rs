//! Training pipeline: MSE objective on per-step displacements, seeded epoch
//! shuffling, scene-window batches with one optimizer step per batch,
//! periodic evaluation, checkpointing, and the observation-horizon sweep.

use crate::datahub::{DataError, SceneWindow};
use crate::metrics::{self, Forecaster, MetricsError, MetricsReport};
use crate::model::{config_hash, BoundParams, Checkpoint, ModelConfig, VtModel};
use crate::numkit::{AdamConfig, NumError, ParamStore, Tape, Tensor, Var};
use crate::par;
use crate::predictor::{forward_teacher_forced, ForwardMode, PredictedTrajectory};
use crate::tokenizer::tokenize;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("loss diverged (non-finite) in batch {batch}")]
    Diverged { batch: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Optimization protocol. Defaults are the canonical training recipe:
/// 80 epochs, learning rate 0.01, weight decay 0.0005, batch size 16.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the held-out split every this many epochs (and always at
    /// the final epoch).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            lr: 0.01,
            weight_decay: 0.0005,
            batch_size: 16,
            seed: 42,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NumError> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(NumError::Config(
                "epochs, batch_size, and eval_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(NumError::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Mean squared error over every component of two equally shaped tensors.
/// For displacement targets this is the mean over all 2 * t_ph components.
pub fn mse_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var, NumError> {
    let diff = tape.sub(pred, gt)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean_all(sq))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic seed stream per (purpose, epoch, index).
fn derive_seed(base: u64, purpose: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base ^ purpose) ^ a) ^ b)
}

/// Loss sum, vehicle count, and per-parameter gradients for one scene.
///
/// Vehicles are tokenized jointly (one graph over the co-present vehicles)
/// and trained teacher-forced; the returned gradients are for the *sum* of
/// per-vehicle MSE losses so batches can rescale once at the end.
pub fn scene_grads(
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &SceneWindow,
    dropout_seed: u64,
) -> Result<(f64, usize, BTreeMap<String, Tensor>), NumError> {
    let mut tape = Tape::new();
    let params = BoundParams::bind(store, &mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut mode = if cfg.dropout > 0.0 {
        ForwardMode::Train {
            rng: &mut rng,
            rate: cfg.dropout,
        }
    } else {
        ForwardMode::Infer
    };
    let tokens = tokenize(&mut tape, &params, cfg, scene)?;
    let mut total: Option<Var> = None;
    for (vehicle, tok) in scene.vehicles.iter().zip(tokens) {
        let (pred, gt) = forward_teacher_forced(
            &mut tape,
            &params,
            cfg,
            tok,
            vehicle.last_observed(),
            &vehicle.future,
            &mut mode,
        )?;
        let loss = mse_loss(&mut tape, pred, gt)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let total = total.expect("scene has at least one vehicle");
    let loss_value = tape.value(total).item();
    let grads = tape.backward(total)?;
    let mut out = BTreeMap::new();
    for (name, var) in params.iter() {
        if let Some(g) = grads.get_ref(var) {
            out.insert(name.to_string(), g.clone());
        }
    }
    Ok((loss_value, scene.vehicles.len(), out))
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricsReport>,
}

/// Full record of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub params_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: String,
    pub best_checkpoint: String,
    pub best_eval_ade: Option<f64>,
}

impl RunRecord {
    pub fn final_eval(&self) -> Option<&MetricsReport> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), TrainError> {
    std::fs::write(path, contents).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Train a model and leave `run.jsonl`, `checkpoint_final.json`, and
/// `checkpoint_best.json` in `out_dir`.
///
/// Each batch holds up to `batch_size` scene windows; the batch loss is the
/// vehicle-mean of per-vehicle displacement MSE, and there is one Adam step
/// per batch. Scene shuffling, dropout, and initialization all derive from
/// the run seed, so a seed fixes the whole run bit-for-bit. A non-finite
/// batch loss aborts with the offending batch id (partial records are
/// preserved on disk).
pub fn train(
    train_set: &[SceneWindow],
    eval_set: &[SceneWindow],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Data(DataError::Invalid(
            "training set is empty".into(),
        )));
    }
    for w in train_set.iter().chain(eval_set) {
        w.validate(model_cfg.t_oh, model_cfg.t_ph)?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let hash = config_hash(&(model_cfg, cfg));
    let mut store = model_cfg.init_params(cfg.seed)?;
    let params_count = store.count_params();
    let rate_hz = train_set[0].rate_hz;
    let adam = AdamConfig::new(cfg.lr, cfg.weight_decay);

    let final_path = out_dir.join("checkpoint_final.json");
    let best_path = out_dir.join("checkpoint_best.json");
    let run_path = out_dir.join("run.jsonl");
    let mut run_lines = String::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best_ade: Option<f64> = None;
    let mut global_batch = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss_sum = 0.0;
        let mut epoch_vehicles = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            global_batch += 1;
            let jobs: Vec<(usize, &SceneWindow)> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| (k, &train_set[i]))
                .collect();
            let results = par::map_ordered(&jobs, |(k, scene)| {
                let seed = derive_seed(
                    cfg.seed,
                    2,
                    epoch as u64,
                    ((global_batch as u64) << 16) | *k as u64,
                );
                scene_grads(&store, model_cfg, scene, seed)
            });

            let mut batch_loss_sum = 0.0;
            let mut batch_vehicles = 0usize;
            for result in results {
                let (loss, n_veh, grads) = match result {
                    Ok(r) => r,
                    Err(e) => {
                        // Keep the partial per-epoch record around for
                        // post-mortems before surfacing the error.
                        write_file(&run_path, &run_lines)?;
                        return Err(e.into());
                    }
                };
                batch_loss_sum += loss;
                batch_vehicles += n_veh;
                for (name, g) in &grads {
                    store.accumulate_grad(name, g)?;
                }
            }
            let batch_loss = batch_loss_sum / batch_vehicles as f64;
            if !batch_loss.is_finite() {
                write_file(&run_path, &run_lines)?;
                return Err(TrainError::Diverged {
                    batch: global_batch,
                });
            }
            store.scale_grads(1.0 / batch_vehicles as f64);
            store.adam_step(&adam)?;
            epoch_loss_sum += batch_loss_sum;
            epoch_vehicles += batch_vehicles;
        }
        let train_loss = epoch_loss_sum / epoch_vehicles as f64;

        let eval = if !eval_set.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)
        {
            let model = VtModel {
                cfg: model_cfg.clone(),
                store: store.clone(),
            };
            let report = metrics::evaluate(&model, eval_set, rate_hz)?;
            if best_ade.map_or(true, |b| report.ade < b) {
                best_ade = Some(report.ade);
                Checkpoint::new(hash.clone(), model_cfg.clone(), store.clone())
                    .save(&best_path)?;
            }
            Some(report)
        } else {
            None
        };

        let record = EpochRecord {
            epoch,
            train_loss,
            wall_ms: started.elapsed().as_millis() as u64,
            eval,
        };
        run_lines.push_str(&serde_json::to_string(&record).expect("record serializes"));
        run_lines.push('\n');
        epochs.push(record);
    }

    Checkpoint::new(hash.clone(), model_cfg.clone(), store.clone()).save(&final_path)?;
    if best_ade.is_none() {
        // No evaluation ran; the final checkpoint doubles as best.
        Checkpoint::new(hash.clone(), model_cfg.clone(), store).save(&best_path)?;
    }
    write_file(&run_path, &run_lines)?;

    Ok(RunRecord {
        config_hash: hash,
        params_count,
        epochs,
        final_checkpoint: final_path.display().to_string(),
        best_checkpoint: best_path.display().to_string(),
        best_eval_ade: best_ade,
    })
}

/// Extrapolates each vehicle's mean observed per-step displacement.
pub struct ConstantVelocityBaseline;

impl Forecaster for ConstantVelocityBaseline {
    fn predict_scene(&self, scene: &SceneWindow) -> Result<Vec<PredictedTrajectory>, NumError> {
        scene
            .vehicles
            .iter()
            .map(|v| {
                let t_oh = v.observed.len();
                if t_oh < 2 {
                    return Err(NumError::Config(
                        "constant-velocity baseline needs at least 2 observed steps".into(),
                    ));
                }
                let first = v.observed[0];
                let last = v.last_observed();
                let steps = (t_oh - 1) as f64;
                let d = [(last[0] - first[0]) / steps, (last[1] - first[1]) / steps];
                Ok(PredictedTrajectory::from_deltas(
                    last,
                    vec![d; v.future.len()],
                ))
            })
            .collect()
    }
}

/// Repeats each vehicle's last observed position.
pub struct ConstantPositionBaseline;

impl Forecaster for ConstantPositionBaseline {
    fn predict_scene(&self, scene: &SceneWindow) -> Result<Vec<PredictedTrajectory>, NumError> {
        Ok(scene
            .vehicles
            .iter()
            .map(|v| {
                PredictedTrajectory::from_deltas(
                    v.last_observed(),
                    vec![[0.0, 0.0]; v.future.len()],
                )
            })
            .collect())
    }
}

/// Mean-displacement extrapolation for one scene (sanity baseline).
pub fn baseline_constant_velocity(
    scene: &SceneWindow,
) -> Result<Vec<PredictedTrajectory>, NumError> {
    ConstantVelocityBaseline.predict_scene(scene)
}

/// Result row of one horizon in a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub t_oh: usize,
    pub report: MetricsReport,
    pub params: usize,
}

/// LH / MH / SH naming for the standard horizons.
pub fn horizon_label(t_oh: usize) -> String {
    match t_oh {
        15 => "LH".into(),
        10 => "MH".into(),
        5 => "SH".into(),
        other => format!("OH{other}"),
    }
}

/// Train and evaluate once per observation horizon (given per-horizon
/// train/eval splits cut from the same tracks) with everything else fixed.
/// Horizons run longest first, matching the LH / MH / SH table layout.
pub fn horizon_sweep(
    sets: &[(usize, Vec<SceneWindow>, Vec<SceneWindow>)],
    base_model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Vec<SweepRow>, TrainError> {
    let mut order: Vec<usize> = (0..sets.len()).collect();
    order.sort_by(|&a, &b| sets[b].0.cmp(&sets[a].0));
    let mut rows = Vec::with_capacity(sets.len());
    for idx in order {
        let (t_oh, train_set, eval_set) = &sets[idx];
        let model_cfg = ModelConfig {
            t_oh: *t_oh,
            ..base_model.clone()
        };
        let label = horizon_label(*t_oh);
        let run_dir = out_dir.join(format!("sweep_{label}"));
        let record = train(train_set, eval_set, &model_cfg, cfg, &run_dir)?;
        let report = record
            .final_eval()
            .cloned()
            .ok_or_else(|| MetricsError::EmptyDataset)?;
        rows.push(SweepRow {
            label,
            t_oh: *t_oh,
            report,
            params: record.params_count,
        });
    }
    Ok(rows)
}

/// Sweep table CSV in the standard comparison layout:
/// model, ADE, FDE, RMSE at each horizon mark, parameter count.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    if rows.is_empty() {
        return String::new();
    }
    let first = &rows[0].report;
    let labels = metrics::mark_labels(
        &first.rmse_at.iter().map(|m| m.step).collect::<Vec<_>>(),
        first.rate_hz,
    );
    let mut out = String::from("model,ade,fde");
    for label in &labels {
        out.push_str(&format!(",rmse_{label}"));
    }
    out.push_str(",params\n");
    for row in rows {
        out.push_str(&format!("{},{},{}", row.label, row.report.ade, row.report.fde));
        for mark in &row.report.rmse_at {
            out.push_str(&format!(",{}", mark.value));
        }
        out.push_str(&format!(",{}\n", row.params));
    }
    out
}
