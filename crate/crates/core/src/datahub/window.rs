use super::tracks::{DataError, Recording, SourceFormat, TrackTable, Unit};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// End-to-end dataset preparation parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub source_format: SourceFormat,
    pub native_rate_hz: u32,
    pub target_rate_hz: u32,
    /// Observed steps fed to the model.
    pub t_oh: usize,
    /// Future steps the model must predict.
    pub t_ph: usize,
    /// Steps between successive window starts.
    pub stride: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.target_rate_hz == 0 || self.native_rate_hz % self.target_rate_hz != 0 {
            return Err(DataError::Config(format!(
                "native rate {} Hz not divisible by target rate {} Hz",
                self.native_rate_hz, self.target_rate_hz
            )));
        }
        if self.t_oh == 0 || self.t_ph == 0 {
            return Err(DataError::Config("t_oh and t_ph must be positive".into()));
        }
        if self.stride == 0 {
            return Err(DataError::Config("stride must be positive".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(DataError::Config(format!(
                "split fraction {} not in (0, 1)",
                self.split_fraction
            )));
        }
        Ok(())
    }

    /// True when the horizons match the canonical experimental setup
    /// (t_oh in {5, 10, 15}, t_ph = 25). Other values are allowed but get
    /// flagged as non-canonical in prepare manifests.
    pub fn is_canonical_horizon(&self) -> bool {
        matches!(self.t_oh, 5 | 10 | 15) && self.t_ph == 25
    }

    pub fn downsample_stride(&self) -> u32 {
        self.native_rate_hz / self.target_rate_hz
    }
}

/// One vehicle inside a scene window: exactly `t_oh` observed and `t_ph`
/// future positions at consecutive down-sampled frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneVehicle {
    pub vehicle_id: u64,
    pub observed: Vec<[f64; 2]>,
    pub future: Vec<[f64; 2]>,
}

impl SceneVehicle {
    pub fn last_observed(&self) -> [f64; 2] {
        *self.observed.last().expect("observed window is non-empty")
    }
}

/// One temporal sample: all vehicles co-present for the full
/// observation + prediction span, sharing a frame range starting at `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneWindow {
    pub scene_id: u64,
    pub t0: i64,
    pub unit: Unit,
    pub rate_hz: u32,
    pub vehicles: Vec<SceneVehicle>,
}

impl SceneWindow {
    pub fn validate(&self, t_oh: usize, t_ph: usize) -> Result<(), DataError> {
        if self.vehicles.is_empty() {
            return Err(DataError::Invalid(format!(
                "scene {} has no vehicles",
                self.scene_id
            )));
        }
        for v in &self.vehicles {
            if v.observed.len() != t_oh || v.future.len() != t_ph {
                return Err(DataError::Invalid(format!(
                    "scene {} vehicle {}: got {}+{} points, want {}+{}",
                    self.scene_id,
                    v.vehicle_id,
                    v.observed.len(),
                    v.future.len(),
                    t_oh,
                    t_ph
                )));
            }
        }
        Ok(())
    }

    pub fn n_vehicles(&self) -> usize {
        self.vehicles.len()
    }
}

/// Serialized dataset: windows plus the horizons they were cut with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub unit: Unit,
    pub rate_hz: u32,
    pub t_oh: usize,
    pub t_ph: usize,
    pub windows: Vec<SceneWindow>,
}

impl DatasetFile {
    pub fn new(unit: Unit, rate_hz: u32, t_oh: usize, t_ph: usize, windows: Vec<SceneWindow>) -> Self {
        DatasetFile {
            schema_version: DATASET_SCHEMA_VERSION,
            unit,
            rate_hz,
            t_oh,
            t_ph,
            windows,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| DataError::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let file: DatasetFile =
            serde_json::from_str(&text).map_err(|e| DataError::Format(e.to_string()))?;
        if file.schema_version != DATASET_SCHEMA_VERSION {
            return Err(DataError::Format(format!(
                "dataset schema {} unsupported (want {})",
                file.schema_version, DATASET_SCHEMA_VERSION
            )));
        }
        for w in &file.windows {
            w.validate(file.t_oh, file.t_ph)?;
        }
        Ok(file)
    }
}

/// Which windows went to which side of the split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub fraction: f64,
    pub train_scene_ids: Vec<u64>,
    pub eval_scene_ids: Vec<u64>,
}

/// Keep every `(native/target)`-th frame per vehicle, starting from that
/// vehicle's first frame; kept frames are renumbered on the coarser grid
/// (`frame / stride`), which advances by exactly 1 per kept frame.
pub fn downsample(
    table: &TrackTable,
    native_rate_hz: u32,
    target_rate_hz: u32,
) -> Result<TrackTable, DataError> {
    if target_rate_hz == 0 || native_rate_hz % target_rate_hz != 0 {
        return Err(DataError::Config(format!(
            "native rate {native_rate_hz} Hz not divisible by target rate {target_rate_hz} Hz"
        )));
    }
    let stride = (native_rate_hz / target_rate_hz) as i64;
    let mut out = Vec::with_capacity(table.recordings.len());
    for rec in &table.recordings {
        let mut first_frame: BTreeMap<u64, i64> = BTreeMap::new();
        for p in &rec.points {
            first_frame.entry(p.vehicle_id).or_insert(p.frame);
        }
        let points = rec
            .points
            .iter()
            .filter(|p| (p.frame - first_frame[&p.vehicle_id]).rem_euclid(stride) == 0)
            .map(|p| {
                let mut q = *p;
                q.frame = p.frame.div_euclid(stride);
                q
            })
            .collect();
        out.push(Recording {
            id: rec.id,
            points,
        });
    }
    Ok(TrackTable {
        unit: table.unit,
        recordings: out,
    })
}

/// Slide a `(t_oh + t_ph)`-step window with the configured stride over every
/// recording. A vehicle joins a window only when present at all steps;
/// windows with no qualifying vehicle are dropped. Output order is
/// deterministic: by recording, then by window start frame.
pub fn window_scenes(
    table: &TrackTable,
    cfg: &DatasetConfig,
    rate_hz: u32,
) -> Result<Vec<SceneWindow>, DataError> {
    cfg.validate()?;
    let span = (cfg.t_oh + cfg.t_ph) as i64;
    let mut windows = Vec::new();
    let mut scene_id = 0u64;
    for rec in &table.recordings {
        if rec.points.is_empty() {
            continue;
        }
        // frame -> position per vehicle
        let mut per_vehicle: BTreeMap<u64, BTreeMap<i64, [f64; 2]>> = BTreeMap::new();
        let mut min_frame = i64::MAX;
        let mut max_frame = i64::MIN;
        for p in &rec.points {
            per_vehicle
                .entry(p.vehicle_id)
                .or_default()
                .insert(p.frame, [p.x, p.y]);
            min_frame = min_frame.min(p.frame);
            max_frame = max_frame.max(p.frame);
        }
        let mut t0 = min_frame;
        while t0 + span - 1 <= max_frame {
            let mut vehicles = Vec::new();
            for (&vid, frames) in &per_vehicle {
                let full: Option<Vec<[f64; 2]>> =
                    (t0..t0 + span).map(|f| frames.get(&f).copied()).collect();
                if let Some(coords) = full {
                    vehicles.push(SceneVehicle {
                        vehicle_id: vid,
                        observed: coords[..cfg.t_oh].to_vec(),
                        future: coords[cfg.t_oh..].to_vec(),
                    });
                }
            }
            if !vehicles.is_empty() {
                windows.push(SceneWindow {
                    scene_id,
                    t0,
                    unit: table.unit,
                    rate_hz,
                    vehicles,
                });
                scene_id += 1;
            }
            t0 += cfg.stride as i64;
        }
    }
    Ok(windows)
}

/// Deterministic seeded shuffle, then a whole-window split: the train side
/// receives `ceil(n * fraction)` windows so small datasets never end up with
/// an empty train set.
pub fn split(
    windows: &[SceneWindow],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SceneWindow>, Vec<SceneWindow>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Config(format!(
            "split fraction {fraction} not in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((windows.len() as f64) * fraction).ceil() as usize;
    let train = order[..n_train]
        .iter()
        .map(|&i| windows[i].clone())
        .collect();
    let eval = order[n_train..]
        .iter()
        .map(|&i| windows[i].clone())
        .collect();
    Ok((train, eval))
}

/// Flatten scene windows back into a track table (frames re-anchored at each
/// window's `t0`), e.g. for canonical CSV export of generated data.
pub fn windows_to_tracks(windows: &[SceneWindow], unit: Unit) -> TrackTable {
    let recordings = windows
        .iter()
        .map(|w| {
            let mut points = Vec::new();
            for v in &w.vehicles {
                for (k, p) in v.observed.iter().chain(&v.future).enumerate() {
                    points.push(super::tracks::TrackPoint {
                        vehicle_id: v.vehicle_id,
                        frame: w.t0 + k as i64,
                        x: p[0],
                        y: p[1],
                    });
                }
            }
            points.sort_by_key(|p| (p.vehicle_id, p.frame));
            Recording {
                id: w.scene_id,
                points,
            }
        })
        .collect();
    TrackTable { unit, recordings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::tracks::TrackPoint;

    fn cfg(t_oh: usize, t_ph: usize, stride: usize) -> DatasetConfig {
        DatasetConfig {
            source_format: SourceFormat::Canonical,
            native_rate_hz: 5,
            target_rate_hz: 5,
            t_oh,
            t_ph,
            stride,
            split_fraction: 0.8,
            seed: 0,
        }
    }

    fn line_track(vehicle_id: u64, frames: std::ops::Range<i64>) -> Vec<TrackPoint> {
        frames
            .map(|f| TrackPoint {
                vehicle_id,
                frame: f,
                x: f as f64,
                y: 0.0,
            })
            .collect()
    }

    fn table_of(points: Vec<TrackPoint>) -> TrackTable {
        TrackTable {
            unit: Unit::Meters,
            recordings: vec![Recording { id: 0, points }],
        }
    }

    #[test]
    fn downsample_10_to_5_keeps_even_frames() {
        let table = table_of(line_track(1, 0..10));
        let out = downsample(&table, 10, 5).unwrap();
        let frames: Vec<i64> = out.recordings[0].points.iter().map(|p| p.frame).collect();
        assert_eq!(frames, vec![0, 1, 2, 3, 4]);
        let xs: Vec<f64> = out.recordings[0].points.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn downsample_60_to_5_keeps_every_12th() {
        let table = table_of(line_track(1, 0..60));
        let out = downsample(&table, 60, 5).unwrap();
        let xs: Vec<f64> = out.recordings[0].points.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 12.0, 24.0, 36.0, 48.0]);
    }

    #[test]
    fn downsample_identity_when_rates_match() {
        let table = table_of(line_track(1, 0..7));
        let out = downsample(&table, 5, 5).unwrap();
        assert_eq!(out, table);
    }

    #[test]
    fn downsample_rejects_non_divisible() {
        let table = table_of(vec![]);
        assert!(downsample(&table, 10, 3).is_err());
    }

    #[test]
    fn exact_fit_produces_one_window() {
        let table = table_of(line_track(1, 0..40));
        let windows = window_scenes(&table, &cfg(15, 25, 40), 5).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].n_vehicles(), 1);
        assert_eq!(windows[0].vehicles[0].observed.len(), 15);
        assert_eq!(windows[0].vehicles[0].future.len(), 25);
    }

    #[test]
    fn one_step_short_produces_no_window() {
        let table = table_of(line_track(1, 0..39));
        let windows = window_scenes(&table, &cfg(15, 25, 40), 5).unwrap();
        assert!(windows.is_empty());
    }

    #[test]
    fn overlapping_vehicles_share_a_window() {
        let mut pts = line_track(1, 0..40);
        pts.extend(line_track(2, 0..40));
        let windows = window_scenes(&table_of(pts), &cfg(15, 25, 40), 5).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].n_vehicles(), 2);
    }

    #[test]
    fn partially_present_vehicle_is_excluded() {
        let mut pts = line_track(1, 0..40);
        pts.extend(line_track(2, 5..40)); // misses the first 5 steps
        let windows = window_scenes(&table_of(pts), &cfg(15, 25, 40), 5).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].n_vehicles(), 1);
        assert_eq!(windows[0].vehicles[0].vehicle_id, 1);
    }

    #[test]
    fn split_80_20() {
        let table = table_of(line_track(1, 0..(40 * 10)));
        let windows = window_scenes(&table, &cfg(15, 25, 40), 5).unwrap();
        assert_eq!(windows.len(), 10);
        let (train, eval) = split(&windows, 0.8, 7).unwrap();
        assert_eq!((train.len(), eval.len()), (8, 2));
        // No window on both sides.
        for t in &train {
            assert!(eval.iter().all(|e| e.scene_id != t.scene_id));
        }
    }

    #[test]
    fn split_is_deterministic() {
        let table = table_of(line_track(1, 0..(40 * 5)));
        let windows = window_scenes(&table, &cfg(15, 25, 40), 5).unwrap();
        let a = split(&windows, 0.5, 123).unwrap();
        let b = split(&windows, 0.5, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_ceil_goes_to_train() {
        let table = table_of(line_track(1, 0..40));
        let windows = window_scenes(&table, &cfg(15, 25, 40), 5).unwrap();
        let (train, eval) = split(&windows, 0.5, 0).unwrap();
        assert_eq!((train.len(), eval.len()), (1, 0));
    }
}
