//! Displacement-error metrics over an evaluation set: average displacement
//! error, final displacement error, and RMSE at fixed horizon marks.
//! Accumulation is vehicle-weighted across the whole set and runs in a
//! fixed order, so reports are deterministic regardless of thread count.

use crate::datahub::{SceneWindow, Unit};
use crate::numkit::NumError;
use crate::par;
use crate::predictor::PredictedTrajectory;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("metrics: {0}")]
    Shape(String),
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error("rmse step {step} out of range 1..={t_ph}")]
    StepOutOfRange { step: usize, t_ph: usize },
}

/// Anything that can forecast every vehicle of a scene window.
pub trait Forecaster: Sync {
    fn predict_scene(&self, scene: &SceneWindow) -> Result<Vec<PredictedTrajectory>, NumError>;
}

/// RMSE at one horizon mark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseMark {
    pub seconds: f64,
    pub step: usize,
    pub value: f64,
}

/// Aggregate displacement errors over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ade: f64,
    pub fde: f64,
    pub rmse_at: Vec<RmseMark>,
    pub n_vehicles: usize,
    pub unit: Unit,
    pub rate_hz: u32,
}

fn check_shapes(
    pred: &[Vec<[f64; 2]>],
    gt: &[Vec<[f64; 2]>],
) -> Result<(usize, usize), MetricsError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricsError::Shape(format!(
            "{} predicted vehicles vs {} ground-truth",
            pred.len(),
            gt.len()
        )));
    }
    let t_ph = gt[0].len();
    if t_ph == 0 {
        return Err(MetricsError::Shape("empty horizon".into()));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != t_ph || g.len() != t_ph {
            return Err(MetricsError::Shape(format!(
                "ragged horizons: {} and {} (want {t_ph})",
                p.len(),
                g.len()
            )));
        }
    }
    Ok((pred.len(), t_ph))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt()
}

/// Mean Euclidean distance over all vehicles and all horizon steps.
pub fn ade(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>]) -> Result<f64, MetricsError> {
    let (n, t_ph) = check_shapes(pred, gt)?;
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for (pp, gp) in p.iter().zip(g) {
            sum += dist(*pp, *gp);
        }
    }
    Ok(sum / (n * t_ph) as f64)
}

/// Mean Euclidean distance at the final horizon step only.
pub fn fde(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>]) -> Result<f64, MetricsError> {
    let (n, t_ph) = check_shapes(pred, gt)?;
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sum += dist(p[t_ph - 1], g[t_ph - 1]);
    }
    Ok(sum / n as f64)
}

/// Root of the vehicle-mean squared displacement at `step` (1-based).
pub fn rmse_at(
    pred: &[Vec<[f64; 2]>],
    gt: &[Vec<[f64; 2]>],
    step: usize,
) -> Result<f64, MetricsError> {
    let (n, t_ph) = check_shapes(pred, gt)?;
    if step == 0 || step > t_ph {
        return Err(MetricsError::StepOutOfRange { step, t_ph });
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (dx, dy) = (p[step - 1][0] - g[step - 1][0], p[step - 1][1] - g[step - 1][1]);
        sum += dx * dx + dy * dy;
    }
    Ok((sum / n as f64).sqrt())
}

/// Horizon marks reported by evaluation: every 5th step up to `t_ph`
/// (steps 5, 10, 15, 20, 25 in the canonical 25-step horizon), which lands
/// on 1s..5s at 5 Hz and 0.5s..2.5s at 10 Hz. Shorter horizons fall back to
/// the final step alone.
pub fn horizon_steps(t_ph: usize) -> Vec<usize> {
    let marks: Vec<usize> = (1..=5).map(|i| 5 * i).filter(|s| *s <= t_ph).collect();
    if marks.is_empty() {
        vec![t_ph]
    } else {
        marks
    }
}

/// Human-readable second labels for a set of horizon steps. Integral marks
/// print bare ("1s"); once any mark is fractional every label keeps one
/// decimal ("0.5s", "1.0s", ...).
pub fn mark_labels(steps: &[usize], rate_hz: u32) -> Vec<String> {
    let secs: Vec<f64> = steps.iter().map(|&s| s as f64 / rate_hz as f64).collect();
    let all_integral = secs.iter().all(|s| s.fract() == 0.0);
    secs.iter()
        .map(|s| {
            if all_integral {
                format!("{}s", *s as u64)
            } else {
                format!("{s:.1}s")
            }
        })
        .collect()
}

struct ScenePartial {
    sum_dist: f64,
    sum_final: f64,
    sum_sq_at: Vec<f64>,
    n_vehicles: usize,
}

/// Evaluate a forecaster over scene windows: generation for every vehicle in
/// every window, one accumulation over the full set.
pub fn evaluate<F: Forecaster>(
    model: &F,
    windows: &[SceneWindow],
    rate_hz: u32,
) -> Result<MetricsReport, MetricsError> {
    if windows.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let unit = windows[0].unit;
    let t_ph = windows[0].vehicles[0].future.len();
    for w in windows {
        if w.rate_hz != rate_hz {
            return Err(MetricsError::Shape(format!(
                "window {} sampled at {} Hz, expected {rate_hz}",
                w.scene_id, w.rate_hz
            )));
        }
        if w.unit != unit {
            return Err(MetricsError::Shape("mixed units across windows".into()));
        }
    }
    let steps = horizon_steps(t_ph);

    let partials = par::map_ordered(windows, |w| -> Result<ScenePartial, MetricsError> {
        let preds = model.predict_scene(w)?;
        let pred: Vec<Vec<[f64; 2]>> = preds.into_iter().map(|p| p.positions).collect();
        let gt: Vec<Vec<[f64; 2]>> = w.vehicles.iter().map(|v| v.future.clone()).collect();
        let (n, t) = check_shapes(&pred, &gt)?;
        if t != t_ph {
            return Err(MetricsError::Shape(format!(
                "window {} horizon {t} differs from {t_ph}",
                w.scene_id
            )));
        }
        let mut part = ScenePartial {
            sum_dist: 0.0,
            sum_final: 0.0,
            sum_sq_at: vec![0.0; steps.len()],
            n_vehicles: n,
        };
        for (p, g) in pred.iter().zip(&gt) {
            for (pp, gp) in p.iter().zip(g) {
                part.sum_dist += dist(*pp, *gp);
            }
            part.sum_final += dist(p[t_ph - 1], g[t_ph - 1]);
            for (si, &s) in steps.iter().enumerate() {
                let (dx, dy) = (p[s - 1][0] - g[s - 1][0], p[s - 1][1] - g[s - 1][1]);
                part.sum_sq_at[si] += dx * dx + dy * dy;
            }
        }
        Ok(part)
    });

    let mut sum_dist = 0.0;
    let mut sum_final = 0.0;
    let mut sum_sq_at = vec![0.0; steps.len()];
    let mut n_vehicles = 0usize;
    for part in partials {
        let part = part?;
        sum_dist += part.sum_dist;
        sum_final += part.sum_final;
        for (acc, v) in sum_sq_at.iter_mut().zip(&part.sum_sq_at) {
            *acc += v;
        }
        n_vehicles += part.n_vehicles;
    }

    Ok(MetricsReport {
        ade: sum_dist / (n_vehicles * t_ph) as f64,
        fde: sum_final / n_vehicles as f64,
        rmse_at: steps
            .iter()
            .zip(&sum_sq_at)
            .map(|(&step, &sq)| RmseMark {
                seconds: step as f64 / rate_hz as f64,
                step,
                value: (sq / n_vehicles as f64).sqrt(),
            })
            .collect(),
        n_vehicles,
        unit,
        rate_hz,
    })
}

impl MetricsReport {
    /// One-row CSV form (for sweep tables and report files).
    pub fn to_csv(&self) -> String {
        let labels = mark_labels(
            &self.rmse_at.iter().map(|m| m.step).collect::<Vec<_>>(),
            self.rate_hz,
        );
        let mut header = String::from("ade,fde");
        let mut row = format!("{},{}", self.ade, self.fde);
        for (label, mark) in labels.iter().zip(&self.rmse_at) {
            header.push_str(&format!(",rmse_{label}"));
            row.push_str(&format!(",{}", mark.value));
        }
        header.push_str(",n_vehicles,unit,rate_hz\n");
        row.push_str(&format!(",{},{},{}\n", self.n_vehicles, self.unit, self.rate_hz));
        header + &row
    }
}
