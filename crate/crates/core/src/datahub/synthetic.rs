use super::tracks::{DataError, Unit};
use super::window::{SceneVehicle, SceneWindow};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Kinematic templates for generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ConstantVelocity,
    ConstantAcceleration,
    LaneChange,
    Curve,
    CarFollowing,
}

impl std::str::FromStr for Scenario {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant_velocity" => Ok(Scenario::ConstantVelocity),
            "constant_acceleration" => Ok(Scenario::ConstantAcceleration),
            "lane_change" => Ok(Scenario::LaneChange),
            "curve" => Ok(Scenario::Curve),
            "car_following" => Ok(Scenario::CarFollowing),
            other => Err(DataError::Config(format!("unknown scenario '{other}'"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Scenario::ConstantVelocity => "constant_velocity",
            Scenario::ConstantAcceleration => "constant_acceleration",
            Scenario::LaneChange => "lane_change",
            Scenario::Curve => "curve",
            Scenario::CarFollowing => "car_following",
        };
        write!(f, "{name}")
    }
}

/// Parameters for the synthetic generator. Ranges collapse to a point when
/// both ends coincide, which pins a quantity exactly (useful in tests).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub scenario: Scenario,
    pub n_scenes: usize,
    pub vehicles_per_scene: usize,
    pub rate_hz: u32,
    pub seed: u64,
    /// Std of zero-mean Gaussian noise added to every coordinate (meters).
    pub noise_std: f64,
    pub t_oh: usize,
    pub t_ph: usize,
    /// Longitudinal speed draw, m/s along +x.
    pub speed_range: (f64, f64),
    /// Longitudinal acceleration draw, m/s^2 (constant_acceleration only).
    pub accel_range: (f64, f64),
    /// Longitudinal start position draw, m.
    pub start_x_range: (f64, f64),
}

impl SyntheticSpec {
    pub fn new(scenario: Scenario, n_scenes: usize, vehicles_per_scene: usize, seed: u64) -> Self {
        SyntheticSpec {
            scenario,
            n_scenes,
            vehicles_per_scene,
            rate_hz: 5,
            seed,
            noise_std: 0.0,
            t_oh: 15,
            t_ph: 25,
            speed_range: (6.0, 8.0),
            accel_range: (0.2, 0.6),
            start_x_range: (0.0, 20.0),
        }
    }
}

const LANE_WIDTH: f64 = 3.5;

/// Snap to a 1/1024 m grid so starting points are exactly representable;
/// noise-free constant-velocity tracks then have bit-exact step differences.
fn snap(v: f64) -> f64 {
    (v * 1024.0).round() / 1024.0
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Generate kinematically consistent multi-vehicle scene windows.
///
/// Every vehicle is present for the full `t_oh + t_ph` span, so each scene
/// is exactly one window. The same seed always produces the same dataset.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SceneWindow>, DataError> {
    if spec.n_scenes == 0 {
        return Err(DataError::Config("n_scenes must be at least 1".into()));
    }
    if spec.vehicles_per_scene == 0 {
        return Err(DataError::Config("vehicles_per_scene must be at least 1".into()));
    }
    if spec.rate_hz == 0 {
        return Err(DataError::Config("rate_hz must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let steps = spec.t_oh + spec.t_ph;
    let dt = 1.0 / spec.rate_hz as f64;
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| DataError::Config(e.to_string()))?)
    } else {
        None
    };

    let mut windows = Vec::with_capacity(spec.n_scenes);
    for scene_id in 0..spec.n_scenes as u64 {
        let mut vehicles = Vec::with_capacity(spec.vehicles_per_scene);
        // Car-following chains vehicles behind one another; other scenarios
        // place each vehicle independently.
        let mut follow_x = 0.0;
        let mut follow_speed = 0.0;
        let mut follow_lane_y = 0.0;
        for j in 0..spec.vehicles_per_scene {
            let coords: Vec<[f64; 2]> = match spec.scenario {
                Scenario::ConstantVelocity => {
                    let x0 = snap(draw(&mut rng, spec.start_x_range) + j as f64 * 14.0);
                    let y0 = snap(LANE_WIDTH * (j % 4) as f64 + draw(&mut rng, (-0.25, 0.25)));
                    let speed = draw(&mut rng, spec.speed_range);
                    let step = speed * dt;
                    let mut x = x0;
                    (0..steps)
                        .map(|k| {
                            let p = [x, y0];
                            if k + 1 < steps {
                                x += step;
                            }
                            p
                        })
                        .collect()
                }
                Scenario::ConstantAcceleration => {
                    let x0 = snap(draw(&mut rng, spec.start_x_range) + j as f64 * 14.0);
                    let y0 = snap(LANE_WIDTH * (j % 4) as f64 + draw(&mut rng, (-0.25, 0.25)));
                    let v0 = draw(&mut rng, spec.speed_range);
                    let a = draw(&mut rng, spec.accel_range);
                    (0..steps)
                        .map(|k| {
                            let t = k as f64 / spec.rate_hz as f64;
                            [x0 + v0 * t + 0.5 * a * t * t, y0]
                        })
                        .collect()
                }
                Scenario::LaneChange => {
                    let x0 = snap(draw(&mut rng, spec.start_x_range) + j as f64 * 14.0);
                    let y0 = snap(LANE_WIDTH * (j % 3) as f64);
                    let speed = draw(&mut rng, spec.speed_range);
                    let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    let t_mid = 0.5 * steps as f64 * dt;
                    let rate = 1.5; // logistic steepness, 1/s
                    (0..steps)
                        .map(|k| {
                            let t = k as f64 * dt;
                            let lateral = LANE_WIDTH / (1.0 + (-rate * (t - t_mid)).exp());
                            [x0 + speed * t, y0 + dir * lateral]
                        })
                        .collect()
                }
                Scenario::Curve => {
                    let cx = snap(draw(&mut rng, spec.start_x_range));
                    let cy = snap(LANE_WIDTH * (j % 4) as f64);
                    let radius = draw(&mut rng, (80.0, 120.0));
                    let speed = draw(&mut rng, spec.speed_range);
                    let theta0 = draw(&mut rng, (0.0, 0.3));
                    let omega = speed / radius;
                    (0..steps)
                        .map(|k| {
                            let theta = theta0 + omega * (k as f64 * dt);
                            [cx + radius * theta.cos(), cy + radius * theta.sin()]
                        })
                        .collect()
                }
                Scenario::CarFollowing => {
                    if j == 0 {
                        follow_x = snap(draw(&mut rng, spec.start_x_range) + 40.0);
                        follow_speed = draw(&mut rng, spec.speed_range);
                        follow_lane_y = snap(LANE_WIDTH * (scene_id % 3) as f64);
                    } else {
                        let gap = draw(&mut rng, (8.0, 15.0));
                        follow_x -= gap;
                    }
                    let step = follow_speed * dt;
                    let mut x = follow_x;
                    (0..steps)
                        .map(|k| {
                            let p = [x, follow_lane_y];
                            if k + 1 < steps {
                                x += step;
                            }
                            p
                        })
                        .collect()
                }
            };
            let coords = match &noise {
                None => coords,
                Some(n) => coords
                    .iter()
                    .map(|p| [p[0] + n.sample(&mut rng), p[1] + n.sample(&mut rng)])
                    .collect(),
            };
            vehicles.push(SceneVehicle {
                vehicle_id: j as u64,
                observed: coords[..spec.t_oh].to_vec(),
                future: coords[spec.t_oh..].to_vec(),
            });
        }
        windows.push(SceneWindow {
            scene_id,
            t0: 0,
            unit: Unit::Meters,
            rate_hz: spec.rate_hz,
            vehicles,
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_velocity_steps_are_exact() {
        let mut spec = SyntheticSpec::new(Scenario::ConstantVelocity, 2, 2, 9);
        spec.speed_range = (30.0, 30.0); // v = (30, 0) m/s at 5 Hz -> 6 m steps
        let windows = generate_synthetic(&spec).unwrap();
        for w in &windows {
            for v in &w.vehicles {
                let pts: Vec<[f64; 2]> =
                    v.observed.iter().chain(&v.future).copied().collect();
                for pair in pts.windows(2) {
                    assert_eq!(pair[1][0] - pair[0][0], 6.0);
                    assert_eq!(pair[1][1] - pair[0][1], 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_acceleration_matches_closed_form() {
        let mut spec = SyntheticSpec::new(Scenario::ConstantAcceleration, 1, 1, 3);
        spec.speed_range = (0.0, 0.0);
        spec.accel_range = (1.0, 1.0);
        spec.start_x_range = (0.0, 0.0);
        let windows = generate_synthetic(&spec).unwrap();
        let v = &windows[0].vehicles[0];
        for (k, p) in v.observed.iter().chain(&v.future).enumerate() {
            let t = k as f64 / 5.0;
            assert_eq!(p[0], 0.5 * t * t);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticSpec::new(Scenario::LaneChange, 4, 3, 77);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn car_following_keeps_positive_gaps() {
        let spec = SyntheticSpec::new(Scenario::CarFollowing, 3, 4, 5);
        let windows = generate_synthetic(&spec).unwrap();
        for w in &windows {
            for pair in w.vehicles.windows(2) {
                let lead: Vec<[f64; 2]> =
                    pair[0].observed.iter().chain(&pair[0].future).copied().collect();
                let follow: Vec<[f64; 2]> =
                    pair[1].observed.iter().chain(&pair[1].future).copied().collect();
                for (l, f) in lead.iter().zip(&follow) {
                    assert!(l[0] - f[0] > 0.0, "gap closed: {} vs {}", l[0], f[0]);
                }
            }
        }
    }

    #[test]
    fn scenes_have_full_windows() {
        let spec = SyntheticSpec::new(Scenario::Curve, 2, 3, 1);
        let windows = generate_synthetic(&spec).unwrap();
        assert_eq!(windows.len(), 2);
        for w in &windows {
            w.validate(15, 25).unwrap();
            assert_eq!(w.n_vehicles(), 3);
        }
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let mut spec = SyntheticSpec::new(Scenario::ConstantVelocity, 2, 2, 11);
        spec.noise_std = 0.1;
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }
}
