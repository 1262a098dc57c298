//! Synthetic multi-group longitudinal data with bump-shaped time-varying
//! effects and a smooth low-rank baseline.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::config::{AlphaSource, SimulationSpec, SubjectNoise, VisitSource};
use crate::data::{LongitudinalDataset, Subject};
use crate::error::{Error, Result};
use crate::ltf;
use crate::model::{eval_alpha, eval_beta, ModelState, Target};
use crate::rng::{block, cell_key, normal, Streams};
use crate::tensor::DenseTensor;

/// Irregular visit schedules in months, shaped like a typical cohort study:
/// one to five visits, baseline first.
pub const VISIT_SCHEDULES: &[&[f64]] = &[
    &[0.0],
    &[0.0, 6.0],
    &[0.0, 12.0],
    &[0.0, 6.0, 12.0],
    &[0.0, 12.0, 24.0],
    &[0.0, 6.0, 24.0],
    &[0.0, 6.0, 12.0, 24.0],
    &[0.0, 12.0, 24.0, 36.0],
    &[0.0, 6.0, 12.0, 36.0],
    &[0.0, 6.0, 12.0, 24.0, 36.0],
    &[0.0, 3.0, 6.0, 12.0, 24.0],
    &[0.0, 24.0],
    &[0.0, 12.0, 36.0],
    &[0.0, 6.0, 18.0, 30.0],
];

pub const SCHEDULE_SPAN: f64 = 36.0;

/// Number of active bumps for zero-based group `h_g`.
pub fn active_bumps(h_g: usize) -> usize {
    (2 * (h_g + 1)).min(6)
}

/// Closed-form population `β` at zero-based voxel `h` (grid coordinates are
/// `h + 1`) for zero-based group `h_g`.
pub fn true_beta(spec: &SimulationSpec, h_g: usize, h: [usize; 3], t: f64) -> f64 {
    let mut v = 0.0;
    for l in 0..active_bumps(h_g) {
        let mut e = 0.0;
        for m in 0..3 {
            let x = (h[m] + 1) as f64 - spec.grid[m] as f64 * spec.centers[m][l];
            e += x * x / spec.bump_scale;
        }
        v += (-e).exp();
    }
    spec.time_factor * t * t * v
}

pub fn true_beta_surface(spec: &SimulationSpec, h_g: usize, t: f64) -> DenseTensor {
    DenseTensor::from_fn(&spec.grid, |i| true_beta(spec, h_g, [i[0], i[1], i[2]], t))
}

fn smooth_profiles(d: usize) -> [Vec<f64>; 3] {
    let x = |h: usize| (h as f64 + 0.5) / d as f64;
    [
        (0..d).map(|h| 1.0 + 0.3 * (std::f64::consts::PI * x(h)).sin()).collect(),
        (0..d).map(|h| (std::f64::consts::PI * x(h)).cos()).collect(),
        (0..d).map(|h| (-(x(h) - 0.5).powi(2) / 0.05).exp()).collect(),
    ]
}

/// Group weights of the three baseline components.
fn baseline_weights(h_g: usize) -> [f64; 3] {
    [2.0 - 0.1 * h_g as f64, 0.5 + 0.1 * h_g as f64, 0.3 - 0.05 * h_g as f64]
}

fn synthetic_alpha(grid: [usize; 3], w: [f64; 3], scale: f64) -> DenseTensor {
    let p: Vec<[Vec<f64>; 3]> = grid.iter().map(|&d| smooth_profiles(d)).collect();
    DenseTensor::from_fn(&grid, |i| {
        (0..3).map(|c| w[c] * p[0][c][i[0]] * p[1][c][i[1]] * p[2][c][i[2]]).sum::<f64>() * scale
    })
}

/// Ground truth kept alongside a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub spec: SimulationSpec,
    /// Group-level baselines.
    pub alpha: Vec<DenseTensor>,
}

impl Truth {
    pub fn beta(&self, h_g: usize, t: f64) -> DenseTensor {
        true_beta_surface(&self.spec, h_g, t)
    }
}

fn group_alpha(spec: &SimulationSpec) -> Result<Vec<DenseTensor>> {
    match &spec.alpha {
        AlphaSource::Synthetic { scale, .. } => {
            Ok((0..spec.groups).map(|g| synthetic_alpha(spec.grid, baseline_weights(g), *scale)).collect())
        }
        AlphaSource::Files { dir } => (0..spec.groups)
            .map(|g| {
                let t = ltf::read_tensor(Path::new(dir).join(format!("alpha_{}.ltf", g + 1)))?;
                if t.dims() != spec.grid {
                    return Err(Error::Dims(format!("baseline for group {} has dims {:?}", g + 1, t.dims())));
                }
                Ok(t)
            })
            .collect(),
    }
}

fn visit_times(spec: &SimulationSpec, rng: &mut impl Rng) -> Vec<f64> {
    match spec.visits {
        VisitSource::Schedule => {
            VISIT_SCHEDULES.choose(rng).expect("non-empty fixture").iter().map(|m| m / SCHEDULE_SPAN).collect()
        }
        VisitSource::Uniform { visits } => {
            let mut t: Vec<f64> = std::iter::once(0.0).chain((1..visits).map(|_| rng.random::<f64>())).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            t
        }
    }
}

/// Simulated dataset and its ground truth. Subject `i` uses its own random
/// stream, so results do not depend on generation order.
pub fn generate_dataset(spec: &SimulationSpec) -> Result<(LongitudinalDataset, Truth)> {
    spec.validate()?;
    let alpha = group_alpha(spec)?;
    let streams = Streams::new(spec.seed);
    let grid = spec.grid;
    let p: Vec<[Vec<f64>; 3]> = grid.iter().map(|&d| smooth_profiles(d)).collect();
    let mut subjects = Vec::new();
    for g in 0..spec.groups {
        for k in 0..spec.subjects_per_group {
            let i = g * spec.subjects_per_group + k;
            let mut rng = streams.rng(0, block::DATA, cell_key(&[i]));
            let times = visit_times(spec, &mut rng);
            let mut base = alpha[g].clone();
            if let AlphaSource::Synthetic { scale, subject_sd } = spec.alpha {
                for c in 0..3 {
                    let z = subject_sd * normal(&mut rng) * scale;
                    let dev = DenseTensor::from_fn(&grid, |x| p[0][c][x[0]] * p[1][c][x[1]] * p[2][c][x[2]]);
                    base.axpy(z, &dev);
                }
            }
            let offset = match spec.subject_noise {
                SubjectNoise::Constant => DenseTensor::filled(&grid, spec.subject_sd * normal(&mut rng)),
                SubjectNoise::PerVoxel => DenseTensor::from_fn(&grid, |_| spec.subject_sd * normal(&mut rng)),
            };
            let observations = times
                .iter()
                .map(|&t| {
                    let mut y = base.clone();
                    y.add_assign(&true_beta_surface(spec, g, t));
                    y.add_assign(&offset);
                    for v in y.values_mut() {
                        *v += spec.noise_sd * normal(&mut rng);
                    }
                    y
                })
                .collect();
            subjects.push(Subject { id: format!("S{:04}", i + 1), group: g, times, observations });
        }
    }
    let ds = LongitudinalDataset { grid, n_groups: spec.groups, subjects, mask: None };
    ds.validate()?;
    Ok((ds, Truth { spec: spec.clone(), alpha }))
}

/// Observations drawn from the model itself: `y_ij = α_i + β_i(t_ij) + ε`
/// with `ε ~ N(0, σ_ε²)` per voxel, using the subject cores of `state`.
/// `times[i]` lists the visit times of subject `i`.
pub fn simulate_from_state(state: &ModelState, times: &[Vec<f64>], streams: &Streams) -> Result<LongitudinalDataset> {
    if times.len() != state.n_subjects() {
        return Err(Error::Dims(format!("{} visit lists for {} subjects", times.len(), state.n_subjects())));
    }
    let sd = state.sigma2.sqrt();
    let mut subjects = Vec::with_capacity(times.len());
    for (i, ts) in times.iter().enumerate() {
        let g = state.groups[i];
        let mut rng = streams.rng(0, block::DATA, cell_key(&[i]));
        let base = eval_alpha(state, Target::Subject(i), g)?;
        let observations = ts
            .iter()
            .map(|&t| {
                let mut y = base.clone();
                y.add_assign(&eval_beta(state, Target::Subject(i), g, t)?);
                for v in y.values_mut() {
                    *v += sd * normal(&mut rng);
                }
                Ok(y)
            })
            .collect::<Result<Vec<_>>>()?;
        subjects.push(Subject { id: format!("S{:04}", i + 1), group: g, times: ts.clone(), observations });
    }
    let ds = LongitudinalDataset { grid: state.grid(), n_groups: state.n_groups(), subjects, mask: None };
    ds.validate()?;
    Ok(ds)
}

pub const TRUTH_FILE: &str = "truth.toml";

/// Stores the generating spec so the closed-form truth can be rebuilt.
pub fn save_truth(truth: &Truth, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = toml::to_string_pretty(&truth.spec).expect("spec serializes");
    let path = dir.join(TRUTH_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for (g, a) in truth.alpha.iter().enumerate() {
        ltf::write_tensor(dir.join(format!("alpha_{}.ltf", g + 1)), a)?;
    }
    Ok(())
}

pub fn load_truth(dir: impl AsRef<Path>) -> Result<Truth> {
    let dir = dir.as_ref();
    let path = dir.join(TRUTH_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let spec: SimulationSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let alpha = (0..spec.groups)
        .map(|g| ltf::read_tensor(dir.join(format!("alpha_{}.ltf", g + 1))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Truth { spec, alpha })
}
