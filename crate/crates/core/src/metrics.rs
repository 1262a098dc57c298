//! Posterior summaries: trajectory quantiles, arc length, cross-group
//! differences and MSE against a known truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RegionMask;
use crate::datagen::Truth;
use crate::error::{Error, Result};
use crate::sampler::PosteriorDraws;
use crate::tensor::DenseTensor;

/// Locations with `|β(·, 1)|` above this count as nonzero.
pub const NONZERO_TOLERANCE: f64 = 1e-6;

/// `ℓ/T` for `ℓ = 1..=T`.
pub fn metric_times(t_points: usize) -> Vec<f64> {
    (1..=t_points).map(|l| l as f64 / t_points as f64).collect()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Band {
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

pub fn band(values: &[f64]) -> Band {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Band {
        mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
        q05: quantile(&v, 0.05),
        q50: quantile(&v, 0.5),
        q95: quantile(&v, 0.95),
    }
}

fn masked_sum(t: &DenseTensor, region: Option<&[bool]>, f: impl Fn(f64) -> f64) -> (f64, usize) {
    match region {
        Some(m) => t.values().iter().zip(m).filter(|(_, &k)| k).fold((0.0, 0), |(s, n), (v, _)| (s + f(*v), n + 1)),
        None => (t.values().iter().map(|&v| f(v)).sum(), t.len()),
    }
}

/// Average of `|∂β/∂t|` over voxels and the times `ℓ/T`, for any surface
/// derivative.
pub fn arc_length_of(derivative: impl Fn(f64) -> Result<DenseTensor>, t_points: usize, region: Option<&[bool]>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for t in metric_times(t_points) {
        let (s, n) = masked_sum(&derivative(t)?, region, f64::abs);
        total += s;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Average squared gap between two group surfaces over voxels and `ℓ/T`.
pub fn cgd_of(
    first: impl Fn(f64) -> Result<DenseTensor>,
    second: impl Fn(f64) -> Result<DenseTensor>,
    t_points: usize,
    region: Option<&[bool]>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for t in metric_times(t_points) {
        let mut d = first(t)?;
        d.axpy(-1.0, &second(t)?);
        let (s, n) = masked_sum(&d, region, |v| v * v);
        total += s;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

fn check_group(draws: &PosteriorDraws, h_g: usize) -> Result<()> {
    if h_g >= draws.n_groups {
        return Err(Error::Lookup(format!("group {} outside 1..={}", h_g + 1, draws.n_groups)));
    }
    Ok(())
}

/// Posterior band of the arc length of group `h_g`.
pub fn arc_length(draws: &PosteriorDraws, h_g: usize, t_points: usize, region: Option<&[bool]>) -> Result<Band> {
    check_group(draws, h_g)?;
    let vals = draws
        .draws
        .par_iter()
        .map(|d| arc_length_of(|t| draws.beta_derivative(d, h_g, t), t_points, region))
        .collect::<Result<Vec<_>>>()?;
    Ok(band(&vals))
}

pub fn cgd(draws: &PosteriorDraws, g1: usize, g2: usize, t_points: usize, region: Option<&[bool]>) -> Result<Band> {
    check_group(draws, g1)?;
    check_group(draws, g2)?;
    let vals = draws
        .draws
        .par_iter()
        .map(|d| cgd_of(|t| draws.beta(d, g1, t), |t| draws.beta(d, g2, t), t_points, region))
        .collect::<Result<Vec<_>>>()?;
    Ok(band(&vals))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MseReport {
    pub nonzero: f64,
    pub zero: f64,
    pub n_nonzero: usize,
    pub n_zero: usize,
}

/// MSE of an estimated `β` against the truth over all groups, voxels and the
/// times `ℓ/T`, split by whether the true surface is nonzero at `t = 1`.
pub fn mse_report(estimate: impl Fn(usize, f64) -> Result<DenseTensor>, truth: &Truth, t_points: usize) -> Result<MseReport> {
    let (mut snz, mut sz, mut nnz, mut nz) = (0.0, 0.0, 0usize, 0usize);
    for g in 0..truth.spec.groups {
        let at_one = truth.beta(g, 1.0);
        for t in metric_times(t_points) {
            let est = estimate(g, t)?;
            let tr = truth.beta(g, t);
            for ((e, x), one) in est.values().iter().zip(tr.values()).zip(at_one.values()) {
                let sq = (e - x) * (e - x);
                if one.abs() > NONZERO_TOLERANCE {
                    snz += sq;
                    nnz += 1;
                } else {
                    sz += sq;
                    nz += 1;
                }
            }
        }
    }
    Ok(MseReport {
        nonzero: if nnz > 0 { snz / nnz as f64 } else { 0.0 },
        zero: if nz > 0 { sz / nz as f64 } else { 0.0 },
        n_nonzero: nnz,
        n_zero: nz,
    })
}

pub fn mse_from_draws(draws: &PosteriorDraws, truth: &Truth, t_points: usize) -> Result<MseReport> {
    if draws.is_empty() {
        return Err(Error::Data("chain has no retained draws".into()));
    }
    mse_report(|g, t| draws.beta_mean(g, t), truth, t_points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reducer {
    #[default]
    Median,
    Mean,
}

/// What `summarize` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummaryRequest {
    pub times: Vec<f64>,
    /// Region ids from the mask; empty means the whole volume.
    pub regions: Vec<i32>,
    pub quantiles: Vec<f64>,
    pub reducer: Reducer,
    /// One-based group pairs for cross-group differences.
    pub group_pairs: Vec<[usize; 2]>,
    pub t_points: usize,
}

impl Default for SummaryRequest {
    fn default() -> Self {
        Self {
            times: (0..20).map(|l| l as f64 / 19.0).collect(),
            regions: Vec::new(),
            quantiles: vec![0.05, 0.5, 0.95],
            reducer: Reducer::Median,
            group_pairs: Vec::new(),
            t_points: 20,
        }
    }
}

impl SummaryRequest {
    pub fn validate(&self) -> Result<()> {
        if self.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("summary times must lie in [0, 1]".into()));
        }
        if self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) || self.quantiles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("quantiles must be increasing and inside (0, 1)".into()));
        }
        if self.t_points == 0 {
            return Err(Error::Config("t_points must be positive".into()));
        }
        Ok(())
    }

    /// Column name of quantile `q`, e.g. `q05`.
    pub fn column(q: f64) -> String {
        let pct = q * 100.0;
        if (pct - pct.round()).abs() < 1e-9 {
            format!("q{:02}", pct.round() as i64)
        } else {
            format!("q{pct}")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub group: usize,
    pub region: String,
    pub time: f64,
    pub quantiles: Vec<f64>,
}

fn reduce(t: &DenseTensor, region: Option<&[bool]>, reducer: Reducer) -> f64 {
    let mut v: Vec<f64> = match region {
        Some(m) => t.values().iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| *x).collect(),
        None => t.values().to_vec(),
    };
    match reducer {
        Reducer::Mean => v.iter().sum::<f64>() / v.len().max(1) as f64,
        Reducer::Median => {
            v.sort_by(f64::total_cmp);
            quantile(&v, 0.5)
        }
    }
}

/// Regions to summarize: `(name, voxel selection)`.
pub fn regions(request: &SummaryRequest, mask: Option<&RegionMask>) -> Result<Vec<(String, Option<Vec<bool>>)>> {
    if request.regions.is_empty() {
        return Ok(vec![("whole".to_string(), None)]);
    }
    let mask = mask.ok_or_else(|| Error::Config("regions requested but no region mask given".into()))?;
    request
        .regions
        .iter()
        .map(|&id| Ok((mask.regions.get(&id).cloned().unwrap_or_else(|| id.to_string()), Some(mask.region(id)?))))
        .collect()
}

/// Posterior quantiles of the voxel-reduced group trajectory `β(h_g, ·, t)`.
pub fn summarize(draws: &PosteriorDraws, request: &SummaryRequest, mask: Option<&RegionMask>) -> Result<Vec<TrajectoryRow>> {
    request.validate()?;
    if draws.is_empty() {
        return Err(Error::Data("chain has no retained draws".into()));
    }
    let regs = regions(request, mask)?;
    let mut rows = Vec::new();
    for g in 0..draws.n_groups {
        for (name, sel) in &regs {
            for &t in &request.times {
                let mut vals = draws
                    .draws
                    .par_iter()
                    .map(|d| Ok(reduce(&draws.beta(d, g, t)?, sel.as_deref(), request.reducer)))
                    .collect::<Result<Vec<f64>>>()?;
                vals.sort_by(f64::total_cmp);
                rows.push(TrajectoryRow {
                    group: g + 1,
                    region: name.clone(),
                    time: t,
                    quantiles: request.quantiles.iter().map(|&q| quantile(&vals, q)).collect(),
                });
            }
        }
    }
    Ok(rows)
}
