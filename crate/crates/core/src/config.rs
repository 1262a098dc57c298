//! Run configuration: priors, ranks, sampler schedule and simulation design.
//! Everything deserializes from TOML with defaults for omitted keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::ShrinkageMode;

/// Spatial basis family for a component's voxel modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialBasis {
    /// Truncated Gaussian bumps, `⌊d/2⌋` of them unless overridden (smooth).
    Gaussian,
    /// One indicator per voxel under the Laplacian kernel (non-smooth).
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialPrior {
    pub basis: SpatialBasis,
    /// Number of Gaussian bases; `None` means `⌊d/2⌋`.
    pub n_bases: Option<usize>,
    /// PING depth (number of multiplied component fields).
    pub depth: usize,
}

impl Default for SpatialPrior {
    fn default() -> Self {
        Self { basis: SpatialBasis::Gaussian, n_bases: None, depth: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kappa1: f64,
    pub kappa2: f64,
    /// Cell variance prior `σ_z⁻² ~ Ga(a_s, b_s)`.
    pub a_s: f64,
    pub b_s: f64,
    /// Global core scale `τ⁻² ~ Ga(a_τ, b_τ)`.
    pub a_tau: f64,
    pub b_tau: f64,
    /// Noise `σ_ε⁻² ~ Ga(a_ε, b_ε)`.
    pub a_eps: f64,
    pub b_eps: f64,
    /// Mean-core variance `σ_C⁻² ~ Ga(a_c, b_c)`.
    pub a_mean: f64,
    pub b_mean: f64,
    pub shrinkage: ShrinkageMode,
    pub alpha_spatial: SpatialPrior,
    pub beta_spatial: SpatialPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kappa1: 2.1,
            kappa2: 3.1,
            a_s: 10.0,
            b_s: 0.1,
            a_tau: 0.1,
            b_tau: 0.1,
            a_eps: 0.1,
            b_eps: 0.1,
            a_mean: 0.1,
            b_mean: 0.1,
            shrinkage: ShrinkageMode::AsWritten,
            alpha_spatial: SpatialPrior { depth: 1, ..SpatialPrior::default() },
            beta_spatial: SpatialPrior { depth: 3, ..SpatialPrior::default() },
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("a_s", self.a_s),
            ("b_s", self.b_s),
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("a_eps", self.a_eps),
            ("b_eps", self.b_eps),
            ("a_mean", self.a_mean),
            ("b_mean", self.b_mean),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, s) in [("alpha_spatial", &self.alpha_spatial), ("beta_spatial", &self.beta_spatial)] {
            if s.depth == 0 {
                return Err(Error::Config(format!("{name}.depth must be at least 1")));
            }
            if s.n_bases == Some(0) {
                return Err(Error::Config(format!("{name}.n_bases must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Starting ranks: `alpha = [group, x, y, z]`, `beta = [group, x, y, z, time]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub alpha: [usize; 4],
    pub beta: [usize; 5],
}

impl Default for RankConfig {
    fn default() -> Self {
        Self { alpha: [3, 5, 5, 5], beta: [3, 5, 5, 5, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub enabled: bool,
    /// Adaptation probability `exp(offset + slope·iter)`.
    pub offset: f64,
    pub slope: f64,
    /// Relative contribution below which a column is dropped.
    pub threshold: f64,
    /// Only adapt during burn-in.
    pub burn_in_only: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { enabled: true, offset: -1.0, slope: -5e-4, threshold: 1e-4, burn_in_only: true }
    }
}

impl AdaptConfig {
    pub fn probability(&self, iter: usize) -> f64 {
        (self.offset + self.slope * iter as f64).exp().min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the environment default.
    pub threads: Option<usize>,
    pub ranks: RankConfig,
    pub priors: PriorConfig,
    pub adapt: AdaptConfig,
    /// Number of B-spline functions `d_t`.
    pub n_temporal_bases: usize,
    pub spline_degree: usize,
    /// Emit a progress record every this many sweeps (0 disables).
    pub progress_every: usize,
    /// Number of conditional-mean passes over the cores during initialization.
    pub init_passes: usize,
    /// Rank of both components in the CP baseline.
    pub cp_rank: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            burn_in: 1000,
            thin: 5,
            seed: 1,
            threads: None,
            ranks: RankConfig::default(),
            priors: PriorConfig::default(),
            adapt: AdaptConfig::default(),
            n_temporal_bases: 8,
            spline_degree: 2,
            progress_every: 50,
            init_passes: 10,
            cp_rank: 5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations && self.iterations > 0 {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.ranks.alpha.iter().chain(self.ranks.beta.iter()).any(|&r| r == 0) {
            return Err(Error::Config("all ranks must be at least 1".into()));
        }
        if self.n_temporal_bases < self.spline_degree + 1 || self.n_temporal_bases < 2 {
            return Err(Error::Config(format!(
                "need at least {} temporal bases for degree {}",
                (self.spline_degree + 1).max(2),
                self.spline_degree
            )));
        }
        if self.cp_rank == 0 {
            return Err(Error::Config("cp_rank must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(self.adapt.threshold >= 0.0) {
            return Err(Error::Config("adapt.threshold must be nonnegative".into()));
        }
        self.priors.validate()
    }

    /// Retained draw count `⌊(iterations − burn_in) / thin⌋`.
    pub fn n_draws(&self) -> usize {
        self.iterations.saturating_sub(self.burn_in) / self.thin
    }
}

/// Source of the subject baselines in simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AlphaSource {
    /// Rank-3 Tucker field of smooth columns plus subject-level core noise.
    Synthetic { scale: f64, subject_sd: f64 },
    /// Directory with one LTF1 surface per group, `alpha_<g>.ltf` (1-based).
    Files { dir: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisitSource {
    /// Resample per-subject visit schedules from the bundled fixture.
    Schedule,
    /// `visits` uniform times with the first at 0.
    Uniform { visits: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubjectNoise {
    /// One offset per subject added to the whole surface.
    Constant,
    /// Independent offsets per voxel.
    PerVoxel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub grid: [usize; 3],
    pub groups: usize,
    pub subjects_per_group: usize,
    pub visits: VisitSource,
    pub centers: [[f64; 6]; 3],
    /// Denominator of the squared distance in each bump exponent.
    pub bump_scale: f64,
    /// Coefficient of the `t²` time factor.
    pub time_factor: f64,
    pub subject_sd: f64,
    pub subject_noise: SubjectNoise,
    pub noise_sd: f64,
    pub alpha: AlphaSource,
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            grid: [15, 15, 15],
            groups: 3,
            subjects_per_group: 10,
            visits: VisitSource::Schedule,
            centers: [
                [0.50, 0.50, 0.30, 0.80, 0.30, 0.60],
                [0.40, 0.80, 0.40, 0.80, 0.60, 0.40],
                [0.20, 0.20, 0.60, 0.60, 0.50, 0.50],
            ],
            bump_scale: 5.0,
            time_factor: 4.0,
            subject_sd: 0.1,
            subject_noise: SubjectNoise::Constant,
            noise_sd: 0.5,
            alpha: AlphaSource::Synthetic { scale: 1.0, subject_sd: 0.1 },
            seed: 1,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|&d| d < 2) {
            return Err(Error::Config("grid dimensions must be at least 2".into()));
        }
        if self.groups == 0 || self.subjects_per_group == 0 {
            return Err(Error::Config("need at least one group and one subject per group".into()));
        }
        if self.centers.iter().flatten().any(|&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::Config("bump centers must lie in (0, 1)".into()));
        }
        if !(self.bump_scale > 0.0) || self.noise_sd < 0.0 || self.subject_sd < 0.0 {
            return Err(Error::Config("bump_scale must be positive and noise sds nonnegative".into()));
        }
        if let VisitSource::Uniform { visits: 0 } = self.visits {
            return Err(Error::Config("uniform visit count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Whole-file configuration: `[sampler]` and `[simulation]` tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub sampler: SamplerConfig,
    pub simulation: SimulationSpec,
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sampler.validate()?;
        cfg.simulation.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Default worker count: `LTUCKER_THREADS` if set, else available parallelism.
pub fn default_threads() -> usize {
    std::env::var("LTUCKER_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ConfigFile::default();
        let back = ConfigFile::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.sampler.priors.kappa1, 2.1);
        assert_eq!(cfg.sampler.priors.beta_spatial.depth, 3);
    }

    #[test]
    fn partial_file_and_rejections() {
        let cfg = ConfigFile::from_toml("[sampler]\niterations = 30\nburn_in = 10\nthin = 2\n").unwrap();
        assert_eq!(cfg.sampler.n_draws(), 10);
        assert!(ConfigFile::from_toml("[sampler]\niterations = 10\nburn_in = 10\n").is_err());
        assert!(ConfigFile::from_toml("[sampler]\nthin = 0\n").is_err());
        assert!(ConfigFile::from_toml("[sampler]\nbogus = 1\n").is_err());
        assert!(ConfigFile::from_toml("[sampler.priors]\nkappa1 = -1.0\n").is_err());
    }
}
