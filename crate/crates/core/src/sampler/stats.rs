//! Per-subject data summaries used by every conditional.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bases::SplineBasis;
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone)]
pub struct SubjectStats {
    pub group: usize,
    pub times: Vec<f64>,
    /// Spline design `B` (`n_i × d_t`).
    pub design: DMatrix<f64>,
    /// `Bᵀ1`.
    pub bsum: DVector<f64>,
    pub btb: DMatrix<f64>,
    /// Observations with masked voxels filled in.
    pub obs: Vec<DenseTensor>,
    /// `Σ_j y_j`.
    pub sum_y: DenseTensor,
    /// `Σ_j B[j,h] y_j`, one tensor per spline.
    pub yb: Vec<DenseTensor>,
}

impl SubjectStats {
    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn refresh(&mut self) {
        let dims = self.obs[0].dims().to_vec();
        let mut sum = DenseTensor::zeros(&dims);
        let mut yb = vec![DenseTensor::zeros(&dims); self.design.ncols()];
        for (j, y) in self.obs.iter().enumerate() {
            sum.add_assign(y);
            for (h, t) in yb.iter_mut().enumerate() {
                let w = self.design[(j, h)];
                if w != 0.0 {
                    t.axpy(w, y);
                }
            }
        }
        self.sum_y = sum;
        self.yb = yb;
    }
}

/// Everything the sampler needs from a dataset.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: [usize; 3],
    pub n_groups: usize,
    pub subjects: Vec<SubjectStats>,
    /// `true` for voxels that enter the likelihood.
    pub mask: Option<Vec<bool>>,
    pub spline: SplineBasis,
}

impl Problem {
    pub fn new(data: &LongitudinalDataset, spline: SplineBasis) -> Result<Self> {
        data.validate()?;
        if data.subjects.is_empty() {
            return Err(Error::Data("dataset has no subjects".into()));
        }
        let subjects = data
            .subjects
            .par_iter()
            .map(|s| {
                let design = spline.design(&s.times)?;
                let bsum = design.row_sum().transpose();
                let btb = design.tr_mul(&design);
                let mut obs = s.observations.clone();
                if let Some(mask) = &data.mask {
                    for y in obs.iter_mut() {
                        fill_masked(y, mask);
                    }
                }
                let mut st = SubjectStats {
                    group: s.group,
                    times: s.times.clone(),
                    design,
                    bsum,
                    btb,
                    obs,
                    sum_y: DenseTensor::zeros(&[1]),
                    yb: Vec::new(),
                };
                st.refresh();
                Ok(st)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid: data.grid, n_groups: data.n_groups, subjects, mask: data.mask.clone(), spline })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    pub fn included_voxels(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.n_voxels(),
        }
    }

    pub fn groups(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.group).collect()
    }
}

/// Starting values for masked voxels: the mean of the included ones.
fn fill_masked(y: &mut DenseTensor, mask: &[bool]) {
    let (sum, n) = y.values().iter().zip(mask).filter(|(_, &m)| m).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    let fill = if n > 0 { sum / n as f64 } else { 0.0 };
    for (v, &m) in y.values_mut().iter_mut().zip(mask) {
        if !m {
            *v = fill;
        }
    }
}
