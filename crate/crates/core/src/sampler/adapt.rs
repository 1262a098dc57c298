//! Adaptive rank step: drop negligible columns, otherwise grow by one.

use rand::Rng;

use crate::error::Result;
use crate::model::{Component, ModelState, Which};
use crate::priors::ping_column_draw;
use crate::rng::{block, cell_key, gamma, normal};

use super::sweep::Gibbs;

/// Relative importance of each column of mode `s`: column norm times the RMS
/// over subjects of the matching core-slice norm, divided by the largest.
pub fn column_importance(comp: &Component, s: usize) -> Vec<f64> {
    let mode = &comp.modes[s];
    let raw: Vec<f64> = (0..mode.rank())
        .map(|l| {
            let ms: f64 = comp
                .cores
                .iter()
                .map(|c| c.slice(s, l).values().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                / comp.cores.len().max(1) as f64;
            mode.matrix.column(l).norm() * ms.sqrt()
        })
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![1.0; raw.len()];
    }
    raw.iter().map(|v| v / max).collect()
}

pub fn remove_column(comp: &mut Component, s: usize, l: usize) {
    comp.modes[s].remove_column(l);
    for c in comp.cores.iter_mut() {
        *c = c.remove_index(s, l);
    }
    comp.mean = comp.mean.remove_index(s, l);
    comp.cell_var = comp.cell_var.remove_index(s, l);
}

pub(crate) fn adapt_ranks(g: &mut Gibbs, state: &mut ModelState, iter: u64) -> Result<()> {
    let mut rng = g.streams.rng(iter, block::ADAPT, 0);
    let u: f64 = rng.random();
    if u >= g.config.adapt.probability(iter as usize) {
        return Ok(());
    }
    let pr = g.config.priors.clone();
    let threshold = g.config.adapt.threshold;
    for (wid, w) in [Which::Alpha, Which::Beta].into_iter().enumerate() {
        let comp = state.component_mut(w);
        for s in 0..comp.modes.len() {
            let imp = column_importance(comp, s);
            let mut drop: Vec<usize> = (0..imp.len()).filter(|&l| imp[l] < threshold).collect();
            while comp.modes[s].rank() - drop.len() < 1 {
                drop.pop();
            }
            if !drop.is_empty() {
                for &l in drop.iter().rev() {
                    remove_column(comp, s, l);
                }
                continue;
            }
            let mode = &comp.modes[s];
            let r = mode.rank();
            let cap = g.max_ranks[wid][s].min(mode.basis.n_coefficients()).min(mode.grid_len());
            if r >= cap {
                continue;
            }
            let mut crng = g.streams.rng(iter, block::ADAPT, cell_key(&[wid, s]));
            let mut shrink = mode.shrink.clone();
            shrink.increments.push(gamma(&mut crng, pr.kappa2, 1.0));
            let scale = shrink.scale(r, pr.shrinkage);
            let (_, comps) = ping_column_draw(&mode.basis, mode.depth, r, &mode.matrix, scale, &mut crng)?;
            let mode = &mut comp.modes[s];
            mode.shrink = shrink;
            mode.coeffs.push(comps);
            mode.refresh();
            let mean_sd = comp.mean_var.sqrt();
            comp.mean = comp.mean.append_index(s, |_| mean_sd * normal(&mut crng));
            comp.cell_var = comp.cell_var.append_index(s, |_| 1.0 / gamma(&mut crng, pr.a_s, pr.b_s));
            let tau2 = comp.tau2;
            let (mean, var) = (&comp.mean, &comp.cell_var);
            for c in comp.cores.iter_mut() {
                *c = c.append_index(s, |idx| mean.get(idx) + (tau2 * var.get(idx)).sqrt() * normal(&mut crng));
            }
        }
    }
    Ok(())
}
