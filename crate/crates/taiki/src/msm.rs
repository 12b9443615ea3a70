//! Second-stage preference estimation by simulated method of moments.
//!
//! Individual moments encode listing behavior, waitlist outcomes and the
//! safety-dropping indicator. Their simulated counterparts re-draw utilities,
//! re-solve every applicant's list pair under the first-stage belief, and
//! re-run the mechanism year by year. The quadratic objective is minimized in
//! two stages: identity weighting to get an initial point, then the inverse of
//! the noise-regularized moment outer-product matrix.
//!
//! Common random numbers: the standard-normal draws behind the simulated
//! utilities are fixed once per fit, so the objective is a deterministic
//! function of the parameters.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lottery::BeliefTable;
use crate::market::{
    drop_safety, simulate_assignments, utility_normals, ApplicantHistory, Covariates, Entrant,
    EntrantLotteries, Panel, Reapplication, SimPlan,
};
use crate::mechanism::{CenterId, Cutoff, Rol};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::policy::{
    materialize_draw, psd_factor, BaseNormals, ObjectiveMode, PreparedTheta, Theta,
};
use crate::seed;

/// Layout of one applicant's moment vector: listing indicators for the first
/// list, the same interacted with the initial score, the period-1 waitlist
/// indicator, the analogous second-list block, the safety-dropping indicator,
/// and the no-reapply indicator. Length 4J + 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MomentLayout {
    pub n_centers: usize,
}

impl MomentLayout {
    pub fn dim(&self) -> usize {
        4 * self.n_centers + 4
    }

    pub fn names(&self) -> Vec<String> {
        let j = self.n_centers;
        let mut names = Vec::with_capacity(self.dim());
        names.extend((0..j).map(|i| format!("lists1_{i}")));
        names.extend((0..j).map(|i| format!("lists1_{i}_x_score")));
        names.push("waitlisted1".into());
        names.extend((0..j).map(|i| format!("lists2_{i}")));
        names.extend((0..j).map(|i| format!("lists2_{i}_x_score")));
        names.push("waitlisted2".into());
        names.push("drop_safety".into());
        names.push("no_reapply".into());
        names
    }
}

/// Encode one applicant's moments. The second-round block is zero-filled for
/// applicants without an observed second round (assigned in period 1, or
/// censored by the window), on both the observed and simulated sides.
pub fn individual_moments(
    history: &ApplicantHistory,
    cutoffs_period1: &BTreeMap<CenterId, Cutoff>,
    layout: MomentLayout,
) -> Result<Vec<f64>> {
    let j = layout.n_centers;
    let s1 = f64::from(history.s1.0);
    let mut m = vec![0.0; layout.dim()];
    let listed = |rol: &Rol, center: usize| f64::from(rol.contains(CenterId(center as u32)));
    for c in 0..j {
        let ind = listed(&history.rol1, c);
        m[c] = ind;
        m[j + c] = ind * s1;
    }
    m[2 * j] = f64::from(history.waitlisted_p1());
    if let Reapplication::Observed { rol2, outcome2, .. } = &history.reapplication {
        for c in 0..j {
            let ind = listed(rol2, c);
            m[2 * j + 1 + c] = ind;
            m[3 * j + 1 + c] = ind * s1;
        }
        m[4 * j + 1] = f64::from(outcome2.is_waitlist());
        if !rol2.is_empty() {
            m[4 * j + 2] = f64::from(drop_safety(history, cutoffs_period1)?);
        }
        m[4 * j + 3] = f64::from(rol2.is_empty());
    }
    Ok(m)
}

fn default_entry_age_filter() -> Option<u8> {
    Some(0)
}

/// Estimation configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MsmConfig {
    /// Simulation draws per applicant.
    pub draws: usize,
    /// Total objective-evaluation budget across both stages.
    pub budget: usize,
    /// Seed for the common random numbers and the weight-matrix noise.
    pub seed: u64,
    /// Simplex spread tolerance.
    #[serde(default = "MsmConfig::default_tolerance")]
    pub tolerance: f64,
    /// Restrict the estimation sample to one entry age (the default keeps the
    /// age-0 cohorts, the only ones whose first application is unambiguous).
    #[serde(default = "default_entry_age_filter")]
    pub entry_age_filter: Option<u8>,
    #[serde(default = "MsmConfig::default_restarts")]
    pub restarts: usize,
}

impl MsmConfig {
    fn default_tolerance() -> f64 {
        1e-9
    }

    fn default_restarts() -> usize {
        1
    }
}

/// Precomputed state for repeated objective evaluations on one panel:
/// resolved lotteries, base normals for every (applicant, draw), observed
/// moments, and the (entry age, entry year) cell partition.
pub struct MsmProblem<'a> {
    panel: &'a Panel,
    config: MsmConfig,
    entrants: Vec<Entrant>,
    covariates: Vec<Covariates>,
    lotteries: Vec<EntrantLotteries>,
    base: Vec<Vec<BaseNormals>>,
    /// Entrant index -> estimation cell index (None = outside the sample).
    cell_of: Vec<Option<usize>>,
    cells: Vec<(u8, u32)>,
    cell_sizes: Vec<usize>,
    observed: Vec<Option<Vec<f64>>>,
    layout: MomentLayout,
    n_areas: usize,
}

impl<'a> MsmProblem<'a> {
    pub fn new(panel: &'a Panel, belief: &BeliefTable, config: MsmConfig) -> Result<Self> {
        if config.draws == 0 {
            return Err(Error::config("msm.draws: must be at least 1"));
        }
        let layout = MomentLayout { n_centers: panel.n_centers() };
        let entrants = panel.entrants();
        if entrants.is_empty() {
            return Err(Error::invalid("cannot estimate on an empty panel"));
        }
        let center_ids = panel.center_ids();
        let n_areas = panel.centers.iter().map(|c| c.area as usize + 1).max().unwrap_or(1);

        let mut cells: Vec<(u8, u32)> = Vec::new();
        let mut cell_of = Vec::with_capacity(entrants.len());
        let mut covariates = Vec::with_capacity(entrants.len());
        let mut lotteries = Vec::with_capacity(entrants.len());
        let mut base = Vec::with_capacity(entrants.len());
        let mut observed = Vec::with_capacity(entrants.len());
        for (i, e) in entrants.iter().enumerate() {
            covariates.push(panel.covariates(e));
            lotteries.push(resolve(belief, panel, e, &center_ids)?);
            base.push(
                (0..config.draws)
                    .map(|s| utility_normals(config.seed, e.id, s, n_areas))
                    .collect(),
            );
            let included = config
                .entry_age_filter
                .map_or(true, |age| e.entry_age == age);
            if included {
                let key = (e.entry_age, e.year);
                let idx = match cells.iter().position(|c| *c == key) {
                    Some(idx) => idx,
                    None => {
                        cells.push(key);
                        cells.len() - 1
                    }
                };
                cell_of.push(Some(idx));
                let h = &panel.histories[i];
                observed.push(Some(individual_moments(h, panel.entry_cutoffs(h)?, layout)?));
            } else {
                cell_of.push(None);
                observed.push(None);
            }
        }
        if cells.is_empty() {
            return Err(Error::invalid("no applicants in the estimation sample"));
        }
        let mut cell_sizes = vec![0usize; cells.len()];
        for idx in cell_of.iter().flatten() {
            cell_sizes[*idx] += 1;
        }
        Ok(MsmProblem {
            panel,
            config,
            entrants,
            covariates,
            lotteries,
            base,
            cell_of,
            cells,
            cell_sizes,
            observed,
            layout,
            n_areas,
        })
    }

    pub fn layout(&self) -> MomentLayout {
        self.layout
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    /// Estimation cells as (entry age, entry year), in first-seen order.
    pub fn cells(&self) -> &[(u8, u32)] {
        &self.cells
    }

    /// Stacked dimension: one moment block per estimation cell.
    pub fn dim(&self) -> usize {
        self.cells.len() * self.layout.dim()
    }

    pub fn n_included(&self) -> usize {
        self.cell_sizes.iter().sum()
    }

    /// Mean simulated moments per included applicant under `theta`.
    fn simulated_means(&self, theta: &Theta) -> Result<Vec<Option<Vec<f64>>>> {
        let prepared = PreparedTheta::new(theta.clone(), self.panel.n_centers())?;
        let per_draw: Vec<Vec<Option<Vec<f64>>>> = (0..self.config.draws)
            .into_par_iter()
            .map(|s| self.simulate_one_draw(&prepared, s))
            .collect::<Result<_>>()?;
        let mut means: Vec<Option<Vec<f64>>> = self
            .observed
            .iter()
            .map(|o| o.as_ref().map(|_| vec![0.0; self.layout.dim()]))
            .collect();
        let w = 1.0 / self.config.draws as f64;
        for draw in &per_draw {
            for (mean, m) in means.iter_mut().zip(draw) {
                if let (Some(mean), Some(m)) = (mean.as_mut(), m.as_ref()) {
                    for (a, b) in mean.iter_mut().zip(m) {
                        *a += w * b;
                    }
                }
            }
        }
        Ok(means)
    }

    /// Simulate one full panel draw: utilities, list pairs, mechanism, moments.
    fn simulate_one_draw(
        &self,
        prepared: &PreparedTheta,
        draw: usize,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let pairs: Vec<(Rol, Rol)> = self
            .entrants
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let utilities =
                    materialize_draw(prepared, &self.covariates[i], &self.base[i][draw])?;
                Ok(crate::market::solve_pair(
                    &utilities,
                    &self.lotteries[i],
                    e.entry_age,
                    prepared.theta.delta,
                    self.panel.k_max,
                    ObjectiveMode::Expanded,
                ))
            })
            .collect::<Result<_>>()?;
        let sim = simulate_assignments(&SimPlan {
            centers: &self.panel.centers,
            entrants: &self.entrants,
            pairs: &pairs,
            years: self.panel.years,
            grid: self.panel.grid,
            bonus: self.panel.bonus,
            tiebreak_seed: self.panel.seed,
        })?;
        debug_assert_eq!(sim.histories.len(), self.entrants.len());
        sim.histories
            .iter()
            .enumerate()
            .map(|(i, h)| {
                if self.cell_of[i].is_none() {
                    return Ok(None);
                }
                let key = crate::lottery::CellKey::new(h.entry_year, h.entry_age);
                let cutoffs = &sim.outcomes[&key].cutoffs;
                individual_moments(h, cutoffs, self.layout).map(Some)
            })
            .collect()
    }

    /// Per-applicant moment gaps h_i = m_i - mean_s m_i^s for the included
    /// applicants, as (cell index, gap) pairs in entrant order.
    pub fn applicant_gaps(&self, theta: &Theta) -> Result<Vec<(usize, Vec<f64>)>> {
        let means = self.simulated_means(theta)?;
        let mut gaps = Vec::with_capacity(self.n_included());
        for (i, cell) in self.cell_of.iter().enumerate() {
            if let (Some(cell), Some(obs), Some(mean)) =
                (cell, self.observed[i].as_ref(), means[i].as_ref())
            {
                let gap: Vec<f64> = obs.iter().zip(mean).map(|(o, m)| o - m).collect();
                gaps.push((*cell, gap));
            }
        }
        Ok(gaps)
    }

    /// The stacked gap (1/n) sum_i h_i: per-cell mean gaps weighted by cell
    /// share. Cells are stacked in [`Self::cells`] order.
    pub fn stacked_gap(&self, theta: &Theta) -> Result<MomentGap> {
        let gaps = self.applicant_gaps(theta)?;
        let d = self.layout.dim();
        let n = gaps.len() as f64;
        let mut stacked = vec![0.0; self.dim()];
        let mut by_cell = vec![vec![0.0; d]; self.cells.len()];
        for (cell, gap) in &gaps {
            for (k, g) in gap.iter().enumerate() {
                stacked[cell * d + k] += g / n;
                by_cell[*cell][k] += g / self.cell_sizes[*cell] as f64;
            }
        }
        let cells = self
            .cells
            .iter()
            .zip(by_cell)
            .zip(&self.cell_sizes)
            .map(|((&(entry_age, entry_year), gap), &n)| CellGap {
                entry_age,
                entry_year,
                n,
                gap,
            })
            .collect();
        Ok(MomentGap { cells, stacked })
    }

    /// Quadratic objective Q(theta; W) = g' W g (identity weight when `None`).
    pub fn q(&self, theta: &Theta, weight: Option<&DMatrix<f64>>) -> Result<f64> {
        let g = DVector::from_vec(self.stacked_gap(theta)?.stacked);
        Ok(match weight {
            Some(w) => (g.transpose() * w * &g)[(0, 0)],
            None => g.dot(&g),
        })
    }
}

fn resolve(
    belief: &BeliefTable,
    panel: &Panel,
    e: &Entrant,
    center_ids: &[CenterId],
) -> Result<EntrantLotteries> {
    crate::market::resolve_lotteries(belief, e, center_ids, panel.bonus, panel.grid)
}

/// Per-cell moment gap, conditional on initially applying at that (age, year).
#[derive(Clone, Debug, PartialEq)]
pub struct CellGap {
    pub entry_age: u8,
    pub entry_year: u32,
    pub n: usize,
    pub gap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentGap {
    pub cells: Vec<CellGap>,
    /// Cell-size-weighted concatenation, (1/n) sum_i h_i.
    pub stacked: Vec<f64>,
}

/// Noise-regularized moment outer-product matrix and its inverse.
#[derive(Clone, Debug)]
pub struct WeightMatrix {
    pub s_hat: DMatrix<f64>,
    pub inverse: Option<DMatrix<f64>>,
    pub singular: bool,
}

/// S_hat = (1/n) sum_i r_i r_i' from the given rows.
pub fn weight_matrix_from_rows(rows: &[DVector<f64>]) -> WeightMatrix {
    let n = rows.len();
    let d = rows.first().map_or(0, DVector::len);
    let mut s = DMatrix::zeros(d, d);
    for r in rows {
        s.syger(1.0 / n as f64, r, r, 1.0);
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..d {
        for j in (i + 1)..d {
            s[(i, j)] = s[(j, i)];
        }
    }
    let chol = s.clone().cholesky();
    let singular = chol.is_none();
    WeightMatrix { s_hat: s, inverse: chol.map(|c| c.inverse()), singular }
}

/// The two-stage weight matrix at `theta_init`: per-applicant gaps stacked
/// into their cell block plus standard-normal noise that guarantees
/// invertibility.
pub fn weight_matrix(
    problem: &MsmProblem<'_>,
    theta_init: &Theta,
    noise_seed: u64,
) -> Result<WeightMatrix> {
    let gaps = problem.applicant_gaps(theta_init)?;
    let d = problem.layout.dim();
    let dim = problem.dim();
    let mut rng = seed::stream(noise_seed, "weight-noise");
    let rows: Vec<DVector<f64>> = gaps
        .iter()
        .map(|(cell, gap)| {
            let mut r = DVector::zeros(dim);
            for (k, g) in gap.iter().enumerate() {
                r[cell * d + k] = *g;
            }
            for k in 0..dim {
                r[k] += rng.sample::<f64, _>(StandardNormal);
            }
            r
        })
        .collect();
    Ok(weight_matrix_from_rows(&rows))
}

/// Free-parameter packing: alpha and beta per center, the lower-triangular
/// factor of the area covariance, the outside-option means for ages 1..=5 and
/// standard deviations for all ages. The normalizations (gamma, delta, the
/// age-0 outside mean) never enter the vector.
#[derive(Clone, Copy, Debug)]
pub struct ParamSpace {
    pub n_centers: usize,
    pub n_areas: usize,
}

impl ParamSpace {
    pub fn dim(&self) -> usize {
        2 * self.n_centers + self.n_areas * (self.n_areas + 1) / 2 + 5 + 6
    }

    pub fn pack(&self, theta: &Theta) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.dim());
        x.extend_from_slice(&theta.alpha);
        x.extend_from_slice(&theta.beta);
        let n = self.n_areas;
        let m = DMatrix::from_fn(n, n, |i, j| theta.sigma[i][j]);
        // A triangular factor of the (possibly singular) PSD area covariance.
        let f = psd_factor(&m, 1e-9)?;
        let lower = lower_triangular_of(&(&f * f.transpose()));
        for i in 0..n {
            for j in 0..=i {
                x.push(lower[(i, j)]);
            }
        }
        x.extend_from_slice(&theta.mu0[1..]);
        x.extend(theta.sigma0sq.iter().map(|s| s.sqrt()));
        debug_assert_eq!(x.len(), self.dim());
        Ok(x)
    }

    pub fn unpack(&self, x: &[f64], template: &Theta) -> Theta {
        let jn = self.n_centers;
        let n = self.n_areas;
        let alpha = x[..jn].to_vec();
        let beta = x[jn..2 * jn].to_vec();
        let mut pos = 2 * jn;
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                l[(i, j)] = x[pos];
                pos += 1;
            }
        }
        let s = &l * l.transpose();
        let sigma = (0..n).map(|i| (0..n).map(|j| s[(i, j)]).collect()).collect();
        let mut mu0 = [0.0; 6];
        mu0[1..].copy_from_slice(&x[pos..pos + 5]);
        pos += 5;
        let mut sigma0sq = [0.0; 6];
        for (k, v) in sigma0sq.iter_mut().enumerate() {
            *v = x[pos + k] * x[pos + k];
        }
        Theta {
            alpha,
            beta,
            gamma: template.gamma,
            sigma,
            mu0,
            sigma0sq,
            delta: template.delta,
        }
    }
}

/// Cholesky-like lower factor that tolerates positive semidefinite input by
/// flooring pivots at zero.
fn lower_triangular_of(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                l[(i, j)] = sum.max(0.0).sqrt();
            } else if l[(j, j)] > 0.0 {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    l
}

/// A neutral starting point: flat utilities, a diagonal area covariance and
/// unit outside-option spread.
pub fn neutral_start(n_centers: usize, n_areas: usize) -> Theta {
    Theta {
        alpha: vec![0.0; n_centers],
        beta: vec![0.0; n_centers],
        gamma: crate::policy::GAMMA_FIXED,
        sigma: (0..n_areas)
            .map(|i| (0..n_areas).map(|j| if i == j { 0.25 } else { 0.0 }).collect())
            .collect(),
        mu0: [0.0; 6],
        sigma0sq: [1.0; 6],
        delta: crate::policy::DELTA_DEFAULT,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum FitStage {
    Identity,
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub stage: FitStage,
    pub evals: usize,
    pub q: f64,
}

/// Observed vs simulated mean for one moment in one cell, at the fitted
/// parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentFit {
    pub entry_age: u8,
    pub entry_year: u32,
    pub moment: String,
    pub gap: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub theta: Theta,
    pub q: f64,
    pub stage1_q: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub budget_exhausted: bool,
    pub moment_report: Vec<MomentFit>,
}

/// Two-stage simulated-moments fit.
pub fn fit(
    panel: &Panel,
    belief: &BeliefTable,
    config: &MsmConfig,
    start: Option<&Theta>,
) -> Result<FitResult> {
    let problem = MsmProblem::new(panel, belief, config.clone())?;
    let space = ParamSpace { n_centers: panel.n_centers(), n_areas: problem.n_areas() };
    let template = neutral_start(panel.n_centers(), problem.n_areas());
    let start = start.cloned().unwrap_or_else(|| template.clone());
    start.validate(panel.n_centers())?;
    let x0 = space.pack(&start)?;

    let report_at = |theta: &Theta| -> Result<Vec<MomentFit>> {
        let gap = problem.stacked_gap(theta)?;
        let names = problem.layout().names();
        Ok(gap
            .cells
            .iter()
            .flat_map(|c| {
                names.iter().zip(&c.gap).map(move |(name, g)| MomentFit {
                    entry_age: c.entry_age,
                    entry_year: c.entry_year,
                    moment: name.clone(),
                    gap: *g,
                })
            })
            .collect())
    };

    if config.budget == 0 {
        let q = problem.q(&start, None)?;
        return Ok(FitResult {
            theta: start.clone(),
            q,
            stage1_q: q,
            trajectory: vec![TrajectoryPoint { stage: FitStage::Identity, evals: 1, q }],
            budget_exhausted: true,
            moment_report: report_at(&start)?,
        });
    }

    let stage_budget = (config.budget / 2).max(1);
    let opts = NelderMeadOptions {
        max_evals: stage_budget,
        f_tol: config.tolerance,
        init_step: 0.25,
        restarts: config.restarts,
    };

    // Stage 1: identity weighting.
    let objective = |x: &[f64]| -> f64 {
        let theta = space.unpack(x, &template);
        problem.q(&theta, None).unwrap_or(f64::INFINITY)
    };
    let stage1 = nelder_mead(objective, &x0, &opts);
    let theta_init = space.unpack(&stage1.x, &template);
    let mut trajectory: Vec<TrajectoryPoint> = stage1
        .trace
        .iter()
        .map(|&(evals, q)| TrajectoryPoint { stage: FitStage::Identity, evals, q })
        .collect();

    // Stage 2: inverse noise-regularized weight at the stage-1 point.
    let weight = weight_matrix(&problem, &theta_init, config.seed)?;
    let w = weight
        .inverse
        .clone()
        .ok_or_else(|| Error::Parameter("weight matrix singular despite noise".into()))?;
    let objective = |x: &[f64]| -> f64 {
        let theta = space.unpack(x, &template);
        problem.q(&theta, Some(&w)).unwrap_or(f64::INFINITY)
    };
    let stage2 = nelder_mead(objective, &stage1.x, &opts);
    let theta_hat = space.unpack(&stage2.x, &template);
    trajectory.extend(
        stage2
            .trace
            .iter()
            .map(|&(evals, q)| TrajectoryPoint { stage: FitStage::Weighted, evals, q }),
    );

    Ok(FitResult {
        theta: theta_hat.clone(),
        q: stage2.f,
        stage1_q: stage1.f,
        trajectory,
        budget_exhausted: !(stage1.converged && stage2.converged),
        moment_report: report_at(&theta_hat)?,
    })
}

/// Q evaluated with the stage-2 weight built at `theta_init`; used to compare
/// candidate parameter values on equal footing.
pub fn q_at(
    panel: &Panel,
    belief: &BeliefTable,
    config: &MsmConfig,
    weight: Option<&DMatrix<f64>>,
    theta: &Theta,
) -> Result<f64> {
    let problem = MsmProblem::new(panel, belief, config.clone())?;
    problem.q(theta, weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::test_support::{small_config, small_theta};
    use crate::market::{generate_market, BeliefSpec};
    use crate::mechanism::{ApplicantId, Placement, PriorityScore};
    use approx::assert_abs_diff_eq;

    fn history_for_moments() -> ApplicantHistory {
        ApplicantHistory {
            id: ApplicantId(0),
            entry_year: 0,
            entry_age: 0,
            area: 0,
            s1: PriorityScore(26),
            rol1: Rol::new(vec![CenterId(1)]).unwrap(),
            outcome1: Placement::Center(CenterId(1)),
            reapplication: Reapplication::NotWaitlisted,
        }
    }

    #[test]
    fn moment_layout_and_encoding() {
        let layout = MomentLayout { n_centers: 3 };
        assert_eq!(layout.dim(), 16);
        assert_eq!(layout.names().len(), 16);

        let cutoffs: BTreeMap<CenterId, Cutoff> = [
            (CenterId(0), Cutoff::Open),
            (CenterId(1), Cutoff::Open),
            (CenterId(2), Cutoff::Open),
        ]
        .into();

        // Assigned to her only listed center: listing block set, rest zero.
        let m = individual_moments(&history_for_moments(), &cutoffs, layout).unwrap();
        assert_eq!(m[1], 1.0);
        assert_eq!(m[4], 26.0);
        assert_eq!(m[6], 0.0);
        assert!(m[7..].iter().all(|&x| x == 0.0));

        // Waitlisted and not reapplying: indicator block at the tail.
        let mut h = history_for_moments();
        h.outcome1 = Placement::Waitlist;
        h.reapplication = Reapplication::Observed {
            s2: PriorityScore(28),
            clamped: false,
            rol2: Rol::empty(),
            outcome2: Placement::Waitlist,
        };
        let m = individual_moments(&h, &cutoffs, layout).unwrap();
        assert_eq!(m[6], 1.0);
        assert!(m[7..13].iter().all(|&x| x == 0.0));
        assert_eq!(m[13], 1.0); // waitlisted in period 2
        assert_eq!(m[14], 0.0); // no drop-safety without a second list
        assert_eq!(m[15], 1.0); // did not reapply
    }

    #[test]
    fn seed_matched_single_draw_gap_is_zero() {
        let config = small_config();
        let panel = generate_market(&config).unwrap();
        let belief = panel.gen_belief.clone().unwrap();
        let msm = MsmConfig {
            draws: 1,
            budget: 0,
            seed: config.seed,
            tolerance: 1e-9,
            entry_age_filter: Some(0),
            restarts: 0,
        };
        let problem = MsmProblem::new(&panel, &belief, msm).unwrap();
        let gap = problem.stacked_gap(&config.theta).unwrap();
        assert!(gap.stacked.iter().all(|&g| g == 0.0), "gap = {:?}", gap.stacked);
    }

    #[test]
    fn q_is_deterministic_under_crn() {
        let config = small_config();
        let panel = generate_market(&config).unwrap();
        let belief = panel.gen_belief.clone().unwrap();
        let msm = MsmConfig {
            draws: 4,
            budget: 0,
            seed: 1234,
            tolerance: 1e-9,
            entry_age_filter: Some(0),
            restarts: 0,
        };
        let problem = MsmProblem::new(&panel, &belief, msm).unwrap();
        let a = problem.q(&config.theta, None).unwrap();
        let b = problem.q(&config.theta, None).unwrap();
        assert_eq!(a, b);
        assert!(a >= 0.0);
    }

    #[test]
    fn weight_matrix_identity_under_pure_noise() {
        // With zero gaps the matrix is a noise Wishart with mean identity.
        let dim = 16;
        let n = 10_000;
        let mut rng = seed::stream(77, "wishart");
        let rows: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let w = weight_matrix_from_rows(&rows);
        assert!(!w.singular);
        let mut dev = w.s_hat.clone();
        for i in 0..dim {
            dev[(i, i)] -= 1.0;
        }
        let op_norm = dev
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, &l| m.max(l.abs()));
        assert!(op_norm < 0.1, "operator norm {op_norm}");
    }

    #[test]
    fn weight_matrix_rank_one_is_singular() {
        let e1 = DVector::from_fn(4, |i, _| f64::from(u8::from(i == 0)));
        let rows = vec![e1.clone(), e1.clone(), e1];
        let w = weight_matrix_from_rows(&rows);
        assert!(w.singular);
        assert!(w.inverse.is_none());
        // Exactly symmetric and PSD.
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(w.s_hat[(i, j)], w.s_hat[(j, i)]);
            }
        }
        assert!(w.s_hat.clone().symmetric_eigen().eigenvalues.iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn param_space_round_trip() {
        let theta = small_theta(3, 2);
        let space = ParamSpace { n_centers: 3, n_areas: 2 };
        let x = space.pack(&theta).unwrap();
        assert_eq!(x.len(), space.dim());
        let back = space.unpack(&x, &theta);
        assert_eq!(back.alpha, theta.alpha);
        assert_eq!(back.beta, theta.beta);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(back.sigma[i][j], theta.sigma[i][j], epsilon = 1e-9);
            }
        }
        assert_eq!(back.mu0, theta.mu0);
        for a in 0..6 {
            assert_abs_diff_eq!(back.sigma0sq[a], theta.sigma0sq[a], epsilon = 1e-12);
        }
        // The normalizations are never free.
        assert_eq!(back.gamma, theta.gamma);
        assert_eq!(back.delta, theta.delta);
        assert_eq!(back.mu0[0], 0.0);
    }

    #[test]
    fn zero_budget_returns_start_with_warning() {
        let config = small_config();
        let panel = generate_market(&config).unwrap();
        let belief = panel.gen_belief.clone().unwrap();
        let msm = MsmConfig {
            draws: 2,
            budget: 0,
            seed: 5,
            tolerance: 1e-9,
            entry_age_filter: Some(0),
            restarts: 0,
        };
        let res = fit(&panel, &belief, &msm, Some(&config.theta)).unwrap();
        assert!(res.budget_exhausted);
        assert_eq!(res.theta, config.theta);
        assert!(!res.moment_report.is_empty());
    }

    #[test]
    fn local_optimality_probe_at_truth() {
        // Q at the generating parameters beats 0.1-scale alpha perturbations.
        let mut config = small_config();
        config.cohorts = vec![
            crate::market::CohortSpec { year: 0, entry_age: 0, count: 150 },
            crate::market::CohortSpec { year: 1, entry_age: 0, count: 150 },
        ];
        config.belief = BeliefSpec::default();
        let panel = generate_market(&config).unwrap();
        let belief = panel.gen_belief.clone().unwrap();
        let msm = MsmConfig {
            draws: 30,
            budget: 0,
            seed: 901,
            tolerance: 1e-9,
            entry_age_filter: Some(0),
            restarts: 0,
        };
        let problem = MsmProblem::new(&panel, &belief, msm).unwrap();
        let q_true = problem.q(&config.theta, None).unwrap();
        let mut rng = seed::stream(31, "probe");
        let mut worse = 0;
        for _ in 0..20 {
            let mut theta = config.theta.clone();
            for a in &mut theta.alpha {
                *a += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            let q = problem.q(&theta, None).unwrap();
            if q_true <= q {
                worse += 1;
            }
        }
        assert!(worse >= 19, "true parameters beaten by {} of 20 perturbations", 20 - worse);
    }
}
