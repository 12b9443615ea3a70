//! Applicant preferences and the forward-looking choice of a ranked-list pair.
//!
//! The applicant submits a first-round list, and a second-round list if she is
//! waitlisted (the waitlist raises her score by the bonus). The period-2 list
//! is chosen by the greedy marginal-improvement construction on the period-2
//! continuation objective; the period-1 list starts from the myopic greedy
//! list and is refined by drop-or-swap steps on the full two-period value.
//!
//! Lists are canonicalized to descending flow utility, which is value-optimal
//! under the independent product-form lotteries.

use arrayvec::ArrayVec;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::MAX_ROL_LEN;
use crate::scalar::Real;
use crate::seed;

/// A ranked list as dense center indices, canonical descending-utility order.
pub type IndexList = ArrayVec<u32, MAX_ROL_LEN>;

/// Which form of the two-period objective to evaluate.
///
/// `Expanded` spells out the three waitlist branches and is the ground truth
/// for choices. `Succinct` is the collapsed single-lottery form, kept for
/// diagnostics; the two are not algebraically identical and their argmax
/// agreement is measured, not assumed.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub enum ObjectiveMode {
    #[default]
    Expanded,
    Succinct,
}

/// Full preference parameter bundle for simulation and estimation.
///
/// `gamma` is the scale normalization (fixed -1), `delta` the yearly discount
/// (0.95), and `mu0[0]` the location normalization. `sigma` is the area-level
/// covariance of the center taste shocks: centers in the same area share one
/// shock, so the center-level covariance is `sigma` expanded through the
/// center-to-area map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: f64,
    pub sigma: Vec<Vec<f64>>,
    pub mu0: [f64; 6],
    pub sigma0sq: [f64; 6],
    pub delta: f64,
}

pub const GAMMA_FIXED: f64 = -1.0;
pub const DELTA_DEFAULT: f64 = 0.95;

impl Theta {
    pub fn n_areas(&self) -> usize {
        self.sigma.len()
    }

    pub fn validate(&self, n_centers: usize) -> Result<()> {
        if self.alpha.len() != n_centers || self.beta.len() != n_centers {
            return Err(Error::Parameter(format!(
                "alpha/beta length {}/{} does not match {} centers",
                self.alpha.len(),
                self.beta.len(),
                n_centers
            )));
        }
        if self.gamma != GAMMA_FIXED {
            return Err(Error::Parameter(format!(
                "gamma is a scale normalization fixed at {GAMMA_FIXED}, got {}",
                self.gamma
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Parameter(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.mu0[0] != 0.0 {
            return Err(Error::Parameter(format!(
                "mu0 at the normalization age 0 must be 0, got {}",
                self.mu0[0]
            )));
        }
        if self.sigma0sq.iter().any(|s| *s < 0.0) {
            return Err(Error::Parameter("sigma0sq must be nonnegative".into()));
        }
        let n = self.sigma.len();
        if self.sigma.iter().any(|row| row.len() != n) {
            return Err(Error::Parameter("sigma must be square".into()));
        }
        for i in 0..n {
            for j in 0..i {
                if (self.sigma[i][j] - self.sigma[j][i]).abs() > 1e-9 {
                    return Err(Error::Parameter("sigma must be symmetric".into()));
                }
            }
        }
        Ok(())
    }

    fn sigma_matrix(&self) -> DMatrix<f64> {
        let n = self.sigma.len();
        DMatrix::from_fn(n, n, |i, j| self.sigma[i][j])
    }
}

/// A PSD square-root factor F with F F' = m, tolerant of singular matrices.
pub fn psd_factor(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -tol) {
        return Err(Error::Parameter(format!(
            "matrix is not PSD (eigenvalue {:.3e})",
            eig.eigenvalues.min()
        )));
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt)
}

/// Theta with its shock factor precomputed, for repeated draws.
#[derive(Clone, Debug)]
pub struct PreparedTheta {
    pub theta: Theta,
    factor: DMatrix<f64>,
}

impl PreparedTheta {
    pub fn new(theta: Theta, n_centers: usize) -> Result<Self> {
        theta.validate(n_centers)?;
        let factor = psd_factor(&theta.sigma_matrix(), 1e-9)?;
        Ok(PreparedTheta { theta, factor })
    }
}

/// Observable inputs to one applicant's utilities.
#[derive(Clone, Debug)]
pub struct Covariates {
    /// Initial priority score, as a real number.
    pub score: f64,
    /// Same-area indicator per center.
    pub same_area: Vec<bool>,
    /// Area index per center, into the rows of `Theta::sigma`.
    pub center_area: Vec<u8>,
}

/// One applicant's flow utilities: per-center values and the age-indexed
/// outside option, both known to her in advance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityDraw {
    pub v: Vec<f64>,
    pub v0: [f64; 6],
}

/// v_j = alpha_j + beta_j s + gamma d_j + eps_j.
pub fn flow_utility(theta: &Theta, score: f64, same_area: &[bool], eps: &[f64]) -> Result<Vec<f64>> {
    let n = theta.alpha.len();
    if same_area.len() != n || eps.len() != n || theta.beta.len() != n {
        return Err(Error::Parameter(format!(
            "dimension mismatch: {n} centers, {} flags, {} shocks",
            same_area.len(),
            eps.len()
        )));
    }
    Ok((0..n)
        .map(|j| {
            theta.alpha[j]
                + theta.beta[j] * score
                + theta.gamma * f64::from(same_area[j])
                + eps[j]
        })
        .collect())
}

/// The standard-normal inputs behind one utility draw, kept separate so the
/// same draws can be re-materialized under different parameter values
/// (common random numbers across objective evaluations).
#[derive(Clone, Debug, PartialEq)]
pub struct BaseNormals {
    pub z_area: Vec<f64>,
    pub z0: [f64; 6],
}

pub fn draw_base_normals<R: Rng>(n_areas: usize, rng: &mut R) -> BaseNormals {
    let z_area = (0..n_areas).map(|_| rng.sample(StandardNormal)).collect();
    let mut z0 = [0.0; 6];
    for z in &mut z0 {
        *z = rng.sample(StandardNormal);
    }
    BaseNormals { z_area, z0 }
}

/// Turn base normals into a utility draw under the given parameters.
pub fn materialize_draw(
    prepared: &PreparedTheta,
    cov: &Covariates,
    base: &BaseNormals,
) -> Result<UtilityDraw> {
    let theta = &prepared.theta;
    let n_areas = theta.n_areas();
    if base.z_area.len() != n_areas {
        return Err(Error::Parameter(format!(
            "base draw has {} area shocks, sigma has {n_areas} areas",
            base.z_area.len()
        )));
    }
    // eta = F z, one shock per area; centers inherit their area's shock.
    let mut eta = vec![0.0; n_areas];
    for (i, e) in eta.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, z) in base.z_area.iter().enumerate() {
            acc += prepared.factor[(i, k)] * z;
        }
        *e = acc;
    }
    let eps: Vec<f64> = cov
        .center_area
        .iter()
        .map(|&a| {
            eta.get(a as usize).copied().ok_or_else(|| {
                Error::Parameter(format!("center area {a} outside sigma's {n_areas} areas"))
            })
        })
        .collect::<Result<_>>()?;
    let v = flow_utility(theta, cov.score, &cov.same_area, &eps)?;
    let mut v0 = [0.0; 6];
    for a in 0..6 {
        v0[a] = theta.mu0[a] + theta.sigma0sq[a].sqrt() * base.z0[a];
    }
    Ok(UtilityDraw { v, v0 })
}

/// One joint utility draw; deterministic given the RNG state.
pub fn draw_utilities<R: Rng>(
    prepared: &PreparedTheta,
    cov: &Covariates,
    rng: &mut R,
) -> Result<UtilityDraw> {
    let base = draw_base_normals(prepared.theta.n_areas(), rng);
    materialize_draw(prepared, cov, &base)
}

/// The forward-looking applicant's problem: flow utilities, outside options,
/// per-period admission probabilities (period 2 already at the bonus-adjusted
/// score), entry age and discounting.
#[derive(Clone, Debug)]
pub struct PolicyProblem<'a, F> {
    /// Entry age a0 in 0..=5; period 2 covers ages a0+1..=5.
    pub entry_age: u8,
    pub delta: F,
    /// List length cap for this market (at most [`MAX_ROL_LEN`]).
    pub k_max: usize,
    pub mode: ObjectiveMode,
    /// Per-center flow utility.
    pub v: &'a [F],
    /// Outside option value per age 0..=5.
    pub v0: &'a [F; 6],
    /// Period-1 admission probability per center at the initial score.
    pub pi1: &'a [F],
    /// Period-2 admission probability per center at the bonus-adjusted score.
    pub pi2: &'a [F],
}

/// Expected assigned flow utility of a list: sum of v_j times the product-form
/// assignment probability.
fn expected_flow<F: Real>(list: &[u32], v: &[F], pi: &[F]) -> F {
    let mut reach = F::one();
    let mut total = F::zero();
    for &j in list {
        let p = pi[j as usize];
        total += reach * p * v[j as usize];
        reach *= F::one() - p;
    }
    total
}

/// Probability that every listed center rejects.
fn miss_prob<F: Real>(list: &[u32], pi: &[F]) -> F {
    list.iter()
        .fold(F::one(), |acc, &j| acc * (F::one() - pi[j as usize]))
}

/// One-period portfolio value: expected assigned flow plus the outside value
/// on the miss event.
pub fn one_period_value<F: Real>(list: &[u32], v: &[F], pi: &[F], outside: F) -> F {
    expected_flow(list, v, pi) + outside * miss_prob(list, pi)
}

impl<'a, F: Real> PolicyProblem<'a, F> {
    pub fn n_centers(&self) -> usize {
        self.v.len()
    }

    /// D = 1 + delta + ... + delta^(5 - a0), the remaining-horizon factor.
    pub fn horizon_factor(&self) -> F {
        let mut d = F::zero();
        let mut pow = F::one();
        for _ in 0..=(5 - self.entry_age) {
            d += pow;
            pow *= self.delta;
        }
        d
    }

    /// Discounted outside-option stream over ages a0..=5.
    fn outside_stream(&self) -> F {
        let mut total = F::zero();
        let mut pow = F::one();
        for a in self.entry_age..=5 {
            total += pow * self.v0[a as usize];
            pow *= self.delta;
        }
        total
    }

    /// Period-2 outside value normalized to a per-year equivalent, the outside
    /// option of the period-2 one-period problem. Only defined for a0 < 5.
    fn period2_outside(&self) -> F {
        debug_assert!(self.entry_age < 5);
        let mut num = F::zero();
        let mut den = F::zero();
        let mut pow = F::one();
        for a in (self.entry_age + 1)..=5 {
            num += pow * self.v0[a as usize];
            den += pow;
            pow *= self.delta;
        }
        num / den
    }

    /// Total two-period value of a list pair, in the configured objective mode.
    pub fn total_value(&self, r1: &[u32], r2: &[u32]) -> F {
        match self.mode {
            ObjectiveMode::Expanded => self.expanded_value(r1, r2),
            ObjectiveMode::Succinct => self.succinct_value(r1, r2),
        }
    }

    /// Three-branch value: assigned in period 1 and kept until exit;
    /// waitlisted once then assigned; waitlisted in both periods.
    pub fn expanded_value(&self, r1: &[u32], r2: &[u32]) -> F {
        let d = self.horizon_factor();
        let u1 = expected_flow(r1, self.v, self.pi1);
        let p1 = miss_prob(r1, self.pi1);
        let u2 = expected_flow(r2, self.v, self.pi2);
        let p2 = miss_prob(r2, self.pi2);
        let a0 = self.entry_age as usize;
        d * u1
            + p1 * ((F::one() - p2) * self.v0[a0] + (d - F::one()) * u2 + p2 * self.outside_stream())
    }

    /// Collapsed single-lottery form: v dot blended lottery plus the outside
    /// term with per-period waitlist weights.
    pub fn succinct_value(&self, r1: &[u32], r2: &[u32]) -> F {
        let horizon = 5 - self.entry_age as i32;
        let delta_tilde =
            self.delta * (F::one() - self.delta.powi(horizon)) / (F::one() - self.delta);
        let u1 = expected_flow(r1, self.v, self.pi1);
        let p1 = miss_prob(r1, self.pi1);
        let u2 = expected_flow(r2, self.v, self.pi2);
        let p2 = miss_prob(r2, self.pi2);
        let p_tilde = delta_tilde / (F::one() + delta_tilde) * p1;
        let blended = (F::one() - p_tilde) * u1 + p_tilde * u2;
        let mut outside = self.v0[self.entry_age as usize] * p1;
        let mut pow = self.delta;
        for a in (self.entry_age + 1)..=5 {
            outside += pow * self.v0[a as usize] * p2;
            pow *= self.delta;
        }
        blended + outside
    }

    /// Canonical form of a set of centers: descending utility, index ascending
    /// on ties.
    fn canonical(&self, set: &[u32]) -> IndexList {
        let mut list: IndexList = set.iter().copied().collect();
        list.sort_unstable_by(|&a, &b| {
            self.v[b as usize]
                .partial_cmp(&self.v[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        list
    }
}

/// Greedy marginal-improvement construction of the best single-period list:
/// repeatedly add the center that most improves the one-period value, stop
/// when nothing improves or the cap is hit. Exact for this objective class.
pub fn best_single_period_rol<F: Real>(v: &[F], outside: F, pi: &[F], k_max: usize) -> IndexList {
    let k_max = k_max.min(MAX_ROL_LEN);
    let mut list = IndexList::new();
    let mut value = outside;
    while list.len() < k_max {
        let mut best: Option<(F, u32, IndexList)> = None;
        for j in 0..v.len() as u32 {
            if list.contains(&j) {
                continue;
            }
            let mut cand = list.clone();
            // Insert keeping descending-v order (ties by index).
            let pos = cand
                .iter()
                .position(|&m| {
                    (v[m as usize], std::cmp::Reverse(m)) < (v[j as usize], std::cmp::Reverse(j))
                })
                .unwrap_or(cand.len());
            cand.insert(pos, j);
            let val = one_period_value(&cand, v, pi, outside);
            let better = match &best {
                None => true,
                Some((bv, bj, _)) => val > *bv || (val == *bv && j < *bj),
            };
            if better {
                best = Some((val, j, cand));
            }
        }
        match best {
            Some((val, _, cand)) if val > value => {
                list = cand;
                value = val;
            }
            _ => break,
        }
    }
    list
}

/// A solved list pair with the value it attains and the number of accepted
/// drop-or-swap refinements of the first-round list.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSolution<F> {
    pub r1: IndexList,
    pub r2: IndexList,
    pub value: F,
    pub updates: u32,
}

/// Heuristic list-pair solver.
///
/// The second-round list is the greedy optimum of the period-2 continuation
/// problem (the choice of the second list does not enter the period-1 flow
/// value, so it separates). The first-round list starts at the myopic greedy
/// list and is refined by best drop-or-swap steps on the total value until no
/// strict improvement remains; each sweep evaluates at most K(J+1) candidates.
pub fn approx_optimal_pair<F: Real>(p: &PolicyProblem<F>) -> PairSolution<F> {
    let r2 = if p.entry_age >= 5 {
        IndexList::new()
    } else {
        best_single_period_rol(p.v, p.period2_outside(), p.pi2, p.k_max)
    };

    let a0 = p.entry_age as usize;
    let mut r1 = best_single_period_rol(p.v, p.v0[a0], p.pi1, p.k_max);
    let mut value = p.total_value(&r1, &r2);
    let mut updates = 0u32;

    // Strict improvement on a bounded objective terminates; the cap is a
    // backstop against pathological float cycling.
    for _ in 0..(MAX_ROL_LEN as u32 * 64) {
        let mut best: Option<(F, IndexList)> = None;
        for k in 0..r1.len() {
            let mut base: IndexList = r1.clone();
            base.remove(k);
            // Pure drop first, then each replacement center in id order.
            let drop_val = p.total_value(&base, &r2);
            if best.as_ref().map_or(drop_val > value, |(bv, _)| drop_val > *bv) {
                best = Some((drop_val, base.clone()));
            }
            for j in 0..p.v.len() as u32 {
                if r1.contains(&j) {
                    continue;
                }
                let mut cand_set: ArrayVec<u32, MAX_ROL_LEN> = base.clone();
                cand_set.push(j);
                let cand = p.canonical(&cand_set);
                let val = p.total_value(&cand, &r2);
                if best.as_ref().map_or(val > value, |(bv, _)| val > *bv) {
                    best = Some((val, cand));
                }
            }
        }
        match best {
            Some((val, cand)) if val > value => {
                r1 = cand;
                value = val;
                updates += 1;
            }
            _ => break,
        }
    }
    PairSolution { r1, r2, value, updates }
}

fn subsets_up_to<F: Real>(p: &PolicyProblem<F>, k: usize) -> Vec<IndexList> {
    let n = p.v.len() as u32;
    let mut out = vec![IndexList::new()];
    let mut current: Vec<u32> = Vec::with_capacity(k);
    fn rec<F: Real>(
        p: &PolicyProblem<F>,
        start: u32,
        n: u32,
        k: usize,
        current: &mut Vec<u32>,
        out: &mut Vec<IndexList>,
    ) {
        if current.len() == k {
            return;
        }
        for j in start..n {
            current.push(j);
            out.push(p.canonical(current));
            rec(p, j + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(p, 0, n, k, &mut current, &mut out);
    out
}

/// Number of candidate pairs an exhaustive search would evaluate.
pub fn brute_force_pair_count(n_centers: usize, k: usize) -> u128 {
    let mut subsets: u128 = 0;
    let mut binom: u128 = 1;
    for m in 0..=k.min(n_centers) {
        if m > 0 {
            binom = binom * (n_centers as u128 - m as u128 + 1) / m as u128;
        }
        subsets += binom;
    }
    subsets * subsets
}

pub const BRUTE_FORCE_PAIR_GUARD: u128 = 10_000_000;

/// Exact argmax of the total value over every pair of lists up to length
/// `k_max`, with within-list order canonicalized to descending utility.
/// Refuses enumerations larger than the pair guard.
pub fn brute_force_optimal_pair<F: Real>(p: &PolicyProblem<F>) -> Result<PairSolution<F>> {
    let pairs = brute_force_pair_count(p.v.len(), p.k_max);
    if pairs > BRUTE_FORCE_PAIR_GUARD {
        return Err(Error::EnumerationGuard { pairs, limit: BRUTE_FORCE_PAIR_GUARD });
    }
    let lists = subsets_up_to(p, p.k_max);
    let mut best: Option<PairSolution<F>> = None;
    for r1 in &lists {
        for r2 in &lists {
            let value = p.total_value(r1, r2);
            if best.as_ref().map_or(true, |b| value > b.value) {
                best = Some(PairSolution { r1: r1.clone(), r2: r2.clone(), value, updates: 0 });
            }
        }
    }
    Ok(best.expect("enumeration includes the empty pair"))
}

/// Configuration of the approximation-quality benchmark: per dispersion value
/// `c`, utilities are drawn as v_j ~ N(c (1 - pi1_j), 1) so that larger `c`
/// makes selective centers more attractive and the myopic list worse.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiaBenchConfig {
    pub n_centers: usize,
    pub k_max: usize,
    pub draws: usize,
    pub c_values: Vec<f64>,
    pub pi1: Vec<f64>,
    pub pi2: Vec<f64>,
    pub entry_age: u8,
    pub delta: f64,
}

/// The dispersion values of the benchmark table.
pub const BENCH_C_TABLE: [f64; 3] = [0.0, 1.0, 2.0];
/// Alternate preset mentioned alongside the table.
pub const BENCH_C_ALT: [f64; 3] = [0.0, 0.5, 1.0];

impl MiaBenchConfig {
    /// Stand-in admission probabilities: per-center selectivity thresholds
    /// spread over the score grid, evaluated at a mid score for period 1 and
    /// at the bonus-adjusted score for period 2.
    pub fn synthetic(n_centers: usize, k_max: usize, draws: usize, c_values: Vec<f64>) -> Self {
        let logistic = |s: f64, tau: f64| 1.0 / (1.0 + ((tau - s) / 1.25).exp());
        let tau = |j: usize| {
            24.5 + 9.0 * (j as f64) / ((n_centers - 1).max(1) as f64)
        };
        let pi1 = (0..n_centers).map(|j| logistic(26.0, tau(j))).collect();
        let pi2 = (0..n_centers).map(|j| logistic(28.0, tau(j))).collect();
        MiaBenchConfig {
            n_centers,
            k_max,
            draws,
            c_values,
            pi1,
            pi2,
            entry_age: 0,
            delta: DELTA_DEFAULT,
        }
    }
}

/// One row of the benchmark: the fraction of draws where the heuristic attains
/// the exhaustive optimum, and the distribution of refinement counts
/// (0, 1, 2, 3, 4, 5-or-more).
#[derive(Clone, Debug, PartialEq)]
pub struct MiaBenchRow {
    pub c: f64,
    pub fraction_correct: f64,
    pub update_hist: [f64; 6],
}

pub fn mia_benchmark(cfg: &MiaBenchConfig, seed: u64) -> Result<Vec<MiaBenchRow>> {
    if cfg.pi1.len() != cfg.n_centers || cfg.pi2.len() != cfg.n_centers {
        return Err(Error::Parameter("pi length must match the center count".into()));
    }
    let v0 = [0.0; 6];
    let mut rows = Vec::new();
    for (ci, &c) in cfg.c_values.iter().enumerate() {
        let results: Vec<(bool, u32)> = (0..cfg.draws)
            .into_par_iter()
            .map(|m| {
                let mut rng = seed::stream(seed, &format!("bench/{ci}/{m}"));
                let v: Vec<f64> = (0..cfg.n_centers)
                    .map(|j| c * (1.0 - cfg.pi1[j]) + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let problem = PolicyProblem {
                    entry_age: cfg.entry_age,
                    delta: cfg.delta,
                    k_max: cfg.k_max,
                    mode: ObjectiveMode::Expanded,
                    v: &v,
                    v0: &v0,
                    pi1: &cfg.pi1,
                    pi2: &cfg.pi2,
                };
                let approx = approx_optimal_pair(&problem);
                let brute = brute_force_optimal_pair(&problem).expect("guarded size");
                (approx.value >= brute.value - 1e-9, approx.updates)
            })
            .collect();
        let mut hist = [0.0; 6];
        let mut correct = 0usize;
        for (ok, updates) in &results {
            if *ok {
                correct += 1;
            }
            hist[(*updates as usize).min(5)] += 1.0;
        }
        for h in &mut hist {
            *h /= cfg.draws as f64;
        }
        rows.push(MiaBenchRow {
            c,
            fraction_correct: correct as f64 / cfg.draws as f64,
            update_hist: hist,
        });
    }
    Ok(rows)
}
