//! Rational-expectations counterfactuals over the waitlist bonus.
//!
//! For each bonus value and utility draw, beliefs are iterated to a fixed
//! point: solve every applicant's list pair under the current belief, run the
//! assignment year by year, bootstrap the cutoff distributions of every cell,
//! and update. The bootstrap resampling streams are keyed by (cell,
//! replication) but not by iteration, so the iteration map is deterministic
//! and the relative-change residual measures behavioral change rather than
//! resampling noise.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lottery::{bootstrap_cutoffs, BeliefTable, CellKey};
use crate::market::{
    draw_population, simulate_assignments, solve_pair, utility_normals, Entrant, MarketConfig,
    Reapplication, SimPlan,
};
use crate::mechanism::{CenterId, Cutoff, Placement, Rol};
use crate::policy::{materialize_draw, ObjectiveMode, PreparedTheta, Theta};
use crate::seed;

/// One counterfactual scenario: the bonus, the number of utility draws, and
/// the fixed-point controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub bonus: i32,
    /// Utility draws (each simulated to its own equilibrium).
    #[serde(default = "Scenario::default_draws")]
    pub draws: usize,
    /// Relative-change convergence tolerance on the belief table.
    #[serde(default = "Scenario::default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "Scenario::default_max_iters")]
    pub max_iters: usize,
    /// Mix-back weight on the previous belief (0 = plain iteration).
    #[serde(default)]
    pub damping: f64,
    /// Bootstrap replications inside each iteration.
    #[serde(default = "Scenario::default_bootstrap")]
    pub bootstrap: u32,
    pub seed: u64,
}

impl Scenario {
    fn default_draws() -> usize {
        7
    }
    fn default_epsilon() -> f64 {
        0.01
    }
    fn default_max_iters() -> usize {
        50
    }
    fn default_bootstrap() -> u32 {
        500
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::config("scenario.draws: must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("scenario.epsilon: must be positive"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::config("scenario.damping: must lie in [0,1)"));
        }
        if self.bootstrap == 0 {
            return Err(Error::config("scenario.bootstrap: must be at least 1"));
        }
        Ok(())
    }
}

/// Realized discounted utilities of one applicant in one equilibrium:
/// `v1` is the period-1 flow, `v2` the continuation valued at period 2,
/// and `total = v1 + delta * v2` exactly.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApplicantWelfare {
    pub id: u64,
    pub entry_year: u32,
    pub entry_age: u8,
    pub s1: i32,
    pub list_len1: usize,
    pub waitlisted1: bool,
    pub list_len2: Option<usize>,
    pub waitlisted2: Option<bool>,
    pub v1: f64,
    pub v2: f64,
    pub total: f64,
}

/// Outcome of one (bonus, draw) equilibrium.
#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumOutcome {
    pub bonus: i32,
    pub draw: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Relative belief change per iteration.
    pub residuals: Vec<f64>,
    /// True when the residual sequence ever increased before stopping.
    pub oscillated: bool,
    pub belief: BeliefTable,
    pub welfare: Vec<ApplicantWelfare>,
    /// Realized cutoffs of the final simulated assignment.
    pub cutoffs: BTreeMap<CellKey, BTreeMap<CenterId, Cutoff>>,
}

fn relative_change(new: &BeliefTable, old: &BeliefTable) -> f64 {
    let mut diff = 0.0;
    let mut base = 0.0;
    for (key, centers) in &new.cells {
        let Some(old_centers) = old.cells.get(key) else { continue };
        for (j, pi) in centers {
            let Some(old_pi) = old_centers.get(j) else { continue };
            for (a, b) in pi.iter().zip(old_pi) {
                diff += (a - b) * (a - b);
                base += b * b;
            }
        }
    }
    if base == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (diff / base).sqrt()
}

fn damp(new: &mut BeliefTable, old: &BeliefTable, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for (key, centers) in &mut new.cells {
        let Some(old_centers) = old.cells.get(key) else { continue };
        for (j, pi) in centers.iter_mut() {
            let Some(old_pi) = old_centers.get(j) else { continue };
            for (a, b) in pi.iter_mut().zip(old_pi) {
                *a = (1.0 - lambda) * *a + lambda * b;
            }
        }
    }
}

/// Iterate one (bonus, draw) scenario to its belief fixed point and report
/// realized welfare.
///
/// `initial_belief` is typically the first-stage estimate; it must cover (up
/// to year clamping) the entry and reapplication cells implied by the
/// configuration's cohorts. Non-convergence is an outcome, not an error.
pub fn iterate_equilibrium(
    theta: &Theta,
    config: &MarketConfig,
    scenario: &Scenario,
    draw: usize,
    initial_belief: &BeliefTable,
) -> Result<EquilibriumOutcome> {
    scenario.validate()?;
    config.validate()?;
    let prepared = PreparedTheta::new(theta.clone(), config.n_centers())?;
    let entrants = draw_population(config);
    let center_ids: Vec<CenterId> = (0..config.n_centers() as u32).map(CenterId).collect();

    // Utilities are drawn once per (draw, applicant) and shared across bonus
    // scenarios, so welfare comparisons across bonuses are paired.
    let utilities: Vec<crate::policy::UtilityDraw> = entrants
        .iter()
        .map(|e| {
            let cov = crate::policy::Covariates {
                score: f64::from(e.score.0),
                same_area: config.centers.iter().map(|c| c.area == e.area).collect(),
                center_area: config.centers.iter().map(|c| c.area).collect(),
            };
            let base = utility_normals(scenario.seed, e.id, draw, prepared.theta.n_areas());
            materialize_draw(&prepared, &cov, &base)
        })
        .collect::<Result<_>>()?;

    let mut belief = initial_belief.clone();
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut last_sim: Option<crate::market::SimOutput> = None;
    let boot_seed =
        seed::derive_seed(scenario.seed, &format!("cf-boot/{}/{draw}", scenario.bonus));

    for _ in 0..scenario.max_iters {
        let pairs: Vec<(Rol, Rol)> = entrants
            .iter()
            .zip(&utilities)
            .map(|(e, u)| {
                let lotteries = crate::market::resolve_lotteries(
                    &belief,
                    e,
                    &center_ids,
                    scenario.bonus,
                    config.grid,
                )?;
                Ok(solve_pair(
                    u,
                    &lotteries,
                    e.entry_age,
                    theta.delta,
                    config.k_max,
                    ObjectiveMode::Expanded,
                ))
            })
            .collect::<Result<_>>()?;
        let sim = simulate_assignments(&SimPlan {
            centers: &config.centers,
            entrants: &entrants,
            pairs: &pairs,
            years: config.years,
            grid: config.grid,
            bonus: scenario.bonus,
            tiebreak_seed: config.seed,
        })?;

        let mut next = belief.clone();
        for (key, cell) in &sim.cells {
            let cell_seed = seed::derive_seed(boot_seed, &format!("cell/{}/{}", key.year, key.age));
            let dist = bootstrap_cutoffs(cell, scenario.bootstrap, cell_seed)?;
            next.insert_distribution(*key, &dist)?;
        }
        damp(&mut next, &belief, scenario.damping);

        let residual = relative_change(&next, &belief);
        residuals.push(residual);
        belief = next;
        last_sim = Some(sim);
        if residual <= scenario.epsilon {
            converged = true;
            break;
        }
    }

    let sim = last_sim.ok_or_else(|| Error::config("scenario.max_iters: must be at least 1"))?;
    let welfare = realized_welfare(theta, &entrants, &utilities, &sim)?;
    let cutoffs = sim
        .outcomes
        .iter()
        .map(|(key, o)| (*key, o.cutoffs.clone()))
        .collect();
    let oscillated = residuals.windows(2).any(|w| w[1] > w[0]);

    Ok(EquilibriumOutcome {
        bonus: scenario.bonus,
        draw,
        converged,
        iterations: residuals.len(),
        residuals,
        oscillated,
        belief,
        welfare,
        cutoffs,
    })
}

/// Realized per-applicant utilities from a simulated panel.
///
/// Period 1 is the entry year's flow; period 2 collapses the remaining ages,
/// valued at the start of period 2. An applicant assigned in period 1 keeps
/// her seat; a twice-waitlisted (or non-reapplying) applicant consumes the
/// outside option stream.
fn realized_welfare(
    theta: &Theta,
    entrants: &[Entrant],
    utilities: &[crate::policy::UtilityDraw],
    sim: &crate::market::SimOutput,
) -> Result<Vec<ApplicantWelfare>> {
    let delta = theta.delta;
    sim.histories
        .iter()
        .zip(entrants)
        .zip(utilities)
        .map(|((h, e), u)| {
            debug_assert_eq!(h.id, e.id);
            let a0 = h.entry_age as usize;
            // Discount-sum of the flow x over ages from..=5, valued at `from`.
            let stream = |x: &dyn Fn(usize) -> f64, from: usize| -> f64 {
                let mut total = 0.0;
                let mut pow = 1.0;
                for a in from..=5 {
                    total += pow * x(a);
                    pow *= delta;
                }
                total
            };
            let (v1, v2) = match h.outcome1 {
                Placement::Center(j) => {
                    let vj = u.v[j.0 as usize];
                    (vj, stream(&|_| vj, a0 + 1))
                }
                Placement::Waitlist => {
                    let v1 = u.v0[a0];
                    let v2 = match &h.reapplication {
                        Reapplication::Observed {
                            outcome2: Placement::Center(j), ..
                        } => stream(&|_| u.v[j.0 as usize], a0 + 1),
                        _ => stream(&|a| u.v0[a], a0 + 1),
                    };
                    (v1, v2)
                }
            };
            let (list_len2, waitlisted2) = match &h.reapplication {
                Reapplication::Observed { rol2, outcome2, .. } => {
                    (Some(rol2.len()), Some(outcome2.is_waitlist()))
                }
                _ => (None, None),
            };
            Ok(ApplicantWelfare {
                id: h.id.0,
                entry_year: h.entry_year,
                entry_age: h.entry_age,
                s1: h.s1.0,
                list_len1: h.rol1.len(),
                waitlisted1: h.waitlisted_p1(),
                list_len2,
                waitlisted2,
                v1,
                v2,
                total: v1 + delta * v2,
            })
        })
        .collect()
}

/// Run every (bonus, draw) pair of the scenario list; pairs are independent
/// and run in parallel.
pub fn run_scenarios(
    theta: &Theta,
    config: &MarketConfig,
    scenarios: &[Scenario],
    initial_belief: &BeliefTable,
) -> Result<Vec<EquilibriumOutcome>> {
    let jobs: Vec<(usize, usize)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.draws).map(move |m| (si, m)))
        .collect();
    jobs.into_par_iter()
        .map(|(si, m)| iterate_equilibrium(theta, config, &scenarios[si], m, initial_belief))
        .collect()
}

/// Mean application behavior and welfare per (entry year, entry age, bonus),
/// averaged over applicants and draws.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortWelfareRow {
    pub year: u32,
    pub entry_age: u8,
    pub bonus: i32,
    pub n: usize,
    pub mean_list_len1: f64,
    pub waitlisted1_share: f64,
    pub mean_v1: f64,
    /// Among observed reapplication rounds.
    pub mean_list_len2: f64,
    /// Among period-1 waitlisted applicants with an observed second round.
    pub waitlisted2_share: f64,
    pub mean_v2: f64,
    pub mean_total: f64,
}

/// Distribution summary of total utility per initial-score bucket and bonus.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreBucketRow {
    pub bucket: String,
    pub bonus: i32,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WelfareTables {
    pub cohorts: Vec<CohortWelfareRow>,
    pub score_buckets: Vec<ScoreBucketRow>,
}

fn score_bucket(s1: i32) -> &'static str {
    match s1 {
        ..=25 => "<=25",
        26 => "26",
        27 => "27",
        _ => ">=28",
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Aggregate equilibrium outcomes into the welfare tables.
pub fn welfare_report(outcomes: &[EquilibriumOutcome]) -> WelfareTables {
    #[derive(Default)]
    struct Acc {
        n: usize,
        list1: f64,
        wait1: usize,
        v1: f64,
        n2: usize,
        list2: f64,
        wait2: usize,
        v2: f64,
        total: f64,
    }
    let mut cohorts: BTreeMap<(u32, u8, i32), Acc> = BTreeMap::new();
    let mut buckets: BTreeMap<(&'static str, i32), Vec<f64>> = BTreeMap::new();
    for out in outcomes {
        for w in &out.welfare {
            let acc = cohorts.entry((w.entry_year, w.entry_age, out.bonus)).or_default();
            acc.n += 1;
            acc.list1 += w.list_len1 as f64;
            acc.wait1 += usize::from(w.waitlisted1);
            acc.v1 += w.v1;
            acc.v2 += w.v2;
            acc.total += w.total;
            if let (Some(len2), Some(wl2)) = (w.list_len2, w.waitlisted2) {
                acc.n2 += 1;
                acc.list2 += len2 as f64;
                acc.wait2 += usize::from(wl2);
            }
            buckets.entry((score_bucket(w.s1), out.bonus)).or_default().push(w.total);
        }
    }
    let cohorts = cohorts
        .into_iter()
        .map(|((year, entry_age, bonus), acc)| CohortWelfareRow {
            year,
            entry_age,
            bonus,
            n: acc.n,
            mean_list_len1: acc.list1 / acc.n as f64,
            waitlisted1_share: acc.wait1 as f64 / acc.n as f64,
            mean_v1: acc.v1 / acc.n as f64,
            mean_list_len2: if acc.n2 > 0 { acc.list2 / acc.n2 as f64 } else { 0.0 },
            waitlisted2_share: if acc.n2 > 0 { acc.wait2 as f64 / acc.n2 as f64 } else { 0.0 },
            mean_v2: acc.v2 / acc.n as f64,
            mean_total: acc.total / acc.n as f64,
        })
        .collect();
    let score_buckets = buckets
        .into_iter()
        .map(|((bucket, bonus), mut totals)| {
            totals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = totals.len();
            ScoreBucketRow {
                bucket: bucket.to_string(),
                bonus,
                n,
                mean: totals.iter().sum::<f64>() / n as f64,
                min: totals[0],
                q1: quantile(&totals, 0.25),
                median: quantile(&totals, 0.5),
                q3: quantile(&totals, 0.75),
                max: totals[n - 1],
            }
        })
        .collect();
    WelfareTables { cohorts, score_buckets }
}

/// Sentinel-encoded cutoff histogram rows for one equilibrium: per (year,
/// age), the share of centers at each encoded cutoff value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CutoffHistogramRow {
    pub year: u32,
    pub age: u8,
    pub bonus: i32,
    pub draw: usize,
    /// Score, or 11 for never-filled and 35 for zero-seat centers.
    pub cutoff: i32,
    pub frequency: f64,
}

pub fn cutoff_histogram_report(outcome: &EquilibriumOutcome) -> Vec<CutoffHistogramRow> {
    let mut rows = Vec::new();
    for (key, cutoffs) in &outcome.cutoffs {
        let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
        for c in cutoffs.values() {
            *counts.entry(c.sentinel()).or_insert(0) += 1;
        }
        let total: usize = counts.values().sum();
        for (cutoff, n) in counts {
            rows.push(CutoffHistogramRow {
                year: key.year,
                age: key.age,
                bonus: outcome.bonus,
                draw: outcome.draw,
                cutoff,
                frequency: n as f64 / total as f64,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::test_support::small_config;
    use crate::market::{estimate_first_stage, generate_market};

    fn scenario(bonus: i32, seed: u64) -> Scenario {
        Scenario {
            bonus,
            draws: 1,
            epsilon: 0.01,
            max_iters: 12,
            damping: 0.0,
            bootstrap: 60,
            seed,
        }
    }

    #[test]
    fn slack_market_converges_immediately() {
        let mut config = small_config();
        for c in &mut config.centers {
            c.capacities = [40; 6];
        }
        let panel = generate_market(&config).unwrap();
        let belief = estimate_first_stage(&panel, 40, 3).unwrap();
        let out =
            iterate_equilibrium(&config.theta, &config, &scenario(2, 17), 0, &belief).unwrap();
        // Every center open in every replication: the first update is a
        // fixed point of the all-ones belief on the realized cells.
        assert!(out.converged);
        assert!(out.iterations <= 2);
    }

    #[test]
    fn infinite_epsilon_converges_after_one_iteration() {
        let config = small_config();
        let panel = generate_market(&config).unwrap();
        let belief = estimate_first_stage(&panel, 40, 3).unwrap();
        let mut s = scenario(2, 17);
        s.epsilon = f64::INFINITY;
        let out = iterate_equilibrium(&config.theta, &config, &s, 0, &belief).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn outcome_is_reproducible() {
        let config = small_config();
        let panel = generate_market(&config).unwrap();
        let belief = estimate_first_stage(&panel, 40, 3).unwrap();
        let a = iterate_equilibrium(&config.theta, &config, &scenario(2, 8), 0, &belief).unwrap();
        let b = iterate_equilibrium(&config.theta, &config, &scenario(2, 8), 0, &belief).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn welfare_identity_holds_exactly() {
        let config = small_config();
        let panel = generate_market(&config).unwrap();
        let belief = estimate_first_stage(&panel, 40, 3).unwrap();
        let out = iterate_equilibrium(&config.theta, &config, &scenario(2, 8), 0, &belief).unwrap();
        assert!(!out.welfare.is_empty());
        for w in &out.welfare {
            assert_eq!(w.total, w.v1 + config.theta.delta * w.v2);
        }
    }

    #[test]
    fn bonus_zero_reapplicants_face_fresh_probabilities() {
        // Without a bonus the period-2 lottery of a waitlisted applicant is
        // the fresh-applicant lottery at the same score.
        let config = small_config();
        let panel = generate_market(&config).unwrap();
        let belief = estimate_first_stage(&panel, 40, 3).unwrap();
        let out = iterate_equilibrium(&config.theta, &config, &scenario(0, 9), 0, &belief).unwrap();
        let key = CellKey::new(1, 1);
        if let Some(centers) = out.belief.cells.get(&key) {
            for (j, pi) in centers {
                for (off, s) in config.grid.scores().enumerate() {
                    let fresh = out.belief.pi(key, *j, s).unwrap();
                    assert_eq!(pi[off], fresh);
                }
            }
        }
    }

    #[test]
    fn histogram_mass_on_grid_and_sentinels() {
        let config = small_config();
        let panel = generate_market(&config).unwrap();
        let belief = estimate_first_stage(&panel, 40, 3).unwrap();
        let out = iterate_equilibrium(&config.theta, &config, &scenario(2, 8), 0, &belief).unwrap();
        let rows = cutoff_histogram_report(&out);
        assert!(!rows.is_empty());
        let mut by_cell: BTreeMap<(u32, u8), f64> = BTreeMap::new();
        for r in &rows {
            assert!(
                r.cutoff == 11
                    || r.cutoff == 35
                    || (config.grid.min..=config.grid.max).contains(&r.cutoff)
            );
            *by_cell.entry((r.year, r.age)).or_insert(0.0) += r.frequency;
        }
        for (_, total) in by_cell {
            approx::assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn welfare_report_identity_column() {
        let config = small_config();
        let panel = generate_market(&config).unwrap();
        let belief = estimate_first_stage(&panel, 40, 3).unwrap();
        let outcomes = run_scenarios(
            &config.theta,
            &config,
            &[scenario(0, 5), scenario(2, 5)],
            &belief,
        )
        .unwrap();
        let tables = welfare_report(&outcomes);
        assert!(!tables.cohorts.is_empty());
        assert!(!tables.score_buckets.is_empty());
        for row in &tables.score_buckets {
            assert!(row.min <= row.q1 && row.q1 <= row.median);
            assert!(row.median <= row.q3 && row.q3 <= row.max);
        }
    }
}
