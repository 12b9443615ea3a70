//! Synthetic admission market: a configurable data-generating process plus the
//! descriptive strategic-waiting metrics computed on generated panels.
//!
//! Applicants enter at an exogenous (year, age), draw utilities from the true
//! parameters, solve their list pair under a belief, and the mechanism runs
//! year by year. Assigned applicants keep their seat at later ages, so the
//! published capacity of a cell is the base capacity net of continuing
//! enrollees; waitlisted applicants reapply the next year with the bonus.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lottery::{bootstrap_cutoffs, BeliefTable, CellKey, CutoffDistribution};
use crate::mechanism::{
    apply_waitlist_bonus, run_serial_dictatorship, ApplicantId, AssignmentResult, CellApplicant,
    CenterId, Cutoff, MarketCell, Placement, PriorityScore, Rol, ScoreGrid, TieBreakKey,
};
use crate::policy::{
    approx_optimal_pair, materialize_draw, BaseNormals, Covariates, IndexList, ObjectiveMode,
    PolicyProblem, PreparedTheta, Theta,
};
use crate::seed;

/// One daycare center: its area and per-age seat counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterSpec {
    pub area: u8,
    pub capacities: [u32; 6],
}

/// Number of entrants arriving at one (year, entry age).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub year: u32,
    pub entry_age: u8,
    pub count: u32,
}

/// How the generator obtains the belief applicants optimize against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BeliefSpec {
    /// Logistic admission curves with per-center selectivity thresholds spread
    /// evenly over [tau_min, tau_max].
    Synthetic { tau_min: f64, tau_max: f64, width: f64 },
    /// Iterate synthetic -> behavior -> bootstrapped cutoffs a fixed number of
    /// rounds so the emitted panel is approximately belief-consistent.
    SelfConsistent { rounds: u32, bootstrap: u32 },
    /// Use the given table as-is.
    Supplied { table: BeliefTable },
}

impl Default for BeliefSpec {
    fn default() -> Self {
        BeliefSpec::Synthetic { tau_min: 24.0, tau_max: 32.0, width: 1.0 }
    }
}

/// Full configuration of the data-generating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub years: u32,
    #[serde(default)]
    pub grid: ScoreGrid,
    pub centers: Vec<CenterSpec>,
    pub cohorts: Vec<CohortSpec>,
    /// Probability that an applicant lives outside every center area, so her
    /// same-area indicator is zero everywhere.
    #[serde(default)]
    pub outside_area_share: f64,
    /// Score distribution weights over the grid, low score to high.
    pub score_weights: Vec<f64>,
    pub theta: Theta,
    /// Waitlist bonus added to a reapplicant's score.
    pub bonus: i32,
    /// List length cap for this market.
    pub k_max: usize,
    #[serde(default)]
    pub belief: BeliefSpec,
    pub seed: u64,
}

impl MarketConfig {
    pub fn n_centers(&self) -> usize {
        self.centers.len()
    }

    /// Number of center areas (indices into the sigma blocks).
    pub fn n_center_areas(&self) -> usize {
        self.centers.iter().map(|c| c.area as usize + 1).max().unwrap_or(0)
    }

    /// The area code given to out-of-area applicants; it matches no center and
    /// is intentionally outside the sigma blocks.
    pub fn outside_area(&self) -> u8 {
        self.n_center_areas() as u8
    }

    pub fn validate(&self) -> Result<()> {
        if self.years == 0 {
            return Err(Error::config("market.years: must be positive"));
        }
        if self.centers.is_empty() {
            return Err(Error::config("market.centers: must not be empty"));
        }
        if self.k_max == 0 || self.k_max > crate::mechanism::MAX_ROL_LEN {
            return Err(Error::config(format!(
                "market.k_max: must be in 1..={}",
                crate::mechanism::MAX_ROL_LEN
            )));
        }
        if self.score_weights.len() != self.grid.len() {
            return Err(Error::config(format!(
                "market.score_weights: {} weights for a grid of {} scores",
                self.score_weights.len(),
                self.grid.len()
            )));
        }
        if self.score_weights.iter().any(|w| *w < 0.0)
            || self.score_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config(
                "market.score_weights: must be nonnegative with positive mass",
            ));
        }
        if !(0.0..=1.0).contains(&self.outside_area_share) {
            return Err(Error::config("market.outside_area_share: must lie in [0,1]"));
        }
        for (i, c) in self.cohorts.iter().enumerate() {
            if c.entry_age > 5 {
                return Err(Error::config(format!(
                    "market.cohorts[{i}].entry_age: must be 0..=5"
                )));
            }
            if c.year >= self.years {
                return Err(Error::config(format!(
                    "market.cohorts[{i}].year: {} outside 0..{}",
                    c.year, self.years
                )));
            }
        }
        self.theta.validate(self.n_centers())?;
        if self.theta.n_areas() < self.n_center_areas() {
            return Err(Error::config(format!(
                "market.theta.sigma: {} areas but centers use {}",
                self.theta.n_areas(),
                self.n_center_areas()
            )));
        }
        Ok(())
    }
}

/// One applicant's exogenous entry state.
#[derive(Clone, Debug, PartialEq)]
pub struct Entrant {
    pub id: ApplicantId,
    pub year: u32,
    pub entry_age: u8,
    pub area: u8,
    pub score: PriorityScore,
}

/// Whether and how a period-1 waitlisted applicant shows up again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Reapplication {
    /// Assigned in period 1; reapplication is not allowed.
    NotWaitlisted,
    /// Waitlisted, but the second round falls outside the observed window (or
    /// the applicant aged out).
    Censored,
    /// Waitlisted and the second round is observed. An empty second list means
    /// she chose not to reapply.
    Observed {
        s2: PriorityScore,
        clamped: bool,
        rol2: Rol,
        outcome2: Placement,
    },
}

/// Track record of one applicant across her (up to) two rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApplicantHistory {
    pub id: ApplicantId,
    pub entry_year: u32,
    pub entry_age: u8,
    pub area: u8,
    pub s1: PriorityScore,
    pub rol1: Rol,
    pub outcome1: Placement,
    pub reapplication: Reapplication,
}

impl ApplicantHistory {
    pub fn waitlisted_p1(&self) -> bool {
        self.outcome1.is_waitlist()
    }

    /// The second-round list if the applicant reapplied with a nonempty list.
    pub fn reapplied_rol(&self) -> Option<&Rol> {
        match &self.reapplication {
            Reapplication::Observed { rol2, .. } if !rol2.is_empty() => Some(rol2),
            _ => None,
        }
    }
}

/// A generated (or loaded) panel: the center catalog, per-cell submissions and
/// outcomes, and per-applicant histories.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub centers: Vec<CenterSpec>,
    pub years: u32,
    pub grid: ScoreGrid,
    pub bonus: i32,
    pub k_max: usize,
    /// Seed the panel was generated under; tie-break keys and generation
    /// utility draws derive from it.
    pub seed: u64,
    pub cells: BTreeMap<CellKey, MarketCell>,
    pub outcomes: BTreeMap<CellKey, AssignmentResult>,
    pub histories: Vec<ApplicantHistory>,
    /// Belief the applicants optimized against during generation.
    pub gen_belief: Option<BeliefTable>,
}

impl Panel {
    pub fn n_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn center_ids(&self) -> Vec<CenterId> {
        (0..self.centers.len() as u32).map(CenterId).collect()
    }

    /// Entry states of all applicants, reconstructed from the histories.
    pub fn entrants(&self) -> Vec<Entrant> {
        self.histories
            .iter()
            .map(|h| Entrant {
                id: h.id,
                year: h.entry_year,
                entry_age: h.entry_age,
                area: h.area,
                score: h.s1,
            })
            .collect()
    }

    pub fn covariates(&self, entrant: &Entrant) -> Covariates {
        Covariates {
            score: f64::from(entrant.score.0),
            same_area: self.centers.iter().map(|c| c.area == entrant.area).collect(),
            center_area: self.centers.iter().map(|c| c.area).collect(),
        }
    }

    /// First-round cutoffs of an applicant's entry cell.
    pub fn entry_cutoffs(&self, h: &ApplicantHistory) -> Result<&BTreeMap<CenterId, Cutoff>> {
        let key = CellKey::new(h.entry_year, h.entry_age);
        self.outcomes.get(&key).map(|o| &o.cutoffs).ok_or_else(|| {
            Error::lookup(format!("no outcome for cell (year {}, age {})", key.year, key.age))
        })
    }
}

/// Deterministic tie-break key for an applicant in one cell. Keys are unique
/// with overwhelming probability; the mechanism rejects collisions outright.
pub fn tiebreak_key(seed: u64, year: u32, age: u8, id: ApplicantId) -> TieBreakKey {
    TieBreakKey(seed::derive_u64(seed, &format!("tiebreak/{year}/{age}/{}", id.0)))
}

/// Standard-normal inputs for one applicant's utility draw with the given
/// draw index; generation uses draw 0 and the moment simulator uses 0..S.
pub fn utility_normals(seed: u64, id: ApplicantId, draw: usize, n_areas: usize) -> BaseNormals {
    let mut rng = seed::stream(seed, &format!("util/{}/{draw}", id.0));
    crate::policy::draw_base_normals(n_areas, &mut rng)
}

/// Draw the exogenous applicant population: ids, areas and scores.
pub fn draw_population(config: &MarketConfig) -> Vec<Entrant> {
    let mut rng = seed::stream(config.seed, "population");
    let n_center_areas = config.n_center_areas() as u8;
    let scores: Vec<PriorityScore> = config.grid.scores().collect();
    let total_w: f64 = config.score_weights.iter().sum();
    let mut entrants = Vec::new();
    let mut next_id = 0u64;
    for cohort in &config.cohorts {
        for _ in 0..cohort.count {
            let area = if rng.gen_bool(config.outside_area_share) {
                config.outside_area()
            } else {
                rng.gen_range(0..n_center_areas)
            };
            let mut u = rng.gen_range(0.0..total_w);
            let mut score = *scores.last().unwrap();
            for (s, w) in scores.iter().zip(&config.score_weights) {
                if u < *w {
                    score = *s;
                    break;
                }
                u -= *w;
            }
            entrants.push(Entrant {
                id: ApplicantId(next_id),
                year: cohort.year,
                entry_age: cohort.entry_age,
                area,
                score,
            });
            next_id += 1;
        }
    }
    entrants
}

/// Per-applicant admission probabilities for her two periods, resolved from a
/// belief table: period 1 at her entry cell and score, period 2 at the next
/// (year, age) cell and her bonus-adjusted score.
#[derive(Clone, Debug, PartialEq)]
pub struct EntrantLotteries {
    pub pi1: Vec<f64>,
    pub pi2: Vec<f64>,
}

pub fn resolve_lotteries(
    belief: &BeliefTable,
    entrant: &Entrant,
    centers: &[CenterId],
    bonus: i32,
    grid: ScoreGrid,
) -> Result<EntrantLotteries> {
    let p1 = CellKey::new(entrant.year, entrant.entry_age);
    let pi1 = belief.pi_vector(p1, centers, entrant.score)?;
    let pi2 = if entrant.entry_age < 5 {
        let s2 = apply_waitlist_bonus(entrant.score, bonus, grid).score;
        let p2 = CellKey::new(entrant.year + 1, entrant.entry_age + 1);
        belief.pi_vector(p2, centers, s2)?
    } else {
        vec![0.0; centers.len()]
    };
    Ok(EntrantLotteries { pi1, pi2 })
}

pub(crate) fn rol_from_indices(list: &IndexList) -> Rol {
    Rol::new(list.iter().map(|&i| CenterId(i)).collect()).expect("solver lists are valid")
}

/// Solve one applicant's list pair given her utilities and resolved lotteries.
pub fn solve_pair(
    draw: &crate::policy::UtilityDraw,
    lotteries: &EntrantLotteries,
    entry_age: u8,
    delta: f64,
    k_max: usize,
    mode: ObjectiveMode,
) -> (Rol, Rol) {
    let problem = PolicyProblem {
        entry_age,
        delta,
        k_max,
        mode,
        v: &draw.v,
        v0: &draw.v0,
        pi1: &lotteries.pi1,
        pi2: &lotteries.pi2,
    };
    let sol = approx_optimal_pair(&problem);
    (rol_from_indices(&sol.r1), rol_from_indices(&sol.r2))
}

/// Inputs to the year-by-year assignment simulation. The list pairs are solved
/// beforehand; this stage is pure mechanism plus capacity carry-over.
pub(crate) struct SimPlan<'a> {
    pub centers: &'a [CenterSpec],
    pub entrants: &'a [Entrant],
    pub pairs: &'a [(Rol, Rol)],
    pub years: u32,
    pub grid: ScoreGrid,
    pub bonus: i32,
    pub tiebreak_seed: u64,
}

pub(crate) struct SimOutput {
    pub cells: BTreeMap<CellKey, MarketCell>,
    pub outcomes: BTreeMap<CellKey, AssignmentResult>,
    pub histories: Vec<ApplicantHistory>,
}

/// Run the mechanism year by year with capacity carry-over.
pub(crate) fn simulate_assignments(plan: &SimPlan<'_>) -> Result<SimOutput> {
    #[derive(Clone, Copy)]
    struct Enrollee {
        center: CenterId,
        year: u32,
        age: u8,
    }
    struct Pending {
        entrant_idx: usize,
        s2: PriorityScore,
    }

    let mut enrolled: Vec<Enrollee> = Vec::new();
    let mut cells = BTreeMap::new();
    let mut outcomes = BTreeMap::new();
    let mut histories: Vec<Option<ApplicantHistory>> = vec![None; plan.entrants.len()];
    // Reapplicants scheduled into their second-round cell.
    let mut pending: BTreeMap<CellKey, Vec<Pending>> = BTreeMap::new();

    for year in 0..plan.years {
        for age in 0u8..=5 {
            let key = CellKey::new(year, age);
            let mut members: Vec<(usize, PriorityScore, Rol, bool)> = Vec::new();
            for (idx, e) in plan.entrants.iter().enumerate() {
                if e.year == year && e.entry_age == age {
                    members.push((idx, e.score, plan.pairs[idx].0.clone(), false));
                }
            }
            for p in pending.remove(&key).unwrap_or_default() {
                members.push((p.entrant_idx, p.s2, plan.pairs[p.entrant_idx].1.clone(), true));
            }
            if members.is_empty() {
                continue;
            }

            let mut capacities: BTreeMap<CenterId, u32> = plan
                .centers
                .iter()
                .enumerate()
                .map(|(j, c)| (CenterId(j as u32), c.capacities[age as usize]))
                .collect();
            for e in &enrolled {
                // A child assigned at (year0, age0) occupies a seat of the
                // cohort age she has grown into.
                if e.year < year && e.age as u32 + (year - e.year) == u32::from(age) {
                    let seats = capacities.get_mut(&e.center).unwrap();
                    *seats = seats.saturating_sub(1);
                }
            }

            let applicants: Vec<CellApplicant> = members
                .iter()
                .map(|&(idx, score, ref rol, _)| CellApplicant {
                    id: plan.entrants[idx].id,
                    score,
                    tiebreak: tiebreak_key(plan.tiebreak_seed, year, age, plan.entrants[idx].id),
                    rol: rol.clone(),
                })
                .collect();
            let cell = MarketCell { year, age, applicants, capacities };
            let outcome = run_serial_dictatorship(&cell)?;

            for &(idx, score, _, is_reapplication) in &members {
                let e = &plan.entrants[idx];
                let placement = outcome.placement(e.id).expect("member present");
                if let Placement::Center(j) = placement {
                    enrolled.push(Enrollee { center: j, year, age });
                }
                if is_reapplication {
                    let h = histories[idx].as_mut().expect("period 1 recorded");
                    if let Reapplication::Observed { outcome2, .. } = &mut h.reapplication {
                        *outcome2 = placement;
                    }
                } else {
                    let mut history = ApplicantHistory {
                        id: e.id,
                        entry_year: e.year,
                        entry_age: e.entry_age,
                        area: e.area,
                        s1: score,
                        rol1: plan.pairs[idx].0.clone(),
                        outcome1: placement,
                        reapplication: Reapplication::NotWaitlisted,
                    };
                    if placement.is_waitlist() {
                        history.reapplication = if e.entry_age >= 5 || year + 1 >= plan.years {
                            Reapplication::Censored
                        } else {
                            let bonused = apply_waitlist_bonus(score, plan.bonus, plan.grid);
                            let rol2 = plan.pairs[idx].1.clone();
                            if !rol2.is_empty() {
                                pending
                                    .entry(CellKey::new(year + 1, e.entry_age + 1))
                                    .or_default()
                                    .push(Pending { entrant_idx: idx, s2: bonused.score });
                            }
                            Reapplication::Observed {
                                s2: bonused.score,
                                clamped: bonused.clamped,
                                rol2,
                                outcome2: Placement::Waitlist,
                            }
                        };
                    }
                    histories[idx] = Some(history);
                }
            }
            cells.insert(key, cell);
            outcomes.insert(key, outcome);
        }
    }

    Ok(SimOutput { cells, outcomes, histories: histories.into_iter().flatten().collect() })
}

/// Synthetic logistic belief: per-center thresholds spread evenly over the
/// configured range, the same curve in every cell.
pub fn synthetic_belief(
    grid: ScoreGrid,
    years: u32,
    n_centers: usize,
    tau_min: f64,
    tau_max: f64,
    width: f64,
) -> BeliefTable {
    let tau = |j: usize| {
        if n_centers <= 1 {
            (tau_min + tau_max) / 2.0
        } else {
            tau_min + (tau_max - tau_min) * j as f64 / (n_centers - 1) as f64
        }
    };
    let mut table = BeliefTable::new(grid);
    for year in 0..years {
        for age in 0u8..=5 {
            let centers: BTreeMap<CenterId, Vec<f64>> = (0..n_centers)
                .map(|j| {
                    let pi: Vec<f64> = grid
                        .scores()
                        .map(|s| 1.0 / (1.0 + ((tau(j) - f64::from(s.0)) / width).exp()))
                        .collect();
                    (CenterId(j as u32), pi)
                })
                .collect();
            table.cells.insert(CellKey::new(year, age), centers);
        }
    }
    table
}

/// First-stage estimation over a whole panel: bootstrap every cell and collect
/// the admission probabilities into a belief table.
pub fn estimate_first_stage(panel: &Panel, b: u32, seed: u64) -> Result<BeliefTable> {
    let mut dists: BTreeMap<CellKey, CutoffDistribution> = BTreeMap::new();
    for (key, cell) in &panel.cells {
        let cell_seed = seed::derive_seed(seed, &format!("cell/{}/{}", key.year, key.age));
        dists.insert(*key, bootstrap_cutoffs(cell, b, cell_seed)?);
    }
    let table = BeliefTable::from_distributions(panel.grid, &dists)?;
    table.validate_monotone()?;
    Ok(table)
}

fn solve_all_pairs(
    config: &MarketConfig,
    entrants: &[Entrant],
    prepared: &PreparedTheta,
    belief: &BeliefTable,
) -> Result<Vec<(Rol, Rol)>> {
    let center_ids: Vec<CenterId> = (0..config.n_centers() as u32).map(CenterId).collect();
    entrants
        .iter()
        .map(|e| {
            let cov = Covariates {
                score: f64::from(e.score.0),
                same_area: config.centers.iter().map(|c| c.area == e.area).collect(),
                center_area: config.centers.iter().map(|c| c.area).collect(),
            };
            let base = utility_normals(config.seed, e.id, 0, prepared.theta.n_areas());
            let draw = materialize_draw(prepared, &cov, &base)?;
            let lotteries = resolve_lotteries(belief, e, &center_ids, config.bonus, config.grid)?;
            Ok(solve_pair(
                &draw,
                &lotteries,
                e.entry_age,
                prepared.theta.delta,
                config.k_max,
                ObjectiveMode::Expanded,
            ))
        })
        .collect()
}

fn resolve_belief(
    config: &MarketConfig,
    entrants: &[Entrant],
    prepared: &PreparedTheta,
) -> Result<BeliefTable> {
    match &config.belief {
        BeliefSpec::Supplied { table } => Ok(table.clone()),
        BeliefSpec::Synthetic { tau_min, tau_max, width } => Ok(synthetic_belief(
            config.grid,
            config.years,
            config.n_centers(),
            *tau_min,
            *tau_max,
            *width,
        )),
        BeliefSpec::SelfConsistent { rounds, bootstrap } => {
            let BeliefSpec::Synthetic { tau_min, tau_max, width } = BeliefSpec::default() else {
                unreachable!()
            };
            let mut belief = synthetic_belief(
                config.grid,
                config.years,
                config.n_centers(),
                tau_min,
                tau_max,
                width,
            );
            let boot_seed = seed::derive_seed(config.seed, "gen-bootstrap");
            for _ in 0..*rounds {
                let pairs = solve_all_pairs(config, entrants, prepared, &belief)?;
                let sim = simulate_assignments(&SimPlan {
                    centers: &config.centers,
                    entrants,
                    pairs: &pairs,
                    years: config.years,
                    grid: config.grid,
                    bonus: config.bonus,
                    tiebreak_seed: config.seed,
                })?;
                // Overwrite realized cells, keep the prior elsewhere so every
                // lookup keeps resolving even when some cell never realizes.
                for (key, cell) in &sim.cells {
                    let cell_seed =
                        seed::derive_seed(boot_seed, &format!("cell/{}/{}", key.year, key.age));
                    let dist = bootstrap_cutoffs(cell, *bootstrap, cell_seed)?;
                    belief.insert_distribution(*key, &dist)?;
                }
            }
            Ok(belief)
        }
    }
}

/// Generate a full panel from the configuration. Byte-identical for a fixed
/// seed.
pub fn generate_market(config: &MarketConfig) -> Result<Panel> {
    config.validate()?;
    let prepared = PreparedTheta::new(config.theta.clone(), config.n_centers())?;
    let entrants = draw_population(config);
    let belief = resolve_belief(config, &entrants, &prepared)?;
    let pairs = solve_all_pairs(config, &entrants, &prepared, &belief)?;
    let sim = simulate_assignments(&SimPlan {
        centers: &config.centers,
        entrants: &entrants,
        pairs: &pairs,
        years: config.years,
        grid: config.grid,
        bonus: config.bonus,
        tiebreak_seed: config.seed,
    })?;
    Ok(Panel {
        centers: config.centers.clone(),
        years: config.years,
        grid: config.grid,
        bonus: config.bonus,
        k_max: config.k_max,
        seed: config.seed,
        cells: sim.cells,
        outcomes: sim.outcomes,
        histories: sim.histories,
        gen_belief: Some(belief),
    })
}

/// Whether a reapplicant listed, only in her second round, a center whose
/// first-round cutoff her initial score already cleared.
pub fn drop_safety(
    history: &ApplicantHistory,
    cutoffs_period1: &BTreeMap<CenterId, Cutoff>,
) -> Result<bool> {
    let rol2 = history.reapplied_rol().ok_or_else(|| {
        Error::invalid(format!("applicant {} has no second-round list", history.id))
    })?;
    Ok(rol2.entries().iter().any(|j| {
        let safe = cutoffs_period1.get(j).is_some_and(|c| c.admits(history.s1));
        safe && !history.rol1.contains(*j)
    }))
}

/// Threshold specification for the bonus-pivotality indicator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdSpec {
    /// Cutoffs of the top-ranked centers of the two observed lists.
    ActualCutoffs,
    /// A fixed score for both rounds (28 is the conventional selective level).
    Fixed { score: i32 },
    /// 90th percentile of the score-valued cutoffs in the two cells.
    Percentile90,
    /// Most common score-valued cutoff in the two cells (smallest on ties).
    Mode,
}

/// Bonus pivotality: the initial score misses the first-round threshold but
/// the bonus-adjusted score meets the second-round one.
pub fn delta_k(history: &ApplicantHistory, thresholds: (i32, i32), bonus: i32) -> bool {
    let (sbar1, sbar2) = thresholds;
    history.s1.0 < sbar1 && history.s1.0 + bonus >= sbar2
}

fn cutoff_threshold(c: Cutoff, grid: ScoreGrid) -> i32 {
    match c {
        // An open center is cleared by any score: the first clause of the
        // pivotality indicator can never hold against it.
        Cutoff::Open => grid.min,
        Cutoff::Score(s) => s,
        // A closed center is cleared by no score.
        Cutoff::Closed => grid.max + 1,
    }
}

fn score_cutoffs(outcome: &AssignmentResult) -> Vec<i32> {
    outcome
        .cutoffs
        .values()
        .filter_map(|c| match c {
            Cutoff::Score(s) => Some(*s),
            _ => None,
        })
        .collect()
}

fn percentile90(mut scores: Vec<i32>) -> Option<i32> {
    if scores.is_empty() {
        return None;
    }
    scores.sort_unstable();
    let rank = (scores.len() as f64 * 0.9).ceil() as usize;
    Some(scores[rank.clamp(1, scores.len()) - 1])
}

fn mode_score(scores: &[i32]) -> Option<i32> {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for s in scores {
        *counts.entry(*s).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(s, _)| s)
}

/// Resolve the (first-round, second-round) thresholds for one reapplicant.
pub fn resolve_thresholds(
    spec: ThresholdSpec,
    history: &ApplicantHistory,
    panel: &Panel,
) -> Result<(i32, i32)> {
    let p1 = CellKey::new(history.entry_year, history.entry_age);
    let p2 = CellKey::new(history.entry_year + 1, history.entry_age + 1);
    let outcome1 = panel
        .outcomes
        .get(&p1)
        .ok_or_else(|| Error::lookup("missing first-round cell outcome"))?;
    match spec {
        ThresholdSpec::Fixed { score } => Ok((score, score)),
        ThresholdSpec::ActualCutoffs => {
            let top1 = history.rol1.entries().first().ok_or_else(|| {
                Error::invalid("empty first-round list for actual-cutoff thresholds")
            })?;
            let rol2 = history.reapplied_rol().ok_or_else(|| {
                Error::invalid("no second-round list for actual-cutoff thresholds")
            })?;
            let top2 = rol2.entries().first().expect("nonempty by reapplied_rol");
            let outcome2 = panel
                .outcomes
                .get(&p2)
                .ok_or_else(|| Error::lookup("missing second-round cell outcome"))?;
            let c1 = outcome1
                .cutoffs
                .get(top1)
                .ok_or_else(|| Error::lookup(format!("no cutoff for center {top1}")))?;
            let c2 = outcome2
                .cutoffs
                .get(top2)
                .ok_or_else(|| Error::lookup(format!("no cutoff for center {top2}")))?;
            Ok((cutoff_threshold(*c1, panel.grid), cutoff_threshold(*c2, panel.grid)))
        }
        ThresholdSpec::Percentile90 | ThresholdSpec::Mode => {
            let outcome2 = panel
                .outcomes
                .get(&p2)
                .ok_or_else(|| Error::lookup("missing second-round cell outcome"))?;
            let s1 = score_cutoffs(outcome1);
            let s2 = score_cutoffs(outcome2);
            let (t1, t2) = match spec {
                ThresholdSpec::Percentile90 => (percentile90(s1), percentile90(s2)),
                _ => (mode_score(&s1), mode_score(&s2)),
            };
            match (t1, t2) {
                (Some(a), Some(b)) => Ok((a, b)),
                _ => Err(Error::invalid("no score-valued cutoffs to resolve thresholds from")),
            }
        }
    }
}

/// Per-cell descriptive row: size, scores, list lengths, assignment-rank shares.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummaryRow {
    pub year: u32,
    pub age: u8,
    pub applications: usize,
    pub mean_score: f64,
    pub mean_list_len: f64,
    /// Share assigned to their 1st..5th listed choice.
    pub rank_shares: [f64; 5],
    pub unassigned_share: f64,
}

/// Waitlist funnel per entry age: waitlisted, reapplied, and dropped a safety.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntryAgeRow {
    pub entry_age: u8,
    pub applications: usize,
    pub waitlisted: usize,
    pub reapplied: usize,
    pub drop_safety: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarketSummary {
    pub cells: Vec<CellSummaryRow>,
    pub entry_ages: Vec<EntryAgeRow>,
}

/// Descriptive tables over a panel: per-cell application statistics and the
/// per-entry-age waitlist funnel.
pub fn summarize(panel: &Panel) -> Result<MarketSummary> {
    let mut cells = Vec::new();
    for (key, cell) in &panel.cells {
        let outcome = &panel.outcomes[key];
        let n = cell.applicants.len();
        let mean_score =
            cell.applicants.iter().map(|a| f64::from(a.score.0)).sum::<f64>() / n as f64;
        let mean_list_len =
            cell.applicants.iter().map(|a| a.rol.len() as f64).sum::<f64>() / n as f64;
        let mut rank_shares = [0.0; 5];
        let mut unassigned = 0usize;
        for a in &cell.applicants {
            match outcome.placement(a.id).expect("applicant present") {
                Placement::Center(j) => {
                    let rank = a
                        .rol
                        .entries()
                        .iter()
                        .position(|&x| x == j)
                        .expect("assigned a listed center");
                    rank_shares[rank] += 1.0;
                }
                Placement::Waitlist => unassigned += 1,
            }
        }
        for r in &mut rank_shares {
            *r /= n as f64;
        }
        cells.push(CellSummaryRow {
            year: key.year,
            age: key.age,
            applications: n,
            mean_score,
            mean_list_len,
            rank_shares,
            unassigned_share: unassigned as f64 / n as f64,
        });
    }

    let mut by_age: BTreeMap<u8, EntryAgeRow> = BTreeMap::new();
    for h in &panel.histories {
        let row = by_age.entry(h.entry_age).or_insert(EntryAgeRow {
            entry_age: h.entry_age,
            applications: 0,
            waitlisted: 0,
            reapplied: 0,
            drop_safety: 0,
        });
        row.applications += 1;
        if h.waitlisted_p1() {
            row.waitlisted += 1;
        }
        if h.reapplied_rol().is_some() {
            row.reapplied += 1;
            if drop_safety(h, panel.entry_cutoffs(h)?)? {
                row.drop_safety += 1;
            }
        }
    }
    Ok(MarketSummary { cells, entry_ages: by_age.into_values().collect() })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::policy::{DELTA_DEFAULT, GAMMA_FIXED};

    pub fn small_theta(n_centers: usize, n_areas: usize) -> Theta {
        let mut sigma = vec![vec![0.0; n_areas]; n_areas];
        for (i, row) in sigma.iter_mut().enumerate() {
            row[i] = 0.5;
        }
        Theta {
            alpha: (0..n_centers).map(|j| 2.0 - j as f64).collect(),
            beta: vec![0.0; n_centers],
            gamma: GAMMA_FIXED,
            sigma,
            mu0: [0.0, -0.5, -0.5, -0.5, -0.5, -0.5],
            sigma0sq: [0.5; 6],
            delta: DELTA_DEFAULT,
        }
    }

    pub fn small_config() -> MarketConfig {
        MarketConfig {
            years: 2,
            grid: ScoreGrid::default(),
            centers: vec![
                CenterSpec { area: 0, capacities: [2, 2, 2, 2, 2, 2] },
                CenterSpec { area: 0, capacities: [6, 6, 6, 6, 6, 6] },
                CenterSpec { area: 1, capacities: [8, 8, 8, 8, 8, 8] },
            ],
            cohorts: vec![
                CohortSpec { year: 0, entry_age: 0, count: 12 },
                CohortSpec { year: 1, entry_age: 0, count: 12 },
            ],
            outside_area_share: 0.1,
            score_weights: ScoreGrid::default()
                .scores()
                .map(|s| (-((f64::from(s.0) - 26.0) / 3.0).powi(2)).exp())
                .collect(),
            theta: small_theta(3, 2),
            bonus: 2,
            k_max: 2,
            belief: BeliefSpec::default(),
            seed: 99,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::small_config;
    use super::*;

    #[test]
    fn zero_applicants_empty_panel() {
        let mut config = small_config();
        config.cohorts = vec![];
        let panel = generate_market(&config).unwrap();
        assert!(panel.cells.is_empty());
        assert!(panel.histories.is_empty());
    }

    #[test]
    fn slack_market_no_waitlist() {
        let mut config = small_config();
        for c in &mut config.centers {
            c.capacities = [50; 6];
        }
        // Everyone prefers any center to the outside option.
        config.theta.alpha = vec![8.0, 7.0, 6.0];
        config.theta.mu0 = [0.0, -5.0, -5.0, -5.0, -5.0, -5.0];
        config.theta.sigma0sq = [0.01; 6];
        let panel = generate_market(&config).unwrap();
        assert!(!panel.histories.is_empty());
        assert!(panel.histories.iter().all(|h| !h.waitlisted_p1()));
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_config();
        let a = generate_market(&config).unwrap();
        let b = generate_market(&config).unwrap();
        assert_eq!(a, b);
        let mut other = config;
        other.seed += 1;
        let c = generate_market(&other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn panel_consistency_reruns_identically() {
        let panel = generate_market(&small_config()).unwrap();
        assert!(!panel.cells.is_empty());
        for (key, cell) in &panel.cells {
            let rerun = run_serial_dictatorship(cell).unwrap();
            assert_eq!(&rerun, &panel.outcomes[key]);
        }
    }

    #[test]
    fn histories_respect_bonus_and_window() {
        let config = small_config();
        let panel = generate_market(&config).unwrap();
        for h in &panel.histories {
            match &h.reapplication {
                Reapplication::NotWaitlisted => assert!(!h.outcome1.is_waitlist()),
                Reapplication::Censored => {
                    assert!(h.waitlisted_p1());
                    assert!(h.entry_age >= 5 || h.entry_year + 1 >= panel.years);
                }
                Reapplication::Observed { s2, clamped, .. } => {
                    assert!(h.waitlisted_p1());
                    let bonused = apply_waitlist_bonus(h.s1, panel.bonus, panel.grid);
                    assert_eq!(*s2, bonused.score);
                    assert_eq!(*clamped, bonused.clamped);
                }
            }
        }
    }

    fn history(s1: i32, rol1: &[u32], rol2: &[u32]) -> ApplicantHistory {
        ApplicantHistory {
            id: ApplicantId(0),
            entry_year: 0,
            entry_age: 0,
            area: 0,
            s1: PriorityScore(s1),
            rol1: Rol::new(rol1.iter().map(|&j| CenterId(j)).collect()).unwrap(),
            outcome1: Placement::Waitlist,
            reapplication: Reapplication::Observed {
                s2: PriorityScore(s1 + 2),
                clamped: false,
                rol2: Rol::new(rol2.iter().map(|&j| CenterId(j)).collect()).unwrap(),
                outcome2: Placement::Waitlist,
            },
        }
    }

    #[test]
    fn drop_safety_definition() {
        let cutoffs: BTreeMap<CenterId, Cutoff> =
            [(CenterId(0), Cutoff::Score(28)), (CenterId(1), Cutoff::Score(26))].into();
        // Center 1 was safe (cutoff 26 <= score 26), unlisted in round 1,
        // listed in round 2.
        assert!(drop_safety(&history(26, &[0], &[0, 1]), &cutoffs).unwrap());
        // Second list contained in the first: nothing newly listed.
        assert!(!drop_safety(&history(26, &[0, 1], &[0]), &cutoffs).unwrap());
        // Newly listed center was not safe (cutoff 28 > 26).
        assert!(!drop_safety(&history(26, &[1], &[1, 0]), &cutoffs).unwrap());
        // Not a reapplicant.
        let mut h = history(26, &[0], &[1]);
        h.reapplication = Reapplication::NotWaitlisted;
        assert!(drop_safety(&h, &cutoffs).is_err());
    }

    #[test]
    fn delta_k_clauses() {
        let h = history(26, &[0], &[1]);
        assert!(delta_k(&h, (27, 28), 2));
        let h = history(28, &[0], &[1]);
        assert!(!delta_k(&h, (28, 28), 2));
        let h = history(20, &[0], &[1]);
        assert!(!delta_k(&h, (28, 28), 2));
    }

    #[test]
    fn summary_shares_sum_to_one() {
        let panel = generate_market(&small_config()).unwrap();
        let summary = summarize(&panel).unwrap();
        assert!(!summary.cells.is_empty());
        for row in &summary.cells {
            let total: f64 = row.rank_shares.iter().sum::<f64>() + row.unassigned_share;
            approx::assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn metrics_are_idempotent() {
        let panel = generate_market(&small_config()).unwrap();
        let a = summarize(&panel).unwrap();
        let b = summarize(&panel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_consistent_belief_generates() {
        let mut config = small_config();
        config.belief = BeliefSpec::SelfConsistent { rounds: 2, bootstrap: 40 };
        let panel = generate_market(&config).unwrap();
        assert!(panel.gen_belief.is_some());
        panel.gen_belief.as_ref().unwrap().validate_monotone().unwrap();
    }
}
