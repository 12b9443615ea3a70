//! First-stage lottery machinery: bootstrap cutoff distributions,
//! score-conditional admission probabilities, and the induced per-list
//! lotteries.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::{
    sd_cutoffs, CenterId, Cutoff, MarketCell, PriorityScore, Rol, ScoreGrid, TieBreakKey,
};
use crate::scalar::Real;
use crate::seed;

/// A (year, age) admission round key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct CellKey {
    pub year: u32,
    pub age: u8,
}

impl CellKey {
    pub fn new(year: u32, age: u8) -> Self {
        CellKey { year, age }
    }
}

/// Empirical distribution over cutoff values for each center of one cell,
/// from B bootstrap replications. Stored as replication counts; probabilities
/// are exact count ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct CutoffDistribution {
    pub replications: u32,
    pub per_center: BTreeMap<CenterId, BTreeMap<Cutoff, u32>>,
}

impl CutoffDistribution {
    /// Fraction of replications in which score `s` clears the cutoff of `j`.
    /// `Open` always admits; `Closed` never does.
    pub fn admission_prob(&self, j: CenterId, s: PriorityScore) -> Result<f64> {
        let dist = self
            .per_center
            .get(&j)
            .ok_or_else(|| Error::lookup(format!("no cutoff distribution for center {j}")))?;
        let admitting: u32 = dist.iter().filter(|(c, _)| c.admits(s)).map(|(_, n)| n).sum();
        Ok(f64::from(admitting) / f64::from(self.replications))
    }

    /// Empirical probabilities over cutoff values for one center.
    pub fn probabilities(&self, j: CenterId) -> Result<BTreeMap<Cutoff, f64>> {
        let dist = self
            .per_center
            .get(&j)
            .ok_or_else(|| Error::lookup(format!("no cutoff distribution for center {j}")))?;
        Ok(dist
            .iter()
            .map(|(&c, &n)| (c, f64::from(n) / f64::from(self.replications)))
            .collect())
    }
}

/// Resample the cell's applicants with replacement (same size), run the
/// mechanism on each replication, and record the cutoffs. Deterministic in
/// `(cell, b, seed)`; replications run on independent derived streams.
pub fn bootstrap_cutoffs(cell: &MarketCell, b: u32, seed: u64) -> Result<CutoffDistribution> {
    if b == 0 {
        return Err(Error::invalid("bootstrap needs at least one replication"));
    }
    if cell.applicants.is_empty() {
        return Err(Error::invalid(format!(
            "cannot bootstrap empty cell (year {}, age {})",
            cell.year, cell.age
        )));
    }
    let n = cell.applicants.len();
    let maps: Vec<BTreeMap<CenterId, Cutoff>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = seed::stream(seed, &format!("rep/{rep}"));
            // Resampled pseudo-applicants get fresh tie-break ranks in draw
            // order; duplicates from resampling would otherwise collide.
            let entries: Vec<(PriorityScore, TieBreakKey, &Rol)> = (0..n)
                .map(|k| {
                    let a = &cell.applicants[rng.gen_range(0..n)];
                    (a.score, TieBreakKey(k as u64), &a.rol)
                })
                .collect();
            sd_cutoffs(entries, &cell.capacities)
        })
        .collect();

    let mut per_center: BTreeMap<CenterId, BTreeMap<Cutoff, u32>> = cell
        .capacities
        .keys()
        .map(|&j| (j, BTreeMap::new()))
        .collect();
    for map in maps {
        for (j, c) in map {
            *per_center.get_mut(&j).unwrap().entry(c).or_insert(0) += 1;
        }
    }
    Ok(CutoffDistribution { replications: b, per_center })
}

/// Score-conditional admission probabilities pi(cell, center, score), the
/// belief object handed from the first stage to the choice model and the
/// counterfactual simulations.
///
/// Values are stored densely over the score grid; pi is nondecreasing in the
/// score by construction when built from cutoff distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefTable {
    pub grid: ScoreGrid,
    pub cells: BTreeMap<CellKey, BTreeMap<CenterId, Vec<f64>>>,
}

impl BeliefTable {
    pub fn new(grid: ScoreGrid) -> Self {
        BeliefTable { grid, cells: BTreeMap::new() }
    }

    pub fn insert_distribution(&mut self, key: CellKey, dist: &CutoffDistribution) -> Result<()> {
        let mut centers = BTreeMap::new();
        for &j in dist.per_center.keys() {
            let pi: Vec<f64> = self
                .grid
                .scores()
                .map(|s| dist.admission_prob(j, s))
                .collect::<Result<_>>()?;
            centers.insert(j, pi);
        }
        self.cells.insert(key, centers);
        Ok(())
    }

    pub fn from_distributions(
        grid: ScoreGrid,
        dists: &BTreeMap<CellKey, CutoffDistribution>,
    ) -> Result<Self> {
        let mut table = BeliefTable::new(grid);
        for (key, dist) in dists {
            table.insert_distribution(*key, dist)?;
        }
        Ok(table)
    }

    /// Latest year present in the table; lookups beyond it are clamped
    /// (beliefs about out-of-sample years repeat the last observed year).
    pub fn max_year(&self) -> Option<u32> {
        self.cells.keys().map(|k| k.year).max()
    }

    fn resolve_key(&self, key: CellKey) -> Result<CellKey> {
        let max_year = self
            .max_year()
            .ok_or_else(|| Error::lookup("belief table is empty"))?;
        let clamped = CellKey::new(key.year.min(max_year), key.age);
        if self.cells.contains_key(&clamped) {
            Ok(clamped)
        } else {
            Err(Error::lookup(format!(
                "belief has no cell (year {}, age {})",
                clamped.year, clamped.age
            )))
        }
    }

    /// pi for one (cell, center, score).
    pub fn pi(&self, key: CellKey, j: CenterId, s: PriorityScore) -> Result<f64> {
        let key = self.resolve_key(key)?;
        let centers = &self.cells[&key];
        let pi = centers
            .get(&j)
            .ok_or_else(|| Error::lookup(format!("belief cell has no center {j}")))?;
        let off = self.grid.offset(s).ok_or_else(|| {
            Error::lookup(format!("score {} outside belief grid", s.0))
        })?;
        Ok(pi[off])
    }

    /// Dense pi vector for the given centers at one (cell, score).
    pub fn pi_vector(
        &self,
        key: CellKey,
        centers: &[CenterId],
        s: PriorityScore,
    ) -> Result<Vec<f64>> {
        centers.iter().map(|&j| self.pi(key, j, s)).collect()
    }

    /// Per-list lottery at one (cell, score) under cutoff independence.
    pub fn lottery_from_rol(&self, key: CellKey, rol: &Rol, s: PriorityScore) -> Result<Lottery<f64>> {
        let pairs: Vec<(CenterId, f64)> = rol
            .entries()
            .iter()
            .map(|&j| Ok((j, self.pi(key, j, s)?)))
            .collect::<Result<_>>()?;
        Lottery::from_rol_pis(&pairs)
    }

    /// Validate that pi is within [0, 1] and nondecreasing in the score.
    pub fn validate_monotone(&self) -> Result<()> {
        for (key, centers) in &self.cells {
            for (j, pi) in centers {
                for w in pi.windows(2) {
                    if w[1] < w[0] - 1e-12 {
                        return Err(Error::invalid(format!(
                            "pi not monotone for center {j} in (year {}, age {})",
                            key.year, key.age
                        )));
                    }
                }
                if pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::invalid(format!(
                        "pi outside [0,1] for center {j} in (year {}, age {})",
                        key.year, key.age
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Assignment lottery induced by one ranked list: per-center assignment
/// probabilities plus the waitlist remainder. Unlisted centers carry
/// probability zero and are omitted from the map.
#[derive(Clone, Debug, PartialEq)]
pub struct Lottery<F> {
    pub assign: BTreeMap<CenterId, F>,
    pub waitlist: F,
}

impl<F: Real> Lottery<F> {
    /// Compose the product-form lottery from (center, pi) pairs in list order:
    /// the k-th center is reached only if every earlier one rejected.
    pub fn from_rol_pis(pairs: &[(CenterId, F)]) -> Result<Self> {
        let mut assign = BTreeMap::new();
        let mut reach = F::one();
        for &(j, pi) in pairs {
            if assign.insert(j, reach * pi).is_some() {
                return Err(Error::invalid(format!("duplicate center {j} in ranked list")));
            }
            reach *= F::one() - pi;
        }
        Ok(Lottery { assign, waitlist: reach })
    }

    pub fn prob(&self, j: CenterId) -> F {
        self.assign.get(&j).copied().unwrap_or_else(F::zero)
    }

    /// Total mass; 1 up to rounding for any valid lottery.
    pub fn total(&self) -> F {
        self.assign.values().copied().sum::<F>() + self.waitlist
    }

    /// Expected value of `v` under the assignment part of the lottery,
    /// with `v` indexed by the provided center order.
    pub fn expected_value(&self, centers: &[CenterId], v: &[F]) -> F {
        centers
            .iter()
            .zip(v)
            .map(|(&j, &vj)| self.prob(j) * vj)
            .sum()
    }
}

/// Blend of the two period lotteries into a single effective lottery, with
/// the effective waitlist weight and the horizon-discount aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendedLottery<F> {
    pub l_tilde: Lottery<F>,
    pub p_tilde: F,
    pub delta_tilde: F,
}

/// Collapse the two-period problem into one lottery:
/// `delta_tilde = delta (1 - delta^(5 - a0)) / (1 - delta)`,
/// `p_tilde = delta_tilde / (1 + delta_tilde) * p1`,
/// `l_tilde = (1 - p_tilde) L1 + p_tilde L2`.
pub fn blend_two_period<F: Real>(
    l1: &Lottery<F>,
    l2: &Lottery<F>,
    entry_age: u8,
    delta: F,
) -> BlendedLottery<F> {
    debug_assert!(entry_age <= 5);
    let horizon = 5 - entry_age as i32;
    let delta_tilde = delta * (F::one() - delta.powi(horizon)) / (F::one() - delta);
    let p1 = l1.waitlist;
    let p_tilde = delta_tilde / (F::one() + delta_tilde) * p1;
    let mut assign = BTreeMap::new();
    for (&j, &p) in &l1.assign {
        assign.insert(j, (F::one() - p_tilde) * p);
    }
    for (&j, &p) in &l2.assign {
        *assign.entry(j).or_insert_with(F::zero) += p_tilde * p;
    }
    let waitlist = (F::one() - p_tilde) * l1.waitlist + p_tilde * l2.waitlist;
    BlendedLottery { l_tilde: Lottery { assign, waitlist }, p_tilde, delta_tilde }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::{ApplicantId, CellApplicant};
    use approx::assert_abs_diff_eq;

    fn two_center_pis(pi_a: f64, pi_b: f64) -> Vec<(CenterId, f64)> {
        vec![(CenterId(0), pi_a), (CenterId(1), pi_b)]
    }

    #[test]
    fn product_lottery_matches_worked_example() {
        // pi = (A: 0.1, B: 0.5), list (A, B).
        let l = Lottery::from_rol_pis(&two_center_pis(0.1, 0.5)).unwrap();
        assert_abs_diff_eq!(l.prob(CenterId(0)), 0.10, epsilon = 1e-15);
        assert_abs_diff_eq!(l.prob(CenterId(1)), 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(l.waitlist, 0.45, epsilon = 1e-15);

        // Second period: pi = (A: 0.5, B: 0.9).
        let l = Lottery::from_rol_pis(&two_center_pis(0.5, 0.9)).unwrap();
        assert_abs_diff_eq!(l.prob(CenterId(0)), 0.50, epsilon = 1e-15);
        assert_abs_diff_eq!(l.prob(CenterId(1)), 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(l.waitlist, 0.05, epsilon = 1e-15);
    }

    #[test]
    fn empty_list_is_pure_waitlist() {
        let l = Lottery::<f64>::from_rol_pis(&[]).unwrap();
        assert_eq!(l.waitlist, 1.0);
        assert!(l.assign.is_empty());
    }

    #[test]
    fn duplicate_entries_rejected() {
        let pairs = vec![(CenterId(0), 0.1), (CenterId(0), 0.5)];
        assert!(Lottery::from_rol_pis(&pairs).is_err());
    }

    #[test]
    fn blend_edges() {
        let l1 = Lottery::from_rol_pis(&two_center_pis(0.1, 0.5)).unwrap();
        let l2 = Lottery::from_rol_pis(&two_center_pis(0.5, 0.9)).unwrap();

        // Terminal age: no future, the blend is the period-1 lottery.
        let b = blend_two_period(&l1, &l2, 5, 0.95);
        assert_eq!(b.delta_tilde, 0.0);
        assert_eq!(b.p_tilde, 0.0);
        assert_eq!(b.l_tilde, l1);

        // One remaining future age: delta_tilde = delta.
        let b = blend_two_period(&l1, &l2, 4, 0.95);
        assert_abs_diff_eq!(b.delta_tilde, 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(b.p_tilde, 0.95 / 1.95 * l1.waitlist, epsilon = 1e-12);

        // Blending a lottery with itself returns it.
        let b = blend_two_period(&l1, &l1, 2, 0.95);
        assert_abs_diff_eq!(b.l_tilde.prob(CenterId(0)), l1.prob(CenterId(0)), epsilon = 1e-12);
        assert_abs_diff_eq!(b.l_tilde.waitlist, l1.waitlist, epsilon = 1e-12);
    }

    #[test]
    fn blend_total_mass_is_one_f32_and_f64() {
        let l1 = Lottery::<f32>::from_rol_pis(&[(CenterId(0), 0.3f32), (CenterId(1), 0.7)]).unwrap();
        let l2 = Lottery::<f32>::from_rol_pis(&[(CenterId(1), 0.9f32)]).unwrap();
        let b = blend_two_period(&l1, &l2, 1, 0.95f32);
        assert_abs_diff_eq!(b.l_tilde.total(), 1.0f32, epsilon = 1e-5);

        let l1 = Lottery::<f64>::from_rol_pis(&[(CenterId(0), 0.3), (CenterId(1), 0.7)]).unwrap();
        let l2 = Lottery::<f64>::from_rol_pis(&[(CenterId(1), 0.9)]).unwrap();
        let b = blend_two_period(&l1, &l2, 1, 0.95);
        assert_abs_diff_eq!(b.l_tilde.total(), 1.0, epsilon = 1e-12);
    }

    fn toy_cell() -> MarketCell {
        // Scores drawn so that center 0 (1 seat) fills at varying cutoffs.
        let mut applicants = Vec::new();
        for (i, s) in [28, 27, 26, 25, 24, 24, 23, 22].iter().enumerate() {
            applicants.push(CellApplicant {
                id: ApplicantId(i as u64),
                score: PriorityScore(*s),
                tiebreak: TieBreakKey(i as u64),
                rol: Rol::new(vec![CenterId(0), CenterId(1)]).unwrap(),
            });
        }
        MarketCell {
            year: 0,
            age: 0,
            applicants,
            capacities: [(CenterId(0), 1), (CenterId(1), 20)].into(),
        }
    }

    #[test]
    fn bootstrap_is_deterministic_in_seed() {
        let cell = toy_cell();
        let a = bootstrap_cutoffs(&cell, 64, 9).unwrap();
        let b = bootstrap_cutoffs(&cell, 64, 9).unwrap();
        let c = bootstrap_cutoffs(&cell, 64, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_replication_is_a_point_mass() {
        let cell = toy_cell();
        let d = bootstrap_cutoffs(&cell, 1, 3).unwrap();
        for &j in d.per_center.keys() {
            let probs = d.probabilities(j).unwrap();
            assert_eq!(probs.len(), 1);
            assert_abs_diff_eq!(probs.values().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn slack_center_always_open() {
        let cell = toy_cell();
        let d = bootstrap_cutoffs(&cell, 50, 3).unwrap();
        // Center 1 has 20 seats for 8 applicants: open in every replication.
        assert_eq!(d.per_center[&CenterId(1)][&Cutoff::Open], 50);
        for s in ScoreGrid::default().scores() {
            assert_eq!(d.admission_prob(CenterId(1), s).unwrap(), 1.0);
        }
    }

    #[test]
    fn admission_prob_counts_mass() {
        let dist = CutoffDistribution {
            replications: 10,
            per_center: [(
                CenterId(0),
                [(Cutoff::Score(27), 6), (Cutoff::Score(29), 4)].into(),
            )]
            .into(),
        };
        assert_abs_diff_eq!(
            dist.admission_prob(CenterId(0), PriorityScore(28)).unwrap(),
            0.6,
            epsilon = 1e-12
        );
        assert!(dist.admission_prob(CenterId(1), PriorityScore(28)).is_err());
    }

    #[test]
    fn belief_table_monotone_and_clamped_lookup() {
        let cell = toy_cell();
        let dists: BTreeMap<CellKey, CutoffDistribution> =
            [(CellKey::new(0, 0), bootstrap_cutoffs(&cell, 200, 5).unwrap())].into();
        let table = BeliefTable::from_distributions(ScoreGrid::default(), &dists).unwrap();
        table.validate_monotone().unwrap();
        // Year 3 clamps onto year 0.
        let a = table.pi(CellKey::new(3, 0), CenterId(0), PriorityScore(27)).unwrap();
        let b = table.pi(CellKey::new(0, 0), CenterId(0), PriorityScore(27)).unwrap();
        assert_eq!(a, b);
        assert!(table.pi(CellKey::new(0, 1), CenterId(0), PriorityScore(27)).is_err());
    }
}
