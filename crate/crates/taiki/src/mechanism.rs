//! Truncated serial dictatorship with priority scores and waitlist bonus.
//!
//! Applicants are processed in descending (score, tie-break) order; each takes
//! the highest-ranked center on her list that still has a vacant seat, or is
//! waitlisted. Cutoffs are extracted per center: the lowest admitted score when
//! the center filled, `Open` when seats remain, `Closed` when none were offered.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of centers on a ranked list.
pub const MAX_ROL_LEN: usize = 5;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct CenterId(pub u32);

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct ApplicantId(pub u64);

impl fmt::Display for CenterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ApplicantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Integer priority score on a bounded grid.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct PriorityScore(pub i32);

/// Deterministic tie-break key; a lower key means earlier in line among equal scores.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct TieBreakKey(pub u64);

/// Inclusive score grid; scores observed in practice live on a short integer range.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub min: i32,
    pub max: i32,
}

impl Default for ScoreGrid {
    fn default() -> Self {
        ScoreGrid { min: 20, max: 35 }
    }
}

impl ScoreGrid {
    pub fn contains(&self, s: PriorityScore) -> bool {
        (self.min..=self.max).contains(&s.0)
    }

    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.max < self.min
    }

    pub fn scores(&self) -> impl Iterator<Item = PriorityScore> + '_ {
        (self.min..=self.max).map(PriorityScore)
    }

    /// Offset of `s` within the grid, for dense per-score tables.
    pub fn offset(&self, s: PriorityScore) -> Option<usize> {
        self.contains(s).then(|| (s.0 - self.min) as usize)
    }
}

/// Ranked ordered list of up to [`MAX_ROL_LEN`] distinct centers.
/// The empty list encodes "do not apply".
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
pub struct Rol(Vec<CenterId>);

impl Rol {
    pub fn new(entries: Vec<CenterId>) -> Result<Self> {
        if entries.len() > MAX_ROL_LEN {
            return Err(Error::invalid(format!(
                "ranked list has {} entries, max is {}",
                entries.len(),
                MAX_ROL_LEN
            )));
        }
        for (i, a) in entries.iter().enumerate() {
            if entries[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate center {a} in ranked list")));
            }
        }
        Ok(Rol(entries))
    }

    pub fn empty() -> Self {
        Rol(Vec::new())
    }

    pub fn entries(&self) -> &[CenterId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: CenterId) -> bool {
        self.0.contains(&j)
    }
}

/// One applicant's row in a market cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellApplicant {
    pub id: ApplicantId,
    pub score: PriorityScore,
    pub tiebreak: TieBreakKey,
    pub rol: Rol,
}

/// One (year, age) admission round: applicants plus per-center seat counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketCell {
    pub year: u32,
    pub age: u8,
    pub applicants: Vec<CellApplicant>,
    pub capacities: BTreeMap<CenterId, u32>,
}

/// Where an applicant ended up in one round.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Placement {
    Center(CenterId),
    Waitlist,
}

impl Placement {
    pub fn center(&self) -> Option<CenterId> {
        match self {
            Placement::Center(j) => Some(*j),
            Placement::Waitlist => None,
        }
    }

    pub fn is_waitlist(&self) -> bool {
        matches!(self, Placement::Waitlist)
    }
}

/// Per-center admission cutoff after a round.
///
/// `Score(s)`: the center filled and `s` is the lowest admitted score.
/// `Open`: seats remained, so any feasible score was admitted.
/// `Closed`: zero seats were offered.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum Cutoff {
    Open,
    Score(i32),
    Closed,
}

impl Cutoff {
    /// Whether a score clears this cutoff.
    pub fn admits(&self, s: PriorityScore) -> bool {
        match self {
            Cutoff::Open => true,
            Cutoff::Score(c) => s.0 >= *c,
            Cutoff::Closed => false,
        }
    }

    /// Report-time integer encoding: centers with no vacancies map to 35 and
    /// centers that never filled map to 11. Used only when emitting tables.
    pub fn sentinel(&self) -> i32 {
        match self {
            Cutoff::Open => 11,
            Cutoff::Score(c) => *c,
            Cutoff::Closed => 35,
        }
    }

    fn order_key(&self) -> (u8, i32) {
        match self {
            Cutoff::Open => (0, 0),
            Cutoff::Score(c) => (1, *c),
            Cutoff::Closed => (2, 0),
        }
    }
}

impl PartialOrd for Cutoff {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cutoff {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl fmt::Display for Cutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cutoff::Open => write!(f, "open"),
            Cutoff::Score(c) => write!(f, "{c}"),
            Cutoff::Closed => write!(f, "closed"),
        }
    }
}

/// Output of one serial dictatorship round.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub assignment: BTreeMap<ApplicantId, Placement>,
    pub cutoffs: BTreeMap<CenterId, Cutoff>,
    pub residual: BTreeMap<CenterId, u32>,
}

impl AssignmentResult {
    pub fn placement(&self, id: ApplicantId) -> Option<Placement> {
        self.assignment.get(&id).copied()
    }
}

struct CenterTally {
    assigned: u32,
    min_score: i32,
}

/// Core assignment loop shared by the public mechanism and the lean bootstrap path.
///
/// `entries` must already be sorted in processing order. Calls `record` with
/// the entry index and the assigned center (or `None` for waitlist).
fn sd_core(
    entries: &[(PriorityScore, TieBreakKey, &Rol)],
    capacities: &BTreeMap<CenterId, u32>,
    mut record: impl FnMut(usize, Option<CenterId>),
) -> BTreeMap<CenterId, CenterTally> {
    let mut residual = capacities.clone();
    let mut tally: BTreeMap<CenterId, CenterTally> = BTreeMap::new();
    for (idx, (score, _tie, rol)) in entries.iter().enumerate() {
        let mut placed = None;
        for &j in rol.entries() {
            let seats = residual.get_mut(&j).expect("validated center");
            if *seats > 0 {
                *seats -= 1;
                placed = Some(j);
                let t = tally.entry(j).or_insert(CenterTally { assigned: 0, min_score: score.0 });
                t.assigned += 1;
                t.min_score = t.min_score.min(score.0);
                break;
            }
        }
        record(idx, placed);
    }
    tally
}

fn extract_cutoffs(
    capacities: &BTreeMap<CenterId, u32>,
    tally: &BTreeMap<CenterId, CenterTally>,
) -> BTreeMap<CenterId, Cutoff> {
    capacities
        .iter()
        .map(|(&j, &cap)| {
            let cutoff = if cap == 0 {
                Cutoff::Closed
            } else {
                match tally.get(&j) {
                    Some(t) if t.assigned == cap => Cutoff::Score(t.min_score),
                    _ => Cutoff::Open,
                }
            };
            (j, cutoff)
        })
        .collect()
}

fn validate_cell(cell: &MarketCell) -> Result<()> {
    let mut keys: Vec<(i32, u64)> = cell
        .applicants
        .iter()
        .map(|a| (a.score.0, a.tiebreak.0))
        .collect();
    keys.sort_unstable();
    if keys.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!(
            "duplicate (score, tie-break) pair in cell (year {}, age {})",
            cell.year, cell.age
        )));
    }
    for a in &cell.applicants {
        for &j in a.rol.entries() {
            if !cell.capacities.contains_key(&j) {
                return Err(Error::invalid(format!(
                    "applicant {} lists unknown center {j}",
                    a.id
                )));
            }
        }
    }
    Ok(())
}

/// Run the assignment round for one market cell.
///
/// Pure in the cell: identical input yields an identical result, and the
/// storage order of applicants is irrelevant because the (score, tie-break)
/// order is total.
pub fn run_serial_dictatorship(cell: &MarketCell) -> Result<AssignmentResult> {
    validate_cell(cell)?;
    let mut order: Vec<usize> = (0..cell.applicants.len()).collect();
    order.sort_unstable_by_key(|&i| {
        let a = &cell.applicants[i];
        (Reverse(a.score), a.tiebreak)
    });
    let entries: Vec<(PriorityScore, TieBreakKey, &Rol)> = order
        .iter()
        .map(|&i| {
            let a = &cell.applicants[i];
            (a.score, a.tiebreak, &a.rol)
        })
        .collect();

    let mut assignment = BTreeMap::new();
    let tally = sd_core(&entries, &cell.capacities, |idx, placed| {
        let id = cell.applicants[order[idx]].id;
        let placement = placed.map_or(Placement::Waitlist, Placement::Center);
        assignment.insert(id, placement);
    });
    if assignment.len() != cell.applicants.len() {
        return Err(Error::invalid(format!(
            "duplicate applicant id in cell (year {}, age {})",
            cell.year, cell.age
        )));
    }

    let cutoffs = extract_cutoffs(&cell.capacities, &tally);
    let mut residual = cell.capacities.clone();
    for (j, t) in &tally {
        *residual.get_mut(j).unwrap() -= t.assigned;
    }
    Ok(AssignmentResult { assignment, cutoffs, residual })
}

/// Lean cutoff-only run for resampled pseudo-cells. The caller guarantees the
/// tie-break keys are unique and every listed center has a capacity entry.
pub(crate) fn sd_cutoffs(
    mut entries: Vec<(PriorityScore, TieBreakKey, &Rol)>,
    capacities: &BTreeMap<CenterId, u32>,
) -> BTreeMap<CenterId, Cutoff> {
    entries.sort_unstable_by_key(|&(score, tie, _)| (Reverse(score), tie));
    let tally = sd_core(&entries, capacities, |_, _| {});
    extract_cutoffs(capacities, &tally)
}

/// Outcome of adding the waitlist bonus to a score, clamped to the grid.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BonusedScore {
    pub score: PriorityScore,
    pub clamped: bool,
}

/// Add the waitlist bonus `b` to `s`, clamping to the grid bounds.
/// Clamping is reported, not an error: counterfactual bonuses can step
/// outside the observed support.
pub fn apply_waitlist_bonus(s: PriorityScore, b: i32, grid: ScoreGrid) -> BonusedScore {
    let raw = s.0 + b;
    let clamped_value = raw.clamp(grid.min, grid.max);
    BonusedScore {
        score: PriorityScore(clamped_value),
        clamped: clamped_value != raw,
    }
}

/// Row-conditional transition frequencies between two cutoff maps.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    /// rows\[first-round cutoff\]\[second-round cutoff\] = conditional frequency.
    pub rows: BTreeMap<Cutoff, BTreeMap<Cutoff, f64>>,
    /// Number of centers present in both rounds.
    pub shared_centers: usize,
}

/// Conditional frequencies of second-round cutoff categories given the
/// first-round category, over the centers present in both maps.
pub fn cutoff_transition_matrix(
    first: &BTreeMap<CenterId, Cutoff>,
    second: &BTreeMap<CenterId, Cutoff>,
) -> Result<TransitionMatrix> {
    let mut counts: BTreeMap<Cutoff, BTreeMap<Cutoff, usize>> = BTreeMap::new();
    let mut shared = 0usize;
    for (j, c1) in first {
        if let Some(c2) = second.get(j) {
            shared += 1;
            *counts.entry(*c1).or_default().entry(*c2).or_insert(0) += 1;
        }
    }
    if shared == 0 {
        return Err(Error::invalid(
            "cutoff maps share no centers; transition matrix is empty",
        ));
    }
    let rows = counts
        .into_iter()
        .map(|(c1, row)| {
            let total: usize = row.values().sum();
            let normalized = row
                .into_iter()
                .map(|(c2, n)| (c2, n as f64 / total as f64))
                .collect();
            (c1, normalized)
        })
        .collect();
    Ok(TransitionMatrix { rows, shared_centers: shared })
}
