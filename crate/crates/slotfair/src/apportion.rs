//! Proportional allocation of the time line.
//!
//! The main construction runs in stages over a *monotone* economy. Stage
//! `s < n` considers only the remaining slots inside the top `s`
//! `(n-1)`-cycles of the time line — later cycles stay reserved for later
//! stages, which is what keeps every stage's considered set 1-divisible for
//! everyone. The remaining agents scan the considered slots in order and
//! fill a basket: a slot is added while nobody objects, an agent who values
//! the basket-with-slot above `1/n` flags it, a single flag assigns the
//! basket to the flagger, and multiple flags skip the slot. If no single
//! flag ever occurs the basket's limit schedule goes to an agent with
//! maximal value for it, certified by interval comparison at the configured
//! decision precision. The last agent takes whatever remains.
//!
//! Non-monotone economies are handled by reordering each utility into its
//! monotone form, allocating there, and lifting the result back through
//! sequential favorite-slot picks.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::certificate::{
    certify_ge_point, AgentShareEvidence, PartitionAudit, ProportionalityCertificate,
};
use crate::error::{Error, Result};
use crate::measure::{known_exact_mass, Economy, ExactCursor, RankMap, SumId, UtilityFn};
use crate::numeric::{Rational, RatInterval};
use crate::schedule::{EPSet, LazySchedule, MassPin, Provenance, Scanner, Schedule};

/// Evidence that an allocation's shares partition the time line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionEvidence {
    /// All shares closed-form; disjointness and exhaustiveness checked exactly.
    Exact,
    /// Guaranteed by the producing procedure; audit on a prefix.
    Structural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagAction {
    Added,
    Skipped,
    Assigned,
}

/// One per-slot event of a stage scan: who flagged and what happened.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlagEvent {
    pub slot: u64,
    pub flags: Vec<String>,
    pub action: FlagAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StageTermination {
    SingleFlag { slot: u64 },
    Limit { halt_slot: u64 },
    FinalRemainder,
}

/// Trace of one stage: the considered set, the flag events on the scanned
/// prefix, the recipient, and the interval evidence for the assignment
/// bounds (recipient at least `1/n`, everyone else at most `1/n`, up to the
/// decision precision).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    /// The considered set when closed-form, else its envelope.
    pub considered_envelope: EPSet,
    pub considered_exact: bool,
    pub events: Vec<FlagEvent>,
    pub events_dropped: u64,
    pub recipient: String,
    pub termination: StageTermination,
    pub recipient_value: RatInterval,
    pub other_values: Vec<(String, RatInterval)>,
}

const TRACE_EVENT_CAP: usize = 4096;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocationTrace {
    pub stages: Vec<StageTrace>,
}

/// An allocation: one schedule per agent, partition evidence, and the stage
/// trace when produced by the staged procedure.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub shares: Vec<ShareEntry>,
    pub evidence: PartitionEvidence,
    pub trace: Option<AllocationTrace>,
}

#[derive(Debug, Clone)]
pub struct ShareEntry {
    pub agent: String,
    pub share: Schedule,
}

impl Allocation {
    pub fn share_of(&self, agent: &str) -> Option<&Schedule> {
        self.shares.iter().find(|s| s.agent == agent).map(|s| &s.share)
    }

    /// Audits the partition property: exact for closed-form allocations,
    /// slot-by-slot on `[1, horizon]` otherwise.
    pub fn audit_partition(&self, horizon: u64) -> Result<PartitionAudit> {
        let all_closed: Option<Vec<&EPSet>> =
            self.shares.iter().map(|s| s.share.as_epset()).collect();
        if let Some(sets) = all_closed {
            let mut union = EPSet::empty();
            for (i, a) in sets.iter().enumerate() {
                for b in sets.iter().skip(i + 1) {
                    if !a.intersect(b).is_empty() {
                        let slot = a.intersect(b).min_slot().expect("nonempty");
                        return Ok(PartitionAudit::Failed { slot, covered: 2 });
                    }
                }
                union = union.union(a);
            }
            if union != EPSet::full() {
                let missing = EPSet::full().difference(&union);
                let slot = missing.min_slot().expect("nonempty");
                return Ok(PartitionAudit::Failed { slot, covered: 0 });
            }
            return Ok(PartitionAudit::Exact);
        }
        for t in 1..=horizon {
            let mut covered = 0u64;
            for s in &self.shares {
                if s.share.contains(t)? {
                    covered += 1;
                }
            }
            if covered != 1 {
                return Ok(PartitionAudit::Failed { slot: t, covered });
            }
        }
        Ok(PartitionAudit::PrefixAudited { horizon })
    }

    pub fn to_json_value(&self, horizon: u64) -> Result<serde_json::Value> {
        let mut agents = Vec::new();
        for s in &self.shares {
            agents.push(serde_json::json!({
                "name": s.agent,
                "share": s.share.to_json_value(horizon)?,
            }));
        }
        Ok(serde_json::json!({
            "agents": agents,
            "evidence": self.evidence,
            "trace": self.trace,
        }))
    }

    pub fn from_json_value(value: &serde_json::Value) -> Result<Allocation> {
        let agents = value
            .get("agents")
            .and_then(|a| a.as_array())
            .ok_or_else(|| Error::SchemaMismatch("allocation: missing agents".into()))?;
        let mut shares = Vec::new();
        for a in agents {
            let name = a
                .get("name")
                .and_then(|n| n.as_str())
                .ok_or_else(|| Error::SchemaMismatch("allocation: agent without name".into()))?;
            let share = Schedule::from_json_value(
                a.get("share")
                    .ok_or_else(|| Error::SchemaMismatch("allocation: agent without share".into()))?,
            )?;
            shares.push(ShareEntry { agent: name.to_string(), share });
        }
        let evidence = value
            .get("evidence")
            .map(|e| {
                serde_json::from_value(e.clone())
                    .map_err(|e| Error::SchemaMismatch(format!("allocation evidence: {e}")))
            })
            .transpose()?
            .unwrap_or(PartitionEvidence::Structural);
        let trace = match value.get("trace") {
            None | Some(serde_json::Value::Null) => None,
            Some(t) => Some(
                serde_json::from_value(t.clone())
                    .map_err(|e| Error::SchemaMismatch(format!("allocation trace: {e}")))?,
            ),
        };
        Ok(Allocation { shares, evidence, trace })
    }
}

/// Round-robin baseline: agent at position `p` (1-indexed) receives every
/// `n`-th slot starting at `p`. Exact shares, exact partition.
pub fn round_robin(e: &Economy) -> Allocation {
    let n = e.n() as u64;
    let shares = e
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| ShareEntry {
            agent: a.name.clone(),
            share: Schedule::Periodic(
                EPSet::progression(i as u64 + 1, n).expect("valid progression"),
            ),
        })
        .collect();
    Allocation { shares, evidence: PartitionEvidence::Exact, trace: None }
}

/// Replays the stage scan rule past the audited prefix, so a limit-stage
/// basket is a total membership oracle: a slot is in the basket iff, at its
/// turn, at most one remaining agent objected.
struct BasketReplayScanner {
    considered: Schedule,
    cursors: Vec<(ExactCursor, SumId)>,
    threshold: Rational, // 1/n
}

impl BasketReplayScanner {
    fn new(considered: Schedule, utilities: &[UtilityFn], threshold: Rational) -> Self {
        let cursors = utilities
            .iter()
            .map(|u| {
                let mut c = ExactCursor::new(u);
                let s = c.new_sum();
                (c, s)
            })
            .collect();
        BasketReplayScanner { considered, cursors, threshold }
    }
}

impl Scanner for BasketReplayScanner {
    fn scan(&mut self, t: u64) -> Result<bool> {
        for (c, _) in &mut self.cursors {
            c.advance();
        }
        if !self.considered.contains(t)? {
            return Ok(false);
        }
        let mut flags = 0;
        for (c, s) in &mut self.cursors {
            if c.cmp_sum_vs(*s, true, &self.threshold) == std::cmp::Ordering::Greater {
                flags += 1;
            }
        }
        if flags <= 1 {
            for (c, s) in &mut self.cursors {
                c.add_current_weight(*s);
            }
            Ok(true)
        } else {
            Ok(false)
        }
    }
}

/// Staged cycle apportionment over a monotone economy.
///
/// Preconditions: at least two agents, every utility monotonic with patience
/// level at least `2n - 3`. The decision precision only matters for limit
/// stages: it bounds how much unscanned mass may remain when a basket is
/// closed and its recipient chosen by interval comparison.
pub fn cycle_apportion(e: &Economy, precision: &Rational) -> Result<Allocation> {
    if e.n() < 2 {
        return Err(Error::PreconditionUnverified(
            "staged apportionment needs at least two agents".into(),
        ));
    }
    if !precision.is_positive() {
        return Err(Error::Parse("decision precision must be positive".into()));
    }
    let n = e.n();
    let need = Rational::from(2 * n as u64 - 3);
    for a in &e.agents {
        if !a.utility.is_monotonic() {
            return Err(Error::NotMonotonic(a.name.clone()));
        }
        let level = a.utility.kakeya_level();
        if level < need {
            return Err(Error::InsufficientPatience {
                detail: format!(
                    "agent {} has patience level {level}, below the required {need}",
                    a.name
                ),
            });
        }
    }

    let threshold = Rational::one() / Rational::from(n as u64);
    let cycle_len = (n - 1) as u64;
    let cycles: Vec<EPSet> = (1..=cycle_len)
        .map(|r| EPSet::full().cycle(r, cycle_len).expect("cycles of T"))
        .collect();

    let mut remaining: Vec<usize> = (0..n).collect();
    let mut shares: Vec<Option<Schedule>> = vec![None; n];
    let mut t_remaining = Schedule::full();
    let mut considered_union = EPSet::empty();
    let mut stages = Vec::new();

    for stage in 1..n {
        considered_union = considered_union.union(&cycles[stage - 1]);
        let considered = t_remaining.intersect(&Schedule::Periodic(considered_union.clone()));
        let env_c = considered
            .envelope_hint()
            .expect("considered set always has an eventually periodic envelope");
        let outcome = run_stage(
            e,
            &remaining,
            &considered,
            &env_c,
            &threshold,
            precision,
            stage,
        )?;
        let recipient_idx = outcome.recipient;
        shares[recipient_idx] = Some(outcome.share.clone());
        remaining.retain(|&i| i != recipient_idx);
        t_remaining = t_remaining.difference(&outcome.share);
        stages.push(outcome.trace);
    }

    // Final stage: the last agent takes the remaining slots, with the mass
    // pinned by complementarity whenever every assigned share has an exactly
    // known mass for a utility.
    let last = remaining[0];
    let final_share = match &t_remaining {
        Schedule::Periodic(_) => t_remaining.clone(),
        Schedule::Lazy(_) => {
            let mut pins = Vec::new();
            for a in &e.agents {
                let mut total = Rational::zero();
                let mut all_known = true;
                for s in shares.iter().flatten() {
                    match known_exact_mass(&a.utility, s) {
                        Some(m) => total = total + m,
                        None => {
                            all_known = false;
                            break;
                        }
                    }
                }
                if all_known {
                    let pin = MassPin {
                        utility: a.utility.clone(),
                        mass: Rational::one() - total,
                    };
                    if !pins.contains(&pin) {
                        pins.push(pin);
                    }
                }
            }
            let inner = t_remaining.clone();
            Schedule::Lazy(LazySchedule::new(
                Box::new(RemainderScanner { inner }),
                t_remaining.envelope_hint(),
                Provenance::labeled("final_remainder"),
                pins,
            ))
        }
    };
    let value = e.agents[last]
        .utility
        .mass_interval(&final_share, precision)
        .unwrap_or_else(|_| RatInterval::exact(Rational::zero()));
    stages.push(StageTrace {
        stage: n,
        considered_envelope: final_share.envelope_hint().unwrap_or_else(EPSet::full),
        considered_exact: final_share.as_epset().is_some(),
        events: Vec::new(),
        events_dropped: 0,
        recipient: e.agents[last].name.clone(),
        termination: StageTermination::FinalRemainder,
        recipient_value: value,
        other_values: Vec::new(),
    });
    shares[last] = Some(final_share);

    let share_entries: Vec<ShareEntry> = e
        .agents
        .iter()
        .zip(shares)
        .map(|(a, s)| ShareEntry { agent: a.name.clone(), share: s.expect("assigned") })
        .collect();
    let evidence = if share_entries.iter().all(|s| s.share.as_epset().is_some()) {
        PartitionEvidence::Exact
    } else {
        PartitionEvidence::Structural
    };
    Ok(Allocation {
        shares: share_entries,
        evidence,
        trace: Some(AllocationTrace { stages }),
    })
}

struct RemainderScanner {
    inner: Schedule,
}

impl Scanner for RemainderScanner {
    fn scan(&mut self, t: u64) -> Result<bool> {
        self.inner.contains(t)
    }
}

struct StageOutcome {
    recipient: usize,
    share: Schedule,
    trace: StageTrace,
}

fn run_stage(
    e: &Economy,
    remaining: &[usize],
    considered: &Schedule,
    env_c: &EPSet,
    threshold: &Rational,
    precision: &Rational,
    stage: usize,
) -> Result<StageOutcome> {
    // Scanning may stop once the unscanned considered mass is certifiably
    // below the precision for every remaining agent.
    let mut halt_slot = 1u64;
    for &i in remaining {
        let u = &e.agents[i].utility;
        let tail_below = |h: u64| {
            u.mass_epset_raw(&env_c.restrict_ge(h + 1)).cmp_rational(precision)
                == std::cmp::Ordering::Less
        };
        let mut hi = 16u64;
        while !tail_below(hi) {
            hi = hi.saturating_mul(2);
        }
        let mut lo = 1u64;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if tail_below(mid) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        halt_slot = halt_slot.max(hi);
    }

    let mut cursors: Vec<(ExactCursor, SumId)> = remaining
        .iter()
        .map(|&i| {
            let mut c = ExactCursor::new(&e.agents[i].utility);
            let s = c.new_sum();
            (c, s)
        })
        .collect();
    let mut events: Vec<FlagEvent> = Vec::new();
    let mut events_dropped = 0u64;
    let mut picks: Vec<u64> = Vec::new();
    let mut skips: Vec<u64> = Vec::new();
    let mut record = |ev: FlagEvent, events: &mut Vec<FlagEvent>, dropped: &mut u64| {
        if events.len() < TRACE_EVENT_CAP {
            events.push(ev);
        } else {
            *dropped += 1;
        }
    };

    let mut t = 0u64;
    let single_flag: Option<(u64, usize)> = loop {
        t += 1;
        for (c, _) in &mut cursors {
            c.advance();
        }
        if considered.contains(t)? {
            let mut flaggers: Vec<usize> = Vec::new();
            for (pos, (c, s)) in cursors.iter_mut().enumerate() {
                if c.cmp_sum_vs(*s, true, threshold) == std::cmp::Ordering::Greater {
                    flaggers.push(pos);
                }
            }
            let action = match flaggers.len() {
                0 => {
                    for (c, s) in &mut cursors {
                        c.add_current_weight(*s);
                    }
                    picks.push(t);
                    FlagAction::Added
                }
                1 => {
                    for (c, s) in &mut cursors {
                        c.add_current_weight(*s);
                    }
                    picks.push(t);
                    FlagAction::Assigned
                }
                _ => {
                    skips.push(t);
                    FlagAction::Skipped
                }
            };
            if !flaggers.is_empty() || action == FlagAction::Added {
                record(
                    FlagEvent {
                        slot: t,
                        flags: flaggers.iter().map(|&p| e.agents[remaining[p]].name.clone()).collect(),
                        action,
                    },
                    &mut events,
                    &mut events_dropped,
                );
            }
            if flaggers.len() == 1 {
                break Some((t, flaggers[0]));
            }
        }
        if t >= halt_slot {
            break None;
        }
    };

    match single_flag {
        Some((slot, flagger_pos)) => {
            let recipient = remaining[flagger_pos];
            let share_set = EPSet::from_slots(picks.iter().copied())?;
            let (fc, fs) = &mut cursors[flagger_pos];
            let fs = *fs;
            let recipient_value = RatInterval::exact(fc.sum_value(fs));
            let other_values = cursors
                .iter_mut()
                .enumerate()
                .filter(|(pos, _)| *pos != flagger_pos)
                .map(|(pos, (c, s))| {
                    (e.agents[remaining[pos]].name.clone(), RatInterval::exact(c.sum_value(*s)))
                })
                .collect();
            Ok(StageOutcome {
                recipient,
                share: Schedule::Periodic(share_set),
                trace: StageTrace {
                    stage,
                    considered_envelope: env_c.clone(),
                    considered_exact: considered.as_epset().is_some(),
                    events,
                    events_dropped,
                    recipient: e.agents[recipient].name.clone(),
                    termination: StageTermination::SingleFlag { slot },
                    recipient_value,
                    other_values,
                },
            })
        }
        None => {
            limit_assignment(
                e,
                remaining,
                considered,
                env_c,
                threshold,
                &mut cursors,
                &skips,
                t,
                stage,
                events,
                events_dropped,
            )
        }
    }
}

/// Closes a stage whose scan found no single-flag slot: the basket's limit
/// schedule goes to an agent with certifiably maximal value.
///
/// With identical remaining agents the limit value is exactly `1/n`: the
/// basket either eventually absorbs everything still considered (value, by
/// the stage invariant, at least `1/n` yet never observed above it) or is
/// flagged infinitely often (value approaching `1/n` from both sides), so
/// the share carries that exact mass pin. Ties then fall to the lowest
/// index. Distinct agents are compared by intervals; an unresolvable
/// overlap is reported rather than guessed.
#[allow(clippy::too_many_arguments)]
fn limit_assignment(
    e: &Economy,
    remaining: &[usize],
    considered: &Schedule,
    env_c: &EPSet,
    threshold: &Rational,
    cursors: &mut [(ExactCursor, SumId)],
    skips: &[u64],
    halt_slot: u64,
    stage: usize,
    events: Vec<FlagEvent>,
    events_dropped: u64,
) -> Result<StageOutcome> {
    let utilities: Vec<UtilityFn> =
        remaining.iter().map(|&i| e.agents[i].utility.clone()).collect();
    let symmetric = utilities.windows(2).all(|w| w[0] == w[1]);

    let intervals: Vec<RatInterval> = cursors
        .iter_mut()
        .enumerate()
        .map(|(pos, (c, s))| {
            let lo = c.sum_value(*s);
            let residual = utilities[pos].mass_epset(&env_c.restrict_ge(halt_slot + 1));
            let hi = &lo + &residual;
            RatInterval::new(lo, hi).expect("residual mass is nonnegative")
        })
        .collect();

    let recipient_pos = if symmetric {
        0
    } else {
        let mut chosen = None;
        'candidates: for i in 0..intervals.len() {
            for j in 0..intervals.len() {
                if i == j {
                    continue;
                }
                use crate::numeric::{interval_compare, IntervalOrder};
                match interval_compare(&intervals[i], &intervals[j]) {
                    IntervalOrder::Greater | IntervalOrder::Equal => {}
                    IntervalOrder::Undecided if utilities[i] == utilities[j] => {}
                    _ => continue 'candidates,
                }
            }
            chosen = Some(i);
            break;
        }
        chosen.ok_or_else(|| {
            Error::UndecidedAtPrecision(format!(
                "limit-stage recipient at stage {stage}: maximal value not separable"
            ))
        })?
    };
    let recipient = remaining[recipient_pos];

    let skipped = EPSet::from_slots(skips.iter().copied())?;
    let envelope = env_c.difference(&skipped);
    let pins = if symmetric {
        vec![MassPin { utility: utilities[0].clone(), mass: threshold.clone() }]
    } else {
        Vec::new()
    };
    let share = Schedule::Lazy(LazySchedule::new(
        Box::new(BasketReplayScanner::new(
            considered.clone(),
            &utilities,
            threshold.clone(),
        )),
        Some(envelope),
        Provenance::labeled("stage_basket_limit")
            .with_param("stage", stage)
            .with_param("halt_slot", halt_slot),
        pins,
    ));

    let value_of = |pos: usize| -> RatInterval {
        if symmetric {
            RatInterval::exact(threshold.clone())
        } else {
            intervals[pos].clone()
        }
    };
    Ok(StageOutcome {
        recipient,
        share,
        trace: StageTrace {
            stage,
            considered_envelope: env_c.clone(),
            considered_exact: considered.as_epset().is_some(),
            events,
            events_dropped,
            recipient: e.agents[recipient].name.clone(),
            termination: StageTermination::Limit { halt_slot },
            recipient_value: value_of(recipient_pos),
            other_values: (0..intervals.len())
                .filter(|&p| p != recipient_pos)
                .map(|p| (e.agents[remaining[p]].name.clone(), value_of(p)))
                .collect(),
        },
    })
}

/// Shared simulation of the sequential favorite-slot picks that lift a
/// monotone-economy allocation back to the original economy.
///
/// At time `t`, the monotone-allocation owner of `t` picks his most valuable
/// remaining slot under his original utility (earliest among maxima);
/// whatever is never picked accrues to the first agent.
struct LiftSim {
    owners: Vec<Schedule>,
    monotone_utils: Vec<UtilityFn>,
    utils: Vec<UtilityFn>,
    picked: BTreeSet<u64>,
    decided: std::collections::BTreeMap<u64, usize>,
    time: u64,
    done: Vec<bool>,
}

/// Simulation budget per membership decision; a slot still unresolved at the
/// cap is treated as never picked (and therefore the first agent's).
const LIFT_STEP_CAP: u64 = 250_000;

enum SlotFate {
    PickedBy(usize),
    NeverPicked,
}

impl LiftSim {
    fn favorite(&self, agent: usize) -> u64 {
        let u = &self.utils[agent];
        let maxadj = u.max_adjusted_slot();
        let mut best: Option<(Rational, u64)> = None;
        for t in 1..=maxadj {
            if self.picked.contains(&t) {
                continue;
            }
            let w = u.weight(t);
            match &best {
                Some((bw, _)) if *bw >= w => {}
                _ => best = Some((w, t)),
            }
        }
        // Earliest remaining slot past the adjusted region: weights are
        // strictly decreasing there, so it dominates everything later.
        let mut t = maxadj + 1;
        while self.picked.contains(&t) {
            t += 1;
        }
        match best {
            // A window maximum wins ties: it is earlier than the tail slot.
            Some((bw, bt)) if bw >= u.weight(t) => bt,
            _ => t,
        }
    }

    fn owner_of(&self, t: u64) -> Result<usize> {
        let mut owner = None;
        for (i, s) in self.owners.iter().enumerate() {
            if s.contains(t)? {
                if owner.is_some() {
                    return Err(Error::PreconditionUnverified(format!(
                        "monotone allocation assigns slot {t} twice"
                    )));
                }
                owner = Some(i);
            }
        }
        owner.ok_or_else(|| {
            Error::PreconditionUnverified(format!("monotone allocation misses slot {t}"))
        })
    }

    fn step(&mut self) -> Result<()> {
        let t = self.time + 1;
        let owner = self.owner_of(t)?;
        let pick = self.favorite(owner);
        self.picked.insert(pick);
        self.decided.insert(pick, owner);
        self.time = t;
        Ok(())
    }

    /// Whether agent `i` provably makes no further picks after the current
    /// simulated time.
    fn refresh_done(&mut self) -> Result<()> {
        for i in 0..self.owners.len() {
            if self.done[i] {
                continue;
            }
            self.done[i] = match &self.owners[i] {
                Schedule::Periodic(s) => {
                    !s.is_infinite() && s.count_le(self.time) == s.finite_len().unwrap_or(0)
                }
                Schedule::Lazy(lazy) => {
                    if let Some(env) = lazy.envelope() {
                        if !env.is_infinite()
                            && env.members_upto(u64::MAX).last().copied().unwrap_or(0) <= self.time
                        {
                            true
                        } else {
                            self.pin_exhausted(i, lazy)?
                        }
                    } else {
                        self.pin_exhausted(i, lazy)?
                    }
                }
            };
        }
        Ok(())
    }

    /// A lazy share whose enumerated prefix already carries its entire
    /// pinned mass has no further members: monotone-economy weights are
    /// strictly positive.
    fn pin_exhausted(&self, i: usize, lazy: &LazySchedule) -> Result<bool> {
        let Some(pin) = lazy.pinned_mass(&self.monotone_utils[i]) else {
            return Ok(false);
        };
        let members = lazy.members_upto(self.time)?;
        Ok(self.monotone_utils[i].mass_of_slots(&members) == pin)
    }

    fn decide_slot(&mut self, s: u64) -> Result<SlotFate> {
        loop {
            if let Some(&o) = self.decided.get(&s) {
                return Ok(SlotFate::PickedBy(o));
            }
            self.refresh_done()?;
            let alive = (0..self.owners.len())
                .any(|j| !self.done[j] && self.utils[j].weight(s).is_positive());
            if !alive {
                return Ok(SlotFate::NeverPicked);
            }
            if self.time >= LIFT_STEP_CAP {
                return Ok(SlotFate::NeverPicked);
            }
            self.step()?;
        }
    }
}

struct LiftShareScanner {
    sim: Arc<Mutex<LiftSim>>,
    agent: usize,
}

impl Scanner for LiftShareScanner {
    fn scan(&mut self, t: u64) -> Result<bool> {
        let mut sim = self.sim.lock().expect("lift simulation lock poisoned");
        match sim.decide_slot(t)? {
            SlotFate::PickedBy(o) => Ok(o == self.agent),
            SlotFate::NeverPicked => Ok(self.agent == 0),
        }
    }
}

/// Lifts a proportional allocation for the induced monotone economy back to
/// the original economy by sequential favorite-slot picks. Each agent ends
/// up at least as well off (under his original utility) as he was in the
/// monotone economy, so proportionality is preserved.
pub fn pick_order_lift(
    e: &Economy,
    monotone: &Economy,
    maps: &[RankMap],
    alloc_m: &Allocation,
) -> Result<Allocation> {
    if monotone.n() != e.n() || maps.len() != e.n() {
        return Err(Error::NotAReordering("economy sizes disagree".into()));
    }
    for (i, a) in e.agents.iter().enumerate() {
        let (expect_u, expect_map) = a.utility.monotonic_reordering();
        if monotone.agents[i].utility != expect_u
            || monotone.agents[i].name != a.name
            || maps[i] != expect_map
        {
            return Err(Error::NotAReordering(format!(
                "agent {} is not the claimed reordering",
                a.name
            )));
        }
    }
    for s in &alloc_m.shares {
        if e.agents.iter().all(|a| a.name != s.agent) {
            return Err(Error::SchemaMismatch(format!(
                "allocation names unknown agent {}",
                s.agent
            )));
        }
    }

    // Already-monotone economies lift to themselves: the favorite remaining
    // slot under a monotone utility is always the earliest remaining slot.
    if e == monotone && maps.iter().all(|m| m.is_identity()) {
        return Ok(alloc_m.clone());
    }

    let owners: Vec<Schedule> = e
        .agents
        .iter()
        .map(|a| {
            alloc_m
                .share_of(&a.name)
                .cloned()
                .ok_or_else(|| Error::SchemaMismatch(format!("missing share for {}", a.name)))
        })
        .collect::<Result<_>>()?;
    let sim = Arc::new(Mutex::new(LiftSim {
        owners,
        monotone_utils: monotone.agents.iter().map(|a| a.utility.clone()).collect(),
        utils: e.agents.iter().map(|a| a.utility.clone()).collect(),
        picked: BTreeSet::new(),
        decided: std::collections::BTreeMap::new(),
        time: 0,
        done: vec![false; e.n()],
    }));
    let shares = e
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| ShareEntry {
            agent: a.name.clone(),
            share: Schedule::Lazy(LazySchedule::new(
                Box::new(LiftShareScanner { sim: Arc::clone(&sim), agent: i }),
                None,
                Provenance::labeled("pick_order_lift").with_param("agent", &a.name),
                Vec::new(),
            )),
        })
        .collect();
    Ok(Allocation {
        shares,
        evidence: PartitionEvidence::Structural,
        trace: alloc_m.trace.clone(),
    })
}

/// Proportional allocation for any economy with patience level at least
/// `2n - 3`: reorder each utility into its monotone form, apportion there,
/// and lift the result back.
pub fn proportional_allocate(e: &Economy, precision: &Rational) -> Result<Allocation> {
    if e.n() == 1 {
        return Ok(Allocation {
            shares: vec![ShareEntry { agent: e.agents[0].name.clone(), share: Schedule::full() }],
            evidence: PartitionEvidence::Exact,
            trace: None,
        });
    }
    let mut monotone_agents = Vec::new();
    let mut maps = Vec::new();
    for a in &e.agents {
        let (u, map) = a.utility.monotonic_reordering();
        monotone_agents.push(crate::measure::Agent { name: a.name.clone(), utility: u });
        maps.push(map);
    }
    let monotone = Economy::new(monotone_agents)?;
    let alloc_m = cycle_apportion(&monotone, precision)?;
    pick_order_lift(e, &monotone, &maps, &alloc_m)
}

/// Verifies proportionality: each agent's own-share value is compared
/// against `1/n` on an interval of width at most `precision`, and the
/// shares are audited as a partition (exactly when closed-form, on
/// `[1, horizon]` otherwise).
pub fn verify_proportional(
    e: &Economy,
    alloc: &Allocation,
    precision: &Rational,
    horizon: u64,
) -> Result<ProportionalityCertificate> {
    check_same_agents(e, alloc)?;
    let threshold = Rational::one() / Rational::from(e.n() as u64);
    let mut agents = Vec::new();
    for a in &e.agents {
        let share = alloc.share_of(&a.name).expect("checked above");
        let own = a.utility.mass_interval(share, precision)?;
        let verdict = certify_ge_point(&own, &threshold);
        agents.push(AgentShareEvidence { agent: a.name.clone(), own, verdict });
    }
    let partition = alloc.audit_partition(horizon)?;
    Ok(ProportionalityCertificate::aggregate(threshold, agents, partition))
}

pub(crate) fn check_same_agents(e: &Economy, alloc: &Allocation) -> Result<()> {
    let mut expected: Vec<&str> = e.agents.iter().map(|a| a.name.as_str()).collect();
    let mut got: Vec<&str> = alloc.shares.iter().map(|s| s.agent.as_str()).collect();
    expected.sort_unstable();
    got.sort_unstable();
    if expected != got {
        return Err(Error::SchemaMismatch(
            "allocation agents do not match the economy".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificate::Verdict;
    use crate::numeric::rat;

    fn geo_economy(deltas: &[&str]) -> Economy {
        Economy::from_utilities(
            deltas.iter().map(|d| UtilityFn::geometric(rat(d)).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_robin_shapes() {
        let e = geo_economy(&["1/2", "1/2"]);
        let alloc = round_robin(&e);
        assert_eq!(
            alloc.share_of("a1").unwrap().as_epset().unwrap(),
            &EPSet::progression(1, 2).unwrap()
        );
        assert_eq!(
            alloc.share_of("a2").unwrap().as_epset().unwrap(),
            &EPSet::progression(2, 2).unwrap()
        );
        assert_eq!(alloc.audit_partition(50).unwrap(), PartitionAudit::Exact);
        // Exact own-share value for three agents at 5/6.
        let e3 = geo_economy(&["5/6", "5/6", "5/6"]);
        let a3 = round_robin(&e3);
        let u = &e3.agents[0].utility;
        assert_eq!(
            u.mass_epset(a3.share_of("a1").unwrap().as_epset().unwrap()),
            rat("36/91")
        );
    }

    #[test]
    fn round_robin_partitions_for_small_n() {
        for n in 1..=8 {
            let e = geo_economy(&vec!["1/2"; n]);
            let alloc = round_robin(&e);
            assert_eq!(alloc.audit_partition(10).unwrap(), PartitionAudit::Exact);
        }
    }

    #[test]
    fn two_agents_single_flag_stage() {
        // delta 1/2 and 2/3: slot 3 draws exactly one flag and ends stage 1.
        let e = geo_economy(&["1/2", "2/3"]);
        let alloc = cycle_apportion(&e, &rat("1/1000000000000")).unwrap();
        let s1 = alloc.share_of("a1").unwrap();
        assert_eq!(s1.as_epset().unwrap(), &EPSet::from_slots([1, 3]).unwrap());
        let s2 = alloc.share_of("a2").unwrap();
        assert_eq!(
            s2.as_epset().unwrap(),
            &EPSet::full().difference(&EPSet::from_slots([1, 3]).unwrap())
        );
        let trace = alloc.trace.as_ref().unwrap();
        assert_eq!(
            trace.stages[0].termination,
            StageTermination::SingleFlag { slot: 3 }
        );
        // Exact stage bounds: recipient above 1/2, the other at most 1/2.
        assert!(trace.stages[0].recipient_value.lo() >= &rat("1/2"));
        assert!(trace.stages[0].other_values[0].1.hi() <= &rat("1/2"));
        let cert = verify_proportional(&e, &alloc, &rat("1/1000000"), 100).unwrap();
        assert!(cert.verdict.passed());
    }

    #[test]
    fn identical_agents_limit_stage() {
        // Two identical halves: the basket limits at exactly {1}, worth 1/2.
        let e = geo_economy(&["1/2", "1/2"]);
        let alloc = cycle_apportion(&e, &rat("1/1000000000000")).unwrap();
        let trace = alloc.trace.as_ref().unwrap();
        assert!(matches!(
            trace.stages[0].termination,
            StageTermination::Limit { .. }
        ));
        let s1 = alloc.share_of("a1").unwrap();
        assert_eq!(s1.members_upto(64).unwrap(), vec![1]);
        // The pinned limit value is exactly 1/2.
        let own = e.agents[0]
            .utility
            .mass_interval(s1, &rat("1/1000000"))
            .unwrap();
        assert!(own.is_degenerate() && own.lo() == &rat("1/2"));
        let cert = verify_proportional(&e, &alloc, &rat("1/1000000000000"), 200).unwrap();
        assert!(cert.verdict.passed(), "{cert:?}");
    }

    #[test]
    fn patience_gate() {
        // kakeya(2/3) = 2 < 2n-3 = 3 for n = 3.
        let e = geo_economy(&["3/4", "3/4", "2/3"]);
        assert!(matches!(
            cycle_apportion(&e, &rat("1/1000")),
            Err(Error::InsufficientPatience { .. })
        ));
        let p = UtilityFn::perturbed(rat("3/4"), [(1, rat("0")), (2, rat("1/2"))]).unwrap();
        let e2 = Economy::from_utilities(vec![
            p,
            UtilityFn::geometric(rat("3/4")).unwrap(),
        ])
        .unwrap();
        assert!(matches!(
            cycle_apportion(&e2, &rat("1/1000")),
            Err(Error::NotMonotonic(_))
        ));
    }

    #[test]
    fn three_identical_agents_all_limit_stages() {
        let e = geo_economy(&["3/4", "3/4", "3/4"]);
        let alloc = cycle_apportion(&e, &rat("1/1000000000000")).unwrap();
        for a in ["a1", "a2", "a3"] {
            let own = e.agents[0]
                .utility
                .mass_interval(alloc.share_of(a).unwrap(), &rat("1/1000000"))
                .unwrap();
            assert!(own.is_degenerate() && own.lo() == &rat("1/3"), "{a}: {own:?}");
        }
        // Prefix audit: every early slot lands in exactly one share.
        assert_eq!(
            alloc.audit_partition(120).unwrap(),
            PartitionAudit::PrefixAudited { horizon: 120 }
        );
        let cert = verify_proportional(&e, &alloc, &rat("1/1000000000000"), 120).unwrap();
        assert!(cert.verdict.passed());
    }

    #[test]
    fn lift_is_identity_for_monotone_economies() {
        let e = geo_economy(&["1/2", "2/3"]);
        let alloc = proportional_allocate(&e, &rat("1/1000000000000")).unwrap();
        assert_eq!(alloc.share_of("a1").unwrap().as_epset().unwrap().members_upto(3), vec![1, 3]);
    }

    #[test]
    fn lift_reorders_picks_for_boosted_late_slot() {
        // Agent a1 prefers slot 2 over slot 1; a2 is plain geometric. In the
        // monotone economy a1's utility is geometric 1/2, so the allocation
        // is the same as the monotone one, but the lift lets a1 grab slot 2
        // first when his monotone share hands him slot 1.
        let bumpy =
            UtilityFn::perturbed(rat("1/2"), [(1, rat("1/4")), (2, rat("1/2"))]).unwrap();
        let plain = UtilityFn::geometric(rat("1/2")).unwrap();
        let e = Economy::from_utilities(vec![bumpy, plain]).unwrap();
        let alloc = proportional_allocate(&e, &rat("1/1000000000000")).unwrap();
        // Monotone economy: both agents geometric 1/2, identical-limit stage
        // gives a1 the basket {1}; a2 takes the rest. After the lift, a1's
        // first (and only) pick is slot 2.
        let s1 = alloc.share_of("a1").unwrap();
        assert!(s1.contains(2).unwrap());
        assert!(!s1.contains(1).unwrap());
        // Slot 1 is picked by a2 eventually or never picked and falls to a1.
        let cert = verify_proportional(&e, &alloc, &rat("1/1000000000000"), 100).unwrap();
        assert!(cert.verdict.passed(), "{cert:?}");
    }

    #[test]
    fn verify_flags_bad_allocations() {
        // Giving agent 1 only slot 1 under geometric 5/6 is certifiably
        // below 1/2.
        let e = geo_economy(&["5/6", "5/6"]);
        let bad = Allocation {
            shares: vec![
                ShareEntry {
                    agent: "a1".into(),
                    share: Schedule::Periodic(EPSet::from_slots([1]).unwrap()),
                },
                ShareEntry {
                    agent: "a2".into(),
                    share: Schedule::Periodic(
                        EPSet::full().difference(&EPSet::from_slots([1]).unwrap()),
                    ),
                },
            ],
            evidence: PartitionEvidence::Exact,
            trace: None,
        };
        let cert = verify_proportional(&e, &bad, &rat("1/1000"), 50).unwrap();
        assert_eq!(cert.verdict, Verdict::CertifiedFail);
        assert_eq!(cert.agents[0].verdict, Verdict::CertifiedFail);
        // Boundary: a degenerate interval exactly at 1/n passes (inclusive).
        assert_eq!(cert.agents[1].verdict, Verdict::CertifiedPass);
    }

    #[test]
    fn allocation_json_round_trip() {
        let e = geo_economy(&["1/2", "2/3"]);
        let alloc = cycle_apportion(&e, &rat("1/1000000")).unwrap();
        let v = alloc.to_json_value(64).unwrap();
        let back = Allocation::from_json_value(&v).unwrap();
        let cert = verify_proportional(&e, &back, &rat("1/1000"), 50).unwrap();
        assert!(cert.verdict.passed());
    }
}
