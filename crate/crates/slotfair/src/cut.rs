//! The two cut procedures and the divisibility arithmetic they rest on.
//!
//! A schedule `S` is `k`-divisible for an agent when, inside `S`, every
//! remainder after a slot is worth at least `k` times that slot. Divisibility
//! is the budget a set has for precise cuts:
//!
//! - the **greedy cut** scans a 1-divisible source in slot order, taking each
//!   slot that still fits under the target; the taken set is worth exactly
//!   the target to the cutter and the remainder keeps level `k - 1` *for the
//!   cutter only*;
//! - the **tripartition cut** splits a 5-divisible source into three
//!   interleaved cycles (sort / skip / take), keeps the whole take cycle,
//!   tops it up greedily from the sort cycle, and leaves both sides
//!   `(k - 2)/3`-divisible *for every agent with monotone preferences*.
//!
//! Because exact divisibility of a procedural schedule is not computable, cut
//! preconditions are certificate-carried: sources arrive either with an
//! exactly computed level (closed-form sets) or with the floor guaranteed by
//! the theorem that produced them.

use std::cmp::Ordering;

use num_bigint::BigInt;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{ExactCursor, Level, UtilityFn};
use crate::numeric::{Rational, RatInterval};
use crate::schedule::{
    BoolScanner, EPSet, LazySchedule, MassPin, Provenance, Scanner, Schedule, MAX_SCAN,
};

/// How a caller certifies the divisibility level of a cut source.
#[derive(Debug, Clone)]
pub enum DivisibilityEvidence {
    /// Compute the exact level; only possible for closed-form sources.
    Exact,
    /// A floor carried from the theorem that produced the source.
    Certified(Rational),
}

/// Exact divisibility level of an eventually periodic set: the infimum over
/// members `t` with positive weight of `mass(S beyond t) / weight(t)`.
///
/// For a geometric-tailed utility the ratio is eventually constant on each
/// residue class, so the infimum is attained within the prefix plus one full
/// period.
pub fn divisibility_level(u: &UtilityFn, s: &EPSet) -> Level {
    if s.is_empty() {
        return Level::Infinite;
    }
    let lifted = s.with_threshold_at_least(u.max_adjusted_slot());
    let window = lifted.threshold() + lifted.period();
    let total = u.mass_epset(s);
    let mut running = Rational::zero();
    let mut best: Option<Rational> = None;
    for t in s.members_upto(window) {
        let w = u.weight(t);
        running = running + &w;
        if w.is_zero() {
            continue;
        }
        let ratio = (&total - &running) / w;
        best = Some(match best {
            Some(b) => b.min(ratio),
            None => ratio,
        });
    }
    match best {
        Some(b) => Level::Finite(b),
        None => Level::Infinite, // only zero-weight members: vacuous
    }
}

/// Outcome of a finite-horizon divisibility audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DivisibilityCheck {
    Pass,
    /// A certified violation at this slot.
    Fail { slot: u64 },
    /// Some comparison stayed undecided at the working precision.
    Inconclusive { slot: u64 },
}

/// Audits `mass(S beyond t) >= k * weight(t)` for every member `t` up to
/// `horizon`.
///
/// Closed-form schedules and pinned lazy schedules are checked exactly; for
/// the rest, tail masses are bracketed through the envelope and the bracket
/// is tightened until every comparison is decided or the scan budget runs
/// out.
pub fn divisibility_check(
    u: &UtilityFn,
    s: &Schedule,
    k: &Rational,
    horizon: u64,
) -> Result<DivisibilityCheck> {
    if k.is_negative() {
        return Err(Error::Parse("divisibility level must be nonnegative".into()));
    }
    if k.is_zero() {
        return Ok(DivisibilityCheck::Pass); // vacuous: tails are nonnegative
    }
    match s {
        Schedule::Periodic(set) => {
            let total = u.mass_epset(set);
            Ok(check_with_exact_total(u, &set.members_upto(horizon), &total, k))
        }
        Schedule::Lazy(lazy) => {
            let members = lazy.members_upto(horizon)?;
            if let Some(total) = lazy.pinned_mass(u) {
                return Ok(check_with_exact_total(u, &members, &total, k));
            }
            check_bracketed(u, lazy, &members, k, horizon)
        }
    }
}

fn check_with_exact_total(
    u: &UtilityFn,
    members: &[u64],
    total: &Rational,
    k: &Rational,
) -> DivisibilityCheck {
    let mut running = Rational::zero();
    for &t in members {
        let w = u.weight(t);
        running = running + &w;
        if w.is_zero() {
            continue;
        }
        if total - &running < k * &w {
            return DivisibilityCheck::Fail { slot: t };
        }
    }
    DivisibilityCheck::Pass
}

fn check_bracketed(
    u: &UtilityFn,
    lazy: &LazySchedule,
    members: &[u64],
    k: &Rational,
    horizon: u64,
) -> Result<DivisibilityCheck> {
    let envelope = lazy.envelope().cloned().unwrap_or_else(EPSet::full);
    let mut h = (horizon.max(64)).saturating_mul(4);
    let mut undecided: Vec<u64> = members.to_vec();
    loop {
        // One exact pass to h, snapshotting the running scaled sum at each
        // candidate so tails come out as big-integer comparisons.
        let far = lazy.members_upto(h)?;
        let mut cursor = ExactCursor::new(u);
        let acc = cursor.new_sum();
        let mut snaps: Vec<(u64, BigInt, BigInt)> = Vec::with_capacity(undecided.len());
        let mut idx = 0;
        let mut want = undecided.iter().peekable();
        while cursor.slot() < h {
            let t = cursor.advance();
            if idx < far.len() && far[idx] == t {
                cursor.add_current_weight(acc);
                idx += 1;
            }
            if want.peek() == Some(&&t) {
                want.next();
                snaps.push((t, cursor.sum_scaled(acc).clone(), cursor.weight_scaled_value()));
            }
        }
        let acc_h = cursor.sum_scaled(acc).clone();
        // Everything below is in raw units; the utility's scale factor
        // multiplies both sides of each comparison and cancels. Rounding the
        // envelope tail up to a dyadic keeps the products linear; it only
        // widens the upper bound, so fail certification stays sound.
        let extra_raw = u.mass_raw_noscale(&envelope.restrict_ge(h + 1));
        let env_extra = if extra_raw.is_zero() {
            Rational::zero()
        } else {
            extra_raw.dyadic_up(extra_raw.granularity_bits(64))
        };
        let q = u.delta().denom();
        let mut still: Vec<u64> = Vec::new();
        for (t, acc_t, w_t) in &snaps {
            let lift = q.pow((h - t) as u32);
            let w_h = w_t * &lift; // weight(t) scaled to exponent h
            if w_h.is_zero() {
                continue;
            }
            let tail_lo = &acc_h - acc_t * &lift; // members in (t, h]
            // pass: tail_lo >= k * w
            if &tail_lo * k.denom() >= k.numer() * &w_h {
                continue;
            }
            // fail: tail_lo + env_extra < k * w
            let lhs = (&tail_lo * env_extra.denom() + env_extra.numer() * cursor.scaled_denom())
                * k.denom();
            let rhs = k.numer() * &w_h * env_extra.denom();
            if lhs < rhs {
                return Ok(DivisibilityCheck::Fail { slot: *t });
            }
            still.push(*t);
        }
        if still.is_empty() {
            return Ok(DivisibilityCheck::Pass);
        }
        if env_extra.is_zero() || h >= MAX_SCAN / 4 {
            return Ok(DivisibilityCheck::Inconclusive { slot: still[0] });
        }
        undecided = still;
        h = h.saturating_mul(4);
    }
}

/// Divisibility retained by an `l`-dense subset of a `k`-divisible set for a
/// monotone agent: `(1/l) * (k - (l - 1))`.
pub fn dense_subset_bound(k: &Rational, l: u64) -> Result<Rational> {
    if l == 0 || Rational::from(l) > k + &Rational::one() {
        return Err(Error::BoundViolation { length: l, level: k.to_string() });
    }
    Ok((k - &Rational::from(l - 1)) / Rational::from(l))
}

/// Result of a cut: the taken sub-schedule, the remainder, the exact value
/// taken (for the cutter), and the theorem-guaranteed divisibility floors.
/// The floors are lower bounds carried by construction, not measured values.
#[derive(Debug, Clone)]
pub struct CutResult {
    pub taken: Schedule,
    pub remainder: Schedule,
    pub taken_value: Rational,
    pub floor_taken: Rational,
    pub floor_remainder: Rational,
    pub cutter: Option<String>,
}

impl CutResult {
    pub fn to_json_value(&self, horizon: u64) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "taken": self.taken.to_json_value(horizon)?,
            "remainder": self.remainder.to_json_value(horizon)?,
            "floors": {
                "taken": self.floor_taken,
                "remainder": self.floor_remainder,
            },
            "target": self.taken_value,
            "cutter": self.cutter,
        }))
    }
}

use crate::measure::known_exact_mass as exact_mass;

fn resolve_level(
    u: &UtilityFn,
    source: &Schedule,
    evidence: &DivisibilityEvidence,
) -> Result<Level> {
    match evidence {
        DivisibilityEvidence::Exact => match source {
            Schedule::Periodic(set) => Ok(divisibility_level(u, set)),
            Schedule::Lazy(_) => Err(Error::PreconditionUnverified(
                "exact divisibility is only computable for closed-form sources; \
                 pass a certified floor instead"
                    .into(),
            )),
        },
        DivisibilityEvidence::Certified(k) => Ok(Level::Finite(k.clone())),
    }
}

/// Brackets the mass of a schedule for one agent, tightened on demand by
/// extending the enumeration horizon. Backs every comparison against a
/// not-exactly-known mass.
pub(crate) struct MassRefiner {
    u: UtilityFn,
    sched: Schedule,
    envelope: EPSet,
    h: u64,
    cursor: ExactCursor,
    processed: usize,
    bounds: Option<(Rational, Rational)>,
    acc: crate::measure::SumId,
}

impl MassRefiner {
    pub(crate) fn new(u: &UtilityFn, sched: Schedule) -> Self {
        let envelope = sched.envelope_hint().unwrap_or_else(EPSet::full);
        let mut cursor = ExactCursor::new(u);
        let acc = cursor.new_sum();
        MassRefiner {
            u: u.clone(),
            sched,
            envelope,
            h: 0,
            cursor,
            processed: 0,
            bounds: None,
            acc,
        }
    }

    /// Current bracket `[lo, hi]` containing the exact mass.
    pub(crate) fn bounds(&mut self) -> Result<(Rational, Rational)> {
        if self.bounds.is_none() {
            self.h = 64;
            self.advance_to_h()?;
        }
        Ok(self.bounds.clone().expect("bounds computed"))
    }

    /// Tightens the bracket; `Ok(false)` when no further tightening is
    /// possible within the scan budget.
    pub(crate) fn refine(&mut self) -> Result<bool> {
        if let Some((lo, hi)) = &self.bounds {
            if lo == hi {
                return Ok(false);
            }
        }
        if self.h >= MAX_SCAN / 4 {
            return Ok(false);
        }
        self.h = (self.h.max(128)).saturating_mul(2);
        self.advance_to_h()?;
        Ok(true)
    }

    fn advance_to_h(&mut self) -> Result<()> {
        let members = self.sched.members_upto(self.h)?;
        while self.cursor.slot() < self.h {
            let t = self.cursor.advance();
            if self.processed < members.len() && members[self.processed] == t {
                self.cursor.add_current_weight(self.acc);
                self.processed += 1;
            }
        }
        let tail = self.u.mass_epset_raw(&self.envelope.restrict_ge(self.h + 1));
        if tail.is_zero() {
            // The envelope is exhausted: the enumerated mass is the mass.
            let exact = self.cursor.sum_value(self.acc);
            self.bounds = Some((exact.clone(), exact));
            return Ok(());
        }
        // Dyadic outward bracket sized to the tail: comparisons against it
        // are linear, and the slack is far below the tail itself.
        let bits = tail.granularity_bits(64);
        let (sum_lo, sum_hi) = self.cursor.sum_dyadic_bounds(self.acc, bits);
        let hi = sum_hi + tail.dyadic_up(bits);
        self.bounds = Some((sum_lo, hi));
        Ok(())
    }
}

/// An affine combination `constant + sum of coeff * mass(schedule)` whose
/// value is known only as a bracket, tightened by extending enumerations.
///
/// The exposed bracket is rounded outward to dyadic endpoints sized to its
/// width, so the scan comparisons against it stay linear in the operand
/// size; the rounding slack is negligible next to the width itself.
pub(crate) struct LinearMassOracle {
    constant: Rational,
    terms: Vec<(Rational, MassRefiner)>,
    cached: Option<(Rational, Rational)>,
}

impl LinearMassOracle {
    pub(crate) fn new(constant: Rational, terms: Vec<(Rational, MassRefiner)>) -> Self {
        LinearMassOracle { constant, terms, cached: None }
    }

    fn bounds(&mut self) -> Result<(Rational, Rational)> {
        if let Some(b) = &self.cached {
            return Ok(b.clone());
        }
        let mut total = RatInterval::exact(self.constant.clone());
        for (coeff, refiner) in &mut self.terms {
            let (lo, hi) = refiner.bounds()?;
            let term = RatInterval::new(lo, hi).expect("refiner bounds ordered").scale(coeff);
            total = &total + &term;
        }
        let rounded = crate::numeric::round_bracket_outward(total.lo(), total.hi());
        self.cached = Some(rounded.clone());
        Ok(rounded)
    }

    fn refine(&mut self) -> Result<bool> {
        let mut improved = false;
        for (_, refiner) in &mut self.terms {
            improved |= refiner.refine()?;
        }
        if improved {
            self.cached = None;
        }
        Ok(improved)
    }
}

/// A cut target: an exact rational, or a bracket that can be tightened.
pub(crate) enum CutTarget {
    Exact(Rational),
    Bracketed(LinearMassOracle),
}

impl CutTarget {
    /// `base - mass(sched)`, the target of the greedy top-up inside a
    /// tripartition cut.
    fn complement(base: Rational, u: &UtilityFn, sched: Schedule) -> Self {
        CutTarget::Bracketed(LinearMassOracle::new(
            base,
            vec![(-Rational::one(), MassRefiner::new(u, sched))],
        ))
    }

    fn bounds(&mut self) -> Result<(Rational, Rational)> {
        match self {
            CutTarget::Exact(v) => Ok((v.clone(), v.clone())),
            CutTarget::Bracketed(oracle) => oracle.bounds(),
        }
    }

    fn refine(&mut self) -> Result<bool> {
        match self {
            CutTarget::Exact(_) => Ok(false),
            CutTarget::Bracketed(oracle) => oracle.refine(),
        }
    }
}

/// Builds the lazy schedule selected by a greedy scan of `source` against an
/// arbitrary (possibly bracketed) target.
pub(crate) fn greedy_lazy(
    u: &UtilityFn,
    source: &Schedule,
    target: CutTarget,
    envelope: Option<EPSet>,
    provenance: Provenance,
    pins: Vec<MassPin>,
) -> Schedule {
    Schedule::Lazy(LazySchedule::new(
        Box::new(GreedyScanner::new(u, source.clone(), target)),
        envelope,
        provenance,
        pins,
    ))
}

/// Scan-and-take membership replay: a slot of the source is taken iff the
/// running total plus its weight stays within the target.
struct GreedyScanner {
    source: Schedule,
    cursor: ExactCursor,
    acc: crate::measure::SumId,
    target: CutTarget,
    exhausted: bool,
}

impl GreedyScanner {
    fn new(u: &UtilityFn, source: Schedule, target: CutTarget) -> Self {
        let mut cursor = ExactCursor::new(u);
        let acc = cursor.new_sum();
        GreedyScanner { source, cursor, acc, target, exhausted: false }
    }
}

impl Scanner for GreedyScanner {
    fn scan(&mut self, t: u64) -> Result<bool> {
        debug_assert_eq!(self.cursor.slot() + 1, t);
        self.cursor.advance();
        if self.exhausted || !self.source.contains(t)? {
            return Ok(false);
        }
        loop {
            let (lo, hi) = self.target.bounds()?;
            // take iff acc + w <= g for the true target g in [lo, hi]
            if self.cursor.cmp_sum_vs(self.acc, true, &lo) != Ordering::Greater {
                let hit = lo == hi && self.cursor.cmp_sum_vs(self.acc, true, &lo) == Ordering::Equal;
                self.cursor.add_current_weight(self.acc);
                if hit {
                    self.exhausted = true; // residual is exactly zero
                }
                return Ok(true);
            }
            if self.cursor.cmp_sum_vs(self.acc, true, &hi) == Ordering::Greater {
                return Ok(false);
            }
            if !self.target.refine()? {
                return Err(Error::UndecidedAtPrecision(format!(
                    "greedy take decision at slot {t}"
                )));
            }
        }
    }
}

/// Greedy cut: returns `taken` worth exactly `v` to the cutter, scanning the
/// source in slot order. The remainder keeps divisibility `k - 1` for the
/// cutter; nothing is guaranteed for the taken side or for other agents.
pub fn greedy_cut(
    u: &UtilityFn,
    source: &Schedule,
    v: &Rational,
    evidence: &DivisibilityEvidence,
) -> Result<CutResult> {
    let level = resolve_level(u, source, evidence)?;
    if !level.at_least(&Rational::one()) {
        return Err(Error::InsufficientDivisibility {
            have: level.to_string(),
            need: "1".into(),
        });
    }
    let floor_k = level.as_finite().cloned().unwrap_or_else(|| Rational::one());
    if v.is_negative() {
        return Err(Error::TargetOutOfRange { target: v.to_string() });
    }
    let total = exact_mass(u, source);
    match &total {
        Some(total) => {
            if v > total {
                return Err(Error::TargetOutOfRange { target: v.to_string() });
            }
        }
        None => {
            // Certify v <= mass(source) by refinement.
            let mut refiner = MassRefiner::new(u, source.clone());
            loop {
                let (lo, hi) = refiner.bounds()?;
                if v <= &lo {
                    break;
                }
                if v > &hi {
                    return Err(Error::TargetOutOfRange { target: v.to_string() });
                }
                if !refiner.refine()? {
                    return Err(Error::UndecidedAtPrecision(
                        "greedy target against source mass".into(),
                    ));
                }
            }
        }
    }

    let floor_rem = &floor_k - &Rational::one();
    // Trivial targets short-circuit to exact set results.
    if v.is_zero() {
        return Ok(CutResult {
            taken: Schedule::Periodic(EPSet::empty()),
            remainder: source.clone(),
            taken_value: Rational::zero(),
            floor_taken: Rational::zero(),
            floor_remainder: floor_rem,
            cutter: None,
        });
    }
    if total.as_ref() == Some(v) {
        return Ok(CutResult {
            taken: source.clone(),
            remainder: Schedule::Periodic(EPSet::empty()),
            taken_value: v.clone(),
            floor_taken: Rational::zero(),
            floor_remainder: floor_rem,
            cutter: None,
        });
    }

    // Probe the scan: if the running total hits the target exactly within
    // the probe window, the taken set is finite and closed-form.
    if let Schedule::Periodic(set) = source {
        if let Some(picks) = probe_exact_greedy(u, set, v, 4096)? {
            let taken_set = EPSet::from_slots(picks)?;
            let remainder_set = set.difference(&taken_set);
            return Ok(CutResult {
                taken: Schedule::Periodic(taken_set),
                remainder: Schedule::Periodic(remainder_set),
                taken_value: v.clone(),
                floor_taken: Rational::zero(),
                floor_remainder: floor_rem,
                cutter: None,
            });
        }
    }

    let envelope = source.envelope_hint();
    let mut taken_pins = vec![MassPin { utility: u.clone(), mass: v.clone() }];
    let mut rem_pins = Vec::new();
    if let Some(total) = &total {
        rem_pins.push(MassPin { utility: u.clone(), mass: total - v });
    }
    taken_pins.dedup();
    let taken = Schedule::Lazy(LazySchedule::new(
        Box::new(GreedyScanner::new(u, source.clone(), CutTarget::Exact(v.clone()))),
        envelope.clone(),
        Provenance::labeled("greedy_taken").with_param("target", v),
        taken_pins,
    ));
    let remainder = Schedule::Lazy(LazySchedule::new(
        Box::new(BoolScanner::difference(source.clone(), taken.clone())),
        envelope,
        Provenance::labeled("greedy_remainder").with_param("target", v),
        rem_pins,
    ));
    Ok(CutResult {
        taken,
        remainder,
        taken_value: v.clone(),
        floor_taken: Rational::zero(),
        floor_remainder: floor_rem,
        cutter: None,
    })
}

/// Runs the greedy scan over a closed-form source until the residual hits
/// zero (returning the finite pick set) or the probe budget is exhausted.
/// A finite source that runs out before reaching the target is an error:
/// the divisibility precondition cannot have held.
fn probe_exact_greedy(
    u: &UtilityFn,
    set: &EPSet,
    v: &Rational,
    probe_members: u64,
) -> Result<Option<Vec<u64>>> {
    let mut cursor = ExactCursor::new(u);
    let acc = cursor.new_sum();
    let mut picks = Vec::new();
    let mut rank = 1u64;
    let finite_len = set.finite_len();
    loop {
        if let Some(len) = finite_len {
            if rank > len {
                return Err(Error::PreconditionUnverified(
                    "source exhausted before reaching the greedy target".into(),
                ));
            }
        } else if rank > probe_members {
            return Ok(None);
        }
        let t = set.nth_member(rank)?;
        while cursor.slot() < t {
            cursor.advance();
        }
        match cursor.cmp_sum_vs(acc, true, v) {
            Ordering::Greater => {}
            Ordering::Less => {
                cursor.add_current_weight(acc);
                picks.push(t);
            }
            Ordering::Equal => {
                picks.push(t);
                return Ok(Some(picks));
            }
        }
        rank += 1;
    }
}

/// Classifies source members into sort/skip/take cycles from rank `r` and
/// replays the take-all plus greedy-top-up membership rule.
struct TripartScanner {
    source: Schedule,
    rank_start: u64,
    seen: u64,
    greedy: GreedyScanner,
}

impl Scanner for TripartScanner {
    fn scan(&mut self, t: u64) -> Result<bool> {
        // The inner greedy scanner must see every slot to stay aligned.
        let in_source = self.source.contains(t)?;
        let mut sort_member = false;
        if in_source {
            self.seen += 1;
            if self.seen >= self.rank_start {
                match (self.seen - self.rank_start) % 3 {
                    0 => sort_member = true,
                    2 => {
                        self.greedy.scan_skip(t);
                        return Ok(true); // take cycle: always kept
                    }
                    _ => {
                        self.greedy.scan_skip(t);
                        return Ok(false); // skip cycle: always left
                    }
                }
            } else {
                self.greedy.scan_skip(t);
                return Ok(false); // before rank r: not part of the cut
            }
        }
        if sort_member {
            self.greedy.scan(t)
        } else {
            self.greedy.scan_skip(t);
            Ok(false)
        }
    }
}

impl GreedyScanner {
    /// Advances the cursor past a slot that is not offered to the greedy
    /// rule (used when an outer scanner pre-classifies slots).
    fn scan_skip(&mut self, t: u64) {
        debug_assert_eq!(self.cursor.slot() + 1, t);
        self.cursor.advance();
    }
}

/// Tripartition cut: splits a 5-divisible source so that the taken side is
/// worth exactly `v` to the cutter and *both* sides stay `(k - 2)/3`-
/// divisible for every agent with monotone preferences.
pub fn tripartition_cut(
    u: &UtilityFn,
    source: &Schedule,
    v: &Rational,
    evidence: &DivisibilityEvidence,
) -> Result<CutResult> {
    if !u.is_monotonic() {
        return Err(Error::NotMonotonic("tripartition cutter".into()));
    }
    let level = resolve_level(u, source, evidence)?;
    let five = Rational::from(5i64);
    if !level.at_least(&five) {
        return Err(Error::InsufficientDivisibility {
            have: level.to_string(),
            need: "5".into(),
        });
    }
    let k = level.as_finite().cloned().unwrap_or(five);
    let floor = dense_subset_bound(&k, 3).expect("k >= 5 admits length 3");
    if !v.is_positive() {
        return Err(Error::TargetOutOfRange { target: v.to_string() });
    }

    let total = exact_mass(u, source);
    // Decide the branch: v <= total/2 runs the direct construction, larger
    // targets cut the complement. Ties route to the direct branch.
    let two_v = v + v;
    let mirror = match &total {
        Some(total) => {
            if v >= total {
                return Err(Error::TargetOutOfRange { target: v.to_string() });
            }
            &two_v > total
        }
        None => {
            let mut refiner = MassRefiner::new(u, source.clone());
            loop {
                let (lo, hi) = refiner.bounds()?;
                if v > &hi {
                    return Err(Error::TargetOutOfRange { target: v.to_string() });
                }
                if &two_v > &hi {
                    break true;
                }
                if &two_v <= &lo {
                    break false;
                }
                if !refiner.refine()? {
                    return Err(Error::UndecidedAtPrecision(
                        "tripartition branch against half the source mass".into(),
                    ));
                }
            }
        }
    };

    if mirror {
        let total = total.ok_or_else(|| {
            Error::PreconditionUnverified(
                "the complement branch needs an exactly known source mass".into(),
            )
        })?;
        let inner = tripartition_cut(u, source, &(&total - v), evidence)?;
        return Ok(CutResult {
            taken: inner.remainder,
            remainder: inner.taken,
            taken_value: v.clone(),
            floor_taken: inner.floor_remainder,
            floor_remainder: inner.floor_taken,
            cutter: None,
        });
    }

    // r = least rank with mass(S from rank r) <= 3v.
    let three_v = &(v + v) + v;
    let r = find_tripartition_rank(u, source, &total, &three_v)?;

    match source {
        Schedule::Periodic(set) => {
            let total = total.expect("closed-form mass");
            let sort = set.cycle(r, 3)?;
            let skip = set.cycle(r + 1, 3)?;
            let take = set.cycle(r + 2, 3)?;
            debug_assert!(sort.union(&skip).union(&take) == set.tail(r)?);
            let take_mass = u.mass_epset(&take);
            let g = v - &take_mass;
            debug_assert!(!g.is_negative());
            let inner = greedy_cut(
                u,
                &Schedule::Periodic(sort),
                &g,
                &DivisibilityEvidence::Certified(Rational::one()),
            )?;
            let taken = Schedule::Periodic(take).union(&inner.taken);
            let remainder = Schedule::difference(&source.clone(), &taken);
            let (taken, remainder) =
                attach_tripartition_metadata(u, set, r, v, &total, taken, remainder);
            Ok(CutResult {
                taken,
                remainder,
                taken_value: v.clone(),
                floor_taken: floor.clone(),
                floor_remainder: floor,
                cutter: None,
            })
        }
        Schedule::Lazy(_) => {
            let take_sched = source.cycle(r + 2, 3)?;
            let target = CutTarget::complement(v.clone(), u, take_sched);
            let greedy = GreedyScanner::new(u, source.clone(), target);
            let first = source.nth_member(r)?;
            let envelope = source.envelope_hint().map(|e| e.restrict_ge(first));
            let taken = Schedule::Lazy(LazySchedule::new(
                Box::new(TripartScanner {
                    source: source.clone(),
                    rank_start: r,
                    seen: 0,
                    greedy,
                }),
                envelope,
                Provenance::labeled("tripartition_taken")
                    .with_param("target", v)
                    .with_param("rank", r),
                vec![MassPin { utility: u.clone(), mass: v.clone() }],
            ));
            let mut rem_pins = Vec::new();
            if let Some(total) = &total {
                rem_pins.push(MassPin { utility: u.clone(), mass: total - v });
            }
            let remainder = Schedule::Lazy(LazySchedule::new(
                Box::new(BoolScanner::difference(source.clone(), taken.clone())),
                source.envelope_hint(),
                Provenance::labeled("tripartition_remainder")
                    .with_param("target", v)
                    .with_param("rank", r),
                rem_pins,
            ));
            Ok(CutResult {
                taken,
                remainder,
                taken_value: v.clone(),
                floor_taken: floor.clone(),
                floor_remainder: floor,
                cutter: None,
            })
        }
    }
}

/// Rebuilds the two sides as lazy views carrying pins and the contained
/// cycles that later density checks rely on. Closed-form sides stay closed
/// form (they are exact already).
fn attach_tripartition_metadata(
    u: &UtilityFn,
    source: &EPSet,
    r: u64,
    v: &Rational,
    total: &Rational,
    taken: Schedule,
    remainder: Schedule,
) -> (Schedule, Schedule) {
    let taken = match taken {
        s @ Schedule::Periodic(_) => s,
        Schedule::Lazy(lazy) => Schedule::Lazy(LazySchedule::new(
            Box::new(BoolScanner::union(
                Schedule::Lazy(lazy.clone()),
                Schedule::Periodic(EPSet::empty()),
            )),
            Some(source.restrict_ge(source.nth_member(r).expect("rank exists"))),
            Provenance::labeled("tripartition_taken")
                .with_param("target", v)
                .with_param("rank", r)
                .with_cycle(source.clone(), r + 2, 3),
            vec![MassPin { utility: u.clone(), mass: v.clone() }],
        )),
    };
    let rem_cycle_start = (r % 3) + 1;
    let remainder = match remainder {
        s @ Schedule::Periodic(_) => s,
        Schedule::Lazy(lazy) => Schedule::Lazy(LazySchedule::new(
            Box::new(BoolScanner::union(
                Schedule::Lazy(lazy.clone()),
                Schedule::Periodic(EPSet::empty()),
            )),
            Some(source.clone()),
            Provenance::labeled("tripartition_remainder")
                .with_param("target", v)
                .with_param("rank", r)
                .with_cycle(source.clone(), rem_cycle_start, 3),
            vec![MassPin { utility: u.clone(), mass: total - v }],
        )),
    };
    (taken, remainder)
}

fn find_tripartition_rank(
    u: &UtilityFn,
    source: &Schedule,
    total: &Option<Rational>,
    three_v: &Rational,
) -> Result<u64> {
    let mut prefix = Rational::zero();
    let mut refiner: Option<MassRefiner> = None;
    for r in 1..MAX_SCAN {
        // mass of the tail from rank r = total - mass of the first r-1 members
        let decided = match total {
            Some(total) => total - &prefix <= *three_v,
            None => {
                let refiner =
                    refiner.get_or_insert_with(|| MassRefiner::new(u, source.clone()));
                loop {
                    let (lo, hi) = refiner.bounds()?;
                    if &(&hi - &prefix) <= three_v {
                        break true;
                    }
                    if &(&lo - &prefix) > three_v {
                        break false;
                    }
                    if !refiner.refine()? {
                        return Err(Error::UndecidedAtPrecision(format!(
                            "tripartition rank search at rank {r}"
                        )));
                    }
                }
            }
        };
        if decided {
            return Ok(r);
        }
        let slot = source.nth_member(r)?;
        prefix = prefix + u.weight(slot);
    }
    Err(Error::HorizonExhausted(MAX_SCAN))
}

/// Certified interval for the mass of a cut piece; convenience over
/// [`UtilityFn::mass_interval`].
pub fn piece_value(u: &UtilityFn, piece: &Schedule, precision: &Rational) -> Result<RatInterval> {
    u.mass_interval(piece, precision)
}

/// Floors serialization for ledgers and traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FloorRecord {
    pub piece: String,
    pub agent: String,
    pub floor: Rational,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rat;

    fn geo(d: &str) -> UtilityFn {
        UtilityFn::geometric(rat(d)).unwrap()
    }

    #[test]
    fn divisibility_level_examples() {
        let u = geo("5/6");
        assert_eq!(divisibility_level(&u, &EPSet::full()), Level::Finite(rat("5")));
        assert_eq!(
            divisibility_level(&u, &EPSet::progression(1, 3).unwrap()),
            Level::Finite(rat("125/91"))
        );
        assert_eq!(divisibility_level(&geo("1/2"), &EPSet::full()), Level::Finite(rat("1")));
        assert_eq!(divisibility_level(&u, &EPSet::empty()), Level::Infinite);
        // Finite sets bottom out at zero.
        assert_eq!(
            divisibility_level(&u, &EPSet::from_slots([2, 5]).unwrap()),
            Level::Finite(rat("0"))
        );
    }

    #[test]
    fn divisibility_level_matches_ratio_scan() {
        let u = geo("5/6");
        let s = EPSet::new(4, [1, 4], 3, [1]).unwrap();
        let total = u.mass_epset(&s);
        let mut best: Option<Rational> = None;
        let mut running = Rational::zero();
        for t in s.members_upto(60) {
            let w = u.weight(t);
            running = running + &w;
            let ratio = (&total - &running) / w;
            best = Some(match best {
                Some(b) => b.min(ratio),
                None => ratio,
            });
        }
        assert_eq!(divisibility_level(&u, &s), Level::Finite(best.unwrap()));
    }

    #[test]
    fn dense_subset_bound_examples() {
        assert_eq!(dense_subset_bound(&rat("8"), 3).unwrap(), rat("2"));
        assert_eq!(dense_subset_bound(&rat("5"), 3).unwrap(), rat("1"));
        assert_eq!(dense_subset_bound(&rat("7"), 1).unwrap(), rat("7"));
        assert!(matches!(
            dense_subset_bound(&rat("2"), 4),
            Err(Error::BoundViolation { .. })
        ));
    }

    #[test]
    fn greedy_terminating_example() {
        // delta 1/2, v = 3/4: slots 1 and 2 land exactly on the target.
        let u = geo("1/2");
        let cut = greedy_cut(&u, &Schedule::full(), &rat("3/4"), &DivisibilityEvidence::Exact)
            .unwrap();
        assert_eq!(cut.taken.as_epset().unwrap(), &EPSet::from_slots([1, 2]).unwrap());
        assert_eq!(u.mass_epset(cut.taken.as_epset().unwrap()), rat("3/4"));
        assert_eq!(cut.floor_remainder, rat("0"));
    }

    #[test]
    fn greedy_nonterminating_example() {
        // v = 1/3 has no finite binary expansion: the scan alternates.
        let u = geo("1/2");
        let cut = greedy_cut(&u, &Schedule::full(), &rat("1/3"), &DivisibilityEvidence::Exact)
            .unwrap();
        assert_eq!(cut.taken.members_upto(8).unwrap(), vec![2, 4, 6, 8]);
        assert_eq!(cut.remainder.members_upto(8).unwrap(), vec![1, 3, 5, 7]);
        // The taken value is pinned exactly by construction.
        let i = u.mass_interval(&cut.taken, &rat("1/1000000")).unwrap();
        assert!(i.is_degenerate() && i.lo() == &rat("1/3"));
    }

    #[test]
    fn greedy_zero_target() {
        let u = geo("2/3");
        let cut = greedy_cut(&u, &Schedule::full(), &rat("0"), &DivisibilityEvidence::Exact)
            .unwrap();
        assert!(cut.taken.as_epset().unwrap().is_empty());
        assert_eq!(cut.remainder, Schedule::full());
    }

    #[test]
    fn greedy_rejects_bad_targets_and_levels() {
        let u = geo("1/2");
        assert!(matches!(
            greedy_cut(&u, &Schedule::full(), &rat("3/2"), &DivisibilityEvidence::Exact),
            Err(Error::TargetOutOfRange { .. })
        ));
        // A sparse set is not 1-divisible for an impatient agent.
        let sparse = Schedule::Periodic(EPSet::progression(1, 5).unwrap());
        assert!(matches!(
            greedy_cut(&geo("1/2"), &sparse, &rat("1/100"), &DivisibilityEvidence::Exact),
            Err(Error::InsufficientDivisibility { .. })
        ));
    }

    #[test]
    fn greedy_remainder_divisibility_audit() {
        let u = geo("5/6"); // level 5 on T
        let cut = greedy_cut(&u, &Schedule::full(), &rat("1/3"), &DivisibilityEvidence::Exact)
            .unwrap();
        assert_eq!(
            divisibility_check(&u, &cut.remainder, &rat("4"), 200).unwrap(),
            DivisibilityCheck::Pass
        );
    }

    #[test]
    fn divisibility_check_detects_violation() {
        // Remove slot 1 from T, then demand level 6 at delta 5/6: the tail
        // after slot 2 is worth exactly 5 * w(2).
        let u = geo("5/6");
        let s = Schedule::from_membership_fn(|t| t >= 2, None);
        match divisibility_check(&u, &s, &rat("6"), 64).unwrap() {
            DivisibilityCheck::Fail { slot } => assert_eq!(slot, 2),
            other => panic!("expected a certified violation, got {other:?}"),
        }
        // Vacuous at level zero.
        assert_eq!(
            divisibility_check(&u, &s, &rat("0"), 64).unwrap(),
            DivisibilityCheck::Pass
        );
    }

    #[test]
    fn tripartition_reproduces_the_worked_example() {
        // delta 5/6, source T, target 11/50.
        let u = geo("5/6");
        let cut =
            tripartition_cut(&u, &Schedule::full(), &rat("11/50"), &DivisibilityEvidence::Exact)
                .unwrap();
        assert_eq!(cut.taken.members_upto(12).unwrap(), vec![6, 7, 9, 12]);
        assert_eq!(cut.floor_taken, rat("1"));
        assert_eq!(cut.floor_remainder, rat("1"));
        let i = u.mass_interval(&cut.taken, &rat("1/1000000")).unwrap();
        assert!(i.contains(&rat("11/50")));
        // Density of both sides against the source is certified.
        assert_eq!(
            cut.taken.is_dense(&EPSet::full(), 3).unwrap(),
            crate::schedule::Denseness::Dense
        );
        assert_eq!(
            cut.remainder.is_dense(&EPSet::full(), 3).unwrap(),
            crate::schedule::Denseness::Dense
        );
    }

    #[test]
    fn tripartition_mirror_case() {
        let u = geo("5/6");
        let direct =
            tripartition_cut(&u, &Schedule::full(), &rat("11/50"), &DivisibilityEvidence::Exact)
                .unwrap();
        let mirrored =
            tripartition_cut(&u, &Schedule::full(), &rat("39/50"), &DivisibilityEvidence::Exact)
                .unwrap();
        // The mirrored taken side is the complement of the direct one.
        let h = 60;
        assert_eq!(
            mirrored.taken.members_upto(h).unwrap(),
            direct.remainder.members_upto(h).unwrap()
        );
    }

    #[test]
    fn tripartition_requires_patience_and_monotonicity() {
        assert!(matches!(
            tripartition_cut(
                &geo("1/2"),
                &Schedule::full(),
                &rat("1/4"),
                &DivisibilityEvidence::Exact
            ),
            Err(Error::InsufficientDivisibility { .. })
        ));
        let bumpy =
            UtilityFn::perturbed(rat("199/200"), [(1, rat("0")), (2, rat("1/100"))]).unwrap();
        assert!(!bumpy.is_monotonic());
        assert!(matches!(
            tripartition_cut(&bumpy, &Schedule::full(), &rat("1/4"), &DivisibilityEvidence::Exact),
            Err(Error::NotMonotonic(_))
        ));
    }

    #[test]
    fn tripartition_on_lazy_source() {
        // Cut T at 1/3, then cut the lazy remainder again: the nested cut
        // still meets its target exactly within certified bounds.
        let u = geo("9/10"); // level 9 on T; children keep (9-2)/3 = 7/3
        let first =
            tripartition_cut(&u, &Schedule::full(), &rat("1/3"), &DivisibilityEvidence::Exact)
                .unwrap();
        let rem_level = rat("7/3");
        assert_eq!(first.floor_remainder, rem_level);
        // The remainder is pinned at 2/3 for the cutter, so its mass is exact.
        let i = u.mass_interval(&first.remainder, &rat("1/1000")).unwrap();
        assert!(i.is_degenerate() && i.lo() == &rat("2/3"));
        // Second-stage greedy cut works on the lazy remainder.
        let second = greedy_cut(
            &u,
            &first.remainder,
            &rat("1/5"),
            &DivisibilityEvidence::Certified(rem_level),
        )
        .unwrap();
        let val = u.mass_interval(&second.taken, &rat("1/100000000")).unwrap();
        assert!(val.is_degenerate() && val.lo() == &rat("1/5"));
        // And the membership replay agrees with the pinned value.
        let loose = u
            .mass_interval(
                &Schedule::from_membership_fn(
                    {
                        let taken = second.taken.clone();
                        move |t| taken.contains(t).unwrap()
                    },
                    None,
                ),
                &rat("1/100000000"),
            )
            .unwrap();
        assert!(loose.contains(&rat("1/5")));
    }
}
