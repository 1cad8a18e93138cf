//! Utility functions as countably additive probability measures.
//!
//! The supported family is geometric discounting and finitely perturbed
//! geometric discounting: a base factor `delta` in (0, 1) with weight
//! `(1 - delta) * delta^(t-1)` at slot `t`, optionally overridden at finitely
//! many slots and renormalized by a single exact scale factor so the total
//! mass is exactly 1. This family admits exact masses for eventually periodic
//! sets, exact tail bounds for everything else, and exact reordering — while
//! still containing non-monotonic instances.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Rational, RatInterval, RawMass};
use crate::schedule::{EPSet, Schedule};

/// A divisibility or patience level: a non-negative rational, or infinite
/// (the empty schedule satisfies every level vacuously).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Level {
    Finite(Rational),
    Infinite,
}

impl Level {
    pub fn at_least(&self, k: &Rational) -> bool {
        match self {
            Level::Finite(v) => v >= k,
            Level::Infinite => true,
        }
    }

    pub fn as_finite(&self) -> Option<&Rational> {
        match self {
            Level::Finite(v) => Some(v),
            Level::Infinite => None,
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Finite(v) => write!(f, "{v}"),
            Level::Infinite => write!(f, "inf"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawAdjustment {
    t: u64,
    weight: Rational,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RawUtility {
    Geometric { delta: Rational },
    PerturbedGeometric { delta: Rational, adjustments: Vec<RawAdjustment> },
}

/// A discounted utility function with exact weights and exact tail masses.
///
/// Stored canonically: overrides equal to the base geometric weight are
/// dropped, so two utilities are equal iff they assign the same weights.
/// The scale factor is derived, never supplied: total mass is exactly 1 by
/// construction.
#[derive(Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(into = "RawUtility")]
pub struct UtilityFn {
    delta: Rational,
    adjustments: BTreeMap<u64, Rational>,
    scale: Rational,
}

impl From<UtilityFn> for RawUtility {
    fn from(u: UtilityFn) -> RawUtility {
        if u.adjustments.is_empty() {
            RawUtility::Geometric { delta: u.delta }
        } else {
            RawUtility::PerturbedGeometric {
                delta: u.delta,
                adjustments: u
                    .adjustments
                    .into_iter()
                    .map(|(t, weight)| RawAdjustment { t, weight })
                    .collect(),
            }
        }
    }
}

impl<'de> Deserialize<'de> for UtilityFn {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawUtility::deserialize(d)?;
        let built = match raw {
            RawUtility::Geometric { delta } => UtilityFn::geometric(delta),
            RawUtility::PerturbedGeometric { delta, adjustments } => UtilityFn::perturbed(
                delta,
                adjustments.into_iter().map(|a| (a.t, a.weight)),
            ),
        };
        built.map_err(serde::de::Error::custom)
    }
}

impl std::fmt::Debug for UtilityFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.adjustments.is_empty() {
            write!(f, "Geometric({})", self.delta)
        } else {
            write!(f, "PerturbedGeometric({}, {:?})", self.delta, self.adjustments)
        }
    }
}

impl UtilityFn {
    /// Plain geometric discounting with factor `delta` in (0, 1).
    pub fn geometric(delta: Rational) -> Result<Self> {
        check_delta(&delta)?;
        Ok(UtilityFn { delta, adjustments: BTreeMap::new(), scale: Rational::one() })
    }

    /// Geometric discounting with the raw weights at finitely many slots
    /// replaced, then renormalized to total mass exactly 1.
    pub fn perturbed(
        delta: Rational,
        overrides: impl IntoIterator<Item = (u64, Rational)>,
    ) -> Result<Self> {
        check_delta(&delta)?;
        let mut adjustments = BTreeMap::new();
        for (t, w) in overrides {
            if t == 0 {
                return Err(Error::Parse("adjustment slot must be >= 1".into()));
            }
            if w.is_negative() {
                return Err(Error::Parse(format!("negative weight {w} at slot {t}")));
            }
            adjustments.insert(t, w);
        }
        // Drop overrides that equal the base geometric weight.
        let base = UtilityFn { delta: delta.clone(), adjustments: BTreeMap::new(), scale: Rational::one() };
        adjustments.retain(|&t, w| *w != base.geometric_raw(t));
        if adjustments.is_empty() {
            return Ok(base);
        }
        // Raw total = 1 with finitely many slots corrected.
        let mut total = Rational::one();
        for (&t, w) in &adjustments {
            total = total - base.geometric_raw(t) + w.clone();
        }
        if !total.is_positive() {
            return Err(Error::Parse("perturbed weights have nonpositive total".into()));
        }
        let scale = total.recip()?;
        Ok(UtilityFn { delta, adjustments, scale })
    }

    pub fn delta(&self) -> &Rational {
        &self.delta
    }

    pub fn is_plain_geometric(&self) -> bool {
        self.adjustments.is_empty()
    }

    pub(crate) fn scale(&self) -> &Rational {
        &self.scale
    }

    pub(crate) fn adjustments(&self) -> &BTreeMap<u64, Rational> {
        &self.adjustments
    }

    /// Last slot with an overridden weight (0 when plain geometric).
    pub fn max_adjusted_slot(&self) -> u64 {
        self.adjustments.keys().next_back().copied().unwrap_or(0)
    }

    fn geometric_raw(&self, t: u64) -> Rational {
        (Rational::one() - self.delta.clone()) * self.delta.pow(t - 1)
    }

    fn raw_weight(&self, t: u64) -> Rational {
        match self.adjustments.get(&t) {
            Some(w) => w.clone(),
            None => self.geometric_raw(t),
        }
    }

    /// Exact weight of a single slot, `u({t})`.
    pub fn weight(&self, t: u64) -> Rational {
        assert!(t >= 1, "slots are indexed from 1");
        let raw = self.raw_weight(t);
        if self.scale == Rational::one() {
            raw
        } else {
            &self.scale * &raw
        }
    }

    /// Exact cumulative mass of `[1, t]`; `t = 0` gives 0.
    pub fn cumulative(&self, t: u64) -> Rational {
        if t == 0 {
            return Rational::zero();
        }
        // 1 - delta^t, with the finitely many overridden slots corrected.
        let mut raw = Rational::one() - self.delta.pow(t);
        for (&a, w) in &self.adjustments {
            if a <= t {
                raw = raw - self.geometric_raw(a) + w.clone();
            }
        }
        &self.scale * &raw
    }

    /// Exact mass of the tail `{t+1, t+2, ...}`.
    pub fn tail_mass(&self, t: u64) -> Rational {
        Rational::one() - self.cumulative(t)
    }

    /// Exact mass of an eventually periodic set.
    ///
    /// The prefix is summed slot by slot; each residue class of the periodic
    /// part is a geometric series with exact rational sum.
    pub fn mass_epset(&self, s: &EPSet) -> Rational {
        let raw = self.mass_epset_raw(s);
        Rational::new(raw.num, raw.den).expect("positive denominator")
    }

    /// The same mass as an unreduced fraction. All internal tail-bound and
    /// bracketing work runs on this form: reducing a fraction whose parts
    /// are huge coprime powers costs a quadratic gcd for nothing.
    pub(crate) fn mass_epset_raw(&self, s: &EPSet) -> RawMass {
        let raw = self.mass_raw_noscale(s);
        RawMass { num: raw.num * self.scale.numer(), den: raw.den * self.scale.denom() }
    }

    /// Mass in raw (pre-normalization) units.
    pub(crate) fn mass_raw_noscale(&self, s: &EPSet) -> RawMass {
        // Lift the threshold past the adjusted region so the periodic part
        // is purely geometric.
        let lifted;
        let s = if s.threshold() < self.max_adjusted_slot() {
            lifted = s.with_threshold_at_least(self.max_adjusted_slot());
            &lifted
        } else {
            s
        };
        let p = self.delta.numer();
        let q = self.delta.denom();
        let n0 = u32::try_from(s.threshold()).expect("threshold fits u32");
        let mut c = BigInt::one();
        for w in self.adjustments.values() {
            c = c.lcm(w.denom());
        }
        let q_n0 = q.pow(n0);
        // Prefix terms over the common denominator C * q^n0.
        let mut prefix_num = BigInt::zero();
        for &t in s.prefix() {
            match self.adjustments.get(&t) {
                Some(w) => prefix_num += (&c / w.denom()) * w.numer() * &q_n0,
                None => {
                    prefix_num += &c
                        * (q - p)
                        * p.pow(u32::try_from(t - 1).expect("slot fits u32"))
                        * q.pow(n0 - t as u32);
                }
            }
        }
        if !s.is_infinite() {
            return RawMass { num: prefix_num, den: c * q_n0 };
        }
        // Residue class r beyond the threshold sums to
        // (q-p) p^(n0+r) q^(P-1-r) / (q^n0 (q^P - p^P)).
        let period = u32::try_from(s.period()).expect("period fits u32");
        let d_p = q.pow(period) - p.pow(period);
        let mut series = BigInt::zero();
        for &r in s.residues() {
            let r = r as u32;
            series += p.pow(r) * q.pow(period - 1 - r);
        }
        let periodic_num = (q - p) * p.pow(n0) * series;
        RawMass { num: prefix_num * &d_p + periodic_num * &c, den: c * q_n0 * d_p }
    }

    /// Interval of width at most `precision` containing the mass of an
    /// arbitrary schedule. Degenerate for closed-form schedules and for lazy
    /// schedules whose producing procedure pinned this utility's mass.
    ///
    /// For the remaining lazy schedules the interval is `[p, p + tail]`,
    /// where `p` sums the members up to a horizon `H` and `tail` is the mass
    /// of the envelope past `H` (the full time line when no envelope is
    /// known); `H` is minimal with `tail <= precision`.
    pub fn mass_interval(&self, s: &Schedule, precision: &Rational) -> Result<RatInterval> {
        assert!(precision.is_positive(), "precision must be positive");
        match s {
            Schedule::Periodic(set) => Ok(RatInterval::exact(self.mass_epset(set))),
            Schedule::Lazy(lazy) => {
                if let Some(mass) = lazy.pinned_mass(self) {
                    return Ok(RatInterval::exact(mass));
                }
                let envelope = lazy.envelope().cloned().unwrap_or_else(EPSet::full);
                // Budget: three quarters of the precision for the tail, the
                // rest absorbs the dyadic rounding of the endpoints.
                let tail_budget = precision * &Rational::new(3, 4).expect("3/4");
                let tail_fits = |h: u64| {
                    self.mass_epset_raw(&envelope.restrict_ge(h + 1))
                        .cmp_rational(&tail_budget)
                        != std::cmp::Ordering::Greater
                };
                // Minimal horizon within budget, by doubling then bisection;
                // the tail mass is nonincreasing in the horizon.
                let mut hi = 1u64;
                while !tail_fits(hi) {
                    hi = hi.saturating_mul(2);
                    if hi > crate::schedule::MAX_SCAN {
                        return Err(Error::HorizonExhausted(hi));
                    }
                }
                let mut lo = 0u64;
                while lo < hi {
                    let mid = lo + (hi - lo) / 2;
                    if tail_fits(mid) {
                        hi = mid;
                    } else {
                        lo = mid + 1;
                    }
                }
                let horizon = hi;
                let members = lazy.members_upto(horizon)?;
                let bits = {
                    let num_bits = precision.numer().bits().max(1);
                    let den_bits = precision.denom().bits();
                    (den_bits.saturating_sub(num_bits) as u32 + 6).clamp(64, 1 << 14)
                };
                let mut cursor = ExactCursor::new(self);
                let acc = cursor.new_sum();
                let mut idx = 0;
                while cursor.slot() < horizon {
                    let t = cursor.advance();
                    if idx < members.len() && members[idx] == t {
                        cursor.add_current_weight(acc);
                        idx += 1;
                    }
                }
                let (p_lo, p_hi) = cursor.sum_dyadic_bounds(acc, bits);
                let tail_raw = self.mass_epset_raw(&envelope.restrict_ge(horizon + 1));
                let hi_val = if tail_raw.is_zero() {
                    p_hi
                } else {
                    p_hi + tail_raw.dyadic_up(bits)
                };
                Ok(RatInterval::new(p_lo, hi_val).expect("outward-rounded bounds ordered"))
            }
        }
    }

    /// Exact mass of a finite set of slots, summed with the scan cursor to
    /// avoid quadratic normalization.
    pub fn mass_of_slots(&self, slots: &[u64]) -> Rational {
        if slots.is_empty() {
            return Rational::zero();
        }
        let mut cursor = ExactCursor::new(self);
        let sum = cursor.new_sum();
        let mut idx = 0;
        let last = *slots.last().expect("nonempty");
        while cursor.slot() < last {
            let t = cursor.advance();
            if idx < slots.len() && slots[idx] == t {
                cursor.add_current_weight(sum);
                idx += 1;
            }
        }
        cursor.sum_value(sum)
    }

    /// The largest `k` such that every tail is worth at least `k` times the
    /// slot before it: `inf over t with weight(t) > 0` of
    /// `tail_mass(t) / weight(t)`.
    ///
    /// Beyond the adjusted region the ratio is constantly `d / (1 - d)`, so
    /// the infimum is attained among the finitely many perturbed slots or at
    /// that asymptotic value.
    pub fn kakeya_level(&self) -> Rational {
        let one = Rational::one();
        let mut level = &self.delta / &(&one - &self.delta);
        for t in 1..=self.max_adjusted_slot() {
            let w = self.weight(t);
            if w.is_zero() {
                // A zero-weight slot constrains nothing.
                continue;
            }
            let ratio = self.tail_mass(t) / w;
            if ratio < level {
                level = ratio;
            }
        }
        level
    }

    /// Whether weights are non-increasing in time. Decidable by checking up
    /// to one slot past the adjusted region: the geometric tail is strictly
    /// decreasing.
    pub fn is_monotonic(&self) -> bool {
        let m = self.max_adjusted_slot();
        (1..=m).all(|t| self.weight(t) >= self.weight(t + 1))
    }

    /// Whether weights are strictly decreasing (no ties anywhere).
    pub fn is_strictly_decreasing(&self) -> bool {
        let m = self.max_adjusted_slot();
        (1..=m).all(|t| self.weight(t) > self.weight(t + 1))
    }

    /// The monotone utility with the same positive weights arranged in
    /// non-increasing order, together with the rank map sending each rank of
    /// the reordered sequence to the original slot holding that weight.
    ///
    /// The merge is finite: beyond the perturbed region the weight sequence
    /// is already strictly decreasing and below every positive perturbed
    /// value, so only a bounded window needs sorting. Zero-weight slots
    /// disappear from the reordering (they hold no mass).
    pub fn monotonic_reordering(&self) -> (UtilityFn, RankMap) {
        if self.adjustments.is_empty() {
            return (self.clone(), RankMap::identity());
        }
        let maxadj = self.max_adjusted_slot();
        // Smallest positive raw weight in the perturbed window.
        let w_min = (1..=maxadj)
            .map(|t| self.raw_weight(t))
            .filter(|w| w.is_positive())
            .min()
            .expect("a geometric tail guarantees positive weights");
        // Last slot whose geometric weight still reaches w_min.
        let mut t_w = maxadj;
        let mut g = self.geometric_raw(maxadj + 1);
        while g >= w_min {
            t_w += 1;
            g = g * self.delta.clone();
        }
        let window = maxadj.max(t_w);

        let mut order: Vec<u64> = (1..=window).filter(|&t| self.raw_weight(t).is_positive()).collect();
        order.sort_by(|&a, &b| {
            self.raw_weight(b).cmp(&self.raw_weight(a)).then(a.cmp(&b))
        });
        let k = order.len() as u64;
        let tail_offset = window - k; // number of zero-weight slots dropped

        // Express the reordering in the same family: same delta, overrides
        // wherever the sorted weight differs from the base geometric one.
        // Dropped zero slots shift the tail, which folds into the overrides
        // as a power of delta.
        let zshift = self.delta.pow(tail_offset);
        let mut overrides = Vec::new();
        for (i, &slot) in order.iter().enumerate() {
            let rank = i as u64 + 1;
            let adjusted = self.raw_weight(slot) / zshift.clone();
            overrides.push((rank, adjusted));
        }
        let reordered = UtilityFn::perturbed(self.delta.clone(), overrides)
            .expect("reordered weights are valid");
        debug_assert_eq!(reordered.scale, &self.scale * &zshift);
        (reordered, RankMap { explicit: order, tail_offset })
    }
}

fn check_delta(delta: &Rational) -> Result<()> {
    if !delta.is_positive() || delta >= &Rational::one() {
        return Err(Error::Parse(format!("discount factor {delta} outside (0, 1)")));
    }
    Ok(())
}

/// Value-preserving map from ranks of a reordered weight sequence back to
/// the original slots: rank `r` of the sorted sequence is held by slot
/// `slot_for_rank(r)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankMap {
    explicit: Vec<u64>,
    tail_offset: u64,
}

impl RankMap {
    pub fn identity() -> Self {
        RankMap { explicit: Vec::new(), tail_offset: 0 }
    }

    pub fn is_identity(&self) -> bool {
        self.tail_offset == 0 && self.explicit.iter().enumerate().all(|(i, &s)| s == i as u64 + 1)
    }

    pub fn slot_for_rank(&self, rank: u64) -> u64 {
        assert!(rank >= 1);
        if rank <= self.explicit.len() as u64 {
            self.explicit[rank as usize - 1]
        } else {
            rank + self.tail_offset
        }
    }

    pub fn explicit_len(&self) -> u64 {
        self.explicit.len() as u64
    }
}

/// An economy: named agents with their utility functions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Economy {
    pub agents: Vec<Agent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    pub name: String,
    pub utility: UtilityFn,
}

impl Economy {
    pub fn new(agents: Vec<Agent>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::Parse("an economy needs at least one agent".into()));
        }
        let mut names: Vec<&str> = agents.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != agents.len() {
            return Err(Error::Parse("agent names must be unique".into()));
        }
        Ok(Economy { agents })
    }

    pub fn from_utilities(utilities: Vec<UtilityFn>) -> Result<Self> {
        Economy::new(
            utilities
                .into_iter()
                .enumerate()
                .map(|(i, utility)| Agent { name: format!("a{}", i + 1), utility })
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.name.clone()).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: Economy =
            serde_json::from_str(text).map_err(|err| Error::Parse(err.to_string()))?;
        Economy::new(e.agents)
    }
}

/// Exactly known mass of a schedule for a utility: closed forms always,
/// lazy schedules when the producing procedure pinned this utility.
pub(crate) fn known_exact_mass(u: &UtilityFn, s: &Schedule) -> Option<Rational> {
    match s {
        Schedule::Periodic(set) => Some(u.mass_epset(set)),
        Schedule::Lazy(lazy) => lazy.pinned_mass(u),
    }
}

/// Exact slot-by-slot scan support.
///
/// Keeps the running quantities as big integers over the implicit
/// denominator `C * q^t` (`delta = p/q`, `C` the lcm of override
/// denominators), so per-slot work is a couple of big-integer
/// multiplications by small constants and no gcd normalization. Scans over
/// thousands of slots with huge exact denominators stay cheap.
pub(crate) struct ExactCursor {
    p: BigInt,
    q: BigInt,
    c: BigInt,
    scale: Rational,
    adjustments: BTreeMap<u64, Rational>,
    t: u64,
    pending: u64, // slots advanced but not yet folded into the representation
    qt: BigInt,   // q^(t - pending)
    geo: BigInt,  // C * (q - p) * p^(t - pending - 1), the raw weight scaled
    sums: Vec<BigInt>,
}

#[derive(Clone, Copy)]
pub(crate) struct SumId(usize);

impl ExactCursor {
    pub(crate) fn new(u: &UtilityFn) -> Self {
        let p = u.delta.numer().clone();
        let q = u.delta.denom().clone();
        let mut c = BigInt::one();
        for w in u.adjustments.values() {
            c = c.lcm(w.denom());
        }
        let geo = &c * (&q - &p); // value for slot 1, activated by advance()
        ExactCursor {
            p,
            q,
            c,
            scale: u.scale.clone(),
            adjustments: u.adjustments.clone(),
            t: 0,
            pending: 0,
            qt: BigInt::one(),
            geo,
            sums: Vec::new(),
        }
    }

    pub(crate) fn slot(&self) -> u64 {
        self.t
    }

    /// Moves to the next slot and returns it. The representation update is
    /// deferred: consultations fold any pending slots in with one batched
    /// multiplication instead of one per slot, which is what makes sparse
    /// scans over deep schedule chains affordable.
    pub(crate) fn advance(&mut self) -> u64 {
        self.t += 1;
        self.pending += 1;
        self.t
    }

    fn flush(&mut self) {
        if self.pending == 0 {
            return;
        }
        let k = u32::try_from(self.pending).expect("pending fits u32");
        let qk = self.q.pow(k);
        self.qt *= &qk;
        for s in &mut self.sums {
            if !s.is_zero() {
                *s *= &qk;
            }
        }
        let crossed_start = self.t == self.pending; // geo already holds slot 1
        let steps = if crossed_start { k - 1 } else { k };
        if steps > 0 {
            self.geo *= self.p.pow(steps);
        }
        self.pending = 0;
    }

    /// Raw weight of the current slot, scaled by `C * q^t`.
    fn weight_scaled(&mut self) -> BigInt {
        self.flush();
        match self.adjustments.get(&self.t) {
            Some(w) => {
                // w = a/b with b | C: scaled value is a * (C/b) * q^t.
                let factor = (&self.c / w.denom()) * w.numer();
                factor * &self.qt
            }
            None => self.geo.clone(),
        }
    }

    /// Exact weight of the current slot.
    pub(crate) fn weight(&mut self) -> Rational {
        let num = self.weight_scaled() * self.scale.numer();
        let den = (&self.c * &self.qt) * self.scale.denom();
        Rational::new(num, den).expect("positive denominator")
    }

    pub(crate) fn new_sum(&mut self) -> SumId {
        self.sums.push(BigInt::zero());
        SumId(self.sums.len() - 1)
    }

    /// Adds the current slot's weight to a sum.
    pub(crate) fn add_current_weight(&mut self, id: SumId) {
        let w = self.weight_scaled();
        self.sums[id.0] += w;
    }

    /// Exact current value of a sum (in weight units, scale applied).
    pub(crate) fn sum_value(&mut self, id: SumId) -> Rational {
        self.flush();
        let num = &self.sums[id.0] * self.scale.numer();
        let den = (&self.c * &self.qt) * self.scale.denom();
        Rational::new(num, den).expect("positive denominator")
    }

    /// Running sum in the scaled representation (numerator over `C * q^t`).
    pub(crate) fn sum_scaled(&mut self, id: SumId) -> BigInt {
        self.flush();
        self.sums[id.0].clone()
    }

    /// The current sum as an unreduced fraction in weight units.
    pub(crate) fn sum_raw(&mut self, id: SumId) -> RawMass {
        self.flush();
        RawMass {
            num: &self.sums[id.0] * self.scale.numer(),
            den: (&self.c * &self.qt) * self.scale.denom(),
        }
    }

    /// Dyadic bracket of the current sum: `lo <= sum <= hi` with
    /// power-of-two denominators, no normalization of the huge exact form.
    pub(crate) fn sum_dyadic_bounds(&mut self, id: SumId, bits: u32) -> (Rational, Rational) {
        let raw = self.sum_raw(id);
        (raw.dyadic_down(bits), raw.dyadic_up(bits))
    }

    /// Current slot's raw weight in the scaled representation.
    pub(crate) fn weight_scaled_value(&mut self) -> BigInt {
        self.weight_scaled()
    }

    /// The implicit denominator `C * q^t` of the scaled representation.
    pub(crate) fn scaled_denom(&mut self) -> BigInt {
        self.flush();
        &self.c * &self.qt
    }

    /// Compares `sum (+ current weight) <=> v` exactly, without normalizing.
    pub(crate) fn cmp_sum_vs(
        &mut self,
        id: SumId,
        include_current_weight: bool,
        v: &Rational,
    ) -> std::cmp::Ordering {
        let mut lhs = if include_current_weight {
            self.weight_scaled() // flushes
        } else {
            self.flush();
            BigInt::zero()
        };
        lhs += &self.sums[id.0];
        // scale * lhs / (C q^t) <=> vn/vd
        let left = lhs * self.scale.numer() * v.denom();
        let right = v.numer() * self.scale.denom() * (&self.c * &self.qt);
        left.cmp(&right)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rat;

    fn geo(d: &str) -> UtilityFn {
        UtilityFn::geometric(rat(d)).unwrap()
    }

    #[test]
    fn weight_examples() {
        let u = geo("5/6");
        assert_eq!(u.weight(1), rat("1/6"));
        assert_eq!(u.weight(4), rat("125/1296"));
        let p = UtilityFn::perturbed(rat("1/2"), [(1, rat("1/4")), (2, rat("1/2"))]).unwrap();
        assert_eq!(p.weight(2), rat("1/2"));
        assert_eq!(p.weight(1), rat("1/4"));
        // Raw weights already sum to one here, so the scale is 1.
        assert_eq!(p.weight(3), rat("1/8"));
    }

    #[test]
    fn normalization_scales_overrides() {
        // delta = 1/2 with slot 1 zeroed: raw total 1/2, scale 2.
        let p = UtilityFn::perturbed(rat("1/2"), [(1, rat("0"))]).unwrap();
        assert_eq!(p.weight(1), rat("0"));
        assert_eq!(p.weight(2), rat("1/2"));
        assert_eq!(p.mass_epset(&EPSet::full()), rat("1"));
    }

    #[test]
    fn noop_perturbation_collapses_to_geometric() {
        let p = UtilityFn::perturbed(rat("1/2"), [(3, rat("1/8"))]).unwrap();
        assert!(p.is_plain_geometric());
        assert_eq!(p, geo("1/2"));
    }

    #[test]
    fn mass_examples() {
        let u = geo("5/6");
        assert_eq!(u.mass_epset(&EPSet::full()), rat("1"));
        assert_eq!(u.mass_epset(&EPSet::progression(6, 3).unwrap()), rat("3125/19656"));
        let h = geo("1/2");
        assert_eq!(h.mass_epset(&EPSet::progression(1, 2).unwrap()), rat("2/3"));
    }

    #[test]
    fn mass_oracle_bracket() {
        // Partial sum to 2000 terms plus the analytic remainder brackets the
        // closed form computed by mass_epset.
        let u = geo("5/6");
        let s = EPSet::progression(6, 3).unwrap();
        let mut partial = Rational::zero();
        for t in s.members_upto(2000) {
            partial = partial + u.weight(t);
        }
        let closed = u.mass_epset(&s);
        let remainder = u.tail_mass(2000);
        assert!(partial <= closed && closed <= partial + remainder);
    }

    #[test]
    fn kakeya_examples() {
        assert_eq!(geo("5/6").kakeya_level(), rat("5"));
        assert_eq!(geo("199/200").kakeya_level(), rat("199"));
        let p = UtilityFn::perturbed(rat("1/2"), [(1, rat("1/4")), (2, rat("1/2"))]).unwrap();
        assert_eq!(p.kakeya_level(), rat("1/2"));
    }

    #[test]
    fn kakeya_matches_ratio_scan() {
        let p = UtilityFn::perturbed(
            rat("2/3"),
            [(2, rat("1/27")), (5, rat("1/3")), (7, rat("0"))],
        )
        .unwrap();
        let horizon = p.max_adjusted_slot() + 1;
        let mut best: Option<Rational> = None;
        for t in 1..=horizon {
            let w = p.weight(t);
            if w.is_zero() {
                continue;
            }
            let ratio = p.tail_mass(t) / w;
            best = Some(match best {
                Some(b) => b.min(ratio),
                None => ratio,
            });
        }
        assert_eq!(p.kakeya_level(), best.unwrap());
    }

    #[test]
    fn monotonic_examples() {
        assert!(geo("5/6").is_monotonic());
        let p = UtilityFn::perturbed(rat("1/2"), [(1, rat("1/4")), (2, rat("1/2"))]).unwrap();
        assert!(!p.is_monotonic());
    }

    #[test]
    fn reordering_sorts_the_example() {
        let p = UtilityFn::perturbed(rat("1/2"), [(1, rat("1/4")), (2, rat("1/2"))]).unwrap();
        let (m, map) = p.monotonic_reordering();
        // Sorted weights are exactly the geometric 1/2 sequence.
        assert_eq!(m, geo("1/2"));
        assert_eq!(map.slot_for_rank(1), 2);
        assert_eq!(map.slot_for_rank(2), 1);
        assert_eq!(map.slot_for_rank(3), 3);
        assert!(m.kakeya_level() >= p.kakeya_level());
    }

    #[test]
    fn reordering_drops_zero_slots() {
        let p = UtilityFn::perturbed(rat("1/2"), [(2, rat("0"))]).unwrap();
        let (m, map) = p.monotonic_reordering();
        assert!(m.is_monotonic());
        // Rank 2 now holds the weight of original slot 3.
        assert_eq!(map.slot_for_rank(2), 3);
        assert_eq!(m.weight(2), p.weight(3));
        assert_eq!(m.mass_epset(&EPSet::full()), rat("1"));
        assert!(m.kakeya_level() >= p.kakeya_level());
    }

    #[test]
    fn mass_interval_epset_is_degenerate() {
        let u = geo("5/6");
        let s = Schedule::Periodic(EPSet::full());
        let i = u.mass_interval(&s, &rat("1/1000")).unwrap();
        assert!(i.is_degenerate());
        assert_eq!(i.lo(), &rat("1"));
    }

    #[test]
    fn mass_interval_lazy_contains_exact() {
        let u = geo("1/2");
        let odds_lazy = Schedule::from_membership_fn(|t| t % 2 == 1, None);
        let i = u.mass_interval(&odds_lazy, &rat("1/1024")).unwrap();
        assert!(i.contains(&rat("2/3")));
        assert!(i.width() <= rat("1/1024"));
    }

    #[test]
    fn cursor_matches_direct_sums() {
        let u = UtilityFn::perturbed(rat("2/3"), [(3, rat("1/5"))]).unwrap();
        let mut cursor = ExactCursor::new(&u);
        let id = cursor.new_sum();
        let mut direct = Rational::zero();
        for t in 1..=40 {
            cursor.advance();
            assert_eq!(cursor.weight(), u.weight(t));
            if t % 3 == 0 {
                cursor.add_current_weight(id);
                direct = direct + u.weight(t);
            }
            assert_eq!(cursor.sum_value(id), direct);
            let probe = rat("1/7");
            assert_eq!(cursor.cmp_sum_vs(id, false, &probe), direct.cmp(&probe));
        }
    }

    #[test]
    fn economy_json() {
        let text = r#"{"agents":[
            {"name":"a1","utility":{"kind":"geometric","delta":"5/6"}},
            {"name":"a2","utility":{"kind":"perturbed_geometric","delta":"1/2",
             "adjustments":[{"t":1,"weight":"1/4"},{"t":2,"weight":"1/2"}]}}
        ]}"#;
        let e = Economy::from_json(text).unwrap();
        assert_eq!(e.n(), 2);
        assert_eq!(e.agents[0].utility.kakeya_level(), rat("5"));
        assert!(!e.agents[1].utility.is_monotonic());
        // Round trip.
        let out = serde_json::to_string(&e).unwrap();
        let back = Economy::from_json(&out).unwrap();
        assert_eq!(e, back);
        // Rejects an out-of-range factor.
        assert!(Economy::from_json(
            r#"{"agents":[{"name":"a1","utility":{"kind":"geometric","delta":"6/5"}}]}"#
        )
        .is_err());
    }
}
