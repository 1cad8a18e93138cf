//! Eventually periodic subsets of the time line.
//!
//! An [`EPSet`] stores a finite prefix below a threshold `N0` and a periodic
//! residue pattern above it: slot `t > N0` is a member iff
//! `(t - N0 - 1) mod P` lies in the residue set. This class is closed under
//! tails, cycles and boolean operations — exactly the constructors the
//! allocation procedures need — and admits exact geometric masses.
//!
//! Values are kept in canonical form (minimal period, then minimal threshold
//! for that period), so structural equality coincides with set equality.

use std::collections::BTreeSet;

use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A time slot: an index in `{1, 2, ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimeSlot(u64);

impl TimeSlot {
    pub fn new(index: u64) -> Result<Self> {
        if index == 0 {
            return Err(Error::Parse("time slots are indexed from 1".into()));
        }
        Ok(TimeSlot(index))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl std::fmt::Display for TimeSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Raw encoding used for (de)serialization; canonicalized on ingestion.
#[derive(Serialize, Deserialize)]
struct RawEpSet {
    threshold: u64,
    prefix: BTreeSet<u64>,
    period: u64,
    residues: BTreeSet<u64>,
}

/// An eventually periodic set of time slots, in canonical form.
#[derive(Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(into = "RawEpSet")]
pub struct EPSet {
    threshold: u64,
    prefix: BTreeSet<u64>,
    period: u64,
    residues: BTreeSet<u64>,
}

impl From<EPSet> for RawEpSet {
    fn from(s: EPSet) -> RawEpSet {
        RawEpSet {
            threshold: s.threshold,
            prefix: s.prefix,
            period: s.period,
            residues: s.residues,
        }
    }
}

impl<'de> Deserialize<'de> for EPSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawEpSet::deserialize(d)?;
        EPSet::new(raw.threshold, raw.prefix, raw.period, raw.residues)
            .map_err(serde::de::Error::custom)
    }
}

impl std::fmt::Debug for EPSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "EPSet(N0={}, prefix={:?}, P={}, residues={:?})",
            self.threshold, self.prefix, self.period, self.residues
        )
    }
}

impl EPSet {
    /// Builds a set from any consistent encoding and canonicalizes it.
    pub fn new(
        threshold: u64,
        prefix: impl IntoIterator<Item = u64>,
        period: u64,
        residues: impl IntoIterator<Item = u64>,
    ) -> Result<Self> {
        if period == 0 {
            return Err(Error::Parse("period must be at least 1".into()));
        }
        let prefix: BTreeSet<u64> = prefix.into_iter().collect();
        if let Some(&t) = prefix.iter().next() {
            if t == 0 {
                return Err(Error::Parse("slot 0 is not a valid member".into()));
            }
        }
        if let Some(&t) = prefix.iter().next_back() {
            if t > threshold {
                return Err(Error::Parse(format!(
                    "prefix slot {t} exceeds threshold {threshold}"
                )));
            }
        }
        let residues: BTreeSet<u64> = residues.into_iter().collect();
        if let Some(&r) = residues.iter().next_back() {
            if r >= period {
                return Err(Error::Parse(format!(
                    "residue {r} out of range for period {period}"
                )));
            }
        }
        let mut s = EPSet { threshold, prefix, period, residues };
        s.canonicalize();
        Ok(s)
    }

    /// The empty set.
    pub fn empty() -> Self {
        EPSet { threshold: 0, prefix: BTreeSet::new(), period: 1, residues: BTreeSet::new() }
    }

    /// The full time line `{1, 2, ...}`.
    pub fn full() -> Self {
        EPSet { threshold: 0, prefix: BTreeSet::new(), period: 1, residues: [0].into() }
    }

    /// The arithmetic progression `{first, first + step, ...}`.
    pub fn progression(first: u64, step: u64) -> Result<Self> {
        if first == 0 || step == 0 {
            return Err(Error::Parse("progression needs first >= 1 and step >= 1".into()));
        }
        EPSet::new(first - 1, [], step, [0])
    }

    /// A finite set of slots.
    pub fn from_slots(slots: impl IntoIterator<Item = u64>) -> Result<Self> {
        let slots: BTreeSet<u64> = slots.into_iter().collect();
        let threshold = slots.iter().next_back().copied().unwrap_or(0);
        EPSet::new(threshold, slots, 1, [])
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn prefix(&self) -> &BTreeSet<u64> {
        &self.prefix
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    pub fn residues(&self) -> &BTreeSet<u64> {
        &self.residues
    }

    pub fn is_empty(&self) -> bool {
        self.prefix.is_empty() && self.residues.is_empty()
    }

    pub fn is_infinite(&self) -> bool {
        !self.residues.is_empty()
    }

    /// Number of members when the set is finite.
    pub fn finite_len(&self) -> Option<u64> {
        if self.is_infinite() {
            None
        } else {
            Some(self.prefix.len() as u64)
        }
    }

    pub fn contains(&self, t: u64) -> bool {
        if t == 0 {
            return false;
        }
        if t <= self.threshold {
            self.prefix.contains(&t)
        } else {
            self.residues.contains(&((t - self.threshold - 1) % self.period))
        }
    }

    /// Canonical form: minimal period of the eventual pattern, then minimal
    /// threshold for that period. Equal sets get identical encodings.
    fn canonicalize(&mut self) {
        // Minimal period divides the current one; take the smallest divisor
        // under which the residue pattern is shift-invariant.
        let p = self.period;
        let mut best = p;
        let mut d = 1;
        while d * d <= p {
            if p % d == 0 {
                if d < best && self.shift_invariant(d) {
                    best = d;
                    break;
                }
                let e = p / d;
                if e < best && self.shift_invariant(e) {
                    best = e;
                }
            }
            d += 1;
        }
        if best < p {
            let reduced: BTreeSet<u64> = self.residues.iter().map(|r| r % best).collect();
            self.period = best;
            self.residues = reduced;
        }

        // Minimal threshold: absorb prefix slots into the periodic pattern
        // while they agree with it. Residue rotation is tracked by an offset
        // to avoid rebuilding the set each step.
        let p = self.period;
        let mut shift = 0u64; // current residues = { (r + shift) mod p }
        let in_current = |set: &BTreeSet<u64>, shift: u64, x: u64| -> bool {
            set.contains(&((x + p - shift % p) % p))
        };
        while self.threshold >= 1 {
            let member = self.prefix.contains(&self.threshold);
            // After lowering, the slot at the old threshold gets residue 0 of
            // the rotated pattern, i.e. residue p-1 of the current one.
            let periodic = in_current(&self.residues, shift, p - 1);
            if member != periodic {
                break;
            }
            self.prefix.remove(&self.threshold);
            self.threshold -= 1;
            shift += 1;
            if shift >= p {
                shift -= p;
            }
        }
        if shift > 0 {
            self.residues = self.residues.iter().map(|r| (r + shift) % p).collect();
        }
    }

    fn shift_invariant(&self, d: u64) -> bool {
        self.residues.iter().all(|&r| self.residues.contains(&((r + d) % self.period)))
    }

    /// Number of members `<= t`.
    pub fn count_le(&self, t: u64) -> u64 {
        if t == 0 {
            return 0;
        }
        let in_prefix = self.prefix.range(..=t.min(self.threshold)).count() as u64;
        if t <= self.threshold {
            return in_prefix;
        }
        let d = t - self.threshold;
        let full = d / self.period;
        let rem = d % self.period;
        let partial = self.residues.range(..rem).count() as u64;
        in_prefix + full * self.residues.len() as u64 + partial
    }

    /// The `r`-th earliest member (1-indexed).
    pub fn nth_member(&self, rank: u64) -> Result<u64> {
        assert!(rank >= 1, "ranks are 1-indexed");
        let m = self.prefix.len() as u64;
        if rank <= m {
            return Ok(*self.prefix.iter().nth(rank as usize - 1).expect("rank <= len"));
        }
        if self.residues.is_empty() {
            return Err(Error::RankOutOfRange { rank, len: m });
        }
        let j = rank - m - 1;
        let k = self.residues.len() as u64;
        let q = j / k;
        let i = (j % k) as usize;
        let r = *self.residues.iter().nth(i).expect("index < len");
        Ok(self.threshold + q * self.period + r + 1)
    }

    /// Rank of slot `t` if it is a member.
    pub fn rank_of(&self, t: u64) -> Option<u64> {
        if self.contains(t) {
            Some(self.count_le(t))
        } else {
            None
        }
    }

    pub fn min_slot(&self) -> Option<u64> {
        self.nth_member(1).ok()
    }

    /// Members of the set that are `>= a`.
    pub fn restrict_ge(&self, a: u64) -> EPSet {
        if a <= 1 {
            return self.clone();
        }
        if a <= self.threshold + 1 {
            let prefix: BTreeSet<u64> = self.prefix.range(a..).copied().collect();
            let mut s = EPSet {
                threshold: self.threshold,
                prefix,
                period: self.period,
                residues: self.residues.clone(),
            };
            s.canonicalize();
            return s;
        }
        // New threshold a-1 re-anchors the residue pattern.
        let delta = (a - 1 - self.threshold) % self.period;
        let residues: BTreeSet<u64> = self
            .residues
            .iter()
            .map(|r| (r + self.period - delta) % self.period)
            .collect();
        let mut s = EPSet { threshold: a - 1, prefix: BTreeSet::new(), period: self.period, residues };
        s.canonicalize();
        s
    }

    /// Members `<= b`, materialized.
    pub fn members_upto(&self, b: u64) -> Vec<u64> {
        let mut out: Vec<u64> = self.prefix.range(..=b.min(self.threshold)).copied().collect();
        if b > self.threshold {
            let mut base = self.threshold;
            'outer: loop {
                for &r in &self.residues {
                    let t = base + r + 1;
                    if t > b {
                        break 'outer;
                    }
                    out.push(t);
                }
                if self.residues.is_empty() {
                    break;
                }
                base += self.period;
            }
            out.sort_unstable();
        }
        out
    }

    /// Iterator over all members in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        (1u64..).filter_map(move |rank| self.nth_member(rank).ok())
    }

    /// Same set re-encoded with a threshold of at least `n`.
    pub(crate) fn with_threshold_at_least(&self, n: u64) -> EPSet {
        if n <= self.threshold {
            return self.clone();
        }
        let mut prefix = self.prefix.clone();
        for t in self.threshold + 1..=n {
            if self.contains(t) {
                prefix.insert(t);
            }
        }
        let delta = (n - self.threshold) % self.period;
        let residues: BTreeSet<u64> = self
            .residues
            .iter()
            .map(|r| (r + self.period - delta) % self.period)
            .collect();
        EPSet { threshold: n, prefix, period: self.period, residues }
    }

    /// Same set re-encoded with period `l` (a multiple of the current one).
    fn with_period(&self, l: u64) -> EPSet {
        debug_assert_eq!(l % self.period, 0);
        let mut residues = BTreeSet::new();
        for k in 0..l / self.period {
            for &r in &self.residues {
                residues.insert(r + k * self.period);
            }
        }
        EPSet { threshold: self.threshold, prefix: self.prefix.clone(), period: l, residues }
    }

    pub fn union(&self, other: &EPSet) -> EPSet {
        self.boolean(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &EPSet) -> EPSet {
        self.boolean(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &EPSet) -> EPSet {
        self.boolean(other, |a, b| a && !b)
    }

    /// Exact boolean combination, computed on the lcm of the periods and the
    /// max of the thresholds, then canonicalized.
    fn boolean(&self, other: &EPSet, op: impl Fn(bool, bool) -> bool) -> EPSet {
        let n0 = self.threshold.max(other.threshold);
        let l = self.period.lcm(&other.period);
        let a = self.with_threshold_at_least(n0).with_period(l);
        let b = other.with_threshold_at_least(n0).with_period(l);
        let mut prefix = BTreeSet::new();
        for t in 1..=n0 {
            if op(a.prefix.contains(&t), b.prefix.contains(&t)) {
                prefix.insert(t);
            }
        }
        let mut residues = BTreeSet::new();
        for r in 0..l {
            if op(a.residues.contains(&r), b.residues.contains(&r)) {
                residues.insert(r);
            }
        }
        let mut s = EPSet { threshold: n0, prefix, period: l, residues };
        s.canonicalize();
        s
    }

    pub fn is_subset_of(&self, other: &EPSet) -> bool {
        self.difference(other).is_empty()
    }

    /// Tail from rank `r`: `{member_r, member_{r+1}, ...}`.
    pub fn tail(&self, rank: u64) -> Result<EPSet> {
        let start = self.nth_member(rank)?;
        Ok(self.restrict_ge(start))
    }

    /// Every `step`-th member starting from rank `start_rank`.
    ///
    /// The picks lock into a periodic pattern once they clear the prefix: the
    /// result's period is `P * step / gcd(step, |residues|)`.
    pub fn cycle(&self, start_rank: u64, step: u64) -> Result<EPSet> {
        assert!(start_rank >= 1 && step >= 1);
        if step == 1 {
            return self.tail(start_rank);
        }
        if self.residues.is_empty() {
            // Finite set: enumerate the surviving ranks directly.
            let len = self.prefix.len() as u64;
            if start_rank > len {
                return Err(Error::RankOutOfRange { rank: start_rank, len });
            }
            let mut slots = Vec::new();
            let mut rank = start_rank;
            while rank <= len {
                slots.push(self.nth_member(rank)?);
                rank += step;
            }
            return EPSet::from_slots(slots);
        }
        let m = self.prefix.len() as u64;
        let k = self.residues.len() as u64;
        let g = step.gcd(&k);
        let picks_per_period = k / g;
        let out_period = self.period * (step / g);

        // First pick whose rank lands past the prefix region.
        let j0 = if start_rank > m { 0 } else { (m - start_rank) / step + 1 };
        let mut picks = Vec::with_capacity((j0 + picks_per_period + 1) as usize);
        for j in 0..=j0 + picks_per_period {
            picks.push(self.nth_member(start_rank + j * step)?);
        }
        let p0 = picks[j0 as usize];
        debug_assert_eq!(picks[(j0 + picks_per_period) as usize], p0 + out_period);
        let prefix: Vec<u64> = picks[..j0 as usize].to_vec();
        let residues: Vec<u64> =
            picks[j0 as usize..(j0 + picks_per_period) as usize].iter().map(|&t| t - p0).collect();
        EPSet::new(p0 - 1, prefix, out_period, residues)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots(s: &EPSet, upto: u64) -> Vec<u64> {
        s.members_upto(upto)
    }

    #[test]
    fn membership_rule() {
        let s = EPSet::new(3, [1, 3], 3, [0, 2]).unwrap();
        // Prefix region: {1, 3}; beyond 3: residues 0 and 2 of (t-4) mod 3,
        // i.e. slots 4, 6, 7, 9, 10, ...
        assert_eq!(slots(&s, 10), vec![1, 3, 4, 6, 7, 9, 10]);
        assert!(!s.contains(0));
    }

    #[test]
    fn canonical_minimal_period() {
        let s = EPSet::new(0, [], 6, [0, 2, 4]).unwrap();
        assert_eq!(s.period(), 2);
        assert_eq!(s.residues().iter().copied().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn canonical_minimal_threshold() {
        // {2, 4, 6, ...} written with a wastefully large threshold.
        let s = EPSet::new(4, [2, 4], 2, [1]).unwrap();
        let t = EPSet::progression(2, 2).unwrap();
        assert_eq!(s, t);
        assert_eq!(s.threshold(), 0);
    }

    #[test]
    fn canonical_finite() {
        let s = EPSet::new(9, [2, 5], 4, []).unwrap();
        assert_eq!(s.threshold(), 5);
        assert_eq!(s.period(), 1);
        assert_eq!(s.finite_len(), Some(2));
    }

    #[test]
    fn full_and_empty() {
        assert!(EPSet::full().contains(123456));
        assert!(EPSet::empty().is_empty());
        assert_eq!(EPSet::full().count_le(100), 100);
    }

    #[test]
    fn nth_member_examples() {
        let t = EPSet::full();
        assert_eq!(t.nth_member(5).unwrap(), 5);
        let c = EPSet::progression(1, 3).unwrap();
        assert_eq!(c.nth_member(3).unwrap(), 7);
        let f = EPSet::from_slots([2, 5]).unwrap();
        assert!(matches!(f.nth_member(3), Err(Error::RankOutOfRange { rank: 3, len: 2 })));
    }

    #[test]
    fn tail_examples() {
        let t = EPSet::full();
        assert_eq!(t.tail(4).unwrap(), EPSet::progression(4, 1).unwrap());
        let c = EPSet::progression(1, 3).unwrap();
        assert_eq!(c.tail(2).unwrap(), EPSet::progression(4, 3).unwrap());
    }

    #[test]
    fn cycle_examples() {
        let t = EPSet::full();
        assert_eq!(t.cycle(1, 3).unwrap(), EPSet::progression(1, 3).unwrap());
        assert_eq!(t.cycle(6, 3).unwrap(), EPSet::progression(6, 3).unwrap());
        // step 1 degenerates to the tail
        let s = EPSet::new(2, [1], 2, [0]).unwrap();
        assert_eq!(s.cycle(2, 1).unwrap(), s.tail(2).unwrap());
    }

    #[test]
    fn cycle_of_composite_set() {
        // S = {1} ∪ {3,5,7,...}; every 2nd member starting at rank 1:
        // members 1,3,5,7,9,... -> picks 1,5,9,13,...
        let s = EPSet::new(1, [1], 2, [1]).unwrap();
        let c = s.cycle(1, 2).unwrap();
        assert_eq!(slots(&c, 13), vec![1, 5, 9, 13]);
    }

    #[test]
    fn boolean_examples() {
        let a = EPSet::progression(1, 3).unwrap();
        let b = EPSet::progression(2, 3).unwrap();
        let u = a.union(&b);
        assert_eq!(slots(&u, 8), vec![1, 2, 4, 5, 7, 8]);
        assert_eq!(u.period(), 3);

        let d = EPSet::full().difference(&a);
        assert_eq!(slots(&d, 9), vec![2, 3, 5, 6, 8, 9]);

        assert!(a.intersect(&b).is_empty());
        assert!(a.is_subset_of(&EPSet::full()));
        assert!(!EPSet::full().is_subset_of(&a));
    }

    #[test]
    fn count_and_rank_agree() {
        let s = EPSet::new(5, [2, 4], 4, [1, 3]).unwrap();
        let members = s.members_upto(40);
        for (i, &t) in members.iter().enumerate() {
            assert_eq!(s.rank_of(t), Some(i as u64 + 1));
            assert_eq!(s.nth_member(i as u64 + 1).unwrap(), t);
        }
        assert_eq!(s.count_le(40), members.len() as u64);
    }

    #[test]
    fn canonical_absorbs_prefix_into_pattern() {
        // {1,3} ∪ {4,6,7,9,...} is the pure pattern (t-1) mod 3 ∈ {0,2}.
        let s = EPSet::new(3, [1, 3], 3, [0, 2]).unwrap();
        assert_eq!(s.threshold(), 0);
        assert_eq!(slots(&s, 9), vec![1, 3, 4, 6, 7, 9]);
    }

    #[test]
    fn json_round_trip() {
        let s = EPSet::new(3, [2], 3, [0, 2]).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"threshold\":3"));
        let back: EPSet = serde_json::from_str(&j).unwrap();
        assert_eq!(s, back);
        // Non-canonical input canonicalizes on ingestion.
        let raw = r#"{"threshold":0,"prefix":[],"period":4,"residues":[0,2]}"#;
        let t: EPSet = serde_json::from_str(raw).unwrap();
        assert_eq!(t.period(), 2);
    }
}
