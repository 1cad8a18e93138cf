//! Procedurally defined schedules.
//!
//! The cut and apportionment procedures produce sets that are generally not
//! eventually periodic: membership of a slot is decided by replaying the
//! producing procedure up to that slot. A [`LazySchedule`] wraps such a
//! replay behind a memoized contiguous prefix, together with an optional
//! eventually periodic *envelope* (a certified superset used to bound tail
//! masses), provenance describing the producing procedure, and any exact
//! masses the producing theorem pins down.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::UtilityFn;
use crate::numeric::Rational;
use crate::schedule::epset::EPSet;

/// Hard cap on how far a lazy replay may be extended by a single query.
/// Reaching it signals a runaway enumeration, not a mathematical answer.
pub const MAX_SCAN: u64 = 4_000_000;

/// Slot-by-slot membership decider. Slots are fed strictly in increasing
/// order starting at 1, so implementations may carry running state.
pub(crate) trait Scanner: Send {
    fn scan(&mut self, t: u64) -> Result<bool>;
}

/// An exact mass pinned by the producing procedure: the schedule is worth
/// exactly `mass` under `utility`. Pins come from value-exactness guarantees
/// of the cut procedures plus countable additivity, never from measurement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MassPin {
    pub utility: UtilityFn,
    pub mass: Rational,
}

/// A cycle of an eventually periodic source certified (by construction) to
/// be contained in the schedule. Lets density checks succeed on procedural
/// sets without enumerating them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainedCycle {
    pub source: EPSet,
    pub start_rank: u64,
    pub step: u64,
}

/// Record of the producing procedure and its inputs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub procedure: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contained_cycle: Option<ContainedCycle>,
}

impl Provenance {
    pub fn labeled(procedure: impl Into<String>) -> Self {
        Provenance { procedure: procedure.into(), ..Default::default() }
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn with_cycle(mut self, source: EPSet, start_rank: u64, step: u64) -> Self {
        self.contained_cycle = Some(ContainedCycle { source, start_rank, step });
        self
    }
}

struct ScanState {
    scanner: Box<dyn Scanner>,
    scanned_to: u64,
    members: Vec<u64>,
}

struct Inner {
    state: Mutex<ScanState>,
    envelope: Option<EPSet>,
    provenance: Provenance,
    pins: Vec<MassPin>,
}

/// A procedurally defined schedule with a memoized contiguous prefix.
///
/// Clones share the prefix cache, so concurrent readers observe consistent
/// answers regardless of query order.
#[derive(Clone)]
pub struct LazySchedule {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for LazySchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let state = self.inner.state.lock().expect("lazy schedule lock poisoned");
        write!(
            f,
            "LazySchedule({}, scanned_to={}, members={})",
            self.inner.provenance.procedure,
            state.scanned_to,
            state.members.len()
        )
    }
}

impl LazySchedule {
    pub(crate) fn new(
        scanner: Box<dyn Scanner>,
        envelope: Option<EPSet>,
        provenance: Provenance,
        pins: Vec<MassPin>,
    ) -> Self {
        LazySchedule {
            inner: Arc::new(Inner {
                state: Mutex::new(ScanState { scanner, scanned_to: 0, members: Vec::new() }),
                envelope,
                provenance,
                pins,
            }),
        }
    }

    pub fn envelope(&self) -> Option<&EPSet> {
        self.inner.envelope.as_ref()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.inner.provenance
    }

    pub fn pins(&self) -> &[MassPin] {
        &self.inner.pins
    }

    /// Exact mass pinned for `u`, if the producing procedure guaranteed one.
    pub fn pinned_mass(&self, u: &UtilityFn) -> Option<Rational> {
        self.inner.pins.iter().find(|p| &p.utility == u).map(|p| p.mass.clone())
    }

    pub fn contains(&self, t: u64) -> Result<bool> {
        if t == 0 {
            return Ok(false);
        }
        let mut state = self.inner.state.lock().expect("lazy schedule lock poisoned");
        self.extend_locked(&mut state, t)?;
        Ok(state.members.binary_search(&t).is_ok())
    }

    fn extend_locked(&self, state: &mut ScanState, to: u64) -> Result<()> {
        if to > MAX_SCAN {
            return Err(Error::HorizonExhausted(to));
        }
        while state.scanned_to < to {
            let t = state.scanned_to + 1;
            if state.scanner.scan(t)? {
                state.members.push(t);
            }
            state.scanned_to = t;
        }
        Ok(())
    }

    /// Members with slot `<= horizon`, extending the replay as needed.
    pub fn members_upto(&self, horizon: u64) -> Result<Vec<u64>> {
        let mut state = self.inner.state.lock().expect("lazy schedule lock poisoned");
        self.extend_locked(&mut state, horizon)?;
        let end = state.members.partition_point(|&m| m <= horizon);
        Ok(state.members[..end].to_vec())
    }

    /// The `rank`-th member. Errors with `RankOutOfRange` when the envelope
    /// proves the set has fewer members, and `HorizonExhausted` if the replay
    /// hits the scan cap without an answer.
    pub fn nth_member(&self, rank: u64) -> Result<u64> {
        assert!(rank >= 1);
        let mut state = self.inner.state.lock().expect("lazy schedule lock poisoned");
        loop {
            if state.members.len() as u64 >= rank {
                return Ok(state.members[rank as usize - 1]);
            }
            // If the envelope has no members past the scanned point, the set
            // is exhausted and the rank is simply out of range.
            if let Some(env) = &self.inner.envelope {
                if env.is_infinite() {
                    // keep scanning
                } else if env.members_upto(u64::MAX).last().copied().unwrap_or(0)
                    <= state.scanned_to
                {
                    return Err(Error::RankOutOfRange {
                        rank,
                        len: state.members.len() as u64,
                    });
                }
            }
            if state.scanned_to >= MAX_SCAN {
                return Err(Error::HorizonExhausted(state.scanned_to));
            }
            let next = (state.scanned_to + 1024).min(MAX_SCAN);
            self.extend_locked(&mut state, next)?;
        }
    }

    /// How far the replay has materialized so far.
    pub fn scanned_to(&self) -> u64 {
        self.inner.state.lock().expect("lazy schedule lock poisoned").scanned_to
    }

    /// Identity comparison: clones of one replay compare equal.
    pub fn same_replay(&self, other: &LazySchedule) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Oracle backed by a pure membership function.
struct FnScanner<F: FnMut(u64) -> bool + Send>(F);

impl<F: FnMut(u64) -> bool + Send> Scanner for FnScanner<F> {
    fn scan(&mut self, t: u64) -> Result<bool> {
        Ok((self.0)(t))
    }
}

/// Keeps members with rank `start, start + step, start + 2*step, ...` of the
/// parent schedule; implements tails (`step = 1`) and cycles of lazy sets.
pub(crate) struct RankFilterScanner {
    parent: super::Schedule,
    start: u64,
    step: u64,
    seen: u64,
}

impl RankFilterScanner {
    pub(crate) fn new(parent: super::Schedule, start: u64, step: u64) -> Self {
        RankFilterScanner { parent, start, step, seen: 0 }
    }
}

impl Scanner for RankFilterScanner {
    fn scan(&mut self, t: u64) -> Result<bool> {
        if !self.parent.contains(t)? {
            return Ok(false);
        }
        self.seen += 1;
        Ok(self.seen >= self.start && (self.seen - self.start) % self.step == 0)
    }
}

/// Pointwise boolean combination of two schedules.
pub(crate) struct BoolScanner {
    a: super::Schedule,
    b: super::Schedule,
    op: fn(bool, bool) -> bool,
}

impl BoolScanner {
    pub(crate) fn union(a: super::Schedule, b: super::Schedule) -> Self {
        BoolScanner { a, b, op: |x, y| x || y }
    }

    pub(crate) fn difference(a: super::Schedule, b: super::Schedule) -> Self {
        BoolScanner { a, b, op: |x, y| x && !y }
    }

    pub(crate) fn intersect(a: super::Schedule, b: super::Schedule) -> Self {
        BoolScanner { a, b, op: |x, y| x && y }
    }
}

impl Scanner for BoolScanner {
    fn scan(&mut self, t: u64) -> Result<bool> {
        Ok((self.op)(self.a.contains(t)?, self.b.contains(t)?))
    }
}

/// A schedule reloaded from its serialized prefix. Membership past the
/// exported horizon is unknown and reported as `HorizonExhausted`.
pub(crate) struct ReloadedScanner {
    members: Vec<u64>,
    prefix_to: u64,
}

impl ReloadedScanner {
    pub(crate) fn new(members: Vec<u64>, prefix_to: u64) -> Self {
        ReloadedScanner { members, prefix_to }
    }
}

impl Scanner for ReloadedScanner {
    fn scan(&mut self, t: u64) -> Result<bool> {
        if t > self.prefix_to {
            return Err(Error::HorizonExhausted(self.prefix_to));
        }
        Ok(self.members.binary_search(&t).is_ok())
    }
}

pub(crate) fn fn_scanner(f: impl FnMut(u64) -> bool + Send + 'static) -> Box<dyn Scanner> {
    Box::new(FnScanner(f))
}
