//! Schedules: subsets of the time line `T = {1, 2, ...}`.
//!
//! A [`Schedule`] is either closed-form ([`EPSet`], eventually periodic) or
//! procedural ([`LazySchedule`]). Closed form is preferred whenever a set is
//! representable that way: it has decidable equality, exact boolean algebra
//! and exact masses. Operations dispatch on the representation and stay in
//! closed form when they can.

mod epset;
mod lazy;

pub use epset::{EPSet, TimeSlot};
pub use lazy::{ContainedCycle, LazySchedule, MassPin, Provenance, MAX_SCAN};

pub(crate) use lazy::{fn_scanner, BoolScanner, RankFilterScanner, ReloadedScanner, Scanner};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-valued answer for density queries on procedural schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Denseness {
    Dense,
    NotDense,
    /// Membership could not be decided from structure or provenance.
    Unknown,
}

/// A schedule: an eventually periodic set or a lazy procedural one.
#[derive(Debug, Clone)]
pub enum Schedule {
    Periodic(EPSet),
    Lazy(LazySchedule),
}

impl From<EPSet> for Schedule {
    fn from(s: EPSet) -> Schedule {
        Schedule::Periodic(s)
    }
}

impl From<LazySchedule> for Schedule {
    fn from(s: LazySchedule) -> Schedule {
        Schedule::Lazy(s)
    }
}

impl PartialEq for Schedule {
    /// Structural equality: exact for two closed-form schedules, replay
    /// identity for lazy ones. Extensional equality between a procedural and
    /// a closed-form schedule is deliberately not offered; compare finite
    /// horizons with [`Schedule::agrees_on_prefix`] instead.
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Schedule::Periodic(a), Schedule::Periodic(b)) => a == b,
            (Schedule::Lazy(a), Schedule::Lazy(b)) => a.same_replay(b),
            _ => false,
        }
    }
}

impl Schedule {
    /// The full time line.
    pub fn full() -> Schedule {
        Schedule::Periodic(EPSet::full())
    }

    /// A schedule defined by an arbitrary membership oracle, optionally with
    /// a certified eventually periodic superset.
    pub fn from_membership_fn(
        f: impl FnMut(u64) -> bool + Send + 'static,
        envelope: Option<EPSet>,
    ) -> Schedule {
        Schedule::Lazy(LazySchedule::new(
            fn_scanner(f),
            envelope,
            Provenance::labeled("membership_fn"),
            Vec::new(),
        ))
    }

    pub fn as_epset(&self) -> Option<&EPSet> {
        match self {
            Schedule::Periodic(s) => Some(s),
            Schedule::Lazy(_) => None,
        }
    }

    pub fn as_lazy(&self) -> Option<&LazySchedule> {
        match self {
            Schedule::Lazy(s) => Some(s),
            Schedule::Periodic(_) => None,
        }
    }

    pub fn contains(&self, t: u64) -> Result<bool> {
        match self {
            Schedule::Periodic(s) => Ok(s.contains(t)),
            Schedule::Lazy(s) => s.contains(t),
        }
    }

    /// The `rank`-th earliest member.
    pub fn nth_member(&self, rank: u64) -> Result<u64> {
        match self {
            Schedule::Periodic(s) => s.nth_member(rank),
            Schedule::Lazy(s) => s.nth_member(rank),
        }
    }

    pub fn min_slot(&self) -> Result<u64> {
        self.nth_member(1)
    }

    /// Members up to `horizon`, i.e. the finite set `S ∩ [1, horizon]`.
    pub fn members_upto(&self, horizon: u64) -> Result<Vec<u64>> {
        match self {
            Schedule::Periodic(s) => Ok(s.members_upto(horizon)),
            Schedule::Lazy(s) => s.members_upto(horizon),
        }
    }

    /// Tail from rank `r`: drops the first `r - 1` members.
    pub fn tail(&self, rank: u64) -> Result<Schedule> {
        assert!(rank >= 1);
        match self {
            Schedule::Periodic(s) => Ok(Schedule::Periodic(s.tail(rank)?)),
            Schedule::Lazy(s) => {
                let first = s.nth_member(rank)?;
                let envelope = s.envelope().map(|e| e.restrict_ge(first));
                Ok(Schedule::Lazy(LazySchedule::new(
                    Box::new(RankFilterScanner::new(self.clone(), rank, 1)),
                    envelope,
                    Provenance::labeled("tail").with_param("rank", rank),
                    Vec::new(),
                )))
            }
        }
    }

    /// Every `step`-th member starting from rank `start_rank`.
    pub fn cycle(&self, start_rank: u64, step: u64) -> Result<Schedule> {
        assert!(start_rank >= 1 && step >= 1);
        match self {
            Schedule::Periodic(s) => Ok(Schedule::Periodic(s.cycle(start_rank, step)?)),
            Schedule::Lazy(s) => {
                let first = s.nth_member(start_rank)?;
                let envelope = s.envelope().map(|e| e.restrict_ge(first));
                Ok(Schedule::Lazy(LazySchedule::new(
                    Box::new(RankFilterScanner::new(self.clone(), start_rank, step)),
                    envelope,
                    Provenance::labeled("cycle")
                        .with_param("rank", start_rank)
                        .with_param("step", step),
                    Vec::new(),
                )))
            }
        }
    }

    pub fn union(&self, other: &Schedule) -> Schedule {
        match (self, other) {
            (Schedule::Periodic(a), Schedule::Periodic(b)) => Schedule::Periodic(a.union(b)),
            _ => {
                let envelope = match (self.envelope_hint(), other.envelope_hint()) {
                    (Some(a), Some(b)) => Some(a.union(&b)),
                    _ => None,
                };
                Schedule::Lazy(LazySchedule::new(
                    Box::new(BoolScanner::union(self.clone(), other.clone())),
                    envelope,
                    Provenance::labeled("union"),
                    Vec::new(),
                ))
            }
        }
    }

    pub fn difference(&self, other: &Schedule) -> Schedule {
        match (self, other) {
            (Schedule::Periodic(a), Schedule::Periodic(b)) => {
                Schedule::Periodic(a.difference(b))
            }
            _ => Schedule::Lazy(LazySchedule::new(
                Box::new(BoolScanner::difference(self.clone(), other.clone())),
                self.envelope_hint(),
                Provenance::labeled("difference"),
                Vec::new(),
            )),
        }
    }

    pub fn intersect(&self, other: &Schedule) -> Schedule {
        match (self, other) {
            (Schedule::Periodic(a), Schedule::Periodic(b)) => {
                Schedule::Periodic(a.intersect(b))
            }
            _ => {
                let envelope = match (self.envelope_hint(), other.envelope_hint()) {
                    (Some(a), Some(b)) => Some(a.intersect(&b)),
                    (Some(a), None) | (None, Some(a)) => Some(a),
                    (None, None) => None,
                };
                Schedule::Lazy(LazySchedule::new(
                    Box::new(BoolScanner::intersect(self.clone(), other.clone())),
                    envelope,
                    Provenance::labeled("intersect"),
                    Vec::new(),
                ))
            }
        }
    }

    /// A certified eventually periodic superset, when one is known.
    pub fn envelope_hint(&self) -> Option<EPSet> {
        match self {
            Schedule::Periodic(s) => Some(s.clone()),
            Schedule::Lazy(s) => s.envelope().cloned(),
        }
    }

    /// Whether this schedule contains a maximal `step`-cycle of `ambient`
    /// starting within `step` offsets of its own minimum.
    ///
    /// Exact for closed-form schedules (after an exact subset precheck);
    /// decided from provenance for procedural ones, otherwise `Unknown`.
    pub fn is_dense(&self, ambient: &EPSet, step: u64) -> Result<Denseness> {
        assert!(step >= 1);
        if !ambient.is_infinite() {
            return Err(Error::PreconditionUnverified(
                "density is defined against an infinite ambient schedule".into(),
            ));
        }
        match self {
            Schedule::Periodic(s) => {
                if !s.is_subset_of(ambient) {
                    return Err(Error::NotASubset);
                }
                let Some(min) = s.min_slot() else {
                    return Ok(Denseness::NotDense);
                };
                let r_star = ambient.rank_of(min).expect("subset member has a rank");
                for offset in 0..step {
                    if ambient.cycle(r_star + offset, step)?.is_subset_of(s) {
                        return Ok(Denseness::Dense);
                    }
                }
                Ok(Denseness::NotDense)
            }
            Schedule::Lazy(s) => {
                let Some(cycle) = &s.provenance().contained_cycle else {
                    return Ok(Denseness::Unknown);
                };
                if &cycle.source != ambient || cycle.step != step {
                    return Ok(Denseness::Unknown);
                }
                let min = s.nth_member(1)?;
                let Some(r_star) = ambient.rank_of(min) else {
                    return Ok(Denseness::Unknown);
                };
                if cycle.start_rank >= r_star && cycle.start_rank - r_star < step {
                    Ok(Denseness::Dense)
                } else {
                    Ok(Denseness::Unknown)
                }
            }
        }
    }

    /// Finite-horizon agreement; the only equality offered between a
    /// procedural schedule and a closed-form one.
    pub fn agrees_on_prefix(&self, other: &Schedule, horizon: u64) -> Result<bool> {
        Ok(self.members_upto(horizon)? == other.members_upto(horizon)?)
    }

    /// Serializes the schedule. Lazy schedules are exported as their
    /// materialized prefix (at least `horizon` slots, more if the replay has
    /// already gone further) plus envelope, provenance and pins.
    pub fn to_json_value(&self, horizon: u64) -> Result<serde_json::Value> {
        let repr = match self {
            Schedule::Periodic(s) => ScheduleRepr::Epset { set: s.clone() },
            Schedule::Lazy(s) => {
                let prefix_to = horizon.max(s.scanned_to());
                ScheduleRepr::Lazy {
                    prefix_to,
                    members: s.members_upto(prefix_to)?,
                    envelope: s.envelope().cloned(),
                    provenance: s.provenance().clone(),
                    pins: s.pins().to_vec(),
                }
            }
        };
        serde_json::to_value(&repr).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json_value(value: &serde_json::Value) -> Result<Schedule> {
        let repr: ScheduleRepr = serde_json::from_value(value.clone())
            .map_err(|e| Error::SchemaMismatch(format!("schedule: {e}")))?;
        Ok(match repr {
            ScheduleRepr::Epset { set } => Schedule::Periodic(set),
            ScheduleRepr::Lazy { prefix_to, members, envelope, provenance, pins } => {
                Schedule::Lazy(LazySchedule::new(
                    Box::new(ReloadedScanner::new(members, prefix_to)),
                    envelope,
                    provenance,
                    pins,
                ))
            }
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ScheduleRepr {
    Epset {
        #[serde(flatten)]
        set: EPSet,
    },
    Lazy {
        prefix_to: u64,
        members: Vec<u64>,
        envelope: Option<EPSet>,
        provenance: Provenance,
        pins: Vec<MassPin>,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lazy_tail_skips_members() {
        // Odd slots via an oracle; tail from rank 2 gives {3, 5, 7, ...}.
        let odds = Schedule::from_membership_fn(|t| t % 2 == 1, None);
        let tail = odds.tail(2).unwrap();
        assert_eq!(tail.members_upto(9).unwrap(), vec![3, 5, 7, 9]);
    }

    #[test]
    fn prefix_determinacy_under_query_order() {
        let s = Schedule::from_membership_fn(|t| t % 3 == 1, None);
        let forward: Vec<bool> = (1..=30).map(|t| s.contains(t).unwrap()).collect();
        let s2 = Schedule::from_membership_fn(|t| t % 3 == 1, None);
        let mut backward: Vec<(u64, bool)> =
            (1..=30).rev().map(|t| (t, s2.contains(t).unwrap())).collect();
        backward.sort_by_key(|&(t, _)| t);
        assert_eq!(forward, backward.into_iter().map(|(_, b)| b).collect::<Vec<_>>());
    }

    #[test]
    fn density_examples() {
        let full = EPSet::full();
        // {1} ∪ {2, 5, 8, ...} contains the maximal 3-cycle starting at offset 1.
        let a = EPSet::progression(2, 3).unwrap().union(&EPSet::from_slots([1]).unwrap());
        assert_eq!(
            Schedule::Periodic(a).is_dense(&full, 3).unwrap(),
            Denseness::Dense
        );
        // {1, 3, 5, ...} is itself a maximal 2-cycle.
        let odds = EPSet::progression(1, 2).unwrap();
        assert_eq!(
            Schedule::Periodic(odds).is_dense(&full, 2).unwrap(),
            Denseness::Dense
        );
        // {1} ∪ {10, 11, ...}: no 3-cycle from the first three offsets fits.
        let c = EPSet::new(9, [1], 1, [0]).unwrap();
        assert_eq!(
            Schedule::Periodic(c).is_dense(&full, 3).unwrap(),
            Denseness::NotDense
        );
        // Subset precheck.
        let not_subset = EPSet::from_slots([3]).unwrap();
        let evens = EPSet::progression(2, 2).unwrap();
        assert!(matches!(
            Schedule::Periodic(not_subset).is_dense(&evens, 2),
            Err(Error::NotASubset)
        ));
    }

    #[test]
    fn reloaded_schedule_stops_at_horizon() {
        let odds = Schedule::from_membership_fn(|t| t % 2 == 1, None);
        let json = odds.to_json_value(20).unwrap();
        let back = Schedule::from_json_value(&json).unwrap();
        assert_eq!(back.members_upto(20).unwrap(), odds.members_upto(20).unwrap());
        assert!(matches!(back.contains(21), Err(Error::HorizonExhausted(20))));
    }

    #[test]
    fn epset_json_tagging() {
        let s = Schedule::Periodic(EPSet::progression(1, 3).unwrap());
        let v = s.to_json_value(0).unwrap();
        assert_eq!(v["kind"], "epset");
        let back = Schedule::from_json_value(&v).unwrap();
        assert_eq!(back, s);
    }
}
