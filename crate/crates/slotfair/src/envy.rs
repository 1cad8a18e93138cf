//! Envy-free division through abstract evaluate/cut queries.
//!
//! Protocols here never touch schedules directly: they hold a
//! [`PartitionState`] (the current partition of the time line plus a
//! divisibility-floor ledger) and interact with it through two queries — ask
//! an agent to *evaluate* a piece, or ask an agent to *cut* a piece at a
//! target value. Cutting with the tripartition procedure costs every agent
//! two thirds of a piece's floor (`k -> (k - 2)/3`); the greedy procedure is
//! reserved for a protocol's final cut, where only the cutter's guarantee is
//! needed. The ledger arithmetic `d(1) = 1, d(c) = 3 d(c-1) + 2` gives the
//! starting floor that survives `c` cuts; its closed form is
//! `d(c) = 2 * 3^(c-1) - 1`.
//!
//! Two protocols are provided: divide-and-choose for two agents (one greedy
//! cut) and the classical five-cut trim protocol for three agents
//! (tripartition everywhere except the final greedy cut). The general
//! bounded-cut procedure for arbitrary `n` is represented only by its
//! patience arithmetic: its cut bound is a power tower in `n`, far beyond
//! any executable instance, and numeric evaluation is refused rather than
//! approximated.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use crate::apportion::{check_same_agents, Allocation, PartitionEvidence, ShareEntry};
use crate::certificate::{certify_ge, EnvyCertificate, EnvyPairEvidence, Verdict};
use crate::cut::{
    greedy_cut, greedy_lazy, tripartition_cut, CutResult, CutTarget, DivisibilityEvidence,
    LinearMassOracle, MassRefiner,
};
use crate::error::{Error, Result};
use crate::measure::{known_exact_mass, Economy, UtilityFn};
use crate::numeric::{Rational, RatInterval};
use crate::schedule::{EPSet, LazySchedule, MassPin, Provenance, Schedule};

/// Divisibility level needed to support `c` successive cuts
/// (tripartition for all but the last, greedy last): `2 * 3^(c-1) - 1`.
pub fn divisibility_for_cuts(c: u64) -> Result<Rational> {
    if c == 0 {
        return Err(Error::Parse("cut count must be at least 1".into()));
    }
    let three = BigInt::from(3);
    let pow = three.pow((c - 1) as u32);
    Ok(Rational::from_int(BigInt::from(2) * pow - 1))
}

/// A (possibly astronomically large) exponent tower.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TowerExpr {
    Value(u128),
    Power { base: u64, exp: Box<TowerExpr> },
}

impl std::fmt::Display for TowerExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TowerExpr::Value(v) => write!(f, "{v}"),
            TowerExpr::Power { base, exp } => write!(f, "{base}^({exp})"),
        }
    }
}

/// Patience requirement for importing the general bounded envy-free
/// procedure: the cut bound is the height-six tower `n^n^n^n^n^n`, and the
/// required divisibility is `d` of that bound.
#[derive(Debug, Clone)]
pub struct PatienceBound {
    pub agents: u64,
    pub cuts: TowerExpr,
    pub cuts_numeric: Option<u128>,
    /// Numeric divisibility, only when the tower itself is tiny (n = 1).
    pub divisibility_numeric: Option<Rational>,
}

impl PatienceBound {
    pub fn divisibility_symbolic(&self) -> String {
        match &self.divisibility_numeric {
            Some(d) => d.to_string(),
            None => format!("2*3^({} - 1) - 1", self.cuts),
        }
    }
}

/// The patience bound for `n` agents, with the tower collapsed numerically
/// from the top for as long as the values stay representable.
pub fn full_protocol_patience(n: u64) -> Result<PatienceBound> {
    if n == 0 {
        return Err(Error::Parse("need at least one agent".into()));
    }
    let mut expr = TowerExpr::Value(n as u128);
    for _ in 1..6 {
        expr = match expr {
            TowerExpr::Value(v) => {
                let collapsed = u32::try_from(v)
                    .ok()
                    .and_then(|e| (n as u128).checked_pow(e));
                match collapsed {
                    Some(value) => TowerExpr::Value(value),
                    None => TowerExpr::Power { base: n, exp: Box::new(TowerExpr::Value(v)) },
                }
            }
            symbolic => TowerExpr::Power { base: n, exp: Box::new(symbolic) },
        };
    }
    let cuts_numeric = match &expr {
        TowerExpr::Value(v) => Some(*v),
        _ => None,
    };
    let divisibility_numeric = match cuts_numeric {
        Some(c) if c <= 4096 => Some(divisibility_for_cuts(c as u64)?),
        _ => None,
    };
    Ok(PatienceBound { agents: n, cuts: expr, cuts_numeric, divisibility_numeric })
}

/// Numeric patience value; refused whenever the tower has no numeric form.
pub fn patience_numeric(n: u64) -> Result<Rational> {
    let bound = full_protocol_patience(n)?;
    bound.divisibility_numeric.ok_or(Error::TowerTooLarge(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutMode {
    Greedy,
    Tripartition,
}

/// One record of the query log: the protocol's entire interaction with the
/// agents, exportable as JSON lines.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "query", rename_all = "snake_case")]
pub enum QueryRecord {
    Evaluate { agent: String, piece: String, result: RatInterval },
    Cut {
        agent: String,
        piece: String,
        target: Rational,
        mode: CutMode,
        taken: String,
        remainder: String,
    },
    Choice { agent: String, chose: String, among: Vec<String>, resolved: bool },
    Note { text: String },
}

#[derive(Debug, Clone, Default)]
pub struct QueryLog(pub Vec<QueryRecord>);

impl QueryLog {
    pub fn to_json_lines(&self) -> String {
        self.0
            .iter()
            .map(|r| serde_json::to_string(r).expect("query records serialize"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// The evolving partition of the time line, with the per-(piece, agent)
/// divisibility-floor ledger and the cut counter.
///
/// Floor transitions follow the cut guarantees: a tripartition cut replaces
/// a floor `k` by `(k - 2)/3` on both children for every agent (the
/// guarantee is pairwise and applies to all monotone agents); a greedy cut
/// leaves `k - 1` on the remainder for the cutter and nothing else.
pub struct PartitionState {
    agents: Vec<String>,
    pieces: Vec<(String, Schedule)>,
    floors: BTreeMap<(String, String), Rational>,
    cut_count: u64,
    next_id: u64,
}

impl PartitionState {
    /// The coarsest partition: one piece holding the whole time line, with
    /// every agent's floor seeded at `initial_floor` (a requirement the
    /// caller has verified, e.g. each agent's patience level).
    pub fn coarsest(e: &Economy, initial_floor: &Rational) -> Self {
        let mut state = PartitionState {
            agents: e.names(),
            pieces: Vec::new(),
            floors: BTreeMap::new(),
            cut_count: 0,
            next_id: 1,
        };
        let id = state.fresh_id();
        for agent in state.agents.clone() {
            state.floors.insert((id.clone(), agent), initial_floor.clone());
        }
        state.pieces.push((id, Schedule::full()));
        state
    }

    fn fresh_id(&mut self) -> String {
        let id = format!("p{}", self.next_id);
        self.next_id += 1;
        id
    }

    pub fn piece(&self, id: &str) -> Result<&Schedule> {
        self.pieces
            .iter()
            .find(|(pid, _)| pid == id)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::SchemaMismatch(format!("no piece {id} in the partition")))
    }

    pub fn piece_ids(&self) -> Vec<String> {
        self.pieces.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn floor(&self, piece: &str, agent: &str) -> Rational {
        self.floors
            .get(&(piece.to_string(), agent.to_string()))
            .cloned()
            .unwrap_or_else(Rational::zero)
    }

    pub fn cut_count(&self) -> u64 {
        self.cut_count
    }

    /// Evaluate query: the agent reports a certified interval for a piece.
    pub fn evaluate(
        &self,
        e: &Economy,
        agent: &str,
        piece: &str,
        precision: &Rational,
    ) -> Result<RatInterval> {
        let u = utility_of(e, agent)?;
        u.mass_interval(self.piece(piece)?, precision)
    }

    /// Cut query: the agent cuts `piece` at target `v` with the given mode.
    /// Returns the ids of the taken piece and the remainder. Targets of 0 or
    /// the piece's exactly known full value short-circuit without counting a
    /// cut or touching the ledger.
    pub fn cut(
        &mut self,
        e: &Economy,
        agent: &str,
        piece: &str,
        v: &Rational,
        mode: CutMode,
    ) -> Result<(String, String)> {
        let u = utility_of(e, agent)?.clone();
        let schedule = self.piece(piece)?.clone();
        let full = known_exact_mass(&u, &schedule);
        if v.is_zero() {
            let empty = self.adopt_piece(Schedule::Periodic(EPSet::empty()), |_| None);
            return Ok((empty, piece.to_string()));
        }
        if full.as_ref() == Some(v) {
            let empty = self.adopt_piece(Schedule::Periodic(EPSet::empty()), |_| None);
            return Ok((piece.to_string(), empty));
        }
        let floor = self.floor(piece, agent);
        let result = match mode {
            CutMode::Tripartition => {
                if floor < Rational::from(5i64) {
                    return Err(Error::InsufficientDivisibility {
                        have: floor.to_string(),
                        need: "5".into(),
                    });
                }
                tripartition_cut(&u, &schedule, v, &DivisibilityEvidence::Certified(floor))?
            }
            CutMode::Greedy => {
                if floor < Rational::one() {
                    return Err(Error::InsufficientDivisibility {
                        have: floor.to_string(),
                        need: "1".into(),
                    });
                }
                greedy_cut(&u, &schedule, v, &DivisibilityEvidence::Certified(floor))?
            }
        };
        Ok(self.split(piece, agent, mode, result))
    }

    /// Replaces `piece` by a cut's two children and applies the ledger rule.
    fn split(&mut self, piece: &str, cutter: &str, mode: CutMode, cut: CutResult) -> (String, String) {
        let parent_floors: BTreeMap<String, Rational> = self
            .agents
            .iter()
            .map(|a| (a.clone(), self.floor(piece, a)))
            .collect();
        let taken_id = self.adopt_piece(cut.taken, |agent| {
            Some(match mode {
                CutMode::Tripartition => tripartition_child_floor(&parent_floors[agent]),
                CutMode::Greedy => Rational::zero(),
            })
        });
        let rem_id = self.adopt_piece(cut.remainder, |agent| {
            Some(match mode {
                CutMode::Tripartition => tripartition_child_floor(&parent_floors[agent]),
                CutMode::Greedy => {
                    if agent == cutter {
                        let k = &parent_floors[agent];
                        if k >= &Rational::one() {
                            k - &Rational::one()
                        } else {
                            Rational::zero()
                        }
                    } else {
                        Rational::zero()
                    }
                }
            })
        });
        self.remove_piece(piece);
        self.cut_count += 1;
        (taken_id, rem_id)
    }

    fn adopt_piece(
        &mut self,
        schedule: Schedule,
        floor_for: impl Fn(&String) -> Option<Rational>,
    ) -> String {
        let id = self.fresh_id();
        for agent in self.agents.clone() {
            if let Some(f) = floor_for(&agent) {
                self.floors.insert((id.clone(), agent), f);
            }
        }
        self.pieces.push((id.clone(), schedule));
        id
    }

    fn remove_piece(&mut self, id: &str) {
        self.pieces.retain(|(pid, _)| pid != id);
        self.floors.retain(|(pid, _), _| pid != id);
    }
}

fn tripartition_child_floor(k: &Rational) -> Rational {
    let two = Rational::from(2i64);
    if k >= &two {
        (k - &two) / Rational::from(3i64)
    } else {
        Rational::zero()
    }
}

fn utility_of<'a>(e: &'a Economy, agent: &str) -> Result<&'a UtilityFn> {
    e.agents
        .iter()
        .find(|a| a.name == agent)
        .map(|a| &a.utility)
        .ok_or_else(|| Error::SchemaMismatch(format!("unknown agent {agent}")))
}

/// A finished protocol run: the allocation, the full query log, and the
/// ledger evidence (cuts used and the cutter's floor before each cut).
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub allocation: Allocation,
    pub log: QueryLog,
    pub cuts: u64,
    pub floor_chain: Vec<Rational>,
}

/// Divide-and-choose for two agents: the first agent cuts the time line in
/// half by his own measure (greedy, value exactly 1/2 on both sides); the
/// second takes a certified weakly preferred piece.
pub fn divide_and_choose(e: &Economy, precision: &Rational) -> Result<ProtocolRun> {
    if e.n() != 2 {
        return Err(Error::PreconditionUnverified(
            "divide-and-choose is a two-agent protocol".into(),
        ));
    }
    let one = Rational::one();
    for a in &e.agents {
        if a.utility.kakeya_level() < one {
            return Err(Error::InsufficientPatience {
                detail: format!("agent {} is below the 1-divisibility requirement", a.name),
            });
        }
    }
    let cutter = e.agents[0].name.clone();
    let chooser = e.agents[1].name.clone();
    let mut state = PartitionState::coarsest(e, &one);
    let mut log = QueryLog::default();
    let mut floor_chain = Vec::new();

    let root = state.piece_ids()[0].clone();
    floor_chain.push(state.floor(&root, &cutter));
    let half = Rational::new(1, 2)?;
    let (piece_a, piece_b) = state.cut(e, &cutter, &root, &half, CutMode::Greedy)?;
    log.0.push(QueryRecord::Cut {
        agent: cutter.clone(),
        piece: root,
        target: half,
        mode: CutMode::Greedy,
        taken: piece_a.clone(),
        remainder: piece_b.clone(),
    });

    let val_a = state.evaluate(e, &chooser, &piece_a, precision)?;
    let val_b = state.evaluate(e, &chooser, &piece_b, precision)?;
    log.0.push(QueryRecord::Evaluate {
        agent: chooser.clone(),
        piece: piece_a.clone(),
        result: val_a.clone(),
    });
    log.0.push(QueryRecord::Evaluate {
        agent: chooser.clone(),
        piece: piece_b.clone(),
        result: val_b.clone(),
    });

    // Pick the certified weakly preferred piece; an overlap unresolved after
    // one refinement means certified indifference up to the precision, and
    // the earlier piece is taken.
    let (chosen, resolved) = match certify_ge(&val_a, &val_b) {
        Verdict::CertifiedPass => (piece_a.clone(), true),
        Verdict::CertifiedFail => (piece_b.clone(), true),
        Verdict::Undecided => {
            let finer = precision * precision;
            let fa = state.evaluate(e, &chooser, &piece_a, &finer)?;
            let fb = state.evaluate(e, &chooser, &piece_b, &finer)?;
            match certify_ge(&fa, &fb) {
                Verdict::CertifiedPass => (piece_a.clone(), true),
                Verdict::CertifiedFail => (piece_b.clone(), true),
                Verdict::Undecided => (piece_a.clone(), false),
            }
        }
    };
    log.0.push(QueryRecord::Choice {
        agent: chooser.clone(),
        chose: chosen.clone(),
        among: vec![piece_a.clone(), piece_b.clone()],
        resolved,
    });

    let other = if chosen == piece_a { piece_b } else { piece_a };
    let shares = vec![
        ShareEntry { agent: cutter, share: state.piece(&other)?.clone() },
        ShareEntry { agent: chooser, share: state.piece(&chosen)?.clone() },
    ];
    let evidence = if shares.iter().all(|s| s.share.as_epset().is_some()) {
        PartitionEvidence::Exact
    } else {
        PartitionEvidence::Structural
    };
    Ok(ProtocolRun {
        allocation: Allocation { shares, evidence, trace: None },
        log,
        cuts: state.cut_count(),
        floor_chain,
    })
}

/// No-envy verifier: all `n(n-1)` ordered-pair comparisons on intervals of
/// width at most `precision`, plus the partition audit.
pub fn verify_envy_free(
    e: &Economy,
    alloc: &Allocation,
    precision: &Rational,
    horizon: u64,
) -> Result<EnvyCertificate> {
    check_same_agents(e, alloc)?;
    let mut pairs = Vec::new();
    for i in &e.agents {
        let own_share = alloc.share_of(&i.name).expect("checked");
        let own = i.utility.mass_interval(own_share, precision)?;
        for j in &e.agents {
            if i.name == j.name {
                continue;
            }
            let other_share = alloc.share_of(&j.name).expect("checked");
            let other = i.utility.mass_interval(other_share, precision)?;
            let verdict = certify_ge(&own, &other);
            pairs.push(EnvyPairEvidence {
                i: i.name.clone(),
                j: j.name.clone(),
                own: own.clone(),
                other,
                verdict,
            });
        }
    }
    let partition = alloc.audit_partition(horizon)?;
    Ok(EnvyCertificate::aggregate(pairs, partition))
}

/// The classical three-agent trim protocol, run over the query engine with
/// tripartition cuts everywhere except the final greedy cut.
///
/// Requires every agent monotone with patience level at least
/// `d(5) = 161`: the ledger then survives the worst case of five cuts,
/// `161 -> 53 -> 17 -> 5 -> 1`, with the last cut greedy on a 1-divisible
/// piece.
pub fn selfridge_conway(e: &Economy, precision: &Rational) -> Result<ProtocolRun> {
    if e.n() != 3 {
        return Err(Error::PreconditionUnverified(
            "the trim protocol is a three-agent protocol".into(),
        ));
    }
    let required = divisibility_for_cuts(5)?;
    for a in &e.agents {
        if !a.utility.is_monotonic() {
            return Err(Error::NotMonotonic(a.name.clone()));
        }
        if a.utility.kakeya_level() < required {
            return Err(Error::InsufficientPatience {
                detail: format!(
                    "agent {} is below the d(5) = {required} requirement",
                    a.name
                ),
            });
        }
    }
    let names: Vec<String> = e.names();
    let (a1, a2, a3) = (names[0].clone(), names[1].clone(), names[2].clone());

    let mut state = PartitionState::coarsest(e, &required);
    let mut log = QueryLog::default();
    let mut floor_chain = Vec::new();
    let third = Rational::new(1, 3)?;

    // Agent 1 cuts the line into three pieces worth exactly 1/3 each to him.
    let root = state.piece_ids()[0].clone();
    floor_chain.push(state.floor(&root, &a1));
    let (p_first, rest) = state.cut(e, &a1, &root, &third, CutMode::Tripartition)?;
    log.0.push(QueryRecord::Cut {
        agent: a1.clone(),
        piece: root,
        target: third.clone(),
        mode: CutMode::Tripartition,
        taken: p_first.clone(),
        remainder: rest.clone(),
    });
    floor_chain.push(state.floor(&rest, &a1));
    let (p_second, p_third) = state.cut(e, &a1, &rest, &third, CutMode::Tripartition)?;
    log.0.push(QueryRecord::Cut {
        agent: a1.clone(),
        piece: rest,
        target: third.clone(),
        mode: CutMode::Tripartition,
        taken: p_second.clone(),
        remainder: p_third.clone(),
    });
    let mut pieces = vec![p_first, p_second, p_third];

    // Agent 2 trims his favorite piece down to a tie with his second
    // favorite. Exact piece values (pinned or closed-form) give an exact
    // trim; otherwise the values are refined and the trim target is the
    // certified lower bound of the gap, leaving the trimmed piece within the
    // precision of the second favorite.
    let eval_precision = precision / &Rational::from(4i64);
    let vals: Vec<RatInterval> = pieces
        .iter()
        .map(|p| state.evaluate(e, &a2, p, &eval_precision))
        .collect::<Result<_>>()?;
    for (p, v) in pieces.iter().zip(&vals) {
        log.0.push(QueryRecord::Evaluate {
            agent: a2.clone(),
            piece: p.clone(),
            result: v.clone(),
        });
    }
    let largest = argmax_by_lo(&vals);
    let second_hi = vals
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != largest)
        .map(|(_, v)| v.hi().clone())
        .max()
        .expect("two other pieces");
    let gap_lo = vals[largest].lo() - &second_hi;
    let trim_target = if gap_lo.is_positive() { gap_lo } else { Rational::zero() };

    let mut trimmed_piece: Option<String> = None;
    let mut trimmings: Option<String> = None;
    if trim_target.is_positive() {
        let target_piece = pieces[largest].clone();
        floor_chain.push(state.floor(&target_piece, &a2));
        let (cut_out, kept) =
            state.cut(e, &a2, &target_piece, &trim_target, CutMode::Tripartition)?;
        log.0.push(QueryRecord::Cut {
            agent: a2.clone(),
            piece: target_piece,
            target: trim_target.clone(),
            mode: CutMode::Tripartition,
            taken: cut_out.clone(),
            remainder: kept.clone(),
        });
        pieces[largest] = kept.clone();
        trimmed_piece = Some(kept);
        trimmings = Some(cut_out);
    } else {
        log.0.push(QueryRecord::Note { text: "zero trim: favorite already tied".into() });
    }

    // Main pieces are picked in the order: agent 3, agent 2 (who must take
    // the trimmed piece if still available), agent 1.
    let mut assignment: BTreeMap<String, String> = BTreeMap::new();
    let mut available = pieces.clone();
    let choice3 = choose_favorite(&state, e, &a3, &available, precision, &mut log)?;
    assignment.insert(a3.clone(), choice3.clone());
    available.retain(|p| p != &choice3);
    let choice2 = match &trimmed_piece {
        Some(tp) if available.contains(tp) => {
            log.0.push(QueryRecord::Choice {
                agent: a2.clone(),
                chose: tp.clone(),
                among: available.clone(),
                resolved: true,
            });
            tp.clone()
        }
        _ => choose_favorite(&state, e, &a2, &available, precision, &mut log)?,
    };
    assignment.insert(a2.clone(), choice2.clone());
    available.retain(|p| p != &choice2);
    assignment.insert(a1.clone(), available[0].clone());

    // Split the trimmings three ways and hand the parts out: the holder of
    // the trimmed piece picks first, then agent 1, then the divider.
    let mut trim_assignment: BTreeMap<String, String> = BTreeMap::new();
    if let Some(tr) = &trimmings {
        let trimmed = trimmed_piece.as_ref().expect("trim implies a trimmed piece");
        let holder =
            if assignment[&a3] == *trimmed { a3.clone() } else { a2.clone() };
        let divider = if holder == a3 { a2.clone() } else { a3.clone() };
        let (t1, t2, t3) = cut_into_thirds(
            &mut state,
            e,
            &divider,
            tr,
            &mut log,
            &mut floor_chain,
        )?;
        let mut parts = vec![t1, t2, t3];
        let first = choose_favorite(&state, e, &holder, &parts, precision, &mut log)?;
        trim_assignment.insert(holder.clone(), first.clone());
        parts.retain(|p| p != &first);
        let second = choose_favorite(&state, e, &a1, &parts, precision, &mut log)?;
        trim_assignment.insert(a1.clone(), second.clone());
        parts.retain(|p| p != &second);
        trim_assignment.insert(divider.clone(), parts[0].clone());
    }

    let mut shares = Vec::new();
    for a in &e.agents {
        let main = state.piece(&assignment[&a.name])?.clone();
        let share = match trim_assignment.get(&a.name) {
            Some(part) => union_disjoint(e, &main, state.piece(part)?),
            None => main,
        };
        shares.push(ShareEntry { agent: a.name.clone(), share });
    }

    Ok(ProtocolRun {
        allocation: Allocation {
            shares,
            evidence: PartitionEvidence::Structural,
            trace: None,
        },
        log,
        cuts: state.cut_count(),
        floor_chain,
    })
}

fn argmax_by_lo(vals: &[RatInterval]) -> usize {
    let mut best = 0;
    for (i, v) in vals.iter().enumerate().skip(1) {
        if v.lo() > vals[best].lo() {
            best = i;
        }
    }
    best
}

/// Certified-favorite choice among pieces: compare at the protocol
/// precision, retry once at its square, then fall back to the earliest
/// piece among the unseparated maxima (recorded as unresolved).
fn choose_favorite(
    state: &PartitionState,
    e: &Economy,
    agent: &str,
    pieces: &[String],
    precision: &Rational,
    log: &mut QueryLog,
) -> Result<String> {
    debug_assert!(!pieces.is_empty());
    let mut chosen = None;
    let mut resolved = false;
    for attempt in 0..2 {
        let p = if attempt == 0 { precision.clone() } else { precision * precision };
        let vals: Vec<RatInterval> = pieces
            .iter()
            .map(|piece| state.evaluate(e, agent, piece, &p))
            .collect::<Result<_>>()?;
        if attempt == 0 {
            for (piece, v) in pieces.iter().zip(&vals) {
                log.0.push(QueryRecord::Evaluate {
                    agent: agent.to_string(),
                    piece: piece.clone(),
                    result: v.clone(),
                });
            }
        }
        let best = argmax_by_lo(&vals);
        let separated = vals
            .iter()
            .enumerate()
            .all(|(i, v)| i == best || vals[best].lo() >= v.hi());
        chosen = Some(best);
        if separated {
            resolved = true;
            break;
        }
    }
    let best = chosen.expect("nonempty piece list");
    log.0.push(QueryRecord::Choice {
        agent: agent.to_string(),
        chose: pieces[best].clone(),
        among: pieces.to_vec(),
        resolved,
    });
    Ok(pieces[best].clone())
}

/// Splits a piece into three parts each worth exactly one third of it to the
/// divider: one tripartition cut, then a final greedy cut. Works whether or
/// not the divider's value of the piece is exactly known — unknown masses
/// ride on bracketed targets.
fn cut_into_thirds(
    state: &mut PartitionState,
    e: &Economy,
    divider: &str,
    piece: &str,
    log: &mut QueryLog,
    floor_chain: &mut Vec<Rational>,
) -> Result<(String, String, String)> {
    let u = utility_of(e, divider)?.clone();
    let schedule = state.piece(piece)?.clone();
    match known_exact_mass(&u, &schedule) {
        Some(total) => {
            let third = &total / &Rational::from(3i64);
            floor_chain.push(state.floor(piece, divider));
            let (t1, rest) = state.cut(e, divider, piece, &third, CutMode::Tripartition)?;
            log.0.push(QueryRecord::Cut {
                agent: divider.to_string(),
                piece: piece.to_string(),
                target: third.clone(),
                mode: CutMode::Tripartition,
                taken: t1.clone(),
                remainder: rest.clone(),
            });
            floor_chain.push(state.floor(&rest, divider));
            let (t2, t3) = state.cut(e, divider, &rest, &third, CutMode::Greedy)?;
            log.0.push(QueryRecord::Cut {
                agent: divider.to_string(),
                piece: rest,
                target: third,
                mode: CutMode::Greedy,
                taken: t2.clone(),
                remainder: t3.clone(),
            });
            Ok((t1, t2, t3))
        }
        None => {
            // Bracketed thirds. The tripartition rank for a target of one
            // third of the whole piece is always 1, so the three cycles are
            // fixed and only the greedy top-up needs the bracket.
            let floor = state.floor(piece, divider);
            if floor < Rational::from(5i64) {
                return Err(Error::InsufficientDivisibility {
                    have: floor.to_string(),
                    need: "5".into(),
                });
            }
            floor_chain.push(floor);
            let take = schedule.cycle(3, 3)?;
            let sort = schedule.cycle(1, 3)?;
            let target = CutTarget::Bracketed(LinearMassOracle::new(
                Rational::zero(),
                vec![
                    (Rational::new(1, 3)?, MassRefiner::new(&u, schedule.clone())),
                    (-Rational::one(), MassRefiner::new(&u, take.clone())),
                ],
            ));
            let greedy_part = greedy_lazy(
                &u,
                &sort,
                target,
                sort.envelope_hint(),
                Provenance::labeled("third_split_topup"),
                Vec::new(),
            );
            let taken4 = take.union(&greedy_part);
            let rem4 = schedule.difference(&taken4);
            let (t1, r1) = state.apply_external_cut(
                divider,
                piece,
                CutMode::Tripartition,
                taken4,
                rem4,
            );
            log.0.push(QueryRecord::Cut {
                agent: divider.to_string(),
                piece: piece.to_string(),
                target: Rational::zero(),
                mode: CutMode::Tripartition,
                taken: t1.clone(),
                remainder: r1.clone(),
            });
            floor_chain.push(state.floor(&r1, divider));
            let r1_sched = state.piece(&r1)?.clone();
            let target2 = CutTarget::Bracketed(LinearMassOracle::new(
                Rational::zero(),
                vec![(Rational::new(1, 3)?, MassRefiner::new(&u, schedule.clone()))],
            ));
            let taken5 = greedy_lazy(
                &u,
                &r1_sched,
                target2,
                r1_sched.envelope_hint(),
                Provenance::labeled("third_split_final"),
                Vec::new(),
            );
            let rem5 = r1_sched.difference(&taken5);
            let (t2, t3) =
                state.apply_external_cut(divider, &r1, CutMode::Greedy, taken5, rem5);
            log.0.push(QueryRecord::Cut {
                agent: divider.to_string(),
                piece: r1,
                target: Rational::zero(),
                mode: CutMode::Greedy,
                taken: t2.clone(),
                remainder: t3.clone(),
            });
            Ok((t1, t2, t3))
        }
    }
}

impl PartitionState {
    /// Adopts a cut performed outside the exact-target API (bracketed
    /// targets), applying the same ledger rules.
    pub(crate) fn apply_external_cut(
        &mut self,
        cutter: &str,
        piece: &str,
        mode: CutMode,
        taken: Schedule,
        remainder: Schedule,
    ) -> (String, String) {
        let result = CutResult {
            taken,
            remainder,
            taken_value: Rational::zero(),
            floor_taken: Rational::zero(),
            floor_remainder: Rational::zero(),
            cutter: Some(cutter.to_string()),
        };
        self.split(piece, cutter, mode, result)
    }
}

/// Disjoint union of a main piece and a trim part, with mass pins combined
/// for every agent whose masses of both sides are exactly known.
fn union_disjoint(e: &Economy, a: &Schedule, b: &Schedule) -> Schedule {
    if let (Schedule::Periodic(x), Schedule::Periodic(y)) = (a, b) {
        return Schedule::Periodic(x.union(y));
    }
    let mut pins = Vec::new();
    for agent in &e.agents {
        if let (Some(ma), Some(mb)) =
            (known_exact_mass(&agent.utility, a), known_exact_mass(&agent.utility, b))
        {
            let pin = MassPin { utility: agent.utility.clone(), mass: ma + mb };
            if !pins.contains(&pin) {
                pins.push(pin);
            }
        }
    }
    let envelope = match (a.envelope_hint(), b.envelope_hint()) {
        (Some(x), Some(y)) => Some(x.union(&y)),
        _ => None,
    };
    Schedule::Lazy(LazySchedule::new(
        Box::new(crate::schedule::BoolScanner::union(a.clone(), b.clone())),
        envelope,
        Provenance::labeled("piece_with_trim_part"),
        pins,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rat;

    fn geo(d: &str) -> UtilityFn {
        UtilityFn::geometric(rat(d)).unwrap()
    }

    #[test]
    fn divisibility_ladder() {
        assert_eq!(divisibility_for_cuts(1).unwrap(), rat("1"));
        assert_eq!(divisibility_for_cuts(2).unwrap(), rat("5"));
        assert_eq!(divisibility_for_cuts(5).unwrap(), rat("161"));
        // Recurrence agreement on a long stretch.
        let mut rec = rat("1");
        for c in 2..=1000u64 {
            rec = Rational::from(3i64) * rec + Rational::from(2i64);
            assert_eq!(divisibility_for_cuts(c).unwrap(), rec);
        }
    }

    #[test]
    fn ledger_chain_matches_the_ladder() {
        // (d(m) - 2) / 3 = d(m - 1)
        for m in 2..=12u64 {
            let d_m = divisibility_for_cuts(m).unwrap();
            let d_prev = divisibility_for_cuts(m - 1).unwrap();
            assert_eq!(tripartition_child_floor(&d_m), d_prev);
        }
    }

    #[test]
    fn patience_towers() {
        let p1 = full_protocol_patience(1).unwrap();
        assert_eq!(p1.cuts_numeric, Some(1));
        assert_eq!(p1.divisibility_numeric, Some(rat("1")));
        assert_eq!(patience_numeric(1).unwrap(), rat("1"));

        let p2 = full_protocol_patience(2).unwrap();
        assert_eq!(p2.cuts.to_string(), "2^(2^(65536))");
        assert!(p2.cuts_numeric.is_none());
        assert!(matches!(patience_numeric(2), Err(Error::TowerTooLarge(2))));
        assert!(matches!(patience_numeric(3), Err(Error::TowerTooLarge(3))));
        assert_eq!(
            p2.divisibility_symbolic(),
            "2*3^(2^(2^(65536)) - 1) - 1"
        );
    }

    #[test]
    fn rw_engine_ledger_rules() {
        let e = Economy::from_utilities(vec![geo("199/200"), geo("199/200"), geo("199/200")])
            .unwrap();
        let mut state = PartitionState::coarsest(&e, &rat("161"));
        let root = state.piece_ids()[0].clone();
        let (t, r) = state
            .cut(&e, "a1", &root, &rat("1/3"), CutMode::Tripartition)
            .unwrap();
        for agent in ["a1", "a2", "a3"] {
            assert_eq!(state.floor(&t, agent), rat("53"));
            assert_eq!(state.floor(&r, agent), rat("53"));
        }
        assert_eq!(state.cut_count(), 1);
        // Greedy cut: only the cutter's remainder floor survives.
        let (gt, gr) = state.cut(&e, "a2", &r, &rat("1/10"), CutMode::Greedy).unwrap();
        assert_eq!(state.floor(&gt, "a2"), rat("0"));
        assert_eq!(state.floor(&gr, "a2"), rat("52"));
        assert_eq!(state.floor(&gr, "a1"), rat("0"));
        assert_eq!(state.cut_count(), 2);
    }

    #[test]
    fn rw_cut_short_circuits() {
        let e = Economy::from_utilities(vec![geo("9/10"), geo("9/10")]).unwrap();
        let mut state = PartitionState::coarsest(&e, &rat("9"));
        let root = state.piece_ids()[0].clone();
        let (t, r) = state.cut(&e, "a1", &root, &rat("0"), CutMode::Greedy).unwrap();
        assert_eq!(r, root);
        assert!(state.piece(&t).unwrap().as_epset().unwrap().is_empty());
        assert_eq!(state.cut_count(), 0);
        let (t2, r2) = state.cut(&e, "a1", &root, &rat("1"), CutMode::Greedy).unwrap();
        assert_eq!(t2, root);
        assert!(state.piece(&r2).unwrap().as_epset().unwrap().is_empty());
        assert_eq!(state.cut_count(), 0);
    }

    #[test]
    fn rw_engine_floor_gates() {
        let e = Economy::from_utilities(vec![geo("9/10"), geo("9/10")]).unwrap();
        let mut state = PartitionState::coarsest(&e, &rat("3"));
        let root = state.piece_ids()[0].clone();
        assert!(matches!(
            state.cut(&e, "a1", &root, &rat("1/3"), CutMode::Tripartition),
            Err(Error::InsufficientDivisibility { .. })
        ));
    }

    #[test]
    fn divide_and_choose_example() {
        // Cutter at 1/2 cuts {1}; chooser at 2/3 values {1} at 1/3 and takes
        // the tail.
        let e = Economy::from_utilities(vec![geo("1/2"), geo("2/3")]).unwrap();
        let run = divide_and_choose(&e, &rat("1/1000000000000000000")).unwrap();
        assert_eq!(run.cuts, 1);
        let s1 = run.allocation.share_of("a1").unwrap();
        let s2 = run.allocation.share_of("a2").unwrap();
        assert_eq!(s1.members_upto(5).unwrap(), vec![1]);
        assert_eq!(s2.members_upto(5).unwrap(), vec![2, 3, 4, 5]);
        // Cutter's piece is worth exactly 1/2 to him.
        let own = e.agents[0].utility.mass_interval(s1, &rat("1/1000")).unwrap();
        assert!(own.is_degenerate() && own.lo() == &rat("1/2"));
        let cert = verify_envy_free(&e, &run.allocation, &rat("1/1000000"), 100).unwrap();
        assert!(cert.verdict.passed(), "{cert:?}");
    }

    #[test]
    fn divide_and_choose_patience_gate() {
        let e = Economy::from_utilities(vec![geo("1/3"), geo("1/2")]).unwrap();
        assert!(matches!(
            divide_and_choose(&e, &rat("1/1000")),
            Err(Error::InsufficientPatience { .. })
        ));
    }

    #[test]
    fn envy_verifier_flags_round_robin_for_impatient_agents() {
        // Identical geometric agents: position 2 envies position 1 exactly.
        let e = Economy::from_utilities(vec![geo("199/200"), geo("199/200")]).unwrap();
        let alloc = crate::apportion::round_robin(&e);
        let cert = verify_envy_free(&e, &alloc, &rat("1/1000000"), 50).unwrap();
        assert_eq!(cert.verdict, Verdict::CertifiedFail);
        let bad = cert.pairs.iter().find(|p| p.i == "a2" && p.j == "a1").unwrap();
        assert_eq!(bad.verdict, Verdict::CertifiedFail);
        assert_eq!(bad.own, RatInterval::exact(rat("199/399")));
        assert_eq!(bad.other, RatInterval::exact(rat("200/399")));
        // Vacuous single-agent case.
        let e1 = Economy::from_utilities(vec![geo("1/2")]).unwrap();
        let a1 = crate::apportion::round_robin(&e1);
        assert!(verify_envy_free(&e1, &a1, &rat("1/1000"), 20).unwrap().verdict.passed());
    }

    #[test]
    fn trim_protocol_identical_agents_degenerates() {
        let e = Economy::from_utilities(vec![
            geo("199/200"),
            geo("199/200"),
            geo("199/200"),
        ])
        .unwrap();
        let run = selfridge_conway(&e, &rat("1/1000000000000000000")).unwrap();
        // Zero trim: two cuts, floors 161 -> 53 -> 17.
        assert_eq!(run.cuts, 2);
        assert_eq!(run.floor_chain, vec![rat("161"), rat("53")]);
        let cert = verify_envy_free(&e, &run.allocation, &rat("1/1000000"), 60).unwrap();
        assert!(cert.verdict.passed(), "{cert:?}");
        for p in &cert.pairs {
            assert!(!p.gap().lo().is_negative(), "{p:?}");
        }
    }

    #[test]
    fn trim_protocol_distinct_agents() {
        let e = Economy::from_utilities(vec![
            geo("199/200"),
            geo("399/400"),
            geo("995/1000"),
        ])
        .unwrap();
        let run = selfridge_conway(&e, &rat("1/1000000000000000000")).unwrap();
        assert!(run.cuts <= 5);
        // Ledger floors never dip below 1 before the final greedy cut.
        for f in &run.floor_chain {
            assert!(f >= &rat("1"));
        }
        let cert = verify_envy_free(
            &e,
            &run.allocation,
            &rat("1/1000000000000000"),
            60,
        )
        .unwrap();
        let tol = -rat("1/1000000000000000");
        for p in &cert.pairs {
            assert!(p.gap().lo() >= &tol, "{p:?}");
        }
    }

    #[test]
    fn trim_protocol_gates() {
        let e = Economy::from_utilities(vec![geo("9/10"), geo("9/10"), geo("9/10")]).unwrap();
        assert!(matches!(
            selfridge_conway(&e, &rat("1/1000")),
            Err(Error::InsufficientPatience { .. })
        ));
    }
}
