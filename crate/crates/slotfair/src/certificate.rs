//! Machine-checkable fairness certificates.
//!
//! A certificate records, for each axiom inequality, the exact or interval
//! evidence it was judged on. Verdicts are three-valued: an inequality is
//! `certified_pass` or `certified_fail` only when the intervals prove it,
//! and `undecided` otherwise — callers may retry with finer precision.

use serde::{Deserialize, Serialize};

use crate::numeric::{Rational, RatInterval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    CertifiedPass,
    CertifiedFail,
    Undecided,
}

impl Verdict {
    pub fn passed(self) -> bool {
        self == Verdict::CertifiedPass
    }

    fn and(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (CertifiedFail, _) | (_, CertifiedFail) => CertifiedFail,
            (Undecided, _) | (_, Undecided) => Undecided,
            _ => CertifiedPass,
        }
    }
}

/// Certifies the weak inequality `a >= b` from interval evidence.
pub fn certify_ge(a: &RatInterval, b: &RatInterval) -> Verdict {
    if a.lo() >= b.hi() {
        Verdict::CertifiedPass
    } else if a.hi() < b.lo() {
        Verdict::CertifiedFail
    } else {
        Verdict::Undecided
    }
}

/// Certifies `a >= x` for an exact threshold.
pub fn certify_ge_point(a: &RatInterval, x: &Rational) -> Verdict {
    certify_ge(a, &RatInterval::exact(x.clone()))
}

/// Outcome of auditing that shares form a partition of the time line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionAudit {
    /// Closed-form shares checked exactly: pairwise disjoint, union is T.
    Exact,
    /// Procedural shares audited slot by slot up to the horizon.
    PrefixAudited { horizon: u64 },
    /// A slot covered zero or more than one share.
    Failed { slot: u64, covered: u64 },
}

impl PartitionAudit {
    pub fn ok(&self) -> bool {
        !matches!(self, PartitionAudit::Failed { .. })
    }
}

/// Per-agent proportionality evidence: own-share value against `1/n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentShareEvidence {
    pub agent: String,
    pub own: RatInterval,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProportionalityCertificate {
    pub threshold: Rational,
    pub agents: Vec<AgentShareEvidence>,
    pub partition: PartitionAudit,
    pub verdict: Verdict,
}

impl ProportionalityCertificate {
    pub fn aggregate(
        threshold: Rational,
        agents: Vec<AgentShareEvidence>,
        partition: PartitionAudit,
    ) -> Self {
        let mut verdict = if partition.ok() {
            Verdict::CertifiedPass
        } else {
            Verdict::CertifiedFail
        };
        for a in &agents {
            verdict = verdict.and(a.verdict);
        }
        ProportionalityCertificate { threshold, agents, partition, verdict }
    }
}

/// One ordered pair of the no-envy check: agent `i`'s value of his own share
/// against his value of agent `j`'s share.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvyPairEvidence {
    pub i: String,
    pub j: String,
    pub own: RatInterval,
    pub other: RatInterval,
    pub verdict: Verdict,
}

impl EnvyPairEvidence {
    /// Interval containing `u_i(own) - u_i(other)`; nonnegative means no envy.
    pub fn gap(&self) -> RatInterval {
        &self.own - &self.other
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvyCertificate {
    pub pairs: Vec<EnvyPairEvidence>,
    pub partition: PartitionAudit,
    pub verdict: Verdict,
}

impl EnvyCertificate {
    pub fn aggregate(pairs: Vec<EnvyPairEvidence>, partition: PartitionAudit) -> Self {
        let mut verdict = if partition.ok() {
            Verdict::CertifiedPass
        } else {
            Verdict::CertifiedFail
        };
        for p in &pairs {
            verdict = verdict.and(p.verdict);
        }
        EnvyCertificate { pairs, partition, verdict }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rat;

    #[test]
    fn weak_inequality_certification() {
        let half = RatInterval::exact(rat("1/2"));
        assert_eq!(certify_ge(&half, &half), Verdict::CertifiedPass);
        let third = RatInterval::exact(rat("1/3"));
        assert_eq!(certify_ge(&third, &half), Verdict::CertifiedFail);
        let wide = RatInterval::new(rat("1/4"), rat("3/4")).unwrap();
        assert_eq!(certify_ge(&wide, &half), Verdict::Undecided);
        // Inclusive at the boundary.
        assert_eq!(certify_ge_point(&half, &rat("1/2")), Verdict::CertifiedPass);
    }

    #[test]
    fn aggregation_is_conjunctive() {
        let pass = AgentShareEvidence {
            agent: "a1".into(),
            own: RatInterval::exact(rat("1/2")),
            verdict: Verdict::CertifiedPass,
        };
        let undec = AgentShareEvidence {
            agent: "a2".into(),
            own: RatInterval::new(rat("0"), rat("1")).unwrap(),
            verdict: Verdict::Undecided,
        };
        let c = ProportionalityCertificate::aggregate(
            rat("1/2"),
            vec![pass.clone(), undec],
            PartitionAudit::Exact,
        );
        assert_eq!(c.verdict, Verdict::Undecided);
        let c2 = ProportionalityCertificate::aggregate(
            rat("1/2"),
            vec![pass],
            PartitionAudit::Failed { slot: 3, covered: 2 },
        );
        assert_eq!(c2.verdict, Verdict::CertifiedFail);
    }

    #[test]
    fn interval_json_shape() {
        let i = RatInterval::new(rat("1/3"), rat("1/2")).unwrap();
        assert_eq!(serde_json::to_string(&i).unwrap(), r#"["1/3","1/2"]"#);
    }
}
