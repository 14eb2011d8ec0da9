//! Alignment plans: which teacher layers each student layer distills from.
//!
//! Layer indices are 1-based throughout, matching how layers are usually
//! named (`h_T^1 .. h_T^n`). An empty set means the student layer takes no
//! hidden-state loss.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    /// One teacher layer (or none) per student layer.
    PkdSkip,
    /// Disjoint contiguous buckets.
    BucketNo,
    /// Contiguous buckets where each shares its first layer with the
    /// preceding one.
    BucketPo,
    /// Every participating student layer sees all teacher layers.
    FullSpan,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::PkdSkip => "PKD_SKIP",
            Strategy::BucketNo => "BUCKET_NO",
            Strategy::BucketPo => "BUCKET_PO",
            Strategy::FullSpan => "FULL_SPAN",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overlap {
    No,
    Po,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentPlan {
    pub strategy: Strategy,
    pub teacher_layers: usize,
    pub student_layers: usize,
    /// `mapping[j - 1]` is `A(j)`, ascending.
    pub mapping: Vec<Vec<usize>>,
}

impl AlignmentPlan {
    /// `A(j)` for 1-based student layer `j`.
    pub fn teachers_of(&self, j: usize) -> &[usize] {
        &self.mapping[j - 1]
    }

    /// `(j, A(j))` for every student layer with a nonempty set.
    pub fn participating(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.mapping
            .iter()
            .enumerate()
            .filter(|(_, set)| !set.is_empty())
            .map(|(i, set)| (i + 1, set.as_slice()))
    }

    pub fn num_participating(&self) -> usize {
        self.participating().count()
    }
}

/// Skip-style plan: student layer `j` distills from `picks[j - 1]` when set.
pub fn make_pkd_plan(n: usize, m: usize, picks: &[Option<usize>]) -> Result<AlignmentPlan> {
    if picks.len() != m {
        return Err(Error::config(format!(
            "{} picks given for a {m}-layer student",
            picks.len()
        )));
    }
    let mut last = 0;
    for &p in picks.iter().flatten() {
        if p == 0 || p > n {
            return Err(Error::config(format!(
                "teacher layer {p} outside 1..={n}"
            )));
        }
        if p <= last {
            return Err(Error::config(format!(
                "picks must be strictly increasing, got {p} after {last}"
            )));
        }
        last = p;
    }
    Ok(AlignmentPlan {
        strategy: Strategy::PkdSkip,
        teacher_layers: n,
        student_layers: m,
        mapping: picks.iter().map(|p| p.iter().copied().collect()).collect(),
    })
}

/// Equal-size contiguous buckets over the first `m - 1` student layers; the
/// last student layer gets no bucket.
pub fn make_bucket_plan(n: usize, m: usize, overlap: Overlap) -> Result<AlignmentPlan> {
    bucket_plan(n, m, overlap, false)
}

/// Bucket plan with an explicit choice of whether the last student layer
/// participates.
///
/// When `n` does not divide evenly, earlier buckets take the extra layer.
pub fn bucket_plan(n: usize, m: usize, overlap: Overlap, include_last: bool) -> Result<AlignmentPlan> {
    let parts = if include_last { m } else { m.saturating_sub(1) };
    if parts == 0 || n < parts {
        return Err(Error::config(format!(
            "cannot bucket {n} teacher layers over {parts} participating student layers"
        )));
    }
    let (base, extra) = (n / parts, n % parts);
    let mut starts = Vec::with_capacity(parts + 1);
    let mut start = 1;
    for b in 0..parts {
        starts.push(start);
        start += base + usize::from(b < extra);
    }
    starts.push(n + 1);
    let mut mapping: Vec<Vec<usize>> = (0..parts)
        .map(|b| {
            let end = match overlap {
                // reach into the next bucket's first layer, except at the end
                Overlap::Po if b + 1 < parts => starts[b + 1],
                _ => starts[b + 1] - 1,
            };
            (starts[b]..=end).collect()
        })
        .collect();
    mapping.resize(m, Vec::new());
    Ok(AlignmentPlan {
        strategy: match overlap {
            Overlap::No => Strategy::BucketNo,
            Overlap::Po => Strategy::BucketPo,
        },
        teacher_layers: n,
        student_layers: m,
        mapping,
    })
}

/// Every student layer but the last attends over all `n` teacher layers.
pub fn make_full_span_plan(n: usize, m: usize) -> Result<AlignmentPlan> {
    full_span_plan(n, m, false)
}

pub fn full_span_plan(n: usize, m: usize, include_last: bool) -> Result<AlignmentPlan> {
    if n == 0 || m == 0 {
        return Err(Error::config("full-span plan needs n, m >= 1"));
    }
    let parts = if include_last { m } else { m - 1 };
    let mut mapping = vec![(1..=n).collect::<Vec<_>>(); parts];
    mapping.resize(m, Vec::new());
    Ok(AlignmentPlan {
        strategy: Strategy::FullSpan,
        teacher_layers: n,
        student_layers: m,
        mapping,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    WrongLength,
    IndexOutOfRange,
    NotAscending,
    MultipleSkipTargets,
    UnionIncomplete,
    NotDisjoint,
    NotContiguous,
    BadOverlap,
    NotFullSpan,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Offending layer indices: student layers for per-bucket rules, teacher
    /// layers for the union rule.
    pub layers: Vec<usize>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Validation {
    pub violations: Vec<Violation>,
    pub notes: Vec<String>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, layers: Vec<usize>, message: String) {
        self.violations.push(Violation {
            kind,
            layers,
            message,
        });
    }
}

/// Checks every structural invariant of `plan` and lists each violation.
pub fn validate(plan: &AlignmentPlan) -> Validation {
    let mut report = Validation::default();
    let n = plan.teacher_layers;
    if plan.mapping.len() != plan.student_layers {
        report.push(
            ViolationKind::WrongLength,
            vec![],
            format!(
                "mapping has {} entries for {} student layers",
                plan.mapping.len(),
                plan.student_layers
            ),
        );
    }
    for (j, set) in plan.mapping.iter().enumerate().map(|(i, s)| (i + 1, s)) {
        let bad: Vec<usize> = set.iter().copied().filter(|&k| k == 0 || k > n).collect();
        if !bad.is_empty() {
            report.push(
                ViolationKind::IndexOutOfRange,
                bad.clone(),
                format!("A({j}) holds teacher layers {bad:?} outside 1..={n}"),
            );
        }
        if set.windows(2).any(|w| w[0] >= w[1]) {
            report.push(
                ViolationKind::NotAscending,
                vec![j],
                format!("A({j}) = {set:?} is not strictly ascending"),
            );
        }
    }

    let buckets: Vec<(usize, &[usize])> = plan.participating().collect();
    match plan.strategy {
        Strategy::PkdSkip => {
            for &(j, set) in &buckets {
                if set.len() > 1 {
                    report.push(
                        ViolationKind::MultipleSkipTargets,
                        vec![j],
                        format!("skip plan maps student layer {j} to {} teacher layers", set.len()),
                    );
                }
            }
            report
                .notes
                .push("PKD_SKIP plans skip teacher layers by design; union rule not applied".into());
            return report;
        }
        Strategy::BucketNo | Strategy::BucketPo => {
            for &(j, set) in &buckets {
                if set.windows(2).any(|w| w[1] != w[0] + 1) {
                    report.push(
                        ViolationKind::NotContiguous,
                        vec![j],
                        format!("bucket A({j}) = {set:?} is not contiguous"),
                    );
                }
            }
            for pair in buckets.windows(2) {
                let ((ja, a), (jb, b)) = (pair[0], pair[1]);
                let shared: Vec<usize> = a.iter().copied().filter(|k| b.contains(k)).collect();
                if plan.strategy == Strategy::BucketNo {
                    if !shared.is_empty() {
                        report.push(
                            ViolationKind::NotDisjoint,
                            vec![ja, jb],
                            format!("buckets not disjoint: A({ja}) and A({jb}) share {shared:?}"),
                        );
                    }
                } else {
                    let boundary = a.last() == b.first() && shared.len() == 1;
                    if !boundary {
                        report.push(
                            ViolationKind::BadOverlap,
                            vec![ja, jb],
                            format!(
                                "A({ja}) and A({jb}) must share exactly their boundary layer, share {shared:?}"
                            ),
                        );
                    }
                }
            }
            if plan.strategy == Strategy::BucketNo {
                // non-adjacent buckets too
                for (x, &(ja, a)) in buckets.iter().enumerate() {
                    for &(jb, b) in buckets.iter().skip(x + 2) {
                        let shared: Vec<usize> = a.iter().copied().filter(|k| b.contains(k)).collect();
                        if !shared.is_empty() {
                            report.push(
                                ViolationKind::NotDisjoint,
                                vec![ja, jb],
                                format!("buckets not disjoint: A({ja}) and A({jb}) share {shared:?}"),
                            );
                        }
                    }
                }
            }
        }
        Strategy::FullSpan => {
            for &(j, set) in &buckets {
                if set.len() != n || set.iter().copied().ne(1..=n) {
                    report.push(
                        ViolationKind::NotFullSpan,
                        vec![j],
                        format!("full-span layer {j} covers {} of {n} teacher layers", set.len()),
                    );
                }
            }
        }
    }

    let union: BTreeSet<usize> = buckets.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let missing: Vec<usize> = (1..=n).filter(|k| !union.contains(k)).collect();
    if !missing.is_empty() {
        report.push(
            ViolationKind::UnionIncomplete,
            missing.clone(),
            format!("teacher layers {missing:?} are not covered by any bucket"),
        );
    }
    report
}
