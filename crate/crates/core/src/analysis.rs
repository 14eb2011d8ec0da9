//! Plot-ready data for inspecting distilled students: fusion weights per
//! example, a shared 2-D PCA frame for hidden states, and cosine distances
//! between student and teacher states.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentPlan;
use crate::data::{batches, Dataset};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{attention_weights, TeacherCache};

/// Guard for the norm product in cosine distances.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub example_id: usize,
    pub j: usize,
    pub k: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub rows: Vec<AttentionRow>,
}

impl AttentionDump {
    /// One weight row per example for student layer `j`, in dump order.
    pub fn matrix(&self, j: usize) -> Vec<(usize, Vec<f64>)> {
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.j == j) {
            match out.last_mut() {
                Some((id, w)) if *id == r.example_id => w.push(r.alpha),
                _ => out.push((r.example_id, vec![r.alpha])),
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

fn subset(dataset: &Dataset, examples: &[usize]) -> Result<Dataset> {
    let mut picked = Vec::with_capacity(examples.len());
    for &i in examples {
        let ex = dataset
            .examples
            .get(i)
            .ok_or_else(|| Error::input(format!("example {i} is outside a dataset of {}", dataset.len())))?;
        picked.push(ex.clone());
    }
    Ok(Dataset {
        examples: picked,
        num_classes: dataset.num_classes,
    })
}

/// α for student layer `j` over `examples` of `dataset`, both models in
/// eval mode.
pub fn dump_attention<T: Scalar>(
    student: &Encoder<T>,
    teacher: &Encoder<T>,
    fusion: &Fusion<T>,
    plan: &AlignmentPlan,
    dataset: &Dataset,
    examples: &[usize],
    j: usize,
) -> Result<AttentionDump> {
    if !fusion.kind().has_weights() {
        return Err(Error::config("no attention weights for concatenation fusion"));
    }
    if j == 0 || j > plan.student_layers || plan.teachers_of(j).is_empty() {
        return Err(Error::config(format!("student layer {j} has no teacher layers in the plan")));
    }
    let picked = subset(dataset, examples)?;
    let cache = TeacherCache::build(teacher, &picked, picked.len().max(1))?;
    let mut rows = Vec::new();
    for batch in batches(&picked, picked.len().max(1), None)? {
        let weights = attention_weights(student, fusion, plan, &cache, &batch)?;
        let (_, w) = weights.iter().find(|(l, _)| *l == j).expect("participating layer");
        let set = plan.teachers_of(j);
        for (r, &pos) in batch.indices.iter().enumerate() {
            for (c, &k) in set.iter().enumerate() {
                rows.push(AttentionRow {
                    example_id: examples[pos],
                    j,
                    k,
                    alpha: w.data()[r * set.len() + c].to_f64c(),
                });
            }
        }
    }
    Ok(AttentionDump { rows })
}

/// CLS states per layer (`[examples, hidden]` each) for `examples` of
/// `dataset`, in eval mode.
pub fn cls_states<T: Scalar>(model: &Encoder<T>, dataset: &Dataset, examples: &[usize]) -> Result<Vec<Tensor<T>>> {
    let picked = subset(dataset, examples)?;
    Ok(TeacherCache::build(model, &picked, 256)?.cls)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub tag: String,
    pub example_id: usize,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub points: Vec<ProjectionPoint>,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Share of total variance carried by each of the two components.
    pub explained_variance: [f64; 2],
    /// Unit principal directions.
    pub components: [Vec<f64>; 2],
    /// Fewer than two nonzero eigenvalues.
    pub degenerate: bool,
}

impl ProjectionReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.points)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors, each signed so its largest-magnitude entry is positive.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let total: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in m.iter_mut() {
                    let (mp, mq) = (row[p], row[q]);
                    row[p] = c * mp - s * mq;
                    row[q] = s * mp + c * mq;
                }
                for k in 0..n {
                    let (mp, mq) = (m[p][k], m[q][k]);
                    m[p][k] = c * mp - s * mq;
                    m[q][k] = s * mp + c * mq;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y][y].total_cmp(&m[x][x]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let col: Vec<f64> = (0..n).map(|r| v[r][i]).collect();
            let lead = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let sign = if lead < 0.0 { -1.0 } else { 1.0 };
            col.into_iter().map(|x| x * sign).collect()
        })
        .collect();
    (values, vectors)
}

/// Two-component PCA fit on all tagged states together, so every tag is
/// projected into the same frame.
pub fn pca_project<T: Scalar>(states: &[(&str, &Tensor<T>)]) -> Result<ProjectionReport> {
    let d = match states.first() {
        Some((_, t)) if t.rank() == 2 => t.shape()[1],
        Some((tag, t)) => {
            return Err(Error::shape(format!("states for {tag:?} must be [examples, hidden], got {:?}", t.shape())))
        }
        None => return Err(Error::input("no states to project")),
    };
    for (tag, t) in states {
        if t.rank() != 2 || t.shape()[1] != d {
            return Err(Error::shape(format!("states for {tag:?} have shape {:?}, expected [_, {d}]", t.shape())));
        }
    }
    let n: usize = states.iter().map(|(_, t)| t.shape()[0]).sum();
    if n < 3 || d < 2 {
        return Err(Error::input(format!("PCA needs >= 3 examples and >= 2 dimensions, got {n} x {d}")));
    }
    let rows: Vec<Vec<f64>> = states
        .iter()
        .flat_map(|(_, t)| t.data().chunks(d).map(|r| r.iter().map(|x| x.to_f64c()).collect::<Vec<_>>()))
        .collect();
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let nonzero = values.iter().filter(|&&v| v > tol).count();
    let share = |i: usize| if total > 0.0 { values[i].max(0.0) / total } else { 0.0 };
    let components = [vectors[0].clone(), vectors[1].clone()];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut points = Vec::with_capacity(n);
    let mut at = 0;
    for (tag, t) in states {
        for example_id in 0..t.shape()[0] {
            let r = &centered[at];
            points.push(ProjectionPoint {
                tag: tag.to_string(),
                example_id,
                pc1: dot(r, &components[0]),
                pc2: dot(r, &components[1]),
            });
            at += 1;
        }
    }
    Ok(ProjectionReport {
        points,
        explained_variance: [share(0), share(1)],
        eigenvalues: values,
        components,
        degenerate: nonzero < 2,
    })
}

/// `1 - u.v / (|u||v|)`, with the norm product floored at
/// [`COSINE_EPS`]. The flag marks a floored (zero-vector) case.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> (f64, bool) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = nu * nv;
    if denom < COSINE_EPS {
        (1.0 - dot / COSINE_EPS, true)
    } else {
        (1.0 - dot / denom, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub example_id: usize,
    /// `s{j}-t{k}`: student layer `j` against teacher layer `k`.
    pub pair: String,
    pub distance: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub rows: Vec<CosineRow>,
}

impl CosineReport {
    pub fn mean(&self, pair: &str) -> Option<f64> {
        let ds: Vec<f64> = self.rows.iter().filter(|r| r.pair == pair).map(|r| r.distance).collect();
        (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

pub fn pair_label(j: usize, k: usize) -> String {
    format!("s{j}-t{k}")
}

/// Per-example distances for each `(j, k)` pair, with `student[j - 1]` and
/// `teacher[k - 1]` holding `[examples, hidden]` CLS states for the
/// examples named by `example_ids`.
pub fn cosine_distance_report<T: Scalar>(
    student: &[Tensor<T>],
    teacher: &[Tensor<T>],
    pairs: &[(usize, usize)],
    example_ids: &[usize],
) -> Result<CosineReport> {
    let mut rows = Vec::new();
    for &(j, k) in pairs {
        let s = student
            .get(j.wrapping_sub(1))
            .ok_or_else(|| Error::config(format!("no student layer {j}")))?;
        let t = teacher
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::config(format!("no teacher layer {k}")))?;
        if s.shape() != t.shape() || s.rank() != 2 || s.shape()[0] != example_ids.len() {
            return Err(Error::input(format!(
                "student states {:?} and teacher states {:?} do not cover the same {} examples",
                s.shape(),
                t.shape(),
                example_ids.len()
            )));
        }
        let d = s.shape()[1];
        for (&example_id, (u, v)) in example_ids.iter().zip(s.data().chunks(d).zip(t.data().chunks(d))) {
            let u: Vec<f64> = u.iter().map(|x| x.to_f64c()).collect();
            let v: Vec<f64> = v.iter().map(|x| x.to_f64c()).collect();
            let (distance, flagged) = cosine_distance(&u, &v);
            rows.push(CosineRow {
                example_id,
                pair: pair_label(j, k),
                distance,
                flagged,
            });
        }
    }
    Ok(CosineReport { rows })
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
