//! Diagnostics: collapse metrics, rank correlation with the teacher space,
//! ranker outcome matrices, and the latency/memory benchmark.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine_matrix, Tensor};
use crate::retrieval::{rank, RetrievalIndex};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub intra_sim: f64,
    pub total_sim: f64,
    pub diff_norm: f64,
    /// `intra + total` was zero, so `diff_norm` is reported as 0.
    pub degenerate: bool,
}

/// Mean cosine over ordered same-owner pairs versus over all ordered pairs.
pub fn collapse_metrics(embeddings: &Tensor, owners: &[usize]) -> Result<CollapseReport> {
    let n = embeddings.rows();
    if owners.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} embeddings but {} owners",
            owners.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "collapse metrics need at least 2 instances".into(),
        ));
    }
    let sims = cosine_matrix(embeddings, embeddings)?;
    let (mut intra, mut n_intra, mut total) = (0.0, 0usize, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = sims.get(i, j);
            total += s;
            if owners[i] == owners[j] {
                intra += s;
                n_intra += 1;
            }
        }
    }
    if n_intra == 0 {
        return Err(Error::InvalidArgument(
            "no video owns two instances; intra similarity is undefined".into(),
        ));
    }
    let intra_sim = intra / n_intra as f64;
    let total_sim = total / (n * (n - 1)) as f64;
    let denom = intra_sim + total_sim;
    let degenerate = denom == 0.0;
    let diff_norm = if degenerate {
        0.0
    } else {
        (intra_sim - total_sim) / denom
    };
    Ok(CollapseReport {
        intra_sim,
        total_sim,
        diff_norm,
        degenerate,
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation of two score lists (average-rank ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanReport {
    /// Mean per-anchor correlation × 100.
    pub rho_x100: f64,
    pub anchors_used: usize,
    /// Anchors whose similarity row was constant in either space.
    pub anchors_skipped: usize,
}

pub fn spearman_vs_teacher(student: &Tensor, teacher: &Tensor) -> Result<SpearmanReport> {
    let n = student.rows();
    if teacher.rows() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} student rows but {} teacher rows",
            teacher.rows()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidArgument("rank correlation needs at least 3 items".into()));
    }
    let s = cosine_matrix(student, student)?;
    let t = cosine_matrix(teacher, teacher)?;
    let (mut sum, mut used, mut skipped) = (0.0, 0, 0);
    for i in 0..n {
        let others = (0..n).filter(|&j| j != i);
        let a: Vec<f64> = others.clone().map(|j| s.get(i, j)).collect();
        let b: Vec<f64> = others.map(|j| t.get(i, j)).collect();
        match spearman(&a, &b) {
            Some(r) => {
                sum += r;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument("every anchor has constant similarities".into()));
    }
    Ok(SpearmanReport {
        rho_x100: 100.0 * sum / used as f64,
        anchors_used: used,
        anchors_skipped: skipped,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub both: usize,
    pub a_only: usize,
    pub b_only: usize,
    pub neither: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.both + self.a_only + self.b_only + self.neither
    }

    /// Percentages in the order both, a_only, b_only, neither.
    pub fn percentages(&self) -> [f64; 4] {
        let n = self.total().max(1) as f64;
        [self.both, self.a_only, self.b_only, self.neither].map(|c| 100.0 * c as f64 / n)
    }
}

/// Outcome matrix of two rankers at cutoff `q`, keyed by query id with
/// 1-based ground-truth ranks.
pub fn ranker_confusion(
    ranks_a: &BTreeMap<String, usize>,
    ranks_b: &BTreeMap<String, usize>,
    q: usize,
) -> Result<Confusion> {
    if ranks_a.len() != ranks_b.len() || ranks_a.keys().any(|k| !ranks_b.contains_key(k)) {
        let only_a: Vec<&str> = ranks_a
            .keys()
            .filter(|k| !ranks_b.contains_key(*k))
            .map(String::as_str)
            .collect();
        let only_b: Vec<&str> = ranks_b
            .keys()
            .filter(|k| !ranks_a.contains_key(*k))
            .map(String::as_str)
            .collect();
        return Err(Error::Validation(format!(
            "rankers cover different queries (only in a: {only_a:?}; only in b: {only_b:?})"
        )));
    }
    let mut c = Confusion::default();
    for (id, &ra) in ranks_a {
        match (ra <= q, ranks_b[id] <= q) {
            (true, true) => c.both += 1,
            (true, false) => c.a_only += 1,
            (false, true) => c.b_only += 1,
            (false, false) => c.neither += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub size: usize,
    /// Mean wall-clock milliseconds per query.
    pub time_ms: f64,
    /// Peak resident set size of the process, when the platform exposes it.
    pub memory_mb: Option<f64>,
}

/// Peak resident memory from `VmHWM` in `/proc/self/status`.
pub fn peak_memory_mb() -> Option<f64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

/// Times ranking of every query against the first `size` videos of the
/// index, on the calling thread, averaged over `runs` passes.
pub fn bench(index: &RetrievalIndex, queries: &Tensor, sizes: &[usize], runs: usize) -> Result<Vec<BenchRow>> {
    if runs < 1 {
        return Err(Error::InvalidArgument("bench needs at least one run".into()));
    }
    if queries.rows() == 0 {
        return Err(Error::InvalidArgument("bench needs at least one query".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size > index.len() {
            return Err(Error::InvalidArgument(format!(
                "database size {size} outside 1..={}",
                index.len()
            )));
        }
        let sub = index.truncated(size);
        let mut total_ms = 0.0;
        for _ in 0..runs {
            let start = Instant::now();
            for q in queries.row_iter() {
                std::hint::black_box(rank("", q, &sub)?);
            }
            total_ms += start.elapsed().as_secs_f64() * 1e3;
        }
        rows.push(BenchRow {
            size,
            time_ms: total_ms / (runs * queries.rows()) as f64,
            memory_mb: peak_memory_mb(),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("size,time_ms,memory_mb\n");
    for r in rows {
        let mem = r.memory_mb.map_or_else(|| "NA".to_string(), |m| format!("{m:.2}"));
        out.push_str(&format!("{},{:.4},{}\n", r.size, r.time_ms, mem));
    }
    out
}
