//! Clip-count schedule, order-preserving merging of adjacent frames,
//! the high-similarity ratio, and bipartite merging for adaptive clip counts.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine_matrix, cosine_sim, Tensor};

/// A sequence of tokens where each token stands for one or more original
/// positions. `provenance[i]` lists the original indices absorbed by token
/// `i` in increasing order, and `sizes[i] == provenance[i].len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct SizedTokenSeq {
    pub tokens: Tensor,
    pub sizes: Vec<usize>,
    pub provenance: Vec<Vec<usize>>,
}

impl SizedTokenSeq {
    /// Every row of `tokens` as its own size-1 token.
    pub fn unit(tokens: Tensor) -> Self {
        let n = tokens.rows();
        Self {
            tokens,
            sizes: vec![1; n],
            provenance: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn total_size(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// `(first, last)` original index of each token; meaningful for
    /// order-preserving output where provenance sets are intervals.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.provenance
            .iter()
            .map(|p| (p[0], *p.last().unwrap_or(&p[0])))
            .collect()
    }

    /// Maps each original index to the token that absorbed it.
    pub fn owner_map(&self) -> Result<Vec<usize>> {
        let n = self.total_size();
        let mut owner = vec![usize::MAX; n];
        for (t, set) in self.provenance.iter().enumerate() {
            for &i in set {
                if i >= n || owner[i] != usize::MAX {
                    return Err(Error::Internal(format!(
                        "provenance is not a partition of 0..{n} (index {i})"
                    )));
                }
                owner[i] = t;
            }
        }
        if owner.contains(&usize::MAX) {
            return Err(Error::Internal(format!("provenance does not cover 0..{n}")));
        }
        Ok(owner)
    }
}

/// Decreasing list of candidate clip counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSchedule {
    pub levels: Vec<usize>,
    pub merge_rate: f64,
    pub c_min: usize,
}

impl ClipSchedule {
    /// Number of levels `K`.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// One step of the clip-count recurrence:
/// `max(2 * floor((L - (L/2)(N/100) + 1) / 2), floor)`.
pub fn next_level(current: usize, merge_rate: f64, floor: usize) -> usize {
    let l = current as f64;
    let reduced = (l - (l / 2.0) * (merge_rate / 100.0) + 1.0) / 2.0;
    let next = 2 * reduced.floor() as usize;
    next.max(floor)
}

fn check_rate(merge_rate: f64) -> Result<()> {
    if !(merge_rate > 0.0 && merge_rate <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "merge rate must lie in (0, 100], got {merge_rate}"
        )));
    }
    Ok(())
}

pub fn clip_schedule(initial: usize, merge_rate: f64, c_min: usize) -> Result<ClipSchedule> {
    check_rate(merge_rate)?;
    if c_min < 1 {
        return Err(Error::InvalidArgument("c_min must be at least 1".into()));
    }
    if initial < c_min {
        return Err(Error::InvalidArgument(format!(
            "initial clip count {initial} is below c_min {c_min}"
        )));
    }
    let mut levels = vec![initial];
    let mut current = initial;
    while current > c_min {
        let next = next_level(current, merge_rate, c_min);
        if next == current {
            break;
        }
        levels.push(next);
        current = next;
    }
    Ok(ClipSchedule {
        levels,
        merge_rate,
        c_min,
    })
}

/// Output of [`op_tome`]: the merged sequence plus the length after every
/// iteration, starting with the input length.
#[derive(Clone, Debug, PartialEq)]
pub struct OpTomeResult {
    pub clips: SizedTokenSeq,
    pub lengths: Vec<usize>,
}

impl OpTomeResult {
    pub fn iterations(&self) -> usize {
        self.lengths.len() - 1
    }
}

fn weighted_mean(a: &[f64], sa: usize, b: &[f64], sb: usize) -> Vec<f64> {
    let (wa, wb) = (sa as f64, sb as f64);
    let total = wa + wb;
    a.iter().zip(b).map(|(x, y)| (wa * x + wb * y) / total).collect()
}

/// Sorts candidate indices by descending score; ties keep the lower index.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Order-preserving token merging: repeatedly scores disjoint adjacent
/// pairs `(0,1), (2,3), …` by cosine similarity and merges the most similar
/// ones by size-weighted averaging until at most `target` tokens remain.
/// The number of merges per iteration follows [`next_level`] with `target`
/// as the floor, so lengths track the clip-count recurrence exactly.
pub fn op_tome(frames: &Tensor, merge_rate: f64, target: usize) -> Result<OpTomeResult> {
    check_rate(merge_rate)?;
    let n = frames.rows();
    if target == 0 || target > n {
        return Err(Error::InvalidArgument(format!(
            "merge target {target} must lie in 1..={n} (frame count)"
        )));
    }
    let d = frames.cols();
    let mut tokens: Vec<Vec<f64>> = frames.row_iter().map(<[f64]>::to_vec).collect();
    let mut sizes = vec![1usize; n];
    let mut provenance: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut lengths = vec![n];

    while tokens.len() > target {
        let len = tokens.len();
        let merges = len - next_level(len, merge_rate, target);
        let pairs = len / 2;
        let scores = (0..pairs)
            .map(|p| cosine_sim(&tokens[2 * p], &tokens[2 * p + 1]))
            .collect::<Result<Vec<f64>>>()?;
        let mut selected = vec![false; pairs];
        for &p in rank_desc(&scores).iter().take(merges.min(pairs)) {
            selected[p] = true;
        }

        let mut next_tokens = Vec::with_capacity(len - merges);
        let mut next_sizes = Vec::with_capacity(len - merges);
        let mut next_prov = Vec::with_capacity(len - merges);
        let mut i = 0;
        while i < len {
            if i % 2 == 0 && i + 1 < len && selected[i / 2] {
                next_tokens.push(weighted_mean(&tokens[i], sizes[i], &tokens[i + 1], sizes[i + 1]));
                next_sizes.push(sizes[i] + sizes[i + 1]);
                let mut p = std::mem::take(&mut provenance[i]);
                p.append(&mut provenance[i + 1]);
                next_prov.push(p);
                i += 2;
            } else {
                next_tokens.push(std::mem::take(&mut tokens[i]));
                next_sizes.push(sizes[i]);
                next_prov.push(std::mem::take(&mut provenance[i]));
                i += 1;
            }
        }
        tokens = next_tokens;
        sizes = next_sizes;
        provenance = next_prov;
        lengths.push(tokens.len());
    }

    let flat: Vec<f64> = tokens.into_iter().flatten().collect();
    let rows = sizes.len();
    Ok(OpTomeResult {
        clips: SizedTokenSeq {
            tokens: Tensor::matrix(rows, d, flat)?,
            sizes,
            provenance,
        },
        lengths,
    })
}

/// Fixed-length average pooling into `count` contiguous segments, the
/// conventional clip construction used as an ablation alternative.
pub fn uniform_clips(frames: &Tensor, count: usize) -> Result<SizedTokenSeq> {
    let n = frames.rows();
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "uniform clip count {count} must lie in 1..={n}"
        )));
    }
    let d = frames.cols();
    let mut data = Vec::with_capacity(count * d);
    let mut sizes = Vec::with_capacity(count);
    let mut provenance = Vec::with_capacity(count);
    for c in 0..count {
        let (start, end) = (c * n / count, (c + 1) * n / count);
        let mut mean = vec![0.0; d];
        for i in start..end {
            mean.iter_mut().zip(frames.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= (end - start) as f64);
        data.extend(mean);
        sizes.push(end - start);
        provenance.push((start..end).collect());
    }
    Ok(SizedTokenSeq {
        tokens: Tensor::matrix(count, d, data)?,
        sizes,
        provenance,
    })
}

/// Fraction of unordered clip pairs whose cosine similarity exceeds `tau`.
pub fn high_sim_ratio(raw_clips: &Tensor, tau: f64) -> Result<f64> {
    let n = raw_clips.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "high-similarity ratio needs at least 2 clips, got {n}"
        )));
    }
    let sims = cosine_matrix(raw_clips, raw_clips)?;
    let mut above = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if sims.get(i, j) > tau {
                above += 1;
            }
        }
    }
    Ok(above as f64 / (n * (n - 1) / 2) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    /// Keep every clip unless `ω > 1 - 1/K`, then take the smallest
    /// `k ∈ {2..K}` with `ω > (K-k)/K`.
    #[default]
    Literal,
    /// `min(K, floor(ω K) + 1)`: merge deeper as similarity grows.
    Monotone,
}

impl std::str::FromStr for DepthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "monotone" => Ok(Self::Monotone),
            other => Err(Error::InvalidArgument(format!(
                "unknown depth mode {other:?} (expected literal or monotone)"
            ))),
        }
    }
}

/// Picks the schedule level `k* ∈ [1, K]` for a video with ratio `omega`.
pub fn select_merge_depth(omega: f64, levels: usize, mode: DepthMode) -> Result<usize> {
    if levels == 0 {
        return Err(Error::InvalidArgument("schedule has no levels".into()));
    }
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidArgument(format!("omega {omega} outside [0, 1]")));
    }
    let k = levels as f64;
    Ok(match mode {
        DepthMode::Literal => {
            if omega <= 1.0 - 1.0 / k {
                1
            } else {
                (2..=levels).find(|&level| omega > (k - level as f64) / k).unwrap_or(1)
            }
        }
        DepthMode::Monotone => levels.min((omega * k).floor() as usize + 1),
    })
}

/// One round of bipartite soft matching: tokens at even indices form set A,
/// odd indices form set B; every A token proposes its most similar B token
/// and the `r` strongest proposals are merged into their targets.
pub fn bipartite_merge(seq: &SizedTokenSeq, r: usize) -> Result<SizedTokenSeq> {
    let len = seq.len();
    if r >= len {
        return Err(Error::InvalidArgument(format!(
            "merge count {r} must be below the sequence length {len}"
        )));
    }
    if r == 0 {
        return Ok(seq.clone());
    }
    let a_idx: Vec<usize> = (0..len).step_by(2).collect();
    let b_idx: Vec<usize> = (1..len).step_by(2).collect();
    if r > a_idx.len() || b_idx.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cannot merge {r} of {} source tokens",
            a_idx.len()
        )));
    }

    let a_tok = seq.tokens.select_rows(&a_idx);
    let b_tok = seq.tokens.select_rows(&b_idx);
    let sims = cosine_matrix(&a_tok, &b_tok)?;
    let mut best = Vec::with_capacity(a_idx.len());
    let mut best_sim = Vec::with_capacity(a_idx.len());
    for i in 0..a_idx.len() {
        let mut arg = 0;
        for j in 1..b_idx.len() {
            if sims.get(i, j) > sims.get(i, arg) {
                arg = j;
            }
        }
        best.push(arg);
        best_sim.push(sims.get(i, arg));
    }

    let mut merged_into: Vec<Option<usize>> = vec![None; a_idx.len()];
    for &i in rank_desc(&best_sim).iter().take(r) {
        merged_into[i] = Some(best[i]);
    }

    // Accumulate size-weighted sums on the B side.
    let d = seq.tokens.cols();
    let mut b_sum: Vec<Vec<f64>> = b_idx
        .iter()
        .map(|&b| seq.tokens.row(b).iter().map(|v| v * seq.sizes[b] as f64).collect())
        .collect();
    let mut b_size: Vec<usize> = b_idx.iter().map(|&b| seq.sizes[b]).collect();
    let mut b_prov: Vec<Vec<usize>> = b_idx.iter().map(|&b| seq.provenance[b].clone()).collect();
    for (i, target) in merged_into.iter().enumerate() {
        if let Some(j) = *target {
            let a = a_idx[i];
            let w = seq.sizes[a] as f64;
            b_sum[j]
                .iter_mut()
                .zip(seq.tokens.row(a))
                .for_each(|(s, v)| *s += w * v);
            b_size[j] += seq.sizes[a];
            b_prov[j].extend_from_slice(&seq.provenance[a]);
        }
    }

    let mut data = Vec::with_capacity((len - r) * d);
    let mut sizes = Vec::with_capacity(len - r);
    let mut provenance = Vec::with_capacity(len - r);
    for pos in 0..len {
        if pos % 2 == 0 {
            let i = pos / 2;
            if merged_into[i].is_none() {
                data.extend_from_slice(seq.tokens.row(pos));
                sizes.push(seq.sizes[pos]);
                provenance.push(seq.provenance[pos].clone());
            }
        } else {
            let j = pos / 2;
            let s = b_size[j] as f64;
            data.extend(b_sum[j].iter().map(|v| v / s));
            sizes.push(b_size[j]);
            let mut p = std::mem::take(&mut b_prov[j]);
            p.sort_unstable();
            provenance.push(p);
        }
    }
    Ok(SizedTokenSeq {
        tokens: Tensor::matrix(sizes.len(), d, data)?,
        sizes,
        provenance,
    })
}

/// Result of the per-video adaptive clip construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveClipResult {
    /// Merged clips; provenance lists original frame indices.
    pub clips: SizedTokenSeq,
    /// For each merged clip, the indices of the input clips it absorbed.
    pub clip_groups: Vec<Vec<usize>>,
    pub omega: f64,
    pub depth: usize,
    /// Frame index → merged clip index.
    pub frame_to_clip: Vec<usize>,
    /// Frame indices owned by each merged clip.
    pub frame_sets: Vec<Vec<usize>>,
}

impl AdaptiveClipResult {
    pub fn frame_set_sizes(&self) -> Vec<usize> {
        self.frame_sets.iter().map(Vec::len).collect()
    }

    /// Row-stochastic `[L* × L]` matrix mapping input clips to merged clips
    /// by size-weighted averaging.
    pub fn merge_matrix(&self, input_sizes: &[usize]) -> Tensor {
        let cols = input_sizes.len();
        let rows = self.clip_groups.len();
        let mut data = vec![0.0; rows * cols];
        for (r, group) in self.clip_groups.iter().enumerate() {
            let total: usize = group.iter().map(|&c| input_sizes[c]).sum();
            for &c in group {
                data[r * cols + c] = input_sizes[c] as f64 / total as f64;
            }
        }
        Tensor::from_parts(vec![rows, cols], data)
    }
}

/// Estimates how many distinct contexts a video holds and merges its
/// encoded clips accordingly.
///
/// `encoded` carries the encoded clip tokens with the sizes and frame
/// provenance of the clip construction; `raw_clips` are the frozen
/// pre-encoder clip features used for the similarity ratio.
pub fn adaptive_clips(
    encoded: &SizedTokenSeq,
    raw_clips: &Tensor,
    schedule: &ClipSchedule,
    tau: f64,
    mode: DepthMode,
) -> Result<AdaptiveClipResult> {
    let l0 = schedule.levels[0];
    if encoded.len() != l0 || raw_clips.rows() != l0 {
        return Err(Error::InvalidArgument(format!(
            "expected {l0} clips, got {} encoded and {} raw",
            encoded.len(),
            raw_clips.rows()
        )));
    }
    let frame_owner = encoded.owner_map()?;
    let omega = high_sim_ratio(raw_clips, tau)?;
    let depth = select_merge_depth(omega, schedule.depth(), mode)?;

    // Track input-clip indices as provenance while merging.
    let mut work = SizedTokenSeq {
        tokens: encoded.tokens.clone(),
        sizes: encoded.sizes.clone(),
        provenance: (0..l0).map(|i| vec![i]).collect(),
    };
    for step in 0..depth - 1 {
        let r = schedule.levels[step] - schedule.levels[step + 1];
        work = bipartite_merge(&work, r)?;
    }

    let mut clip_of_input = vec![usize::MAX; l0];
    for (m, group) in work.provenance.iter().enumerate() {
        for &c in group {
            clip_of_input[c] = m;
        }
    }
    if clip_of_input.contains(&usize::MAX) {
        return Err(Error::Internal(
            "merged clip groups do not cover every input clip".into(),
        ));
    }
    let frame_to_clip: Vec<usize> = frame_owner.iter().map(|&c| clip_of_input[c]).collect();
    let mut frame_sets = vec![Vec::new(); work.len()];
    for (f, &c) in frame_to_clip.iter().enumerate() {
        frame_sets[c].push(f);
    }
    if frame_sets.iter().any(Vec::is_empty) {
        return Err(Error::Internal("a merged clip owns no frames".into()));
    }

    let clips = SizedTokenSeq {
        tokens: work.tokens,
        sizes: frame_sets.iter().map(Vec::len).collect(),
        provenance: frame_sets.clone(),
    };
    Ok(AdaptiveClipResult {
        clips,
        clip_groups: work.provenance,
        omega,
        depth,
        frame_to_clip,
        frame_sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(clip_schedule(32, 75.0, 5).unwrap().levels, vec![32, 20, 12, 8, 6, 5]);
        assert_eq!(clip_schedule(5, 75.0, 5).unwrap().levels, vec![5]);
        assert_eq!(clip_schedule(8, 75.0, 5).unwrap().levels, vec![8, 6, 5]);
        assert!(clip_schedule(4, 75.0, 5).is_err());
        assert!(clip_schedule(32, 0.0, 5).is_err());
    }

    #[test]
    fn op_tome_lengths_on_128_frames() {
        let frames = Tensor::from_rows(
            &(0..128)
                .map(|i| vec![1.0 + (i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 0.5])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let out = op_tome(&frames, 75.0, 32).unwrap();
        assert_eq!(out.lengths, vec![128, 80, 50, 32]);
        assert_eq!(out.iterations(), 3);
        assert_eq!(out.clips.total_size(), 128);
    }

    #[test]
    fn op_tome_identical_frames() {
        let frames = Tensor::from_rows(&vec![vec![0.25, -1.0, 2.0]; 128]).unwrap();
        let out = op_tome(&frames, 75.0, 32).unwrap();
        for r in out.clips.tokens.row_iter() {
            assert_eq!(r, &[0.25, -1.0, 2.0]);
        }
        assert_eq!(out.clips.total_size(), 128);
    }

    #[test]
    fn op_tome_target_above_length_is_an_error() {
        let frames = Tensor::from_rows(&vec![vec![1.0]; 10]).unwrap();
        assert!(op_tome(&frames, 75.0, 11).is_err());
    }

    #[test]
    fn odd_length_carries_last_token() {
        let frames = rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let out = op_tome(&frames, 100.0, 2).unwrap();
        assert_eq!(out.clips.provenance, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn high_sim_ratio_examples() {
        // unit vectors with pairwise cosines 0.9 (0,1), 0.5 (0,2), 0.8 (1,2)
        let a = [1.0, 0.0, 0.0];
        let b = [0.9, (1.0f64 - 0.81).sqrt(), 0.0];
        let c2 = (0.8 - 0.9 * 0.5) / b[1];
        let c = [0.5, c2, (1.0 - 0.25 - c2 * c2).sqrt()];
        let clips = rows(&[&a, &b, &c]);
        let omega = high_sim_ratio(&clips, 0.7).unwrap();
        assert!((omega - 2.0 / 3.0).abs() < 1e-12);

        let same = rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(high_sim_ratio(&same, 0.7).unwrap(), 1.0);
        let ortho = Tensor::identity(4);
        assert_eq!(high_sim_ratio(&ortho, 0.5).unwrap(), 0.0);
        assert!(high_sim_ratio(&rows(&[&[1.0]]), 0.5).is_err());
    }

    #[test]
    fn merge_depth_examples() {
        assert_eq!(select_merge_depth(0.5, 6, DepthMode::Literal).unwrap(), 1);
        assert_eq!(select_merge_depth(0.9, 6, DepthMode::Literal).unwrap(), 2);
        assert_eq!(select_merge_depth(1.0 - 1.0 / 6.0, 6, DepthMode::Literal).unwrap(), 1);
        assert_eq!(select_merge_depth(1.0, 1, DepthMode::Literal).unwrap(), 1);
        assert_eq!(select_merge_depth(1.0, 6, DepthMode::Monotone).unwrap(), 6);
        assert_eq!(select_merge_depth(0.0, 6, DepthMode::Monotone).unwrap(), 1);
        assert!(select_merge_depth(0.5, 0, DepthMode::Literal).is_err());
    }

    #[test]
    fn bipartite_single_edge() {
        let seq = SizedTokenSeq::unit(rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]));
        let out = bipartite_merge(&seq, 1).unwrap();
        assert_eq!(out.tokens.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(out.sizes, vec![2, 1]);
        assert_eq!(out.provenance, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn bipartite_rejects_oversized_r() {
        let seq = SizedTokenSeq::unit(Tensor::identity(3));
        assert!(bipartite_merge(&seq, 3).is_err());
    }

    #[test]
    fn bipartite_follows_schedule_lengths() {
        let sched = clip_schedule(32, 75.0, 5).unwrap();
        let tokens = Tensor::from_rows(
            &(0..32)
                .map(|i| vec![(i as f64).sin() + 1.5, (i as f64 * 0.3).cos(), 0.2])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut seq = SizedTokenSeq::unit(tokens);
        for w in sched.levels.windows(2) {
            seq = bipartite_merge(&seq, w[0] - w[1]).unwrap();
            assert_eq!(seq.len(), w[1]);
            assert_eq!(seq.total_size(), 32);
        }
    }

    #[test]
    fn adaptive_zero_merges_keeps_clips() {
        let frames = Tensor::identity(8);
        let clips = op_tome(&frames, 75.0, 8).unwrap().clips;
        let sched = clip_schedule(8, 75.0, 5).unwrap();
        let res = adaptive_clips(&clips, &clips.tokens, &sched, 0.7, DepthMode::Literal).unwrap();
        assert_eq!(res.depth, 1);
        assert_eq!(res.clips.tokens, clips.tokens);
        assert_eq!(res.frame_to_clip, clips.owner_map().unwrap());
    }

    #[test]
    fn adaptive_high_similarity_merges_one_round() {
        let frames =
            Tensor::from_rows(&(0..64).map(|i| vec![1.0, 0.01 * (i as f64).sin()]).collect::<Vec<_>>()).unwrap();
        let clips = op_tome(&frames, 75.0, 32).unwrap().clips;
        let sched = clip_schedule(32, 75.0, 5).unwrap();
        let res = adaptive_clips(&clips, &clips.tokens, &sched, 0.7, DepthMode::Literal).unwrap();
        assert_eq!(res.depth, 2);
        assert_eq!(res.clips.len(), 20);
        assert_eq!(res.frame_set_sizes().iter().sum::<usize>(), 64);
        for (f, &c) in res.frame_to_clip.iter().enumerate() {
            assert!(res.frame_sets[c].contains(&f));
        }
    }

    #[test]
    fn merge_matrix_reproduces_weighted_means() {
        let frames = Tensor::from_rows(
            &(0..64)
                .map(|i| vec![1.0, 0.01 * (i as f64).sin(), 0.3])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let clips = op_tome(&frames, 75.0, 32).unwrap().clips;
        let sched = clip_schedule(32, 75.0, 5).unwrap();
        let res = adaptive_clips(&clips, &clips.tokens, &sched, 0.5, DepthMode::Monotone).unwrap();
        let w = res.merge_matrix(&clips.sizes);
        for (r, row) in res.clips.tokens.row_iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                let v: f64 = (0..32).map(|k| w.get(r, k) * clips.tokens.get(k, c)).sum();
                assert!((v - x).abs() < 1e-12);
            }
        }
    }
}
