//! Training losses: the dual-branch retrieval loss, relational text
//! distillation (distance and angle terms), cross-branch video alignment,
//! and their weighted sum.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Stacked;
use crate::error::{Error, Result};
use crate::numeric::{l2_norm, Graph, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_e: f64,
    pub lambda_a: f64,
    pub lambda_cbva: f64,
    pub nce_temperature: f64,
    pub triplet_margin: f64,
    pub huber_delta: f64,
    /// Angle triples above this count are subsampled uniformly.
    pub triple_budget: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_e: 15.0,
            lambda_a: 30.0,
            lambda_cbva: 0.1,
            nce_temperature: 0.07,
            triplet_margin: 0.2,
            huber_delta: 1.0,
            triple_budget: 8000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("lambda_e", self.lambda_e),
            ("lambda_a", self.lambda_a),
            ("lambda_cbva", self.lambda_cbva),
            ("triplet_margin", self.triplet_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be finite and >= 0 (got {v})"));
            }
        }
        if !(self.nce_temperature > 0.0 && self.nce_temperature.is_finite()) {
            problems.push(format!("nce_temperature must be > 0 (got {})", self.nce_temperature));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            problems.push(format!("huber_delta must be > 0 (got {})", self.huber_delta));
        }
        if self.triple_budget == 0 {
            problems.push("triple_budget must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn base_only(&self) -> Self {
        Self {
            lambda_e: 0.0,
            lambda_a: 0.0,
            lambda_cbva: 0.0,
            ..self.clone()
        }
    }
}

/// `‖x − y‖ / μ`; zero when `μ` is zero.
pub fn pair_dist_e(x: &[f64], y: &[f64], mu: f64) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    l2_norm(&d) / mu
}

/// Cosine of the angle at `y`; `None` when `x` or `z` coincides with `y`.
pub fn triplet_angle_a(x: &[f64], y: &[f64], z: &[f64]) -> Option<f64> {
    let a: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
    let b: Vec<f64> = z.iter().zip(y).map(|(p, q)| p - q).collect();
    let (na, nb) = (l2_norm(&a), l2_norm(&b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>() / (na * nb);
    Some(c.clamp(-1.0, 1.0))
}

/// Mean distance over ordered pairs `i ≠ j`.
pub fn mean_pair_distance(x: &Tensor) -> f64 {
    let n = x.rows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += pair_dist_e(x.row(i), x.row(j), 1.0);
            }
        }
    }
    total / (n * (n - 1)) as f64
}

fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Triples for the angle term and the normalizer. Every triple of `B³` is
/// used while it fits the budget; otherwise `budget` triples are drawn
/// uniformly with replacement and the normalizer becomes `budget`.
fn angle_triples(n: usize, budget: usize, seed: u64) -> (Vec<(usize, usize, usize)>, usize) {
    let total = n * n * n;
    if total <= budget {
        let all = (0..total).map(|t| (t / (n * n), (t / n) % n, t % n)).collect();
        return (all, total);
    }
    let mut r = rng::derived(seed, 0x7A1E);
    let sampled = (0..budget)
        .map(|_| (r.random_range(0..n), r.random_range(0..n), r.random_range(0..n)))
        .collect();
    (sampled, budget)
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Distance and angle distillation losses `(L^E, L^A)` from a constant
/// teacher `[B × d_t]` to the student `[B × d]` var.
pub fn tcpl_loss(
    g: &mut Graph,
    teacher: &Tensor,
    student: Var,
    weights: &LossWeights,
    seed: u64,
) -> Result<(Var, Var)> {
    let n = teacher.rows();
    if g.shape(student)[0] != n {
        return Err(Error::shape("tcpl_loss", teacher.shape(), g.shape(student)));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "relational loss needs at least 2 queries, got {n}"
        )));
    }
    let delta = weights.huber_delta;

    let pairs = ordered_pairs(n);
    let mu_t = mean_pair_distance(teacher);
    let f_t: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| pair_dist_e(teacher.row(i), teacher.row(j), mu_t))
        .collect();
    if mu_t == 0.0 {
        warn!("teacher embeddings in the batch are identical; distance relations default to 0");
    }
    let dists = g.pair_distances(student, pairs.clone())?;
    let mu_s = g.mean(dists)?;
    let f_s = if g.value(mu_s).item() == 0.0 {
        warn!("student embeddings in the batch are identical; distance relations default to 0");
        g.constant(Tensor::zeros(vec![pairs.len()]))
    } else {
        g.div_scalar(dists, mu_s)?
    };
    let h = g.huber(f_s, f_t, delta)?;
    let l_e = g.mean(h)?;

    let (candidates, normalizer) = angle_triples(n, weights.triple_budget, seed);
    let sv = g.value(student).clone();
    let mut kept = Vec::new();
    let mut targets = Vec::new();
    for &(i, j, k) in &candidates {
        let ta = triplet_angle_a(teacher.row(i), teacher.row(j), teacher.row(k));
        let sa = triplet_angle_a(sv.row(i), sv.row(j), sv.row(k));
        if let (Some(ta), Some(_)) = (ta, sa) {
            kept.push((i, j, k));
            targets.push(ta);
        }
    }
    let l_a = if kept.is_empty() {
        zero(g)
    } else {
        let angles = g.triplet_angles(student, kept)?;
        let h = g.huber(angles, targets, delta)?;
        let s = g.sum(h)?;
        g.scale(s, 1.0 / normalizer as f64)?
    };
    Ok((l_e, l_a))
}

/// Base-loss sub-terms as graph vars.
#[derive(Clone, Copy, Debug)]
pub struct BaseVars {
    pub clip_nce: Var,
    pub clip_trip: Var,
    pub frame_nce: Var,
    pub frame_trip: Var,
}

/// `[B_q × B_v]` matrix of max-over-tokens cosine scores.
pub fn max_token_scores(g: &mut Graph, queries: Var, tokens: &Stacked) -> Result<Var> {
    let b_q = g.shape(queries)[0];
    let b_v = tokens.lengths.len();
    let qn = g.normalize_rows(queries)?;
    let tn = g.normalize_rows(tokens.var)?;
    let sims = g.matmul_t(qn, tn)?;
    let total = tokens.total_rows();
    let sv = g.value(sims);
    let mut idx = Vec::with_capacity(b_q * b_v);
    for q in 0..b_q {
        let row = sv.row(q);
        for v in 0..b_v {
            let r = tokens.range(v);
            let mut best = r.start;
            for t in r {
                if row[t] > row[best] {
                    best = t;
                }
            }
            idx.push(q * total + best);
        }
    }
    let flat = g.gather(sims, idx)?;
    g.reshape(flat, vec![b_q, b_v])
}

/// Symmetric InfoNCE over a score matrix; `pairing[q]` is the column of
/// query `q`'s video. Positives of a video are pooled in the numerator.
fn info_nce(g: &mut Graph, scores: Var, pairing: &[usize], temperature: f64) -> Result<Var> {
    let (b_q, b_v) = (g.shape(scores)[0], g.shape(scores)[1]);
    let logits = g.scale(scores, 1.0 / temperature)?;

    let mut pos = vec![false; b_q * b_v];
    for (q, &v) in pairing.iter().enumerate() {
        pos[q * b_v + v] = true;
    }
    let all = g.logsumexp_rows(logits, None)?;
    let own = g.logsumexp_rows(logits, Some(pos.clone()))?;
    let d = g.sub(all, own)?;
    let q2v = g.mean(d)?;

    let lt = g.transpose(logits)?;
    let mut pos_t = vec![false; b_v * b_q];
    for (q, &v) in pairing.iter().enumerate() {
        pos_t[v * b_q + q] = true;
    }
    let all_t = g.logsumexp_rows(lt, None)?;
    let own_t = g.logsumexp_rows(lt, Some(pos_t))?;
    let d_t = g.sub(all_t, own_t)?;
    let v2q = g.mean(d_t)?;

    let s = g.add(q2v, v2q)?;
    g.scale(s, 0.5)
}

/// Hinge loss with hardest in-batch negatives, averaged over the query
/// anchor and video anchor directions.
fn triplet(g: &mut Graph, scores: Var, pairing: &[usize], margin: f64) -> Result<Var> {
    let (b_q, b_v) = (g.shape(scores)[0], g.shape(scores)[1]);
    let sv = g.value(scores).clone();
    let mut pos_idx = Vec::with_capacity(b_q);
    let mut neg_q = Vec::with_capacity(b_q);
    let mut neg_v = Vec::with_capacity(b_q);
    for (q, &v) in pairing.iter().enumerate() {
        pos_idx.push(q * b_v + v);
        // query anchor: hardest other video
        let hard_v = (0..b_v)
            .filter(|&u| u != v)
            .fold(None, |best: Option<usize>, u| match best {
                Some(b) if sv.get(q, b) >= sv.get(q, u) => Some(b),
                _ => Some(u),
            })
            .expect("at least two videos");
        neg_q.push(q * b_v + hard_v);
        // video anchor: hardest query that belongs to another video
        let hard_q = (0..b_q)
            .filter(|&p| pairing[p] != v)
            .fold(None, |best: Option<usize>, p| match best {
                Some(b) if sv.get(b, v) >= sv.get(p, v) => Some(b),
                _ => Some(p),
            })
            .expect("at least two videos");
        neg_v.push(hard_q * b_v + v);
    }
    let margin_v = g.constant(Tensor::vector(vec![margin; b_q]));
    let pos = g.gather(scores, pos_idx)?;
    let mut dirs = Vec::with_capacity(2);
    for neg_idx in [neg_q, neg_v] {
        let neg = g.gather(scores, neg_idx)?;
        let gap = g.sub(neg, pos)?;
        let gap = g.add(gap, margin_v)?;
        let hinge = g.relu(gap)?;
        dirs.push(g.mean(hinge)?);
    }
    let s = g.add(dirs[0], dirs[1])?;
    g.scale(s, 0.5)
}

/// Retrieval loss over both branches. `pairing[q]` indexes the batch video
/// of query `q`.
pub fn base_loss(
    g: &mut Graph,
    t_pooled: Var,
    v_frame: &Stacked,
    v_clip: &Stacked,
    pairing: &[usize],
    weights: &LossWeights,
) -> Result<BaseVars> {
    let b_q = g.shape(t_pooled)[0];
    let b_v = v_frame.lengths.len();
    if pairing.len() != b_q {
        return Err(Error::InvalidArgument(format!(
            "{} queries but {} pairings",
            b_q,
            pairing.len()
        )));
    }
    if v_clip.lengths.len() != b_v {
        return Err(Error::InvalidArgument(
            "frame and clip branches hold different video counts".into(),
        ));
    }
    if let Some(&bad) = pairing.iter().find(|&&v| v >= b_v) {
        return Err(Error::InvalidArgument(format!(
            "pairing refers to video {bad} outside the batch"
        )));
    }
    if b_v < 2 {
        warn!("batch holds a single video; retrieval loss has no negatives and is 0");
        let z = zero(g);
        return Ok(BaseVars {
            clip_nce: z,
            clip_trip: z,
            frame_nce: z,
            frame_trip: z,
        });
    }
    let clip_scores = max_token_scores(g, t_pooled, v_clip)?;
    let frame_scores = max_token_scores(g, t_pooled, v_frame)?;
    Ok(BaseVars {
        clip_nce: info_nce(g, clip_scores, pairing, weights.nce_temperature)?,
        clip_trip: triplet(g, clip_scores, pairing, weights.triplet_margin)?,
        frame_nce: info_nce(g, frame_scores, pairing, weights.nce_temperature)?,
        frame_trip: triplet(g, frame_scores, pairing, weights.triplet_margin)?,
    })
}

/// Frame-to-clip plus clip-to-frame contrastive alignment for one video.
/// `frames` is `[L_f × d]`, `clips` is `[L_c × d]`, `frame_to_clip` maps
/// every frame to its clip.
pub fn cbva_loss(g: &mut Graph, frames: Var, clips: Var, frame_to_clip: &[usize]) -> Result<Var> {
    let l_f = g.shape(frames)[0];
    let l_c = g.shape(clips)[0];
    if frame_to_clip.len() != l_f {
        return Err(Error::InvalidArgument(format!(
            "frame map covers {} frames, video has {l_f}",
            frame_to_clip.len()
        )));
    }
    if l_c == 0 || frame_to_clip.iter().any(|&c| c >= l_c) {
        return Err(Error::InvalidArgument("frame map refers to a missing clip".into()));
    }
    let mut owned = vec![false; l_c];
    frame_to_clip.iter().for_each(|&c| owned[c] = true);
    if owned.contains(&false) {
        return Err(Error::Internal("a clip owns no frames".into()));
    }

    let fnorm = g.normalize_rows(frames)?;
    let cnorm = g.normalize_rows(clips)?;
    let sims = g.matmul_t(fnorm, cnorm)?;

    let all = g.logsumexp_rows(sims, None)?;
    let own_idx = frame_to_clip.iter().enumerate().map(|(i, &c)| i * l_c + c).collect();
    let own = g.gather(sims, own_idx)?;
    let d1 = g.sub(all, own)?;
    let term1 = g.mean(d1)?;

    let st = g.transpose(sims)?;
    let mut mask = vec![false; l_c * l_f];
    for (i, &c) in frame_to_clip.iter().enumerate() {
        mask[c * l_f + i] = true;
    }
    let all_t = g.logsumexp_rows(st, None)?;
    let own_t = g.logsumexp_rows(st, Some(mask))?;
    let d2 = g.sub(all_t, own_t)?;
    let term2 = g.mean(d2)?;
    g.add(term1, term2)
}

/// Per-video inputs for alignment: merged clip tokens and the frame map.
#[derive(Clone, Debug)]
pub struct AlignmentTarget {
    pub clips: Var,
    pub frame_to_clip: Vec<usize>,
}

/// Everything the total objective consumes.
pub struct LossInputs<'a> {
    pub t_pooled: Var,
    pub teacher: &'a Tensor,
    pub v_frame: &'a Stacked,
    pub v_clip: &'a Stacked,
    pub pairing: &'a [usize],
    /// One entry per batch video; empty disables alignment.
    pub alignment: &'a [AlignmentTarget],
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub base: BaseVars,
    pub base_total: Var,
    pub tcpl_e: Var,
    pub tcpl_a: Var,
    pub cbva: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaseTerms {
    pub clip_nce: f64,
    pub clip_trip: f64,
    pub frame_nce: f64,
    pub frame_trip: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base_terms: BaseTerms,
    pub base: f64,
    pub tcpl_e: f64,
    pub tcpl_a: f64,
    pub cbva: f64,
    pub total: f64,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).item();
        LossBreakdown {
            base_terms: BaseTerms {
                clip_nce: v(self.base.clip_nce),
                clip_trip: v(self.base.clip_trip),
                frame_nce: v(self.base.frame_nce),
                frame_trip: v(self.base.frame_trip),
            },
            base: v(self.base_total),
            tcpl_e: v(self.tcpl_e),
            tcpl_a: v(self.tcpl_a),
            cbva: v(self.cbva),
            total: v(self.total),
        }
    }
}

/// `base + λE·L^E + λA·L^A + λCBVA·L^CBVA`. Zero-weighted terms are still
/// evaluated for logging when their inputs are present.
pub fn total_loss(g: &mut Graph, inputs: &LossInputs, weights: &LossWeights) -> Result<LossVars> {
    weights.validate()?;
    let base = base_loss(
        g,
        inputs.t_pooled,
        inputs.v_frame,
        inputs.v_clip,
        inputs.pairing,
        weights,
    )?;
    let b1 = g.add(base.clip_nce, base.clip_trip)?;
    let b2 = g.add(base.frame_nce, base.frame_trip)?;
    let base_total = g.add(b1, b2)?;

    let (tcpl_e, tcpl_a) = if g.shape(inputs.t_pooled)[0] >= 2 {
        tcpl_loss(g, inputs.teacher, inputs.t_pooled, weights, inputs.seed)?
    } else {
        (zero(g), zero(g))
    };

    let cbva = if inputs.alignment.is_empty() {
        zero(g)
    } else {
        let b_v = inputs.v_frame.lengths.len();
        if inputs.alignment.len() != b_v {
            return Err(Error::InvalidArgument(format!(
                "{} alignment targets for {b_v} videos",
                inputs.alignment.len()
            )));
        }
        let mut per_video = Vec::with_capacity(b_v);
        for (v, target) in inputs.alignment.iter().enumerate() {
            let frames = g.slice_rows(inputs.v_frame.var, inputs.v_frame.offsets[v], inputs.v_frame.lengths[v])?;
            per_video.push(cbva_loss(g, frames, target.clips, &target.frame_to_clip)?);
        }
        let mut acc = per_video[0];
        for &v in &per_video[1..] {
            acc = g.add(acc, v)?;
        }
        g.scale(acc, 1.0 / b_v as f64)?
    };

    let mut total = base_total;
    for (term, lambda) in [
        (tcpl_e, weights.lambda_e),
        (tcpl_a, weights.lambda_a),
        (cbva, weights.lambda_cbva),
    ] {
        if lambda != 0.0 {
            let w = g.scale(term, lambda)?;
            total = g.add(total, w)?;
        }
    }
    Ok(LossVars {
        base,
        base_total,
        tcpl_e,
        tcpl_a,
        cbva,
        total,
    })
}
