//! Late-fusion retrieval over encoded frame and clip tokens, ranking with
//! deterministic tie-breaking, and recall metrics.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::container::{read_sections, round_f32, write_sections, Dtype, Section};
use crate::data::Dataset;
use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::model::{encode_queries, encode_videos, PreparedVideo};
use crate::numeric::{dot, normalize_rows, Tensor};

pub const DEFAULT_QS: [usize; 4] = [1, 5, 10, 100];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionWeights {
    pub frame: f64,
    pub clip: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { frame: 0.6, clip: 0.4 }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        if self.frame < 0.0 || self.clip < 0.0 || ((self.frame + self.clip) - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "fusion weights must be non-negative and sum to 1 (got {} + {})",
                self.frame, self.clip
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub video_id: String,
    /// Unit-norm frame tokens `[L_f × d]`.
    pub frames: Tensor,
    /// Unit-norm clip tokens `[L_c × d]`.
    pub clips: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub entries: Vec<IndexEntry>,
    pub weights: FusionWeights,
}

/// Unit-normalizes rows and stores them at feature precision so a
/// persisted index reloads bit-exactly.
fn storage_form(t: &Tensor) -> Result<Tensor> {
    Ok(normalize_rows(t)?.map(round_f32))
}

pub fn build_index(params: &EncoderParams, videos: &[PreparedVideo], weights: FusionWeights) -> Result<RetrievalIndex> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument("cannot index an empty video set".into()));
    }
    weights.validate()?;
    let encoded = encode_videos(params, videos)?;
    let entries = videos
        .iter()
        .zip(encoded)
        .map(|(v, (f, c))| {
            Ok(IndexEntry {
                video_id: v.id.clone(),
                frames: storage_form(&f)?,
                clips: storage_form(&c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalIndex { entries, weights })
}

const FUSION_SECTION: &str = "meta.fusion";

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The first `n` videos under the same weights.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            entries: self.entries[..n.min(self.entries.len())].to_vec(),
            weights: self.weights,
        }
    }

    pub fn to_sections(&self) -> Vec<Section> {
        let mut out = vec![Section {
            name: FUSION_SECTION.into(),
            dtype: Dtype::F64,
            tensor: Tensor::vector(vec![self.weights.frame, self.weights.clip])
                .reshape(vec![1, 2])
                .expect("two weights"),
        }];
        for e in &self.entries {
            out.push(Section {
                name: format!("frames:{}", e.video_id),
                dtype: Dtype::F32,
                tensor: e.frames.clone(),
            });
            out.push(Section {
                name: format!("clips:{}", e.video_id),
                dtype: Dtype::F32,
                tensor: e.clips.clone(),
            });
        }
        out
    }

    pub fn from_sections(sections: &[Section]) -> Result<Self> {
        let (head, rest) = sections
            .split_first()
            .filter(|(h, _)| h.name == FUSION_SECTION && h.tensor.numel() == 2)
            .ok_or_else(|| Error::Validation(format!("index must start with a {FUSION_SECTION} section")))?;
        let weights = FusionWeights {
            frame: head.tensor.data()[0],
            clip: head.tensor.data()[1],
        };
        weights.validate()?;
        if rest.len() % 2 != 0 {
            return Err(Error::Validation("index sections must come in frame/clip pairs".into()));
        }
        let mut entries = Vec::with_capacity(rest.len() / 2);
        for pair in rest.chunks(2) {
            let id = pair[0]
                .name
                .strip_prefix("frames:")
                .ok_or_else(|| Error::Validation(format!("unexpected section {}", pair[0].name)))?;
            if pair[1].name != format!("clips:{id}") {
                return Err(Error::Validation(format!(
                    "frames of {id} are not followed by its clips"
                )));
            }
            entries.push(IndexEntry {
                video_id: id.to_string(),
                frames: pair[0].tensor.clone(),
                clips: pair[1].tensor.clone(),
            });
        }
        Ok(Self { entries, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_sections(path, &self.to_sections())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_sections(&read_sections(path)?)
    }
}

fn max_dot(query: &[f64], tokens: &Tensor) -> f64 {
    tokens
        .row_iter()
        .map(|r| dot(query, r))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Fused score of a unit-norm query against one entry.
pub fn score(query: &[f64], entry: &IndexEntry, weights: FusionWeights) -> f64 {
    let f = if weights.frame == 0.0 {
        0.0
    } else {
        weights.frame * max_dot(query, &entry.frames)
    };
    let c = if weights.clip == 0.0 {
        0.0
    } else {
        weights.clip * max_dot(query, &entry.clips)
    };
    f + c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub video_ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl Ranking {
    /// 1-based rank of `video_id`.
    pub fn rank_of(&self, video_id: &str) -> Option<usize> {
        self.video_ids.iter().position(|v| v == video_id).map(|p| p + 1)
    }
}

/// Orders `(id, score)` pairs by descending score, ties by id.
pub fn order_scores(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
}

pub fn rank(query_id: &str, query: &[f64], index: &RetrievalIndex) -> Result<Ranking> {
    let n = crate::numeric::l2_norm(query);
    if n == 0.0 {
        return Err(Error::ZeroNorm("rank"));
    }
    let q: Vec<f64> = query.iter().map(|v| v / n).collect();
    let mut scored: Vec<(String, f64)> = index
        .entries
        .iter()
        .map(|e| (e.video_id.clone(), score(&q, e, index.weights)))
        .collect();
    order_scores(&mut scored);
    let (video_ids, scores) = scored.into_iter().unzip();
    Ok(Ranking {
        query_id: query_id.to_string(),
        video_ids,
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub q: usize,
    pub value: f64,
    /// `Q` exceeded the index size, so the value is 100 by definition.
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recalls: Vec<RecallAt>,
    pub sum_r: f64,
    pub n_queries: usize,
}

impl RecallReport {
    pub fn get(&self, q: usize) -> Option<f64> {
        self.recalls.iter().find(|r| r.q == q).map(|r| r.value)
    }

    /// `Q,R@Q` rows plus a final `SumR` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,saturated\n");
        for r in &self.recalls {
            out.push_str(&format!("R@{},{:.4},{}\n", r.q, r.value, r.saturated));
        }
        out.push_str(&format!("SumR,{:.4},false\n", self.sum_r));
        out
    }
}

/// Recall from 1-based ground-truth ranks.
pub fn recall_at(gt_ranks: &[usize], index_size: usize, qs: &[usize]) -> Result<RecallReport> {
    if gt_ranks.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    if let Some(&bad) = gt_ranks.iter().find(|&&r| r == 0 || r > index_size) {
        return Err(Error::InvalidArgument(format!("rank {bad} outside 1..={index_size}")));
    }
    let n = gt_ranks.len() as f64;
    let recalls: Vec<RecallAt> = qs
        .iter()
        .map(|&q| {
            let hits = gt_ranks.iter().filter(|&&r| r <= q).count() as f64;
            RecallAt {
                q,
                value: 100.0 * hits / n,
                saturated: q > index_size,
            }
        })
        .collect();
    let sum_r = recalls.iter().map(|r| r.value).sum();
    Ok(RecallReport {
        recalls,
        sum_r,
        n_queries: gt_ranks.len(),
    })
}

/// Ranks every query and returns the rankings with their ground-truth ranks.
pub fn rank_all(query_ids: &[String], embeddings: &Tensor, index: &RetrievalIndex) -> Result<Vec<Ranking>> {
    (0..embeddings.rows())
        .into_par_iter()
        .map(|i| rank(&query_ids[i], embeddings.row(i), index))
        .collect()
}

/// Full evaluation output for a dataset split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: RecallReport,
    /// 1-based rank of each query's paired video.
    pub gt_ranks: Vec<usize>,
    pub query_embeddings: Tensor,
    pub index: RetrievalIndex,
}

pub fn evaluate(
    params: &EncoderParams,
    dataset: &Dataset,
    videos: &[PreparedVideo],
    weights: FusionWeights,
    qs: &[usize],
) -> Result<Evaluation> {
    let index = build_index(params, videos, weights)?;
    let emb = encode_queries(params, dataset)?;
    let ids: Vec<String> = dataset.queries.iter().map(|q| q.id.clone()).collect();
    let rankings = rank_all(&ids, &emb, &index)?;
    let gt_ranks = rankings
        .iter()
        .zip(&dataset.queries)
        .map(|(r, q)| {
            r.rank_of(&q.video_id)
                .ok_or_else(|| Error::Validation(format!("video {} of query {} is not indexed", q.video_id, q.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = recall_at(&gt_ranks, index.len(), qs)?;
    Ok(Evaluation {
        report,
        gt_ranks,
        query_embeddings: emb,
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, frames: &[Vec<f64>], clips: &[Vec<f64>]) -> IndexEntry {
        IndexEntry {
            video_id: id.into(),
            frames: normalize_rows(&Tensor::from_rows(frames).unwrap()).unwrap(),
            clips: normalize_rows(&Tensor::from_rows(clips).unwrap()).unwrap(),
        }
    }

    #[test]
    fn fused_score_examples() {
        let s3 = 3f64.sqrt() / 2.0;
        let e = entry("v", &[vec![0.5, s3], vec![-1.0, 0.0]], &[vec![1.0, 0.0]]);
        let q = [1.0, 0.0];
        let s = score(&q, &e, FusionWeights::default());
        assert!((s - 0.7).abs() < 1e-12);
        let frame_only = FusionWeights { frame: 1.0, clip: 0.0 };
        assert!((score(&q, &e, frame_only) - 0.5).abs() < 1e-12);
        let hit = entry("w", &[vec![1.0, 0.0]], &[vec![1.0, 0.0]]);
        assert!((score(&q, &hit, FusionWeights::default()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_hand_case() {
        let r = recall_at(&[1, 3, 12], 200, &DEFAULT_QS).unwrap();
        let v: Vec<f64> = r.recalls.iter().map(|x| x.value).collect();
        let expect = [100.0 / 3.0, 200.0 / 3.0, 200.0 / 3.0, 100.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((r.sum_r - 266.666_666_666_666_7).abs() < 1e-9);
        let all = recall_at(&[1, 1], 10, &DEFAULT_QS).unwrap();
        assert_eq!(all.sum_r, 400.0);
        assert!(all.recalls[3].saturated && !all.recalls[2].saturated);
        assert_eq!(recall_at(&[200], 200, &DEFAULT_QS).unwrap().sum_r, 0.0);
    }

    #[test]
    fn ties_break_by_id() {
        let a = entry("b", &[vec![1.0, 0.0]], &[vec![1.0, 0.0]]);
        let b = entry("a", &[vec![1.0, 0.0]], &[vec![1.0, 0.0]]);
        let index = RetrievalIndex {
            entries: vec![a, b],
            weights: FusionWeights::default(),
        };
        let r = rank("q", &[2.0, 0.0], &index).unwrap();
        assert_eq!(r.video_ids, vec!["a", "b"]);
        assert_eq!(r.rank_of("b"), Some(2));
    }

    #[test]
    fn sections_roundtrip() {
        let index = RetrievalIndex {
            entries: vec![entry("x", &[vec![1.0, 2.0]], &[vec![0.5, 0.5]])],
            weights: FusionWeights::default(),
        };
        let index = RetrievalIndex {
            entries: index
                .entries
                .iter()
                .map(|e| IndexEntry {
                    video_id: e.video_id.clone(),
                    frames: storage_form(&e.frames).unwrap(),
                    clips: storage_form(&e.clips).unwrap(),
                })
                .collect(),
            ..index
        };
        assert_eq!(RetrievalIndex::from_sections(&index.to_sections()).unwrap(), index);
    }
}
