//! Glue between datasets, merging, encoders and losses: clip construction
//! per video, the per-batch forward pass, and batched inference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoders::{encode_batch, encode_clips, encode_frames, encode_text, Bound, EncoderParams};
use crate::error::{Error, Result};
use crate::merging::{
    adaptive_clips, clip_schedule, op_tome, uniform_clips, AdaptiveClipResult, ClipSchedule, DepthMode, SizedTokenSeq,
};
use crate::numeric::{Graph, Tensor};
use crate::objectives::{total_loss, AlignmentTarget, LossInputs, LossVars, LossWeights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipBuilder {
    #[default]
    OpTome,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    /// Merge rate `N` in percent, shared by both merging stages.
    pub merge_rate: f64,
    pub clip_target: usize,
    pub c_min: usize,
    pub tau: f64,
    pub adaptive: bool,
    pub mode: DepthMode,
    pub clip_builder: ClipBuilder,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            merge_rate: 75.0,
            clip_target: 32,
            c_min: 5,
            tau: 0.7,
            adaptive: true,
            mode: DepthMode::Literal,
            clip_builder: ClipBuilder::OpTome,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.merge_rate > 0.0 && self.merge_rate <= 100.0) {
            problems.push(format!("merge_rate must lie in (0, 100] (got {})", self.merge_rate));
        }
        if self.clip_target == 0 || self.c_min == 0 {
            problems.push("clip_target and c_min must be positive".into());
        }
        if !(self.tau > -1.0 && self.tau < 1.0) {
            problems.push(format!("tau must lie in (-1, 1) (got {})", self.tau));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }
}

/// A video with its frozen clip construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedVideo {
    pub id: String,
    pub frames: Tensor,
    /// Raw clip features with sizes and frame provenance.
    pub clips: SizedTokenSeq,
    /// Bipartite schedule over the clips; `None` when too few clips to merge.
    pub schedule: Option<ClipSchedule>,
}

pub fn prepare_video(id: &str, frames: &Tensor, cfg: &MergeConfig) -> Result<PreparedVideo> {
    let target = cfg.clip_target.min(frames.rows());
    let clips = match cfg.clip_builder {
        ClipBuilder::OpTome => op_tome(frames, cfg.merge_rate, target)?.clips,
        ClipBuilder::Uniform => uniform_clips(frames, target)?,
    };
    let n = clips.len();
    let schedule = if n >= cfg.c_min && n >= 2 {
        Some(clip_schedule(n, cfg.merge_rate, cfg.c_min)?)
    } else {
        None
    };
    Ok(PreparedVideo {
        id: id.to_string(),
        frames: frames.clone(),
        clips,
        schedule,
    })
}

pub fn prepare_videos(dataset: &Dataset, cfg: &MergeConfig) -> Result<Vec<PreparedVideo>> {
    cfg.validate()?;
    dataset
        .videos
        .par_iter()
        .map(|v| prepare_video(&v.id, &v.frames, cfg))
        .collect()
}

/// Queries of one step, the distinct videos they pair with, and the map
/// from each query to its position among those videos.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub queries: Vec<usize>,
    pub videos: Vec<usize>,
    pub pairing: Vec<usize>,
}

impl Batch {
    /// `query_video[q]` is the dataset video of query `q`.
    pub fn new(queries: Vec<usize>, query_video: &[usize]) -> Self {
        let mut videos: Vec<usize> = Vec::new();
        let mut pairing = Vec::with_capacity(queries.len());
        for &q in &queries {
            let v = query_video[q];
            let pos = match videos.iter().position(|&x| x == v) {
                Some(p) => p,
                None => {
                    videos.push(v);
                    videos.len() - 1
                }
            };
            pairing.push(pos);
        }
        Self {
            queries,
            videos,
            pairing,
        }
    }
}

/// Result of one forward pass on a graph.
pub struct Forward {
    pub loss: LossVars,
    pub adaptive: Vec<Option<AdaptiveClipResult>>,
}

/// Builds the full objective for `batch` on `g`.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    g: &mut Graph,
    p: &Bound,
    dataset: &Dataset,
    videos: &[PreparedVideo],
    batch: &Batch,
    merge: &MergeConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<Forward> {
    let words: Vec<&Tensor> = batch.queries.iter().map(|&q| &dataset.queries[q].words).collect();
    let teacher_rows: Vec<Vec<f64>> = batch
        .queries
        .iter()
        .map(|&q| dataset.queries[q].teacher_eos.clone())
        .collect();
    let teacher = Tensor::from_rows(&teacher_rows)?;
    let vids: Vec<&PreparedVideo> = batch.videos.iter().map(|&v| &videos[v]).collect();
    let frames: Vec<&Tensor> = vids.iter().map(|v| &v.frames).collect();
    let clips: Vec<&SizedTokenSeq> = vids.iter().map(|v| &v.clips).collect();

    let text = encode_text(g, p, &words)?;
    let v_frame = encode_frames(g, p, &frames)?;
    let v_clip = encode_clips(g, p, &clips)?;

    let mut alignment = Vec::with_capacity(vids.len());
    let mut adaptive = Vec::with_capacity(vids.len());
    for (i, video) in vids.iter().enumerate() {
        let encoded = g.slice_rows(v_clip.var, v_clip.offsets[i], v_clip.lengths[i])?;
        let owner = video.clips.owner_map()?;
        match (&video.schedule, merge.adaptive) {
            (Some(schedule), true) => {
                let seq = SizedTokenSeq {
                    tokens: g.value(encoded).clone(),
                    sizes: video.clips.sizes.clone(),
                    provenance: video.clips.provenance.clone(),
                };
                let res = adaptive_clips(&seq, &video.clips.tokens, schedule, merge.tau, merge.mode)?;
                let clips_var = if res.depth == 1 {
                    encoded
                } else {
                    let w = g.constant(res.merge_matrix(&video.clips.sizes));
                    g.matmul(w, encoded)?
                };
                alignment.push(AlignmentTarget {
                    clips: clips_var,
                    frame_to_clip: res.frame_to_clip.clone(),
                });
                adaptive.push(Some(res));
            }
            _ => {
                alignment.push(AlignmentTarget {
                    clips: encoded,
                    frame_to_clip: owner,
                });
                adaptive.push(None);
            }
        }
    }

    let inputs = LossInputs {
        t_pooled: text.pooled,
        teacher: &teacher,
        v_frame: &v_frame,
        v_clip: &v_clip,
        pairing: &batch.pairing,
        alignment: &alignment,
        seed,
    };
    let loss = total_loss(g, &inputs, weights)?;
    Ok(Forward { loss, adaptive })
}

const INFER_CHUNK: usize = 16;

/// Pooled text embeddings `T̄` for every query, `[n × d]`.
pub fn encode_queries(params: &EncoderParams, dataset: &Dataset) -> Result<Tensor> {
    let words: Vec<&Tensor> = dataset.queries.iter().map(|q| &q.words).collect();
    let chunks = words
        .par_chunks(INFER_CHUNK)
        .map(|c| encode_batch(params, c, &[], &[]).map(|e| e.t_pooled))
        .collect::<Result<Vec<Tensor>>>()?;
    let d = params.config.d_model;
    let data: Vec<f64> = chunks.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::matrix(data.len() / d.max(1), d, data)
}

/// Encoded frame and clip tokens for every video.
pub fn encode_videos(params: &EncoderParams, videos: &[PreparedVideo]) -> Result<Vec<(Tensor, Tensor)>> {
    let chunks = videos
        .par_chunks(INFER_CHUNK)
        .map(|c| {
            let frames: Vec<&Tensor> = c.iter().map(|v| &v.frames).collect();
            let clips: Vec<&SizedTokenSeq> = c.iter().map(|v| &v.clips).collect();
            let e = encode_batch(params, &[], &frames, &clips)?;
            Ok(e.v_frame.into_iter().zip(e.v_clip).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_pairing_follows_first_appearance() {
        let b = Batch::new(vec![4, 0, 1, 5], &[2, 2, 0, 0, 7, 0]);
        assert_eq!(b.videos, vec![7, 2, 0]);
        assert_eq!(b.pairing, vec![0, 1, 1, 2]);
    }

    #[test]
    fn short_videos_get_fewer_clips_and_no_schedule() {
        let frames = Tensor::from_rows(&(0..4).map(|i| vec![1.0, i as f64]).collect::<Vec<_>>()).unwrap();
        let v = prepare_video("a", &frames, &MergeConfig::default()).unwrap();
        assert_eq!(v.clips.len(), 4);
        assert!(v.schedule.is_none());
    }
}
