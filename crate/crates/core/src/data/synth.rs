//! Synthetic multi-event videos with known ground truth.
//!
//! Each event is a latent unit vector; videos see it through a fixed
//! isometry into the frame space and queries through another isometry into
//! the text space, so a model can learn the cross-modal map and generalize
//! to unseen videos. Events inside one video are mutually orthogonal.
//!
//! With a concept vocabulary, every event blends one shared concept with a
//! private direction, so queries in different videos can mean nearly the
//! same thing while queries within a video never do.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::container::round_f32;
use super::dataset::{Dataset, QueryRecord, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::numeric::{orthonormalize_rows, Tensor};
use crate::rng::{self, LabRng};

/// Number of events per video: a fixed count or an inclusive range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventCount {
    Fixed(usize),
    Range { min: usize, max: usize },
}

impl EventCount {
    pub fn max(&self) -> usize {
        match *self {
            EventCount::Fixed(n) => n,
            EventCount::Range { max, .. } => max,
        }
    }

    pub fn min(&self) -> usize {
        match *self {
            EventCount::Fixed(n) => n,
            EventCount::Range { min, .. } => min,
        }
    }

    fn draw(&self, rng: &mut LabRng) -> usize {
        match *self {
            EventCount::Fixed(n) => n,
            EventCount::Range { min, max } => rng.random_range(min..=max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub events_per_video: EventCount,
    pub queries_per_video: usize,
    /// Rows per query, including the start and end rows.
    pub words_per_query: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub noise_std: f64,
    /// Draws videos, events and noise.
    pub seed: u64,
    /// Draws the two isometries and the concepts; splits that share it
    /// share a geometry.
    pub basis_seed: u64,
    /// Shared concept vocabulary size; 0 makes every event independent.
    #[serde(default)]
    pub concepts: usize,
    /// Squared weight of the concept in each event latent.
    #[serde(default)]
    pub concept_weight: f64,
    #[serde(default)]
    pub split: Split,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 200,
            frames_per_video: 64,
            events_per_video: EventCount::Fixed(4),
            queries_per_video: 3,
            words_per_query: 6,
            d_v: 64,
            d_q: 64,
            noise_std: 0.05,
            seed: 7,
            basis_seed: 7,
            concepts: 16,
            concept_weight: 0.5,
            split: Split::Train,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("n_videos", self.n_videos),
            ("frames_per_video", self.frames_per_video),
            ("queries_per_video", self.queries_per_video),
            ("d_v", self.d_v),
            ("d_q", self.d_q),
        ] {
            if v < 1 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if self.words_per_query < 2 {
            problems.push("words_per_query must be at least 2".into());
        }
        if self.events_per_video.min() < 1 || self.events_per_video.min() > self.events_per_video.max() {
            problems.push("events_per_video must be at least 1 with min <= max".into());
        }
        if self.events_per_video.max() > self.frames_per_video {
            problems.push("events_per_video cannot exceed frames_per_video".into());
        }
        if self.concepts > 0 && self.events_per_video.max() > self.concepts {
            problems.push("events_per_video cannot exceed concepts".into());
        }
        if !(0.0..=1.0).contains(&self.concept_weight) {
            problems.push("concept_weight must lie in [0, 1]".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            problems.push("noise_std must be finite and non-negative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }
}

/// Per-event ground truth kept alongside the generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedEvent {
    pub video: usize,
    pub span: [usize; 2],
    /// Prototype in frame space.
    pub video_proto: Vec<f64>,
    /// Prototype in text space.
    pub text_proto: Vec<f64>,
    pub concept: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub events: Vec<PlantedEvent>,
    /// Index into `events` for every query.
    pub query_event: Vec<usize>,
}

fn gaussian_matrix(rng: &mut LabRng, rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::matrix(rows, cols, rng::gaussian_vec(rng, rows * cols, 1.0))
}

/// `basis` rows are orthonormal in the target space; maps a latent vector.
fn embed(basis: &Tensor, latent: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; basis.cols()];
    for (coef, row) in latent.iter().zip(basis.row_iter()) {
        out.iter_mut().zip(row).for_each(|(o, b)| *o += coef * b);
    }
    out
}

fn noisy(rng: &mut LabRng, base: &[f64], std: f64) -> Vec<f64> {
    base.iter().map(|&b| round_f32(b + std * rng::gaussian(rng))).collect()
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let latent_dim = cfg.d_v.min(cfg.d_q);
    let max_events = cfg.events_per_video.max();
    if cfg.concepts + max_events > latent_dim {
        return Err(Error::InvalidArgument(format!(
            "dimension {latent_dim} is too small to host {} concepts and {max_events} orthogonal event prototypes",
            cfg.concepts
        )));
    }

    let mut basis_rng = rng::seeded(cfg.basis_seed);
    let video_basis = orthonormalize_rows(&gaussian_matrix(&mut basis_rng, latent_dim, cfg.d_v)?)?;
    let text_basis = orthonormalize_rows(&gaussian_matrix(&mut basis_rng, latent_dim, cfg.d_q)?)?;
    let start_token = orthonormalize_rows(&gaussian_matrix(&mut basis_rng, 1, cfg.d_q)?)?.into_data();
    let concept_basis = orthonormalize_rows(&gaussian_matrix(&mut basis_rng, cfg.concepts, latent_dim)?)?;
    let (wc, wp) = (cfg.concept_weight.sqrt(), (1.0 - cfg.concept_weight).sqrt());
    let mut rng = rng::derived(cfg.seed, 0xDA7A);

    let mut videos = Vec::with_capacity(cfg.n_videos);
    let mut queries = Vec::with_capacity(cfg.n_videos * cfg.queries_per_video);
    let mut events = Vec::new();
    let mut query_event = Vec::new();
    let width = cfg.n_videos.to_string().len().max(4);

    for v in 0..cfg.n_videos {
        let video_id = format!("v{v:0width$}");
        let n_events = cfg.events_per_video.draw(&mut rng);
        let (latents, concepts) = if cfg.concepts == 0 {
            (
                orthonormalize_rows(&gaussian_matrix(&mut rng, n_events, latent_dim)?)?,
                vec![None; n_events],
            )
        } else {
            // private directions orthogonal to every concept and to each other
            let mut stack = concept_basis.data().to_vec();
            stack.extend(rng::gaussian_vec(&mut rng, n_events * latent_dim, 1.0));
            let full = orthonormalize_rows(&Tensor::matrix(cfg.concepts + n_events, latent_dim, stack)?)?;
            let chosen = sample(&mut rng, cfg.concepts, n_events).into_vec();
            let mut data = Vec::with_capacity(n_events * latent_dim);
            for (e, &c) in chosen.iter().enumerate() {
                let private = full.row(cfg.concepts + e);
                data.extend(concept_basis.row(c).iter().zip(private).map(|(a, b)| wc * a + wp * b));
            }
            (
                Tensor::matrix(n_events, latent_dim, data)?,
                chosen.into_iter().map(Some).collect(),
            )
        };

        // Contiguous segments: n_events - 1 distinct cut points in 1..frames.
        let mut cuts: Vec<usize> = sample(&mut rng, cfg.frames_per_video - 1, n_events - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect();
        cuts.sort_unstable();
        let mut bounds = vec![0];
        bounds.extend(cuts);
        bounds.push(cfg.frames_per_video);

        let first_event = events.len();
        let mut frames = Vec::with_capacity(cfg.frames_per_video * cfg.d_v);
        for e in 0..n_events {
            let video_proto = embed(&video_basis, latents.row(e));
            let text_proto = embed(&text_basis, latents.row(e));
            for _ in bounds[e]..bounds[e + 1] {
                frames.extend(noisy(&mut rng, &video_proto, cfg.noise_std));
            }
            events.push(PlantedEvent {
                video: v,
                span: [bounds[e], bounds[e + 1]],
                video_proto,
                text_proto,
                concept: concepts[e],
            });
        }
        videos.push(VideoRecord {
            id: video_id.clone(),
            frames: Tensor::matrix(cfg.frames_per_video, cfg.d_v, frames)?,
        });

        for j in 0..cfg.queries_per_video {
            let event_idx = first_event + j % n_events;
            let event = &events[event_idx];
            let mut words = Vec::with_capacity(cfg.words_per_query * cfg.d_q);
            words.extend(start_token.iter().map(|&x| round_f32(x)));
            for _ in 1..cfg.words_per_query - 1 {
                words.extend(noisy(&mut rng, &event.text_proto, cfg.noise_std));
            }
            let eos = noisy(&mut rng, &event.text_proto, cfg.noise_std);
            words.extend_from_slice(&eos);
            queries.push(QueryRecord {
                id: format!("{video_id}_q{j}"),
                video_id: video_id.clone(),
                words: Tensor::matrix(cfg.words_per_query, cfg.d_q, words)?,
                teacher_eos: eos,
                gt_span: Some(event.span),
            });
            query_event.push(event_idx);
        }
    }

    Ok(SyntheticData {
        dataset: Dataset {
            videos,
            queries,
            split: cfg.split,
        },
        events,
        query_event,
    })
}
