#![allow(dead_code)]

use prvr_core::encoders::Stacked;
use prvr_core::numeric::{Graph, Tensor, Var};
use prvr_core::objectives::{total_loss, AlignmentTarget, LossInputs, LossVars, LossWeights};
use prvr_core::rng;
use prvr_core::Result;

pub const D: usize = 6;
pub const FRAMES: usize = 8;
pub const CLIPS: usize = 4;
pub const QUERIES: usize = 4;
pub const PAIRING: [usize; QUERIES] = [0, 0, 1, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    ClipNce,
    ClipTrip,
    FrameNce,
    FrameTrip,
    TcplE,
    TcplA,
    Cbva,
    Total,
}

pub const TERMS: [Term; 8] = [
    Term::ClipNce,
    Term::ClipTrip,
    Term::FrameNce,
    Term::FrameTrip,
    Term::TcplE,
    Term::TcplA,
    Term::Cbva,
    Term::Total,
];

/// Two videos of 8 frames and 4 clips, four queries, a teacher space of a
/// different width, and a constant merge of clips {0, 1} in video 0.
pub struct LossBatch {
    pub params: Vec<Tensor>,
    pub teacher: Tensor,
    pub weights: LossWeights,
}

pub fn gaussian(rows: usize, cols: usize, seed: u64, stream: u64) -> Tensor {
    let mut r = rng::derived(seed, stream);
    Tensor::matrix(rows, cols, rng::gaussian_vec(&mut r, rows * cols, 1.0)).unwrap()
}

impl LossBatch {
    pub fn new(seed: u64) -> Self {
        Self {
            params: vec![
                gaussian(QUERIES, D, seed, 1),
                gaussian(2 * FRAMES, D, seed, 2),
                gaussian(2 * CLIPS, D, seed, 3),
            ],
            teacher: gaussian(QUERIES, 10, seed, 4),
            weights: LossWeights::default(),
        }
    }

    pub fn build(&self, g: &mut Graph, vars: &[Var]) -> Result<LossVars> {
        let v_frame = Stacked::new(vec![FRAMES; 2], vars[1]);
        let v_clip = Stacked::new(vec![CLIPS; 2], vars[2]);
        let c0 = g.slice_rows(vars[2], 0, CLIPS)?;
        let w = Tensor::from_rows(&[
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])?;
        let w = g.constant(w);
        let merged = g.matmul(w, c0)?;
        let c1 = g.slice_rows(vars[2], CLIPS, CLIPS)?;
        let alignment = vec![
            AlignmentTarget {
                clips: merged,
                frame_to_clip: vec![0, 0, 0, 0, 1, 1, 2, 2],
            },
            AlignmentTarget {
                clips: c1,
                frame_to_clip: vec![0, 0, 1, 1, 2, 2, 3, 3],
            },
        ];
        let inputs = LossInputs {
            t_pooled: vars[0],
            teacher: &self.teacher,
            v_frame: &v_frame,
            v_clip: &v_clip,
            pairing: &PAIRING,
            alignment: &alignment,
            seed: 0,
        };
        total_loss(g, &inputs, &self.weights)
    }

    pub fn term(&self, g: &mut Graph, vars: &[Var], term: Term) -> Result<Var> {
        let l = self.build(g, vars)?;
        Ok(match term {
            Term::ClipNce => l.base.clip_nce,
            Term::ClipTrip => l.base.clip_trip,
            Term::FrameNce => l.base.frame_nce,
            Term::FrameTrip => l.base.frame_trip,
            Term::TcplE => l.tcpl_e,
            Term::TcplA => l.tcpl_a,
            Term::Cbva => l.cbva,
            Term::Total => l.total,
        })
    }
}

/// Random proper rotation of `R^d` as a product of Givens rotations.
pub fn random_rotation(d: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng::derived(seed, 0x707);
    let mut m = Tensor::identity(d);
    for _ in 0..3 * d {
        let i = r.random_range(0..d);
        let mut j = r.random_range(0..d - 1);
        if j >= i {
            j += 1;
        }
        let theta: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let (s, c) = theta.sin_cos();
        let mut data = m.data().to_vec();
        for col in 0..d {
            let (a, b) = (data[i * d + col], data[j * d + col]);
            data[i * d + col] = c * a - s * b;
            data[j * d + col] = s * a + c * b;
        }
        m = Tensor::matrix(d, d, data).unwrap();
    }
    m
}

/// `x · R * scale + shift` row by row.
pub fn similarity_transform(x: &Tensor, rot: &Tensor, scale: f64, shift: &[f64]) -> Tensor {
    let d = x.cols();
    let rows: Vec<Vec<f64>> = x
        .row_iter()
        .map(|row| {
            (0..d)
                .map(|c| scale * (0..d).map(|k| row[k] * rot.get(k, c)).sum::<f64>() + shift[c])
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}
