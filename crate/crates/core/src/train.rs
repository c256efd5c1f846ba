//! Adam training loop over the full objective, with per-epoch evaluation,
//! best-by-SumR checkpointing and divergence detection.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{collapse_metrics, CollapseReport};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::encoders::{EncoderParams, InputDims};
use crate::error::{Error, Result};
use crate::model::{forward, prepare_videos, Batch, PreparedVideo};
use crate::numeric::{Graph, Tensor};
use crate::objectives::LossBreakdown;
use crate::retrieval::{evaluate, RecallReport};
use crate::rng;

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &EncoderParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Internal(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub eval: Option<RecallReport>,
    /// Collapse metrics of the eval-set query embeddings.
    pub text_collapse: Option<CollapseReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best epoch by eval SumR, or the last epoch when
    /// no eval set was given.
    pub best: EncoderParams,
    pub last: EncoderParams,
    pub best_epoch: usize,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_log(&self) -> &EpochLog {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Encoder input sizes covering every dataset that will be encoded.
pub fn input_dims(cfg: &RunConfig, datasets: &[&Dataset]) -> Result<InputDims> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no dataset to size the encoder".into()))?;
    for d in datasets {
        if d.d_v() != first.d_v() || d.d_q() != first.d_q() {
            return Err(Error::DimMismatch(format!(
                "datasets disagree on feature dims ({}/{} vs {}/{})",
                d.d_v(),
                d.d_q(),
                first.d_v(),
                first.d_q()
            )));
        }
    }
    Ok(InputDims {
        d_q: first.d_q(),
        d_v: first.d_v(),
        max_words: datasets.iter().map(|d| d.max_words()).max().unwrap_or(0),
        max_frames: datasets.iter().map(|d| d.max_frames()).max().unwrap_or(0),
        max_clips: cfg.merge.clip_target,
    })
}

/// Query batches of one epoch in a seed-determined order.
pub fn epoch_batches(
    n_queries: usize,
    batch_size: usize,
    full_batch: bool,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_queries).collect();
    order.shuffle(&mut rng::derived(seed, 0xBA7C ^ ((epoch as u64) << 16)));
    let size = if full_batch { n_queries.max(1) } else { batch_size };
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn divergence(err: Error, step: usize, last_finite: Option<usize>) -> Error {
    match err {
        Error::NonFinite(_) => Error::Diverged { step, last_finite },
        other => other,
    }
}

fn eval_epoch(params: &EncoderParams, cfg: &RunConfig, eval: &Dataset, videos: &[PreparedVideo]) -> Result<EpochEval> {
    let ev = evaluate(params, eval, videos, cfg.retrieval.fusion, &cfg.retrieval.qs)?;
    let owners = eval.query_video_indices()?;
    let collapse = collapse_metrics(&ev.query_embeddings, &owners).ok();
    Ok(EpochEval {
        report: ev.report,
        collapse,
    })
}

struct EpochEval {
    report: RecallReport,
    collapse: Option<CollapseReport>,
}

/// Trains from a seeded initialization. `eval` drives best-checkpoint
/// selection; without it the last epoch is kept.
pub fn train(cfg: &RunConfig, train_set: &Dataset, eval: Option<&Dataset>) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_set.validate()?;
    if train_set.queries.is_empty() {
        return Err(Error::InvalidArgument("training set has no queries".into()));
    }
    if cfg.train.epochs == 0 {
        return Err(Error::InvalidArgument("train.epochs must be at least 1".into()));
    }
    let mut sets = vec![train_set];
    if let Some(e) = eval {
        e.validate()?;
        sets.push(e);
    }
    let dims = input_dims(cfg, &sets)?;
    let mut params = EncoderParams::init(&cfg.encoder, dims, cfg.seed)?;
    let t = &cfg.train;
    let mut adam = Adam::new(&params, t.learning_rate, t.beta1, t.beta2, t.adam_eps);

    let videos = prepare_videos(train_set, &cfg.merge)?;
    let eval_videos = match eval {
        Some(e) => Some(prepare_videos(e, &cfg.merge)?),
        None => None,
    };
    let query_video = train_set.query_video_indices()?;

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut last_finite = None;
    let mut step = 0;
    for epoch in 1..=t.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(train_set.queries.len(), t.batch_size, t.full_batch, cfg.seed, epoch);
        let n_batches = batches.len();
        for queries in batches {
            let batch = Batch::new(queries, &query_video);
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let step_seed = cfg.seed ^ (step as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
            let fwd = forward(
                &mut g, &bound, train_set, &videos, &batch, &cfg.merge, &cfg.loss, step_seed,
            )
            .map_err(|e| divergence(e, step, last_finite))?;
            let grads = g
                .backward(fwd.loss.total)
                .map_err(|e| divergence(e, step, last_finite))?;
            let grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.get(v)).collect();
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { step, last_finite });
            }
            let loss = fwd.loss.breakdown(&g);
            drop(bound);
            adam.step(&mut params, &grads)?;
            log::debug!("epoch {epoch} step {step} total {:.6}", loss.total);
            sum += loss.total;
            steps.push(StepLog { step, epoch, loss });
            last_finite = Some(step);
            step += 1;
        }

        let mut log_row = EpochLog {
            epoch,
            mean_total: sum / n_batches as f64,
            eval: None,
            text_collapse: None,
        };
        if let (Some(e), Some(ev_videos)) = (eval, &eval_videos) {
            if epoch % t.eval_every == 0 || epoch == t.epochs {
                let res = eval_epoch(&params, cfg, e, ev_videos)?;
                let sum_r = res.report.sum_r;
                log::info!(
                    "epoch {epoch}: mean loss {:.5}, eval SumR {sum_r:.2}",
                    log_row.mean_total
                );
                if best.as_ref().is_none_or(|(b, _, _)| sum_r > *b) {
                    best = Some((sum_r, epoch, params.clone()));
                }
                log_row.eval = Some(res.report);
                log_row.text_collapse = res.collapse;
            }
        } else {
            log::info!("epoch {epoch}: mean loss {:.5}", log_row.mean_total);
        }
        epochs.push(log_row);
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (t.epochs, params.clone()),
    };
    Ok(TrainOutcome {
        best: best_params,
        last: params,
        best_epoch,
        steps,
        epochs,
    })
}

pub fn loss_csv(steps: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,base,tcpl_e,tcpl_a,cbva,total\n");
    for s in steps {
        let l = &s.loss;
        out.push_str(&format!(
            "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}\n",
            s.step, s.epoch, l.base, l.tcpl_e, l.tcpl_a, l.cbva, l.total
        ));
    }
    out
}

pub fn epoch_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_total,sumr,text_diff_norm\n");
    for e in epochs {
        let sumr = e.eval.as_ref().map_or("NA".into(), |r| format!("{:.4}", r.sum_r));
        let dn = e.text_collapse.map_or("NA".into(), |c| format!("{:.6}", c.diff_norm));
        out.push_str(&format!("{},{:.10e},{},{}\n", e.epoch, e.mean_total, sumr, dn));
    }
    out
}

/// Echo of the configuration and outcome, written as `run.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub lambda_e: f64,
    pub lambda_a: f64,
    pub lambda_cbva: f64,
    pub best_epoch: usize,
    pub best_sum_r: Option<f64>,
    pub steps: usize,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub epoch_csv: PathBuf,
    pub manifest: PathBuf,
}

pub fn write_run(out: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<RunArtifacts> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let a = RunArtifacts {
        checkpoint: out.join("checkpoint.prvf"),
        last_checkpoint: out.join("last.prvf"),
        loss_csv: out.join("loss.csv"),
        epoch_csv: out.join("epochs.csv"),
        manifest: out.join("run.json"),
    };
    outcome.best.save(&a.checkpoint)?;
    outcome.last.save(&a.last_checkpoint)?;
    fs::write(&a.loss_csv, loss_csv(&outcome.steps)).map_err(|e| Error::io(&a.loss_csv, e))?;
    fs::write(&a.epoch_csv, epoch_csv(&outcome.epochs)).map_err(|e| Error::io(&a.epoch_csv, e))?;
    let manifest = RunManifest {
        seed: cfg.seed,
        lambda_e: cfg.loss.lambda_e,
        lambda_a: cfg.loss.lambda_a,
        lambda_cbva: cfg.loss.lambda_cbva,
        best_epoch: outcome.best_epoch,
        best_sum_r: outcome.best_log().eval.as_ref().map(|r| r.sum_r),
        steps: outcome.steps.len(),
        config: cfg.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&a.manifest, text).map_err(|e| Error::io(&a.manifest, e))?;
    Ok(a)
}
