use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prvr_core::analysis::{bench, bench_csv, collapse_metrics, ranker_confusion, spearman_vs_teacher};
use prvr_core::config::RunConfig;
use prvr_core::data::{gen_synthetic, load_features, write_dataset, Dataset};
use prvr_core::encoders::EncoderParams;
use prvr_core::merging::{adaptive_clips, op_tome, DepthMode, SizedTokenSeq};
use prvr_core::model::{encode_videos, prepare_videos, PreparedVideo};
use prvr_core::retrieval::{evaluate, Evaluation, RetrievalIndex};
use prvr_core::train::{train, write_run};
use prvr_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "prvr", version, about = "Partially relevant video retrieval lab")]
struct Cli {
    /// TOML run configuration layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Adaptive depth mode.
    #[arg(long, global = true, value_parser = ["literal", "monotone"])]
    mode: Option<String>,
    /// Similarity threshold for the context estimate.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Dotted override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic train and eval splits.
    GenSynth(OutArg),
    /// Train and persist the best checkpoint, loss CSV and run manifest.
    Train(OutArg),
    /// Evaluate a checkpoint on the eval split.
    Eval(EvalArgs),
    /// Run order-preserving merging on one feature file.
    Merge(MergeArgs),
    /// Collapse, rank correlation and ranker comparison reports.
    Analyze(AnalyzeArgs),
    /// Per-query latency and peak memory across database sizes.
    Bench(BenchArgs),
    /// Re-run adaptive selection and evaluation over thresholds.
    SweepTau(SweepArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write `eval.csv` and `index.prvf` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 75.0)]
    rate: f64,
    #[arg(long, default_value_t = 32)]
    target: usize,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Second checkpoint for the ranker outcome matrix.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    q: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Saved index; built from the eval split when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "100,200,300,400,474")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Thresholds to sweep.
    #[arg(required = true, allow_negative_numbers = true)]
    taus: Vec<f64>,
    /// Evaluate this checkpoint at every threshold; without it a model is
    /// trained per threshold.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingInput(_) => 2,
        Error::Validation(_)
        | Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::DimMismatch(_)
        | Error::BadMagic(_)
        | Error::UnsupportedVersion(_)
        | Error::Truncated { .. }
        | Error::Json(_) => 1,
        _ => 3,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut o = cli.overrides.clone();
    if let Some(s) = cli.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(m) = &cli.mode {
        o.push(format!("merge.mode=\"{m}\""));
    }
    if let Some(t) = cli.tau {
        o.push(format!("merge.tau={t}"));
    }
    RunConfig::load(cli.config.as_deref(), &o)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    require(path)?;
    EncoderParams::load(path)
}

fn eval_with(cfg: &RunConfig, params: &EncoderParams, data: &Dataset, videos: &[PreparedVideo]) -> Result<Evaluation> {
    evaluate(params, data, videos, cfg.retrieval.fusion, &cfg.retrieval.qs)
}

fn gt_rank_map(data: &Dataset, ev: &Evaluation) -> BTreeMap<String, usize> {
    data.queries
        .iter()
        .map(|q| q.id.clone())
        .zip(ev.gt_ranks.iter().copied())
        .collect()
}

/// Mean high-similarity ratio and fraction of videos merged past the
/// first level at threshold `tau`.
fn adaptive_stats(params: &EncoderParams, videos: &[PreparedVideo], tau: f64, mode: DepthMode) -> Result<(f64, f64)> {
    let encoded = encode_videos(params, videos)?;
    let (mut omega, mut merged, mut n) = (0.0, 0usize, 0usize);
    for (v, (_, clips)) in videos.iter().zip(encoded) {
        let Some(schedule) = &v.schedule else { continue };
        let seq = SizedTokenSeq {
            tokens: clips,
            sizes: v.clips.sizes.clone(),
            provenance: v.clips.provenance.clone(),
        };
        let r = adaptive_clips(&seq, &v.clips.tokens, schedule, tau, mode)?;
        omega += r.omega;
        merged += usize::from(r.depth > 1);
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok((omega / n, merged as f64 / n))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenSynth(a) => {
            let train_dir = a.out.join("train");
            let eval_dir = a.out.join("eval");
            let t = write_dataset(&gen_synthetic(&cfg.data.synth)?.dataset, &train_dir)?;
            let e = write_dataset(&gen_synthetic(&cfg.eval_synth())?.dataset, &eval_dir)?;
            println!("{}\n{}", t.display(), e.display());
        }
        Command::Train(a) => {
            let train_set = cfg.load_train()?;
            let eval = cfg.load_eval()?;
            let outcome = train(&cfg, &train_set, Some(&eval))?;
            let art = write_run(&a.out, &cfg, &outcome)?;
            let best = outcome.best_log();
            println!(
                "best epoch {} sumr {:.2}; checkpoint {}; loss {}",
                outcome.best_epoch,
                best.eval.as_ref().map_or(f64::NAN, |r| r.sum_r),
                art.checkpoint.display(),
                art.loss_csv.display()
            );
        }
        Command::Eval(a) => {
            let params = load_checkpoint(&a.checkpoint)?;
            let data = cfg.load_eval()?;
            let videos = prepare_videos(&data, &cfg.merge)?;
            let ev = eval_with(&cfg, &params, &data, &videos)?;
            let csv = ev.report.to_csv();
            print!("{csv}");
            if let Some(out) = a.out {
                write(&out.join("eval.csv"), &csv)?;
                ev.index.save(&out.join("index.prvf"))?;
            }
        }
        Command::Merge(a) => {
            require(&a.input)?;
            let frames = load_features(&a.input)?;
            let r = op_tome(&frames, a.rate, a.target)?;
            let lengths: Vec<String> = r.lengths.iter().map(usize::to_string).collect();
            println!("lengths {}", lengths.join(" -> "));
            for (i, ((s, e), size)) in r.clips.spans().iter().zip(&r.clips.sizes).enumerate() {
                println!("clip {i} frames {s}..={e} size {size}");
            }
        }
        Command::Analyze(a) => {
            let params = load_checkpoint(&a.checkpoint)?;
            let data = cfg.load_eval()?;
            let videos = prepare_videos(&data, &cfg.merge)?;
            let ev = eval_with(&cfg, &params, &data, &videos)?;
            let owners = data.query_video_indices()?;
            let text = collapse_metrics(&ev.query_embeddings, &owners)?;
            let mut csv = String::from("space,intra_sim,total_sim,diff_norm\n");
            csv.push_str(&format!(
                "text,{:.6},{:.6},{:.6}\n",
                text.intra_sim, text.total_sim, text.diff_norm
            ));
            let encoded = encode_videos(&params, &videos)?;
            let mut clip_rows = Vec::new();
            let mut clip_owner = Vec::new();
            for (i, (_, clips)) in encoded.iter().enumerate() {
                for r in clips.row_iter() {
                    clip_rows.push(r.to_vec());
                    clip_owner.push(i);
                }
            }
            let clips = prvr_core::numeric::Tensor::from_rows(&clip_rows)?;
            let video = collapse_metrics(&clips, &clip_owner)?;
            csv.push_str(&format!(
                "video,{:.6},{:.6},{:.6}\n",
                video.intra_sim, video.total_sim, video.diff_norm
            ));
            write(&a.out.join("collapse.csv"), &csv)?;
            print!("{csv}");

            let teacher_rows: Vec<Vec<f64>> = data.queries.iter().map(|q| q.teacher_eos.clone()).collect();
            let teacher = prvr_core::numeric::Tensor::from_rows(&teacher_rows)?;
            let sp = spearman_vs_teacher(&ev.query_embeddings, &teacher)?;
            let sp_csv = format!(
                "rho_x100,anchors_used,anchors_skipped\n{:.4},{},{}\n",
                sp.rho_x100, sp.anchors_used, sp.anchors_skipped
            );
            write(&a.out.join("spearman.csv"), &sp_csv)?;
            print!("{sp_csv}");

            if let Some(b) = a.baseline {
                let base = load_checkpoint(&b)?;
                let ev_b = eval_with(&cfg, &base, &data, &videos)?;
                let c = ranker_confusion(&gt_rank_map(&data, &ev), &gt_rank_map(&data, &ev_b), a.q)?;
                let p = c.percentages();
                let c_csv = format!(
                    "q,both,model_only,baseline_only,neither\n{},{:.2},{:.2},{:.2},{:.2}\n",
                    a.q, p[0], p[1], p[2], p[3]
                );
                write(&a.out.join("confusion.csv"), &c_csv)?;
                print!("{c_csv}");
            }
        }
        Command::Bench(a) => {
            let params = load_checkpoint(&a.checkpoint)?;
            let data = cfg.load_eval()?;
            let index = match &a.index {
                Some(p) => {
                    require(p)?;
                    RetrievalIndex::load(p)?
                }
                None => {
                    let videos = prepare_videos(&data, &cfg.merge)?;
                    prvr_core::retrieval::build_index(&params, &videos, cfg.retrieval.fusion)?
                }
            };
            let queries = prvr_core::model::encode_queries(&params, &data)?;
            let rows = bench(&index, &queries, &a.sizes, a.runs)?;
            let csv = bench_csv(&rows);
            write(&a.out.join("bench.csv"), &csv)?;
            print!("{csv}");
        }
        Command::SweepTau(a) => {
            let data = cfg.load_eval()?;
            let fixed = match &a.checkpoint {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            let train_set = if fixed.is_none() { Some(cfg.load_train()?) } else { None };
            let mut csv = String::from("dataset,tau,r1,r5,r10,r100,sumr,mean_omega,frac_merged\n");
            for &tau in &a.taus {
                let mut c = cfg.clone();
                c.merge.tau = tau;
                c.validate()?;
                let params = match (&fixed, &train_set) {
                    (Some(p), _) => p.clone(),
                    (None, Some(t)) => train(&c, t, Some(&data))?.best,
                    (None, None) => unreachable!("training data loaded when no checkpoint is given"),
                };
                let videos = prepare_videos(&data, &c.merge)?;
                let ev = evaluate(&params, &data, &videos, c.retrieval.fusion, &[1, 5, 10, 100])?;
                let (omega, frac) = adaptive_stats(&params, &videos, tau, c.merge.mode)?;
                let r = |q| ev.report.get(q).unwrap_or(f64::NAN);
                csv.push_str(&format!(
                    "{},{tau},{:.2},{:.2},{:.2},{:.2},{:.2},{omega:.4},{frac:.4}\n",
                    a.dataset,
                    r(1),
                    r(5),
                    r(10),
                    r(100),
                    ev.report.sum_r
                ));
            }
            write(&a.out.join("sweep_tau.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
