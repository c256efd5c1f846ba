//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N ... PASS|FAIL` line to the real stdout.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::Rng;

use common::{gaussian, random_rotation, similarity_transform, LossBatch, TERMS};
use prvr_core::analysis::{bench, bench_csv, collapse_metrics, ranker_confusion, spearman_vs_teacher};
use prvr_core::config::RunConfig;
use prvr_core::data::gen_synthetic;
use prvr_core::encoders::EncoderParams;
use prvr_core::merging::{clip_schedule, op_tome, select_merge_depth, DepthMode};
use prvr_core::model::{encode_queries, prepare_videos, ClipBuilder};
use prvr_core::numeric::{grad_check, Graph, Tensor};
use prvr_core::objectives::{cbva_loss, tcpl_loss, LossWeights};
use prvr_core::retrieval::{build_index, recall_at};
use prvr_core::rng;
use prvr_core::train::{input_dims, train};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {n:>2} {name:<28} {verdict}  {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn criterion_01_schedule_exactness() {
    let mut r = rng::seeded(1);
    let frames = Tensor::matrix(128, 64, rng::gaussian_vec(&mut r, 128 * 64, 1.0)).unwrap();
    let start = Instant::now();
    let sched = clip_schedule(32, 75.0, 5).unwrap();
    let tome = op_tome(&frames, 75.0, 32).unwrap();
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let pass = sched.levels == [32, 20, 12, 8, 6, 5] && tome.lengths == [128, 80, 50, 32] && ms < 1.0;
    report(
        1,
        "schedule exactness",
        pass,
        &format!("levels {:?}, op_tome {:?}, {ms:.3} ms", sched.levels, tome.lengths),
    );
}

#[test]
fn criterion_02_op_tome_structure() {
    let mut r = rng::seeded(2);
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let len = r.random_range(33..=256);
        let d = r.random_range(1..=16);
        let frames = Tensor::matrix(len, d, rng::gaussian_vec(&mut r, len * d, 1.0)).unwrap();
        let out = op_tome(&frames, 75.0, 32).unwrap();
        let clips = &out.clips;
        let mut next = 0;
        let mut ok = clips.len() == 32 && clips.sizes.iter().sum::<usize>() == len;
        for (k, span) in clips.provenance.iter().enumerate() {
            ok &= span[0] == next && span.windows(2).all(|w| w[1] == w[0] + 1) && clips.sizes[k] == span.len();
            next = span[span.len() - 1] + 1;
            for c in 0..d {
                let mean = span.iter().map(|&i| frames.get(i, c)).sum::<f64>() / span.len() as f64;
                worst = worst.max((clips.tokens.get(k, c) - mean).abs());
            }
        }
        ok &= next == len;
        if !ok {
            failures.push(case);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && worst < 1e-6 && secs < 10.0;
    report(
        2,
        "op_tome structural suite",
        pass,
        &format!(
            "1000 cases, {} structural failures, max mean err {worst:.2e}, {secs:.2} s",
            failures.len()
        ),
    );
}

#[test]
fn criterion_03_gradient_checks() {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut all_pass = true;
    for seed in 0..10 {
        let batch = LossBatch::new(100 + seed);
        for term in TERMS {
            let r = grad_check(|g, p| batch.term(g, p, term), &batch.params, 1e-5, 1e-4).unwrap();
            all_pass &= r.pass;
            if r.max_rel_err > worst.0 {
                worst = (r.max_rel_err, format!("{term:?} seed {seed}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "gradient checks",
        all_pass && secs < 60.0,
        &format!(
            "10 seeds x {} terms, worst rel err {:.2e} ({}), {secs:.2} s",
            TERMS.len(),
            worst.0,
            worst.1
        ),
    );
}

#[test]
fn criterion_04_tcpl_invariance() {
    let w = LossWeights::default();
    let teacher = gaussian(8, 10, 4, 1);
    let student = gaussian(8, 6, 4, 2);
    let eval = |t: &Tensor, s: &Tensor| {
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let (e, a) = tcpl_loss(&mut g, t, sv, &w, 0).unwrap();
        (g.value(e).item(), g.value(a).item())
    };
    let (e0, a0) = eval(&teacher, &student);

    let mut max_e = 0.0f64;
    for c in [0.1, 3.0, 100.0] {
        let scaled = teacher.map(|x| c * x);
        max_e = max_e.max((eval(&scaled, &student).0 - e0).abs());
    }

    let mut max_a = 0.0f64;
    let mut r = rng::seeded(44);
    for k in 0..20 {
        let rot = random_rotation(10, k);
        let scale = r.random_range(0.1..10.0);
        let shift: Vec<f64> = (0..10).map(|_| r.random_range(-5.0..5.0)).collect();
        let moved = similarity_transform(&teacher, &rot, scale, &shift);
        max_a = max_a.max((eval(&moved, &student).1 - a0).abs());
    }

    let (ce, ca) = eval(&teacher, &teacher);
    let copy = ce + ca;
    let pass = max_e < 1e-6 && max_a < 1e-6 && copy.abs() < 1e-10;
    report(
        4,
        "TCPL invariance",
        pass,
        &format!("scale dL^E {max_e:.2e}, similarity dL^A {max_a:.2e}, copy TCPL {copy:.2e}"),
    );
}

#[test]
fn criterion_05_cbva_degenerate() {
    let mut g = Graph::new();
    let frames = g.param(gaussian(7, 5, 5, 1));
    let clip = g.param(gaussian(1, 5, 5, 2));
    let single = cbva_loss(&mut g, frames, clip, &[0; 7]).unwrap();
    let single = g.value(single).item();

    let mut g = Graph::new();
    let two = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let f = g.param(two.clone());
    let c = g.param(two);
    let hand = cbva_loss(&mut g, f, c, &[0, 1]).unwrap();
    let hand = g.value(hand).item();
    let expected = 2.0 * 2f64.ln();
    let pass = single == 0.0 && (hand - expected).abs() < 1e-9;
    report(
        5,
        "CBVA degenerate values",
        pass,
        &format!("single clip {single:e}, hand case {hand:.12} vs 2 ln 2 = {expected:.12}"),
    );
}

#[test]
fn criterion_06_adaptive_selection() {
    // (omega, K, expected k*) evaluated by hand from the selection rule
    let table: [(f64, usize, usize); 12] = [
        (0.0, 6, 1),
        (0.5, 6, 1),
        (1.0 - 1.0 / 6.0, 6, 1),
        (0.84, 6, 2),
        (1.0, 6, 2),
        (0.75, 4, 1),
        (0.76, 4, 2),
        (0.5, 2, 1),
        (0.51, 2, 2),
        (0.0, 1, 1),
        (1.0, 1, 1),
        (1.0 - 1.0 / 3.0, 3, 1),
    ];
    let mut mismatches = Vec::new();
    for &(omega, k, want) in &table {
        let got = select_merge_depth(omega, k, DepthMode::Literal).unwrap();
        if got != want {
            mismatches.push((omega, k, want, got));
        }
    }
    let mut monotone = true;
    for k in 1..=10 {
        let depths: Vec<usize> = (0..100)
            .map(|i| select_merge_depth(i as f64 / 99.0, k, DepthMode::Monotone).unwrap())
            .collect();
        monotone &= depths.windows(2).all(|w| w[0] <= w[1]) && depths[0] == 1 && depths[99] == k;
    }
    report(
        6,
        "adaptive selection",
        mismatches.is_empty() && monotone,
        &format!(
            "{} literal cases, mismatches {mismatches:?}, monotone grid ok: {monotone}",
            table.len()
        ),
    );
}

#[test]
fn criterion_07_metric_oracles() {
    let rep = recall_at(&[1, 3, 12], 200, &[1, 5, 10, 100]).unwrap();
    let hand_ok = (rep.sum_r - 266.67).abs() < 0.01;

    let mut r = rng::seeded(7);
    let ids: Vec<String> = (0..60).map(|i| format!("q{i}")).collect();
    let a: BTreeMap<String, usize> = ids.iter().map(|i| (i.clone(), r.random_range(1..=150))).collect();
    let b: BTreeMap<String, usize> = ids.iter().map(|i| (i.clone(), r.random_range(1..=150))).collect();
    let qs = [1, 5, 10, 100];
    let ra = recall_at(&a.values().copied().collect::<Vec<_>>(), 150, &qs).unwrap();
    let rb = recall_at(&b.values().copied().collect::<Vec<_>>(), 150, &qs).unwrap();
    let mut marginals_ok = true;
    for &q in &qs {
        let p = ranker_confusion(&a, &b, q).unwrap().percentages();
        marginals_ok &= p[0] + p[1] == ra.get(q).unwrap() && p[0] + p[2] == rb.get(q).unwrap();
    }

    let arc =
        |angles: &[f64]| Tensor::from_rows(&angles.iter().map(|t| vec![t.cos(), t.sin()]).collect::<Vec<_>>()).unwrap();
    let teacher = arc(&[0.0, 0.1, 0.3]);
    let reversed = arc(&[0.3, 0.0, 0.2]);
    let big = gaussian(20, 5, 7, 1);
    let id_small = spearman_vs_teacher(&teacher, &teacher).unwrap().rho_x100;
    let id_big = spearman_vs_teacher(&big, &big).unwrap().rho_x100;
    let rev = spearman_vs_teacher(&reversed, &teacher).unwrap().rho_x100;
    let spear_ok = (id_small - 100.0).abs() < 1e-9 && (id_big - 100.0).abs() < 1e-9 && (rev + 100.0).abs() < 1e-9;

    report(
        7,
        "metric oracles",
        hand_ok && marginals_ok && spear_ok,
        &format!(
            "SumR {:.2}, confusion marginals exact: {marginals_ok}, spearman id {id_small:.1}/{id_big:.1} rev {rev:.1}",
            rep.sum_r
        ),
    );
}

#[test]
fn criterion_08_collapse_oracle() {
    let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
    let c = collapse_metrics(&e, &[0, 0, 1, 1]).unwrap();
    report(
        8,
        "collapse metric oracle",
        (c.diff_norm - 0.5).abs() < 1e-9,
        &format!(
            "intra {:.4}, total {:.4}, diff_norm {:.12}",
            c.intra_sim, c.total_sim, c.diff_norm
        ),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_09_ablation_trend() {
    let start = Instant::now();
    let epochs = "train.epochs=10".to_string();
    let full_cfg = RunConfig::load(None, std::slice::from_ref(&epochs)).unwrap();
    let base_cfg = RunConfig::load(
        None,
        &[
            epochs,
            "loss.lambda_e=0".into(),
            "loss.lambda_a=0".into(),
            "loss.lambda_cbva=0".into(),
        ],
    )
    .map(|mut c| {
        c.merge.clip_builder = ClipBuilder::Uniform;
        c
    })
    .unwrap();
    let train_set = full_cfg.load_train().unwrap();
    let eval = full_cfg.load_eval().unwrap();

    let mut rows = Vec::new();
    for (label, cfg) in [("base", &base_cfg), ("full", &full_cfg)] {
        let (mut sumr, mut dn) = (Vec::new(), Vec::new());
        for seed in [1, 2, 3] {
            let mut c = cfg.clone();
            c.seed = seed;
            let out = train(&c, &train_set, Some(&eval)).unwrap();
            let best = out.best_log();
            sumr.push(best.eval.as_ref().unwrap().sum_r);
            dn.push(best.text_collapse.unwrap().diff_norm);
        }
        rows.push((label, median(sumr.clone()), median(dn.clone()), sumr, dn));
    }
    let secs = start.elapsed().as_secs_f64();
    let (base, full) = (&rows[0], &rows[1]);
    let pass = full.1 >= base.1 && full.2 < base.2 && secs < 600.0;
    let detail = format!(
        "median SumR full {:.2} vs base {:.2}; median diff_norm full {:.4} vs base {:.4}; per-seed SumR {:?}/{:?}; {secs:.0} s",
        full.1, base.1, full.2, base.2, full.3, base.3
    );
    report(9, "ablation trend (synthetic)", pass, &detail);
}

#[test]
fn criterion_10_bench_harness() {
    let mut cfg = RunConfig::defaults();
    cfg.data.synth.n_videos = 474;
    cfg.data.synth.queries_per_video = 1;
    let data = gen_synthetic(&cfg.data.synth).unwrap().dataset;
    let videos = prepare_videos(&data, &cfg.merge).unwrap();
    let params = EncoderParams::init(&cfg.encoder, input_dims(&cfg, &[&data]).unwrap(), 10).unwrap();
    let index = build_index(&params, &videos, cfg.retrieval.fusion).unwrap();
    let queries = encode_queries(&params, &data)
        .unwrap()
        .select_rows(&(0..20).collect::<Vec<_>>());
    let sizes = [100, 200, 300, 400, 474];
    let rows = bench(&index, &queries, &sizes, 5).unwrap();
    let csv = bench_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    let shape_ok = lines[0] == "size,time_ms,memory_mb"
        && lines.len() == 6
        && lines[1..]
            .iter()
            .zip(sizes)
            .all(|(l, s)| l.split(',').count() == 3 && l.starts_with(&format!("{s},")));
    let times_ok = rows.iter().all(|r| r.time_ms.is_finite() && r.time_ms > 0.0);
    let detail: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}ms", r.size, r.time_ms)).collect();
    report(10, "bench harness", shape_ok && times_ok, &detail.join(" "));
}
