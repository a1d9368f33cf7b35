//! Acceptance gate. Runs every criterion in sequence (timings are measured
//! on one core, so nothing runs concurrently) and prints one line each.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use motionloc::cmr::{
    chunk_motion, dcg_at_n, ideal_dcg, rank_corpus, CmrConfig, CmrError, Localizer, RelevanceProvider,
    RetrievalProvider,
};
use motionloc::data::synth::{generate_synthetic_dataset, GeneratorConfig};
use motionloc::data::{Dataset, MotionSequence, Split};
use motionloc::eval::{
    evaluate_split, iou, locate_samples, report_from_ious, EvalConfig, SplitEvaluation, TokenJaccard,
};
use motionloc::model::{flip_labels, infer_span, perturbation_mask, prepare_sample, LossParts, LossWeights, Network};
use motionloc::train::{total_loss, train, Checkpoint, TrainConfig, TrainOptions, Trainer};
use motionloc::verify::{check_names, run_gradient_suite, SuiteConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let report = run_gradient_suite(&SuiteConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let required = [
        "matmul", "add", "mul", "tanh", "sigmoid", "relu", "softmax", "layer_norm", "batch_norm", "gru", "nll",
        "bce", "kl", "gcn_layer", "sgpa_block", "cqa", "matcher", "predictor_loss",
    ];
    let names = check_names();
    for r in required {
        ensure(names.contains(&r), || format!("suite lacks {r}"))?;
    }
    for row in &report.rows {
        ensure(row.cases >= 20, || format!("{}: only {} cases", row.name, row.cases))?;
        ensure(row.passed(), || format!("{}: {} failures, max rel {:.2e}", row.name, row.failures, row.max_rel_error))?;
    }
    ensure(elapsed < Duration::from_secs(120), || format!("took {:.1}s", secs(elapsed)))?;
    let worst = report.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(format!(
        "{} checks x {} cases, worst rel err {:.1e}, {:.1}s",
        report.rows.len(),
        SuiteConfig::default().cases,
        worst,
        secs(elapsed)
    ))
}

/// Direct quadratic search with the documented tie rule.
fn brute_span(p_s: &[f64], p_e: &[f64]) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for a in 0..p_s.len() {
        for b in a..p_e.len() {
            let v = p_s[a] * p_e[b];
            if v > best.2 {
                best = (a, b, v);
            }
        }
    }
    best
}

fn oracle_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    if a == b {
        return 1.0;
    }
    let disjoint = a.1 < b.0 || b.1 < a.0;
    let inter = if disjoint { 0.0 } else { a.1.min(b.1) - a.0.max(b.0) };
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

struct ToyWorld {
    sim: HashMap<String, Vec<f64>>,
    loc: HashMap<String, (f64, f64, f64)>,
    rel: HashMap<String, f64>,
    stride: f64,
}

impl RetrievalProvider for ToyWorld {
    fn similarity(&self, _q: &str, motion: &str, chunk: (f64, f64)) -> f64 {
        let v = &self.sim[motion];
        v[(chunk.0 / self.stride).round() as usize % v.len()]
    }
}

impl RelevanceProvider for ToyWorld {
    fn rel(&self, _q: &str, motion: &str, _m: (f64, f64)) -> f64 {
        self.rel[motion]
    }
}

impl Localizer for ToyWorld {
    fn locate(&self, motion: &MotionSequence, _t: &[usize]) -> Result<(f64, f64, f64), CmrError> {
        Ok(self.loc[&motion.id])
    }
}

fn c2_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // spans, with ties from a coarse value grid
    for case in 0..100 {
        let t = rng.gen_range(1..=40);
        let grid = [0.0, 0.1, 0.2, 0.3];
        let (p_s, p_e): (Vec<f64>, Vec<f64>) = if case % 2 == 0 {
            (0..t).map(|_| (grid[rng.gen_range(0..4)], grid[rng.gen_range(0..4)])).unzip()
        } else {
            (0..t).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).unzip()
        };
        let got = infer_span(&p_s, &p_e).map_err(|e| e.to_string())?;
        let want = brute_span(&p_s, &p_e);
        ensure((got.start, got.end) == (want.0, want.1) && got.score == want.2, || {
            format!("infer_span case {case}: got ({},{}) want ({},{})", got.start, got.end, want.0, want.1)
        })?;
    }

    let cfg = EvalConfig::default();
    for set in 0..1000 {
        let n = rng.gen_range(1..=30);
        let grid = |rng: &mut ChaCha8Rng| (rng.gen_range(0..=20) as f64) * 0.5;
        let mut ious = Vec::with_capacity(n);
        let mut oracle = Vec::with_capacity(n);
        for _ in 0..n {
            let span = |rng: &mut ChaCha8Rng| {
                let (a, b) = (grid(rng), grid(rng));
                (a.min(b), a.max(b))
            };
            let (p, g) = (span(&mut rng), span(&mut rng));
            ious.push(iou(p, g).map_err(|e| e.to_string())?);
            oracle.push(oracle_iou(p, g));
        }
        for (a, b) in ious.iter().zip(&oracle) {
            ensure((a - b).abs() < 1e-12, || format!("set {set}: iou {a} vs oracle {b}"))?;
        }
        let report = report_from_ious(ious, &cfg);
        let miou = oracle.iter().sum::<f64>() / n as f64;
        ensure((report.miou - miou).abs() < 1e-12, || format!("set {set}: mIoU {} vs {miou}", report.miou))?;
        for &mu in &cfg.thresholds {
            let hits = oracle.iter().filter(|&&v| v > mu).count();
            let want = 100.0 * hits as f64 / n as f64;
            let got = report.recall_at(mu).ok_or("missing threshold")?;
            ensure((got - want).abs() < 1e-9, || format!("set {set}: recall@{mu} {got} vs {want}"))?;
        }
    }

    let base = generate_synthetic_dataset(
        &GeneratorConfig {
            train_samples: 12,
            val_samples: 0,
            test_samples: 0,
            ..GeneratorConfig::default()
        },
        3,
    )
    .map_err(|e| e.to_string())?;
    let mut corpora = 0;
    for case in 0..40 {
        let size = rng.gen_range(1..=base.motions.len().min(6));
        let mut corpus = base.clone();
        corpus.motions.truncate(size);
        let cfg = CmrConfig {
            k: rng.gen_range(1..=size),
            lambda: [0.0, 1.0, 5.0][case % 3],
            ..CmrConfig::default()
        };
        let q = [0.0, 0.25, 0.5, 0.75];
        let mut world = ToyWorld {
            sim: HashMap::new(),
            loc: HashMap::new(),
            rel: HashMap::new(),
            stride: cfg.stride(),
        };
        for m in &corpus.motions {
            let chunks = (m.duration / cfg.stride()).ceil() as usize + 1;
            world.sim.insert(m.id.clone(), (0..chunks).map(|_| q[rng.gen_range(0..4)]).collect());
            let a = rng.gen_range(0.0..m.duration);
            world.loc.insert(m.id.clone(), (a, rng.gen_range(a..=m.duration), q[rng.gen_range(1..4)]));
            world.rel.insert(m.id.clone(), q[rng.gen_range(0..4)]);
        }
        let got = rank_corpus("query", &corpus, &world, &world, &world, &cfg).map_err(|e| e.to_string())?;

        // retrieval score by walking every window
        let r: Vec<(String, f64)> = corpus
            .motions
            .iter()
            .map(|m| {
                let mut windows = Vec::new();
                if m.duration <= cfg.chunk {
                    windows.push((0.0, m.duration));
                } else {
                    let mut i = 0;
                    while i as f64 * cfg.stride() + cfg.chunk <= m.duration + 1e-9 {
                        windows.push((i as f64 * cfg.stride(), i as f64 * cfg.stride() + cfg.chunk));
                        i += 1;
                    }
                }
                assert_eq!(windows.len(), chunk_motion(m.duration, &cfg).len());
                let best = windows.iter().map(|&c| world.similarity("query", &m.id, c)).fold(f64::MIN, f64::max);
                (m.id.clone(), best)
            })
            .collect();
        // the top-k: motions beaten by fewer than k others
        let selected: Vec<&(String, f64)> = r
            .iter()
            .filter(|(id, v)| r.iter().filter(|(o, w)| w > v || (w == v && o < id)).count() < cfg.k)
            .collect();
        let score = |id: &str, rv: f64| world.loc[id].2 * (cfg.lambda * rv).exp();
        // exhaustive search over orderings for the one consistent with the ranking rule
        let mut idx: Vec<usize> = (0..selected.len()).collect();
        let mut best: Option<Vec<usize>> = None;
        permute(&mut idx, 0, &mut |perm| {
            let ok = perm.windows(2).all(|w| {
                let (a, b) = (selected[w[0]], selected[w[1]]);
                let (sa, sb) = (score(&a.0, a.1), score(&b.0, b.1));
                sa > sb || (sa == sb && a.0 < b.0)
            });
            if ok {
                best = Some(perm.to_vec());
            }
        });
        let best = best.ok_or("no consistent ordering")?;
        ensure(got.len() == best.len(), || format!("corpus {case}: {} ranked, want {}", got.len(), best.len()))?;
        for (g, &i) in got.iter().zip(&best) {
            let (id, rv) = selected[i];
            let (t_s, t_e, _) = world.loc[id.as_str()];
            ensure(
                &g.motion_id == id && g.cmr_score == score(id, *rv) && g.t_s == t_s && g.t_e == t_e && g.rel == world.rel[id.as_str()],
                || format!("corpus {case}: got {} want {id}", g.motion_id),
            )?;
        }
        corpora += 1;
    }
    Ok(format!("100 span searches, 1000 IoU sets, {corpora} toy corpora match their oracles"))
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

fn c3_constants() -> Outcome {
    let mut line = Vec::new();
    for (n, want) in [(10, 4.54), (50, 12.90), (100, 20.94)] {
        let got = ideal_dcg(n).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 0.01, || format!("ideal DCG@{n} = {got:.4}, want {want}"))?;
        let direct = dcg_at_n(&vec![1.0; n], n).map_err(|e| e.to_string())?;
        ensure((got - direct).abs() < 1e-12, || format!("ideal DCG@{n} disagrees with a list of ones"))?;
        line.push(format!("DCG@{n} {got:.2}"));
    }
    let w = LossWeights::default();
    ensure((w.seq, w.span, w.rec, w.align) == (5.0, 1.0, 1.0, 1.0), || format!("weights {w:?}"))?;
    let parts = LossParts {
        seq: 0.1,
        span_s: 0.2,
        span_e: 0.4,
        rec_s: 1.0,
        rec_e: 3.0,
        align_s: 0.5,
        align_e: 0.7,
    };
    let total = total_loss(&parts, &w).map_err(|e| e.to_string())?;
    let want = 5.0 * 0.1 + 0.3 + 2.0 + 0.6;
    ensure((total - want).abs() < 1e-12, || format!("total loss {total}, want {want}"))?;
    let sched = TrainConfig::paper().schedule();
    ensure(sched.lr(50) == 2e-4, || format!("lr at epoch 50: {}", sched.lr(50)))?;
    ensure((sched.lr(51) - 2e-5).abs() < 1e-18, || format!("lr at epoch 51: {}", sched.lr(51)))?;
    Ok(format!("ideal {}; total loss weights (5,1,1,1); lr 2e-5 from epoch 51", line.join(", ")))
}

fn c4_perturbation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut masks = 0;
    for t in 1..=256usize {
        for alpha in [0.0, 0.3, 0.6, 0.8, 0.9, 1.0] {
            for _ in 0..4 {
                let m = perturbation_mask(t, alpha, &mut rng);
                let ones = m.iter().filter(|&&b| b).count();
                let want = (alpha * t as f64).round() as usize;
                ensure(m.len() == t && ones == want, || format!("T={t} a={alpha}: {ones} ones, want {want}"))?;
                let runs = m.windows(2).filter(|w| !w[0] && w[1]).count() + usize::from(m[0]);
                ensure(ones == 0 || runs == 1, || format!("T={t} a={alpha}: {runs} runs"))?;
                masks += 1;
            }
        }
    }
    for t in 1..=64usize {
        for beta in [0.0, 0.2, 0.5, 1.0] {
            for _ in 0..20 {
                let i = rng.gen_range(0..t);
                let y: Vec<bool> = (0..t).map(|k| k == i).collect();
                let f = flip_labels(&y, beta, &mut rng);
                ensure(f.iter().filter(|&&b| b).count() == 1, || format!("T={t}: flipped labels not one-hot"))?;
                let ham = y.iter().zip(&f).filter(|(a, b)| a != b).count();
                ensure(ham == 0 || ham == 2, || format!("T={t}: Hamming {ham}"))?;
                ensure(beta > 0.0 || ham == 0, || "flip with beta 0".into())?;
                ensure(beta < 1.0 || t < 2 || ham == 2, || "no flip with beta 1".into())?;
            }
        }
    }

    // inference with scrambled ground truth
    let ds = generate_synthetic_dataset(
        &GeneratorConfig {
            train_samples: 0,
            val_samples: 0,
            test_samples: 12,
            ..GeneratorConfig::default()
        },
        4,
    )
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig::desk();
    let net = Network::new(cfg.model_config(ds.vocab.len()), 4).map_err(|e| e.to_string())?;
    let mut scrambled = ds.clone();
    for s in &mut scrambled.samples {
        let d = ds.motion(&s.motion_id).map(|m| m.duration).unwrap_or(1.0);
        let a = rng.gen_range(0.0..d);
        s.span = (a, rng.gen_range(a..=d));
    }
    let ids: Vec<usize> = (0..ds.samples.len()).collect();
    let a = locate_samples(&net, &ds, &ids).map_err(|e| e.to_string())?;
    let b = locate_samples(&net, &scrambled, &ids).map_err(|e| e.to_string())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for (x, y) in a.iter().zip(&b) {
        ensure(
            bits(&x.span.p_s) == bits(&y.span.p_s)
                && bits(&x.span.p_e) == bits(&y.span.p_e)
                && bits(&x.highlight) == bits(&y.highlight)
                && x.prediction.t_s.to_bits() == y.prediction.t_s.to_bits()
                && x.prediction.t_e.to_bits() == y.prediction.t_e.to_bits(),
            || format!("sample {} changed with its labels", x.prediction.sample),
        )?;
    }
    let prep = prepare_sample(&ds, 0, cfg.max_snippets).map_err(|e| e.to_string())?;
    let mut moved = prep.clone();
    (moved.i_s, moved.i_e) = (0, prep.steps - 1);
    let (x, hx) = net.infer(&prep).map_err(|e| e.to_string())?;
    let (y, hy) = net.infer(&moved).map_err(|e| e.to_string())?;
    ensure(bits(&x.p_s) == bits(&y.p_s) && bits(&hx) == bits(&hy), || "infer reads label indices".into())?;
    Ok(format!("{masks} masks, 5120 label flips, {} samples bitwise label-free", ids.len()))
}

fn c5_overfit() -> Outcome {
    let ds = generate_synthetic_dataset(
        &GeneratorConfig {
            train_samples: 1,
            val_samples: 0,
            test_samples: 0,
            ..GeneratorConfig::default()
        },
        1,
    )
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 1,
        ..TrainConfig::desk()
    };
    let lr = cfg.lr;
    let t0 = Instant::now();
    let mut trainer = Trainer::new(&ds, cfg).map_err(|e| e.to_string())?;
    let mut last = f64::NAN;
    let mut first_below = None;
    for step in 1..=500 {
        last = trainer.train_batch(&[0], 1, lr).map_err(|e| e.to_string())?.total;
        if last < 0.05 && first_below.is_none() {
            first_below = Some(step);
        }
    }
    let elapsed = t0.elapsed();
    ensure(last < 0.05, || format!("loss {last:.4} after 500 steps"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {:.1}s", secs(elapsed)))?;
    Ok(format!(
        "loss {last:.4} at step 500 (first < 0.05 at step {}), {:.1}s",
        first_below.unwrap_or(0),
        secs(elapsed)
    ))
}

fn synthetic_run() -> Result<(Dataset, SplitEvaluation, Duration), String> {
    let ds = generate_synthetic_dataset(
        &GeneratorConfig {
            train_samples: 500,
            val_samples: 0,
            test_samples: 100,
            ..GeneratorConfig::default()
        },
        7,
    )
    .map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let out = train(&ds, TrainConfig::desk(), &TrainOptions::default()).map_err(|e| e.to_string())?;
    let ev = evaluate_split(&out.network, &ds, Split::Test, &EvalConfig::default(), &TokenJaccard)
        .map_err(|e| e.to_string())?;
    Ok((ds, ev, t0.elapsed()))
}

fn c6_synthetic(ds: &Dataset, ev: &SplitEvaluation, elapsed: Duration) -> Outcome {
    let motions = ds.samples.iter().map(|s| s.motion_id.as_str()).collect::<std::collections::HashSet<_>>();
    let r50 = ev.normal.recall_at(0.5).unwrap_or(0.0);
    ensure(ev.normal.samples == 100, || format!("{} test samples", ev.normal.samples))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {:.1}s", secs(elapsed)))?;
    ensure(ev.normal.miou >= 0.5, || format!("mIoU {:.3}", ev.normal.miou))?;
    ensure(r50 >= 50.0, || format!("IoU@0.5 {r50:.1}%"))?;
    ensure(ev.highlight_foreground > ev.highlight_background, || {
        format!("highlight fg {:.3} <= bg {:.3}", ev.highlight_foreground, ev.highlight_background)
    })?;
    Ok(format!(
        "{} motions; mIoU {:.3}, IoU@0.5 {r50:.0}%, highlight fg {:.3} / bg {:.3}, {:.0}s",
        motions.len(),
        ev.normal.miou,
        ev.highlight_foreground,
        ev.highlight_background,
        secs(elapsed)
    ))
}

fn c7_protocols(ev: &SplitEvaluation) -> Outcome {
    let (n, a) = (&ev.normal, &ev.assigned);
    ensure(n.ious.len() == a.ious.len(), || "protocols saw different samples".into())?;
    for (i, (x, y)) in n.ious.iter().zip(&a.ious).enumerate() {
        ensure(y >= x, || format!("sample {i}: assigned {y} < normal {x}"))?;
    }
    ensure(a.miou >= n.miou, || "assigned mIoU below normal".into())?;
    for (rn, ra) in n.recall.iter().zip(&a.recall) {
        ensure(ra.percent >= rn.percent, || format!("assigned IoU@{} below normal", rn.mu))?;
    }
    Ok(format!("{} samples; mIoU normal {:.3} <= assigned {:.3}", n.ious.len(), n.miou, a.miou))
}

fn c8_determinism() -> Outcome {
    let ds = generate_synthetic_dataset(
        &GeneratorConfig {
            train_samples: 24,
            val_samples: 4,
            test_samples: 0,
            ..GeneratorConfig::default()
        },
        8,
    )
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        val_every: 1,
        seed: 8,
        ..TrainConfig::desk()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str, opts: TrainOptions| {
        let out_dir = dir.path().join(name);
        train(
            &ds,
            cfg.clone(),
            &TrainOptions {
                out_dir: Some(out_dir.clone()),
                ..opts
            },
        )
        .map_err(|e| e.to_string())
        .map(|o| (o, out_dir))
    };
    let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let (a, da) = run("a", TrainOptions::default())?;
    let (b, db) = run("b", TrainOptions::default())?;
    ensure(a.log == b.log, || "loss logs differ between same-seed runs".into())?;
    ensure(read(da.join("metrics.ndjson"))? == read(db.join("metrics.ndjson"))?, || "metrics files differ".into())?;
    ensure(a.checkpoint.to_bytes() == b.checkpoint.to_bytes(), || "final checkpoints differ".into())?;

    let (_, dc) = run(
        "c",
        TrainOptions {
            stop_after_epoch: Some(1),
            ..TrainOptions::default()
        },
    )?;
    let ckpt = Checkpoint::load(dc.join("last.ckpt")).map_err(|e| e.to_string())?;
    let (c, _) = run(
        "c",
        TrainOptions {
            resume: Some(ckpt),
            ..TrainOptions::default()
        },
    )?;
    ensure(c.checkpoint.to_bytes() == a.checkpoint.to_bytes(), || "resumed checkpoint differs".into())?;
    ensure(read(dc.join("last.ckpt"))? == read(da.join("last.ckpt"))?, || "resumed checkpoint file differs".into())?;
    ensure(read(dc.join("metrics.ndjson"))? == read(da.join("metrics.ndjson"))?, || "resumed log differs".into())?;
    Ok(format!("{} steps identical across runs; resume after epoch 1 bitwise-equal", a.log.len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    };
    report("1 gradient suite", c1_gradients());
    report("2 oracle agreement", c2_oracles());
    report("3 constants", c3_constants());
    report("4 perturbation and label independence", c4_perturbation());
    report("5 single-batch overfit", c5_overfit());
    match synthetic_run() {
        Ok((ds, ev, elapsed)) => {
            report("6 synthetic benchmark", c6_synthetic(&ds, &ev, elapsed));
            report("7 assigned >= normal", c7_protocols(&ev));
        }
        Err(e) => {
            report("6 synthetic benchmark", Err(e.clone()));
            report("7 assigned >= normal", Err(e));
        }
    }
    report("8 determinism and resume", c8_determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
