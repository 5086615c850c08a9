//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use hse_core::config::RunConfig;
use hse_core::data::{Dataset, SyntheticSpec};
use hse_core::eval::{evaluate, predict_dataset, EvalMode, MetricsReport};
use hse_core::gradsuite;
use hse_core::losses;
use hse_core::model::{HseModel, ModelConfig, Variant};
use hse_core::rng::SplitMix64;
use hse_core::taxonomy::Taxonomy;
use hse_core::tensor::{Graph, Tensor};
use hse_core::training::{level_objective, to_jsonl, train_stage1, train_stage2, EpochRecord};

const DESK: &str = include_str!("../configs/desk.cfg");
const SEEDS: [u64; 3] = [1, 2, 3];
const VARIANTS: [Variant; 4] = [Variant::Baseline, Variant::NoSerl, Variant::NoSglr, Variant::Full];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn gradient_suite() -> Verdict {
    let t0 = Instant::now();
    let cases = match gradsuite::run_suite(1) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let secs = t0.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
        .expect("non-empty suite");
    let failed: Vec<&str> = cases.iter().filter(|c| !c.report.pass).map(|c| c.name).collect();
    let model = cases.iter().find(|c| c.name == "hse_model").expect("model case");
    verdict(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} cases, worst {} at {:.2e}, full graph {:.2e}, {secs:.1}s{}",
            cases.len(),
            worst.name,
            worst.report.max_rel_err,
            model.report.max_rel_err,
            if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
        ),
    )
}

fn naive_softmax(s: &[f64], t: f64) -> Vec<f64> {
    let z: f64 = s.iter().map(|v| (v / t).exp()).sum();
    s.iter().map(|v| (v / t).exp() / z).collect()
}

fn naive_conv(x: &[f64], w: &[f64], b: &[f64], dims: [usize; 7]) -> Vec<f64> {
    let [n, c, h, wd, o, k, stride_pad] = dims;
    let (stride, pad) = (stride_pad / 10, stride_pad % 10);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn oracle_equivalence() -> Verdict {
    const CASES: usize = 1000;
    const TOL: f64 = 1e-12;
    let mut rng = SplitMix64::new(7);
    let mut worst = [0.0f64; 5];
    let mut bad = [0usize; 5];
    let mut note = |i: usize, a: f64, b: f64, worst: &mut [f64; 5]| {
        let d = (a - b).abs() / b.abs().max(1.0);
        worst[i] = worst[i].max(d);
        if !(d <= TOL) {
            bad[i] += 1;
        }
    };
    for _ in 0..CASES {
        let n = 2 + rng.below(15) as usize;
        let t = rng.uniform(0.5, 8.0);
        let s: Vec<f64> = (0..n).map(|_| rng.uniform(-10.0, 10.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.uniform(-10.0, 10.0)).collect();

        let p = losses::tempered_softmax(&s, t).unwrap().probs;
        for (a, b) in p.iter().zip(naive_softmax(&s, t)) {
            note(0, *a, b, &mut worst);
        }

        let (pq, ps) = (naive_softmax(&q, t), naive_softmax(&s, t));
        let kl: f64 = pq.iter().zip(&ps).map(|(a, b)| a * (a.ln() - b.ln())).sum();
        note(1, losses::kl_regularizer(&q, &s, t).unwrap(), kl, &mut worst);

        let y = rng.below(n as u64) as usize;
        let ce = s.iter().map(|v| v.exp()).sum::<f64>().ln() - s[y];
        note(2, losses::cross_entropy(&s, y).unwrap(), ce, &mut worst);

        let (bn, c, o) = (1 + rng.below(2) as usize, 1 + rng.below(3) as usize, 1 + rng.below(3) as usize);
        let k = 1 + rng.below(3) as usize;
        let (h, w) = (k + rng.below(5) as usize, k + rng.below(5) as usize);
        let (stride, pad) = (1 + rng.below(2) as usize, rng.below(2) as usize);
        let x = Tensor::uniform(&[bn, c, h, w], -1.0, 1.0, &mut rng);
        let wt = Tensor::uniform(&[o, c, k, k], -1.0, 1.0, &mut rng);
        let bias = Tensor::uniform(&[o], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(bias.clone()));
        let out = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        let expect = naive_conv(x.data(), wt.data(), bias.data(), [bn, c, h, w, o, k, stride * 10 + pad]);
        for (a, b) in g.value(out).data().iter().zip(expect) {
            note(3, *a, b, &mut worst);
        }

        let (hh, ww) = (1 + rng.below(5) as usize, 1 + rng.below(5) as usize);
        let f = Tensor::uniform(&[bn, c, hh, ww], -1.0, 1.0, &mut rng);
        let a = Tensor::uniform(&[bn, c, hh, ww], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (fv, av) = (g.constant(f.clone()), g.constant(a.clone()));
        let out = g.attend_aggregate(fv, av).unwrap();
        for (i, got) in g.value(out).data().iter().enumerate() {
            let plane = i * hh * ww..(i + 1) * hh * ww;
            let expect: f64 = f.data()[plane.clone()].iter().zip(&a.data()[plane]).map(|(x, y)| x * y).sum();
            note(4, *got, expect, &mut worst);
        }
    }
    let names = ["tempered_softmax", "kl_regularizer", "cross_entropy", "conv2d", "attend_aggregate"];
    let summary: Vec<String> = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    verdict(
        bad.iter().all(|&b| b == 0),
        format!("{CASES} cases each, worst deviation: {}", summary.join(", ")),
    )
}

fn taxonomy_fixtures() -> Verdict {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/");
    let load = |name: &str| Taxonomy::load(format!("{dir}{name}"));
    let (cub, butterfly) = match (load("cub.tsv"), load("butterfly200.tsv")) {
        (Ok(c), Ok(b)) => (c, b),
        (Err(e), _) | (_, Err(e)) => return verdict(false, e.to_string()),
    };
    let genus: Vec<f64> = (0..122).map(f64::from).collect();
    let extended = cub.extend_scores(3, &genus).map(|v| v.len()).unwrap_or(0);
    let ok = cub.level_sizes() == [13, 37, 122, 200] && butterfly.level_sizes() == [5, 23, 116, 200] && extended == 200;
    verdict(
        ok,
        format!(
            "CUB {:?}, Butterfly-200 {:?}, CUB level 4 extension 122 -> {extended}",
            cub.level_sizes(),
            butterfly.level_sizes()
        ),
    )
}

fn loss_wiring() -> Verdict {
    let defaults = ModelConfig::default();
    let (t, gamma) = (defaults.temperature, defaults.gamma());
    let taxonomy = Taxonomy::parse("a\tx\tp\na\tx\tq\na\ty\tr\nb\tz\ts\nb\tz\tu\n", "toy").unwrap();
    let cfg = ModelConfig {
        level_sizes: taxonomy.level_sizes(),
        trunk_widths: vec![4, 4],
        feature_dim: 6,
        semantic_dim: 4,
        attention_hidden: 5,
        gamma: Some(0.0),
        ..ModelConfig::default()
    };
    let model = HseModel::new(cfg, 5).unwrap();
    let mut rng = SplitMix64::new(6);
    let images = Tensor::uniform(&[3, 3, 16, 16], 0.0, 1.0, &mut rng);
    let labels: Vec<_> = [0, 2, 4].iter().map(|&l| taxonomy.derive_label_path(l).unwrap()).collect();

    let mut g = Graph::new();
    let b = model.bind(&mut g, |_| false);
    let x = g.constant(images);
    let outs = model.forward(&mut g, &b, x).unwrap();
    let mut exact = true;
    let mut first_level_clean = true;
    let mut regularized = 0;
    for level in 0..3 {
        let targets: Vec<usize> = labels.iter().map(|l| l.level(level)).collect();
        let obj = level_objective(&mut g, &model, &taxonomy, &outs, level, &targets).unwrap();
        let c = g.value(obj.classification).data()[0];
        let combined = g.value(obj.combined).data()[0];
        exact &= combined.to_bits() == c.to_bits();
        if level == 0 {
            first_level_clean = obj.regularization.is_none();
        } else if let Some(r) = obj.regularization {
            regularized += usize::from(g.value(r).data()[0] > 0.0);
        }
    }
    let plain = losses::level_loss(&[0.7, 0.2, 0.4], 0.3, 0.0);
    exact &= plain.combined == plain.classification;
    let total = losses::total_loss(&[losses::level_loss(&[1.0], 5.0, gamma), losses::level_loss(&[2.0], 0.5, gamma)]);
    verdict(
        t == 4.0 && gamma == 16.0 && exact && first_level_clean && regularized == 2 && total == 1.0 + 2.0 + 8.0,
        format!(
            "T={t}, gamma={gamma}, gamma=0 objective equals classification bitwise: {exact}, level 1 unregularized: {first_level_clean}"
        ),
    )
}

fn regularizer_gradient_norm(target: &[f64], scores: &[f64], t: f64) -> f64 {
    let n = scores.len();
    let mut g = Graph::new();
    let tv = g.constant(Tensor::new(vec![1, n], target.to_vec()).unwrap());
    let sv = g.param(Tensor::new(vec![1, n], scores.to_vec()).unwrap());
    let kl = g.kl_divergence(tv, sv, t).unwrap();
    g.backward(kl, &Tensor::ones(&[1])).unwrap();
    g.grad(sv).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn temperature_compensation() -> Verdict {
    const TRIALS: usize = 200;
    let t = 8.0;
    let mut rng = SplitMix64::new(11);
    let centered = |rng: &mut SplitMix64, n: usize| {
        let v: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let m = v.iter().sum::<f64>() / n as f64;
        v.into_iter().map(|x| x - m).collect::<Vec<f64>>()
    };
    let mut ratios = Vec::with_capacity(TRIALS);
    for _ in 0..TRIALS {
        let n = 2 + rng.below(30) as usize;
        let target = centered(&mut rng, n);
        let scores = centered(&mut rng, n);
        ratios.push(regularizer_gradient_norm(&target, &scores, t) / regularizer_gradient_norm(&target, &scores, 2.0 * t));
    }
    let m = median(ratios);
    verdict((3.0..=5.0).contains(&m), format!("median gradient-norm ratio T=8 vs T=16: {m:.4} over {TRIALS} trials"))
}

fn report(n: u32, name: &str, v: Verdict, all: &mut Vec<Verdict>) {
    println!("{} criterion {n} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    all.push(v);
}

struct RunOutcome {
    variant: Variant,
    seed: u64,
    log: String,
    report: MetricsReport,
    backtrack: Option<MetricsReport>,
    level1_train_accuracy: f64,
    model: HseModel,
    secs: f64,
}

struct SeedData {
    taxonomy: Taxonomy,
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn seed_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::parse(DESK).expect("desk config");
    cfg.apply_override(&format!("seed={seed}")).unwrap();
    cfg.apply_override(&format!("synth.seed={}", 100 + seed)).unwrap();
    cfg
}

fn seed_data(seed: u64) -> SeedData {
    let spec: SyntheticSpec = seed_config(seed).synthetic;
    SeedData {
        taxonomy: spec.taxonomy().unwrap(),
        train: spec.dataset(0).unwrap(),
        val: spec.dataset(1).unwrap(),
        test: spec.dataset(2).unwrap(),
    }
}

fn train_run(variant: Variant, seed: u64, data: &SeedData) -> hse_core::Result<RunOutcome> {
    let t0 = Instant::now();
    let cfg = seed_config(seed);
    let model_cfg = cfg.model_config(data.taxonomy.level_sizes()).with_variant(variant);
    let tc = cfg.train_config();
    let mut model = HseModel::new(model_cfg, cfg.seed)?;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut keep = |_: &EpochRecord| Ok(());
    records.extend(train_stage1(&mut model, &data.taxonomy, &data.train, &data.val, &tc, &mut keep)?);
    let level1_train_accuracy = records
        .iter()
        .filter(|r| r.level == Some(1))
        .map(|r| r.train_accuracy[0])
        .fold(0.0, f64::max);
    records.extend(train_stage2(&mut model, &data.taxonomy, &data.train, &data.val, &tc, &mut keep)?);
    let mode = match variant {
        Variant::Baseline => EvalMode::Baseline,
        Variant::NoSerl => EvalMode::NoSerl,
        Variant::NoSglr => EvalMode::NoSglr,
        Variant::Full => EvalMode::Full,
    };
    let report = evaluate(&model, &data.taxonomy, &data.test, &tc.augment, mode)?;
    let backtrack = if variant == Variant::Baseline {
        Some(evaluate(&model, &data.taxonomy, &data.test, &tc.augment, EvalMode::Backtrack)?)
    } else {
        None
    };
    Ok(RunOutcome {
        variant,
        seed,
        log: to_jsonl(&records)?,
        report,
        backtrack,
        level1_train_accuracy,
        model,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn train_all(data: &[SeedData]) -> hse_core::Result<Vec<RunOutcome>> {
    let mut out = Vec::new();
    for (seed, d) in SEEDS.iter().zip(data) {
        for v in VARIANTS {
            let run = train_run(v, *seed, d)?;
            let acc: Vec<f64> = run.report.levels.iter().map(|l| l.accuracy_percent).collect();
            eprintln!("  seed {seed} {:<8} {:>6.1}s test accuracy {acc:?}", v.name(), run.secs);
            out.push(run);
        }
    }
    Ok(out)
}

fn runs_of(runs: &[RunOutcome], v: Variant) -> impl Iterator<Item = &RunOutcome> {
    runs.iter().filter(move |r| r.variant == v)
}

fn finest_accuracy(r: &RunOutcome) -> f64 {
    r.report.levels.last().expect("levels").accuracy
}

fn finest_inter(r: &RunOutcome) -> f64 {
    r.report.levels.last().and_then(|l| l.inter_superclass_errors).unwrap_or(0) as f64
}

fn ablation(runs: &[RunOutcome]) -> Verdict {
    let med = |v: Variant, f: fn(&RunOutcome) -> f64| median(runs_of(runs, v).map(f).collect());
    let (full, base) = (med(Variant::Full, finest_accuracy), med(Variant::Baseline, finest_accuracy));
    let (with, without) = (med(Variant::Full, finest_inter), med(Variant::NoSglr, finest_inter));
    let secs: Vec<String> = VARIANTS
        .iter()
        .map(|&v| format!("{} {:.0}s", v.name(), runs_of(runs, v).map(|r| r.secs).sum::<f64>()))
        .collect();
    let slowest = VARIANTS
        .iter()
        .map(|&v| runs_of(runs, v).map(|r| r.secs).sum::<f64>())
        .fold(0.0, f64::max);
    let others: Vec<String> = [Variant::NoSerl, Variant::NoSglr]
        .iter()
        .map(|&v| format!("{} {:.1}%", v.name(), 100.0 * med(v, finest_accuracy)))
        .collect();
    verdict(
        full >= base && with <= without && slowest <= 45.0 * 60.0,
        format!(
            "median finest accuracy full {:.1}% vs baseline {:.1}% ({}); median finest inter-superclass errors with SGLR {with} vs without {without}; runtime {}",
            100.0 * full,
            100.0 * base,
            others.join(", "),
            secs.join(", ")
        ),
    )
}

fn determinism(first: &[RunOutcome], second: &[RunOutcome]) -> Verdict {
    let mut mismatched = Vec::new();
    for (a, b) in first.iter().zip(second) {
        let same = a.log == b.log
            && a.report == b.report
            && a.model.params.iter().zip(b.model.params.iter()).all(|((_, x), (_, y))| {
                x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            });
        if !same {
            mismatched.push(format!("{} seed {}", a.variant.name(), a.seed));
        }
    }
    let bytes: usize = first.iter().map(|r| r.log.len()).sum();
    verdict(
        mismatched.is_empty() && first.len() == second.len(),
        if mismatched.is_empty() {
            format!("{} runs repeated, {bytes} bytes of metrics logs identical, parameters bitwise equal", first.len())
        } else {
            format!("differing runs: {mismatched:?}")
        },
    )
}

fn backtrack_consistency(runs: &[RunOutcome]) -> Verdict {
    let backtrack: Vec<f64> = runs.iter().filter_map(|r| r.backtrack.as_ref()).map(|b| b.consistency_rate).collect();
    let full = median(runs_of(runs, Variant::Full).map(|r| r.report.consistency_rate).collect());
    let base = median(runs_of(runs, Variant::Baseline).map(|r| r.report.consistency_rate).collect());
    verdict(
        !backtrack.is_empty() && backtrack.iter().all(|&c| c == 1.0) && full >= base,
        format!("backtrack consistency {backtrack:?}; median consistency full {full:.4} vs baseline {base:.4}"),
    )
}

fn checkpoint_round_trip(runs: &[RunOutcome], data: &SeedData) -> Verdict {
    let run = runs_of(runs, Variant::Full).next().expect("full run");
    let cfg = seed_config(run.seed);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.ntc");
    let result = (|| -> hse_core::Result<(usize, bool)> {
        run.model.save(&path)?;
        let back = HseModel::load(run.model.config.clone(), &path)?;
        let a = predict_dataset(&run.model, &data.test, &cfg.train.augment, 32)?;
        let b = predict_dataset(&back, &data.test, &cfg.train.augment, 32)?;
        let values: usize = a.iter().map(Tensor::len).sum();
        let same = a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            });
        Ok((values, same))
    })();
    match result {
        Ok((values, same)) => verdict(same, format!("{values} test scores compared after save/load, 0 ulps apart: {same}")),
        Err(e) => verdict(false, e.to_string()),
    }
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let mut verdicts: Vec<Verdict> = Vec::new();
    report(1, "gradient suite", gradient_suite(), &mut verdicts);
    report(2, "oracle equivalence", oracle_equivalence(), &mut verdicts);
    report(3, "taxonomy fixtures", taxonomy_fixtures(), &mut verdicts);
    report(4, "loss wiring", loss_wiring(), &mut verdicts);
    report(5, "temperature compensation", temperature_compensation(), &mut verdicts);

    let data: Vec<SeedData> = SEEDS.iter().map(|&s| seed_data(s)).collect();
    eprintln!("training {} runs for the ablation", SEEDS.len() * VARIANTS.len());
    let first = train_all(&data);
    eprintln!("repeating every run");
    let second = train_all(&data);
    match (&first, &second) {
        (Ok(first), Ok(second)) => {
            let level1 = first.iter().map(|r| r.level1_train_accuracy).fold(1.0, f64::min);
            println!("note: lowest level-1 training accuracy after stage 1 across runs: {:.1}%", 100.0 * level1);
            report(6, "desk-scale ablation", ablation(first), &mut verdicts);
            report(7, "determinism", determinism(first, second), &mut verdicts);
            report(8, "backtrack consistency", backtrack_consistency(first), &mut verdicts);
            report(9, "checkpoint round trip", checkpoint_round_trip(first, &data[0]), &mut verdicts);
        }
        (Err(e), _) | (_, Err(e)) => {
            for (n, name) in [(6, "desk-scale ablation"), (7, "determinism"), (8, "backtrack consistency"), (9, "checkpoint round trip")] {
                report(n, name, verdict(false, format!("training failed: {e}")), &mut verdicts);
            }
        }
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        verdicts.len() - failed,
        verdicts.len(),
        t0.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
