//! Acceptance suite. Runs every criterion and prints one line each. Failures
//! are reported but only change the exit status when
//! `FASDG_ACCEPTANCE_STRICT=1` is set.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fasdg::cli::main_with_args;
use fasdg::data::{default_domains, generate_counts, Sample, SyntheticDomainSpec};
use fasdg::haf::{haf_forward, haf_gradcheck, HafConfig, HafGradcheckConfig, HafParams};
use fasdg::numerics::{op_gradcheck_suite, Tensor};
use fasdg::protocol::{
    compute_auc, compute_far_frr, compute_hter, run_protocol, EvalRun, ExperimentAssets, ProtocolConfig,
    ProtocolKind, ThresholdPolicy,
};
use fasdg::tevd::{
    multimodal_classifier_loss, total_loss, triplet_from_distances, triplet_loss, Classifier, FeatureTriplet,
};
use fasdg::text::{EncoderKind, PromptLibrary, TextEncoder};
use fasdg::trainer::{end_to_end_gradcheck, TrainConfig, Variant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn synthetic_domains() -> BTreeMap<String, Vec<Sample>> {
    default_domains()
        .into_iter()
        .map(|p| (p.spec.domain.clone(), p.generate().expect("generate")))
        .collect()
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut failed = Vec::new();
    let mut checked = 0;
    for (name, r) in op_gradcheck_suite(0, 1e-6, 1e-4).unwrap() {
        checked += 1;
        if !r.passed {
            failed.push(name.to_string());
        }
    }
    let haf = haf_gradcheck(&HafGradcheckConfig::default()).unwrap();
    if !haf.passed {
        failed.push("fusion".into());
    }
    let cfg = TrainConfig::micro();
    let spec = SyntheticDomainSpec {
        height: 16,
        width: 16,
        ..SyntheticDomainSpec::new("micro", 5)
    };
    let lib = PromptLibrary::shipped();
    let enc = TextEncoder::hashed(EncoderKind::Hash, cfg.model.out_dim).unwrap();
    for (counts, label) in [([1, 0, 0], "1-sample"), ([2, 1, 1], "4-sample")] {
        let samples = generate_counts(&spec, counts).unwrap();
        let r = end_to_end_gradcheck(&cfg, &samples, &lib, &enc, 1e-5, 1e-4).unwrap();
        if !r.passed {
            failed.push(format!("objective {label} (max rel {:.2e})", r.max_rel_error()));
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{checked} ops + fusion + objective, failures {:?}, {:.1}s (< 60s)",
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn permutation_invariance() -> Outcome {
    let cfg = HafConfig::default();
    let layers = 4;
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = HafParams::init(cfg, &mut rng).unwrap();
        let x: Vec<f64> = (0..layers * cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut order: Vec<usize> = (0..layers - 1).collect();
        while order.iter().enumerate().all(|(i, &o)| i == o) {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        order.push(layers - 1);
        let permuted: Vec<f64> = order
            .iter()
            .flat_map(|&r| x[r * cfg.dim..(r + 1) * cfg.dim].to_vec())
            .collect();
        let a = haf_forward(&Tensor::matrix(layers, cfg.dim, x).unwrap(), &params).unwrap();
        let b = haf_forward(&Tensor::matrix(layers, cfg.dim, permuted).unwrap(), &params).unwrap();
        for (u, v) in a.vf.iter().zip(&b.vf) {
            worst = worst.max((u - v).abs());
        }
    }
    outcome(worst <= 1e-6, format!("100 seeds, max |dV| = {worst:.3e} (<= 1e-6)"))
}

fn loss_identities() -> Outcome {
    let mut errs: Vec<f64> = vec![
        triplet_from_distances(0.5, 1.0, 0.3),
        (triplet_from_distances(0.9, 1.0, 0.3) - 0.2).abs(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut unit = || -> Vec<f64> { (0..16).map(|_| rng.sample(StandardNormal)).collect() };
    let (v, t) = (unit(), unit());
    let same = FeatureTriplet::normalized(&v, &t, &t).unwrap();
    for alpha in [0.0, 0.2, 0.7] {
        errs.push((triplet_loss(&same, alpha).unwrap() - alpha).abs());
    }
    let tri_ok = errs.iter().all(|&e| e <= 1e-12);
    let g = Classifier::zeros(16);
    let mut cls_err: f64 = 0.0;
    for y in [0u8, 1] {
        let t = FeatureTriplet::normalized(&unit(), &unit(), &unit()).unwrap();
        let l = multimodal_classifier_loss(&g, &t, y).unwrap();
        cls_err = cls_err.max((l - 3.0 * std::f64::consts::LN_2).abs());
    }
    let cls_ok = cls_err <= 1e-9;
    let lam_ok = [(2.0794, 0.37), (0.0, 5.0), (1.5, 0.0)]
        .iter()
        .all(|&(c, tr)| total_loss(c, tr, 0.0).unwrap() == c);
    outcome(
        tri_ok && cls_ok && lam_ok,
        format!(
            "triplet max err {:.1e} (<= 1e-12), uniform CE err {cls_err:.1e} (<= 1e-9), lambda=0 exact {lam_ok}",
            errs.iter().cloned().fold(0.0, f64::max)
        ),
    )
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut acc, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &b) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            acc += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / pairs
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 12_000;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(2..=20);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..5) as f64 / 4.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let run = EvalRun::new(scores.clone(), labels.clone()).unwrap();
        worst = worst.max((compute_auc(&run) - pairwise_auc(&scores, &labels)).abs());
    }
    let auc_ok = worst <= 1e-12;
    let run = EvalRun::new(vec![0.7, 0.3, 0.6, 0.2], vec![1, 1, 0, 0]).unwrap();
    let (far, frr) = compute_far_frr(&run, 0.5);
    let half = EvalRun::new(vec![0.5; 6], vec![1, 1, 1, 0, 0, 0]).unwrap();
    let perfect = EvalRun::new(vec![0.9, 0.8, 0.2, 0.1], vec![1, 1, 0, 0]).unwrap();
    let mut scores = vec![0.9, 0.1, 0.2, 0.3, 0.4];
    let mut labels = vec![0u8; 5];
    scores.extend([0.3, 0.6, 0.7, 0.8, 0.9, 0.95, 0.65, 0.75, 0.85, 0.55]);
    labels.extend([1u8; 10]);
    let fixed = EvalRun::new(scores, labels)
        .unwrap()
        .with_policy(ThresholdPolicy::Fixed(0.5));
    let (h, tau) = compute_hter(&fixed);
    let hter_ok = far == 0.5
        && frr == 0.5
        && compute_hter(&half).0 == 0.5
        && compute_hter(&perfect).0 == 0.0
        && compute_far_frr(&run, 0.0) == (1.0, 0.0)
        && compute_far_frr(&fixed, 0.5) == (0.2, 0.1)
        && tau == 0.5
        && (h - 0.15).abs() <= 1e-15;
    outcome(
        auc_ok && hter_ok,
        format!("{cases} randomized runs of size <= 20, max |AUC - pairwise| = {worst:.1e}; HTER examples exact {hter_ok}"),
    )
}

fn loo_generalization() -> Outcome {
    let t0 = Instant::now();
    let domains = synthetic_domains();
    let names: Vec<&str> = domains.keys().map(String::as_str).collect();
    let lib = PromptLibrary::shipped();
    let train = TrainConfig::default();
    let enc = TextEncoder::hashed(EncoderKind::Hash, train.model.out_dim).unwrap();
    let cfg = ProtocolConfig {
        kind: ProtocolKind::Ablation(Variant::ABLATIONS.to_vec()),
        ..ProtocolConfig::loo(&names, (0..5).collect())
    };
    let assets = ExperimentAssets {
        domains: &domains,
        library: &lib,
        encoder: &enc,
        train: &train,
    };
    let report = run_protocol(&cfg, &assets).unwrap();
    let elapsed = t0.elapsed();
    let full = report.mean_auc(Variant::Full.name()).unwrap();
    let mut detail = format!("full {full:.4} (>= 0.95)");
    let mut ordered = true;
    for v in &Variant::ABLATIONS[1..] {
        let a = report.mean_auc(v.name()).unwrap();
        ordered &= a < full;
        detail.push_str(&format!(", {v} {a:.4}"));
    }
    detail.push_str(&format!("; {} runs in {:.0}s (< 600s)", report.rows.len(), elapsed.as_secs_f64()));
    outcome(
        full >= 0.95 && ordered && elapsed < Duration::from_secs(600),
        detail,
    )
}

fn few_shot() -> Outcome {
    let domains = synthetic_domains();
    let lib = PromptLibrary::shipped();
    let train = TrainConfig::default();
    let enc = TextEncoder::hashed(EncoderKind::Hash, train.model.out_dim).unwrap();
    let cfg = ProtocolConfig {
        kind: ProtocolKind::FewShot(5),
        sources: Some(vec!["SynC".into(), "SynI".into(), "SynM".into()]),
        ..ProtocolConfig::loo(&["SynO"], (0..5).collect())
    };
    let assets = ExperimentAssets {
        domains: &domains,
        library: &lib,
        encoder: &enc,
        train: &train,
    };
    let report = run_protocol(&cfg, &assets).unwrap();
    let sizes_ok = report.rows.iter().all(|r| r.train_samples == 30);
    let auc = report.mean_auc(Variant::Full.name()).unwrap();
    outcome(
        sizes_ok && auc > 0.5,
        format!("30 training samples per run {sizes_ok}, mean held-out AUC {auc:.4} (> 0.5)"),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let mut full = vec!["fasdg"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_default()
}

fn language_free() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lib = d.join("prompts.txt");
    std::fs::write(&lib, fasdg::text::DEFAULT_LIBRARY).unwrap();
    std::fs::write(
        d.join("run.cfg"),
        "[text]\nlibrary = prompts.txt\n[train]\nepochs = 3\n[protocol]\nsources = SynC,SynI,SynM\ntargets = SynO\n",
    )
    .unwrap();
    let cfg = d.join("run.cfg");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (ckpt, a, b, sa, sb) = (d.join("m.bin"), d.join("a.csv"), d.join("b.csv"), d.join("sa.csv"), d.join("sb.csv"));
    let trained = run_cli(&["train", "--config", &s(&cfg), "--out", &s(&ckpt)]) == 0;
    let first = run_cli(&["eval", "--config", &s(&cfg), "--checkpoint", &s(&ckpt), "--out", &s(&a), "--scores", &s(&sa)]) == 0;
    std::fs::remove_file(&lib).unwrap();
    let second = run_cli(&["eval", "--config", &s(&cfg), "--checkpoint", &s(&ckpt), "--out", &s(&b), "--scores", &s(&sb)]) == 0;
    let same = !read(&a).is_empty() && read(&a) == read(&b) && read(&sa) == read(&sb);
    outcome(
        trained && first && second && same,
        format!("eval with library {first}, after deleting it {second}, reports byte-identical {same}"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let args = |out: &str| {
        vec![
            "protocol".to_string(),
            "--seed".into(),
            "17".into(),
            "--set".into(),
            "train.epochs=3".into(),
            "--set".into(),
            "protocol.num_seeds=2".into(),
            "--out".into(),
            out.into(),
        ]
    };
    let ok_a = main_with_args(std::iter::once("fasdg".to_string()).chain(args(&s(&a)))) == 0;
    let ok_b = main_with_args(std::iter::once("fasdg".to_string()).chain(args(&s(&b)))) == 0;
    let (ra, rb) = (read(&a), read(&b));
    let rows = String::from_utf8_lossy(&ra).lines().count().saturating_sub(1);
    let same = rows > 0 && ra == rb;
    outcome(
        ok_a && ok_b && same,
        format!("two protocol invocations at seed 17, {rows} rows each, byte-identical {same}"),
    )
}

fn prompt_sweep() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let code = run_cli(&[
        "sweep",
        "--counts",
        "1,4,16,64",
        "--set",
        "protocol.targets=SynO",
        "--set",
        "protocol.num_seeds=1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = String::from_utf8(read(&out)).unwrap_or_default();
    let ns: Vec<String> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap_or("").to_string())
        .collect();
    let dat = dir.path().join("sweep.dat").exists();
    let ok = code == 0 && ns == ["1", "4", "16", "64"] && dat;
    outcome(ok, format!("exit {code}, n_prompts per row {ns:?}, gnuplot file {dat}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("fusion permutation invariance", permutation_invariance),
        ("loss identities", loss_identities),
        ("metric oracle", metric_oracle),
        ("synthetic leave-one-out generalization", loo_generalization),
        ("few-shot protocol", few_shot),
        ("language-free inference", language_free),
        ("determinism", determinism),
        ("prompt sweep", prompt_sweep),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let res = std::panic::catch_unwind(run).unwrap_or_else(|_| outcome(false, "panicked"));
        if !res.pass {
            failures += 1;
        }
        println!(
            "criterion {}: {} ... {} [{}] ({:.1}s)",
            i + 1,
            name,
            if res.pass { "PASS" } else { "FAIL" },
            res.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("acceptance: {failures} criterion(s) failed");
        if std::env::var("FASDG_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
        return;
    }
    println!("acceptance: all criteria passed");
}
