//! Evaluation metrics and the cross-domain experiment protocols.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::text::{ImageType, PromptLibrary, TextEncoder};
use crate::trainer::{evaluate, train, TrainConfig, Variant};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ThresholdPolicy {
    /// Grid point where FAR and FRR are closest.
    #[default]
    Eer,
    Fixed(f64),
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Eer => f.write_str("eer"),
            ThresholdPolicy::Fixed(t) => write!(f, "fixed({t})"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "eer" {
            return Ok(ThresholdPolicy::Eer);
        }
        let inner = s
            .strip_prefix("fixed(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("fixed:"))
            .ok_or_else(|| Error::invalid(format!("unknown threshold policy {s:?}")))?;
        let t: f64 = inner
            .parse()
            .map_err(|_| Error::invalid(format!("bad threshold {inner:?}")))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("threshold {t} outside [0, 1]")));
        }
        Ok(ThresholdPolicy::Fixed(t))
    }
}

/// Scores of one evaluation pass. Higher scores mean "more live".
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub domains: Vec<String>,
    pub ids: Vec<String>,
    pub descriptor: String,
    pub policy: ThresholdPolicy,
}

impl EvalRun {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let n = scores.len();
        Self::with_meta(
            scores,
            labels,
            vec![String::new(); n],
            (0..n).map(|i| i.to_string()).collect(),
            String::new(),
            ThresholdPolicy::Eer,
        )
    }

    pub fn with_meta(
        scores: Vec<f64>,
        labels: Vec<u8>,
        domains: Vec<String>,
        ids: Vec<String>,
        descriptor: String,
        policy: ThresholdPolicy,
    ) -> Result<Self> {
        let n = scores.len();
        if labels.len() != n || domains.len() != n || ids.len() != n {
            return Err(Error::shape("evaluation columns differ in length"));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid(format!("score {s} outside [0, 1]")));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::invalid("labels must be binary"));
        }
        if !labels.contains(&0) || !labels.contains(&1) {
            return Err(Error::invalid("evaluation needs both live and attack samples"));
        }
        Ok(EvalRun {
            scores,
            labels,
            domains,
            ids,
            descriptor,
            policy,
        })
    }

    pub fn with_policy(mut self, policy: ThresholdPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut real = Vec::new();
        let mut spoof = Vec::new();
        for (&s, &y) in self.scores.iter().zip(&self.labels) {
            if y == 1 {
                real.push(s);
            } else {
                spoof.push(s);
            }
        }
        (real, spoof)
    }
}

/// FAR: attacks scored `>= tau`. FRR: live samples scored `< tau`.
pub fn compute_far_frr(run: &EvalRun, tau: f64) -> (f64, f64) {
    let (real, spoof) = run.split();
    let far = spoof.iter().filter(|&&s| s >= tau).count() as f64 / spoof.len() as f64;
    let frr = real.iter().filter(|&&s| s < tau).count() as f64 / real.len() as f64;
    (far, frr)
}

/// Distinct observed scores plus 0 and 1, ascending.
pub fn threshold_grid(run: &EvalRun) -> Vec<f64> {
    let mut grid: Vec<f64> = run.scores.iter().copied().chain([0.0, 1.0]).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// `(HTER, τ)` under the run's threshold policy.
pub fn compute_hter(run: &EvalRun) -> (f64, f64) {
    let tau = match run.policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::Eer => {
            let mut best = (f64::INFINITY, 0.0);
            for t in threshold_grid(run) {
                let (far, frr) = compute_far_frr(run, t);
                let gap = (far - frr).abs();
                if gap < best.0 {
                    best = (gap, t);
                }
            }
            best.1
        }
    };
    let (far, frr) = compute_far_frr(run, tau);
    ((far + frr) / 2.0, tau)
}

/// ROC points `(FPR, TPR)` from the strictest threshold down, one point per
/// distinct score, starting at `(0, 0)`.
pub fn roc_curve(run: &EvalRun) -> Vec<(f64, f64)> {
    let (real, spoof) = run.split();
    let mut order: Vec<(f64, u8)> = run
        .scores
        .iter()
        .copied()
        .zip(run.labels.iter().copied())
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (real.len() as f64, spoof.len() as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = order[i].0;
        while i < order.len() && order[i].0 == s {
            if order[i].1 == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / nn, tp / np));
    }
    pts
}

/// Trapezoidal area under [`roc_curve`]. Ties between a live and an attack
/// score contribute one half.
pub fn compute_auc(run: &EvalRun) -> f64 {
    roc_curve(run)
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolKind {
    Loo,
    LimitedSource,
    FewShot(usize),
    ZeroShot,
    Ablation(Vec<Variant>),
    PromptSweep(Vec<usize>),
}

impl ProtocolKind {
    pub fn name(&self) -> String {
        match self {
            ProtocolKind::Loo => "loo".into(),
            ProtocolKind::LimitedSource => "limited_source".into(),
            ProtocolKind::FewShot(n) => format!("few_shot({n})"),
            ProtocolKind::ZeroShot => "zero_shot".into(),
            ProtocolKind::Ablation(_) => "ablation".into(),
            ProtocolKind::PromptSweep(_) => "prompt_sweep".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    /// Held-out domains; each one is evaluated in turn.
    pub targets: Vec<String>,
    /// Source domains. `None` trains on every available domain except the
    /// target.
    pub sources: Option<Vec<String>>,
    pub seeds: Vec<u64>,
    pub policy: ThresholdPolicy,
}

impl ProtocolConfig {
    pub fn loo(domains: &[&str], seeds: Vec<u64>) -> Self {
        ProtocolConfig {
            kind: ProtocolKind::Loo,
            targets: domains.iter().map(|d| d.to_string()).collect(),
            sources: None,
            seeds,
            policy: ThresholdPolicy::Eer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::invalid("protocol needs at least one target domain"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("protocol needs at least one seed"));
        }
        if let Some(src) = &self.sources {
            if src.is_empty() {
                return Err(Error::invalid("explicit source list is empty"));
            }
            for t in &self.targets {
                if src.contains(t) {
                    return Err(Error::invalid(format!("target {t} is also a source")));
                }
            }
        }
        match &self.kind {
            ProtocolKind::FewShot(0) => Err(Error::invalid("few-shot n must be at least 1")),
            ProtocolKind::LimitedSource if self.sources.is_none() => Err(Error::invalid(
                "limited-source protocol needs an explicit source list",
            )),
            ProtocolKind::Ablation(v) if v.is_empty() => {
                Err(Error::invalid("ablation needs at least one variant"))
            }
            ProtocolKind::PromptSweep(ns) if ns.is_empty() || ns.contains(&0) => {
                Err(Error::invalid("prompt sweep needs positive prompt counts"))
            }
            _ => Ok(()),
        }
    }
}

/// Everything a protocol run needs besides its configuration.
pub struct ExperimentAssets<'a> {
    pub domains: &'a BTreeMap<String, Vec<Sample>>,
    pub library: &'a PromptLibrary,
    pub encoder: &'a TextEncoder,
    pub train: &'a TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub protocol: String,
    pub target: String,
    pub seed: u64,
    pub variant: String,
    pub n_prompts: usize,
    pub hter: f64,
    pub auc: f64,
    pub tau: f64,
    pub threshold_policy: String,
    pub train_samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "protocol,target,seed,variant,n_prompts,hter,auc,tau,threshold_policy";

impl Report {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{}",
                r.protocol, r.target, r.seed, r.variant, r.n_prompts, r.hter, r.auc, r.tau, r.threshold_policy
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 report")
    }

    /// Seed-averaged rows keyed by `(target, variant, n_prompts)`, in first
    /// appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(String, String, usize)> = Vec::new();
        let mut groups: BTreeMap<(String, String, usize), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            let k = (r.target.clone(), r.variant.clone(), r.n_prompts);
            if !groups.contains_key(&k) {
                keys.push(k.clone());
            }
            groups.entry(k).or_default().push(r);
        }
        keys.into_iter()
            .map(|k| {
                let rows = &groups[&k];
                let (hm, hs) = mean_std(rows.iter().map(|r| r.hter));
                let (am, as_) = mean_std(rows.iter().map(|r| r.auc));
                SummaryRow {
                    target: k.0,
                    variant: k.1,
                    n_prompts: k.2,
                    seeds: rows.len(),
                    hter_mean: hm,
                    hter_std: hs,
                    auc_mean: am,
                    auc_std: as_,
                }
            })
            .collect()
    }

    /// Fixed-width table with HTER and AUC in percent, mean ± std.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:<12} {:>9} {:>18} {:>18}\n",
            "target", "variant", "n_prompts", "HTER(%)", "AUC(%)"
        );
        for r in self.summary() {
            s.push_str(&format!(
                "{:<10} {:<12} {:>9} {:>18} {:>18}\n",
                r.target,
                r.variant,
                r.n_prompts,
                format!("{:.2} ± {:.2}", 100.0 * r.hter_mean, 100.0 * r.hter_std),
                format!("{:.2} ± {:.2}", 100.0 * r.auc_mean, 100.0 * r.auc_std),
            ));
        }
        s
    }

    /// Seed-averaged AUC of one variant over every target.
    pub fn mean_auc(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.auc)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub target: String,
    pub variant: String,
    pub n_prompts: usize,
    pub seeds: usize,
    pub hter_mean: f64,
    pub hter_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

fn mean_std(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// `n` live and `n` attack samples per source domain. Attack samples are
/// drawn from print and replay together.
pub fn few_shot_subset(
    domains: &BTreeMap<String, Vec<Sample>>,
    sources: &[String],
    n: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for d in sources {
        let samples = domains
            .get(d)
            .ok_or_else(|| Error::invalid(format!("unknown domain {d}")))?;
        let mut real: Vec<&Sample> = samples.iter().filter(|s| s.label == 1).collect();
        let mut spoof: Vec<&Sample> = samples.iter().filter(|s| s.label == 0).collect();
        if real.len() < n || spoof.len() < n {
            return Err(Error::invalid(format!(
                "domain {d} has {} live / {} attack samples, few-shot needs {n} of each",
                real.len(),
                spoof.len()
            )));
        }
        real.shuffle(&mut rng);
        spoof.shuffle(&mut rng);
        out.extend(real[..n].iter().map(|s| (*s).clone()));
        out.extend(spoof[..n].iter().map(|s| (*s).clone()));
    }
    Ok(out)
}

struct RunSpec {
    variant: Variant,
    n_prompts: Option<usize>,
    zero_shot: bool,
}

/// Train and evaluate every (target, seed, setting) combination in a fixed
/// order.
pub fn run_protocol(cfg: &ProtocolConfig, assets: &ExperimentAssets) -> Result<Report> {
    cfg.validate()?;
    for t in &cfg.targets {
        if !assets.domains.contains_key(t) {
            return Err(Error::invalid(format!("unknown target domain {t}")));
        }
    }
    let base = assets.train;
    let specs: Vec<RunSpec> = match &cfg.kind {
        ProtocolKind::Ablation(vs) => vs
            .iter()
            .map(|&variant| RunSpec {
                variant,
                n_prompts: None,
                zero_shot: false,
            })
            .collect(),
        ProtocolKind::PromptSweep(ns) => ns
            .iter()
            .map(|&n| RunSpec {
                variant: base.variant,
                n_prompts: Some(n),
                zero_shot: false,
            })
            .collect(),
        ProtocolKind::ZeroShot => vec![RunSpec {
            variant: base.variant,
            n_prompts: None,
            zero_shot: true,
        }],
        _ => vec![RunSpec {
            variant: base.variant,
            n_prompts: None,
            zero_shot: base.zero_shot,
        }],
    };
    let mut report = Report::default();
    for target in &cfg.targets {
        let sources: Vec<String> = match &cfg.sources {
            Some(s) => s.clone(),
            None => assets
                .domains
                .keys()
                .filter(|d| *d != target)
                .cloned()
                .collect(),
        };
        for s in &sources {
            if !assets.domains.contains_key(s) {
                return Err(Error::invalid(format!("unknown source domain {s}")));
            }
        }
        if sources.is_empty() {
            return Err(Error::invalid(format!("no source domains for target {target}")));
        }
        let test = &assets.domains[target];
        for &seed in &cfg.seeds {
            let train_set: Vec<Sample> = match cfg.kind {
                ProtocolKind::FewShot(n) => few_shot_subset(assets.domains, &sources, n, seed)?,
                _ => sources
                    .iter()
                    .flat_map(|d| assets.domains[d].iter().cloned())
                    .collect(),
            };
            for spec in &specs {
                let lib = match spec.n_prompts {
                    Some(n) => assets.library.truncated(n)?,
                    None => assets.library.clone(),
                };
                let n_prompts = lib.active(ImageType::Real).len();
                let mut tc = base.clone();
                tc.seed = seed;
                tc.variant = spec.variant;
                tc.zero_shot = spec.zero_shot;
                let outcome = train(&tc, &train_set, &lib, assets.encoder)?;
                if let Some(msg) = outcome.diverged {
                    return Err(Error::Diverged {
                        epoch: outcome.checkpoint.epoch,
                        message: msg,
                    });
                }
                let run = evaluate(&outcome.checkpoint, test)?.with_policy(cfg.policy);
                let (hter, tau) = compute_hter(&run);
                let auc = compute_auc(&run);
                log::info!(
                    "{} target={target} seed={seed} variant={} n={n_prompts}: hter={hter:.4} auc={auc:.4}",
                    cfg.kind.name(),
                    spec.variant
                );
                report.rows.push(ReportRow {
                    protocol: cfg.kind.name(),
                    target: target.clone(),
                    seed,
                    variant: spec.variant.to_string(),
                    n_prompts,
                    hter,
                    auc,
                    tau,
                    threshold_policy: cfg.policy.to_string(),
                    train_samples: train_set.len(),
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(real: &[f64], spoof: &[f64]) -> EvalRun {
        let mut s = real.to_vec();
        s.extend_from_slice(spoof);
        let mut y = vec![1u8; real.len()];
        y.extend(vec![0u8; spoof.len()]);
        EvalRun::new(s, y).unwrap()
    }

    fn pairwise(r: &EvalRun) -> f64 {
        let (real, spoof) = r.split();
        let mut acc = 0.0;
        for a in &real {
            for b in &spoof {
                acc += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (real.len() * spoof.len()) as f64
    }

    #[test]
    fn far_frr_examples() {
        let r = run(&[0.7, 0.3], &[0.6, 0.2]);
        assert_eq!(compute_far_frr(&r, 0.5), (0.5, 0.5));
        let p = run(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(compute_far_frr(&p, 0.5), (0.0, 0.0));
        assert_eq!(compute_far_frr(&r, 0.0), (1.0, 0.0));
    }

    #[test]
    fn hter_examples() {
        // five attacks and ten live samples: FAR 1/5, FRR 1/10 at τ = 0.5
        let r = run(
            &[0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.1],
            &[0.6, 0.1, 0.1, 0.1, 0.1],
        )
        .with_policy(ThresholdPolicy::Fixed(0.5));
        let (h, t) = compute_hter(&r);
        assert_eq!(t, 0.5);
        assert!((h - 0.15).abs() < 1e-15);
        let p = run(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(compute_hter(&p).0, 0.0);
    }

    #[test]
    fn constant_scores_give_half() {
        let r = run(&[0.5, 0.5], &[0.5, 0.5]);
        let (h, t) = compute_hter(&r);
        assert_eq!(h, 0.5);
        assert_eq!(t, 0.0);
        assert_eq!(compute_hter(&r.clone().with_policy(ThresholdPolicy::Fixed(0.7))).0, 0.5);
        assert_eq!(compute_auc(&r), 0.5);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&run(&[0.9, 0.8], &[0.1, 0.2])), 1.0);
        assert_eq!(compute_auc(&run(&[0.9, 0.4], &[0.6, 0.1])), 0.75);
        assert_eq!(compute_auc(&run(&[0.1, 0.2], &[0.9, 0.8])), 0.0);
    }

    #[test]
    fn invalid_runs() {
        assert!(EvalRun::new(vec![0.5, 0.6], vec![1, 1]).is_err());
        assert!(EvalRun::new(vec![0.5, 1.5], vec![1, 0]).is_err());
        assert!(EvalRun::new(vec![0.5, f64::NAN], vec![1, 0]).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("eer".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Eer);
        assert_eq!(
            "fixed(0.25)".parse::<ThresholdPolicy>().unwrap(),
            ThresholdPolicy::Fixed(0.25)
        );
        assert!("fixed(2)".parse::<ThresholdPolicy>().is_err());
    }

    #[test]
    fn report_csv_and_summary() {
        let row = |seed, auc| ReportRow {
            protocol: "loo".into(),
            target: "A".into(),
            seed,
            variant: "full".into(),
            n_prompts: 64,
            hter: 0.1,
            auc,
            tau: 0.5,
            threshold_policy: "eer".into(),
            train_samples: 10,
        };
        let r = Report {
            rows: vec![row(0, 0.9), row(1, 0.7)],
        };
        let csv = r.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        assert_eq!(csv.lines().count(), 3);
        let s = r.summary();
        assert_eq!(s.len(), 1);
        assert!((s[0].auc_mean - 0.8).abs() < 1e-12);
        assert!((s[0].auc_std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(r.summary_table().contains("80.00"));
    }

    #[test]
    fn config_validation() {
        let mut c = ProtocolConfig::loo(&["A", "B"], vec![0]);
        assert!(c.validate().is_ok());
        c.sources = Some(vec!["A".into()]);
        assert!(c.validate().is_err());
        c.sources = None;
        c.kind = ProtocolKind::FewShot(0);
        assert!(c.validate().is_err());
        c.kind = ProtocolKind::LimitedSource;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(
            real in prop::collection::vec(0u8..6, 1..10),
            spoof in prop::collection::vec(0u8..6, 1..10),
        ) {
            // coarse scores force plenty of ties
            let r = run(
                &real.iter().map(|&v| v as f64 / 5.0).collect::<Vec<_>>(),
                &spoof.iter().map(|&v| v as f64 / 5.0).collect::<Vec<_>>(),
            );
            prop_assert!((compute_auc(&r) - pairwise(&r)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_cube(
            real in prop::collection::vec(0.0f64..1.0, 1..10),
            spoof in prop::collection::vec(0.0f64..1.0, 1..10),
        ) {
            let a = compute_auc(&run(&real, &spoof));
            let cube = |v: &[f64]| v.iter().map(|x| x * x * x).collect::<Vec<_>>();
            let b = compute_auc(&run(&cube(&real), &cube(&spoof)));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn eer_hter_is_grid_minimum(
            real in prop::collection::vec(0.0f64..1.0, 1..10),
            spoof in prop::collection::vec(0.0f64..1.0, 1..10),
        ) {
            let r = run(&real, &spoof);
            let (h, t) = compute_hter(&r);
            let (far, frr) = compute_far_frr(&r, t);
            prop_assert_eq!(h, (far + frr) / 2.0);
            for g in threshold_grid(&r) {
                let (fa, fr) = compute_far_frr(&r, g);
                prop_assert!((far - frr).abs() <= (fa - fr).abs());
                if (fa - fr).abs() == (far - frr).abs() {
                    prop_assert!(t <= g);
                }
            }
        }
    }
}
