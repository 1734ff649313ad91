//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on configuration or domain errors (one-line
//! diagnostic on stderr), 2 on argument errors (usage on stderr).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{default_domains, export_png, generate_counts, load_directory, Sample, SyntheticDomainSpec};
use crate::error::{Error, Result};
use crate::haf::{haf_gradcheck, write_attention_csv, HafGradcheckConfig};
use crate::numerics::op_gradcheck_suite;
use crate::protocol::{compute_auc, compute_hter, run_protocol, ExperimentAssets, Report, ReportRow};
use crate::text::{EncoderKind, PromptLibrary, TextEncoder};
use crate::trainer::{
    dump_embeddings, end_to_end_gradcheck, evaluate, train, write_training_log, Checkpoint, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "fasdg",
    version,
    about = "Text-guided domain-generalized face anti-spoofing at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Master seed (synthetic data seed offset for gen-data).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Key-value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic domains as PNG files under `<out>/<domain>/<type>/`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training log CSV (default: `<out>.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score target domains with a checkpoint, without any text.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-sample scores CSV.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Run the configured cross-domain protocol and write a report.
    Protocol {
        #[command(flatten)]
        common: Common,
        /// Seed-averaged summary table.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Prompt-count sweep; writes a report and a gnuplot data file.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated prompt counts per image type.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        /// Gnuplot data file (default: `<out>.dat`).
        #[arg(long)]
        dat: Option<PathBuf>,
    },
    /// Finite-difference checks of every op, the fusion block and the full
    /// objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Export normalized fused features, optionally with fusion attention.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Head-averaged fusion attention CSV.
        #[arg(long)]
        attention: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Protocol { common, .. }
            | Command::Sweep { common, .. }
            | Command::Gradcheck { common }
            | Command::Dump { common, .. } => common,
        }
    }
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.command.common().verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match std::panic::catch_unwind(|| execute(&cli.command)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            1
        }
        Err(_) => {
            eprintln!("error: internal failure");
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn resolve(common: &Common, seed_key: &str) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.set_pair(o)?;
    }
    if let Some(s) = common.seed {
        cfg.set(seed_key, &s.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every domain keyed by name: the directory tree when `data.root` is set,
/// otherwise the synthetic domains.
pub fn load_domains(cfg: &RunConfig) -> Result<BTreeMap<String, Vec<Sample>>> {
    let b = &cfg.train.model.backbone;
    let samples = match &cfg.data_root {
        Some(root) => load_directory(root, b.height, b.width)?,
        None => {
            let mut all = Vec::new();
            for plan in default_domains() {
                let spec = SyntheticDomainSpec {
                    seed: plan.spec.seed.wrapping_add(cfg.data_seed),
                    height: b.height,
                    width: b.width,
                    ..plan.spec
                };
                let n = |c: usize| ((c as f64 * cfg.data_scale).round() as usize).max(1);
                all.extend(generate_counts(&spec, [n(plan.real), n(plan.print), n(plan.replay)])?);
            }
            all
        }
    };
    let mut map: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.domain.clone()).or_default().push(s);
    }
    Ok(map)
}

pub fn load_library(cfg: &RunConfig) -> Result<PromptLibrary> {
    match &cfg.library {
        Some(p) => PromptLibrary::load(p),
        None => Ok(PromptLibrary::shipped()),
    }
}

pub fn load_encoder(cfg: &RunConfig) -> Result<TextEncoder> {
    match &cfg.table {
        Some(p) if cfg.encoder == EncoderKind::Table => TextEncoder::load_table(p),
        _ => TextEncoder::hashed(cfg.encoder, cfg.train.model.out_dim),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn out_or(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Training domains: explicit sources, else everything but the targets.
fn training_set(cfg: &RunConfig, domains: &BTreeMap<String, Vec<Sample>>) -> Result<Vec<Sample>> {
    let p = &cfg.protocol;
    let names: Vec<&String> = match &p.sources {
        Some(s) => s.iter().collect(),
        None => domains.keys().filter(|d| !p.targets.contains(d)).collect(),
    };
    let mut out = Vec::new();
    for n in names {
        let d = domains
            .get(n)
            .ok_or_else(|| Error::invalid(format!("unknown domain {n}")))?;
        out.extend(d.iter().cloned());
    }
    Ok(out)
}

fn target_names(cfg: &RunConfig, domains: &BTreeMap<String, Vec<Sample>>) -> Result<Vec<String>> {
    let t: Vec<String> = if cfg.protocol.targets.is_empty() {
        domains.keys().cloned().collect()
    } else {
        cfg.protocol.targets.clone()
    };
    for n in &t {
        if !domains.contains_key(n) {
            return Err(Error::invalid(format!("unknown domain {n}")));
        }
    }
    Ok(t)
}

fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenData { common } => {
            let cfg = resolve(common, "data.seed")?;
            let out = out_or(common, "data");
            let domains = load_domains(&cfg)?;
            let all: Vec<Sample> = domains.into_values().flatten().collect();
            export_png(&all, &out)?;
            println!("wrote {} images to {}", all.len(), out.display());
        }
        Command::Train { common, log } => {
            let cfg = resolve(common, "train.seed")?;
            let out = out_or(common, "checkpoint.bin");
            let domains = load_domains(&cfg)?;
            let data = training_set(&cfg, &domains)?;
            let outcome = train(&cfg.train, &data, &load_library(&cfg)?, &load_encoder(&cfg)?)?;
            let mut buf = Vec::new();
            write_training_log(&outcome.log, &mut buf).map_err(|e| Error::io(&out, e))?;
            write_file(&log.clone().unwrap_or_else(|| with_suffix(&out, ".log.csv")), buf)?;
            write_file(&out, outcome.checkpoint.to_bytes())?;
            if let Some(msg) = outcome.diverged {
                return Err(Error::Diverged {
                    epoch: outcome.checkpoint.epoch,
                    message: format!("{msg}; last finite checkpoint written to {}", out.display()),
                });
            }
            println!(
                "trained {} epochs on {} samples, final loss {:.6}",
                outcome.checkpoint.epoch,
                data.len(),
                outcome.checkpoint.final_loss
            );
        }
        Command::Eval {
            common,
            checkpoint,
            scores,
        } => {
            let mut cfg = resolve(common, "train.seed")?;
            let ckpt = Checkpoint::load(checkpoint)?;
            cfg.train.model = ckpt.config.model.clone();
            let domains = load_domains(&cfg)?;
            let mut report = Report::default();
            let mut score_lines = String::from("sample_id,domain,y,score\n");
            for t in target_names(&cfg, &domains)? {
                let run = evaluate(&ckpt, &domains[&t])?.with_policy(cfg.protocol.threshold);
                let (hter, tau) = compute_hter(&run);
                for i in 0..run.len() {
                    score_lines.push_str(&format!(
                        "{},{},{},{:.9}\n",
                        run.ids[i], run.domains[i], run.labels[i], run.scores[i]
                    ));
                }
                report.rows.push(ReportRow {
                    protocol: "eval".into(),
                    target: t,
                    seed: ckpt.config.seed,
                    variant: ckpt.config.variant.to_string(),
                    n_prompts: 0,
                    hter,
                    auc: compute_auc(&run),
                    tau,
                    threshold_policy: cfg.protocol.threshold.to_string(),
                    train_samples: 0,
                });
            }
            write_file(&out_or(common, "eval.csv"), report.to_csv())?;
            if let Some(p) = scores {
                write_file(p, score_lines)?;
            }
            print!("{}", report.summary_table());
        }
        Command::Protocol { common, summary } => {
            let cfg = resolve(common, "train.seed")?;
            let report = protocol_report(&cfg)?;
            write_file(&out_or(common, "report.csv"), report.to_csv())?;
            let table = report.summary_table();
            if let Some(p) = summary {
                write_file(p, &table)?;
            }
            print!("{table}");
        }
        Command::Sweep { common, counts, dat } => {
            let mut cfg = resolve(common, "train.seed")?;
            cfg.protocol.kind = "prompt_sweep".into();
            if let Some(c) = counts {
                cfg.protocol.prompt_counts = c.clone();
            }
            let report = protocol_report(&cfg)?;
            let out = out_or(common, "sweep.csv");
            write_file(&out, report.to_csv())?;
            write_file(&dat.clone().unwrap_or_else(|| out.with_extension("dat")), sweep_dat(&report))?;
            print!("{}", report.summary_table());
        }
        Command::Gradcheck { common } => {
            let cfg = resolve(common, "train.seed")?;
            let (text, passed) = gradcheck_text(&cfg)?;
            match &common.out {
                Some(p) => write_file(p, &text)?,
                None => print!("{text}"),
            }
            if !passed {
                return Err(Error::invalid("gradient check failed"));
            }
        }
        Command::Dump {
            common,
            checkpoint,
            attention,
        } => {
            let mut cfg = resolve(common, "train.seed")?;
            let ckpt = Checkpoint::load(checkpoint)?;
            cfg.train.model = ckpt.config.model.clone();
            let domains = load_domains(&cfg)?;
            let mut data = Vec::new();
            for t in target_names(&cfg, &domains)? {
                data.extend(domains[&t].iter().cloned());
            }
            let out = out_or(common, "embeddings.csv");
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            dump_embeddings(&ckpt, &data, &out)?;
            if let Some(p) = attention {
                let maps = crate::trainer::fusion_attention(&ckpt, &data)?;
                let mut buf = Vec::new();
                write_attention_csv(&mut buf, &maps).map_err(|e| Error::io(p, e))?;
                write_file(p, buf)?;
            }
        }
    }
    Ok(())
}

fn protocol_report(cfg: &RunConfig) -> Result<Report> {
    let domains = load_domains(cfg)?;
    let names: Vec<String> = domains.keys().cloned().collect();
    let pc = cfg.protocol_config(&names)?;
    let library = load_library(cfg)?;
    let encoder = load_encoder(cfg)?;
    let assets = ExperimentAssets {
        domains: &domains,
        library: &library,
        encoder: &encoder,
        train: &cfg.train,
    };
    run_protocol(&pc, &assets)
}

/// `n_prompts mean_hter std_hter mean_auc std_auc`, averaged over targets
/// and seeds.
pub fn sweep_dat(report: &Report) -> String {
    let mut by_n: BTreeMap<usize, Vec<&ReportRow>> = BTreeMap::new();
    for r in &report.rows {
        by_n.entry(r.n_prompts).or_default().push(r);
    }
    let mut s = String::from("# n_prompts mean_hter std_hter mean_auc std_auc\n");
    for (n, rows) in by_n {
        let stats = |f: fn(&ReportRow) -> f64| {
            let v: Vec<f64> = rows.iter().map(|r| f(r)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            } else {
                0.0
            };
            (m, var.sqrt())
        };
        let (hm, hs) = stats(|r| r.hter);
        let (am, as_) = stats(|r| r.auc);
        s.push_str(&format!("{n} {hm:.6} {hs:.6} {am:.6} {as_:.6}\n"));
    }
    s
}

/// Op suite, fusion block and full objective on a micro model.
pub fn gradcheck_text(cfg: &RunConfig) -> Result<(String, bool)> {
    let (eps, tol) = (cfg.grad_epsilon, cfg.grad_tolerance);
    let mut out = Vec::new();
    let mut passed = true;
    for (name, r) in op_gradcheck_suite(cfg.train.seed, eps, tol)? {
        passed &= r.passed;
        writeln!(out, "op {name}: {}", if r.passed { "PASS" } else { "FAIL" }).ok();
        if !r.passed {
            write!(out, "{r}").ok();
        }
    }
    let haf = haf_gradcheck(&HafGradcheckConfig {
        seed: cfg.train.seed,
        epsilon: eps,
        tolerance: tol,
        ..HafGradcheckConfig::default()
    })?;
    passed &= haf.passed;
    write!(out, "fusion block: {haf}").ok();
    let micro = TrainConfig {
        seed: cfg.train.seed,
        ..TrainConfig::micro()
    };
    let spec = SyntheticDomainSpec {
        height: micro.model.backbone.height,
        width: micro.model.backbone.width,
        ..SyntheticDomainSpec::new("micro", cfg.train.seed)
    };
    let samples = generate_counts(&spec, [2, 1, 1])?;
    let encoder = TextEncoder::hashed(
        match cfg.encoder {
            EncoderKind::Table => EncoderKind::Hash,
            k => k,
        },
        micro.model.out_dim,
    )?;
    let full = end_to_end_gradcheck(&micro, &samples, &load_library(cfg)?, &encoder, eps, tol)?;
    passed &= full.passed;
    write!(out, "full objective: {full}").ok();
    writeln!(out, "overall: {}", if passed { "PASS" } else { "FAIL" }).ok();
    Ok((String::from_utf8(out).expect("utf-8"), passed))
}
