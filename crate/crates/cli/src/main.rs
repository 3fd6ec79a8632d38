use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stablemoe::corpus::{load_corpus, synthetic_text, CorpusSplit};
use stablemoe::eval::evaluate_ppl;
use stablemoe::fluctuation::{cumulative_curve, expert_token_report, read_log, CountUnit};
use stablemoe::report::{byte_text, compare_table, emit_reports, read_summary, RunSummary, TOP_TOKENS};
use stablemoe::train::{Checkpoint, RouterKind, TrainConfig, Trainer};
use stablemoe::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Parser)]
#[command(name = "stablemoe", version, about = "Mixture-of-experts routing lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Small CPU profile.
    Desk,
    /// Full-width defaults.
    Base,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Unit {
    Occurrence,
    Type,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its reports, router export and checkpoint.
    Train {
        /// JSON config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
        #[arg(long)]
        router: Option<RouterKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also save a mid-run checkpoint after this many steps.
        #[arg(long)]
        checkpoint_at: Option<usize>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Perplexity of a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "valid")]
        split: Split,
    },
    /// Cumulative fluctuation curve and quantiles from a fluctuation log.
    AnalyzeFluctuation {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        total_steps: usize,
        #[arg(long, value_enum, default_value = "occurrence")]
        unit: Unit,
        /// Write the curve CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Most frequent tokens per expert under a checkpoint's routing.
    ReportExperts {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = TOP_TOKENS)]
        top_k: usize,
    },
    /// Train several routers on a shared config and seed, then tabulate them.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
        #[arg(long, value_delimiter = ',', default_value = "stablemoe,switch,base,hash")]
        routers: Vec<RouterKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Table of already finished runs.
    Summarize {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Write a seeded English-like corpus.
    Synth {
        #[arg(long)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn corpus_for(cfg: &TrainConfig, data: Option<&Path>) -> Result<CorpusSplit> {
    let path = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no corpus given: pass --data or set \"data\" in the config".into()))?;
    load_corpus(&path, cfg.split, cfg.seed)
}

/// Config file or profile defaults, with command-line overrides applied.
struct Overrides<'a> {
    config: Option<&'a Path>,
    profile: Profile,
    seed: Option<u64>,
    steps: Option<usize>,
    data: Option<&'a Path>,
}

impl Overrides<'_> {
    fn config(&self, router: Option<RouterKind>) -> Result<TrainConfig> {
        let mut cfg = match (self.config, self.profile) {
            (Some(p), _) => TrainConfig::from_json(&read_text(p)?)?,
            (None, Profile::Desk) => TrainConfig::desk(),
            (None, Profile::Base) => TrainConfig::default(),
        };
        if let Some(r) = router {
            cfg.router = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.steps {
            cfg.total_steps = n;
        }
        if let Some(d) = self.data {
            cfg.data = Some(d.display().to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Finishes `trainer`, saving checkpoints and reports into `out`.
fn complete(mut trainer: Trainer, out: &Path, checkpoint_at: Option<usize>) -> Result<RunSummary> {
    trainer = trainer.with_export_dir(out);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if let Some(at) = checkpoint_at {
        trainer.run_until(at)?;
        trainer.save_checkpoint(&out.join(format!("checkpoint-{at}.bin")))?;
    }
    let report = trainer.finish()?;
    trainer.save_checkpoint(&out.join(CHECKPOINT_FILE))?;
    let binary = std::env::current_exe().ok();
    let files = emit_reports(&report, out, binary.as_deref())?;
    println!("manifest {}", report.manifest.id);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(RunSummary::new(&report))
}

fn train(o: &Overrides, router: Option<RouterKind>, out: &Path, checkpoint_at: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let trainer = if let Some(ckpt) = resume {
        let cfg = Checkpoint::read(ckpt)?.config().clone();
        let corpus = corpus_for(&cfg, o.data)?;
        Trainer::load_checkpoint(ckpt, &corpus)?
    } else {
        let cfg = o.config(router)?;
        let corpus = corpus_for(&cfg, None)?;
        Trainer::new(cfg, &corpus)?
    };
    let summary = complete(trainer, out, checkpoint_at)?;
    print!("{}", compare_table(&[summary]));
    Ok(())
}

fn compare(o: &Overrides, routers: &[RouterKind], out: &Path) -> Result<()> {
    let mut summaries = Vec::new();
    for &r in routers {
        let cfg = o.config(Some(r))?;
        let corpus = corpus_for(&cfg, None)?;
        summaries.push(complete(Trainer::new(cfg, &corpus)?, &out.join(r.name()), None)?);
    }
    let table = compare_table(&summaries);
    let path = out.join("compare.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: Split) -> Result<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let cfg = ckpt.config();
    let corpus = load_corpus(data, cfg.split, cfg.seed)?;
    let stream = match split {
        Split::Valid => &corpus.valid,
        Split::Test => &corpus.test,
    };
    let ppl = evaluate_ppl(&ckpt.model, &ckpt.store, stream, cfg.seq_len)?;
    println!(
        "manifest {} step {} router {} tokens {} ppl {:.4}",
        ckpt.manifest_id(),
        ckpt.step(),
        cfg.router,
        stream.len(),
        ppl
    );
    Ok(())
}

fn analyze(log: &Path, total_steps: usize, unit: Unit, out: Option<&Path>) -> Result<()> {
    let history = read_log(log)?;
    let unit = match unit {
        Unit::Occurrence => CountUnit::Occurrence,
        Unit::Type => CountUnit::Type,
    };
    let r = cumulative_curve(&history, total_steps, unit)?;
    println!("tokens {} snapshots {}", r.last_fluctuation.len(), history.len());
    println!("never_fluctuated {:.4}", r.never_fluctuated);
    println!("fluctuating_after_20pct {:.4}", r.fluctuating_after(0.2));
    let q = &r.quantiles;
    println!("last_fluctuation p50 {:.4} p90 {:.4} p99 {:.4} max {:.4}", q.p50, q.p90, q.p99, q.max);
    if let Some(p) = out {
        fs::write(p, r.curve_csv(None)).map_err(|e| Error::io(p, e))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn report_experts(checkpoint: &Path, data: &Path, top_k: usize) -> Result<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let cfg = ckpt.config();
    let corpus = load_corpus(data, cfg.split, cfg.seed)?;
    let tokens = &corpus.valid[..corpus.valid.len().min(cfg.snapshot_tokens.max(1))];
    let assignment = ckpt
        .model
        .route_eval(&ckpt.store, tokens, cfg.seq_len)?
        .ok_or_else(|| Error::Contract(format!("router {} has no experts", cfg.router)))?;
    let top = expert_token_report(&assignment, tokens, cfg.num_experts, top_k)?;
    println!("manifest {} step {}", ckpt.manifest_id(), ckpt.step());
    for (e, list) in top.iter().enumerate() {
        let load = assignment.iter().filter(|&&a| a == e).count();
        let shown: Vec<String> = list
            .iter()
            .map(|&(id, c)| format!("{}:{c}", byte_text(id)))
            .collect();
        println!("expert {e} load {load} {}", shown.join(" "));
    }
    Ok(())
}

fn summarize(runs: &[PathBuf]) -> Result<()> {
    let summaries = runs.iter().map(|d| read_summary(d)).collect::<Result<Vec<_>>>()?;
    print!("{}", compare_table(&summaries));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            profile,
            router,
            seed,
            steps,
            data,
            out,
            checkpoint_at,
            resume,
        } => {
            let o = Overrides {
                config: config.as_deref(),
                profile,
                seed,
                steps,
                data: data.as_deref(),
            };
            train(&o, router, &out, checkpoint_at, resume.as_deref())
        }
        Command::Eval { checkpoint, data, split } => eval(&checkpoint, &data, split),
        Command::AnalyzeFluctuation {
            log,
            total_steps,
            unit,
            out,
        } => analyze(&log, total_steps, unit, out.as_deref()),
        Command::ReportExperts {
            checkpoint,
            data,
            top_k,
        } => report_experts(&checkpoint, &data, top_k),
        Command::Compare {
            config,
            profile,
            routers,
            seed,
            steps,
            data,
            out,
        } => {
            let o = Overrides {
                config: config.as_deref(),
                profile,
                seed,
                steps,
                data: data.as_deref(),
            };
            compare(&o, &routers, &out)
        }
        Command::Summarize { runs } => summarize(&runs),
        Command::Synth { bytes, seed, out } => {
            fs::write(&out, synthetic_text(bytes, seed)).map_err(|e| Error::io(&out, e))?;
            println!("wrote {} bytes to {}", bytes, out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
