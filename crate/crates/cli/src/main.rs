//! `gsfda` — run source pretraining, source-free adaptation, domain-ID
//! classifier training and evaluation from a config file; every result is
//! written under `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use gsfda::checkpoint::Checkpoint;
use gsfda::config::{Domains, ExperimentConfig};
use gsfda::data::save_csv;
use gsfda::gradcheck;
use gsfda::metrics::{
    write_accuracy_matrix_csv, write_epochs_csv, EpochRecord, EvalMode, RunMetrics, SCHEMA_VERSION,
};
use gsfda::pipeline::{
    adapt_continual_observed, adapt_target_observed, bank_purity, evaluate, evaluate_with,
    init_model, pretrain_from, sample_exemplars, train_domain_classifier, BnSnapshot, DomainRouter,
    EpochSummary, Evaluation, RunConfig,
};
use gsfda::sda::{merge_masks, MaskSet};
use gsfda::{Error, Result};
use serde::Serialize;

const SOURCE_CHECKPOINT: &str = "source_checkpoint.bin";
const CHECKPOINT: &str = "checkpoint.bin";
const PURITY_K: usize = 3;

#[derive(Parser, Debug)]
#[command(
    name = "gsfda",
    version,
    about = "Generalized source-free domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on labeled source data with every domain attention.
    Pretrain(RunArgs),
    /// Adapt the pretrained model to one unlabeled target domain.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        /// Target domain id (1-based).
        #[arg(long, default_value_t = 1)]
        target: usize,
    },
    /// Adapt to every target domain in order.
    AdaptContinual(RunArgs),
    /// Train the domain-ID classifier used by agnostic evaluation.
    TrainDc(RunArgs),
    /// Evaluate the checkpoint in the output directory.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "aware", value_parser = ["aware", "agnostic"])]
        mode: String,
        /// Re-estimate BN statistics on each domain's evaluation data first.
        #[arg(long)]
        refresh_bn: bool,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TRIALS)]
        trials: usize,
    },
    /// Write the domain attention masks of a checkpoint as CSV.
    DumpMasks {
        /// Directory holding checkpoint.bin; masks.csv is written there.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the datasets a config describes as CSV.
    GenData(RunArgs),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Everything a command needs: the effective config and its datasets.
struct Run {
    args: RunArgs,
    exp: ExperimentConfig,
    cfg: RunConfig,
    domains: Domains,
}

impl Run {
    fn open(args: &RunArgs) -> Result<Self> {
        let mut exp = ExperimentConfig::load(&args.config)?;
        if let Some(seed) = args.seed {
            exp.seed = seed;
        }
        let base = args.config.parent().unwrap_or(Path::new("."));
        let domains = exp.build_domains(base)?;
        std::fs::create_dir_all(&args.out)?;
        Ok(Self {
            cfg: exp.run_config(),
            args: args.clone(),
            exp,
            domains,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.args.out.join(name)
    }

    fn load_checkpoint(&self, name: &str) -> Result<Checkpoint> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::Usage(format!(
                "{} not found; run the earlier phase with the same --out first",
                path.display()
            )));
        }
        let ck = Checkpoint::load(&path)?;
        if ck.params.dims != self.cfg.dims || ck.masks.n_targets() != self.cfg.n_targets {
            return Err(Error::Config(format!(
                "{} does not match the configured network or domain count",
                path.display()
            )));
        }
        Ok(ck)
    }

    fn write_manifest(&self, command: &str, outputs: &[&str]) -> Result<()> {
        let manifest = Manifest {
            command,
            args: std::env::args().collect(),
            config_path: self.args.config.display().to_string(),
            seed: self.exp.seed,
            config: self.exp.to_toml(),
            versions: Versions {
                gsfda: env!("CARGO_PKG_VERSION"),
                format_schema: SCHEMA_VERSION,
                checkpoint_format: gsfda::checkpoint::VERSION,
            },
            outputs: outputs.to_vec(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        write_json(&self.path("manifest.json"), &manifest)
    }

    fn finish(
        &self,
        command: &str,
        eval: &Evaluation,
        matrix: Option<Vec<Vec<f64>>>,
        epochs: Vec<EpochRecord>,
        outputs: &[&str],
    ) -> Result<()> {
        let metrics = RunMetrics {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            mode: eval.mode,
            acc_s: eval.acc_s,
            acc_t: eval.acc_t,
            h: eval.h,
            per_domain_accuracy: eval.per_domain_accuracy.clone(),
            domain_id_accuracy: eval.domain_id_accuracy,
            accuracy_matrix: matrix,
            epochs,
        };
        metrics.write_json(&self.path("metrics.json"))?;
        write_epochs_csv(&metrics.epochs, &self.path("epochs.csv"))?;
        let mut all = vec!["metrics.json", "epochs.csv"];
        all.extend_from_slice(outputs);
        all.push("manifest.json");
        self.write_manifest(command, &all)?;
        println!(
            "{command}: acc_s {:.2}  acc_t {:.2}  H {:.2}  ({} mode)",
            eval.acc_s,
            eval.acc_t,
            eval.h,
            match eval.mode {
                EvalMode::Aware => "aware",
                EvalMode::Agnostic => "agnostic",
            }
        );
        Ok(())
    }
}

#[derive(Serialize)]
struct Versions {
    gsfda: &'static str,
    format_schema: u32,
    checkpoint_format: u32,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    config_path: String,
    seed: u64,
    /// Effective configuration (after `--seed`), enough to re-run.
    config: String,
    versions: Versions,
    outputs: Vec<&'a str>,
    timestamp_unix: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn write_masks_csv(masks: &MaskSet, path: &Path) -> Result<()> {
    let mut out = String::from("domain");
    for j in 0..masks.dim() {
        out.push_str(&format!(",a{j}"));
    }
    out.push('\n');
    for (i, m) in masks.masks().iter().enumerate() {
        out.push_str(&i.to_string());
        for v in m {
            out.push_str(&format!(",{v:.17e}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn record(
    phase: String,
    s: &EpochSummary,
    eval: Option<&Evaluation>,
    purity: Option<(f64, f64)>,
) -> EpochRecord {
    EpochRecord {
        phase,
        epoch: s.epoch,
        loss: s.loss,
        acc_s: eval.map(|e| e.acc_s),
        acc_t: eval.map(|e| e.acc_t),
        h: eval.map(|e| e.h),
        acc_n: purity.map(|p| p.0),
        acc_np: purity.map(|p| p.1),
    }
}

fn pretrain(args: &RunArgs) -> Result<()> {
    let run = Run::open(args)?;
    let eval_sets = run.domains.eval_sets();
    let (params, masks) = init_model(&run.cfg)?;
    let mut epochs = Vec::new();
    let (params, masks) = pretrain_from(
        &run.cfg,
        &run.domains.source_train,
        params,
        masks,
        &mut |s, p, m| {
            let e = evaluate(p, m, &eval_sets, EvalMode::Aware, None)?;
            epochs.push(record("source".into(), s, Some(&e), None));
            Ok(())
        },
    )?;
    let ck = Checkpoint {
        source_bn: Some(BnSnapshot::of(&params)),
        params,
        masks,
        domain_classifier: None,
    };
    let soft = ck
        .masks
        .masks()
        .iter()
        .flatten()
        .filter(|&&a| a > 0.05 && a < 0.95)
        .count();
    if soft > 0 {
        eprintln!(
            "warning: {soft} attention entries lie in (0.05, 0.95); masks are not near-binary"
        );
    }
    ck.save(&run.path(SOURCE_CHECKPOINT))?;
    ck.save(&run.path(CHECKPOINT))?;
    write_masks_csv(&ck.masks, &run.path("masks.csv"))?;
    let eval = evaluate(&ck.params, &ck.masks, &eval_sets, EvalMode::Aware, None)?;
    run.finish(
        "pretrain",
        &eval,
        None,
        epochs,
        &[SOURCE_CHECKPOINT, CHECKPOINT, "masks.csv"],
    )
}

fn adapt(args: &RunArgs, target: usize) -> Result<()> {
    let run = Run::open(args)?;
    if target == 0 || target > run.cfg.n_targets {
        return Err(Error::Usage(format!(
            "--target must lie in 1..={}",
            run.cfg.n_targets
        )));
    }
    let src = run.load_checkpoint(SOURCE_CHECKPOINT)?;
    let eval_sets = run.domains.eval_sets();
    let data = &run.domains.targets[target - 1];
    let truth = data.labels()?.to_vec();
    let protect = merge_masks(&src.masks, target)?;
    let mut epochs = Vec::new();
    let params = adapt_target_observed(
        &run.cfg,
        src.params.clone(),
        &src.masks,
        target,
        &data.features,
        &protect,
        &mut |s, p, banks| {
            let e = evaluate(p, &src.masks, &eval_sets, EvalMode::Aware, None)?;
            let purity = bank_purity(banks, &truth, PURITY_K)?;
            epochs.push(record(format!("target{target}"), s, Some(&e), Some(purity)));
            Ok(())
        },
    )?;
    let ck = Checkpoint {
        params,
        masks: src.masks,
        source_bn: src.source_bn,
        domain_classifier: None,
    };
    ck.save(&run.path(CHECKPOINT))?;
    let eval = evaluate(&ck.params, &ck.masks, &eval_sets, EvalMode::Aware, None)?;
    run.finish("adapt", &eval, None, epochs, &[CHECKPOINT])
}

fn adapt_continual(args: &RunArgs) -> Result<()> {
    let run = Run::open(args)?;
    let src = run.load_checkpoint(SOURCE_CHECKPOINT)?;
    let eval_sets = run.domains.eval_sets();
    let truths = run
        .domains
        .targets
        .iter()
        .map(|t| t.labels().map(<[usize]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let mut epochs = Vec::new();
    let outcome = adapt_continual_observed(
        &run.cfg,
        src.params.clone(),
        &src.masks,
        &run.domains.source_test,
        &run.domains.targets,
        &mut |domain, s, p, banks| {
            let e = evaluate(p, &src.masks, &eval_sets, EvalMode::Aware, None)?;
            let purity = bank_purity(banks, &truths[domain - 1], PURITY_K)?;
            epochs.push(record(format!("target{domain}"), s, Some(&e), Some(purity)));
            Ok(())
        },
    )?;
    write_accuracy_matrix_csv(&outcome.accuracy_matrix, &run.path("continual_matrix.csv"))?;
    let ck = Checkpoint {
        params: outcome.params,
        masks: src.masks,
        source_bn: src.source_bn,
        domain_classifier: None,
    };
    ck.save(&run.path(CHECKPOINT))?;
    let eval = evaluate(&ck.params, &ck.masks, &eval_sets, EvalMode::Aware, None)?;
    run.finish(
        "adapt-continual",
        &eval,
        Some(outcome.accuracy_matrix),
        epochs,
        &[CHECKPOINT, "continual_matrix.csv"],
    )
}

fn train_dc(args: &RunArgs) -> Result<()> {
    let run = Run::open(args)?;
    let mut ck = run.load_checkpoint(CHECKPOINT)?;
    let mut pools = vec![&run.domains.source_train];
    pools.extend(run.domains.targets.iter());
    let exemplars = sample_exemplars(&run.cfg, &pools);
    let dc = train_domain_classifier(&run.cfg, &ck.params, ck.source_bn.as_ref(), &exemplars)?;
    let eval_sets = run.domains.eval_sets();
    let eval = evaluate(
        &ck.params,
        &ck.masks,
        &eval_sets,
        EvalMode::Agnostic,
        Some(&dc),
    )?;
    ck.domain_classifier = Some(dc);
    ck.save(&run.path(CHECKPOINT))?;
    run.finish("train-dc", &eval, None, Vec::new(), &[CHECKPOINT])
}

fn eval(args: &RunArgs, mode: EvalMode, refresh_bn: bool) -> Result<()> {
    let run = Run::open(args)?;
    let ck = run.load_checkpoint(CHECKPOINT)?;
    let router = match (mode, &ck.domain_classifier) {
        (EvalMode::Agnostic, None) => {
            return Err(Error::Usage(
                "agnostic evaluation needs a domain classifier; run train-dc first".into(),
            ))
        }
        (_, dc) => dc.as_ref().map(|d| d as &dyn DomainRouter),
    };
    let eval_sets = run.domains.eval_sets();
    let eval = evaluate_with(&ck.params, &ck.masks, &eval_sets, mode, router, refresh_bn)?;
    run.finish("eval", &eval, None, Vec::new(), &[])
}

fn run_gradcheck(seed: u64, trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(Error::Usage("--trials must be positive".into()));
    }
    let reports = gradcheck::run_all(trials, seed)?;
    for r in &reports {
        println!(
            "{:<24} trials {:>3}  max relative error {:.3e}  {}",
            r.name,
            r.trials,
            r.max_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn dump_masks(out: &Path) -> Result<()> {
    let path = out.join(CHECKPOINT);
    if !path.exists() {
        return Err(Error::Usage(format!("{} not found", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    write_masks_csv(&ck.masks, &out.join("masks.csv"))?;
    println!("wrote {}", out.join("masks.csv").display());
    Ok(())
}

fn gen_data(args: &RunArgs) -> Result<()> {
    let run = Run::open(args)?;
    let mut outputs = vec![
        "source_train.csv".to_string(),
        "source_test.csv".to_string(),
    ];
    save_csv(&run.domains.source_train, &run.path("source_train.csv"))?;
    save_csv(&run.domains.source_test, &run.path("source_test.csv"))?;
    for (j, t) in run.domains.targets.iter().enumerate() {
        let name = format!("target{}.csv", j + 1);
        save_csv(t, &run.path(&name))?;
        outputs.push(name);
    }
    outputs.push("manifest.json".into());
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    run.write_manifest("gen-data", &refs)?;
    println!(
        "wrote {} files to {}",
        outputs.len() - 1,
        run.args.out.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => pretrain(&a),
        Command::Adapt { run, target } => adapt(&run, target),
        Command::AdaptContinual(a) => adapt_continual(&a),
        Command::TrainDc(a) => train_dc(&a),
        Command::Eval {
            run,
            mode,
            refresh_bn,
        } => eval(&run, mode.parse()?, refresh_bn),
        Command::Gradcheck { seed, trials } => run_gradcheck(seed, trials),
        Command::DumpMasks { out } => dump_masks(&out),
        Command::GenData(a) => gen_data(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
