//! Command-line front end: `train`, `verify`, `profile-variance`, `eval`.
//!
//! Every command resolves a [`Config`] (file, then `--set` overrides, then
//! `--seed`), writes it to `<out>/config.resolved`, and puts all outputs in
//! the same directory. Exit codes: 0 success, 1 runtime or check failure,
//! 2 usage error. Failures print one line `error kind=<kind> msg=<message>`
//! to stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baseline::BaselineModel;
use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::profile::{profile_variance, GradientSpace, ProfiledEstimator};
use crate::rng::{derive_seed, STREAM_PROFILE};
use crate::train::{eval_noise_seed, evaluate_bound, load_data, train, TrainConfig};
use crate::verify::{report_csv, run_suite, VerifySettings};

#[derive(Debug, Parser)]
#[command(name = "sbn-grad", version, about = "Gradient estimators for sigmoid belief networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a generative/recognition pair.
    Train,
    /// Run the small-model oracle suite.
    Verify,
    /// Per-layer gradient variance of both estimators on a checkpoint.
    ProfileVariance,
    /// Test-set bound of a checkpoint.
    Eval,
}

fn resolve_config(common: &Common) -> Result<Config> {
    let mut config = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for o in &common.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Follows a `best.index` file to the checkpoint it names.
pub fn resolve_checkpoint(path: &Path) -> Result<Checkpoint> {
    if path.extension().is_some_and(|e| e == "index") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = text
            .lines()
            .find_map(|l| l.strip_prefix("checkpoint "))
            .ok_or_else(|| Error::Format(format!("{} names no checkpoint", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        return load_checkpoint(dir.join(name.trim()));
    }
    load_checkpoint(path)
}

fn checkpoint_from(config: &Config) -> Result<Checkpoint> {
    if config.checkpoint.is_empty() {
        return Err(Error::Config("this command needs `checkpoint` (a .ckpt or best.index path)".into()));
    }
    resolve_checkpoint(Path::new(&config.checkpoint))
}

/// Outcome of a command: a summary line and whether every check passed.
struct Outcome {
    summary: String,
    ok: bool,
}

fn cmd_train(config: &Config, out: &Path) -> Result<Outcome> {
    let data = load_data(config)?;
    let report = train(&TrainConfig::from(config), &data, Some(out))?;
    let mut prov = String::new();
    let _ = writeln!(prov, "source {}", data.provenance.source);
    if let Some(seed) = data.provenance.binarization_seed {
        let _ = writeln!(prov, "binarization_seed {seed}");
    }
    for (split, digest) in &data.provenance.digests {
        let _ = writeln!(prov, "{split} {digest}");
    }
    write_file(&out.join("data.provenance"), &prov)?;
    Ok(Outcome {
        summary: format!(
            "updates={} best_step={} best_valid_elbo={:.4} test_bound={:.4}",
            report.updates, report.best_step, report.best_valid_elbo, report.test_bound
        ),
        ok: true,
    })
}

fn cmd_verify(config: &Config, out: &Path) -> Result<Outcome> {
    let settings = VerifySettings {
        models: config.verify_models,
        trials: config.verify_trials,
        data_dim: config.verify_data_dim,
        seed: config.seed,
        ..VerifySettings::default()
    };
    let records = run_suite(&settings)?;
    write_file(&out.join("verify.csv"), &report_csv(&records))?;
    let failed = records.iter().filter(|r| !r.pass).count();
    Ok(Outcome { summary: format!("checks={} failed={failed}", records.len()), ok: failed == 0 })
}

fn cmd_profile(config: &Config, out: &Path) -> Result<Outcome> {
    let ckpt = checkpoint_from(config)?;
    let data = load_data(config)?;
    let n = config.profile_images.min(data.train.len());
    let images = data.train.slice(0..n);
    let baseline = ckpt.baseline.clone().unwrap_or_else(BaselineModel::zero);
    let estimators = [ProfiledEstimator::Marginalized, ProfiledEstimator::LikelihoodRatio(baseline)];
    let mut csv = String::from("estimator,space,layer,variance,samples\n");
    let mut summary = Vec::new();
    for (label, space) in [("mean", GradientSpace::Mean), ("logit", GradientSpace::Logit)] {
        let reports = profile_variance(
            &ckpt.generative,
            &ckpt.recognition,
            &images,
            config.profile_samples,
            &estimators,
            space,
            derive_seed(config.seed, STREAM_PROFILE),
        )?;
        for r in &reports {
            for (k, v) in r.layer_variance.iter().enumerate() {
                let _ = writeln!(csv, "{},{label},{k},{v:e},{}", r.estimator, r.samples);
            }
        }
        if space == GradientSpace::Mean {
            let ratios: Vec<String> = reports[1]
                .layer_variance
                .iter()
                .zip(&reports[0].layer_variance)
                .map(|(lr, m)| format!("{:.3e}", lr / m))
                .collect();
            summary.push(format!("lr/marginalized per layer: {}", ratios.join(" ")));
        }
    }
    write_file(&out.join("variance.csv"), &csv)?;
    Ok(Outcome { summary: summary.join("; "), ok: true })
}

fn cmd_eval(config: &Config, out: &Path) -> Result<Outcome> {
    let ckpt = checkpoint_from(config)?;
    let data = load_data(config)?;
    let seed = eval_noise_seed(config.seed, 1);
    let bound = evaluate_bound(&ckpt.generative, &ckpt.recognition, &data.test, config.test_samples, seed)?;
    write_file(&out.join("eval.csv"), &format!("split,samples,bound\ntest,{},{bound:e}\n", config.test_samples))?;
    Ok(Outcome { summary: format!("test_bound={bound:.4}"), ok: true })
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let config = resolve_config(&cli.common)?;
    let out = &cli.common.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("config.resolved"), &config.to_text())?;
    let run = || match cli.command {
        Command::Train => cmd_train(&config, out),
        Command::Verify => cmd_verify(&config, out),
        Command::ProfileVariance => cmd_profile(&config, out),
        Command::Eval => cmd_eval(&config, out),
    };
    match cli.common.threads {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

fn error_line(kind: &str, msg: &str) -> String {
    format!("error kind={kind} msg={}", msg.replace('\n', " "))
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            let _ = writeln!(stdout, "{}", outcome.summary);
            if outcome.ok {
                0
            } else {
                let _ = writeln!(stderr, "{}", error_line("check-failed", &outcome.summary));
                1
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}
