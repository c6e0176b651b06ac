use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pdpcrn::io::wav::{read_wav, write_wav, WavFormat};
use pdpcrn::io::{parse_override, Checkpoint, RunConfig};
use pdpcrn::metrics::{evaluate, Enhancer, MetricReport, SummaryTable};
use pdpcrn::models::{Model, ModelConfig};
use pdpcrn::nn::ParamStore;
use pdpcrn::profile::{profile, profile_config, Comparison};
use pdpcrn::signal::{read_manifest, synthesize_dataset, ManifestRow, MANIFEST_FILE};
use pdpcrn::training::{ablate, fit};
use pdpcrn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pdpcrn",
    version,
    about = "Multichannel speech enhancement: synthesis, training, evaluation, profiling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Nothing is written outside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Pdpcrn,
    Dpcrn,
    PdpcrnNoBi,
}

impl VariantArg {
    fn overrides(self) -> &'static [&'static str] {
        match self {
            VariantArg::Pdpcrn => &["model.variant=\"pdpcrn\""],
            VariantArg::Dpcrn => &["model.variant=\"dpcrn\""],
            VariantArg::PdpcrnNoBi => &["model.variant=\"pdpcrn\"", "model.bi_interaction=false"],
        }
    }

    /// Full-size reference configuration.
    fn reference(self) -> ModelConfig {
        match self {
            VariantArg::Pdpcrn => ModelConfig::full(),
            VariantArg::Dpcrn => ModelConfig::dpcrn(),
            VariantArg::PdpcrnNoBi => ModelConfig::full().with_bi_interaction(false),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a reverberant multichannel dataset and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        mics: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
    },
    /// Train on the train/validation split of a synthesized dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory containing the manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from `<out>/last.ckpt` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Enhance multichannel WAV files.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        /// Pass the mixture through unchanged (debug model).
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
    },
    /// Score checkpoints and the unprocessed mixtures on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Score every manifest row instead of the test split.
        #[arg(long)]
        all: bool,
    },
    /// Parameter and FLOP report.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Full-size variants to compare; the configured model when absent.
        #[arg(long, value_enum)]
        variant: Vec<VariantArg>,
        /// Audio duration the FLOPs are counted for.
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
    },
    /// Train with and without the interaction gates and compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn load_config(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    let tables = overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<Result<Vec<_>>>()?;
    let cfg = RunConfig::load(common.config.as_deref(), &tables)?;
    cfg.echo(&common.out)?;
    Ok(cfg)
}

fn manifest(data: &Path) -> Result<Vec<ManifestRow>> {
    let rows = read_manifest(&data.join(MANIFEST_FILE))?;
    if rows.is_empty() {
        return Err(Error::config(format!(
            "{} has no rows",
            data.join(MANIFEST_FILE).display()
        )));
    }
    Ok(rows)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn slug(method: &str) -> String {
    method
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

fn write_report(out: &Path, report: &MetricReport) -> Result<()> {
    report.write_csv(&out.join(format!("metrics_{}.csv", slug(&report.method))))?;
    for (id, err) in &report.failures {
        eprintln!("warning: {}: row {id} failed: {err}", report.method);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            count,
            mics,
            seconds,
        } => {
            let mut extra = Vec::new();
            if let Some(c) = count {
                extra.push(format!("data.count={c}"));
            }
            if let Some(m) = mics {
                extra.push(format!("model.mics={m}"));
            }
            if let Some(s) = seconds {
                extra.push(format!("data.seconds={s}"));
            }
            let cfg = load_config(&common, &extra)?;
            let rows = synthesize_dataset(&cfg.data, &common.out)?;
            println!("wrote {} mixtures to {}", rows.len(), common.out.display());
        }
        Command::Train {
            common,
            data,
            variant,
            epochs,
            resume,
        } => {
            let mut extra: Vec<String> = variant
                .map_or(&[][..], |v| v.overrides())
                .iter()
                .map(|s| s.to_string())
                .collect();
            if let Some(e) = epochs {
                extra.push(format!("train.epochs={e}"));
            }
            let cfg = load_config(&common, &extra)?;
            let rows = manifest(&data)?;
            let split = cfg.split.apply(&rows);
            let trainer = fit(
                &cfg.model,
                &cfg.train,
                split.train,
                split.val,
                &data,
                &common.out,
                resume,
            )?;
            if let Some(h) = trainer.state.history.last() {
                println!(
                    "epoch {} train_loss {:.4} val_loss {:.4} lr {:e}",
                    h.epoch, h.train_loss, h.val_loss, h.lr
                );
            }
        }
        Command::Enhance {
            common,
            checkpoint,
            identity,
            input,
        } => {
            let cfg = load_config(&common, &[])?;
            let loaded: Option<(Model, ParamStore)> = match (&checkpoint, identity) {
                (Some(p), false) => {
                    let ckpt = Checkpoint::load(p)?;
                    Some((ckpt.model()?, ckpt.store))
                }
                _ => None,
            };
            let enhancer = match &loaded {
                Some((model, store)) => Enhancer::Network { model, store },
                None => Enhancer::Passthrough,
            };
            let _ = cfg;
            for path in &input {
                let mixture = read_wav(path)?;
                let estimate = enhancer.enhance(&mixture, &mixture)?;
                let name = path.file_name().ok_or_else(|| {
                    Error::invalid(format!("{} has no file name", path.display()))
                })?;
                let dest = common.out.join(name);
                write_wav(&dest, &estimate, WavFormat::Float32)?;
                println!("{}", dest.display());
            }
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            all,
        } => {
            let cfg = load_config(&common, &[])?;
            let rows = manifest(&data)?;
            let selected = if all {
                &rows[..]
            } else {
                cfg.split.apply(&rows).test
            };
            if selected.is_empty() {
                return Err(Error::config(
                    "test split is empty; use --all or raise split.test_fraction",
                ));
            }
            let mut reports = vec![evaluate(&Enhancer::Passthrough, selected, &data)];
            for p in &checkpoint {
                let ckpt = Checkpoint::load(p)?;
                let model = ckpt.model()?;
                reports.push(evaluate(
                    &Enhancer::Network {
                        model: &model,
                        store: &ckpt.store,
                    },
                    selected,
                    &data,
                ));
            }
            for r in &reports {
                write_report(&common.out, r)?;
            }
            let table = SummaryTable::from_reports(&reports.iter().collect::<Vec<_>>());
            write_text(&common.out.join("summary.md"), &table.to_markdown())?;
            write_text(&common.out.join("summary.json"), &table.to_json())?;
            print!("{}", table.to_markdown());
        }
        Command::Profile {
            common,
            variant,
            seconds,
        } => {
            let cfg = load_config(&common, &[])?;
            let reports = if variant.is_empty() {
                let (model, store) = Model::build(&cfg.model, cfg.seed)?;
                vec![profile(&model, &store, seconds)?]
            } else {
                variant
                    .iter()
                    .map(|v| {
                        if seconds == 1.0 {
                            profile_config(&v.reference())
                        } else {
                            let (model, store) = Model::build(&v.reference(), 0)?;
                            profile(&model, &store, seconds)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let comparison = Comparison::new(reports);
            comparison.write(&common.out)?;
            print!("{}", comparison.to_markdown());
        }
        Command::Ablate {
            common,
            data,
            epochs,
        } => {
            let extra: Vec<String> = epochs
                .map(|e| format!("train.epochs={e}"))
                .into_iter()
                .collect();
            let cfg = load_config(&common, &extra)?;
            let rows = manifest(&data)?;
            let split = cfg.split.apply(&rows);
            let report = ablate(
                &cfg.model,
                &cfg.train,
                split.train,
                split.val,
                split.test,
                &data,
                &common.out,
            )?;
            write_report(&common.out, &report.unprocessed)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    eprintln!(
        "error kind={kind} code={code} message={:?}",
        message.replace('\n', " ")
    );
    ExitCode::from(code)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PDPCRN_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
            Error::config(format!("PDPCRN_THREADS={v:?} is not a positive integer"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            return fail("usage", 2, first);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.exit_code() as u8, &e.to_string()),
    }
}
