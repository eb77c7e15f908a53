use std::path::PathBuf;
use std::process::ExitCode;

use apemkit::explain::{Method, Stage};
use apemkit_cli::config::DatasetKind;
use apemkit_cli::pipeline::{
    cmd_evaluate, cmd_explain, cmd_filter, cmd_report, cmd_shuffle_test, cmd_train,
};
use apemkit_cli::{CliError, RunConfig};
use clap::{Args, Parser, Subcommand};

/// Adversarial-perturbation evaluation of pixel relevance maps.
#[derive(Parser, Debug)]
#[command(name = "apemkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the desk network and write the model plus an accuracy manifest.
    Train,
    /// Write one relevance map file per image, method and stage.
    Explain,
    /// Compute per-image gaps (all, correct and misclassified CSVs).
    Evaluate,
    /// Compute gaps of shuffled maps.
    ShuffleTest {
        /// Shuffled maps per image, method and stage.
        #[arg(long)]
        shuffles: Option<u32>,
    },
    /// Filter maps and write the filtered maps and per-map traces.
    Filter,
    /// Summaries, pairwise comparisons and correlations from evaluation results.
    Report,
}

/// Flags override the config file; the config file overrides defaults.
#[derive(Args, Debug)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `synthetic`, or `IMAGES,LABELS` for a pair of IDX files.
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Comma-separated method names, or `all`.
    #[arg(long, global = true)]
    methods: Option<String>,
    /// Comma-separated stage names or numbers (1-3), or `all`.
    #[arg(long, global = true)]
    stage: Option<String>,
    #[arg(long, global = true)]
    step: Option<f64>,
    #[arg(long, global = true)]
    cap: Option<u64>,
    /// Clip perturbed pixels to [0, 1].
    #[arg(long, global = true)]
    clip: bool,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long = "smooth-n", global = true)]
    smooth_n: Option<usize>,
    #[arg(long = "lrp-epsilon", global = true)]
    lrp_epsilon: Option<f64>,
    #[arg(long = "batch-fraction", global = true)]
    batch_fraction: Option<f64>,
    /// Overrides the config file and APEMKIT_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = number of processors).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

fn parse_list<T>(text: &str, all: &[T], flag: &str) -> Result<Vec<T>, CliError>
where
    T: std::str::FromStr<Err = apemkit::Error> + Copy,
{
    if text.trim() == "all" {
        return Ok(all.to_vec());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| CliError::config(format!("--{flag}: {e}")))
        })
        .collect()
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.apply_env()?;
        if let Some(d) = &self.dataset {
            if d == "synthetic" {
                c.dataset.kind = DatasetKind::Synthetic;
            } else {
                let (images, labels) = d.split_once(',').ok_or_else(|| {
                    CliError::config(format!(
                        "--dataset: expected `synthetic` or `IMAGES,LABELS`, got `{d}`"
                    ))
                })?;
                c.dataset.kind = DatasetKind::Idx;
                c.dataset.images = Some(images.into());
                c.dataset.labels = Some(labels.into());
            }
        }
        if let Some(m) = &self.model {
            c.model = Some(m.clone());
        }
        if let Some(m) = &self.methods {
            c.explain.methods = parse_list(m, &Method::ALL, "methods")?;
        }
        if let Some(s) = &self.stage {
            c.explain.stages = parse_list(s, &Stage::ALL, "stage")?;
        }
        if let Some(v) = self.step {
            c.search.step = v;
        }
        if let Some(v) = self.cap {
            c.search.cap = v;
        }
        if self.clip {
            c.search.clip = true;
        }
        if let Some(v) = self.sigma {
            c.explain.smooth_sigma = v;
        }
        if let Some(v) = self.smooth_n {
            c.explain.smooth_n = v;
        }
        if let Some(v) = self.lrp_epsilon {
            c.explain.lrp_epsilon = v;
        }
        if let Some(v) = self.batch_fraction {
            c.filter.batch_fraction = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = cli.overrides.resolve()?;
    if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global()
            .map_err(|e| CliError::config(format!("--workers: {e}")))?;
    }
    let out = config.out.display().to_string();
    match cli.command {
        Command::Train => {
            let m = cmd_train(&config)?;
            println!(
                "model {} (train accuracy {:.4}, test accuracy {:.4})",
                m.model_file, m.train_accuracy, m.test_accuracy
            );
        }
        Command::Explain => {
            let n = cmd_explain(&config)?;
            println!("{n} maps written under {out}/maps");
        }
        Command::Evaluate => {
            let e = cmd_evaluate(&config)?;
            println!("{} rows", e.rows.len());
            for f in e.files {
                println!("{}", f.display());
            }
        }
        Command::ShuffleTest { shuffles } => {
            if let Some(k) = shuffles {
                config.report.shuffles = k;
            }
            println!("{}", cmd_shuffle_test(&config)?.display());
        }
        Command::Filter => {
            let rows = cmd_filter(&config)?;
            let applied = rows.iter().filter(|r| r.final_gap.is_some()).count();
            println!(
                "{applied} of {} maps filtered; summary in {out}/results/filter.csv",
                rows.len()
            );
        }
        Command::Report => {
            let r = cmd_report(&config)?;
            for s in r.summary.iter().filter(|s| s.subset == "full") {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
                println!(
                    "{:<16} {:<10} mean {:>9} median {:>9} (n {}, capped {}, undefined {})",
                    s.method.name(),
                    s.stage.name(),
                    f(s.mean_gap),
                    f(s.median_gap),
                    s.measured,
                    s.capped_count,
                    s.undefined_count
                );
            }
            println!("tables in {out}/reports");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
