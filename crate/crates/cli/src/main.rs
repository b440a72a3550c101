use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fvgenre::fisher::{normalization_menu_with_alpha, NormalizationSpec};
use fvgenre::pipeline::{self, ConfigOverrides, PipelineConfig, TEXT_MODALITY};
use fvgenre::synthetic::{generate_corpus, write_corpus, write_frame_fixture, CorpusSpec};

/// Genre classification of videos from Fisher-encoded frame descriptors.
///
/// Settings come from `--config` (a TOML file) and are overridden by
/// flags. FVGENRE_THREADS caps the number of worker threads.
#[derive(Parser, Debug)]
#[command(name = "fvgenre", version)]
struct Cli {
    #[command(flatten)]
    settings: Settings,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Settings {
    /// TOML config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// File listing genre names, one per line, fixing their order
    #[arg(long, global = true)]
    genres: Option<PathBuf>,
    /// Work directory for artifacts
    #[arg(long, global = true)]
    work: Option<PathBuf>,
    /// Keyframes sampled per video
    #[arg(long, global = true)]
    keyframes: Option<usize>,
    /// GMM components
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    #[arg(long, global = true)]
    sample_cap: Option<usize>,
    /// Fisher vector normalization, e.g. "PN + L2 Norm" or "pn(0.3)+l2"
    #[arg(long, global = true)]
    norm: Option<String>,
    /// Default exponent for power and log normalization
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// SVM cost
    #[arg(long, global = true)]
    c: Option<f64>,
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    /// Terms kept per genre by chi-square selection
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Late fusion mode: max or sum
    #[arg(long, global = true)]
    fusion: Option<String>,
    /// Descriptor modality to work on
    #[arg(long, global = true)]
    modality: Option<String>,
}

impl Settings {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            manifest: self.manifest.clone(),
            genres: self.genres.clone(),
            work: self.work.clone(),
            keyframes: self.keyframes,
            k: self.k,
            seed: self.seed,
            max_iters: self.max_iters,
            sample_cap: self.sample_cap,
            norm: self.norm.clone(),
            alpha: self.alpha,
            c: self.c,
            max_epochs: self.max_epochs,
            m: self.m,
            fusion: self.fusion.clone(),
            modality: self.modality.clone(),
            ..Default::default()
        }
    }

    fn pipeline_config(&self) -> Result<PipelineConfig> {
        let base = match &self.config {
            Some(p) => ConfigOverrides::load(p)?,
            None => ConfigOverrides::default(),
        };
        let cfg = PipelineConfig::from_overrides(base.merge(self.overrides()))?;
        if !cfg.manifest.is_file() {
            bail!("manifest {} does not exist", cfg.manifest.display());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract HoG + color naming descriptors from keyframes
    ExtractVisual,
    /// Train the GMM on training descriptors
    TrainGmm,
    /// Encode every video as a normalized Fisher vector
    EncodeFv,
    /// Fit the TF-IDF model on metadata and encode text features
    TrainText,
    /// Train one-vs-rest linear SVMs
    TrainSvm,
    /// Score test videos
    Predict,
    /// Calibrate and fuse score tables of several modalities
    Fuse {
        /// Modalities to fuse
        #[arg(long, value_delimiter = ',', default_values_t = [String::from("visual"), String::from(TEXT_MODALITY)])]
        modalities: Vec<String>,
    },
    /// Evaluate a score table (defaults to the configured modality)
    Evaluate {
        /// Score table name, e.g. visual, text or fusion-max
        #[arg(long)]
        scores: Option<String>,
        /// Print JSON lines instead of TSV
        #[arg(long)]
        json: bool,
    },
    /// Run the full pipeline once and report time per stage
    Timing,
    /// Evaluate every (K, normalization) combination
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16, 64])]
        ks: Vec<usize>,
        /// Normalizations to try (default: the whole menu), separated by ';'
        #[arg(long, value_delimiter = ';')]
        norms: Vec<String>,
    },
    /// Write a synthetic dataset with its manifest
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        /// "frames" (12 videos with frames and metadata) or "descriptors"
        /// (3 genres x 60 videos of 92-dim descriptors)
        #[arg(long, default_value = "frames")]
        kind: String,
        #[arg(long, default_value_t = 7)]
        fixture_seed: u64,
    },
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("FVGENRE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("FVGENRE_THREADS={raw:?} is not a thread count"))?;
    if n == 0 {
        bail!("FVGENRE_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::MakeFixture { out, kind, fixture_seed } = &cli.command {
        let manifest = match kind.as_str() {
            "frames" => write_frame_fixture(out, *fixture_seed)?,
            "descriptors" => {
                let spec = CorpusSpec {
                    seed: *fixture_seed,
                    ..CorpusSpec::default()
                };
                write_corpus(&generate_corpus(&spec), out)?
            }
            other => bail!("unknown fixture kind {other:?} (frames or descriptors)"),
        };
        println!("{}", manifest.display());
        return Ok(());
    }

    let cfg = cli.settings.pipeline_config()?;
    match cli.command {
        Command::ExtractVisual => {
            let s = pipeline::extract_visual(&cfg)?;
            println!("extracted {} videos, skipped {}", s.written, s.skipped);
        }
        Command::TrainGmm => {
            let log = pipeline::run_train_gmm(&cfg)?;
            println!(
                "trained K={} on {} of {} descriptors, {} iterations, converged: {}",
                cfg.gmm.k,
                log.sampled,
                log.total,
                log.mean_log_likelihood.len(),
                log.converged
            );
        }
        Command::EncodeFv => {
            let n = pipeline::run_encode_fv(&cfg)?;
            println!("encoded {n} videos ({})", cfg.normalization);
        }
        Command::TrainText => {
            let n = pipeline::run_train_text(&cfg)?;
            println!("encoded text features for {n} videos");
        }
        Command::TrainSvm => {
            let model = pipeline::run_train_svm(&cfg)?;
            println!("trained {} genre SVMs on {} features", model.n_genres(), model.feature_dim());
        }
        Command::Predict => {
            let t = pipeline::run_predict(&cfg)?;
            println!("scored {} test videos", t.n_videos());
        }
        Command::Fuse { modalities } => {
            let t = pipeline::run_fuse(&cfg, &modalities)?;
            println!("wrote {}", cfg.work().scores(&t.modality).display());
        }
        Command::Evaluate { scores, json } => {
            let name = scores.unwrap_or_else(|| cfg.modality.clone());
            let report = pipeline::run_evaluate(&cfg, &name)?;
            if json {
                print!("{}", report.to_jsonl());
            } else {
                print!("{}", report.to_tsv());
            }
        }
        Command::Timing => {
            println!("{}", pipeline::run_timing(&cfg)?);
        }
        Command::Sweep { ks, norms } => {
            let norms = if norms.is_empty() {
                normalization_menu_with_alpha(cfg.alpha)
                    .into_iter()
                    .map(|(name, spec)| (name.to_string(), spec))
                    .collect()
            } else {
                norms
                    .iter()
                    .map(|n| Ok((n.trim().to_string(), NormalizationSpec::parse(n, cfg.alpha)?)))
                    .collect::<Result<Vec<_>>>()?
            };
            let rows = pipeline::run_sweep(&cfg, &ks, &norms)?;
            print!("{}", pipeline::sweep_to_tsv(&rows));
        }
        Command::MakeFixture { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
