use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};
use plasmodium_core::cnn_models::CnnArch;
use plasmodium_core::dataset::{ingest_corpus, make_split, SplitManifest, CORPUS_URL, DATA_ENV};
use plasmodium_core::metrics::render_report;
use plasmodium_core::pipeline::{self, parse_experiments, subset_corpus, RunOptions};
use plasmodium_core::preprocess::PreprocessProfile;
use plasmodium_core::runs::{self, read_run, render_compare, RunKind, MANIFEST_FILE};
use plasmodium_core::svm::{self, Features, DEFAULT_C_GRID, DEFAULT_FOLDS, DEFAULT_GAMMA_GRID};
use plasmodium_core::transfer::{Backbone, Regime, WEIGHTS_ENV};
use plasmodium_core::{DatasetSplit, LabeledImage, Scheme};
use rayon::prelude::*;

/// Balanced subset and epoch cap of the default (desk-scale) reproduction.
const DESK_SUBSET: usize = 2000;
const DESK_MAX_EPOCHS: usize = 15;

#[derive(Parser)]
#[command(name = "plasmodium", version, about = "Train and compare thin-smear cell classifiers")]
struct Cli {
    /// Corpus root holding `Parasitized/` and `Uninfected/`.
    #[arg(long, global = true, env = DATA_ENV, default_value = "data/cell_images")]
    data_dir: PathBuf,
    /// Converted ImageNet snapshots, one directory per backbone.
    #[arg(long, global = true, env = WEIGHTS_ENV, default_value = "weights")]
    weights_dir: PathBuf,
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode the corpus and print per-class counts.
    Ingest {
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write a split manifest.
    Split {
        #[arg(long)]
        scheme: Scheme,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<runs-dir>/splits/<scheme>-seed<seed>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search, fit and evaluate the RBF SVM.
    TrainSvm {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Cross-validate the SVM grid on the training part and print the table.
    GridSearch {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        subset: Option<usize>,
        #[command(flatten)]
        grid: GridArgs,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one of the from-scratch networks.
    TrainCnn {
        #[arg(long)]
        arch: CnnArch,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train an ImageNet backbone under one fine-tuning regime.
    TrainTransfer {
        #[arg(long)]
        backbone: Backbone,
        #[arg(long)]
        regime: Regime,
        #[command(flatten)]
        run: RunArgs,
        /// Start from random weights when no snapshot is present.
        #[arg(long)]
        allow_random_init: bool,
    },
    /// Score a stored run's model on its test split again and rewrite its reports.
    Evaluate {
        run_dir: PathBuf,
        /// Print the recorded report without reading the corpus.
        #[arg(long)]
        stored: bool,
    },
    /// Copy a run's bundle into a deployable models directory.
    Export {
        run_dir: PathBuf,
        #[arg(long, default_value = "models")]
        out: PathBuf,
    },
    /// Summarize stored runs.
    Report {
        /// Print the model x mode comparison table.
        #[arg(long)]
        compare: bool,
        /// Average several seeds of one cell instead of rejecting them.
        #[arg(long)]
        mean: bool,
        /// Run directories; defaults to every run under `--runs-dir`.
        runs: Vec<PathBuf>,
    },
    /// Run the whole model matrix.
    Reproduce {
        /// Whole corpus and full epoch budgets instead of the desk-scale subset.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Cells trained at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// JSON list of `{backbone, regime, seed}` cells to run instead.
        #[arg(long)]
        experiments: Option<PathBuf>,
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        allow_random_init: bool,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use this split manifest instead of deriving one from the seed.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Train on a class-balanced random subset of this many images.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    no_export: bool,
}

#[derive(Args, Clone)]
struct GridArgs {
    #[arg(long = "c", value_delimiter = ',', default_values_t = DEFAULT_C_GRID)]
    c_grid: Vec<f64>,
    #[arg(long = "gamma", value_delimiter = ',', default_values_t = DEFAULT_GAMMA_GRID)]
    gamma_grid: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { limit } => {
            let corpus = ingest(&cli.data_dir, *limit)?;
            println!("{}", corpus.summary);
            Ok(())
        }
        Command::Split { scheme, seed, out } => {
            let corpus = ingest(&cli.data_dir, None)?.images;
            let split = make_split(&corpus, *scheme, *seed)?;
            let out = out
                .clone()
                .unwrap_or_else(|| cli.runs_dir.join("splits").join(format!("{scheme}-seed{seed}.json")));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(&out, SplitManifest::new(&split, &corpus).to_json())
                .with_context(|| format!("writing {}", out.display()))?;
            for w in &split.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: {} train, {} validation, {} test",
                out.display(),
                split.train.len(),
                split.validation.len(),
                split.test.len()
            );
            Ok(())
        }
        Command::TrainSvm { run, grid } => {
            let opts = RunOptions {
                svm_grid: (grid.c_grid.clone(), grid.gamma_grid.clone()),
                svm_folds: grid.folds,
                ..options(cli, run)
            };
            single_run(cli, RunKind::Svm, run, &opts)
        }
        Command::GridSearch {
            seed,
            split,
            subset,
            grid,
            out,
        } => {
            let corpus = corpus(cli, *subset)?;
            let split = resolve_split(&corpus, split.as_deref(), Scheme::Svm, *seed)?;
            let profile = PreprocessProfile::svm();
            let mut train = Features::new(profile.sample_shape().iter().product());
            for &i in &split.train {
                train.push(&svm::featurize(&corpus[i].pixels, &profile)?, corpus[i].label)?;
            }
            let result = svm::grid_search(&train, &grid.c_grid, &grid.gamma_grid, grid.folds, *seed)?;
            let csv = result.to_csv();
            print!("{csv}");
            println!("best: C={} gamma={}", result.best.c, result.best.gamma);
            if let Some(out) = out {
                fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
            }
            Ok(())
        }
        Command::TrainCnn { arch, run } => single_run(cli, RunKind::Cnn { arch: *arch }, run, &options(cli, run)),
        Command::TrainTransfer {
            backbone,
            regime,
            run,
            allow_random_init,
        } => {
            let opts = RunOptions {
                require_pretrained: !allow_random_init,
                ..options(cli, run)
            };
            let kind = RunKind::Transfer {
                backbone: *backbone,
                regime: *regime,
            };
            single_run(cli, kind, run, &opts)
        }
        Command::Evaluate { run_dir, stored } => {
            let (manifest, stored_report) = read_run(run_dir)?;
            let report = if *stored {
                stored_report
            } else {
                let corpus = ingest(&cli.data_dir, None)?.images;
                let report = pipeline::reevaluate(run_dir, &corpus)?;
                runs::write_run(run_dir, &manifest, &report, None)?;
                report
            };
            println!("{}", manifest.run_id);
            print!("{}", render_report(&report));
            Ok(())
        }
        Command::Export { run_dir, out } => {
            let bundle = pipeline::publish(run_dir, out)?;
            let f = bundle.info.fidelity.ok_or_else(|| anyhow!("export recorded no fidelity check"))?;
            println!(
                "{}: max deviation {:.2e} on {} probes",
                bundle.dir.display(),
                f.max_abs_diff,
                f.probe_count
            );
            Ok(())
        }
        Command::Report { compare, mean, runs } => {
            let dirs = if runs.is_empty() { run_dirs(&cli.runs_dir)? } else { runs.clone() };
            let loaded = dirs
                .iter()
                .map(|d| read_run(d).with_context(|| format!("reading {}", d.display())))
                .collect::<Result<Vec<_>>>()?;
            if *compare {
                let rows = if *mean { runs::compare_mean(&loaded) } else { runs::compare(&loaded)? };
                print!("{}", render_compare(&rows));
            } else {
                for (m, r) in &loaded {
                    println!("{:<28} accuracy {:.4}  mcc {:.4}", m.run_id, r.accuracy, r.mcc);
                }
            }
            Ok(())
        }
        Command::Reproduce {
            full,
            seeds,
            jobs,
            experiments,
            subset,
            max_epochs,
            allow_random_init,
        } => {
            let subset = if *full { *subset } else { Some(subset.unwrap_or(DESK_SUBSET)) };
            let max_epochs = if *full { *max_epochs } else { Some(max_epochs.unwrap_or(DESK_MAX_EPOCHS)) };
            let cells: Vec<(RunKind, u64)> = match experiments {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    parse_experiments(&text)?.into_iter().map(|e| (e.kind(), e.seed)).collect()
                }
                None => RunKind::matrix()
                    .into_iter()
                    .flat_map(|k| (0..*seeds).map(move |s| (k, s)))
                    .collect(),
            };
            let corpus = corpus(cli, subset)?;
            let opts = RunOptions {
                runs_dir: cli.runs_dir.clone(),
                weights_dir: cli.weights_dir.clone(),
                max_epochs,
                require_pretrained: !allow_random_init,
                ..Default::default()
            };
            let pool = rayon::ThreadPoolBuilder::new().num_threads((*jobs).max(1)).build()?;
            let results: Vec<_> = pool.install(|| {
                cells
                    .par_iter()
                    .map(|&(kind, seed)| {
                        info!("starting {}", runs::run_id(kind, seed));
                        pipeline::run(&corpus, kind, seed, None, &opts)
                            .map_err(|e| anyhow!("{}: {e}", runs::run_id(kind, seed)))
                    })
                    .collect()
            });
            let mut done = Vec::new();
            let mut failed = Vec::new();
            for r in results {
                match r {
                    Ok(out) => done.push((out.manifest, out.report)),
                    Err(e) => failed.push(e),
                }
            }
            let table = render_compare(&runs::compare_mean(&done));
            fs::create_dir_all(&cli.runs_dir)?;
            fs::write(cli.runs_dir.join("compare.txt"), &table)?;
            print!("{table}");
            for e in &failed {
                error!("{e:#}");
            }
            if failed.is_empty() {
                Ok(())
            } else {
                bail!("{} of {} runs failed", failed.len(), cells.len())
            }
        }
    }
}

fn options(cli: &Cli, run: &RunArgs) -> RunOptions {
    RunOptions {
        runs_dir: cli.runs_dir.clone(),
        weights_dir: cli.weights_dir.clone(),
        max_epochs: run.max_epochs,
        augment: !run.no_augment,
        export: !run.no_export,
        ..Default::default()
    }
}

fn single_run(cli: &Cli, kind: RunKind, run: &RunArgs, opts: &RunOptions) -> Result<()> {
    let corpus = corpus(cli, run.subset)?;
    let split = match &run.split {
        Some(path) => Some(resolve_split(&corpus, Some(path), kind.scheme(), run.seed)?),
        None => None,
    };
    let out = pipeline::run(&corpus, kind, run.seed, split.as_ref(), opts)?;
    print!("{}", render_report(&out.report));
    println!("wrote {}", out.dir.display());
    Ok(())
}

fn ingest(dir: &Path, limit: Option<usize>) -> Result<plasmodium_core::Corpus> {
    let corpus = ingest_corpus(dir, limit).map_err(|e| {
        anyhow!(
            "{e}\nthe cell image corpus is available from {CORPUS_URL}; \
             unpack it and point {DATA_ENV} (or --data-dir) at the directory holding \
             Parasitized/ and Uninfected/"
        )
    })?;
    if corpus.is_empty() {
        bail!("no images found under {}; the corpus is available from {CORPUS_URL}", dir.display());
    }
    Ok(corpus)
}

/// The corpus, optionally reduced to a balanced subset drawn with seed 0
/// so every model of a comparison sees the same images.
fn corpus(cli: &Cli, subset: Option<usize>) -> Result<Vec<LabeledImage>> {
    let corpus = ingest(&cli.data_dir, None)?;
    info!("loaded {} images", corpus.len());
    Ok(match subset {
        Some(n) => subset_corpus(&corpus.images, n, 0)?,
        None => corpus.images,
    })
}

fn resolve_split(corpus: &[LabeledImage], path: Option<&Path>, scheme: Scheme, seed: u64) -> Result<DatasetSplit> {
    match path {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let manifest: SplitManifest =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            Ok(manifest.resolve(corpus)?)
        }
        None => Ok(make_split(corpus, scheme, seed)?),
    }
}

fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
