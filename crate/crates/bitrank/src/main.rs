//! Thin command-line front end; all logic lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bitrank::cli::{
    cmd_benchmark, cmd_binarize, cmd_evaluate, cmd_fit, cmd_search, cmd_split, SearchSpace,
};
use bitrank::dataset::{Format, SplitSpec};
use bitrank::error::Error;
use bitrank::training::{Loss, TrainConfig};
use bitrank::Representation;

#[derive(Parser)]
#[command(
    name = "bitrank",
    about = "Learning-to-rank factorization with real-valued and bit-packed binary representations",
    version
)]
struct CliArgs {
    /// RNG seed shared by all randomized steps of a command.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a ratings file and write train/test/validation datasets.
    Split {
        /// Ratings file (`user::item::rating::timestamp` or CSV).
        #[arg(long)]
        input: PathBuf,
        /// Input layout: dat or csv.
        #[arg(long, default_value = "dat")]
        format: String,
        /// Keep only ratings at or above this value.
        #[arg(long)]
        min_rating: Option<f32>,
        /// Comma-separated train,test,validation fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        fractions: String,
        /// Output directory for the three dataset files.
        #[arg(long, default_value = "splits")]
        out: PathBuf,
    },
    /// Fit a model on a compact dataset file.
    Fit {
        #[arg(long)]
        train: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Output model file.
        #[arg(long, default_value = "model.blrm")]
        out: PathBuf,
    },
    /// Random hyperparameter search ranked by test-set MRR.
    Search {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value = "dense")]
        representation: String,
        /// Number of sampled configurations.
        #[arg(long, default_value_t = 30)]
        trials: usize,
        /// Adaptive-hinge attempt budget.
        #[arg(long, default_value_t = 5)]
        max_sampled: usize,
        #[arg(long, default_value = "search")]
        out: PathBuf,
    },
    /// Pack a dense model file into sign bits plus scales.
    Binarize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "model-packed.blrm")]
        out: PathBuf,
    },
    /// Rank held-out interactions and report MRR.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Dataset whose interactions are ranked.
        #[arg(long)]
        eval: PathBuf,
        /// Training dataset supplying the exclusion sets.
        #[arg(long)]
        train: PathBuf,
    },
    /// Scoring-throughput and memory table over synthetic catalogs.
    Benchmark {
        /// Comma-separated latent dimensionalities.
        #[arg(long, default_value = "32,64,128,256,512,1024")]
        dims: String,
        /// Catalog size scored per repetition.
        #[arg(long, default_value_t = 100_000)]
        items: usize,
        /// Timed repetitions per dimensionality and kind.
        #[arg(long, default_value_t = 500)]
        reps: usize,
    },
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value = "dense")]
    representation: String,
    /// bpr, bpr_log or adaptive_hinge.
    #[arg(long, default_value = "bpr")]
    loss: String,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f32,
    #[arg(long, default_value_t = 1e-6)]
    l2: f32,
    #[arg(long, default_value_t = 256)]
    minibatch_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Adaptive-hinge attempt budget.
    #[arg(long, default_value_t = 5)]
    max_sampled: usize,
}

fn parse_fractions(text: &str) -> Result<(f64, f64, f64), Error> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(format!(
            "fractions must be three comma-separated numbers, got {text:?}"
        )));
    }
    let mut values = [0.0f64; 3];
    for (slot, part) in values.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| {
            Error::InvalidConfig(format!("cannot parse fraction {part:?}"))
        })?;
    }
    Ok((values[0], values[1], values[2]))
}

fn parse_dims(text: &str) -> Result<Vec<usize>, Error> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("cannot parse dim {part:?}")))
        })
        .collect()
}

fn run(args: CliArgs) -> Result<(), Error> {
    match args.command {
        Command::Split {
            input,
            format,
            min_rating,
            fractions,
            out,
        } => {
            let format: Format = format.parse()?;
            let (ft, fs, fv) = parse_fractions(&fractions)?;
            let spec = SplitSpec::new(ft, fs, fv, args.seed)?;
            let outcome = cmd_split(&input, format, min_rating, &spec, &out)?;
            let (n_train, n_test, n_val) = outcome.counts;
            println!(
                "split {} interactions into train={n_train} test={n_test} validation={n_val}",
                n_train + n_test + n_val
            );
            println!("wrote {}", outcome.manifest.display());
        }
        Command::Fit { train, hyper, out } => {
            let config = TrainConfig {
                dim: hyper.dim,
                representation: hyper.representation.parse::<Representation>()?,
                loss: hyper.loss.parse::<Loss>()?,
                learning_rate: hyper.learning_rate,
                l2: hyper.l2,
                minibatch_size: hyper.minibatch_size,
                epochs: hyper.epochs,
                max_sampled: hyper.max_sampled,
                seed: args.seed,
            };
            config.validate()?;
            let outcome = cmd_fit(&train, &config, &out, |stats| {
                println!(
                    "epoch={} mean_loss={:.6} secs={:.3}",
                    stats.epoch,
                    stats.mean_loss,
                    stats.duration.as_secs_f64()
                );
            })?;
            println!("wrote {}", outcome.model_path.display());
        }
        Command::Search {
            train,
            test,
            dim,
            representation,
            trials,
            max_sampled,
            out,
        } => {
            let representation = representation.parse::<Representation>()?;
            let space = SearchSpace {
                trials,
                seed: args.seed,
                ..SearchSpace::default()
            };
            let outcome = cmd_search(&train, &test, &space, dim, representation, max_sampled, &out)?;
            for trial in &outcome.trials {
                println!("{}", trial.render());
            }
            println!(
                "best trial: seed={} loss={} lr={:e} l2={:e} minibatch={} epochs={} mrr={:.6}",
                outcome.best.seed,
                outcome.best.loss.as_str(),
                outcome.best.learning_rate,
                outcome.best.l2,
                outcome.best.minibatch_size,
                outcome.best.epochs,
                outcome.best_mrr
            );
            println!("wrote {}", outcome.log_path.display());
        }
        Command::Binarize { model, out } => {
            cmd_binarize(&model, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate { model, eval, train } => {
            let outcome = cmd_evaluate(&model, &eval, &train)?;
            println!("{}", outcome.line.render());
            print!("{}", outcome.table);
            println!(
                "evaluated {} interactions ({})",
                outcome.report.num_evaluated, outcome.report.excluded_policy
            );
        }
        Command::Benchmark { dims, items, reps } => {
            let dims = parse_dims(&dims)?;
            let outcome = cmd_benchmark(&dims, items, reps, args.seed)?;
            for line in &outcome.lines {
                println!("{}", line.render());
            }
            print!("{}", outcome.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match CliArgs::try_parse() {
        Ok(args) => args,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
