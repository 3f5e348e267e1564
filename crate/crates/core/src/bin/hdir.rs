//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file
//! format error, 3 numerical failure, 4 gradient check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hdir::chain::Algo;
use hdir::config::Settings;
use hdir::denoiser::Denoiser;
use hdir::diffusion::NoiseSchedule;
use hdir::experiments::{
    benchmark, check_gradients, discover, discovery_chain, invert_and_edit, load_denoiser, load_discovery,
    make_dataset, pretrain, rca_eval, reports_to_csv, save_denoiser, save_discovery, seeded_noise, smoothed, traverse,
    DiscoveryModels, MeasureConfig, SIDE,
};
use hdir::io::{read_pgm, tile_horizontally, write_pgm};
use hdir::{Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "hdir", version, about = "Discover and apply interpretable bottleneck directions of a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the denoiser on the toy disc dataset.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step loss CSV.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Train shift block, discriminator and reconstructor on a frozen denoiser.
    Discover {
        #[arg(long)]
        dm: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Images along one direction, tiled left to right by ascending magnitude.
    Traverse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One unshifted sample from the same noise `traverse` uses.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert an image and regenerate it with edits `k:s` applied.
    Edit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "edit", value_parser = parse_edit)]
        edits: Vec<(usize, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Peak memory and iteration time of both backward strategies.
    Bench {
        #[arg(long)]
        dm: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = AlgoChoice::Both)]
        algo: AlgoChoice,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reconstructor classification accuracy.
    Rca {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare node-by-node and full-graph gradients on random float64 nets.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        m: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seeds per step count, starting at `--seed`.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AlgoChoice {
    Vanilla,
    Checkpointed,
    Both,
}

fn parse_edit(s: &str) -> Result<(usize, f64), String> {
    let (k, v) = s.split_once(':').ok_or_else(|| format!("expected k:s, got '{s}'"))?;
    let k = k.trim().parse().map_err(|_| format!("bad direction in '{s}'"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("bad magnitude in '{s}'"))?;
    if !v.is_finite() {
        return Err(format!("magnitude must be finite in '{s}'"));
    }
    Ok((k, v))
}

enum Failure {
    Lib(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn settings(path: Option<&Path>) -> Result<Settings, Error> {
    match path {
        Some(p) => Settings::from_file(p),
        None => Ok(Settings::default()),
    }
}

fn print_resolved(command: &Command, s: Option<&Settings>) {
    eprintln!("# command: {command:?}");
    if let Some(s) = s {
        eprint!("{}", s.to_text());
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_images(path: &Path, images: &[Tensor<f32>]) -> Result<(), Error> {
    let rows: Vec<Vec<f64>> = images.iter().map(|t| t.to_f64_vec()).collect();
    let (w, h, pixels) = tile_horizontally(&rows, SIDE);
    write_pgm(path, w, h, &pixels)
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Pretrain {
            config,
            out,
            seed,
            losses,
        } => {
            let mut s = settings(config.as_deref())?;
            if let Some(seed) = seed {
                s.pretrain.seed = *seed;
            }
            print_resolved(&cli.command, Some(&s));
            s.denoiser.validate()?;
            let sched = NoiseSchedule::linear(s.diffusion_steps, s.beta_start, s.beta_end)?;
            let data = make_dataset(s.pretrain.dataset_size, s.pretrain.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s.pretrain.seed);
            rng.set_stream(1);
            let dm = Denoiser::<f32>::new(s.denoiser, &mut rng)?;
            let values = pretrain(&dm, &data, &sched, &s.pretrain)?;
            if let Some(path) = losses {
                let mut csv = String::from("step,loss\n");
                for (i, v) in values.iter().enumerate() {
                    csv.push_str(&format!("{i},{v}\n"));
                }
                write_text(path, &csv)?;
            }
            if let Some(last) = smoothed(&values, 500).last() {
                eprintln!("final smoothed loss {last:.4}");
            }
            save_denoiser(out, &dm, &sched)?;
        }
        Command::Discover {
            dm,
            config,
            out,
            metrics,
            seed,
        } => {
            let mut s = settings(config.as_deref())?;
            if let Some(seed) = seed {
                s.discovery.seed = *seed;
            }
            print_resolved(&cli.command, Some(&s));
            let (dm, sched) = load_denoiser::<f32>(dm)?;
            eprintln!("run {}", s.discovery.name());
            let (models, log) = discover(&dm, &sched, &s.discovery)?;
            log.write_csv(metrics)?;
            save_discovery(out, &dm, &sched, &s.discovery, &models)?;
        }
        Command::Traverse {
            model,
            k,
            grid,
            seed,
            out,
        } => {
            print_resolved(&cli.command, None);
            let b = load_discovery::<f32>(model)?;
            let chain = discovery_chain(&b.dm, &b.sched, &b.cfg)?;
            let x_t = seeded_noise(1, b.dm.config().data_dim, *seed);
            let images = traverse(&chain, &b.models.block, *k, *grid, &x_t)?;
            write_images(out, &images)?;
        }
        Command::Sample { model, seed, out } => {
            print_resolved(&cli.command, None);
            let b = load_discovery::<f32>(model)?;
            let chain = discovery_chain(&b.dm, &b.sched, &b.cfg)?;
            let x_t = seeded_noise(1, b.dm.config().data_dim, *seed);
            write_images(out, &[chain.sample(&x_t)?])?;
        }
        Command::Edit {
            model,
            image,
            edits,
            out,
        } => {
            print_resolved(&cli.command, None);
            let b = load_discovery::<f32>(model)?;
            let (w, h, pixels) = read_pgm(image)?;
            if w * h != b.dm.config().data_dim {
                return Err(Error::parse(image, format!("expected {} pixels, found {w}x{h}", b.dm.config().data_dim)).into());
            }
            let chain = discovery_chain(&b.dm, &b.sched, &b.cfg)?;
            let x0 = Tensor::<f32>::from_f64(&[1, w * h], &pixels)?;
            let edited = invert_and_edit(&chain, &b.models.block, &x0, edits)?;
            write_pgm(out, w, h, &edited.to_f64_vec())?;
        }
        Command::Bench {
            dm,
            config,
            m,
            algo,
            budget,
            out,
            seed,
        } => {
            let mut s = settings(config.as_deref())?;
            if let Some(m) = m {
                s.bench.sample_steps = m.clone();
            }
            if budget.is_some() {
                s.bench.budget = *budget;
            }
            print_resolved(&cli.command, Some(&s));
            let (dm, sched) = load_denoiser::<f32>(dm)?;
            let models = DiscoveryModels::<f32>::new(&s.discovery, dm.config(), &mut ChaCha8Rng::seed_from_u64(*seed))?;
            let algos = match algo {
                AlgoChoice::Vanilla => vec![Algo::Vanilla],
                AlgoChoice::Checkpointed => vec![Algo::Checkpointed],
                AlgoChoice::Both => vec![Algo::Checkpointed, Algo::Vanilla],
            };
            let template = MeasureConfig {
                algo: Algo::Checkpointed,
                sample_steps: 0,
                batch_size: s.bench.batch_size,
                warmup: s.bench.warmup,
                iterations: s.bench.iterations,
                budget: s.bench.budget,
                seed: *seed,
            };
            let reports = benchmark(&dm, &sched, &s.discovery, &models, &algos, &s.bench.sample_steps, &template)?;
            let csv = reports_to_csv(&reports);
            print!("{csv}");
            write_text(out, &csv)?;
        }
        Command::Rca { model, pairs, seed } => {
            print_resolved(&cli.command, None);
            let b = load_discovery::<f32>(model)?;
            let chain = discovery_chain(&b.dm, &b.sched, &b.cfg)?;
            let acc = rca_eval(&chain, &b.models.block, &b.models.recon, *pairs, *seed)?;
            println!("{acc}");
        }
        Command::Gradcheck {
            m,
            seed,
            seeds,
            tolerance,
        } => {
            print_resolved(&cli.command, None);
            let mut worst: f64 = 0.0;
            for &steps in m {
                for s in *seed..*seed + *seeds {
                    let r = check_gradients(steps, s, None)?;
                    println!(
                        "M={} seed={} t_stop={} max_rel_err={:e}",
                        r.sample_steps, r.seed, r.t_stop, r.max_rel_err
                    );
                    worst = worst.max(r.max_rel_err);
                }
            }
            if !(worst < *tolerance) {
                return Err(Failure::Gradcheck(format!(
                    "largest relative error {worst:e} is not below {tolerance:e}"
                )));
            }
            println!("ok: largest relative error {worst:e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(Failure::Gradcheck(msg)) => {
            eprintln!("gradient check failed: {msg}");
            ExitCode::from(4)
        }
    }
}
