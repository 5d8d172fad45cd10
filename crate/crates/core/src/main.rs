use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use promptcl::config::{RunConfig, StrategyKind};
use promptcl::data::{generate_benchmark, write_manifest, write_stream};
use promptcl::gradcheck::grad_check;
use promptcl::harness::{mean_std, run_experiment};
use promptcl::report::{comparison_table, regenerate, save_report};
use promptcl::Error;

#[derive(Parser)]
#[command(name = "promptcl", about = "Prompt-based continual learning on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepAxis {
    Components,
    PromptLength,
}

#[derive(Subcommand)]
enum Command {
    /// Train all configured strategies over every trial seed.
    Run {
        /// TOML config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Comma-separated trial seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Strategies to run, overriding the config.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<StrategyKind>>,
        /// Fraction of domains withheld from each task's training data.
        #[arg(long)]
        dual_shift: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Vary one capacity axis of the decomposed strategy and tabulate
    /// accuracy per setting over the shared trial seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated settings for the chosen axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Reload a run directory, recheck its metrics, and print the table.
    Report {
        dir: PathBuf,
    },
    /// Generate the synthetic benchmark and write it with a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of a composite model gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> promptcl::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn cmd_run(
    config: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    strategies: Option<Vec<StrategyKind>>,
    dual_shift: Option<f64>,
    epochs: Option<usize>,
) -> promptcl::Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(s) = strategies {
        cfg.strategies = s;
    }
    if let Some(f) = dual_shift {
        cfg.dual_shift_fraction = f;
    }
    if let Some(e) = epochs {
        cfg.optimizer.epochs_per_task = e;
    }
    if out_dir.is_some() {
        cfg.out_dir = out_dir;
    }
    cfg.validate()?;
    let report = run_experiment(&cfg)?;
    print!("{}", comparison_table(&report));
    if let Some(dir) = &cfg.out_dir {
        save_report(&report, dir)?;
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(
    config: Option<PathBuf>,
    axis: SweepAxis,
    values: Vec<usize>,
    out_dir: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
) -> promptcl::Result<()> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let base = load_config(&config)?;
    let axis_name = match axis {
        SweepAxis::Components => "components",
        SweepAxis::PromptLength => "prompt-length",
    };
    println!("{:<14} {:>10} {:>10}", axis_name, "a_n_mean", "a_n_std");
    let mut rows = Vec::new();
    for &v in &values {
        let mut cfg = base.clone();
        cfg.strategies = vec![StrategyKind::Decomposed];
        if let Some(s) = &seeds {
            cfg.seeds = s.clone();
        }
        match axis {
            SweepAxis::Components => cfg.bank.num_components = v,
            SweepAxis::PromptLength => cfg.bank.prompt_len = v,
        }
        cfg.out_dir = out_dir.as_ref().map(|d| d.join(format!("{axis_name}_{v}")));
        cfg.validate()?;
        let report = run_experiment(&cfg)?;
        let accs: Vec<f64> = report.trials.iter().map(|t| t.avg_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        println!("{v:<14} {mean:>10.4} {std:>10.4}");
        if let Some(dir) = &cfg.out_dir {
            save_report(&report, dir)?;
        }
        rows.push((v, mean, std));
    }
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = format!("{axis_name},a_n_mean,a_n_std\n");
        for (v, mean, std) in rows {
            csv.push_str(&format!("{v},{mean:.6},{std:.6}\n"));
        }
        std::fs::write(dir.join("sweep.csv"), csv)?;
    }
    Ok(())
}

fn cmd_gen_data(config: Option<PathBuf>, seed: u64, out: PathBuf) -> promptcl::Result<()> {
    let cfg = load_config(&config)?;
    let stream = generate_benchmark(&cfg.benchmark, seed)?;
    std::fs::create_dir_all(&out)?;
    write_stream(&stream, &out.join("benchmark.bin"))?;
    write_manifest(&stream, &cfg.benchmark, &out.join("manifest.txt"))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// A small end-to-end gradient check through attention, normalization,
/// the MLP, and the loss, exercised from the CLI.
fn cmd_grad_check(seed: u64) -> promptcl::Result<()> {
    use promptcl::harness::{mask_past_logits, ClassifierHead};
    use promptcl::vit::{EncoderConfig, ViTEncoder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        prompt_layers: vec![0, 1],
        ..EncoderConfig::default()
    };
    let encoder = ViTEncoder::new(cfg, seed)?;
    let mut head = ClassifierHead::new(8);
    head.grow(2, seed);
    head.grow(2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image: Vec<f64> = {
        use rand::Rng;
        (0..64).map(|_| rng.random_range(0.0..1.0)).collect()
    };
    let mut params = encoder.parameters();
    params.extend(head.parameters());
    for p in &params {
        p.set_requires_grad(true);
    }
    let range = head.class_ranges[1];
    let err = grad_check(
        |tape| {
            let emb = encoder.encode(tape, &image, None).unwrap();
            let logits = head.logits(tape, &emb);
            let masked = mask_past_logits(tape, &logits, range);
            tape.cross_entropy(&masked, range.0)
        },
        &params,
    );
    println!("max relative gradient error: {err:.3e}");
    if err > 1e-4 {
        return Err(Error::Numeric(format!("gradient check failed: {err:.3e} > 1e-4")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out_dir, seeds, strategies, dual_shift, epochs } => {
            cmd_run(config, out_dir, seeds, strategies, dual_shift, epochs)
        }
        Command::Sweep { config, axis, values, out_dir, seeds } => {
            cmd_sweep(config, axis, values, out_dir, seeds)
        }
        Command::Report { dir } => regenerate(&dir).map(|table| print!("{table}")),
        Command::GenData { config, seed, out } => cmd_gen_data(config, seed, out),
        Command::GradCheck { seed } => cmd_grad_check(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Benchmark(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e @ Error::Numeric(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
