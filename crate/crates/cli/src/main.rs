use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transport_infer::experiment::{
    aggregate, mean_std, run_inference, run_parametric, run_parametric_seeds, run_sweep, spectral, write_aggregate_csv,
    write_parametric_csv, write_profile_csv, write_spectral, write_sweep_csv, Axis, ResultBundle, RunConfig, SweepSpec,
};
use transport_infer::inference::BatchDataset;
use transport_infer::Error;

#[derive(Parser)]
#[command(name = "tinfer", version, about = "Transfer-operator inference from unpaired sample batches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    constrained: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a batch dataset and write it as JSON.
    Generate(Common),
    /// Fit a coupling and write the result bundle, solver trace and summary.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Existing dataset; generated from the configuration when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Replicated runs over one configuration axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Comma-separated replicate seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Singular vectors and coherent-set partitions of a fitted estimate.
    Spectral {
        #[command(flatten)]
        common: Common,
        /// Result bundle written by `infer`; defaults to OUT/result.json.
        #[arg(long)]
        coupling: Option<PathBuf>,
    },
    /// Maximum-likelihood fit of the noise level over the configured family.
    Parametric {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Input(format!("cannot read config {}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(b) = c.constrained {
        cfg.constrained = b;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = load_config(&common)?;
            let path = cfg.out.join("dataset.json");
            cfg.generate()?.save(&path)?;
            log::info!("wrote {}", path.display());
        }
        Command::Infer { common, dataset } => {
            let cfg = load_config(&common)?;
            let ds = match dataset {
                Some(p) => BatchDataset::load(&p)?,
                None => {
                    let ds = cfg.generate()?;
                    ds.save(&cfg.out.join("dataset.json"))?;
                    ds
                }
            };
            let out = run_inference(&cfg, &ds)?;
            out.bundle().save(&cfg.out.join("result.json"))?;
            out.state.write_trace_csv(&cfg.out.join("trace.csv"))?;
            write_json(&cfg.out.join("summary.json"), &out.summary)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
        }
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
        } => {
            let cfg = load_config(&common)?;
            let spec = SweepSpec {
                axis,
                values,
                seeds,
                base: cfg.clone(),
            };
            let rows = run_sweep(&spec)?;
            write_sweep_csv(&cfg.out.join("sweep_raw.csv"), &rows)?;
            let agg = aggregate(axis, &spec.values, &rows);
            write_aggregate_csv(&cfg.out.join("sweep_aggregate.csv"), &agg)?;
            for a in &agg {
                println!(
                    "{:>12} mean {:.6} std {:.6} ({} ok, {} failed)",
                    a.value, a.mean, a.std, a.count, a.failures
                );
            }
        }
        Command::Spectral { common, coupling } => {
            let cfg = load_config(&common)?;
            let path = coupling.unwrap_or_else(|| cfg.out.join("result.json"));
            let est = ResultBundle::load(&path)?.estimate()?;
            if !est.coupling.constrained {
                return Err(Error::Input(
                    "spectral clustering needs a coupling fitted with the marginal constraint (--constrained true)"
                        .into(),
                ));
            }
            let res = spectral(&est, cfg.n_modes)?;
            write_spectral(&cfg.out, &est, &res)?;
            write_json(
                &cfg.out.join("spectral.json"),
                &serde_json::json!({ "singular_values": res.singular_values }),
            )?;
            for (i, s) in res.singular_values.iter().enumerate() {
                println!("sigma_{i} = {s:.6}");
            }
        }
        Command::Parametric { common, seeds } => {
            let cfg = load_config(&common)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let first = RunConfig {
                seed: seeds[0],
                ..cfg.clone()
            };
            let fit = run_parametric(&first, &first.generate()?)?;
            write_profile_csv(&cfg.out.join("profile.csv"), &fit)?;
            let rows = run_parametric_seeds(&cfg, &seeds);
            write_parametric_csv(&cfg.out.join("parametric.csv"), &rows)?;
            let thetas: Vec<f64> = rows.iter().filter_map(|r| r.theta_hat).collect();
            let (mean, std) = mean_std(&thetas);
            let summary = serde_json::json!({
                "sigma": cfg.sigma,
                "N": cfg.n,
                "M": cfg.m,
                "seeds": seeds.len(),
                "theta_hat_mean": mean,
                "theta_hat_std": std,
                "failures": rows.len() - thetas.len(),
            });
            write_json(&cfg.out.join("parametric.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Json(_) | Error::Unsupported(_) => 2,
        Error::Io(_) => 3,
        Error::Csv(c) if c.is_io_error() => 3,
        Error::Convergence { .. } => 4,
        Error::Numerical { .. } | Error::Degenerate(_) | Error::Assembly(_) | Error::Evaluation(_) => 5,
        Error::Csv(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
