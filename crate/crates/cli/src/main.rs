use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dtm_core::harness::{self, gradcheck, io, run, GradcheckConfig, Method, RunConfig};
use dtm_core::numerics::Rng;
use dtm_core::priors::{train_mlp_denoiser, TrainConfig};

#[derive(Parser)]
#[command(name = "dtm", version, about = "Guided diffusion sampling by trajectory matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; falls back to the config, then DTM_OUT_DIR, then ./dtm-out.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// ndtm, rb_mod, dps, linear_cg, ctdtm, ftm or unguided.
    #[arg(long, value_name = "NAME")]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Unguided samples from the prior.
    Sample(Common),
    /// Synthesize a problem and solve it with the configured method.
    Solve(Common),
    /// Repeat the solve over the config's [sweep] grid.
    Sweep(Common),
    /// Finite-difference checks of every derivative; nonzero exit on failure.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Probes per component.
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
    /// Closed-form oracle cross-checks; nonzero exit on failure.
    Oracle(Common),
    /// Train an MLP denoiser on standard-normal data.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
    },
}

fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .or_else(|| std::env::var_os("DTM_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("dtm-out"))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_ref().context("--config PATH is required for this command")?;
    let mut cfg = RunConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &common.method {
        cfg.method = Method::parse(name)?;
    }
    cfg.output_dir = Some(out_dir(common, Some(&cfg)));
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Sample(common) => {
            let cfg = load_config(&common)?;
            let dir = cfg.output_dir.clone().expect("set by load_config");
            let samples = run::run_sample(&cfg)?;
            create(&dir)?;
            io::write_tensor(&dir.join("samples.bin"), &samples)?;
            let dim = samples.first().map_or(0, Vec::len);
            let mut text = (0..dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",") + "\n";
            for s in &samples {
                text += &s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
                text.push('\n');
            }
            std::fs::write(dir.join("samples.csv"), text)?;
            println!("wrote {} samples to {}", samples.len(), dir.display());
        }
        Command::Solve(common) => {
            let cfg = load_config(&common)?;
            let m = harness::run_solve(&cfg)?;
            println!(
                "method={} psnr={:.3} residual={:.5} sample_mean_error={:.5} energy_distance={:.5}{} wall_time={:.3}s",
                cfg.method.name(),
                m.psnr,
                m.residual,
                m.sample_mean_error,
                m.energy_distance,
                m.kernel_error.map(|k| format!(" kernel_error={k:.5}")).unwrap_or_default(),
                m.wall_time
            );
            println!("outputs in {}", cfg.output_dir.expect("set").display());
        }
        Command::Sweep(common) => {
            let cfg = load_config(&common)?;
            let Some(spec) = cfg.sweep.clone() else {
                bail!("config has no [sweep] section");
            };
            let rows = harness::run_sweep(&cfg, &spec)?;
            let dir = cfg.output_dir.clone().expect("set");
            create(&dir)?;
            run::write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} rows ({failed} failed) written to {}", rows.len(), dir.join("sweep.csv").display());
        }
        Command::Gradcheck { common, probes } => {
            let gc = GradcheckConfig {
                probes,
                seed: common.seed.unwrap_or(0),
                ..GradcheckConfig::default()
            };
            let report = harness::run_gradcheck(&gc)?;
            let dir = out_dir(&common, None);
            create(&dir)?;
            gradcheck::write_validation_csv(&dir.join("validation.csv"), &report.rows)?;
            for (component, worst) in report.max_by_component() {
                println!("{component:36} {worst:.3e}");
            }
            println!(
                "uncorrected bound violation rate {:.4} (informational)",
                report.uncorrected_violation_rate
            );
            if !report.all_pass() {
                let n = report.rows.iter().filter(|r| !r.pass).count();
                eprintln!("{n} checks failed; see {}", dir.join("validation.csv").display());
                return Ok(ExitCode::FAILURE);
            }
            println!("all checks passed");
        }
        Command::Oracle(common) => {
            let rows = harness::run_oracle_report(common.seed.unwrap_or(0))?;
            let dir = out_dir(&common, None);
            create(&dir)?;
            gradcheck::write_oracle_csv(&dir.join("oracle.csv"), &rows)?;
            for r in &rows {
                println!("{:36} {:>12.4e} {}", r.check, r.value, if r.pass { "pass" } else { "FAIL" });
            }
            if rows.iter().any(|r| !r.pass) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Train {
            common,
            dim,
            samples,
            epochs,
            hidden,
        } => {
            let cfg = match &common.config {
                Some(_) => Some(load_config(&common)?),
                None => None,
            };
            let sched = cfg.as_ref().map(|c| c.schedule).unwrap_or_default().build()?;
            let mut rng = Rng::new(common.seed.unwrap_or(0));
            let data: Vec<Vec<f64>> = (0..samples).map(|_| rng.gaussian(dim)).collect::<Result<_, _>>()?;
            let tc = TrainConfig {
                hidden,
                epochs,
                ..TrainConfig::default()
            };
            let (net, losses) = train_mlp_denoiser(&data, &sched, &tc, &mut rng)?;
            let dir = out_dir(&common, cfg.as_ref());
            create(&dir)?;
            let path = dir.join("mlp.bin");
            net.save(&path)?;
            println!(
                "final loss {:.5}; model written to {}",
                losses.last().copied().unwrap_or(f64::NAN),
                path.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
