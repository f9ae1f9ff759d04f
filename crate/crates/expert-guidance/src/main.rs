//! Reproduction driver: sample | guide | trajectory | sweep | selfcheck.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use expert_guidance::config::{
    four_component_preset, two_component_preset, BackendChoice, ExperimentConfig, OUT_DIR_ENV,
};
use expert_guidance::denoiser::Decoder;
use expert_guidance::error::Error;
use expert_guidance::eval::{
    apply_axis, evaluate_batch, trajectory_analysis, PenaltyRule, SweepAxis,
    SweepRow,
};
use expert_guidance::guidance::{sample_guided, SamplerTrace};
use expert_guidance::mixture::Conditioning;
use expert_guidance::{benchmark, plot, report, selfcheck};

#[derive(Debug, Parser)]
#[command(name = "expert-guidance", version, about = "Expert-guided diffusion sampling on analytic mixtures")]
struct Cli {
    /// Experiment config (TOML). Defaults to a built-in benchmark preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (also settable via EXPERT_GUIDANCE_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the backend choice.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,

    /// Override the guidance scale w.
    #[arg(long, global = true)]
    w: Option<f64>,

    /// Override the clipping threshold tau.
    #[arg(long, global = true)]
    tau: Option<f64>,

    /// Override the warmup threshold timestep.
    #[arg(long, global = true, name = "t-thre")]
    t_thre: Option<usize>,

    /// Override the number of sampling steps.
    #[arg(long, global = true)]
    steps: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Posterior,
    Consistency,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Unguided generation: samples CSV plus a 2-D scatter SVG.
    Sample {
        /// Number of chains to run.
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
    /// Guided generation: samples, per-step trace and metric report CSVs.
    Guide {
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
    /// Intermediate-prediction quality for both backends.
    Trajectory {
        #[arg(long)]
        chains: Option<usize>,
    },
    /// Metric table over one hyperparameter axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Oracle suite; nonzero exit on any failure.
    Selfcheck,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    TThre,
    W,
    Tau,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        // Trajectory studies default to the two-component benchmark; the
        // guided experiments to the four-component one.
        None => match cli.command {
            Command::Trajectory { .. } => two_component_preset(),
            _ => four_component_preset(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(backend) = cli.backend {
        cfg.backend.kind = match backend {
            BackendArg::Posterior => BackendChoice::Posterior,
            BackendArg::Consistency => BackendChoice::Consistency,
        };
    }
    if let Some(w) = cli.w {
        cfg.guidance.w = w;
    }
    if let Some(tau) = cli.tau {
        cfg.guidance.tau = tau;
    }
    if let Some(t) = cli.t_thre {
        cfg.guidance.t_thre = t;
    }
    if let Some(s) = cli.steps {
        cfg.guidance.n_steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_manifest(dir: &Path, cfg: &ExperimentConfig) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved_config.toml"), cfg.to_toml())?;
    Ok(())
}

#[derive(Default)]
struct ChainBatch {
    observations: Vec<DVector<f64>>,
    latents: Vec<DVector<f64>>,
    traces: Vec<SamplerTrace>,
}

struct Runtime {
    cfg: ExperimentConfig,
    mixture: Arc<expert_guidance::mixture::GaussianMixture>,
    schedule: Arc<expert_guidance::schedule::NoiseSchedule>,
    backend: Arc<dyn expert_guidance::denoiser::Denoiser>,
    decoder: Decoder,
    cond: Conditioning,
}

impl Runtime {
    fn build(cfg: ExperimentConfig) -> Result<Runtime, Error> {
        let mixture = cfg.build_mixture()?;
        let schedule = cfg.build_schedule()?;
        let backend = cfg.build_backend(&mixture, &schedule)?;
        let decoder = cfg.build_decoder()?;
        let cond = cfg.build_conditioning();
        Ok(Runtime {
            cfg,
            mixture,
            schedule,
            backend,
            decoder,
            cond,
        })
    }

    fn run_chains(
        &self,
        n: usize,
        expert: Option<&expert_guidance::experts::MultiExpert>,
    ) -> Result<ChainBatch, Error> {
        let gcfg = self.cfg.build_guidance();
        let mut batch = ChainBatch::default();
        for chain in 0..n {
            let run = sample_guided(
                self.backend.as_ref(),
                &self.decoder,
                &self.cond,
                expert,
                &gcfg,
                self.mixture.dim(),
                chain as u64,
            )?;
            batch.observations.push(run.observation);
            batch.latents.push(run.final_latent);
            batch.traces.push(run.trace);
        }
        Ok(batch)
    }

    fn penalty_rule(&self, penalty_value: f64) -> Result<PenaltyRule, Error> {
        if let Some(thr) = self.cfg.evaluation.penalty_threshold {
            return Ok(PenaltyRule {
                nll_threshold: thr,
                penalty_value,
            });
        }
        PenaltyRule::from_true_samples(
            &self.mixture,
            self.cfg.evaluation.penalty_quantile,
            self.cfg.evaluation.penalty_samples,
            self.cfg.seed.wrapping_add(0x9e37),
            penalty_value,
        )
    }

    fn reference_obs(&self) -> Result<Vec<DVector<f64>>, Error> {
        let reference = self.mixture.sample(
            &Conditioning::Unrestricted,
            self.cfg.seed.wrapping_add(0x00e0),
            self.cfg.evaluation.n_reference,
        )?;
        Ok(reference.iter().map(|x| self.decoder.decode(x)).collect())
    }

    fn metric_rows(
        &self,
        batch: &ChainBatch,
    ) -> Result<Vec<(String, expert_guidance::eval::MetricReport)>, Error> {
        let reference = self.reference_obs()?;
        let fingerprint = self.cfg.fingerprint();
        let obs_dim = self.decoder.obs_dim(self.mixture.dim());
        let mut rows = Vec::new();
        for spec in &self.cfg.experts {
            let expert = spec.build(&self.mixture, obs_dim, None)?;
            let rule = self.penalty_rule(spec.penalty_value())?;
            let rep = evaluate_batch(
                &batch.observations,
                &batch.latents,
                &self.mixture,
                expert.as_ref(),
                &rule,
                &reference,
                self.cfg.evaluation.n_projections,
                self.cfg.seed,
                &fingerprint,
            )?;
            rows.push((spec.name().to_string(), rep));
        }
        Ok(rows)
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let out_dir = resolve_out_dir(&cli);
    let cfg = resolve_config(&cli)?;

    match cli.command {
        Command::Sample { n } => {
            let rt = Runtime::build(cfg)?;
            write_manifest(&out_dir, &rt.cfg)?;
            let batch = rt.run_chains(n, None)?;
            report::write_samples(&out_dir.join("samples.csv"), &batch.observations)?;
            plot::scatter_svg(&out_dir.join("scatter.svg"), &batch.observations, &rt.mixture)?;
            println!("wrote {} samples to {}", batch.observations.len(), out_dir.display());
        }
        Command::Guide { n } => {
            let rt = Runtime::build(cfg)?;
            write_manifest(&out_dir, &rt.cfg)?;
            let obs_dim = rt.decoder.obs_dim(rt.mixture.dim());
            let multi = rt.cfg.build_experts(&rt.mixture, obs_dim)?;
            let batch = rt.run_chains(n, multi.as_ref())?;
            report::write_samples(&out_dir.join("samples.csv"), &batch.observations)?;
            if multi.is_some() {
                report::write_traces(&out_dir.join("trace.csv"), &batch.traces)?;
                let rows = rt.metric_rows(&batch)?;
                report::write_metrics(&out_dir.join("metrics.csv"), &rows)?;
                for (name, rep) in &rows {
                    println!(
                        "{name}: metric {:.4}, quality nll {:.4}, sw {:.4}, penalties {}/{}",
                        rep.metric, rep.quality_nll, rep.sw_to_reference, rep.penalty_count, rep.n_samples
                    );
                }
            }
            plot::scatter_svg(&out_dir.join("scatter.svg"), &batch.observations, &rt.mixture)?;
            println!("wrote {} samples to {}", batch.observations.len(), out_dir.display());
        }
        Command::Trajectory { chains } => {
            let rt = Runtime::build(cfg)?;
            write_manifest(&out_dir, &rt.cfg)?;
            let n_chains = chains.unwrap_or(rt.cfg.trajectory.n_chains);
            let gcfg = rt.cfg.build_guidance();
            let embed = benchmark::trajectory_embedding(rt.decoder.obs_dim(rt.mixture.dim()));
            let rep = trajectory_analysis(
                &rt.mixture,
                &rt.schedule,
                &rt.cond,
                n_chains,
                &gcfg,
                rt.cfg.backend.n_substeps,
                &rt.decoder,
                &embed,
                rt.cfg.evaluation.n_projections,
            )?;
            report::write_trajectory(&out_dir.join("trajectory.csv"), &rep)?;
            plot::trajectory_svg(&out_dir.join("trajectory.svg"), &rep)?;
            println!(
                "wrote trajectory table ({} rows, baseline sw {:.4}) to {}",
                rep.rows.len(),
                rep.baseline_sw,
                out_dir.display()
            );
        }
        Command::Sweep { axis, values } => {
            let axis = match axis {
                AxisArg::TThre => SweepAxis::TThre,
                AxisArg::W => SweepAxis::W,
                AxisArg::Tau => SweepAxis::Tau,
            };
            let rt = Runtime::build(cfg)?;
            write_manifest(&out_dir, &rt.cfg)?;
            if rt.cfg.experts.is_empty() {
                return Err(Error::config("sweep requires at least one expert"));
            }
            let obs_dim = rt.decoder.obs_dim(rt.mixture.dim());
            let multi = rt.cfg.build_experts(&rt.mixture, obs_dim)?;
            let base = rt.cfg.build_guidance();
            let mut rows = Vec::new();
            for &value in &values {
                let gcfg = apply_axis(&base, axis, value);
                let mut batch = ChainBatch::default();
                for chain in 0..rt.cfg.evaluation.n_samples {
                    let run = sample_guided(
                        rt.backend.as_ref(),
                        &rt.decoder,
                        &rt.cond,
                        multi.as_ref(),
                        &gcfg,
                        rt.mixture.dim(),
                        chain as u64,
                    )?;
                    batch.observations.push(run.observation);
                    batch.latents.push(run.final_latent);
                }
                for (name, rep) in rt.metric_rows(&batch)? {
                    println!(
                        "{axis}={value}: {name} metric {:.4}, quality nll {:.4}, penalties {}",
                        rep.metric, rep.quality_nll, rep.penalty_count
                    );
                    rows.push(SweepRow { axis, value, report: rep });
                }
            }
            report::write_sweep(&out_dir.join("sweep.csv"), &rows)?;
            println!("wrote sweep table to {}", out_dir.display());
        }
        Command::Selfcheck => {
            let schedule = cfg.build_schedule()?;
            let rows = selfcheck::run(&schedule)?;
            print!("{}", selfcheck::format_table(&rows));
            if rows.iter().any(|r| !r.pass) {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
