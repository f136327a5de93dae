use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freelunch::error::Error;
use freelunch::harness::{self, ExperimentConfig, Method, Status};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(name = "freelunch", version, about = "Point estimates and standard errors from one resampled Newton-Raphson chain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method on one sample.
    Fit(Overrides),
    /// Monte Carlo size of the intervals on a synthetic design.
    Coverage(Overrides),
    /// Rerun the chain leaving out one group at a time.
    Sensitivity {
        #[command(flatten)]
        overrides: Overrides,
        /// Column holding the group labels.
        #[arg(long)]
        group: Option<String>,
    },
    /// Persistence, burn-in and coupling diagnostics for a draws file.
    Diagnose {
        /// Draws CSV written by `fit`.
        #[arg(long = "draws-file", value_name = "CSV")]
        draws_file: PathBuf,
        /// Learning rate; read from the sidecar when omitted.
        #[arg(long)]
        gamma: Option<f64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long, value_name = "TOML")]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated, e.g. `classical,rnr,mofn`.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    /// Resample size for chains and bootstraps.
    #[arg(long)]
    m: Option<usize>,
    /// Retained chain draws.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    burn: Option<usize>,
    /// Monte Carlo replications.
    #[arg(long)]
    replications: Option<usize>,
    /// Bootstrap replications.
    #[arg(long = "bootstrap-replications")]
    bootstrap_replications: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Simulations per parameter value (SMD).
    #[arg(long)]
    simulations: Option<usize>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        if let Some(ms) = &self.methods {
            cfg.methods = ms.iter().filter(|s| !s.trim().is_empty()).map(|s| Method::parse(s)).collect::<Result<_, _>>()?;
        }
        if let Some(g) = &self.gamma {
            cfg.chain.gammas = g.clone();
        }
        if let Some(m) = self.m {
            cfg.chain.m = Some(m);
            cfg.bootstrap.m = Some(m);
        }
        if let Some(d) = self.draws {
            cfg.chain.draws = d;
        }
        if self.burn.is_some() {
            cfg.chain.burn = self.burn;
        }
        if let Some(r) = self.replications {
            cfg.replications = r;
        }
        if let Some(b) = self.bootstrap_replications {
            cfg.bootstrap.replications = b;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(s) = self.simulations {
            cfg.smd.simulations = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn pool(&self) -> Result<(), Error> {
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(Error::Config("--threads must be positive".into()));
            }
            // A second initialization only happens in tests; ignore it.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
        Ok(())
    }
}

fn status_code(status: Status) -> u8 {
    match status {
        Status::Success => 0,
        Status::Partial => EXIT_PARTIAL,
        Status::Failed => EXIT_NUMERICAL,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Fit(o) => {
            let cfg = o.load()?;
            o.pool()?;
            let out = harness::cmd_fit(&cfg)?;
            for r in &out.runs.runs {
                match &r.error {
                    Some(e) => eprintln!("{}: failed: {e}", r.label),
                    None => {
                        let rep = r.report.as_ref().expect("successful runs carry a report");
                        let cells: Vec<String> = out
                            .names
                            .iter()
                            .enumerate()
                            .map(|(j, n)| format!("{n}={:.4} ({:.4})", rep.theta_bar[j], rep.se[j]))
                            .collect();
                        println!("{}: {}", r.label, cells.join(", "));
                    }
                }
            }
            println!("wrote {} files to {}", out.files.len(), cfg.output.display());
            Ok(status_code(out.status))
        }
        Command::Coverage(o) => {
            let cfg = o.load()?;
            o.pool()?;
            let (res, files) = harness::cmd_coverage(&cfg)?;
            for r in &res.rows {
                println!("{} {}: rejection rate {:.3} (mc se {:.3}, {} failures)", r.method, r.coordinate, r.rejection_rate, r.mc_se, r.failures);
            }
            println!("wrote {} files to {}", files.len(), cfg.output.display());
            let partial = res.rows.iter().any(|r| r.failures > 0);
            Ok(if partial { EXIT_PARTIAL } else { 0 })
        }
        Command::Sensitivity { overrides, group } => {
            let cfg = overrides.load()?;
            overrides.pool()?;
            let (res, files) = harness::cmd_sensitivity(&cfg, group.as_deref())?;
            for g in &res.groups {
                match &g.skipped {
                    Some(reason) => println!("group {}: skipped ({reason})", g.group),
                    None => {
                        let shifts: Vec<String> = g.delta_in_se.iter().map(|d| format!("{d:+.2}")).collect();
                        println!("group {}: shift in SE units [{}]", g.group, shifts.join(", "));
                    }
                }
            }
            println!("wrote {} files to {}", files.len(), cfg.output.display());
            let skipped = res.groups.iter().any(|g| g.skipped.is_some());
            Ok(if skipped { EXIT_PARTIAL } else { 0 })
        }
        Command::Diagnose { draws_file, gamma, output } => {
            let rep = harness::cmd_diagnose(&draws_file, gamma)?;
            let text = serde_json::to_string_pretty(&rep)? + "\n";
            match output {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_CONFIG })
        }
    }
}
