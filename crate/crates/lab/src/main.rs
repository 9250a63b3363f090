use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynreg_core::autodiff::{grad_check, Graph};
use dynreg_core::controller::{Controller, ControllerConfig, ScheduleSpec};
use dynreg_core::nets::{Net, NetSpec, Topology, Widening};
use dynreg_core::Tensor;
use dynreg_lab::harness::{self, read_trace};
use dynreg_lab::{LabError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "dynreg", about = "Dynamic feature-perturbation training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration and write metrics.csv and summary.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare strength schedules over several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated, e.g. fix:2,linear:3,dynamic,none
        #[arg(long, value_delimiter = ',')]
        schedules: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the strength controller over a recorded loss trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "dynamic")]
        schedule: String,
        #[arg(long, default_value_t = 0.0)]
        s0: f64,
        #[arg(long, default_value_t = 0.0003)]
        delta_s: f64,
        #[arg(long, default_value_t = 501)]
        filter_length: usize,
        #[arg(long, default_value_t = 0.4)]
        sigma: f64,
    },
    /// Finite-difference check of every block topology.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write a config's train split as CSV.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn schedule(text: &str) -> Result<ScheduleSpec> {
    text.parse().map_err(|e| LabError::Config(format!("{e}")))
}

fn train(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::from_file(&config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    let run = harness::run_experiment(&cfg)?;
    print!("{}", run.summary);
    println!("metrics written to {}", cfg.out_dir.join("metrics.csv").display());
    Ok(())
}

fn sweep(config: PathBuf, schedules: Vec<String>, seeds: usize, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::from_file(&config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    let specs = schedules.iter().map(|s| schedule(s)).collect::<Result<Vec<_>>>()?;
    let table = harness::sweep_schedules(&cfg, &specs, seeds)?;
    print!("{table}");
    Ok(())
}

fn replay(trace: PathBuf, spec: &str, config: ControllerConfig) -> Result<()> {
    let text = std::fs::read_to_string(&trace).map_err(|e| LabError::io(&trace, e))?;
    let losses = read_trace(&text)?;
    let spec = schedule(spec)?;
    let mut ctrl = Controller::new(config)?;
    let total = losses.len() as u64;
    println!("iter,raw_loss,filtered_loss,grad_diff,s");
    for (i, &loss) in losses.iter().enumerate() {
        let out = ctrl.step(loss)?;
        let s = spec.value(out.s, i as u64 + 1, total)?;
        let diff = out.diff.map(|d| d.to_string()).unwrap_or_default();
        println!("{},{},{},{},{}", i + 1, loss, out.filtered, diff, s);
    }
    Ok(())
}

fn gradcheck(seed: u64, tol: f64) -> Result<bool> {
    let specs = [
        ("res2", NetSpec { topology: Topology::Res2, widening: Widening::Pyramid(2), ..NetSpec::default() }),
        ("res3", NetSpec { topology: Topology::Res3, ..NetSpec::default() }),
        ("dense", NetSpec { topology: Topology::Dense, widening: Widening::Growth(2), ..NetSpec::default() }),
    ];
    let mut ok = true;
    for (name, spec) in specs {
        let spec = NetSpec { depth: 2, width: 3, stages: 2, input_shape: [1, 4, 4], seed, ..spec };
        let mut net = Net::new(spec)?;
        let x = Tensor::from_fn(&[3, 1, 4, 4], |i| ((i as f64 + seed as f64) * 0.731).sin());
        let mut g = Graph::new();
        // at s = 0 every block's forward and backward scale equal A
        let out = net.forward(&mut g, &x, Some(&[0, 1, 1]), 0.0)?;
        let report = grad_check(&mut g, out.loss.expect("labels given"), 1e-5)?;
        let pass = report.passes(tol);
        ok &= pass;
        println!(
            "{name:<6} {} max rel err {:.3e} over {} entries",
            if pass { "PASS" } else { "FAIL" },
            report.max_rel,
            report.count
        );
    }
    Ok(ok)
}

fn export(config: PathBuf, out: PathBuf) -> Result<()> {
    let cfg = RunConfig::from_file(&config)?;
    let (train, _) = harness::load_data(&cfg)?;
    let file = std::fs::File::create(&out).map_err(|e| LabError::io(&out, e))?;
    train.write_csv(std::io::BufWriter::new(file)).map_err(|e| LabError::io(&out, e))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => train(config, seed, out)?,
        Cmd::Sweep { config, schedules, seeds, out } => sweep(config, schedules, seeds, out)?,
        Cmd::Replay { trace, schedule, s0, delta_s, filter_length, sigma } => {
            replay(trace, &schedule, ControllerConfig { s0, delta_s, filter_length, sigma })?
        }
        Cmd::Gradcheck { seed, tol } => {
            if !gradcheck(seed, tol)? {
                return Ok(ExitCode::from(3));
            }
        }
        Cmd::ExportData { config, out } => export(config, out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
