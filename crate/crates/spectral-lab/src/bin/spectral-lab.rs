use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spectral_lab::config::RunConfig;
use spectral_lab::model::Model;
use spectral_lab::output::{emit_outputs, read_json, OutputKind};
use spectral_lab::pipeline::{
    energy_dir, load_spec, run_pipeline, run_scan, write_manifest, EnergyRun, RunManifest,
};
use spectral_lab::Result;

#[derive(Parser)]
#[command(
    name = "spectral-lab",
    version,
    about = "Non-resonant Bloch eigenvalues, isoenergetic curves and eigenfunctions at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of approximation steps (1-3).
    #[arg(long)]
    steps: Option<usize>,
    /// Enforce the asymptotic parameter ranges.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 picks the default.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the config and potential without computing.
    Validate(Common),
    /// Run every stage for each configured k.
    Run(Common),
    /// Trend table over the scan energies.
    Scan(Common),
    /// Re-emit one output kind from a finished run.
    Emit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: OutputKind,
    },
}

fn load(c: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::from_path(&c.config)?;
    if let Some(s) = c.steps {
        cfg.steps = s;
    }
    if c.strict {
        cfg.params.strict = true;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if cfg.threads > 0 {
        // a second initialization only fails when a pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.output_dir());
    Ok((cfg, out))
}

fn validate(c: &Common) -> Result<i32> {
    let (cfg, _) = load(c)?;
    let spec = load_spec(&cfg)?;
    for &k in &cfg.k {
        let model = Model::new(spec.clone(), cfg.params.clone(), k, cfg.steps)?;
        println!(
            "k = {k}: scale cuts {:?}, contour radius {:.3e}",
            model.cuts,
            model.contour_radius(1)
        );
    }
    println!("config valid");
    Ok(0)
}

fn report(m: &RunManifest) {
    for e in &m.energies {
        for s in &e.stages {
            println!(
                "k = {} {:<15} {:?} {:.1}s{}",
                e.k,
                s.name,
                s.state,
                s.seconds,
                s.message
                    .as_ref()
                    .map(|x| format!(": {x}"))
                    .unwrap_or_default()
            );
        }
        for (name, a) in &e.audits {
            println!(
                "k = {} audit {:<22} {} passed, {} failed",
                e.k, name, a.passed, a.failed
            );
        }
        for (name, n) in &e.tallies {
            println!("k = {} tally {:<22} {n}", e.k, name);
        }
    }
    if let Some(t) = &m.trend {
        println!(
            "{:>8} {:>8} {:>16} {:>14} {:>14}",
            "k", "scale", "removed", "max|h1|", "l1(u1)"
        );
        for r in &t.rows {
            println!(
                "{:>8} {:>8} {:>16.10} {:>14.6e} {:>14.6e}",
                r.k, r.radius_scale, r.removed_fraction, r.max_h1, r.l1_u1
            );
        }
        println!(
            "monotone: removed {} h1 {} u1 {}",
            t.monotone[0], t.monotone[1], t.monotone[2]
        );
    }
}

fn emit(c: &Common, kind: OutputKind) -> Result<i32> {
    let (cfg, out) = load(c)?;
    let mut manifest: RunManifest = read_json(&out.join("manifest.json"))?;
    for &k in &cfg.k {
        let dir = out.join(energy_dir(k));
        let run: EnergyRun = read_json(&dir.join("results.json"))?;
        for f in emit_outputs(&run.tables, &run.completed(), kind, &dir)? {
            println!("{}", f.display());
        }
    }
    write_manifest(&mut manifest, &out)?;
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Validate(c) => validate(&c),
        Command::Run(c) => {
            let (cfg, out) = load(&c)?;
            let m = run_pipeline(&cfg, &out)?;
            report(&m);
            Ok(m.exit_code)
        }
        Command::Scan(c) => {
            let (cfg, out) = load(&c)?;
            let m = run_scan(&cfg, &out)?;
            report(&m);
            Ok(m.exit_code)
        }
        Command::Emit { common, kind } => emit(&common, kind),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
