//! `mintime`: batch front-end for characteristics, conjugate sweeps, fields, grid oracles and verification.
//!
//! Exit status: 0 on success, 1 on input or numerical errors, 2 when `verify` finds a failing invariant.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mintime_core::conjugate::{caustic_sweep, write_caustic_csv};
use mintime_core::{
    verify_with_grid, Characteristics, HjbGrid, Level, MinTimeField, ScenarioConfig,
};

const GRID_HEADER: &str = "grid_header.toml";
const GRID_CSV: &str = "grid.csv";

#[derive(Parser, Debug)]
#[command(name = "mintime", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario config (TOML); `scenario = "<preset>"` layers it on a built-in scenario.
    config: PathBuf,
    /// Directory for artifacts; created if missing.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Worker thread cap (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Record the generation time in the structured-text artifacts.
    #[arg(long)]
    timestamps: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One characteristic at `run.chart`, `run.eta` -> flow.csv
    Flow(Common),
    /// Determinant sweep over `run.sweep_samples` boundary points -> caustic.csv
    Conjugate(Common),
    /// Build the minimum time field -> field_nodes.csv, field_manifest.toml
    Field(Common),
    /// Solve the HJB grid -> grid.csv, grid_header.toml
    Oracle(Common),
    /// Hypotheses, propagation theorems and C2 certificate -> verify_report.toml and margin tables
    Verify {
        #[command(flatten)]
        common: Common,
        /// Directory holding grid.csv and grid_header.toml from `oracle`; solved afresh if absent.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Level set at `run.level` -> levelset.csv
    Levelset(Common),
}

struct Outputs {
    dir: PathBuf,
    stamp: Option<u64>,
}

impl Outputs {
    fn new(common: &Common) -> Result<Self> {
        fs::create_dir_all(&common.out_dir)
            .with_context(|| format!("creating output directory {}", common.out_dir.display()))?;
        let stamp = common
            .timestamps
            .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
        Ok(Self { dir: common.out_dir.clone(), stamp })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        match self.stamp {
            Some(t) => self.write(name, format!("generated_unix = {t}\n{text}").as_bytes()),
            None => self.write(name, text.as_bytes()),
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    ScenarioConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))
}

fn setup(common: &Common) -> Result<(ScenarioConfig, Outputs)> {
    if let Some(n) = common.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let cfg = load(&common.config)?;
    Ok((cfg, Outputs::new(common)?))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> mintime_core::Result<()>) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    f(&mut b)?;
    Ok(b)
}

fn flow(common: &Common) -> Result<()> {
    let (cfg, out) = setup(common)?;
    let (model, geom) = (cfg.model()?, cfg.geometry()?);
    let flow = Characteristics::new(&model, &geom, cfg.flow.clone())?;
    let rec = flow.integrate(cfg.run.chart, &cfg.run.eta, Level::Riccati)?;
    out.write("flow.csv", &csv_bytes(|b| rec.write_csv(b))?)?;
    println!("nodes = {}, t_end = {}, max |H - 1| = {:.3e}", rec.len(), rec.t_end(), rec.max_h_drift());
    Ok(())
}

fn conjugate(common: &Common) -> Result<()> {
    let (cfg, out) = setup(common)?;
    let (model, geom) = (cfg.model()?, cfg.geometry()?);
    let flow = Characteristics::new(&model, &geom, cfg.flow.clone())?;
    let samples = geom.boundary_samples(cfg.run.sweep_samples);
    let rows = caustic_sweep(&flow, &samples, &cfg.conjugate)?;
    out.write("caustic.csv", &csv_bytes(|b| write_caustic_csv(&rows, cfg.system.n, b))?)?;
    let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.t_bar), b.max(r.t_bar)));
    if rows.is_empty() {
        println!("no conjugate time within t_max = {} over {} samples", cfg.flow.t_max, samples.len());
    } else {
        println!("{} of {} samples focus; t_bar in [{lo:.6}, {hi:.6}]", rows.len(), samples.len());
    }
    Ok(())
}

fn field(common: &Common) -> Result<()> {
    let (cfg, out) = setup(common)?;
    let (model, geom) = (cfg.model()?, cfg.geometry()?);
    let field = MinTimeField::build(&model, &geom, &cfg.flow, &cfg.conjugate, cfg.field.clone())?;
    out.write("field_nodes.csv", &csv_bytes(|b| field.write_nodes_csv(b))?)?;
    out.write_text("field_manifest.toml", &field.manifest(&cfg.name))?;
    Ok(())
}

fn oracle(common: &Common) -> Result<()> {
    let (cfg, out) = setup(common)?;
    let (model, geom) = (cfg.model()?, cfg.geometry()?);
    let grid = HjbGrid::solve(&model, &geom, &cfg.grid)?;
    out.write(GRID_CSV, &csv_bytes(|b| grid.write_csv(b))?)?;
    out.write_text(GRID_HEADER, &grid.header())?;
    println!("sweeps = {}, residual = {:.3e}, finite cells = {}", grid.stats.sweeps, grid.stats.residual, grid.stats.finite_cells);
    Ok(())
}

fn read_grid(dir: &Path) -> Result<HjbGrid> {
    let hp = dir.join(GRID_HEADER);
    let header = fs::read_to_string(&hp).with_context(|| format!("reading {}", hp.display()))?;
    let cp = dir.join(GRID_CSV);
    let file = fs::File::open(&cp).with_context(|| format!("opening {}", cp.display()))?;
    HjbGrid::read(&header, BufReader::new(file)).with_context(|| format!("loading grid from {}", dir.display()))
}

/// `Ok(true)` when every invariant holds.
fn verify(common: &Common, grid: Option<&Path>) -> Result<bool> {
    let (cfg, out) = setup(common)?;
    let grid = grid.map(read_grid).transpose()?;
    let run = verify_with_grid(&cfg, grid)?;
    for (name, bytes) in run.files()? {
        if name.ends_with(".toml") {
            out.write_text(&name, std::str::from_utf8(&bytes)?)?;
        } else {
            out.write(&name, &bytes)?;
        }
    }
    for (name, why) in &run.failures {
        eprintln!("verification failed: {name}: {why}");
    }
    println!("verify {}: {}", cfg.name, if run.pass() { "pass" } else { "FAIL" });
    Ok(run.pass())
}

fn levelset(common: &Common) -> Result<()> {
    let (cfg, out) = setup(common)?;
    let (model, geom) = (cfg.model()?, cfg.geometry()?);
    let field = MinTimeField::build(&model, &geom, &cfg.flow, &cfg.conjugate, cfg.field.clone())?;
    let set = field.level_set(cfg.run.level, cfg.run.level_count)?;
    out.write("levelset.csv", &csv_bytes(|b| set.write_csv(cfg.system.n, b))?)?;
    println!("t = {}: {} points, {} samples beyond their horizon", set.t, set.points.len(), set.skipped.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Flow(c) => flow(c).map(|_| true),
        Command::Conjugate(c) => conjugate(c).map(|_| true),
        Command::Field(c) => field(c).map(|_| true),
        Command::Oracle(c) => oracle(c).map(|_| true),
        Command::Verify { common, grid } => verify(common, grid.as_deref()),
        Command::Levelset(c) => levelset(c).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
