//! `glrt`: error exponents of generalized likelihood ratio tests from JSON
//! configurations.

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glrt_core::chernoff::{contour_grid, generalized_index, multi_family_rate, pairwise_index};
use glrt_core::glm::glm_rate;
use glrt_core::nonsep::{euler_check, solve_tilt};
use glrt_core::output::round_sig;
use glrt_core::output::REPORT_DIGITS;
use glrt_core::simulate::{decay_curve, DecayCurve, FamilyScenario, GlmScenario, JointScenario, Scenario};
use glrt_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use config::{ContourFile, GlmFile, IndexFile, JointSpec, NonsepFile, ScenarioSpec, SimulateFile};

#[derive(Debug, Parser)]
#[command(name = "glrt", version, about = "Error exponents for generalized likelihood ratio tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for simulations, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Full-precision numbers instead of 6 significant digits.
    #[arg(long, global = true)]
    raw: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generalized Chernoff index over parameter boxes.
    Index,
    /// Pairwise index on a (θ, γ) grid, as CSV.
    Contour,
    /// Saddle and exponent of a test under a fixed truth.
    Nonsep,
    /// GLM exponent on a fixed design, or the random-design Gaussian model.
    Glm,
    /// Error-probability decay curve by Monte Carlo.
    Simulate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Index => "index",
            Command::Contour => "contour",
            Command::Nonsep => "nonsep",
            Command::Glm => "glm",
            Command::Simulate => "simulate",
        }
    }
}

/// Exit status for a failure: 2 configuration, 3 numeric, 4 nonconvergence.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Pair { source, .. } => exit_code(source),
        Error::Config(_) | Error::Parameter { .. } | Error::Dimension(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
        Error::Optimization { .. } => 4,
        Error::Domain { .. } | Error::Divergence { .. } | Error::Numeric(_) | Error::Range { .. } | Error::Fit(_) => 3,
    }
}

/// Everything a command needs besides its configuration.
struct Context {
    command: Command,
    config_path: PathBuf,
    config_hash: String,
    out: Option<PathBuf>,
    seed: Option<u64>,
    raw: bool,
}

impl Context {
    fn base_dir(&self) -> &Path {
        self.config_path.parent().unwrap_or(Path::new("."))
    }

    fn provenance(&self, seed: Option<u64>) -> Value {
        let mut p = json!({
            "tool": "glrt",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command.name(),
            "config_sha256": self.config_hash,
        });
        if let Some(s) = seed {
            p["seed"] = json!(s);
        }
        p
    }

    fn csv_header(&self, seed: Option<u64>) -> String {
        let mut line = format!(
            "# glrt {} command={} config_sha256={}",
            env!("CARGO_PKG_VERSION"),
            self.command.name(),
            self.config_hash
        );
        if let Some(s) = seed {
            line.push_str(&format!(" seed={s}"));
        }
        line.push('\n');
        line
    }

    fn writer(&self, path: Option<&Path>) -> Result<Box<dyn Write>> {
        Ok(match path {
            Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
            None => Box::new(io::stdout().lock()),
        })
    }

    /// Writes `result` as JSON with a `provenance` member.
    fn emit_json<T: Serialize>(&self, result: &T, seed: Option<u64>, path: Option<&Path>) -> Result<()> {
        let mut v = serde_json::to_value(result)?;
        if !self.raw {
            round_floats(&mut v);
        }
        let v = match v {
            Value::Object(mut m) => {
                m.insert("provenance".into(), self.provenance(seed));
                Value::Object(m)
            }
            other => json!({ "result": other, "provenance": self.provenance(seed) }),
        };
        let mut w = self.writer(path)?;
        serde_json::to_writer_pretty(&mut w, &v)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_sig(x, REPORT_DIGITS)) {
                    *n = r;
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(m) => m.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}

fn run_index(ctx: &Context, cfg: IndexFile) -> Result<()> {
    if let Some(specs) = &cfg.families {
        if cfg.g.is_some() || cfg.h.is_some() {
            return Err(Error::Config("give either `families` or `g`/`h`, not both".into()));
        }
        let models = specs.iter().map(|s| s.model()).collect::<Result<Vec<_>>>()?;
        let r = multi_family_rate(&models, &cfg.index)?;
        return ctx.emit_json(&r, None, ctx.out.as_deref());
    }
    let (Some(g), Some(h)) = (&cfg.g, &cfg.h) else {
        return Err(Error::Config("index needs `g` and `h`, or `families`".into()));
    };
    let (g, h) = (g.model()?, h.model()?);
    let r = if g.space.is_point() && h.space.is_point() {
        pairwise_index(&g, &g.space.lower, &h, &h.space.lower)?
    } else {
        generalized_index(&g, &h, &g.space, &h.space, &cfg.index)?
    };
    if r.diagnostics.boundary_flag {
        log::warn!("optimum within 5% of an artificial box bound; widen the box");
    }
    ctx.emit_json(&r, None, ctx.out.as_deref())
}

fn run_contour(ctx: &Context, cfg: ContourFile) -> Result<()> {
    let (g, h) = (cfg.g.model()?, cfg.h.model()?);
    let grid = contour_grid(&g, &h, &cfg.theta_axis.values()?, &cfg.gamma_axis.values()?)?;
    let mut w = ctx.writer(ctx.out.as_deref())?;
    w.write_all(ctx.csv_header(None).as_bytes())?;
    grid.write_csv(&mut w, ctx.raw)?;
    w.flush()?;
    Ok(())
}

fn run_joint(ctx: &Context, spec: &JointSpec) -> Result<()> {
    let model = spec.model()?;
    let rate = model.rate(&spec.search)?;
    let euler = model.euler_check(&rate, &spec.search)?;
    if !euler.passed {
        log::warn!("first-order conditions not met at the reported saddle");
    }
    ctx.emit_json(&json!({ "rate": rate, "euler": euler }), None, ctx.out.as_deref())
}

fn run_nonsep(ctx: &Context, cfg: NonsepFile) -> Result<()> {
    match cfg {
        NonsepFile::GaussianJoint(spec) => run_joint(ctx, &spec),
        NonsepFile::Families(spec) => {
            let (g, h) = (spec.g.model()?, spec.h.model()?);
            let tilt = solve_tilt(&g, &h, &g.space, &h.space, &spec.theta0, spec.b, &spec.tilt)?;
            let euler = euler_check(&tilt, &g.space, &h.space)?;
            if !euler.passed {
                log::warn!("first-order conditions not met at the reported saddle");
            }
            if tilt.multiple_optima {
                log::warn!("several saddles reach the same value; reporting the first in lexicographic order");
            }
            ctx.emit_json(&json!({ "tilt": tilt, "euler": euler }), None, ctx.out.as_deref())
        }
    }
}

fn run_glm(ctx: &Context, cfg: GlmFile) -> Result<()> {
    match cfg {
        GlmFile::GaussianJoint(spec) => run_joint(ctx, &spec),
        GlmFile::FixedDesign(spec) => {
            let design = spec.load(ctx.base_dir())?;
            let r = glm_rate(&design, &spec.rate)?;
            ctx.emit_json(&r, None, ctx.out.as_deref())
        }
    }
}

/// Path of the fit summary next to the CSV: `curve.csv` → `curve.fit.json`.
fn fit_path(csv: &Path) -> PathBuf {
    csv.with_extension("fit.json")
}

fn write_curve(ctx: &Context, curve: &DecayCurve, seed: u64) -> Result<()> {
    let mut w = ctx.writer(ctx.out.as_deref())?;
    w.write_all(ctx.csv_header(Some(seed)).as_bytes())?;
    curve.write_csv(&mut w, ctx.raw)?;
    w.flush()?;
    drop(w);
    let summary = json!({
        "side": curve.side,
        "fit": curve.fit,
        "warnings": curve.warnings,
    });
    match &ctx.out {
        Some(p) => ctx.emit_json(&summary, Some(seed), Some(&fit_path(p)))?,
        None => {
            let mut v = summary;
            if !ctx.raw {
                round_floats(&mut v);
            }
            eprintln!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    for w in &curve.warnings {
        log::warn!("{w}");
    }
    match curve.fit {
        Some(_) => Ok(()),
        None if curve.sample_sizes.len() == 1 => Ok(()),
        None => Err(Error::Fit(curve.estimates.iter().filter(|e| e.p_hat > 0.0).count())),
    }
}

fn run_simulate(ctx: &Context, cfg: SimulateFile) -> Result<()> {
    let seed = ctx.seed.or(cfg.seed).unwrap_or(0);
    let scenario: Box<dyn Scenario> = match &cfg.scenario {
        ScenarioSpec::Families(spec) => {
            let (g, h) = (spec.g.model()?, spec.h.model()?);
            let saddle = match &spec.saddle {
                Some(s) => {
                    g.check_params(&s.theta)?;
                    h.check_params(&s.gamma)?;
                    pairwise_index(&g, &s.theta, &h, &s.gamma)?
                }
                None => generalized_index(&g, &h, &g.space, &h.space, &spec.index)?,
            };
            log::info!(
                "saddle θ* = {:?}, γ* = {:?}, ρ = {}",
                saddle.theta_star,
                saddle.gamma_star,
                saddle.rho
            );
            Box::new(FamilyScenario::at_saddle(&g, &h, &saddle, spec.side)?)
        }
        ScenarioSpec::GaussianJoint(spec) => {
            let model = spec.model()?;
            let rate = model.rate(&spec.search)?;
            Box::new(JointScenario::new(model, rate)?)
        }
        ScenarioSpec::Glm(spec) => {
            let design = spec.load(ctx.base_dir())?;
            if cfg.n_list != [design.n()] {
                return Err(Error::Config(format!(
                    "a fixed-design scenario runs at its own size: n_list must be [{}]",
                    design.n()
                )));
            }
            let r = glm_rate(&design, &spec.rate)?;
            Box::new(GlmScenario::new(design, &r.beta_dag, &r.gamma_dag, r.lambda_dag, 0.0)?)
        }
    };
    let curve = decay_curve(scenario.as_ref(), &cfg.n_list, &cfg.decay, seed)?;
    write_curve(ctx, &curve, seed)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let Some(path) = &cli.config else {
        return Err(Error::Config("--config <path> is required".into()));
    };
    let text = fs::read_to_string(path)?;
    let ctx = Context {
        command: cli.command,
        config_path: path.clone(),
        config_hash: hex::encode(Sha256::digest(text.as_bytes())),
        out: cli.out.clone(),
        seed: cli.seed,
        raw: cli.raw,
    };
    match cli.command {
        Command::Index => run_index(&ctx, parse(&text)?),
        Command::Contour => run_contour(&ctx, parse(&text)?),
        Command::Nonsep => run_nonsep(&ctx, parse(&text)?),
        Command::Glm => run_glm(&ctx, parse(&text)?),
        Command::Simulate => run_simulate(&ctx, parse(&text)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
