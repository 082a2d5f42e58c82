mod config;

use clap::{Args, Parser, Subcommand};
use config::{Format, RunConfig, SCHEMA_VERSION};
use serde::Serialize;
use serde_json::{json, Value};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};
use surveyel::data::{load_dataset, save_dataset, validate};
use surveyel::estimators::{estimate, EstimateResult, SummarySpec};
use surveyel::sim::{draw_population, observe, run_monte_carlo, BootstrapPlan};
use surveyel::variance::{bootstrap, BootstrapResult};
use surveyel::{Error, ErrorCategory, Estimand, ExternalSummary, Result, Setting, SurveyDataset};

#[derive(Parser)]
#[command(name = "surveyel", version, about = "Multiply robust and efficient estimation for survey data with nonresponse")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimate for one dataset and estimator.
    Estimate(Common),
    /// Point estimate with bootstrap standard errors and intervals.
    Bootstrap(Common),
    /// Monte Carlo study over the `[scenario]` table.
    Simulate(Common),
    /// Dataset invariant checks.
    Validate(Common),
    /// Draws a synthetic dataset from the `[generate]` table.
    Generate(Common),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Bootstrap resamples.
    #[arg(long = "boot")]
    boot: Option<usize>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Bootstrap(_) => "bootstrap",
            Command::Simulate(_) => "simulate",
            Command::Validate(_) => "validate",
            Command::Generate(_) => "generate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Estimate(c)
            | Command::Bootstrap(c)
            | Command::Simulate(c)
            | Command::Validate(c)
            | Command::Generate(c) => c,
        }
    }
}

fn exit_code(c: ErrorCategory) -> u8 {
    match c {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

/// What a command produced: a JSON body and, when it has one, a table.
struct Output {
    body: Value,
    table: Option<String>,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", c.config.display())))?;
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = c.format {
        cfg.output.format = f;
    }
    if let Some(p) = &c.out {
        cfg.output.path = Some(p.display().to_string());
    }
    if let Some(b) = c.boot {
        cfg.bootstrap.get_or_insert_with(Default::default).b = b;
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<SurveyDataset> {
    let d = cfg.data()?;
    load_dataset(&d.path, &d.load_options()?)
}

fn external(cfg: &RunConfig, data: &SurveyDataset) -> Result<Option<(ExternalSummary, SummarySpec)>> {
    let Some(x) = &cfg.external else {
        return Ok(None);
    };
    let summary = x.summary.clone().unwrap_or_else(|| SummarySpec::Mean {
        vars: data.x_names().to_vec(),
    });
    Ok(Some((x.build()?, summary)))
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::InvalidData(format!("serializing output: {e}")))
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn estimate_table(r: &EstimateResult, boot: Option<&BootstrapResult>) -> String {
    let mut t = String::from("estimator,component,theta_hat,se,ci_lower,ci_upper,converged\n");
    for (j, th) in r.theta_hat.iter().enumerate() {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        t.push_str(&format!(
            "{},{j},{th},{},{},{},{}\n",
            csv_escape(&r.estimator_id),
            cell(boot.map(|b| b.se[j])),
            cell(boot.map(|b| b.ci_lower[j])),
            cell(boot.map(|b| b.ci_upper[j])),
            r.converged
        ));
    }
    t
}

/// Settings 2 and 3 need no unsampled rows, so a Setting 1 file can feed them.
fn for_estimator(data: SurveyDataset, target: Option<Setting>) -> Result<SurveyDataset> {
    match target {
        Some(s) if s != data.setting() => data.project(s),
        _ => Ok(data),
    }
}

fn run_estimate(cfg: &RunConfig, with_boot: bool) -> Result<Output> {
    let ec = cfg.estimator()?;
    let spec = &ec.id;
    let catalog = cfg.catalog();
    catalog.check(spec)?;
    let data = for_estimator(load_data(cfg)?, spec.setting)?;
    let e = Estimand::by_name(&ec.estimand, data.x_names().len())?;
    let ext = external(cfg, &data)?;
    if data.setting() == Setting::Setting3 && ext.is_none() {
        return Err(Error::Config("Setting 3 needs an [external] table".into()));
    }
    let ext_ref = ext.as_ref().map(|(x, s)| (x, s));
    let opts = cfg.el_options();
    let point = estimate(&data, spec, &catalog, &e, ext_ref, &opts)?;
    let boot = if with_boot {
        let bc = cfg.bootstrap.clone().unwrap_or_default();
        Some(bootstrap(&data, spec, &catalog, &e, ext_ref, &opts, bc.b, cfg.seed, bc.interval)?)
    } else {
        None
    };
    let mut body = json!({
        "estimator_id": point.estimator_id,
        "theta_hat": point.theta_hat,
        "converged": point.converged,
        "diagnostics": to_value(&point.diagnostics)?,
    });
    if let Some(b) = &boot {
        body["se"] = to_value(&b.se)?;
        body["ci_lower"] = to_value(&b.ci_lower)?;
        body["ci_upper"] = to_value(&b.ci_upper)?;
        body["bootstrap"] = json!({
            "b_used": b.b_used,
            "b_requested": b.b_requested,
            "interval": b.interval,
        });
    }
    Ok(Output {
        table: Some(estimate_table(&point, boot.as_ref())),
        body,
    })
}

fn run_simulate(cfg: &RunConfig, workers: Option<usize>) -> Result<Output> {
    let mut sc = cfg
        .scenario
        .clone()
        .ok_or_else(|| Error::Config("config has no [scenario] table".into()))?;
    sc.seed = cfg.seed;
    if let Some(bc) = &cfg.bootstrap {
        let plan = sc.bootstrap.get_or_insert(BootstrapPlan {
            b: bc.b,
            interval: bc.interval,
            estimators: None,
        });
        plan.b = bc.b;
        plan.interval = bc.interval;
    }
    let report = run_monte_carlo(&sc, workers)?;
    let mut table = Vec::new();
    report.write_csv(&mut table)?;
    Ok(Output {
        body: to_value(&report)?,
        table: Some(String::from_utf8(table).expect("csv is utf-8")),
    })
}

fn run_validate(cfg: &RunConfig) -> Result<Output> {
    let d = cfg.data()?;
    let raw = surveyel::data::load_raw(&d.path, &d.load_options()?)?;
    let report = validate(&raw);
    Ok(Output {
        table: None,
        body: json!({ "usable": report.is_usable(), "report": to_value(&report)? }),
    })
}

fn run_generate(cfg: &RunConfig) -> Result<Output> {
    let g = cfg
        .generate
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [generate] table".into()))?;
    let mut params = g.generator.clone();
    params.seed = cfg.seed;
    let data = observe(&draw_population(&params)?)?.project(g.setting)?;
    save_dataset(&data, &g.path, b',')?;
    Ok(Output {
        table: None,
        body: json!({
            "path": g.path,
            "setting": g.setting,
            "population_size": data.population_size(),
            "n_sampled": data.n_sampled(),
            "n_respondents": data.n_respondents(),
        }),
    })
}

fn run(cmd: &Command, cfg: &RunConfig) -> Result<Output> {
    let workers = cmd.common().workers;
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        // a second call in one process is harmless: the pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    match cmd {
        Command::Estimate(_) => run_estimate(cfg, false),
        Command::Bootstrap(_) => run_estimate(cfg, true),
        Command::Simulate(_) => run_simulate(cfg, workers),
        Command::Validate(_) => run_validate(cfg),
        Command::Generate(_) => run_generate(cfg),
    }
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn error_record(command: &str, err: &Error) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "status": "error",
        "category": err.category(),
        "exit_code": exit_code(err.category()),
        "message": err.to_string(),
        "timestamp": timestamp(),
    })
}

fn emit(path: Option<&str>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::InvalidData(format!("cannot write {p}: {e}"))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = load_config(cli.command.common()).and_then(|cfg| {
        let out = run(&cli.command, &cfg)?;
        let text = match (cfg.output.format, out.table) {
            (Format::Csv, Some(t)) => t,
            _ => {
                let record = json!({
                    "schema_version": SCHEMA_VERSION,
                    "tool_version": env!("CARGO_PKG_VERSION"),
                    "command": name,
                    "status": "ok",
                    "timestamp": timestamp(),
                    "config": to_value(&cfg)?,
                    "result": out.body,
                });
                serde_json::to_string_pretty(&record).expect("json value") + "\n"
            }
        };
        emit(cfg.output.path.as_deref(), &text)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_record(name, &err));
            ExitCode::from(exit_code(err.category()))
        }
    }
}
