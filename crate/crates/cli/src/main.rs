//! `fairlatent` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 internal error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use fairlatent::ci_tests::{chi_square_test, g_test_conditional, DEFAULT_SIGNIFICANCE};
use fairlatent::dataset::{encode_with_roles, RawTable, Role};
use fairlatent::identify::identify_ic;
use fairlatent::latent_em;
use fairlatent::metrics::{self, DEFAULT_ROD_SMOOTHING};
use fairlatent::pipeline::{self, PipelineConfig, LATENT_COLUMN};
use fairlatent::synthgen::{self, CausalDagSpec, RolesTemplate};
use fairlatent::{Dataset, RoleSpec};

const REPORT_SCHEMA: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "fairlatent", version, about = "Latent-augmented fairness repair for categorical data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Write a JSON run report here.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    log_level: LogLevel,
    /// TOML file with pipeline settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Args, Debug)]
struct Input {
    /// CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    /// TOML roles file.
    #[arg(long)]
    roles: PathBuf,
    /// Equal-frequency bins for numeric columns with more distinct values.
    #[arg(long)]
    bin_numeric: Option<usize>,
}

/// Overrides of the configuration file.
#[derive(Args, Debug, Default)]
struct Tuning {
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    significance: Option<f64>,
    /// Latent-state count.
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Maximum EM iterations.
    #[arg(long)]
    n_iter: Option<usize>,
    /// EM stopping threshold on the average log-likelihood.
    #[arg(long)]
    eta: Option<f64>,
    /// Additive smoothing of expected counts.
    #[arg(long)]
    smoothing: Option<f64>,
    /// Independent EM starts; the best log-likelihood wins.
    #[arg(long)]
    restarts: Option<usize>,
    /// Fail instead of lowering tau when the split is too small.
    #[arg(long)]
    strict_tau: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Repair a dataset and write the resampled CSV.
    Preprocess {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        output: PathBuf,
        /// Also write the fitted parameters as JSON.
        #[arg(long)]
        params_out: Option<PathBuf>,
        /// Keep the sampled latent state as a `_latent` column.
        #[arg(long)]
        keep_latent: bool,
        /// Leave wall-clock timings out of the report.
        #[arg(long)]
        omit_timings: bool,
    },
    /// Print the inadmissible attributes with a direct edge to the label.
    Identify {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Split the label's inadmissible parents into two blocks.
    Partition {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        tuning: Tuning,
        /// Attributes to split (comma separated); identified when omitted.
        #[arg(long, value_delimiter = ',')]
        ic: Option<Vec<String>>,
    },
    /// Fit the latent model and write its parameters.
    Estimate {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        params_out: PathBuf,
        /// Blocks as `a,b;c,d`; identified and split when omitted.
        #[arg(long)]
        blocks: Option<String>,
    },
    /// Train the reference classifier and report AUC, ROD and, when a
    /// `_latent` column is present, latent/sensitive dependence.
    Evaluate {
        /// Training CSV.
        #[arg(long)]
        train: PathBuf,
        /// Test CSV; required unless --folds is given.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        roles: PathBuf,
        /// Cross-validate on the training CSV with this many folds.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_ROD_SMOOTHING)]
        rod_smoothing: f64,
        #[arg(long)]
        bin_numeric: Option<usize>,
    },
    /// Generate synthetic data from a random or fixed causal DAG.
    Synth {
        #[arg(long, value_enum, default_value_t = Template::Fig9)]
        template: Template,
        /// Attribute count including the label.
        #[arg(long, default_value_t = 7)]
        attrs: usize,
        #[arg(long, default_value_t = 4)]
        domain: usize,
        #[arg(long, default_value_t = 0.3)]
        density: f64,
        #[arg(long, default_value_t = 4)]
        inadmissible: usize,
        #[arg(long, default_value_t = 0)]
        additional: usize,
        /// Inadmissible attributes forced to be direct label parents.
        #[arg(long, default_value_t = 2)]
        direct: usize,
        #[arg(long, default_value_t = 50_000)]
        records: usize,
        /// Read the DAG from this JSON file instead of drawing one.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        roles_out: Option<PathBuf>,
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
    /// Chi-square (no --given) or pooled G-test of x against y.
    IndepTest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        #[arg(long, value_delimiter = ',')]
        given: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_SIGNIFICANCE)]
        significance: f64,
        #[arg(long)]
        bin_numeric: Option<usize>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Template {
    Fig9,
    Random,
}

/// Error raised for bad flag combinations (exit 1).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fairlatent::Error>() {
            return if e.is_internal() { 3 } else { 2 };
        }
    }
    2
}

fn load_config(global: &Global, tuning: &Tuning) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text)
                .map_err(|e| fairlatent::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    cfg.seed = global.seed;
    if let Some(v) = tuning.alpha {
        cfg.identify.alpha = v;
    }
    if let Some(v) = tuning.significance {
        cfg.identify.significance = v;
    }
    if let Some(v) = tuning.tau {
        cfg.tau = v;
    }
    if let Some(v) = tuning.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = tuning.n_iter {
        cfg.n_iter = v;
    }
    if let Some(v) = tuning.eta {
        cfg.eta = v;
    }
    if let Some(v) = tuning.smoothing {
        cfg.smoothing = v;
    }
    if let Some(v) = tuning.restarts {
        cfg.restarts = v;
    }
    cfg.strict_tau |= tuning.strict_tau;
    cfg.validate()?;
    Ok(cfg)
}

fn read_raw(path: &Path, bins: Option<usize>) -> anyhow::Result<RawTable> {
    let mut raw = RawTable::read_csv(path)?;
    if let Some(b) = bins {
        let binned = raw.bin_numeric(b);
        if !binned.is_empty() {
            log::info!("binned numeric columns {binned:?}");
        }
    }
    Ok(raw)
}

fn load(input: &Input) -> anyhow::Result<(Dataset, RoleSpec)> {
    let roles = RoleSpec::load(&input.roles)?;
    let raw = read_raw(&input.input, input.bin_numeric)?;
    Ok((encode_with_roles(&raw, &roles)?, roles))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Splits `a,b;c,d` into two attribute lists.
fn parse_blocks(spec: &str) -> anyhow::Result<(Vec<String>, Vec<String>)> {
    let (l, r) = spec
        .split_once(';')
        .ok_or_else(|| Usage(format!("--blocks must look like `a,b;c,d`, got `{spec}`")))?;
    let side = |s: &str| -> Vec<String> {
        s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::to_owned).collect()
    };
    Ok((side(l), side(r)))
}

fn run(cli: Cli) -> anyhow::Result<Value> {
    let g = &cli.global;
    match cli.command {
        Command::Preprocess {
            input,
            tuning,
            output,
            params_out,
            keep_latent,
            omit_timings,
        } => {
            let mut cfg = load_config(g, &tuning)?;
            cfg.keep_latent |= keep_latent;
            cfg.timings = !omit_timings;
            let (ds, roles) = load(&input)?;
            let out = pipeline::preprocess(&ds, &roles, &cfg)?;
            out.data.write_csv(&output)?;
            if let Some(p) = &params_out {
                out.params.save_json(&ds, p)?;
            }
            Ok(serde_json::to_value(&out.report)?)
        }
        Command::Identify { input, tuning } => {
            let cfg = load_config(g, &tuning)?;
            let (ds, roles) = load(&input)?;
            let outcome = identify_ic(&ds, &roles, &cfg.identify)?;
            print_json(&outcome.ic)?;
            Ok(serde_json::to_value(&outcome)?)
        }
        Command::Partition { input, tuning, ic } => {
            let cfg = load_config(g, &tuning)?;
            let (ds, roles) = load(&input)?;
            let ic = match ic {
                Some(ic) => ic,
                None => identify_ic(&ds, &roles, &cfg.identify)?.ic,
            };
            let mut warnings = Vec::new();
            let part = pipeline::split_ic(&ds, &roles, &ic, &cfg, &mut warnings)?;
            print_json(&part)?;
            Ok(json!({ "partition": part, "warnings": warnings }))
        }
        Command::Estimate {
            input,
            tuning,
            params_out,
            blocks,
        } => {
            let cfg = load_config(g, &tuning)?;
            let (ds, roles) = load(&input)?;
            let mut warnings = Vec::new();
            let part = match blocks {
                Some(b) => {
                    let (left, right) = parse_blocks(&b)?;
                    let z: Vec<String> = ds
                        .names()
                        .filter(|n| {
                            matches!(
                                roles.role_of(n),
                                Some(Role::Sensitive | Role::Admissible | Role::Inadmissible)
                            ) && !left.iter().chain(&right).any(|a| a == n)
                        })
                        .map(str::to_owned)
                        .collect();
                    let objective = fairlatent::stats::pairwise_cmi_objective(&ds, &left, &right, &z)?;
                    fairlatent::partition::Partition {
                        left,
                        right,
                        objective,
                        effective_tau: cfg.tau,
                    }
                }
                None => {
                    let ic = identify_ic(&ds, &roles, &cfg.identify)?.ic;
                    pipeline::split_ic(&ds, &roles, &ic, &cfg, &mut warnings)?
                }
            };
            let tau = part.effective_tau;
            let params = latent_em::estimate(&ds, &part, &roles, &cfg.em_config(tau))?;
            params.save_json(&ds, &params_out)?;
            let summary = json!({
                "tau": params.tau,
                "iterations_run": params.iterations_run,
                "final_loglik": params.final_loglik,
            });
            print_json(&summary)?;
            Ok(json!({
                "partition": params.partition,
                "em": summary,
                "loglik_trace": params.loglik_trace,
                "warnings": warnings,
            }))
        }
        Command::Evaluate {
            train,
            test,
            roles,
            folds,
            rod_smoothing,
            bin_numeric,
        } => {
            let roles = RoleSpec::load(&roles)?;
            let load_eval = |p: &Path| -> anyhow::Result<(Dataset, Option<Vec<u32>>)> {
                let ds = read_raw(p, bin_numeric)?.encode()?;
                let (ds, latent) = if ds.index_of(LATENT_COLUMN).is_ok() {
                    let (plain, latent) = pipeline::split_latent(&ds)?;
                    (plain, Some(latent))
                } else {
                    (ds, None)
                };
                roles.validate(&ds)?;
                Ok((ds, latent))
            };
            let (train_ds, latent) = load_eval(&train)?;
            let mut report = match (folds, &test) {
                (Some(k), _) => metrics::cross_validate(&train_ds, &roles, k, rod_smoothing, g.seed)?,
                (None, Some(t)) => {
                    let (test_ds, _) = load_eval(t)?;
                    metrics::evaluate_split(&train_ds, &test_ds, &roles, rod_smoothing, g.seed)?
                }
                (None, None) => return Err(Usage("evaluate needs --test or --folds".into()).into()),
            };
            if let Some(latent) = latent {
                let tau = latent.iter().max().map_or(1, |&m| m as usize + 1);
                let sensitive = roles.in_schema_order(&train_ds, &[Role::Sensitive]);
                let diag = metrics::latent_sensitive_diagnostics(&latent, tau, &train_ds, &sensitive)?;
                report.attach_latent(&diag);
            }
            print_json(&report)?;
            Ok(serde_json::to_value(&report)?)
        }
        Command::Synth {
            template,
            attrs,
            domain,
            density,
            inadmissible,
            additional,
            direct,
            records,
            spec,
            output,
            roles_out,
            spec_out,
        } => {
            let (dag, roles) = match spec {
                Some(p) => (CausalDagSpec::load(&p)?, None),
                None => {
                    let t = match template {
                        Template::Fig9 => RolesTemplate::Fig9,
                        Template::Random => RolesTemplate::Random { inadmissible, additional, direct },
                    };
                    let (dag, roles) = synthgen::random_spec(attrs, domain, density, &t, g.seed)?;
                    (dag, Some(roles))
                }
            };
            let ds = synthgen::generate(&dag, records, g.seed)?;
            ds.write_csv(&output)?;
            if let Some(p) = &roles_out {
                let r = roles
                    .as_ref()
                    .ok_or_else(|| Usage("--roles-out needs a generated spec, not --spec".into()))?;
                r.save(p)?;
            }
            if let Some(p) = &spec_out {
                dag.save(p)?;
            }
            Ok(json!({ "records": ds.n_records(), "attributes": ds.n_attributes(), "roles": roles }))
        }
        Command::IndepTest {
            input,
            x,
            y,
            given,
            significance,
            bin_numeric,
        } => {
            let ds = read_raw(&input, bin_numeric)?.encode()?;
            let result = if given.is_empty() {
                chi_square_test(&ds, &x, &y, significance)?
            } else {
                g_test_conditional(&ds, &x, &y, &given, significance)?
            };
            print_json(&result)?;
            Ok(serde_json::to_value(result)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.global.log_level.filter())
        .format_timestamp(None)
        .init();
    let report_path = cli.global.report.clone();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.workers)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(3);
        }
    };
    let result = pool.install(|| run(cli));
    let (code, body) = match result {
        Ok(body) => (0u8, json!({ "schema": REPORT_SCHEMA, "status": "ok", "result": body })),
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("error: {err:#}");
            (
                code,
                json!({ "schema": REPORT_SCHEMA, "status": "error", "exit_code": code, "message": format!("{err:#}") }),
            )
        }
    };
    if let Some(p) = report_path {
        if let Err(e) = write_json(&p, &body) {
            eprintln!("error: {e:#}");
            return ExitCode::from(if code == 0 { 2 } else { code });
        }
    }
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_parse() {
        let (l, r) = parse_blocks("a, b;c").unwrap();
        assert_eq!(l, ["a", "b"]);
        assert_eq!(r, ["c"]);
        assert!(parse_blocks("a,b").is_err());
    }

    #[test]
    fn usage_errors_map_to_one() {
        let e: anyhow::Error = Usage("x".into()).into();
        assert_eq!(exit_code(&e), 1);
        let e: anyhow::Error = fairlatent::Error::Internal("x".into()).into();
        assert_eq!(exit_code(&e), 3);
        let e: anyhow::Error = fairlatent::Error::TauBound { tau: 4, bound: 3 }.into();
        assert_eq!(exit_code(&e), 2);
    }
}
