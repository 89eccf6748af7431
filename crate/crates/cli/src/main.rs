use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pground::infinity::monotone_supnorm_check;
use pground::iteration::{check_monotonicity, consistency_estimators, default_slack, with_suffix, CheckStatus};
use pground::{
    inverse_iterate, lambda2_reference, lambda_p_shooting_1d, rayleigh_bruteforce, sweep, Domain, DomainSpec, Error,
    GridFunction, InitPolicy, IterationParams, IterationTrace, Mask, SolverConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_NONCONVERGENCE: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "pground", version, about = "Inverse iteration for p-Laplacian ground states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the inverse iteration and write PREFIX.trace.csv and PREFIX.summary.json.
    Solve(SolveArgs),
    /// Run the iteration for a list of p and write PREFIX.sweep.csv.
    Sweep(SweepArgs),
    /// Print a reference eigenvalue as JSON.
    Oracle(OracleArgs),
    /// Re-verify a saved trace.
    Check(CheckArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// interval[:A,B] | square | rect:AX,BX,AY,BY | mask:FILE
    #[arg(long)]
    domain: Option<String>,
    /// Grid resolution.
    #[arg(long)]
    n: Option<usize>,
    /// Maximum number of outer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Relative stopping tolerance on successive Rayleigh quotients.
    #[arg(long)]
    tol: Option<f64>,
    /// JSON file with the same keys as the flags; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print inner and outer progress to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    p: Option<f64>,
    /// const | random[:SEED] | file:CSV
    #[arg(long)]
    init: Option<String>,
    /// Seed for `--init random` without an explicit seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output prefix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the final normalized iterate to PREFIX.state.csv.
    #[arg(long)]
    save_state: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated, strictly increasing, all above 2.
    #[arg(long, value_delimiter = ',')]
    p_list: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum OracleMethod {
    Dense,
    Shooting,
    Bruteforce,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, value_enum)]
    method: OracleMethod,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Bracket width for the shooting method.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 64)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Prefix of a saved run.
    prefix: PathBuf,
}

/// Keys accepted by `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    domain: Option<String>,
    n: Option<usize>,
    p: Option<f64>,
    p_list: Option<Vec<f64>>,
    max_steps: Option<usize>,
    tol: Option<f64>,
    init: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    solver: Option<SolverConfig>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(path) => {
                let file = File::open(path).with_context(|| format!("opening config {}", path.display()))?;
                serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing config {}", path.display()))
            }
        }
    }
}

/// Error that maps to the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn required<T>(value: Option<T>, flag: &str) -> anyhow::Result<T> {
    value.ok_or_else(|| usage(format!("missing required option --{flag}")))
}

fn parse_numbers(text: &str, count: usize, what: &str) -> anyhow::Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("{what} expects {count} comma-separated numbers, got {text:?}")))?;
    if values.len() != count {
        return Err(usage(format!("{what} expects {count} comma-separated numbers, got {text:?}")));
    }
    Ok(values)
}

fn parse_domain(text: &str) -> anyhow::Result<DomainSpec> {
    let (kind, rest) = match text.split_once(':') {
        Some((k, r)) => (k, Some(r)),
        None => (text, None),
    };
    let spec = match (kind, rest) {
        ("interval", None) => DomainSpec::unit_interval(),
        ("interval", Some(r)) => {
            let v = parse_numbers(r, 2, "interval")?;
            DomainSpec::interval(v[0], v[1])?
        }
        ("square", None) => DomainSpec::unit_square(),
        ("rect", Some(r)) => {
            let v = parse_numbers(r, 4, "rect")?;
            DomainSpec::rectangle(v[0], v[1], v[2], v[3])?
        }
        ("mask", Some(path)) => DomainSpec::Mask(Mask::load(path).with_context(|| format!("reading mask {path}"))?),
        _ => return Err(usage(format!("unknown domain {text:?}; expected interval, square, rect:AX,BX,AY,BY or mask:FILE"))),
    };
    Ok(spec)
}

fn parse_init(text: &str, seed: u64, domain: &Domain) -> anyhow::Result<InitPolicy> {
    match text.split_once(':') {
        None if text == "const" => Ok(InitPolicy::PositiveConstant),
        None if text == "random" => Ok(InitPolicy::RandomPositive(seed)),
        Some(("random", s)) => {
            let seed = s.parse().map_err(|_| usage(format!("bad seed in --init {text:?}")))?;
            Ok(InitPolicy::RandomPositive(seed))
        }
        Some(("file", path)) => {
            let file = File::open(path).with_context(|| format!("opening initial state {path}"))?;
            let u = GridFunction::read_csv(domain.grid(), BufReader::new(file)).with_context(|| format!("reading initial state {path}"))?;
            Ok(InitPolicy::Custom(u))
        }
        _ => Err(usage(format!("unknown init {text:?}; expected const, random[:SEED] or file:CSV"))),
    }
}

struct Setup {
    domain: Domain,
    params: IterationParams,
    solver: SolverConfig,
}

fn setup(common: &CommonArgs, file: &FileConfig, p: f64) -> anyhow::Result<Setup> {
    let spec = parse_domain(&required(common.domain.clone().or(file.domain.clone()), "domain")?)?;
    let n = required(common.n.or(file.n), "n")?;
    let domain = Domain::new(spec, n)?;
    let mut params = IterationParams::default();
    if let Some(k) = common.max_steps.or(file.max_steps) {
        params.max_steps = k;
    }
    if let Some(t) = common.tol.or(file.tol) {
        params.tol_outer = t;
    }
    let mut solver = file.solver.clone().unwrap_or_default();
    solver.p = p;
    solver.verbose |= common.verbose;
    Ok(Setup { domain, params, solver })
}

fn cmd_solve(args: SolveArgs) -> anyhow::Result<u8> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let p = required(args.p.or(file.p), "p")?;
    let out = required(args.out.clone().or(file.out.clone()), "out")?;
    let Setup { domain, params, solver } = setup(&args.common, &file, p)?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let init_text = args.init.clone().or(file.init.clone()).unwrap_or_else(|| "const".into());
    let init = parse_init(&init_text, seed, &domain)?;

    let run = inverse_iterate(&domain, &init, &params, &solver)?;
    run.trace.save(&out)?;
    if args.save_state {
        let mut w = BufWriter::new(File::create(with_suffix(&out, "state.csv"))?);
        run.state.write_csv(&mut w)?;
        w.flush()?;
    }
    let t = &run.trace;
    println!(
        "p={} h={} steps={} lambda_R={:.12e} lambda_Q={:.12e} converged={}",
        t.p,
        t.h,
        t.steps.len(),
        t.lambda_r,
        t.lambda_q,
        t.converged
    );
    if !t.converged {
        eprintln!("error: outer iteration did not converge within {} steps", params.max_steps);
        return Ok(EXIT_NONCONVERGENCE);
    }
    Ok(0)
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<u8> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let p_list = args.p_list.clone().or(file.p_list.clone()).unwrap_or_else(|| vec![4.0, 8.0, 16.0, 32.0, 64.0]);
    let out = required(args.out.clone().or(file.out.clone()), "out")?;
    let Setup { domain, params, solver } = setup(&args.common, &file, 2.0)?;
    let result = sweep(&domain, &p_list, &params, &solver)?;
    let mut w = BufWriter::new(File::create(with_suffix(&out, "sweep.csv"))?);
    result.write_csv(&mut w)?;
    w.flush()?;

    println!("1/inradius = {}", result.inradius_reciprocal);
    let mut failed = false;
    for e in &result.entries {
        println!("p={:<6} lambda_root={:.6} final_ratio={:.6} converged={}", e.p, e.lambda_root, e.final_ratio, e.converged);
        if let Some(msg) = &e.error {
            eprintln!("error: p={}: {msg}", e.p);
        }
        failed |= !e.converged;
    }
    Ok(if failed { EXIT_NONCONVERGENCE } else { 0 })
}

#[derive(Serialize)]
struct OracleOutput {
    method: OracleMethod,
    p: f64,
    value: f64,
    tol: f64,
}

fn cmd_oracle(args: OracleArgs) -> anyhow::Result<u8> {
    let domain = || -> anyhow::Result<Domain> {
        let spec = parse_domain(&required(args.domain.clone(), "domain")?)?;
        Ok(Domain::new(spec, required(args.n, "n")?)?)
    };
    let (p, value, tol) = match args.method {
        OracleMethod::Dense => {
            if args.p.is_some_and(|p| p != 2.0) {
                return Err(usage("the dense oracle is only defined for p = 2"));
            }
            let (value, _) = lambda2_reference(&domain()?)?;
            (2.0, value, 1e-12)
        }
        OracleMethod::Shooting => {
            if args.domain.is_some() {
                return Err(usage("the shooting oracle is fixed to the unit interval"));
            }
            let p = required(args.p, "p")?;
            (p, lambda_p_shooting_1d(p, args.tol)?, args.tol)
        }
        OracleMethod::Bruteforce => {
            let p = required(args.p, "p")?;
            (p, rayleigh_bruteforce(&domain()?, p, args.restarts, args.seed)?, 1e-6)
        }
    };
    println!("{}", serde_json::to_string(&OracleOutput { method: args.method, p, value, tol })?);
    Ok(0)
}

fn status_cell(s: CheckStatus) -> String {
    s.to_string()
}

fn cmd_check(args: CheckArgs) -> anyhow::Result<u8> {
    let trace = IterationTrace::load(&args.prefix).with_context(|| format!("loading run {}", args.prefix.display()))?;
    let report = check_monotonicity(&trace, default_slack(&trace));
    let mut failures = Vec::new();

    println!("{:<12} {:<6} {:>13} {:>6}  description", "check", "status", "worst_margin", "step");
    for c in &report.claims {
        let step = c.worst_step.map_or("-".to_string(), |k| k.to_string());
        println!(
            "{:<12} {:<6} {:>13.3e} {:>6}  {}{}",
            format!("({})", c.claim.label()),
            status_cell(c.status),
            c.worst_margin,
            step,
            c.claim.description(),
            if c.note.is_empty() { String::new() } else { format!(" [{}]", c.note) }
        );
        if c.status == CheckStatus::Fail {
            failures.push(format!("claim ({}) failed at k={}", c.claim.label(), c.offending_step.unwrap_or(0)));
        }
    }

    let gap = consistency_estimators(&trace);
    let gap_status = if !trace.converged {
        CheckStatus::Skipped
    } else if gap <= 1e-6 {
        CheckStatus::Pass
    } else {
        failures.push(format!("estimator gap {gap:e}"));
        CheckStatus::Fail
    };
    println!("{:<12} {:<6} {:>13.3e} {:>6}  |lambda_R - lambda_Q| / lambda_R", "estimators", status_cell(gap_status), gap, "-");

    match trace.barrier {
        Some(b) => {
            let ok = b.holds();
            if !ok {
                failures.push("barrier bound violated".into());
            }
            let status = if ok { CheckStatus::Pass } else { CheckStatus::Fail };
            let ratio = b.u1_sup / (b.w_sup * b.u0_sup);
            println!("{:<12} {:<6} {:>13.3e} {:>6}  sup|u_1| / (|w|_inf sup|u_0|) below 1", "barrier", status_cell(status), ratio, 1);
        }
        None => println!("{:<12} {:<6} {:>13} {:>6}  no barrier record", "barrier", "SKIP", "-", "-"),
    }

    let sup = match trace.inradius_reciprocal {
        Some(target) => monotone_supnorm_check(&trace, target),
        None => pground::infinity::SupNormReport {
            status: CheckStatus::Skipped,
            gradient_growth: f64::NAN,
            value_growth: f64::NAN,
            ratio_change: f64::NAN,
            note: "summary has no inradius".into(),
        },
    };
    println!(
        "{:<12} {:<6} {:>13.3e} {:>6}  large-p sup-norm sequences{}",
        "supnorm",
        status_cell(sup.status),
        sup.gradient_growth.max(sup.value_growth),
        "-",
        if sup.note.is_empty() { String::new() } else { format!(" [{}]", sup.note) }
    );
    if sup.status == CheckStatus::Fail {
        failures.push("large-p sup-norm sequences".into());
    }

    if failures.is_empty() {
        Ok(0)
    } else {
        for f in &failures {
            eprintln!("error: {f}");
        }
        Ok(EXIT_CHECK_FAILED)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NonConvergence { .. }) | Some(Error::DegenerateIterate { .. }) => EXIT_NONCONVERGENCE,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            if e.use_stderr() {
                eprint!("error: {}", e.render().to_string().trim_start_matches("error: "));
            } else {
                print!("{}", e.render());
            }
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_strings() {
        assert_eq!(parse_domain("interval").unwrap(), DomainSpec::unit_interval());
        assert_eq!(parse_domain("interval:0,2").unwrap(), DomainSpec::interval(0.0, 2.0).unwrap());
        assert_eq!(parse_domain("square").unwrap(), DomainSpec::unit_square());
        assert_eq!(parse_domain("rect:0,2,0,1").unwrap(), DomainSpec::rectangle(0.0, 2.0, 0.0, 1.0).unwrap());
        for bad in ["disk", "rect:0,1", "rect:a,b,c,d", "square:1"] {
            let err = parse_domain(bad).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_USAGE, "{bad}");
        }
    }

    #[test]
    fn init_strings() {
        let d = Domain::new(DomainSpec::unit_interval(), 5).unwrap();
        assert!(matches!(parse_init("const", 0, &d).unwrap(), InitPolicy::PositiveConstant));
        assert!(matches!(parse_init("random", 4, &d).unwrap(), InitPolicy::RandomPositive(4)));
        assert!(matches!(parse_init("random:9", 4, &d).unwrap(), InitPolicy::RandomPositive(9)));
        assert!(parse_init("random:x", 0, &d).is_err());
        assert!(parse_init("ones", 0, &d).is_err());
    }

    #[test]
    fn nonconvergence_maps_to_two() {
        let err = anyhow::Error::from(Error::NonConvergence {
            iterations: 1,
            residual: 1.0,
            tolerance: 0.1,
        });
        assert_eq!(exit_code(&err), EXIT_NONCONVERGENCE);
        assert_eq!(exit_code(&anyhow::Error::from(Error::Degenerate)), EXIT_USAGE);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn missing_config_is_an_error() {
        assert!(FileConfig::load(Some(Path::new("/nonexistent/cfg.json"))).is_err());
    }
}
