//! Command-line front end.
//!
//! Four subcommands: `cic`, `dsc`, `simulate` and `generate`. Reports are
//! JSON and carry the resolved configuration. Exit codes: 0 success,
//! 2 input or validation error, 3 estimation failure, 4 optimizer
//! non-convergence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::cic::{estimate, CicCase, CicEstimate, CicRequest};
use crate::diagnostics::{diagnose, DiagnosticOptions, DiagnosticsReport, Verdict};
use crate::dsc::{
    baseline_same_period_weights, build_ts_panel, dsc_counterfactual, fit_weights, per_tau_u_weights, weight_spread,
    write_fit_long, DscEstimate, WeightFit,
};
use crate::error::{Error, Result};
use crate::panel::{load_panel, load_roles, within_group_quantiles, LoadOptions, PanelDataset, Role, Schema};
use crate::quantile::QuantileGrid;
use crate::sim::{bundled, bundled_names, generate_replication, run_monte_carlo, DgpSpec, Estimator, McResult};

#[derive(Debug, Parser)]
#[command(name = "hetcic", version, about = "Distributional changes-in-changes and synthetic control estimators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Changes-in-changes on a two-period panel.
    Cic(CicArgs),
    /// Distributional synthetic control on a long panel.
    Dsc(DscArgs),
    /// Monte Carlo run of a scenario.
    Simulate(SimulateArgs),
    /// Writes one simulated panel as CSV.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Long-format panel: one row per (unit, group, period).
    #[arg(long)]
    pub input: PathBuf,
    /// Column overrides, e.g. `unit=id,group=county,treated=`.
    #[arg(long)]
    pub schema: Option<String>,
    /// Sidecar `group,role` file, used when the schema has no treated column.
    #[arg(long)]
    pub roles: Option<PathBuf>,
    /// Field delimiter; detected from the header when omitted.
    #[arg(long, value_parser = parse_delimiter)]
    pub delimiter: Option<u8>,
    #[arg(long, default_value_t = PanelDataset::DEFAULT_MIN_CELL_SIZE)]
    pub min_cell_size: usize,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Grid size; 99 for `cic`, 29 for `dsc`.
    #[arg(long)]
    pub grid_m: Option<usize>,
    #[arg(long, default_value_t = QuantileGrid::DEFAULT_LO)]
    pub grid_lo: f64,
    #[arg(long, default_value_t = QuantileGrid::DEFAULT_HI)]
    pub grid_hi: f64,
}

#[derive(Debug, Args)]
pub struct TauArgs {
    /// Target individual rank(s), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub tau_u: Vec<f64>,
    /// Target group rank(s), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub tau_v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseArg {
    #[value(name = "1")]
    #[serde(rename = "1")]
    One,
    #[value(name = "2")]
    #[serde(rename = "2")]
    Two,
    #[value(name = "3")]
    #[serde(rename = "3")]
    Three,
    Auto,
}

#[derive(Debug, Args)]
pub struct CicArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub tau: TauArgs,
    #[arg(long, value_enum, default_value = "auto")]
    pub case: CaseArg,
    /// Pre-treatment period; defaults to the first period.
    #[arg(long)]
    pub t0: Option<i64>,
    /// Case II warning threshold on the matching discrepancy.
    #[arg(long)]
    pub mismatch_tol: Option<f64>,
    /// Case III matching band; defaults to the median adjacent gap.
    #[arg(long)]
    pub band: Option<f64>,
    /// Diagnostic threshold as a multiple of the split-half statistic.
    #[arg(long, default_value_t = 3.0)]
    pub threshold_multiplier: f64,
    /// JSON report; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV companion with one row per estimate.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Long-format dump of every cell's quantile curve.
    #[arg(long)]
    pub dump_curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DscArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub tau: TauArgs,
    /// Last pre-treatment period.
    #[arg(long)]
    pub t0: i64,
    /// Minimum number of periods in each regime.
    #[arg(long, default_value_t = crate::dsc::DEFAULT_MIN_PERIODS)]
    pub min_periods: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Long-format dump of treated, control and synthetic curves.
    #[arg(long)]
    pub dump_curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Bundled scenario name or path to a scenario JSON file.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Estimator as JSON, e.g. `{"kind":"cic","case":"2","tau_u":0.5,"tau_v":0.5}`;
    /// defaults to the scenario's own.
    #[arg(long)]
    pub estimator: Option<String>,
    /// JSON result; a CSV with one row per replication is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replication stream.
    #[arg(long, default_value_t = 0)]
    pub rep: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_delimiter(s: &str) -> std::result::Result<u8, String> {
    match s {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        _ if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        _ => Err(format!("delimiter must be one ASCII character or `tab`, got `{s}`")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridConfig {
    pub m: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Everything a command resolved before running.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<PathBuf>,
    pub roles: Option<PathBuf>,
    pub schema: Option<Schema>,
    pub delimiter: Option<String>,
    pub min_cell_size: Option<usize>,
    pub grid: Option<GridConfig>,
    pub case: Option<CaseArg>,
    pub tau_u: Vec<f64>,
    pub tau_v: Vec<f64>,
    pub t0: Option<i64>,
    pub min_periods: Option<usize>,
    pub mismatch_tol: Option<f64>,
    pub band: Option<f64>,
    pub threshold_multiplier: Option<f64>,
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    fn new(command: &str) -> Self {
        RunConfig {
            command: command.into(),
            input: None,
            roles: None,
            schema: None,
            delimiter: None,
            min_cell_size: None,
            grid: None,
            case: None,
            tau_u: Vec::new(),
            tau_v: Vec::new(),
            t0: None,
            min_periods: None,
            mismatch_tol: None,
            band: None,
            threshold_multiplier: None,
            scenario: None,
            seed: None,
            reps: None,
            out: None,
        }
    }

    fn check_taus(&self) -> Result<()> {
        if self.tau_u.is_empty() || self.tau_v.is_empty() {
            return Err(Error::Validation("at least one tau_u and one tau_v are required".into()));
        }
        self.tau_u.iter().chain(&self.tau_v).try_for_each(|&t| crate::quantile::check_probability(t))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PanelSummary {
    pub groups: usize,
    pub treated_groups: Vec<String>,
    pub control_groups: usize,
    pub periods: Vec<i64>,
    pub t0: i64,
    pub observations: usize,
}

impl PanelSummary {
    fn of(p: &PanelDataset) -> Self {
        PanelSummary {
            groups: p.groups().len(),
            treated_groups: p.groups_in(Role::Treated).map(|g| p.groups()[g].clone()).collect(),
            control_groups: p.groups_in(Role::Control).count(),
            periods: p.periods().to_vec(),
            t0: p.t0(),
            observations: p.n_observations(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CicReport {
    pub config: RunConfig,
    pub panel: PanelSummary,
    pub diagnostics: DiagnosticsReport,
    /// Cases estimated; several under `auto` means overidentification.
    pub cases: Vec<CicCase>,
    pub overidentified: bool,
    pub estimates: Vec<CicEstimate>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct DscFitReport {
    pub fit: WeightFit,
    pub estimates: Vec<DscEstimate>,
}

#[derive(Debug, Serialize)]
pub struct DscReport {
    pub config: RunConfig,
    pub panel: PanelSummary,
    pub matched: DscFitReport,
    /// Same-period weights for comparison.
    pub baseline: DscFitReport,
    /// Largest change in any weight when fitting each `tau_u` row alone.
    pub weight_spread: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct SimulateReport {
    pub config: RunConfig,
    pub result: McResult,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Cic(a) => cmd_cic(&a),
        Command::Dsc(a) => cmd_dsc(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Generate(a) => cmd_generate(&a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn grid_of(g: &GridArgs, default_m: usize) -> Result<(QuantileGrid, GridConfig)> {
    let m = g.grid_m.unwrap_or(default_m);
    let grid = QuantileGrid::new(m, g.grid_lo, g.grid_hi)?;
    Ok((grid, GridConfig { m, lo: g.grid_lo, hi: g.grid_hi }))
}

fn load(a: &InputArgs, t0: Option<i64>, cfg: &mut RunConfig) -> Result<PanelDataset> {
    let schema = match &a.schema {
        Some(s) => Schema::parse_overrides(s)?,
        None => Schema::default(),
    };
    let roles = match &a.roles {
        Some(path) => Some(load_roles(open(path)?)?),
        None => None,
    };
    if schema.treated.is_none() && roles.is_none() {
        return Err(Error::Validation("no treated column in the schema and no --roles file".into()));
    }
    let opts = LoadOptions { delimiter: a.delimiter, min_cell_size: a.min_cell_size, t0, roles };
    let panel = load_panel(open(&a.input)?, &schema, &opts)?;
    log::info!("loaded {} observations in {} groups", panel.n_observations(), panel.groups().len());
    cfg.input = Some(a.input.clone());
    cfg.roles = a.roles.clone();
    cfg.schema = Some(schema);
    cfg.delimiter = a.delimiter.map(|d| (d as char).to_string());
    cfg.min_cell_size = Some(a.min_cell_size);
    cfg.t0 = Some(panel.t0());
    Ok(panel)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Validation(format!("cannot create {}: {e}", path.display())))
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = create(path)?;
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

fn case_of(c: CaseArg) -> Option<CicCase> {
    match c {
        CaseArg::One => Some(CicCase::I),
        CaseArg::Two => Some(CicCase::II),
        CaseArg::Three => Some(CicCase::III),
        CaseArg::Auto => None,
    }
}

fn verdict_of(report: &DiagnosticsReport, case: CicCase) -> Verdict {
    match case {
        CicCase::I => report.case1.verdict,
        CicCase::II => report.case2.verdict,
        CicCase::III => report.case3.verdict,
    }
}

pub fn cmd_cic(a: &CicArgs) -> Result<()> {
    let mut cfg = RunConfig::new("cic");
    let (grid, grid_cfg) = grid_of(&a.grid, QuantileGrid::DEFAULT_M)?;
    cfg.grid = Some(grid_cfg);
    cfg.case = Some(a.case);
    cfg.tau_u = a.tau.tau_u.clone();
    cfg.tau_v = a.tau.tau_v.clone();
    cfg.mismatch_tol = a.mismatch_tol;
    cfg.band = a.band;
    cfg.threshold_multiplier = Some(a.threshold_multiplier);
    cfg.out = a.out.clone();
    cfg.check_taus()?;
    if !(a.threshold_multiplier > 0.0) {
        return Err(Error::Validation(format!("threshold multiplier must be positive, got {}", a.threshold_multiplier)));
    }

    let panel = load(&a.input, a.t0, &mut cfg)?;
    if panel.periods().len() != 2 {
        return Err(Error::Validation(format!(
            "changes-in-changes needs exactly two periods, found {:?}",
            panel.periods()
        )));
    }
    let cq = within_group_quantiles(&panel, &grid)?;
    if let Some(path) = &a.dump_curves {
        let mut w = create(path)?;
        cq.write_long(&mut w, b',')?;
        w.flush()?;
    }

    let opts = DiagnosticOptions {
        grid_u: grid.clone(),
        grid_v: grid.clone(),
        band: a.band,
        threshold_multiplier: a.threshold_multiplier,
    };
    let diagnostics = diagnose(&cq, &opts)?;
    let mut warnings = Vec::new();
    let cases: Vec<CicCase> = match case_of(a.case) {
        Some(c) => {
            if verdict_of(&diagnostics, c) == Verdict::Inconsistent {
                warnings.push(format!("case {} was requested but its diagnostic is inconsistent with the data", c.number()));
            }
            vec![c]
        }
        None => CicCase::ALL.into_iter().filter(|&c| verdict_of(&diagnostics, c) == Verdict::Consistent).collect(),
    };
    if cases.is_empty() {
        return Err(Error::Estimation(format!(
            "no case is consistent with the data (verdicts: case 1 {:?}, case 2 {:?}, case 3 {:?})",
            diagnostics.case1.verdict, diagnostics.case2.verdict, diagnostics.case3.verdict
        )));
    }

    let mut estimates = Vec::new();
    for &case in &cases {
        for &tu in &a.tau.tau_u {
            for &tv in &a.tau.tau_v {
                let mut req = CicRequest::new(tu, tv, case).with_grids(grid.clone(), grid.clone());
                req.mismatch_tol = a.mismatch_tol;
                let e = estimate(&cq, &req)?;
                warnings.extend(e.warnings.iter().map(|w| format!("case {} at ({tu}, {tv}): {w}", case.number())));
                estimates.push(e);
            }
        }
    }
    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["case", "tau_u", "tau_v", "counterfactual", "observed", "qtt", "clamped"])?;
        for e in &estimates {
            w.write_record([
                e.case.number().to_string(),
                e.tau_u_star.to_string(),
                e.tau_v_star.to_string(),
                e.counterfactual.to_string(),
                e.observed.to_string(),
                e.qtt.to_string(),
                e.clamped.to_string(),
            ])?;
        }
        w.flush()?;
    }
    let report = CicReport {
        config: cfg,
        panel: PanelSummary::of(&panel),
        overidentified: cases.len() > 1,
        cases,
        diagnostics,
        estimates,
        warnings,
    };
    emit_json(&report, a.out.as_deref())
}

pub fn cmd_dsc(a: &DscArgs) -> Result<()> {
    let mut cfg = RunConfig::new("dsc");
    let (grid, grid_cfg) = grid_of(&a.grid, crate::dsc::DEFAULT_M)?;
    cfg.grid = Some(grid_cfg);
    cfg.tau_u = a.tau.tau_u.clone();
    cfg.tau_v = a.tau.tau_v.clone();
    cfg.min_periods = Some(a.min_periods);
    cfg.out = a.out.clone();
    cfg.check_taus()?;

    let panel = load(&a.input, Some(a.t0), &mut cfg)?;
    if let Some(&last) = panel.periods().last() {
        if a.t0 >= last {
            return Err(Error::Validation(format!("no post-treatment regime: t0 = {} but the last period is {last}", a.t0)));
        }
    }
    let cq = within_group_quantiles(&panel, &grid)?;
    let ts = build_ts_panel(&cq, a.t0, &grid, &grid, a.min_periods)?;
    let fit = fit_weights(&ts)?;
    let baseline = baseline_same_period_weights(&cq, a.t0, &grid)?;
    let spread = weight_spread(&per_tau_u_weights(&ts)?);

    let mut matched = Vec::new();
    let mut base = Vec::new();
    for &tu in &a.tau.tau_u {
        for &tv in &a.tau.tau_v {
            matched.push(dsc_counterfactual(&ts, &fit, tu, tv)?);
            base.push(dsc_counterfactual(&ts, &baseline, tu, tv)?);
        }
    }
    let mut warnings: Vec<String> = fit.notes.clone();
    for &(i, j) in &fit.ties {
        let names = &fit.weights.groups;
        warnings.push(format!("controls `{}` and `{}` are indistinguishable; their split is not identified", names[i], names[j]));
    }
    if let Some(path) = &a.dump_curves {
        write_fit_long(&ts, &fit, create(path)?, b',')?;
    }
    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["weights", "tau_u", "tau_v", "counterfactual", "observed", "gap"])?;
        for (label, rows) in [("matched", &matched), ("baseline", &base)] {
            for e in rows {
                w.write_record([
                    label.to_string(),
                    e.tau_u_star.to_string(),
                    e.tau_v_star.to_string(),
                    e.counterfactual.to_string(),
                    e.observed.to_string(),
                    e.gap.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    let report = DscReport {
        config: cfg,
        panel: PanelSummary::of(&panel),
        matched: DscFitReport { fit, estimates: matched },
        baseline: DscFitReport { fit: baseline, estimates: base },
        weight_spread: spread,
        warnings,
    };
    emit_json(&report, a.out.as_deref())
}

/// A bundled scenario by name, or a scenario file.
pub fn resolve_scenario(name_or_path: &str) -> Result<DgpSpec> {
    if bundled_names().contains(&name_or_path) {
        return bundled(name_or_path);
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        return DgpSpec::from_json(&text);
    }
    Err(Error::Validation(format!(
        "`{name_or_path}` is neither a file nor a bundled scenario ({})",
        bundled_names().join(", ")
    )))
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut spec = resolve_scenario(&a.scenario)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let est = match &a.estimator {
        Some(text) => serde_json::from_str::<Estimator>(text)
            .map_err(|e| Error::Validation(format!("cannot parse estimator: {e}")))?,
        None => spec
            .estimator
            .clone()
            .ok_or_else(|| Error::Validation(format!("scenario `{}` has no estimator; pass --estimator", spec.name)))?,
    };
    let mut cfg = RunConfig::new("simulate");
    cfg.scenario = Some(a.scenario.clone());
    cfg.seed = Some(spec.seed);
    cfg.reps = Some(a.reps);
    let (tu, tv) = est.taus();
    cfg.tau_u = vec![tu];
    cfg.tau_v = vec![tv];
    cfg.out = Some(a.out.clone());

    log::info!("running {} replications of `{}`", a.reps, spec.name);
    let result = run_monte_carlo(&spec, &est, a.reps)?;
    result.write_csv(create(&a.out.with_extension("csv"))?)?;
    println!("{:<16} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10}", "scenario", "reps", "truth", "mean", "bias", "sd", "rmse");
    println!(
        "{:<16} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
        result.scenario, result.reps, result.truth, result.mean, result.bias, result.sd, result.rmse
    );
    emit_json(&SimulateReport { config: cfg, result }, Some(&a.out))
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut spec = resolve_scenario(&a.scenario)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let panel = generate_replication(&spec, a.rep)?;
    let mut w = create(&a.out)?;
    panel.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}
