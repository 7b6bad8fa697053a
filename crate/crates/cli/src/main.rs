use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use lmdrop::hmm::{posteriors, LatentPosterior};
use lmdrop::inference::{
    bootstrap_se, decode_panel, impute_missing, info_matrix_se, select_k, state_frequencies,
    BootstrapOptions, ImputeMode, InfoOptions, StdErrReport,
};
use lmdrop::panel::{format_f64, read_long_csv, write_long_csv};
use lmdrop::simulate::{default_scenario, generate_panel, run_study};
use lmdrop::{fit_hmm, FitOptions, FitResult, HmmParams, PanelDataset, Schema};

#[derive(Parser)]
#[command(name = "lmdrop", version, about = "Hidden Markov models for longitudinal data with dropout")]
struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model with k substantive states.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        em: EmArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fit every k in a range and tabulate BIC and AIC.
    Select {
        #[command(flatten)]
        data: DataArgs,
        /// Inclusive range such as `1..5`, or a comma-separated list.
        #[arg(long)]
        k_range: String,
        #[command(flatten)]
        em: EmArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Local and global state decoding.
    Decode {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        em: EmArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fill intermittent missing responses.
    Impute {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "conditional")]
        mode: ModeArg,
        #[command(flatten)]
        em: EmArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Standard errors by bootstrap or observed information.
    Bootstrap {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value = "bootstrap")]
        se_method: SeArg,
        /// Bootstrap replicates.
        #[arg(long, default_value_t = 300)]
        reps: usize,
        #[command(flatten)]
        em: EmArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Generate panels from the default scenario and summarize recovery.
    Simulate {
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Intermittent missingness and dropout probability.
        #[arg(long, default_value_t = 0.1)]
        p: f64,
        /// Replicates.
        #[arg(long, default_value_t = 250)]
        reps: usize,
        /// Only write the panels.
        #[arg(long)]
        no_study: bool,
        #[command(flatten)]
        em: EmArgs,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Long-format CSV panel.
    #[arg(long)]
    input: PathBuf,
    /// Column mapping, e.g. `id=id,time=t,drop=d,y=y1,y=y2,x=age`.
    #[arg(long)]
    schema: String,
}

#[derive(Args)]
struct ModelArgs {
    /// Fitted parameters (params.json); otherwise a model is fitted with --k.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct EmArgs {
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    /// Random starts; defaults to 5·k.
    #[arg(long)]
    starts: Option<usize>,
    /// Diagonal weight of the deterministic transition start.
    #[arg(long, default_value_t = 9.0)]
    h: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Format of tabular outputs.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeArg {
    Bootstrap,
    Info,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Conditional,
    Unconditional,
}

enum CliError {
    Input(String),
    Estimation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Estimation(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Estimation(m) => f.write_str(m),
        }
    }
}

impl From<lmdrop::Error> for CliError {
    fn from(e: lmdrop::Error) -> Self {
        let msg = format!("{}: {e}", e.kind());
        if e.is_input_error() {
            CliError::Input(msg)
        } else {
            CliError::Estimation(msg)
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Input(format!("IoError: {}: {e}", path.display()))
}

enum Cell {
    Int(usize),
    Num(f64),
    Str(String),
}

impl Cell {
    fn text(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Num(v) => format_f64(*v),
            Cell::Str(s) => s.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => json!(v),
            Cell::Num(v) if v.is_finite() => json!(v),
            Cell::Num(_) => Value::Null,
            Cell::Str(s) => json!(s),
        }
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(header: Vec<String>) -> Self {
        Table { header, rows: Vec::new() }
    }

    fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::text)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 cells")
    }

    fn json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    let obj = self.header.iter().cloned().zip(row.iter().map(Cell::json)).collect();
                    Value::Object(obj)
                })
                .collect(),
        )
    }
}

struct Output {
    dir: PathBuf,
    format: Format,
}

impl Output {
    fn new(args: &OutArgs) -> CliResult<Self> {
        fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
        Ok(Output { dir: args.out.clone(), format: args.format })
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| io_error(&path, e))
    }

    fn json(&self, name: &str, value: &Value) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).expect("serializable value");
        s.push('\n');
        self.write(name, &s)
    }

    /// Writes `stem.csv` or `stem.json` depending on the configured format.
    fn table(&self, stem: &str, table: &Table) -> CliResult<()> {
        match self.format {
            Format::Csv => self.write(&format!("{stem}.csv"), &table.csv()),
            Format::Json => self.json(&format!("{stem}.json"), &table.json()),
        }
    }
}

fn load_panel(args: &DataArgs) -> CliResult<PanelDataset> {
    let schema = Schema::parse(&args.schema)?;
    read_long_csv(&args.input, &schema).map_err(|e| {
        let msg = format!("{}: {}: {e}", e.kind(), args.input.display());
        if e.is_input_error() {
            CliError::Input(msg)
        } else {
            CliError::Estimation(msg)
        }
    })
}

fn fit_options(em: &EmArgs, data: &PanelDataset) -> CliResult<FitOptions> {
    if !(em.tol > 0.0) {
        return Err(CliError::Input("InvalidInput: --tol must be positive".into()));
    }
    if em.max_iter < 1 {
        return Err(CliError::Input("InvalidInput: --max-iter must be at least 1".into()));
    }
    Ok(FitOptions {
        tol: em.tol,
        max_iter: em.max_iter,
        h: em.h,
        n_random_starts: em.starts,
        seed: em.seed,
        covariates: data.p > 0,
        ..Default::default()
    })
}

fn check_k(k: usize) -> CliResult<()> {
    if k == 0 {
        return Err(CliError::Input("InvalidInput: k must be at least 1".into()));
    }
    Ok(())
}

fn fit(data: &PanelDataset, k: usize, em: &EmArgs) -> CliResult<FitResult> {
    check_k(k)?;
    let opts = fit_options(em, data)?;
    log::info!("fitting k = {k}");
    Ok(fit_hmm(data, k, &opts)?)
}

fn params_json(params: &HmmParams) -> Value {
    serde_json::to_value(params).expect("serializable parameters")
}

fn trace_table(trace: &[f64]) -> Table {
    let mut t = Table::new(vec!["iteration".into(), "loglik".into()]);
    t.rows = trace.iter().enumerate().map(|(i, &l)| vec![Cell::Int(i), Cell::Num(l)]).collect();
    t
}

fn posterior_table(data: &PanelDataset, posterior: &LatentPosterior, k: usize) -> Table {
    let mut header = vec!["id".to_string(), "t".to_string()];
    header.extend((1..=k + 1).map(|u| format!("z{u}")));
    let mut table = Table::new(header);
    for (rec, sp) in data.subjects.iter().zip(&posterior.subjects) {
        for (t, z) in sp.marginals.iter().enumerate() {
            let mut row = vec![Cell::Str(rec.id.clone()), Cell::Int(t + 1)];
            row.extend(z.iter().map(|&v| Cell::Num(v)));
            table.rows.push(row);
        }
    }
    table
}

fn fit_summary(data: &PanelDataset, fit: &FitResult) -> Value {
    json!({
        "k": fit.params.k,
        "n": data.n(),
        "loglik": fit.loglik,
        "n_par": fit.n_par,
        "aic": fit.aic,
        "bic": fit.bic,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "best_start": fit.best_start,
        "n_starts": fit.n_starts,
        "failed_starts": fit.failed_starts,
        "newton_failures": fit.newton_failures,
        "separation": fit.separation,
    })
}

fn not_converged(what: &str) -> CliError {
    CliError::Estimation(format!("FitFailed: {what} did not converge within --max-iter"))
}

fn cmd_fit(data: &DataArgs, k: usize, em: &EmArgs, out: &OutArgs) -> CliResult<()> {
    let panel = load_panel(data)?;
    let fit = fit(&panel, k, em)?;
    let out = Output::new(out)?;
    out.json("params.json", &params_json(&fit.params))?;
    out.table("loglik_trace", &trace_table(&fit.trace))?;
    out.table("posteriors", &posterior_table(&panel, &fit.posterior, k))?;
    out.json("fit_summary.json", &fit_summary(&panel, &fit))?;
    if fit.converged {
        Ok(())
    } else {
        Err(not_converged("EM"))
    }
}

fn parse_k_range(s: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Input(format!("InvalidInput: cannot parse k range `{s}`"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let ks: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        (a..=b).collect()
    } else {
        s.split(',').map(num).collect::<CliResult<_>>()?
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(bad());
    }
    Ok(ks)
}

fn cmd_select(data: &DataArgs, k_range: &str, em: &EmArgs, out: &OutArgs) -> CliResult<()> {
    let ks = parse_k_range(k_range)?;
    let panel = load_panel(data)?;
    let opts = fit_options(em, &panel)?;
    let report = select_k(&panel, &ks, &opts)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let header = ["k", "loglik", "n_par", "bic", "aic", "bic_diff", "converged", "best_bic", "best_aic"];
    let mut table = Table::new(header.iter().map(|s| s.to_string()).collect());
    let mark = |hit: bool| Cell::Str(if hit { "*" } else { "" }.into());
    for row in &report.rows {
        table.rows.push(vec![
            Cell::Int(row.k),
            Cell::Num(row.loglik),
            Cell::Int(row.n_par),
            Cell::Num(row.bic),
            Cell::Num(row.aic),
            Cell::Num(row.bic_diff.unwrap_or(f64::NAN)),
            Cell::Str(row.converged.to_string()),
            mark(row.error.is_none() && row.k == report.best_bic),
            mark(row.error.is_none() && row.k == report.best_aic),
        ]);
    }
    let out = Output::new(out)?;
    out.table("selection", &table)?;
    if let Some(row) = report.rows.iter().find(|r| r.error.is_some()) {
        return Err(CliError::Estimation(format!(
            "FitFailed: k = {}: {}",
            row.k,
            row.error.as_deref().unwrap_or_default()
        )));
    }
    if report.rows.iter().any(|r| !r.converged) {
        return Err(not_converged("EM for some k"));
    }
    Ok(())
}

/// Parameters and posteriors from --params, or from a fresh fit with --k.
fn model(panel: &PanelDataset, model: &ModelArgs, em: &EmArgs) -> CliResult<(HmmParams, LatentPosterior)> {
    match (&model.params, model.k) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let params: HmmParams = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("ParseError: {}: {e}", path.display())))?;
            params.check_panel(panel)?;
            let posterior = posteriors(panel, &params)?;
            Ok((params, posterior))
        }
        (None, Some(k)) => {
            let fit = fit(panel, k, em)?;
            if !fit.converged {
                return Err(not_converged("EM"));
            }
            Ok((fit.params, fit.posterior))
        }
        (None, None) => Err(CliError::Input("InvalidInput: either --params or --k is required".into())),
    }
}

fn state_table(data: &PanelDataset, paths: &[Vec<usize>]) -> Table {
    let mut table = Table::new(vec!["id".into(), "t".into(), "state".into()]);
    for (rec, path) in data.subjects.iter().zip(paths) {
        for (t, &u) in path.iter().enumerate() {
            table.rows.push(vec![Cell::Str(rec.id.clone()), Cell::Int(t + 1), Cell::Int(u + 1)]);
        }
    }
    table
}

fn cmd_decode(data: &DataArgs, m: &ModelArgs, em: &EmArgs, out: &OutArgs) -> CliResult<()> {
    let panel = load_panel(data)?;
    let (params, _) = model(&panel, m, em)?;
    let decoded = decode_panel(&panel, &params)?;
    let n_states = params.k + 1;
    let (at_risk, freq) = state_frequencies(&decoded.global, n_states);
    let mut header = vec!["t".to_string(), "at_risk".to_string()];
    header.extend((1..=n_states).map(|u| format!("state{u}")));
    let mut freq_table = Table::new(header);
    for (t, (n, f)) in at_risk.iter().zip(&freq).enumerate() {
        let mut row = vec![Cell::Int(t + 1), Cell::Int(*n)];
        row.extend(f.iter().map(|&v| Cell::Num(v)));
        freq_table.rows.push(row);
    }
    let out = Output::new(out)?;
    out.table("states_local", &state_table(&panel, &decoded.local))?;
    out.table("states_global", &state_table(&panel, &decoded.global))?;
    out.table("state_freq", &freq_table)
}

fn cmd_impute(data: &DataArgs, m: &ModelArgs, mode: ModeArg, em: &EmArgs, out: &OutArgs) -> CliResult<()> {
    let panel = load_panel(data)?;
    let (params, posterior) = model(&panel, m, em)?;
    let mode = match mode {
        ModeArg::Conditional => ImputeMode::Conditional,
        ModeArg::Unconditional => ImputeMode::Unconditional,
    };
    let filled = impute_missing(&panel, &params, &posterior, mode)?;
    let out = Output::new(out)?;
    let path = out.dir.join("imputed.csv");
    let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
    write_long_csv(&filled, std::io::BufWriter::new(file))?;
    Ok(())
}

fn se_table(report: &StdErrReport) -> Table {
    let header = ["parameter", "estimate", "se", "boundary"];
    let mut table = Table::new(header.iter().map(|s| s.to_string()).collect());
    for i in 0..report.names.len() {
        table.rows.push(vec![
            Cell::Str(report.names[i].clone()),
            Cell::Num(report.estimates[i]),
            Cell::Num(report.se[i]),
            Cell::Str(report.boundary[i].to_string()),
        ]);
    }
    table
}

fn cmd_bootstrap(
    data: &DataArgs,
    k: usize,
    method: SeArg,
    reps: usize,
    em: &EmArgs,
    out: &OutArgs,
) -> CliResult<()> {
    let panel = load_panel(data)?;
    let fit = fit(&panel, k, em)?;
    if !fit.converged {
        return Err(not_converged("EM"));
    }
    let report = match method {
        SeArg::Bootstrap => {
            let opts = BootstrapOptions { reps, seed: em.seed, tol: em.tol, max_iter: em.max_iter };
            bootstrap_se(&panel, &fit, &opts)?
        }
        SeArg::Info => info_matrix_se(&panel, &fit, &InfoOptions::default())?,
    };
    if report.non_pd {
        log::warn!("observed information was not positive definite; eigenvalues were floored");
    }
    if report.n_failed > 0 {
        log::warn!("{} of {} bootstrap replicates were discarded", report.n_failed, report.replicates);
    }
    let out = Output::new(out)?;
    out.json("params.json", &params_json(&fit.params))?;
    out.table("se", &se_table(&report))
}

fn cmd_simulate(k: usize, n: usize, p: f64, reps: usize, no_study: bool, em: &EmArgs, out: &OutArgs) -> CliResult<()> {
    let mut spec = default_scenario(k, n, p)?;
    spec.n_reps = reps;
    spec.seed = em.seed;
    spec.validate()?;
    let out = Output::new(out)?;
    let width = reps.to_string().len().max(3);
    for rep in 0..reps {
        let panel = generate_panel(&spec, rep as u64)?;
        let path = out.dir.join(format!("panel_{:0width$}.csv", rep + 1));
        let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
        write_long_csv(&panel, std::io::BufWriter::new(file))?;
    }
    out.json("truth.json", &params_json(&spec.true_params))?;
    if no_study {
        return Ok(());
    }
    let opts = FitOptions {
        tol: em.tol,
        max_iter: em.max_iter,
        h: em.h,
        n_random_starts: em.starts,
        seed: em.seed,
        ..Default::default()
    };
    let report = run_study(&spec, &opts)?;
    match out.format {
        Format::Csv => {
            out.write("study_summary.csv", &report.summary_csv())?;
            out.write("study_params.csv", &report.params_csv())?;
            out.write("study_transition.csv", &report.transition_csv())?;
        }
        Format::Json => {
            out.json("study.json", &serde_json::to_value(&report).expect("serializable report"))?;
        }
    }
    if report.n_failed == report.reps {
        return Err(CliError::Estimation("FitFailed: every replicate failed".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .map_err(|e| CliError::Input(format!("InvalidInput: --workers: {e}")))?;
    }
    match &cli.command {
        Command::Fit { data, k, em, out } => cmd_fit(data, *k, em, out),
        Command::Select { data, k_range, em, out } => cmd_select(data, k_range, em, out),
        Command::Decode { data, model, em, out } => cmd_decode(data, model, em, out),
        Command::Impute { data, model, mode, em, out } => cmd_impute(data, model, *mode, em, out),
        Command::Bootstrap { data, k, se_method, reps, em, out } => {
            cmd_bootstrap(data, *k, *se_method, *reps, em, out)
        }
        Command::Simulate { k, n, p, reps, no_study, em, out } => {
            cmd_simulate(*k, *n, *p, *reps, *no_study, em, out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
