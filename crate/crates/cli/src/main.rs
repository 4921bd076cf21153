mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use perceptfe::cohort::{build_cohorts, descriptive_stats, CohortLevels, CohortRules};
use perceptfe::estimators::{fit, Control, Estimator, ModelSpec, Outcome};
use perceptfe::ingest::{apply_validity_filters, load_stops_from_reader, State, StateConfig};
use perceptfe::linkage::DriverPanel;
use perceptfe::panel_io::{read_panels, write_panels, write_records_jsonl};
use perceptfe::pipeline::prepare_state;
use perceptfe::report::{plot_data_csv, plot_rows, run_battery, standard_battery, Report};
use perceptfe::sim::{generate_panel, Scenario, SimConfig};

use manifest::Run;

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "PERCEPTFE_THREADS";

#[derive(Parser)]
#[command(name = "perceptfe", version, about = "Within-person tests for race-perception effects in traffic stops")]
struct Cli {
    /// Directory for outputs and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and normalize raw state tables.
    Ingest(RawArgs),
    /// Link stops into driver panels and write the canonical panel file.
    Link(RawArgs),
    /// Print the nested cohort table.
    Describe(DescribeArgs),
    /// Fit one model.
    Fit(FitArgs),
    /// Generate a synthetic panel with known ground truth.
    Simulate(SimulateArgs),
    /// Cohort table plus the standard battery of fits.
    Report(DescribeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StateArg {
    Az,
    Co,
    Tx,
    All,
}

impl StateArg {
    fn states(self) -> Vec<State> {
        match self {
            StateArg::Az => vec![State::Az],
            StateArg::Co => vec![State::Co],
            StateArg::Tx => vec![State::Tx],
            StateArg::All => State::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutcomeArg {
    Search,
    Arrest,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Linear,
    Feglm,
    Clogit,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControlArg {
    None,
    Loctime,
    Officer,
    Duration,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Taste,
    Null,
    OfficerConfound,
}

#[derive(Args)]
struct RawArgs {
    #[arg(long, value_enum, default_value = "all")]
    state: StateArg,
    /// Directory holding the raw tables `az.csv`, `co.csv`, `tx.csv`.
    #[arg(long)]
    data_dir: PathBuf,
    /// Directory holding the state configs `az.toml`, `co.toml`, `tx.toml`.
    #[arg(long, default_value = "configs")]
    config_dir: PathBuf,
}

#[derive(Args)]
struct PanelSource {
    #[arg(long, value_enum, default_value = "all")]
    state: StateArg,
    /// Canonical panel file, as written by `link` or `simulate`.
    #[arg(long, conflicts_with = "data_dir", required_unless_present = "data_dir")]
    panels: Option<PathBuf>,
    /// Raw tables to ingest and link first.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "configs")]
    config_dir: PathBuf,
    /// Keep drivers perceived as both races plus others, restricted to
    /// their white and Hispanic stops.
    #[arg(long)]
    superset: bool,
    /// Drop unknown-race stops instead of excluding the driver.
    #[arg(long)]
    keep_unknown: bool,
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    source: PanelSource,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    source: PanelSource,
    #[arg(long, value_enum, default_value = "search")]
    outcome: OutcomeArg,
    #[arg(long, value_enum, default_value = "linear")]
    estimator: EstimatorArg,
    /// Control set; repeat to combine.
    #[arg(long, value_enum)]
    controls: Vec<ControlArg>,
    /// Also write plot_data.csv.
    #[arg(long)]
    plot_data: bool,
    /// Fit on every linked stop instead of the analysis cohort.
    #[arg(long)]
    all_drivers: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config (TOML). Without it a preset is used.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "taste")]
    preset: PresetArg,
    #[arg(long)]
    n_drivers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// An error the user can fix by changing flags.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            let _ = Cli::command().error(clap::error::ErrorKind::ArgumentConflict, e.to_string()).print();
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")
}

fn run(cli: Cli) -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut run = Run::new(&cli.out_dir, args)?;
    match cli.command {
        Command::Ingest(a) => ingest(&mut run, &a)?,
        Command::Link(a) => link(&mut run, &a)?,
        Command::Describe(a) => describe(&mut run, &a.source)?,
        Command::Fit(a) => fit_one(&mut run, &a)?,
        Command::Simulate(a) => simulate(&mut run, &a)?,
        Command::Report(a) => report(&mut run, &a.source)?,
    }
    run.finish()
}

fn state_file(dir: &Path, state: State, ext: &str) -> PathBuf {
    dir.join(format!("{}.{ext}", state.code().to_lowercase()))
}

fn load_config(run: &mut Run, dir: &Path, state: State) -> Result<StateConfig> {
    let path = state_file(dir, state, "toml");
    let text = run.read_config(&path)?;
    let cfg = StateConfig::from_toml_str(&text).with_context(|| format!("in {}", path.display()))?;
    if cfg.state != state {
        bail!("{} configures {} rather than {}", path.display(), cfg.state.code(), state.code());
    }
    Ok(cfg)
}

fn ingest(run: &mut Run, a: &RawArgs) -> Result<()> {
    let mut summary = serde_json::Map::new();
    for state in a.state.states() {
        let cfg = load_config(run, &a.config_dir, state)?;
        let path = state_file(&a.data_dir, state, "csv");
        let bytes = run.read_input(&path)?;
        let loaded = load_stops_from_reader(bytes.as_slice(), &cfg).with_context(|| format!("in {}", path.display()))?;
        let (records, filters) = apply_validity_filters(loaded.records.clone());
        let code = state.code().to_lowercase();
        let mut buf = Vec::new();
        write_records_jsonl(&mut buf, &records)?;
        run.write(&format!("records_{code}.jsonl"), &buf)?;
        let mut rej = Vec::new();
        loaded.write_rejections(&mut rej)?;
        run.write(&format!("rejections_{code}.jsonl"), &rej)?;
        println!(
            "{}: {} rows, {} rejected, {} filtered, {} records",
            state.code(),
            loaded.n_rows,
            loaded.rejections.len(),
            filters.n_input - filters.n_output,
            records.len()
        );
        summary.insert(
            state.code().into(),
            serde_json::json!({ "n_rows": loaded.n_rows, "n_rejected": loaded.rejections.len(), "filters": filters }),
        );
    }
    run.write("ingest_summary.json", &pretty_json(&summary)?)?;
    Ok(())
}

fn prepare_raw(run: &mut Run, data_dir: &Path, config_dir: &Path, states: &[State]) -> Result<(Vec<DriverPanel>, serde_json::Value)> {
    let mut panels = Vec::new();
    let mut summary = serde_json::Map::new();
    for &state in states {
        let cfg = load_config(run, config_dir, state)?;
        let path = state_file(data_dir, state, "csv");
        run.read_input(&path)?;
        let prepared = prepare_state(&path, &cfg).with_context(|| format!("in {}", path.display()))?;
        summary.insert(state.code().into(), serde_json::to_value(&prepared.summary)?);
        panels.extend(prepared.panels);
    }
    Ok((panels, summary.into()))
}

fn link(run: &mut Run, a: &RawArgs) -> Result<()> {
    let (panels, summary) = prepare_raw(run, &a.data_dir, &a.config_dir, &a.state.states())?;
    let mut buf = Vec::new();
    write_panels(&mut buf, &panels)?;
    run.write("panels.csv", &buf)?;
    run.write("link_summary.json", &pretty_json(&summary)?)?;
    println!("{} drivers, {} stops", panels.len(), panels.iter().map(DriverPanel::n_stops).sum::<usize>());
    Ok(())
}

fn load_panels(run: &mut Run, src: &PanelSource) -> Result<Vec<DriverPanel>> {
    let states = src.state.states();
    let panels = match (&src.panels, &src.data_dir) {
        (Some(path), _) => {
            let bytes = run.read_input(path)?;
            read_panels(bytes.as_slice()).with_context(|| format!("in {}", path.display()))?
        }
        (None, Some(dir)) => prepare_raw(run, dir, &src.config_dir, &states)?.0,
        (None, None) => return Err(usage("one of --panels or --data-dir is required")),
    };
    Ok(panels.into_iter().filter(|p| states.contains(&p.state)).collect())
}

fn cohort_rules(src: &PanelSource) -> CohortRules {
    CohortRules { exact_set: !src.superset, unknown_excludes: !src.keep_unknown, ..CohortRules::default() }
}

fn cohorts(run: &mut Run, src: &PanelSource) -> Result<CohortLevels> {
    let panels = load_panels(run, src)?;
    if panels.is_empty() {
        bail!("no panels for the selected states");
    }
    Ok(build_cohorts(panels, cohort_rules(src)))
}

fn pretty_json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn describe(run: &mut Run, src: &PanelSource) -> Result<()> {
    let levels = cohorts(run, src)?;
    let stats = descriptive_stats(&levels);
    let table = stats.render_table();
    run.write("cohort_table.txt", table.as_bytes())?;
    run.write("cohort_stats.json", &pretty_json(&stats)?)?;
    print!("{table}");
    Ok(())
}

fn model_spec(a: &FitArgs) -> Result<ModelSpec> {
    if a.controls.contains(&ControlArg::None) && a.controls.len() > 1 {
        return Err(usage("--controls none cannot be combined with other control sets"));
    }
    let controls: Vec<Control> = a
        .controls
        .iter()
        .filter_map(|c| match c {
            ControlArg::None => None,
            ControlArg::Loctime => Some(Control::LocationTime),
            ControlArg::Officer => Some(Control::Officer),
            ControlArg::Duration => Some(Control::Duration),
        })
        .collect();
    let states = a.source.state.states();
    if controls.contains(&Control::Duration) && states != [State::Az] {
        return Err(usage("--controls duration requires --state az"));
    }
    let outcome = match a.outcome {
        OutcomeArg::Search => Outcome::Searched,
        OutcomeArg::Arrest => {
            if states == [State::Tx] {
                return Err(usage("Texas does not record arrests"));
            }
            Outcome::Arrested
        }
    };
    let estimator = match a.estimator {
        EstimatorArg::Linear => Estimator::LinearFe,
        EstimatorArg::Feglm => Estimator::FeglmLogit,
        EstimatorArg::Clogit => Estimator::ConditionalLogit,
    };
    Ok(ModelSpec::new(estimator, outcome, controls))
}

fn fit_one(run: &mut Run, a: &FitArgs) -> Result<()> {
    let spec = model_spec(a)?;
    let mut panels = load_panels(run, &a.source)?;
    if spec.outcome == Outcome::Arrested {
        panels.retain(|p| p.state.records_arrests());
    }
    let sample = if a.all_drivers { panels } else { build_cohorts(panels, cohort_rules(&a.source)).analysis };
    let mut result = fit(&sample, &spec)?;
    let states: Vec<&str> = a.source.state.states().iter().map(|s| s.code()).collect();
    result.label = format!("{} | {}", spec.label(), states.join("+"));

    let text = Report { cohort: None, fits: vec![result.clone()], failures: vec![] }.render();
    run.write("fit.json", &pretty_json(&result)?)?;
    run.write("fit.txt", text.as_bytes())?;
    if a.plot_data {
        run.write("plot_data.csv", plot_data_csv(&plot_rows(std::slice::from_ref(&result)))?.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn simulate(run: &mut Run, a: &SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = run.read_config(path)?;
            SimConfig::from_toml_str(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => match a.preset {
            PresetArg::Taste => SimConfig::taste_preset(10_000, 0),
            PresetArg::Null => SimConfig::null_preset(10_000, 0),
            PresetArg::OfficerConfound => SimConfig::officer_confound_preset(10_000, 0),
        },
    };
    if let Some(n) = a.n_drivers {
        cfg.n_drivers = n;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    run.record_seed(cfg.seed);
    run.record_config_hash("simulation", cfg.hash());
    let (panels, truth) = generate_panel(&cfg)?;
    let mut buf = Vec::new();
    write_panels(&mut buf, &panels)?;
    run.write("panels.csv", &buf)?;
    run.write("ground_truth.json", &pretty_json(&truth)?)?;
    run.write("sim_config.toml", cfg.to_toml_string().as_bytes())?;
    let scenario: Scenario = cfg.scenario;
    println!(
        "{scenario}: {} drivers, {} stops, delta = {:.5} ({:.3} pp)",
        truth.n_drivers,
        truth.n_stops,
        truth.delta,
        100.0 * truth.delta
    );
    Ok(())
}

fn report(run: &mut Run, src: &PanelSource) -> Result<()> {
    let levels = cohorts(run, src)?;
    let stats = descriptive_stats(&levels);
    let battery = standard_battery(&stats.states);
    let report = run_battery(&levels.analysis, &battery, Some(stats));
    let text = report.render();
    run.write("report.txt", text.as_bytes())?;
    run.write("report.json", &pretty_json(&report)?)?;
    run.write("plot_data.csv", plot_data_csv(&plot_rows(&report.fits))?.as_bytes())?;
    print!("{text}");
    Ok(())
}
