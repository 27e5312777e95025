//! Command implementations behind the `carate` binary: CSV dataset
//! ingestion, configuration resolution, estimator selection, and report
//! rendering. The binary in `main.rs` is a thin argument-parsing shell.

use carate_core::estimators::{
    estimate, AdjustedEstimate, DfMode, EstimatorSpec, MissingnessChoice, RegressionKind, Scope,
};
use carate_core::missing::ImputePolicy;
use carate_core::model::{Mask, TrialData};
use carate_core::randomize::{self, RandomizationScheme};
use carate_core::sim::{
    run_monte_carlo, DgpSpec, OutcomeModel, SimulationReport, SnrDefinition, Study,
};
use carate_core::Matrix;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Errors sorted by exit code: configuration (1), data (2), estimation (3).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Estimation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Estimation(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Estimation(m) => write!(f, "estimation error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(CliError::Config(format!("unknown format '{other}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion.

/// Column mapping for [`load_csv`].
#[derive(Clone, Debug)]
pub struct ColumnMap {
    pub outcome: String,
    pub treatment: String,
    pub stratum: String,
    pub covariates: Vec<String>,
}

#[derive(Debug)]
pub struct LoadedTrial {
    pub data: TrialData,
    pub warnings: Vec<String>,
}

fn is_missing_token(cell: &str) -> Option<&'static str> {
    match cell.trim() {
        "" => Some("empty"),
        "NA" => Some("NA"),
        _ => None,
    }
}

/// Read a trial dataset from a UTF-8 CSV file with a header row. Missing
/// covariate cells are encoded as an empty string or the literal `NA`;
/// outcomes and treatments must be fully observed.
pub fn load_csv(path: &Path, map: &ColumnMap, target_pi: f64) -> Result<LoadedTrial, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(format!("cannot read header: {e}")))?
        .clone();

    let find = |name: &str| -> Result<usize, CliError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("unknown column '{name}'")))
    };
    let outcome_ix = find(&map.outcome)?;
    let treatment_ix = find(&map.treatment)?;
    let stratum_ix = find(&map.stratum)?;
    let covariate_ix: Vec<usize> = map
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<_, _>>()?;

    let mut outcomes = Vec::new();
    let mut treatment = Vec::new();
    let mut strata = Vec::new();
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); covariate_ix.len()];
    let mut missing: Vec<Vec<bool>> = vec![Vec::new(); covariate_ix.len()];
    let mut tokens_seen: Vec<[bool; 2]> = vec![[false, false]; covariate_ix.len()];

    for (row_ix, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Data(format!("row {}: {e}", row_ix + 1)))?;
        let cell = |ix: usize| record.get(ix).unwrap_or("").trim();

        let y = cell(outcome_ix);
        if is_missing_token(y).is_some() {
            return Err(CliError::Data(format!(
                "row {}: outcome is missing; rows with missing outcomes are rejected, not dropped",
                row_ix + 1
            )));
        }
        outcomes.push(y.parse::<f64>().map_err(|_| {
            CliError::Data(format!("row {}, column '{}': cannot parse '{}'", row_ix + 1, map.outcome, y))
        })?);

        let a = cell(treatment_ix);
        if is_missing_token(a).is_some() {
            return Err(CliError::Data(format!(
                "row {}: treatment is missing; rows with missing treatment are rejected",
                row_ix + 1
            )));
        }
        match a.parse::<i64>() {
            Ok(0) => treatment.push(0u8),
            Ok(1) => treatment.push(1u8),
            _ => {
                return Err(CliError::Data(format!(
                    "row {}, column '{}': treatment '{}' is not 0 or 1",
                    row_ix + 1,
                    map.treatment,
                    a
                )))
            }
        }

        strata.push(cell(stratum_ix).to_string());

        for (j, &ix) in covariate_ix.iter().enumerate() {
            let v = cell(ix);
            if let Some(token) = is_missing_token(v) {
                tokens_seen[j][usize::from(token == "NA")] = true;
                cells[j].push(0.0);
                missing[j].push(true);
            } else {
                let parsed = v.parse::<f64>().map_err(|_| {
                    CliError::Data(format!(
                        "row {}, column '{}': cannot parse '{}'",
                        row_ix + 1,
                        map.covariates[j],
                        v
                    ))
                })?;
                cells[j].push(parsed);
                missing[j].push(false);
            }
        }
    }

    let n = outcomes.len();
    let mut warnings = Vec::new();
    for (j, seen) in tokens_seen.iter().enumerate() {
        if seen[0] && seen[1] {
            warnings.push(format!(
                "column '{}' mixes empty and NA missing tokens",
                map.covariates[j]
            ));
        }
    }

    let covariates = Matrix::from_columns(&cells);
    let mask = Mask::from_fn(n, covariate_ix.len(), |r, c| missing[c][r]);
    let data = TrialData::new(outcomes, treatment, &strata, covariates, mask, target_pi)
        .map_err(|errs| {
            CliError::Data(
                errs.iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            )
        })?;
    warnings.extend(data.advisories().iter().cloned());
    Ok(LoadedTrial { data, warnings })
}

/// Write a trial dataset as CSV with masked cells encoded as `NA`. Numbers
/// use the shortest representation that round-trips exactly.
pub fn trial_to_csv(data: &TrialData) -> String {
    let p = data.covariate_count();
    let mut out = String::from("y,a,stratum");
    for j in 0..p {
        let _ = write!(out, ",x{}", j + 1);
    }
    out.push('\n');
    for i in 0..data.n() {
        let _ = write!(
            out,
            "{},{},{}",
            data.outcome(i),
            data.treatment()[i],
            data.stratum_label(data.stratum(i))
        );
        for j in 0..p {
            if data.is_missing(i, j) {
                out.push_str(",NA");
            } else {
                let _ = write!(out, ",{}", data.covariate(i, j));
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Analyze.

#[derive(Clone, Debug)]
pub struct AnalyzeConfig {
    pub data_path: PathBuf,
    pub columns: ColumnMap,
    pub methods: Vec<RegressionKind>,
    pub missing: Vec<MissingnessChoice>,
    pub scopes: Vec<Scope>,
    pub pi: f64,
    pub level: f64,
    pub df_mode: DfMode,
    pub impute: ImputePolicy,
    pub format: OutputFormat,
}

pub fn parse_regressions(s: &str, pi: f64) -> Result<Vec<RegressionKind>, CliError> {
    s.split(',')
        .map(|tok| match tok.trim() {
            "fisher" => Ok(RegressionKind::Fisher),
            "lin" => Ok(RegressionKind::Lin),
            "tom" => Ok(RegressionKind::Tom),
            "auto" => Ok(if (pi - 0.5).abs() < 1e-12 {
                RegressionKind::Fisher
            } else {
                RegressionKind::Tom
            }),
            other => Err(CliError::Config(format!("unknown method '{other}'"))),
        })
        .collect()
}

pub fn parse_missing(s: &str) -> Result<Vec<MissingnessChoice>, CliError> {
    s.split(',')
        .map(|tok| match tok.trim() {
            "cc" => Ok(MissingnessChoice::Cc),
            "ccov" => Ok(MissingnessChoice::Ccov),
            "imp" => Ok(MissingnessChoice::Imp),
            "mim" => Ok(MissingnessChoice::Mim),
            "none" => Ok(MissingnessChoice::Benchmark),
            other => Err(CliError::Config(format!(
                "unknown missingness method '{other}'"
            ))),
        })
        .collect()
}

pub fn parse_scopes(s: &str) -> Result<Vec<Scope>, CliError> {
    s.split(',')
        .map(|tok| match tok.trim() {
            "common" => Ok(Scope::Common),
            "ss" => Ok(Scope::StratumSpecific),
            other => Err(CliError::Config(format!("unknown scope '{other}'"))),
        })
        .collect()
}

pub fn parse_df_mode(s: &str) -> Result<DfMode, CliError> {
    match s {
        "auto" => Ok(DfMode::Auto),
        "on" => Ok(DfMode::On),
        "off" => Ok(DfMode::Off),
        other => Err(CliError::Config(format!("unknown df-adjust mode '{other}'"))),
    }
}

pub fn parse_impute(s: &str) -> Result<ImputePolicy, CliError> {
    if s == "mean" {
        return Ok(ImputePolicy::ObservedMean);
    }
    if s == "zero" {
        return Ok(ImputePolicy::Constant(0.0));
    }
    if let Some(v) = s.strip_prefix("const:") {
        return v
            .parse::<f64>()
            .map(ImputePolicy::Constant)
            .map_err(|_| CliError::Config(format!("bad imputation constant '{v}'")));
    }
    Err(CliError::Config(format!(
        "unknown imputation policy '{s}' (mean | zero | const:<value>)"
    )))
}

/// Run every requested estimator on the dataset and render one row each.
pub fn run_analyze(config: &AnalyzeConfig) -> Result<String, CliError> {
    let loaded = load_csv(&config.data_path, &config.columns, config.pi)?;
    let mut estimates = Vec::new();
    for &missing in &config.missing {
        for &scope in &config.scopes {
            for &method in &config.methods {
                let mut spec = EstimatorSpec::standard(method, missing, scope, config.pi);
                spec.level = config.level;
                spec.df_mode = config.df_mode;
                if missing != MissingnessChoice::Mim {
                    spec.impute = config.impute;
                }
                if spec.validate().is_err() {
                    continue; // skip invalid cross-product cells (e.g. cc x ss)
                }
                let est = estimate(&loaded.data, &spec)
                    .map_err(|e| CliError::Estimation(format!("{}: {e}", spec.label())))?;
                estimates.push(est);
            }
        }
    }
    if estimates.is_empty() {
        return Err(CliError::Config(
            "estimator selection produced no valid combinations".into(),
        ));
    }
    Ok(match config.format {
        OutputFormat::Csv => render_estimates_csv(&estimates, &loaded.warnings),
        OutputFormat::Json => render_estimates_json(&estimates, &loaded.warnings)?,
    })
}

pub fn render_estimates_csv(estimates: &[AdjustedEstimate], data_warnings: &[String]) -> String {
    let mut out = String::new();
    for w in data_warnings {
        let _ = writeln!(out, "# warning: {w}");
    }
    out.push_str("estimator,tau_hat,se,ci_lower,ci_upper,sigma2_hat,df_adjusted,n,covariate_columns,warnings\n");
    for est in estimates {
        let warnings = est.diagnostics.warnings.join(" | ").replace(',', ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            est.spec.label(),
            est.tau_hat,
            est.se,
            est.ci.0,
            est.ci.1,
            est.sigma2_hat,
            est.diagnostics.df_adjusted,
            est.diagnostics.n,
            est.diagnostics.covariate_columns,
            warnings
        );
    }
    out
}

fn render_estimates_json(
    estimates: &[AdjustedEstimate],
    data_warnings: &[String],
) -> Result<String, CliError> {
    let value = serde_json::json!({
        "data_warnings": data_warnings,
        "estimates": estimates,
    });
    serde_json::to_string_pretty(&value).map_err(|e| CliError::Config(e.to_string()))
}

// ---------------------------------------------------------------------------
// Simulate.

#[derive(Clone, Debug)]
pub struct SimulateConfig {
    pub model: OutcomeModel,
    pub n: usize,
    pub pi: f64,
    pub scheme: RandomizationScheme,
    pub p_total: usize,
    pub replications: usize,
    pub seed: u64,
    pub threads: usize,
    pub level: f64,
    pub df_mode: DfMode,
    pub snr_definition: SnrDefinition,
}

pub fn parse_scheme(
    kind: &str,
    pi: f64,
    block_size: Option<usize>,
    coin: Option<f64>,
) -> Result<RandomizationScheme, CliError> {
    match kind {
        "simple" => Ok(RandomizationScheme::simple(pi)),
        "stratified-block" => {
            let block = block_size.unwrap_or_else(|| randomize::default_block_size(pi));
            let treated = block as f64 * pi;
            if (treated - treated.round()).abs() > 1e-9 {
                return Err(CliError::Config(format!(
                    "block size {block} and pi {pi} are incompatible"
                )));
            }
            Ok(RandomizationScheme::stratified_block(pi, block))
        }
        "minimization" => {
            let coin = coin.unwrap_or(randomize::DEFAULT_BIASED_COIN);
            if !(coin > 0.5 && coin <= 1.0) {
                return Err(CliError::Config(format!(
                    "biased coin {coin} outside (0.5, 1]"
                )));
            }
            Ok(RandomizationScheme::minimization(pi, coin, vec![1.0, 1.0]))
        }
        other => Err(CliError::Config(format!(
            "unknown scheme '{other}' (simple | stratified-block | minimization)"
        ))),
    }
}

/// Run the Monte Carlo study and return the report. The table-set rows are
/// the benchmark followed by the full missingness x regression x scope
/// matrix.
pub fn run_simulate(config: &SimulateConfig) -> Result<SimulationReport, CliError> {
    if config.p_total != 5 && config.p_total != 7 {
        return Err(CliError::Config(format!(
            "p must be 5 or 7, got {}",
            config.p_total
        )));
    }
    let mut spec = DgpSpec::new(
        config.model,
        config.n,
        config.pi,
        config.scheme.clone(),
        config.seed,
    );
    spec.p_total = config.p_total;
    spec.snr_definition = config.snr_definition;

    let study = Study::prepare(spec).map_err(|e| CliError::Config(e.to_string()))?;
    let mut estimators = EstimatorSpec::table_set(config.pi);
    for est in &mut estimators {
        est.level = config.level;
        est.df_mode = config.df_mode;
    }
    run_monte_carlo(&study, &estimators, config.replications, config.threads)
        .map_err(|e| CliError::Estimation(e.to_string()))
}

/// Write the CSV table and its JSON sidecar (full config echo including the
/// coefficient draws, so the run is reproducible from the report alone).
pub fn write_simulation_outputs(
    report: &SimulationReport,
    out: &Path,
) -> Result<PathBuf, CliError> {
    std::fs::write(out, report.to_csv_string())
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", out.display())))?;
    let sidecar = out.with_extension("json");
    let json = serde_json::to_string_pretty(report).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(&sidecar, json)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", sidecar.display())))?;
    Ok(sidecar)
}

// ---------------------------------------------------------------------------
// Randomize.

#[derive(Clone, Debug)]
pub struct RandomizeConfig {
    pub scheme: RandomizationScheme,
    pub n: Option<usize>,
    pub data_path: Option<PathBuf>,
    pub stratum_col: Option<String>,
    pub covariate_cols: Vec<String>,
    pub seed: u64,
}

/// Produce a prospective assignment list as CSV (`row,assignment`).
pub fn run_randomize(config: &RandomizeConfig) -> Result<String, CliError> {
    let mut rng = carate_core::sim::stream_rng(config.seed, 0);

    let assignment = match &config.scheme.kind {
        carate_core::randomize::Scheme::Simple => {
            let n = config.n.ok_or_else(|| {
                CliError::Config("simple randomization needs --n".into())
            })?;
            randomize::assign_simple(n, config.scheme.target_pi, &mut rng)
        }
        carate_core::randomize::Scheme::StratifiedBlock { block_size } => {
            let strata = read_label_column(config)?;
            randomize::assign_stratified_block(
                &strata,
                *block_size,
                config.scheme.target_pi,
                &mut rng,
            )
            .map_err(|e| CliError::Config(e.to_string()))?
        }
        carate_core::randomize::Scheme::Minimization {
            biased_coin,
            weights,
        } => {
            let levels = read_level_rows(config)?;
            randomize::assign_minimization(
                &levels,
                config.scheme.target_pi,
                *biased_coin,
                weights,
                &mut rng,
            )
            .map_err(|e| CliError::Config(e.to_string()))?
        }
    };

    let mut out = String::from("row,assignment\n");
    for (i, a) in assignment.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, a);
    }
    Ok(out)
}

fn open_reader(config: &RandomizeConfig) -> Result<(csv::Reader<std::fs::File>, csv::StringRecord), CliError> {
    let path = config.data_path.as_ref().ok_or_else(|| {
        CliError::Config("this scheme needs --data with the unit list".into())
    })?;
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(e.to_string()))?
        .clone();
    Ok((reader, headers))
}

fn read_label_column(config: &RandomizeConfig) -> Result<Vec<usize>, CliError> {
    let (mut reader, headers) = open_reader(config)?;
    let name = config.stratum_col.as_ref().ok_or_else(|| {
        CliError::Config("stratified-block needs --stratum-col".into())
    })?;
    let ix = headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Config(format!("unknown column '{name}'")))?;
    let mut labels: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Data(e.to_string()))?;
        labels.push(record.get(ix).unwrap_or("").trim().to_string());
    }
    let mut unique: Vec<&String> = Vec::new();
    for l in &labels {
        if !unique.contains(&l) {
            unique.push(l);
        }
    }
    Ok(labels
        .iter()
        .map(|l| unique.iter().position(|u| *u == l).unwrap())
        .collect())
}

fn read_level_rows(config: &RandomizeConfig) -> Result<Vec<Vec<usize>>, CliError> {
    let (mut reader, headers) = open_reader(config)?;
    if config.covariate_cols.is_empty() {
        return Err(CliError::Config(
            "minimization needs --covariate-cols with the stratification variables".into(),
        ));
    }
    let ixs: Vec<usize> = config
        .covariate_cols
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Config(format!("unknown column '{name}'")))
        })
        .collect::<Result<_, _>>()?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Data(e.to_string()))?;
        rows.push(
            ixs.iter()
                .map(|&ix| record.get(ix).unwrap_or("").trim().to_string())
                .collect(),
        );
    }
    // Map each variable's labels to dense level codes in appearance order.
    let mut levels: Vec<Vec<String>> = vec![Vec::new(); ixs.len()];
    let coded: Vec<Vec<usize>> = rows
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(v, label)| {
                    if let Some(pos) = levels[v].iter().position(|l| l == label) {
                        pos
                    } else {
                        levels[v].push(label.clone());
                        levels[v].len() - 1
                    }
                })
                .collect()
        })
        .collect();
    Ok(coded)
}

// ---------------------------------------------------------------------------
// Config-file support.

/// One section of the TOML config file; command-line flags override these
/// values field by field.
pub struct FileSection {
    table: toml::Table,
}

impl FileSection {
    pub fn load(path: Option<&Path>, section: &str) -> Result<FileSection, CliError> {
        let table = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                let root: toml::Table = text
                    .parse()
                    .map_err(|e| CliError::Config(format!("bad config: {e}")))?;
                match root.get(section) {
                    Some(toml::Value::Table(t)) => t.clone(),
                    Some(_) => {
                        return Err(CliError::Config(format!(
                            "config section '{section}' is not a table"
                        )))
                    }
                    None => toml::Table::new(),
                }
            }
        };
        Ok(FileSection { table })
    }

    pub fn string(&self, key: &str) -> Option<String> {
        self.table.get(key).map(|v| match v {
            toml::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }

    pub fn float(&self, key: &str) -> Option<f64> {
        self.table.get(key).and_then(|v| match v {
            toml::Value::Float(f) => Some(*f),
            toml::Value::Integer(i) => Some(*i as f64),
            toml::Value::String(s) => s.parse().ok(),
            _ => None,
        })
    }

    pub fn integer(&self, key: &str) -> Option<u64> {
        self.table.get(key).and_then(|v| match v {
            toml::Value::Integer(i) => u64::try_from(*i).ok(),
            toml::Value::String(s) => s.parse().ok(),
            _ => None,
        })
    }
}

/// Parse a fraction that may be written as a ratio like `2/3`.
pub fn parse_pi(s: &str) -> Result<f64, CliError> {
    let value = if let Some((num, den)) = s.split_once('/') {
        let num: f64 = num
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad pi '{s}'")))?;
        let den: f64 = den
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad pi '{s}'")))?;
        num / den
    } else {
        s.parse()
            .map_err(|_| CliError::Config(format!("bad pi '{s}'")))?
    };
    if value > 0.0 && value < 1.0 {
        Ok(value)
    } else {
        Err(CliError::Config(format!("pi {value} outside (0, 1)")))
    }
}
