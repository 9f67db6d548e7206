//! Command-line surface: CSV ingestion, config-driven experiments,
//! deterministic plot-ready outputs. Orchestration is single threaded;
//! numerical modules parallelize internally under a pool sized by
//! `--threads`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::anchor::{self, AnchorConfig, Gamma};
use crate::data::Dataset;
use crate::deconfound::{self, CvOptions, LambdaChoice};
use crate::error::{Error, Result};
use crate::inference::{self, DdLassoConfig};
use crate::linalg::{Matrix, Vector};
use crate::metrics::{self, CoverageConfig, ReplicabilityConfig, RobustnessConfig};
use crate::sem::{self, AnchorSemSpec, DenseConfoundSpec};
use crate::spectral::{self, Lambda2, Tau, TransformKind};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser, Serialize)]
#[command(name = "deconfound", version, about = "Spectral deconfounding, doubly debiased Lasso and anchor regression")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Fit a spectral transform and emit the singular spectrum.
    Transform(TransformArgs),
    /// Sparse regression after spectral deconfounding.
    Deconfound(DeconfoundArgs),
    /// Per-coordinate confidence intervals (doubly debiased Lasso).
    Ddlasso(DdlassoArgs),
    /// Anchor regression over one or more gamma values.
    Anchor(AnchorArgs),
    /// Draw a dataset from a JSON system specification.
    Simulate(SimulateArgs),
    /// Selection-replicability experiment from a JSON config.
    Replicate(ExperimentArgs),
    /// CI coverage experiment from a JSON config.
    Coverage(ExperimentArgs),
    /// Worst-case-MSE robustness curve from a JSON config.
    Robustness(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KindArg {
    Trim,
    Pca,
    Lava,
    Identity,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Name of the response column.
    #[arg(long)]
    pub response: String,
    /// Comma-separated anchor column names; a non-numeric column is
    /// expanded to environment dummies.
    #[arg(long, value_delimiter = ',')]
    pub anchors: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct TransformArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Trim threshold; defaults to the median singular value.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Number of leading singular directions removed by the PCA kind.
    #[arg(long)]
    pub qhat: Option<usize>,
    /// Lava ridge penalty; defaults to the median rule.
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DeconfoundArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// l1 penalty: a number, or "cv".
    #[arg(long, default_value = "cv")]
    pub lambda: String,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub qhat: Option<usize>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DdlassoArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated coordinate indices (0-based); default: all.
    #[arg(long, value_delimiter = ',')]
    pub coords: Vec<usize>,
    #[arg(long, default_value = "cv")]
    pub lambda: String,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnchorArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// "inf", a number, or "grid:a,b,...".
    #[arg(long)]
    pub gamma: String,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// JSON system specification (see the `family` tag).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// JSON wrapper for `simulate`: dense-confounding family or the anchor SEM
/// family with an explicit sample size.
#[derive(Debug, serde::Deserialize, Serialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SemSpecFile {
    Dense { spec: DenseConfoundSpec },
    Anchor { spec: AnchorSemSpec, n: usize },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Parse(_) => 3,
        Error::Degenerate(_) | Error::Instability(_) => 4,
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Load a CSV with header into (X, Y, optional anchors). Numeric columns
/// not named as response or anchor become X in header order; a non-numeric
/// anchor column is dummy-expanded over its sorted distinct values.
pub fn parse_dataset(path: &Path, response_col: &str, anchor_cols: &[String]) -> Result<Dataset> {
    let raw = read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(raw.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(Error::Parse(format!("{}: empty file", path.display())));
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let resp_idx = find(response_col)
        .ok_or_else(|| Error::Config(format!("response column '{response_col}' not found")))?;
    let mut anchor_idx = Vec::new();
    for a in anchor_cols {
        let idx = find(a).ok_or_else(|| Error::Config(format!("anchor column '{a}' not found")))?;
        if idx == resp_idx {
            return Err(Error::Config(format!("'{a}' is both response and anchor")));
        }
        anchor_idx.push(idx);
    }
    let records: Vec<csv::StringRecord> = reader
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let n = records.len();
    if n < 2 {
        return Err(Error::Parse(format!("{}: need at least 2 data rows, found {n}", path.display())));
    }
    let cell = |rec: &csv::StringRecord, row: usize, col: usize| -> Result<String> {
        rec.get(col)
            .map(str::to_string)
            .ok_or_else(|| Error::Parse(format!("row {}, column '{}': missing cell", row + 2, headers[col])))
    };
    let numeric = |rec: &csv::StringRecord, row: usize, col: usize| -> Result<f64> {
        let s = cell(rec, row, col)?;
        s.trim().parse::<f64>().map_err(|_| {
            Error::Parse(format!("row {}, column '{}': '{s}' is not numeric", row + 2, headers[col]))
        })
    };
    let x_idx: Vec<usize> = (0..headers.len())
        .filter(|i| *i != resp_idx && !anchor_idx.contains(i))
        .collect();
    let mut x = Matrix::zeros(n, x_idx.len());
    let mut y = Vector::zeros(n);
    for (row, rec) in records.iter().enumerate() {
        y[row] = numeric(rec, row, resp_idx)?;
        for (c, &i) in x_idx.iter().enumerate() {
            x[(row, c)] = numeric(rec, row, i)?;
        }
    }
    let anchors = if anchor_idx.is_empty() {
        None
    } else {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for &i in &anchor_idx {
            let all_numeric = records
                .iter()
                .all(|r| r.get(i).map(|s| s.trim().parse::<f64>().is_ok()).unwrap_or(false));
            if all_numeric {
                let mut col = Vec::with_capacity(n);
                for (row, rec) in records.iter().enumerate() {
                    col.push(numeric(rec, row, i)?);
                }
                cols.push(col);
            } else {
                let mut levels: Vec<String> = Vec::new();
                for (row, rec) in records.iter().enumerate() {
                    let v = cell(rec, row, i)?;
                    if !levels.contains(&v) {
                        levels.push(v);
                    }
                }
                levels.sort();
                for level in &levels {
                    let mut col = Vec::with_capacity(n);
                    for (row, rec) in records.iter().enumerate() {
                        col.push(f64::from(cell(rec, row, i)? == *level));
                    }
                    cols.push(col);
                }
            }
        }
        let mut a = Matrix::zeros(n, cols.len());
        for (c, col) in cols.iter().enumerate() {
            for (row, &v) in col.iter().enumerate() {
                a[(row, c)] = v;
            }
        }
        Some(a)
    };
    Ok(Dataset { x, y, anchors })
}

fn config_echo<T: Serialize>(args: &T) -> String {
    serde_json::to_string(args).expect("config serialization")
}

fn header_lines<T: Serialize>(args: &T) -> String {
    format!("# version {VERSION}\n# config {}\n", config_echo(args))
}

fn emit(output: &Option<PathBuf>, content: &str) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn kind_from(
    kind: KindArg,
    tau: Option<f64>,
    qhat: Option<usize>,
    lambda2: Option<f64>,
) -> Result<TransformKind> {
    Ok(match kind {
        KindArg::Trim => TransformKind::Trim(tau.map_or(Tau::Median, Tau::Value)),
        KindArg::Pca => TransformKind::Pca(
            qhat.ok_or_else(|| Error::Config("pca kind needs --qhat".into()))?,
        ),
        KindArg::Lava => {
            TransformKind::Lava(lambda2.map_or(Lambda2::MedianRule, Lambda2::Value))
        }
        KindArg::Identity => TransformKind::Identity,
    })
}

fn lambda_from(s: &str, seed: u64) -> Result<LambdaChoice> {
    if s == "cv" {
        return Ok(LambdaChoice::Cv(CvOptions { seed, ..Default::default() }));
    }
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Config(format!("--lambda must be a number or 'cv', got '{s}'")))?;
    if v < 0.0 {
        return Err(Error::Config("--lambda must be >= 0".into()));
    }
    Ok(LambdaChoice::Fixed(v))
}

fn gammas_from(s: &str) -> Result<Vec<Gamma>> {
    if s == "inf" {
        return Ok(vec![Gamma::Infinity]);
    }
    if let Some(rest) = s.strip_prefix("grid:") {
        return rest
            .split(',')
            .map(|t| {
                let v: f64 = t
                    .parse()
                    .map_err(|_| Error::Config(format!("bad gamma grid entry '{t}'")))?;
                Ok(Gamma::Finite(v))
            })
            .collect();
    }
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Config(format!("--gamma must be a number, 'inf' or 'grid:...', got '{s}'")))?;
    Ok(vec![Gamma::Finite(v)])
}

fn run_transform(args: &TransformArgs) -> Result<()> {
    let data = parse_dataset(&args.data.input, &args.data.response, &args.data.anchors)?;
    let kind = kind_from(args.kind, args.tau, args.qhat, args.lambda2)?;
    let t = spectral::fit_transform(&data.x, kind)?;
    let mut out = header_lines(args);
    out.push_str("index,d,d_shrunk\n");
    for (i, (d, dt)) in t.singular_spectrum().iter().enumerate() {
        writeln!(out, "{i},{d},{dt}").unwrap();
    }
    emit(&args.output, &out)
}

fn run_deconfound(args: &DeconfoundArgs) -> Result<()> {
    let data = parse_dataset(&args.data.input, &args.data.response, &args.data.anchors)?;
    let lambda = lambda_from(&args.lambda, args.seed)?;
    let fit = match args.kind {
        KindArg::Trim | KindArg::Identity => {
            let tau = match args.kind {
                KindArg::Identity => Tau::Value(f64::INFINITY),
                _ => args.tau.map_or(Tau::Median, Tau::Value),
            };
            deconfound::trim_lasso(&data.x, &data.y, tau, &lambda)?
        }
        KindArg::Pca => {
            let q = args.qhat.ok_or_else(|| Error::Config("pca kind needs --qhat".into()))?;
            deconfound::pca_adjust_lasso(&data.x, &data.y, q, &lambda)?
        }
        KindArg::Lava => {
            let l1 = match lambda {
                LambdaChoice::Fixed(v) => v,
                LambdaChoice::Cv(_) => {
                    return Err(Error::Config("lava needs a numeric --lambda".into()))
                }
            };
            let l2 = args.lambda2.map_or(Lambda2::MedianRule, Lambda2::Value);
            deconfound::lava(&data.x, &data.y, l1, l2)?
        }
    };
    let mut out = header_lines(args);
    match &fit.dense_part {
        Some(dense) => {
            out.push_str("j,beta,dense\n");
            for j in 0..fit.beta.len() {
                writeln!(out, "{j},{},{}", fit.beta[j], dense[j]).unwrap();
            }
        }
        None => {
            out.push_str("j,beta\n");
            for j in 0..fit.beta.len() {
                writeln!(out, "{j},{}", fit.beta[j]).unwrap();
            }
        }
    }
    emit(&args.output, &out)
}

fn run_ddlasso(args: &DdlassoArgs) -> Result<()> {
    let data = parse_dataset(&args.data.input, &args.data.response, &args.data.anchors)?;
    let lambda = lambda_from(&args.lambda, args.seed)?;
    let cfg = DdLassoConfig {
        lambda_y: lambda.clone(),
        lambda_nodewise: lambda,
        confidence_level: args.level,
        ..Default::default()
    };
    let coords: Vec<usize> = if args.coords.is_empty() {
        (0..data.p()).collect()
    } else {
        args.coords.clone()
    };
    let results = inference::dd_lasso_all(&data.x, &data.y, &coords, &cfg)?;
    let mut out = header_lines(args);
    out.push_str("j,estimate,se,ci_low,ci_high,p_value\n");
    for r in &results {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.j, r.estimate, r.se, r.ci_low, r.ci_high, r.p_value
        )
        .unwrap();
    }
    emit(&args.output, &out)
}

fn run_anchor(args: &AnchorArgs) -> Result<()> {
    let data = parse_dataset(&args.data.input, &args.data.response, &args.data.anchors)?;
    let a = data
        .anchors
        .as_ref()
        .ok_or_else(|| Error::Config("anchor regression needs --anchors".into()))?;
    let gammas = gammas_from(&args.gamma)?;
    // echo the parsed gamma values so "1" and "1.0" normalize identically
    #[derive(Serialize)]
    struct AnchorEcho<'a> {
        data: &'a DataArgs,
        gamma: Vec<serde_json::Value>,
        lambda: f64,
        output: &'a Option<PathBuf>,
    }
    let echo = AnchorEcho {
        data: &args.data,
        gamma: gammas
            .iter()
            .map(|g| match g {
                Gamma::Finite(v) => serde_json::json!(v),
                Gamma::Infinity => serde_json::json!("inf"),
            })
            .collect(),
        lambda: args.lambda,
        output: &args.output,
    };
    let mut out = header_lines(&echo);
    out.push_str("gamma,objective");
    for j in 0..data.p() {
        write!(out, ",beta{j}").unwrap();
    }
    out.push('\n');
    for &g in &gammas {
        let mut cfg = AnchorConfig::new(g);
        cfg.lambda = args.lambda;
        let fit = anchor::anchor_fit(&data.x, &data.y, a, &cfg)?;
        match g {
            Gamma::Finite(v) => write!(out, "{v}").unwrap(),
            Gamma::Infinity => out.push_str("inf"),
        }
        write!(out, ",{}", fit.anchor_objective).unwrap();
        for j in 0..fit.beta.len() {
            write!(out, ",{}", fit.beta[j]).unwrap();
        }
        out.push('\n');
    }
    emit(&args.output, &out)
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let raw = read_to_string(&args.spec)?;
    let file: SemSpecFile = serde_json::from_str(&raw)
        .map_err(|e| Error::Parse(format!("{}: {e}", args.spec.display())))?;
    let (data, _truth): (Dataset, _) = match &file {
        SemSpecFile::Dense { spec } => {
            let mut spec = spec.clone();
            spec.seed = args.seed;
            let (d, _) = sem::gen_dense_confounded(&spec)?;
            (d, ())
        }
        SemSpecFile::Anchor { spec, n } => {
            let (d, _) = sem::gen_anchor_sem(spec, *n, args.seed)?;
            (d, ())
        }
    };
    let mut out = header_lines(args);
    out.push_str("y");
    for j in 0..data.p() {
        write!(out, ",x{j}").unwrap();
    }
    let r = data.anchors.as_ref().map_or(0, Matrix::ncols);
    for s in 0..r {
        write!(out, ",a{s}").unwrap();
    }
    out.push('\n');
    for i in 0..data.n() {
        write!(out, "{}", data.y[i]).unwrap();
        for j in 0..data.p() {
            write!(out, ",{}", data.x[(i, j)]).unwrap();
        }
        if let Some(a) = &data.anchors {
            for s in 0..r {
                write!(out, ",{}", a[(i, s)]).unwrap();
            }
        }
        out.push('\n');
    }
    emit(&args.output, &out)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn run_experiment(args: &ExperimentArgs, which: &str) -> Result<()> {
    let report = match which {
        "replicate" => {
            let mut cfg: ReplicabilityConfig = load_json(&args.spec)?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(r) = args.replicates {
                cfg.replicates = r;
            }
            metrics::replicability_experiment(&cfg)?
        }
        "coverage" => {
            let mut cfg: CoverageConfig = load_json(&args.spec)?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(r) = args.replicates {
                cfg.replicates = r;
            }
            if let Some(l) = args.level {
                cfg.level = l;
            }
            metrics::coverage_experiment(&cfg)?
        }
        "robustness" => {
            let mut cfg: RobustnessConfig = load_json(&args.spec)?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            metrics::robustness_curve(&cfg)?
        }
        _ => unreachable!("experiment dispatch"),
    };
    let body = serde_json::json!({
        "version": VERSION,
        "cli_config": serde_json::to_value(args).expect("config serialization"),
        "report": serde_json::from_str::<serde_json::Value>(&report.to_json()).unwrap(),
    });
    let mut text = serde_json::to_string_pretty(&body).expect("report serialization");
    text.push('\n');
    emit(&args.output, &text)
}

/// Dispatch a parsed command; the binary maps errors to exit codes.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        // ignore failure: the global pool may already exist in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Transform(a) => run_transform(a),
        Command::Deconfound(a) => run_deconfound(a),
        Command::Ddlasso(a) => run_ddlasso(a),
        Command::Anchor(a) => run_anchor(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Replicate(a) => run_experiment(a, "replicate"),
        Command::Coverage(a) => run_experiment(a, "coverage"),
        Command::Robustness(a) => run_experiment(a, "robustness"),
    }
}
