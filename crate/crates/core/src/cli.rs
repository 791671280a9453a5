//! Command-line front end: argument parsing, config files, run records.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::evaluate::{bias_report, pr_band, pr_curve, recall_grid, score_table, score_test, PrCurve};
use crate::genotype::{bed_path, bim_path, fam_path, read_packed_genotypes, standardize, GenotypeMatrix, ScaleConvention};
use crate::grm::{build_grm, read_grm, sparsify, write_grm, Relatedness, DEFAULT_THRESHOLD};
use crate::model::{LinkFamily, LongitudinalDataset};
use crate::null_fit::{fit_null, NullFitConfig, NullFitResult};
use crate::penalized::{adaptive_weights, fit_path, fit_plain_lasso, predict, r2_mspe, LassoPath, PathConfig};
use crate::phenotype::{join, read_phenotypes, PhenotypeSchema};
use crate::sigma::{Kernels, ParamLayout};
use crate::simulate::{simulate, write_simulation, SimConfig, SimTruth};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("PQLASSO_BUILD_HASH"), ")");

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Run(Error::Schema { .. }) => EXIT_SCHEMA,
            CliError::Run(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "pqlasso", version = VERSION, about = "Penalized GLMMs for longitudinal traits")]
pub struct Cli {
    /// TOML config with one table per subcommand; flags win over file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate genotypes, phenotypes and the generating truth.
    Simulate(SimulateArgs),
    /// Build a relatedness matrix from a genotype triplet.
    Grm(GrmArgs),
    /// Fit the model without variant effects (variance components, BLUPs).
    FitNull(FitNullArgs),
    /// Lasso or adaptive-lasso regularization path.
    FitPath(FitPathArgs),
    /// Predict from one path entry.
    Predict(PredictArgs),
    /// Precision-recall, variance-component bias and score tests.
    #[command(subcommand)]
    Evaluate(EvaluateCommand),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub causal: Option<usize>,
    #[arg(long)]
    pub h2s: Option<f64>,
    #[arg(long)]
    pub h2g: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub populations: Option<usize>,
    #[arg(long)]
    pub family_size: Option<usize>,
    #[arg(long)]
    pub grm_markers: Option<usize>,
    #[arg(long)]
    pub binary: bool,
    #[arg(long)]
    pub prevalence: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GrmArgs {
    /// Genotype triplet prefix.
    #[arg(long)]
    pub bfile: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Zero kinship below the threshold and store relative clusters.
    #[arg(long, num_args = 0..=1, value_name = "THRESHOLD")]
    pub sparse: Option<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrmSettings {
    pub sparse: bool,
    pub threshold: f64,
    pub scale: ScaleConvention,
}

impl Default for GrmSettings {
    fn default() -> Self {
        GrmSettings {
            sparse: false,
            threshold: DEFAULT_THRESHOLD,
            scale: ScaleConvention::Population,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Phenotype table (tab or comma delimited).
    #[arg(long)]
    pub pheno: PathBuf,
    /// Column roles (TOML); defaults to id/visit/y with a random intercept.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitNullArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Relatedness matrices, one variance component each.
    #[arg(long = "grm", required = true)]
    pub grms: Vec<PathBuf>,
    /// Genotype triplet fixing the subject order.
    #[arg(long)]
    pub bfile: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub diagonal_d: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NullSettings {
    pub family: String,
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub diagonal_d: bool,
    pub exact_trace_max_obs: usize,
    pub probes: usize,
    pub seed: u64,
}

impl Default for NullSettings {
    fn default() -> Self {
        let c = NullFitConfig::default();
        NullSettings {
            family: "gaussian".into(),
            tol: c.tol,
            max_iter: c.max_iter,
            max_halvings: c.max_halvings,
            diagonal_d: c.diagonal_d,
            exact_trace_max_obs: c.exact_trace_max_obs,
            probes: c.probes,
            seed: c.seed,
        }
    }
}

impl NullSettings {
    fn to_config(&self) -> NullFitConfig {
        NullFitConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            max_halvings: self.max_halvings,
            diagonal_d: self.diagonal_d,
            exact_trace_max_obs: self.exact_trace_max_obs,
            probes: self.probes,
            seed: self.seed,
            init: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitPathArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub bfile: PathBuf,
    /// Null-fit result; required unless `--plain`.
    #[arg(long)]
    pub null: Option<PathBuf>,
    #[arg(long = "grm")]
    pub grms: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// No random effects (plain penalized GLM).
    #[arg(long)]
    pub plain: bool,
    /// Family for `--plain`; otherwise taken from the null fit.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub n_lambda: Option<usize>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub adaptive: bool,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Initial estimates for adaptive weights: header with `variant` and the
    /// `--init-column` column, effects per standardized genotype.
    #[arg(long)]
    pub init_coefs: Option<PathBuf>,
    #[arg(long)]
    pub init_column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    pub plain: bool,
    pub family: String,
    pub n_lambda: usize,
    pub ratio: f64,
    pub tol: f64,
    pub max_cycles: usize,
    pub cd_tol: f64,
    pub max_sweeps: usize,
    pub adaptive: bool,
    pub gamma: f64,
    pub init_column: String,
}

impl Default for PathSettings {
    fn default() -> Self {
        let c = PathConfig::default();
        PathSettings {
            plain: false,
            family: "gaussian".into(),
            n_lambda: c.n_lambda,
            ratio: c.ratio,
            tol: c.tol,
            max_cycles: c.max_cycles,
            cd_tol: c.cd_tol,
            max_sweeps: c.max_sweeps,
            adaptive: false,
            gamma: 1.0,
            init_column: "beta".into(),
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub bfile: PathBuf,
    /// `path.json` or the directory holding it.
    #[arg(long)]
    pub path: PathBuf,
    /// Path entry; defaults to the last (smallest lambda).
    #[arg(long, conflicts_with = "lambda")]
    pub index: Option<usize>,
    /// Entry with lambda closest to this value.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSettings {
    pub index: Option<usize>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum EvaluateCommand {
    /// Precision-recall points, interpolated precision and replicate band.
    Pr(PrArgs),
    /// Relative bias of variance components across replicates.
    Bias(BiasArgs),
    /// Single-variant score tests under a null fit.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct PrArgs {
    /// Path results, one per replicate.
    #[arg(long = "path", required = true)]
    pub paths: Vec<PathBuf>,
    /// Truth files, paired with `--path` (a single truth is reused).
    #[arg(long = "truth", required = true)]
    pub truths: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[arg(long = "null", required = true)]
    pub nulls: Vec<PathBuf>,
    #[arg(long = "truth", required = true)]
    pub truths: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub bfile: PathBuf,
    #[arg(long)]
    pub null: PathBuf,
    #[arg(long = "grm", required = true)]
    pub grms: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub grid: usize,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        EvaluateSettings { grid: 21 }
    }
}

/// Per-subcommand tables of a config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub simulate: SimConfig,
    pub grm: GrmSettings,
    #[serde(rename = "fit-null")]
    pub fit_null: NullSettings,
    #[serde(rename = "fit-path")]
    pub fit_path: PathSettings,
    pub predict: PredictSettings,
    pub evaluate: EvaluateSettings,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Resolved settings and input digests written next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord<S: Serialize> {
    pub command: String,
    pub version: String,
    pub threads: usize,
    pub settings: S,
    pub inputs: Vec<InputDigest>,
}

pub fn sha256_file(path: &Path) -> crate::Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Digests(Vec<InputDigest>);

impl Digests {
    fn file(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.0.push(InputDigest {
            role: role.into(),
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn bfile(&mut self, role: &str, prefix: &Path) -> CliResult<()> {
        for (suffix, p) in [("bed", bed_path(prefix)), ("bim", bim_path(prefix)), ("fam", fam_path(prefix))] {
            self.file(&format!("{role}.{suffix}"), &p)?;
        }
        Ok(())
    }
}

fn write_record<S: Serialize>(path: &Path, command: &str, threads: usize, settings: S, inputs: Digests) -> CliResult<()> {
    let rec = RunRecord {
        command: command.into(),
        version: VERSION.into(),
        threads,
        settings,
        inputs: inputs.0,
    };
    let body = serde_json::to_string_pretty(&rec).expect("run record serializes");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `<file>.run.json` beside a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn write_text(path: &Path, body: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Timer {
    stage: &'static str,
    start: Instant,
}

impl Timer {
    fn start(stage: &'static str) -> Self {
        log::info!("{stage}: started");
        Timer {
            stage,
            start: Instant::now(),
        }
    }

    fn done(self) {
        log::info!("{}: finished in {:.3} s", self.stage, self.start.elapsed().as_secs_f64());
    }
}

fn load_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_schema(path: Option<&Path>) -> CliResult<PhenotypeSchema> {
    let Some(path) = path else {
        return Ok(PhenotypeSchema::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn parse_family(s: &str) -> CliResult<LinkFamily> {
    LinkFamily::parse(s).map_err(|e| CliError::Config(e.to_string()))
}

fn load_dataset(data: &DataArgs, gm: Option<&GenotypeMatrix>, digests: &mut Digests) -> CliResult<LongitudinalDataset> {
    let schema = load_schema(data.schema.as_deref())?;
    digests.file("pheno", &data.pheno)?;
    if let Some(s) = &data.schema {
        digests.file("schema", s)?;
    }
    let table = read_phenotypes(&data.pheno, &schema)?;
    Ok(join(gm, &table)?)
}

fn load_kernels(paths: &[PathBuf], subject_ids: &[String], digests: &mut Digests) -> CliResult<(Kernels, bool)> {
    let mut rels = Vec::new();
    for p in paths {
        digests.file("grm", p)?;
        rels.push(read_grm(p)?);
    }
    let sparse = rels.iter().any(Relatedness::is_sparse);
    Ok((Kernels::new(&rels, subject_ids)?, sparse))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let config = load_config(cli.config.as_deref())?;
    let threads = cli.threads;
    let mut digests = Digests(Vec::new());
    if let Some(c) = &cli.config {
        digests.file("config", c)?;
    }
    pool.install(|| match cli.command {
        Command::Simulate(a) => cmd_simulate(a, config.simulate, threads, digests),
        Command::Grm(a) => cmd_grm(a, config.grm, threads, digests),
        Command::FitNull(a) => cmd_fit_null(a, config.fit_null, threads, digests),
        Command::FitPath(a) => cmd_fit_path(a, config.fit_path, threads, digests),
        Command::Predict(a) => cmd_predict(a, config.predict, threads, digests),
        Command::Evaluate(EvaluateCommand::Pr(a)) => cmd_pr(a, config.evaluate, threads, digests),
        Command::Evaluate(EvaluateCommand::Bias(a)) => cmd_bias(a, threads, digests),
        Command::Evaluate(EvaluateCommand::Score(a)) => cmd_score(a, threads, digests),
    })
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn cmd_simulate(a: SimulateArgs, mut s: SimConfig, threads: usize, digests: Digests) -> CliResult<()> {
    set(&mut s.m, a.m);
    set(&mut s.p, a.p);
    set(&mut s.n_causal, a.causal);
    set(&mut s.h2_s, a.h2s);
    set(&mut s.h2_g, a.h2g);
    set(&mut s.sigma2, a.sigma2);
    set(&mut s.n_populations, a.populations);
    set(&mut s.family_size, a.family_size);
    set(&mut s.grm_markers, a.grm_markers);
    set(&mut s.prevalence, a.prevalence);
    set(&mut s.seed, a.seed);
    if a.binary {
        s.binary = true;
    }
    s.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let t = Timer::start("simulate");
    let sim = simulate(&s)?;
    write_simulation(&a.out, &sim)?;
    t.done();
    write_record(&a.out.join("run.json"), "simulate", threads, &s, digests)
}

fn cmd_grm(a: GrmArgs, mut s: GrmSettings, threads: usize, mut digests: Digests) -> CliResult<()> {
    if let Some(th) = a.sparse {
        s.sparse = true;
        set(&mut s.threshold, th);
    }
    if !(s.threshold.is_finite() && s.threshold >= 0.0) {
        return Err(CliError::Config(format!("sparse threshold must be non-negative, got {}", s.threshold)));
    }
    digests.bfile("genotypes", &a.bfile)?;
    let t = Timer::start("read-genotypes");
    let gm = read_packed_genotypes(&a.bfile)?;
    t.done();
    let t = Timer::start("grm");
    let std = standardize(&gm, s.scale);
    let grm = build_grm(&std.matrix, gm.sample_ids())?;
    let rel = if s.sparse {
        let sp = sparsify(&grm, s.threshold)?;
        log::info!("sparse GRM: {} clusters, largest {}", sp.n_clusters(), sp.cluster_sizes().into_iter().max().unwrap_or(0));
        Relatedness::Sparse(sp)
    } else {
        Relatedness::Dense(grm)
    };
    write_grm(&a.out, &rel)?;
    t.done();
    write_record(&sidecar(&a.out), "grm", threads, &s, digests)
}

fn cmd_fit_null(a: FitNullArgs, mut s: NullSettings, threads: usize, mut digests: Digests) -> CliResult<()> {
    set(&mut s.family, a.family);
    set(&mut s.tol, a.tol);
    set(&mut s.max_iter, a.max_iter);
    set(&mut s.seed, a.seed);
    if a.diagonal_d {
        s.diagonal_d = true;
    }
    let family = parse_family(&s.family)?;
    let gm = match &a.bfile {
        Some(b) => {
            digests.bfile("genotypes", b)?;
            Some(read_packed_genotypes(b)?)
        }
        None => None,
    };
    let data = load_dataset(&a.data, gm.as_ref(), &mut digests)?;
    // the null model has no variant columns
    let data = data.with_variants(&[]);
    let (kernels, sparse) = load_kernels(&a.grms, &data.subject_ids, &mut digests)?;
    let t = Timer::start(if sparse { "fit-null (sparse GRM)" } else { "fit-null (dense GRM)" });
    let result = fit_null(&data, family, &kernels, &s.to_config())?;
    t.done();
    if !result.converged {
        log::warn!("null fit did not converge in {} iterations", result.iterations);
    }
    result.write(&a.out)?;
    write_record(&sidecar(&a.out), "fit-null", threads, &s, digests)
}

fn read_init_coefs(path: &Path, column: &str, variants: &[String]) -> CliResult<Vec<f64>> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::parse(&name, 1, "missing header row"))?
        .split('\t')
        .map(str::trim)
        .collect();
    let find = |c: &str| {
        header
            .iter()
            .position(|h| *h == c)
            .ok_or_else(|| Error::parse(&name, 1, format!("column `{c}` not found")))
    };
    let (vi, bi) = (find("variant")?, find(column)?);
    let mut by_id = HashMap::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split('\t').map(str::trim).collect();
        let (Some(id), Some(v)) = (cells.get(vi), cells.get(bi)) else {
            return Err(Error::parse(&name, row + 2, "short row").into());
        };
        let v: f64 = v
            .parse()
            .map_err(|_| Error::parse(&name, row + 2, format!("non-numeric value `{v}`")))?;
        by_id.insert(id.to_string(), v);
    }
    variants
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| CliError::Run(Error::Invalid(format!("{name}: no initial estimate for variant `{id}`"))))
        })
        .collect()
}

fn cmd_fit_path(a: FitPathArgs, mut s: PathSettings, threads: usize, mut digests: Digests) -> CliResult<()> {
    set(&mut s.n_lambda, a.n_lambda);
    set(&mut s.ratio, a.ratio);
    set(&mut s.gamma, a.gamma);
    set(&mut s.family, a.family);
    set(&mut s.init_column, a.init_column);
    s.plain |= a.plain;
    s.adaptive |= a.adaptive;
    if s.n_lambda == 0 || !(s.ratio > 0.0 && s.ratio < 1.0) {
        return Err(CliError::Config("need n_lambda >= 1 and 0 < ratio < 1".into()));
    }
    if s.adaptive && a.init_coefs.is_none() {
        return Err(CliError::Config("--adaptive requires --init-coefs".into()));
    }
    if !s.plain && (a.null.is_none() || a.grms.is_empty()) {
        return Err(CliError::Config("the mixed-model path needs --null and --grm (or use --plain)".into()));
    }
    digests.bfile("genotypes", &a.bfile)?;
    let t = Timer::start("read-inputs");
    let gm = read_packed_genotypes(&a.bfile)?;
    let data = load_dataset(&a.data, Some(&gm), &mut digests)?;
    t.done();
    let mut config = PathConfig {
        n_lambda: s.n_lambda,
        ratio: s.ratio,
        tol: s.tol,
        max_cycles: s.max_cycles,
        cd_tol: s.cd_tol,
        max_sweeps: s.max_sweeps,
        ..Default::default()
    };
    if let Some(init) = &a.init_coefs {
        digests.file("init-coefs", init)?;
        let beta = read_init_coefs(init, &s.init_column, &data.variant_ids)?;
        let (nu, capped) = adaptive_weights(&beta, s.gamma).map_err(|e| CliError::Config(e.to_string()))?;
        if !capped.is_empty() {
            log::info!("{} adaptive weights capped for zero initial estimates", capped.len());
        }
        config.penalty_weights = Some(nu);
    }
    let path = if s.plain {
        let family = parse_family(&s.family)?;
        let t = Timer::start("fit-path (plain)");
        let path = fit_plain_lasso(&data, family, &config)?;
        t.done();
        path
    } else {
        let null_file = a.null.as_ref().expect("checked above");
        digests.file("null", null_file)?;
        let null = NullFitResult::read(null_file)?;
        let (kernels, _) = load_kernels(&a.grms, &data.subject_ids, &mut digests)?;
        let t = Timer::start("fit-path");
        let mut path = fit_path(&data, &null, Some(&kernels), &config)?;
        t.done();
        path.null_fit_id = Some(sha256_file(null_file)?);
        path
    };
    let bad = path.entries.iter().filter(|e| !e.converged).count();
    if bad > 0 {
        log::warn!("{bad} path entries did not converge");
    }
    path.write(&a.out)?;
    write_record(&a.out.join("run.json"), "fit-path", threads, &s, digests)
}

fn path_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("path.json")
    } else {
        p.to_path_buf()
    }
}

fn cmd_predict(a: PredictArgs, mut s: PredictSettings, threads: usize, mut digests: Digests) -> CliResult<()> {
    if a.index.is_some() || a.lambda.is_some() {
        s.index = a.index;
        s.lambda = a.lambda;
    }
    let pf = path_file(&a.path);
    digests.file("path", &pf)?;
    let path = LassoPath::read(&pf)?;
    if path.entries.is_empty() {
        return Err(Error::Invalid("path has no entries".into()).into());
    }
    let entry = match (s.index, s.lambda) {
        (Some(i), _) => i,
        (None, Some(l)) => (0..path.entries.len())
            .min_by(|&i, &j| {
                let d = |k: usize| (path.entries[k].lambda - l).abs();
                d(i).total_cmp(&d(j))
            })
            .unwrap(),
        (None, None) => path.entries.len() - 1,
    };
    digests.bfile("genotypes", &a.bfile)?;
    let gm = read_packed_genotypes(&a.bfile)?;
    let data = load_dataset(&a.data, Some(&gm), &mut digests)?;
    let t = Timer::start("predict");
    let mu = predict(&path, entry, &data)?;
    t.done();
    let mut out = String::from("id\tvisit\ty\tfitted\n");
    for o in 0..data.n_obs() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:e}",
            data.subject_ids[data.subject_of[o]], data.visit[o], data.y[o], mu[o]
        );
    }
    write_text(&a.out, &out)?;
    match r2_mspe(&data.y, &mu) {
        Ok(r2) => println!("entry\t{entry}\nlambda\t{:e}\nr2_mspe\t{r2}", path.entries[entry].lambda),
        Err(e) => log::warn!("{e}"),
    }
    write_record(&sidecar(&a.out), "predict", threads, &s, digests)
}

fn pair_truths(n: usize, truths: &[PathBuf]) -> CliResult<Vec<&PathBuf>> {
    match truths.len() {
        1 => Ok(vec![&truths[0]; n]),
        k if k == n => Ok(truths.iter().collect()),
        k => Err(CliError::Config(format!("{k} truth files for {n} replicates"))),
    }
}

fn cmd_pr(a: PrArgs, mut s: EvaluateSettings, threads: usize, mut digests: Digests) -> CliResult<()> {
    set(&mut s.grid, a.grid);
    if s.grid < 2 {
        return Err(CliError::Config("recall grid needs at least two points".into()));
    }
    let truths = pair_truths(a.paths.len(), &a.truths)?;
    let grid = recall_grid(s.grid);
    let mut curves: Vec<PrCurve> = Vec::new();
    let mut points = String::from("replicate\tindex\tlambda\tdf\ttrue_positives\tprecision\trecall\n");
    let mut interp = String::from("replicate\trecall\tprecision\n");
    for (r, (p, t)) in a.paths.iter().zip(truths).enumerate() {
        let pf = path_file(p);
        digests.file("path", &pf)?;
        digests.file("truth", t)?;
        let path = LassoPath::read(&pf)?;
        let truth = SimTruth::read(t)?;
        let curve = pr_curve(&path, &truth.causal_ids)?;
        for line in curve.to_tsv().lines().skip(1) {
            let _ = writeln!(points, "{r}\t{line}");
        }
        for (g, v) in grid.iter().zip(curve.interpolate(&grid)) {
            let _ = writeln!(interp, "{r}\t{g}\t{v}");
        }
        curves.push(curve);
    }
    write_text(&a.out.join("pr_points.tsv"), &points)?;
    write_text(&a.out.join("pr_interpolated.tsv"), &interp)?;
    if curves.len() >= 2 {
        let band = pr_band(&curves, &grid)?;
        let mut out = String::from("recall\tmean\tnormal_lo\tnormal_hi\tq025\tq975\n");
        for b in band {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", b.recall, b.mean, b.normal_lo, b.normal_hi, b.q025, b.q975);
        }
        write_text(&a.out.join("pr_band.tsv"), &out)?;
    }
    write_record(&a.out.join("run.json"), "evaluate pr", threads, &s, digests)
}

fn cmd_bias(a: BiasArgs, threads: usize, mut digests: Digests) -> CliResult<()> {
    let truths = pair_truths(a.nulls.len(), &a.truths)?;
    let mut names: Option<Vec<String>> = None;
    let mut estimates = Vec::new();
    let mut truth_params: Option<Vec<f64>> = None;
    for (n, t) in a.nulls.iter().zip(truths) {
        digests.file("null", n)?;
        digests.file("truth", t)?;
        let null = NullFitResult::read(n)?;
        let truth = SimTruth::read(t)?;
        let layout = ParamLayout::new(null.family.estimates_dispersion(), truth.vc.tau.len(), truth.vc.d_matrix().nrows(), null.diagonal_d);
        if layout.names() != null.param_names {
            return Err(Error::Invalid(format!(
                "{}: parameters {:?} do not match the truth layout {:?}",
                n.display(),
                null.param_names,
                layout.names()
            ))
            .into());
        }
        let tp: Vec<f64> = layout.pack(&truth.vc).iter().copied().collect();
        match &truth_params {
            None => truth_params = Some(tp),
            Some(prev) if *prev != tp => {
                return Err(Error::Invalid("replicates disagree on the true variance components".into()).into())
            }
            _ => {}
        }
        names.get_or_insert_with(|| null.param_names.clone());
        estimates.push(null.params.clone());
    }
    let report = bias_report(&names.unwrap(), &estimates, &truth_params.unwrap())?;
    write_text(&a.out, &report.to_tsv())?;
    write_record(&sidecar(&a.out), "evaluate bias", threads, serde_json::Value::Null, digests)
}

fn cmd_score(a: ScoreArgs, threads: usize, mut digests: Digests) -> CliResult<()> {
    digests.file("null", &a.null)?;
    let null = NullFitResult::read(&a.null)?;
    digests.bfile("genotypes", &a.bfile)?;
    let gm = read_packed_genotypes(&a.bfile)?;
    let data = load_dataset(&a.data, Some(&gm), &mut digests)?;
    let (kernels, _) = load_kernels(&a.grms, &data.subject_ids, &mut digests)?;
    let t = Timer::start("score-test");
    let (g, _, _, _) = crate::penalized::standardize_columns(&data.genotypes);
    let null_data = data.with_variants(&[]);
    let results = score_test(&null, &null_data, &kernels, &g)?;
    t.done();
    write_text(&a.out, &score_table(&data.variant_ids, &results))?;
    write_record(&sidecar(&a.out), "evaluate score", threads, serde_json::Value::Null, digests)
}
