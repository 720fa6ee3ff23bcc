//! Command-line definition and subcommand dispatch.
//!
//! Exit codes: 0 success, 1 validation failure (bad input content, invalid
//! manifest, usage errors), 2 I/O failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use mosaix_core::metric::binarize_set;
use mosaix_core::metric::PatchDistanceMetric;
use mosaix_core::model::{validate_manifest, DatasetManifest, EvalConfig, MedianRule};
use mosaix_core::mosaic::{build_mosaic, MosaicParams};
use mosaix_core::report::{render_table, EvalReport, TableFormat, TableOptions};
use mosaix_core::retrieval::{evaluate_lopo, majority_vote, retrieve, RetrievalError, SlideRef};
use mosaix_core::storage::{self, StorageError};
use serde::Serialize;
use thiserror::Error;

use crate::synth::{generate_synthetic, SynthError, SyntheticCohortSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<StorageError> for CliError {
    fn from(e: StorageError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Storage(s) => s.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Whole-slide image retrieval: mosaics, median-of-minimum search and
/// leave-one-patient-out evaluation.
#[derive(Debug, Parser)]
#[command(name = "mosaix", version)]
pub struct Cli {
    /// Seed for every randomized step (mosaic clustering, synthetic cohorts).
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads for parallel evaluation; 0 uses all available cores.
    /// Outputs do not depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Root directory for relative embedding_ref paths (overrides MOSAIX_DATA_DIR;
    /// defaults to the manifest's directory).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select the mosaic of one slide from its patch table.
    Mosaic(MosaicArgs),
    /// Convert float embedding files to min-max barcode files.
    ConvertBarcodes(ConvertArgs),
    /// Rank the corpus against one query slide.
    Search(SearchArgs),
    /// Leave-one-patient-out evaluation of a dataset; writes a prediction table.
    Eval(EvalArgs),
    /// Score prediction tables and render a backend comparison table.
    Report(ReportArgs),
    /// Generate a synthetic cohort (manifest plus embedding files).
    Synth(SynthArgs),
    /// Check a manifest and print every violation.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct MosaicArgs {
    /// Patch table CSV (patch_id,x,y,width,height,f0..f{F-1}).
    #[arg(long)]
    pub patches: PathBuf,
    /// Output JSON file with the selected patch ids.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of color clusters.
    #[arg(long, default_value_t = 9)]
    pub clusters: usize,
    /// Fraction of each cluster selected, in (0, 1].
    #[arg(long, default_value_t = 0.15)]
    pub fraction: f64,
    /// Minimum number of patches taken from each cluster.
    #[arg(long, default_value_t = 1)]
    pub min_per_cluster: usize,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Float embedding file to convert (single-file mode).
    #[arg(long, conflicts_with = "manifest", requires = "out")]
    pub input: Option<PathBuf>,
    /// Output barcode file (single-file mode).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest whose embedding files are all converted (dataset mode).
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    /// Output directory for barcode files and the rewritten manifest.json (dataset mode).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Patch distance: cosine, l2 (float embeddings) or hamming (barcodes).
    #[arg(long, default_value = "cosine")]
    pub metric: PatchDistanceMetric,
    /// Median of an even number of minima: midpoint (mean of the middle two) or lower.
    #[arg(long, default_value = "midpoint")]
    pub median_rule: MedianRule,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// wsi_id of the query slide.
    #[arg(long)]
    pub query: String,
    /// Number of top candidates shown and voted over.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Comma-separated k values for majority vote (1 is Top-1).
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub ks: Vec<usize>,
    /// Output prediction CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Prediction CSVs; each file is one backend, named by its file stem.
    #[arg(long, num_args = 1.., required = true)]
    pub predictions: Vec<PathBuf>,
    /// Dataset manifests; each prediction file is scored against the manifest
    /// that contains its query slides.
    #[arg(long, num_args = 1.., required = true)]
    pub labels: Vec<PathBuf>,
    /// Output format: markdown or csv.
    #[arg(long, default_value = "markdown")]
    pub format: TableFormat,
    /// Decimals of the percentages.
    #[arg(long, default_value_t = 0)]
    pub decimals: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (manifest.json and embeddings/).
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of classes.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Patients per class.
    #[arg(long, default_value_t = 40)]
    pub patients_per_class: usize,
    /// Slides per patient.
    #[arg(long, default_value_t = 1)]
    pub wsis_per_patient: usize,
    /// Mosaic patches (embedding rows) per slide.
    #[arg(long, default_value_t = 16)]
    pub patches: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Distance between class centroids in units of the within-class standard deviation.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Parses arguments and runs the selected subcommand, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The clap command tree, for documentation checks.
pub fn command() -> clap::Command {
    Cli::command()
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let threads = if cli.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cli.threads
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start {threads} threads: {e}")))?;
    let data_dir = storage::data_dir_from_env(cli.data_dir.as_deref());
    let ctx = Context {
        seed: cli.seed,
        threads,
        data_dir,
    };
    pool.install(|| match &cli.command {
        Command::Mosaic(a) => cmd_mosaic(&ctx, a),
        Command::ConvertBarcodes(a) => cmd_convert(&ctx, a),
        Command::Search(a) => cmd_search(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Validate(a) => cmd_validate(&ctx, a),
    })
}

struct Context {
    seed: u64,
    threads: usize,
    data_dir: Option<PathBuf>,
}

impl Context {
    fn echo(&self, command: &str, extra: &str) {
        let data_dir = self
            .data_dir
            .as_ref()
            .map_or_else(|| "-".to_owned(), |p| p.display().to_string());
        eprintln!(
            "mosaix {command}: seed={} threads={} data_dir={data_dir}{}{extra}",
            self.seed,
            self.threads,
            if extra.is_empty() { "" } else { " " }
        );
    }
}

fn write_output(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn load_valid_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    let manifest = storage::read_manifest(path)?;
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        return Err(CliError::Validation(format!(
            "{}: {} manifest violation(s)",
            path.display(),
            violations.len()
        )));
    }
    Ok(manifest)
}

#[derive(Serialize)]
struct MosaicOutput<'a> {
    source: String,
    params: &'a MosaicParams,
    n_patches: usize,
    mosaic: Vec<u64>,
}

fn cmd_mosaic(ctx: &Context, a: &MosaicArgs) -> Result<(), CliError> {
    let params = MosaicParams {
        n_clusters: a.clusters,
        selection_fraction: a.fraction,
        min_per_cluster: a.min_per_cluster,
        rng_seed: ctx.seed,
    };
    ctx.echo(
        "mosaic",
        &format!(
            "clusters={} fraction={} min_per_cluster={}",
            params.n_clusters, params.selection_fraction, params.min_per_cluster
        ),
    );
    let patches = storage::read_patch_table(&a.patches)?;
    let mosaic =
        build_mosaic(&patches, &params).map_err(|e| CliError::Validation(e.to_string()))?;
    let out = MosaicOutput {
        source: a
            .patches
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        params: &params,
        n_patches: patches.len(),
        mosaic,
    };
    let mut json = serde_json::to_string_pretty(&out).expect("serializable");
    json.push('\n');
    write_output(&a.out, json.as_bytes())?;
    eprintln!("selected {} of {} patches", out.mosaic.len(), out.n_patches);
    Ok(())
}

fn cmd_convert(ctx: &Context, a: &ConvertArgs) -> Result<(), CliError> {
    ctx.echo("convert-barcodes", "");
    match (&a.input, &a.out, &a.manifest, &a.out_dir) {
        (Some(input), Some(out), None, _) => {
            storage::convert_to_barcodes(input, out)?;
            Ok(())
        }
        (None, _, Some(manifest_path), Some(out_dir)) => {
            let mut manifest = load_valid_manifest(manifest_path)?;
            let base = manifest_dir(manifest_path);
            for wsi in &mut manifest.wsis {
                let src = storage::resolve_embedding_ref(
                    &wsi.embedding_ref,
                    &base,
                    ctx.data_dir.as_deref(),
                );
                let set = storage::read_embeddings(&src)?;
                let barcodes = binarize_set(&set)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", src.display())))?;
                let rel = format!("barcodes/{}.wsie", wsi.wsi_id);
                storage::write_embeddings(&barcodes, &out_dir.join(&rel))?;
                wsi.embedding_ref = rel;
            }
            manifest.name = format!("{}-barcodes", manifest.name);
            storage::write_manifest(&manifest, &out_dir.join("manifest.json"))?;
            Ok(())
        }
        _ => Err(CliError::Validation(
            "use either --input/--out or --manifest/--out-dir".into(),
        )),
    }
}

fn eval_config(r: &RetrievalArgs, ks: Vec<usize>) -> Result<EvalConfig, CliError> {
    EvalConfig::new(r.metric, ks, r.median_rule).map_err(|e| CliError::Validation(e.to_string()))
}

fn cmd_search(ctx: &Context, a: &SearchArgs) -> Result<(), CliError> {
    let config = eval_config(&a.retrieval, vec![a.k])?;
    ctx.echo(
        "search",
        &format!(
            "metric={} median_rule={} k={} query={}",
            config.metric, config.median_rule, a.k, a.query
        ),
    );
    let manifest = load_valid_manifest(&a.retrieval.manifest)?;
    let embeddings = storage::load_embeddings(
        &manifest,
        &manifest_dir(&a.retrieval.manifest),
        ctx.data_dir.as_deref(),
    )?;
    let query = manifest.wsi(&a.query).ok_or_else(|| {
        CliError::Validation(format!("query '{}' is not in the manifest", a.query))
    })?;
    let corpus: Vec<SlideRef<'_>> = manifest
        .wsis
        .iter()
        .map(|w| SlideRef::new(w, &embeddings[&w.wsi_id]))
        .collect();
    let ranked = retrieve(
        SlideRef::new(query, &embeddings[&query.wsi_id]),
        &corpus,
        &config,
    )
    .map_err(|e| CliError::Validation(e.to_string()))?;
    let vote = majority_vote(&ranked, a.k).map_err(|e| CliError::Validation(e.to_string()))?;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "query {} (patient {}, label {})",
        query.wsi_id, query.patient_id, query.label
    );
    let _ = writeln!(out, "rank\twsi_id\tpatient_id\tlabel\tdistance");
    for (i, c) in ranked.candidates.iter().take(a.k).enumerate() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}",
            i + 1,
            c.wsi_id,
            c.patient_id,
            c.label,
            c.distance
        );
    }
    let _ = writeln!(
        out,
        "MV@{}: {}{}",
        a.k,
        vote.predicted_label,
        if vote.tie_broken {
            " (tie broken by rank)"
        } else {
            ""
        }
    );
    print!("{out}");
    Ok(())
}

fn cmd_eval(ctx: &Context, a: &EvalArgs) -> Result<(), CliError> {
    let config = eval_config(&a.retrieval, a.ks.clone())?;
    let ks: Vec<String> = config.k_values().iter().map(ToString::to_string).collect();
    ctx.echo(
        "eval",
        &format!(
            "metric={} median_rule={} ks={}",
            config.metric,
            config.median_rule,
            ks.join(",")
        ),
    );
    let manifest = load_valid_manifest(&a.retrieval.manifest)?;
    let embeddings = storage::load_embeddings(
        &manifest,
        &manifest_dir(&a.retrieval.manifest),
        ctx.data_dir.as_deref(),
    )?;
    let (evaluation, failed) = match evaluate_lopo(&manifest, &embeddings, &config) {
        Ok(e) => (e, false),
        Err(RetrievalError::AllQueriesFailed { evaluation }) => (*evaluation, true),
        Err(e) => return Err(CliError::Validation(e.to_string())),
    };
    storage::write_predictions_file(&evaluation.prediction_rows(), &a.out)?;
    for q in evaluation.queries.iter().filter(|q| !q.is_scored()) {
        eprintln!(
            "skipped {}: no candidates after excluding patient {}",
            q.wsi_id, q.patient_id
        );
    }
    eprintln!(
        "scored {} of {} queries; predictions written to {}",
        evaluation.n_scored(),
        evaluation.queries.len(),
        a.out.display()
    );
    if failed {
        return Err(CliError::Validation(
            "every query lacked candidates after patient exclusion".into(),
        ));
    }
    Ok(())
}

fn cmd_report(ctx: &Context, a: &ReportArgs) -> Result<(), CliError> {
    ctx.echo(
        "report",
        &format!("format={:?} decimals={}", a.format, a.decimals),
    );
    let manifests = a
        .labels
        .iter()
        .map(|p| storage::read_manifest(p).map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports = Vec::new();
    for path in &a.predictions {
        let rows = storage::read_predictions_file(path)?;
        let manifest = manifests
            .iter()
            .find(|m| rows.iter().all(|r| m.wsi(&r.query_wsi_id).is_some()))
            .ok_or_else(|| {
                CliError::Validation(format!(
                    "{}: no manifest contains all of its query slides",
                    path.display()
                ))
            })?;
        let backend = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let report =
            EvalReport::from_predictions(&manifest.name, backend, &manifest.classes, &rows)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        reports.push(report);
    }
    let table = render_table(&reports, a.format, &TableOptions::with_decimals(a.decimals))
        .map_err(|e| CliError::Validation(e.to_string()))?;
    match &a.out {
        Some(out) => write_output(out, table.as_bytes())?,
        None => print!("{table}"),
    }
    Ok(())
}

fn cmd_synth(ctx: &Context, a: &SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticCohortSpec {
        n_classes: a.classes,
        patients_per_class: a.patients_per_class,
        wsis_per_patient: a.wsis_per_patient,
        patches_per_mosaic: a.patches,
        dim: a.dim,
        class_separation: a.separation,
        rng_seed: ctx.seed,
    };
    ctx.echo(
        "synth",
        &format!(
            "classes={} patients_per_class={} wsis_per_patient={} patches={} dim={} separation={}",
            spec.n_classes,
            spec.patients_per_class,
            spec.wsis_per_patient,
            spec.patches_per_mosaic,
            spec.dim,
            spec.class_separation
        ),
    );
    let manifest = generate_synthetic(&spec, &a.out_dir)?;
    eprintln!(
        "wrote {} slides to {}",
        manifest.wsis.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_validate(ctx: &Context, a: &ValidateArgs) -> Result<(), CliError> {
    ctx.echo("validate", "");
    let manifest = load_valid_manifest(&a.manifest)?;
    println!(
        "{}: valid ({} slides, {} patients, {} classes)",
        manifest.name,
        manifest.wsis.len(),
        manifest.patient_count(),
        manifest.classes.len()
    );
    Ok(())
}
