//! The `eqt` command line: `validate`, `run` and `report`.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::Deserialize;

use crate::catalog::{load_concepts, CatalogError, ConceptSet};
use crate::client::{AnswerPolicy, BackendConfig, ChatBackend, HttpBackend, MockBackend};
use crate::parser::ParseMode;
use crate::pipeline::{
    Backends, GenerationSettings, ModelSpec, Pipeline, PipelineError, RunConfig, Stage, StoreError,
};
use crate::prompt::Templates;
use crate::report::{build_report, export, load_baseline, parse_formats, render_stability_table, ReportError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

/// Profile name that selects the built-in deterministic backend.
pub const MOCK_PROFILE: &str = "mock";

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  usage, configuration or I/O error; config errors are caught before any backend call
  2  invalid catalog, baseline or run store contents
  3  run finished with partial failures; the store is valid and can be resumed or reported";

#[derive(Debug, Parser)]
#[command(name = "eqt", version, about = "Explain-Query-Test self-evaluation for language models", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a concept catalog and print its size.
    #[command(after_help = EXIT_CODES)]
    Validate(ValidateArgs),
    /// Run (or resume) the explain, query and test stages into an output directory.
    #[command(after_help = EXIT_CODES)]
    Run(RunArgs),
    /// Compute metrics from a run directory and write exports.
    #[command(after_help = EXIT_CODES)]
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long, env = "EQT_CATALOG")]
    catalog: PathBuf,
}

/// Flags override `EQT_*` environment variables, which override the config
/// file, which overrides built-in defaults.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML file with run settings and backend profiles.
    #[arg(long, env = "EQT_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "EQT_CATALOG")]
    catalog: Option<PathBuf>,
    /// Default backend profile for models given without `@profile`; `mock` is built in.
    #[arg(long, env = "EQT_BACKEND")]
    backend: Option<String>,
    /// Comma-separated model ids, each optionally suffixed with `@profile`.
    #[arg(long, env = "EQT_MODELS", value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long, env = "EQT_QUESTIONS_PER_CONCEPT")]
    questions_per_concept: Option<usize>,
    #[arg(long, env = "EQT_PARAPHRASES")]
    paraphrases: Option<usize>,
    #[arg(long, env = "EQT_NUM_OPTIONS")]
    num_options: Option<usize>,
    #[arg(long, env = "EQT_SEED")]
    seed: Option<u64>,
    /// Output directory holding the run store.
    #[arg(long, env = "EQT_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "EQT_PARALLELISM")]
    parallelism: Option<usize>,
    /// Directory with `<stage>.txt` files replacing the built-in prompt templates.
    #[arg(long, env = "EQT_TEMPLATES")]
    templates: Option<PathBuf>,
    /// Mock answer policy: seeded, oracle, constant:<letters> or noisy:<p>.
    #[arg(long, env = "EQT_MOCK_ANSWERS")]
    mock_answers: Option<String>,
    /// Stop after this stage (explain, query or test).
    #[arg(long)]
    stop_after: Option<Stage>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory written by `eqt run`.
    #[arg(long, env = "EQT_STORE")]
    store: PathBuf,
    /// CSV with header `model,category,accuracy`.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Comma-separated export formats: csv, json, markdown.
    #[arg(long, default_value = "csv,json,markdown")]
    format: String,
    /// Export directory [default: <store>/report].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the markdown stability table to stdout.
    #[arg(long)]
    print: bool,
}

/// Settings read from `--config`. Relative paths resolve against the file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    catalog: Option<PathBuf>,
    backend: Option<String>,
    models: Option<Vec<String>>,
    questions_per_concept: Option<usize>,
    paraphrases: Option<usize>,
    num_options: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    parallelism: Option<usize>,
    templates: Option<PathBuf>,
    mock_answers: Option<String>,
    question_types: Option<Vec<String>>,
    parse_mode: Option<ParseMode>,
    cross_model_answering: Option<bool>,
    generation: Option<GenerationSettings>,
    #[serde(default)]
    backends: IndexMap<String, BackendConfig>,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }

    fn invalid(message: impl fmt::Display) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.to_string(),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Baseline { .. } | ReportError::UnknownModel(_) | ReportError::UnknownCategory(_) => {
                Failure::invalid(e)
            }
            e => Failure::config(e),
        }
    }
}

fn catalog_failure(path: &Path, e: CatalogError) -> Failure {
    match e {
        CatalogError::Io { .. } => Failure::config(e),
        e => Failure::invalid(format!("{}: {e}", path.display())),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .try_init();
    let outcome = match cli.command {
        Command::Validate(a) => cmd_validate(&a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn cmd_validate(args: &ValidateArgs) -> Result<i32, Failure> {
    let set = load_concepts(&args.catalog).map_err(|e| catalog_failure(&args.catalog, e))?;
    println!("{} concepts in {} categories", set.len(), set.categories().len());
    Ok(EXIT_OK)
}

fn load_file_config(path: &Path) -> Result<FileConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut file: FileConfig =
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut file.catalog, &mut file.out, &mut file.templates].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(file)
}

/// Splits `id@profile`; a bare id gets `default_backend`.
fn model_specs(entries: &[String], default_backend: Option<&str>) -> Result<Vec<ModelSpec>, Failure> {
    entries
        .iter()
        .map(|e| e.trim())
        .filter(|e| !e.is_empty())
        .map(|e| match e.rsplit_once('@') {
            Some((id, profile)) if !id.is_empty() && !profile.is_empty() => Ok(ModelSpec::new(id, profile)),
            Some(_) => Err(Failure::config(format!("malformed model entry '{e}' (expected id or id@profile)"))),
            None => default_backend
                .map(|b| ModelSpec::new(e, b))
                .ok_or_else(|| Failure::config(format!("model '{e}' has no backend; pass --backend or use '{e}@profile'"))),
        })
        .collect()
}

struct Resolved {
    config: RunConfig,
    templates: Templates,
    profiles: IndexMap<String, BackendConfig>,
    mock_answers: AnswerPolicy,
}

fn resolve(args: RunArgs) -> Result<Resolved, Failure> {
    let file = match &args.config {
        Some(path) => load_file_config(path)?,
        None => FileConfig::default(),
    };
    let catalog_path = args
        .catalog
        .or(file.catalog)
        .ok_or_else(|| Failure::config("no catalog given (--catalog or EQT_CATALOG)"))?;
    let concept_set: ConceptSet = load_concepts(&catalog_path).map_err(|e| catalog_failure(&catalog_path, e))?;

    let backend = args.backend.or(file.backend);
    let model_entries = if args.models.is_empty() {
        file.models.unwrap_or_default()
    } else {
        args.models
    };
    let models = model_specs(&model_entries, backend.as_deref())?;
    let out = args.out.or(file.out).unwrap_or_else(|| PathBuf::from("eqt-run"));

    let mut config = RunConfig::new(concept_set, models, out);
    if let Some(q) = args.questions_per_concept.or(file.questions_per_concept) {
        config.questions_per_concept = q;
    }
    if let Some(k) = args.paraphrases.or(file.paraphrases) {
        config.paraphrases_per_question = k;
    }
    if let Some(n) = args.num_options.or(file.num_options) {
        config.num_options = n;
    }
    if let Some(seed) = args.seed.or(file.seed) {
        config.run_seed = seed;
    }
    if let Some(p) = args.parallelism.or(file.parallelism) {
        config.parallelism = p;
    }
    if let Some(types) = file.question_types {
        config.question_types = types;
    }
    if let Some(mode) = file.parse_mode {
        config.answer_parse_mode = mode;
    }
    if let Some(cross) = file.cross_model_answering {
        config.cross_model_answering = cross;
    }
    if let Some(generation) = file.generation {
        config.generation = generation;
    }
    config.validate().map_err(Failure::config)?;

    let templates = match args.templates.or(file.templates) {
        Some(dir) => Templates::with_overrides(&dir).map_err(Failure::config)?,
        None => Templates::embedded(),
    };
    let mock_answers = match args.mock_answers.or(file.mock_answers) {
        Some(s) => s.parse().map_err(Failure::config)?,
        None => AnswerPolicy::Seeded,
    };
    if file.backends.contains_key(MOCK_PROFILE) {
        return Err(Failure::config(format!("backend profile name '{MOCK_PROFILE}' is reserved")));
    }
    Ok(Resolved {
        config,
        templates,
        profiles: file.backends,
        mock_answers,
    })
}

/// One backend per profile referenced by the models.
fn build_backends(r: &Resolved) -> Result<Backends, Failure> {
    let mut backends: Backends = HashMap::new();
    let used: BTreeSet<&str> = r.config.models.iter().map(|m| m.backend.as_str()).collect();
    for profile in used {
        let backend: Arc<dyn ChatBackend> = if profile == MOCK_PROFILE {
            Arc::new(MockBackend::seeded(r.config.run_seed).with_answers(r.mock_answers.clone()))
        } else {
            let cfg = r
                .profiles
                .get(profile)
                .ok_or_else(|| Failure::config(format!("unknown backend profile '{profile}'")))?;
            let http = HttpBackend::new(cfg.clone())
                .map_err(|e| Failure::config(format!("backend profile '{profile}': {e}")))?;
            Arc::new(http)
        };
        backends.insert(profile.to_string(), backend);
    }
    Ok(backends)
}

fn cmd_run(args: RunArgs) -> Result<i32, Failure> {
    let stop_after = args.stop_after;
    let resolved = resolve(args)?;
    let backends = build_backends(&resolved)?;
    let out = resolved.config.output_dir.clone();
    let pipeline = Pipeline::new(resolved.config, resolved.templates, backends).map_err(Failure::config)?;
    let summary = pipeline.run_until(stop_after).map_err(|e| match e {
        PipelineError::Store(StoreError::Malformed { .. }) => Failure::invalid(e),
        e => Failure::config(e),
    })?;
    println!("{}: {summary}", out.display());
    if summary.has_partial_failures() {
        log::warn!("some items failed; see {}", out.join(crate::pipeline::FAILURES_FILE).display());
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

fn cmd_report(args: &ReportArgs) -> Result<i32, Failure> {
    let formats = parse_formats(&args.format)?;
    let store = crate::pipeline::RunStore::open(&args.store).map_err(Failure::config)?;
    let baseline = args.baseline.as_deref().map(load_baseline).transpose()?;
    let bundle = build_report(&store, baseline.as_deref())?;
    let out = args.out.clone().unwrap_or_else(|| args.store.join("report"));
    for path in export(&bundle, &formats, &out)? {
        log::info!("wrote {}", path.display());
    }
    if args.print {
        print!("{}", render_stability_table(&bundle.stability));
    }
    if let Some(cmp) = &bundle.comparison {
        match (&cmp.correlation, &cmp.correlation_note) {
            (Some(c), _) => println!("r={:.6} p={:.6e} n={}", c.r, c.p_value, c.n),
            (None, Some(note)) => println!("{note}"),
            (None, None) => {}
        }
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_entries() {
        let specs = model_specs(&["a".into(), " b@remote ".into(), "".into()], Some("mock")).unwrap();
        assert_eq!(specs, vec![ModelSpec::new("a", "mock"), ModelSpec::new("b", "remote")]);
        assert!(model_specs(&["a".into()], None).is_err());
        assert!(model_specs(&["a@".into()], Some("mock")).is_err());
    }

    #[test]
    fn file_config_rejects_unknown_keys() {
        assert!(toml::from_str::<FileConfig>("seed = 1\nsede = 2\n").is_err());
        let f: FileConfig = toml::from_str(
            "models = [\"m\"]\nparse_mode = \"strict\"\n[backends.remote]\nendpoint_url = \"http://localhost:1/v1\"\n",
        )
        .unwrap();
        assert_eq!(f.parse_mode, Some(ParseMode::Strict));
        assert_eq!(f.backends["remote"].retry_limit, 3);
    }

    #[test]
    fn example_config_parses() {
        let f: FileConfig = toml::from_str(include_str!("../../../docs/eqt.example.toml")).unwrap();
        let specs = model_specs(&f.models.unwrap(), f.backend.as_deref()).unwrap();
        assert_eq!(specs[1], ModelSpec::new("claude-3-5-sonnet", "anthropic"));
        assert_eq!(f.generation.unwrap(), GenerationSettings::default());
        assert_eq!(f.backends["openai"].requests_per_minute_cap, Some(500));
    }

    #[test]
    fn help_lists_exit_codes() {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        let help = cmd.render_long_help().to_string();
        assert!(help.contains("3  run finished with partial failures"));
    }
}
