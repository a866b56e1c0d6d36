//! Command-line front end.
//!
//! Every command reads a JSON [`RunConfig`] (optional) and applies flag
//! overrides on top. Machine-readable output goes to a file, a short summary
//! to stdout. Exit codes: 0 success, 1 other failure, 2 usage, 3 invalid
//! configuration, 4 missing or unreadable input, 5 invalid data, 6 generation.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::corpus::{
    load_sessions, parse_sessions, sessions_to_jsonl, Corpus, CorpusError, DialogueContext,
    LoadMode, Session, Utterance, Vocabularies,
};
use crate::demo_selector::{BagEmbedder, DemoIndex, Embedder, SidecarEmbedder};
use crate::knowledge::{KnowledgeError, KnowledgeGraph};
use crate::metrics::{evaluate_corpus, extract_entities, GeneratedResponse};
use crate::numerics::OptimizerKind;
use crate::pipeline::{build_turn_prompt, DemoPool, PredictionRecord, PromptSettings, TurnPrompt};
use crate::predictor::{prepare_examples, train_stage1, MedRefModel, PredictorError};
use crate::prompt::{
    generate_response, GenerationClient, GenerationRequest, PredictedLabels, PromptTemplate,
};
use crate::synthetic::{generate as synthesize, SyntheticConfig};

pub use config::{GeneratorKind, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Other = 1,
    Usage = 2,
    Config = 3,
    Input = 4,
    Validation = 5,
    Generation = 6,
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub error: anyhow::Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

fn fail(category: Category, msg: impl std::fmt::Display) -> CliError {
    CliError {
        category,
        error: anyhow::anyhow!("{msg}"),
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let category = match e {
            CorpusError::Io { .. } => Category::Input,
            _ => Category::Validation,
        };
        CliError { category, error: e.into() }
    }
}

impl From<KnowledgeError> for CliError {
    fn from(e: KnowledgeError) -> Self {
        let category = match e {
            KnowledgeError::Io { .. } => Category::Input,
            KnowledgeError::Malformed { .. } => Category::Validation,
        };
        CliError { category, error: e.into() }
    }
}

impl From<PredictorError> for CliError {
    fn from(e: PredictorError) -> Self {
        let category = match e {
            PredictorError::Io(_) => Category::Input,
            PredictorError::Config(_) => Category::Config,
            _ => Category::Validation,
        };
        CliError { category, error: e.into() }
    }
}

type CliResult<T> = Result<T, CliError>;

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "medref", version, about = "Knowledge-grounded medical dialogue pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override the JSON configuration.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Label vocabularies (JSON with `entities` and `acts` lists).
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    pub graph: Option<PathBuf>,
    /// `jsonl` or `tsv`.
    #[arg(long, global = true, value_parser = parse_enum::<crate::knowledge::TripletFormat>)]
    pub graph_format: Option<crate::knowledge::TripletFormat>,
    #[arg(long, global = true)]
    pub demo_corpus: Option<PathBuf>,
    /// JSONL sidecar `{"id", "vector"}` replacing the bag-of-tokens embedder.
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub template: Option<PathBuf>,
    #[arg(long, global = true)]
    pub instruction: Option<PathBuf>,
    /// `en` or `zh`.
    #[arg(long, global = true, value_parser = parse_enum::<crate::prompt::Locale>)]
    pub locale: Option<crate::prompt::Locale>,
    /// `auto`, `whitespace` or `char`.
    #[arg(long, global = true, value_parser = parse_enum::<crate::text::TokenizerMode>)]
    pub tokenizer: Option<crate::text::TokenizerMode>,
    /// Maximum triplets in a prompt (M).
    #[arg(long, global = true)]
    pub max_triplets: Option<usize>,
    /// Demonstration window (xi).
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// `compute-once` or `recompute`.
    #[arg(long, global = true, value_parser = parse_enum::<crate::knowledge::FrequencyMode>)]
    pub frequency_mode: Option<crate::knowledge::FrequencyMode>,
    #[arg(long, global = true)]
    pub lambda_x: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_a: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_kl: Option<f64>,
    #[arg(long, global = true)]
    pub d: Option<usize>,
    #[arg(long, global = true)]
    pub d_z: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// `adam` or `sgd`.
    #[arg(long, global = true, value_parser = parse_enum::<OptimizerKind>)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub generator: Option<GeneratorKind>,
    #[arg(long, global = true)]
    pub endpoint_url: Option<String>,
    #[arg(long, global = true)]
    pub endpoint_model: Option<String>,
    /// Environment variable holding the endpoint token.
    #[arg(long, global = true)]
    pub token_env: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus and write its label vocabularies.
    Ingest {
        #[arg(long, default_value = "vocab.json")]
        out: PathBuf,
    },
    /// Build the demonstration index over the demo corpus.
    BuildIndex {
        #[arg(long, default_value = "demo-index.json")]
        out: PathBuf,
    },
    /// Train the entity/act predictor and write a checkpoint.
    Train {
        /// Per-epoch JSONL log; defaults to `<checkpoint>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict entities and acts for one turn or every turn of the corpus.
    Predict {
        #[arg(long)]
        session: Option<String>,
        #[arg(long, requires = "session")]
        turn: Option<usize>,
        #[arg(long, default_value = "predictions.jsonl")]
        out: PathBuf,
    },
    /// Render the system prompt for one turn.
    AssemblePrompt {
        #[arg(long)]
        session: String,
        #[arg(long)]
        turn: usize,
        /// Prediction JSONL to use instead of running the checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "prompt.txt")]
        out: PathBuf,
    },
    /// Generate doctor responses for one turn or every answered turn.
    Generate {
        #[arg(long)]
        session: Option<String>,
        #[arg(long, requires = "session")]
        turn: Option<usize>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "generated.jsonl")]
        out: PathBuf,
    },
    /// Score generated responses against the corpus.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Interactive consultation on stdin/stdout.
    Chat {
        /// Also print predicted labels and the filter threshold.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Print the effective configuration as JSON.
    ShowConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus, graph and vocabularies.
    Synth {
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        sessions: usize,
        #[arg(long, default_value_t = 12)]
        entities: usize,
    },
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) {
        macro_rules! set {
            ($($src:ident => $dst:ident),* $(,)?) => {
                $(if let Some(v) = &self.$src { c.$dst = v.clone().into(); })*
            };
        }
        set!(
            corpus => corpus, vocab => vocab, graph => graph, demo_corpus => demo_corpus,
            embeddings => embeddings, template => template, instruction => instruction,
        );
        set!(
            graph_format => graph_format, checkpoint => checkpoint, locale => locale,
            tokenizer => tokenizer, max_triplets => max_triplets, window => window,
            frequency_mode => frequency_mode, lambda_x => lambda_x, lambda_a => lambda_a,
            lambda_kl => lambda_kl, d => d, d_z => d_z, lr => learning_rate, epochs => epochs,
            batch_size => batch_size, optimizer => optimizer, threshold => threshold,
            seed => seed, generator => generator,
        );
        if let Some(v) = &self.endpoint_url {
            c.endpoint.url = v.clone();
        }
        if let Some(v) = &self.endpoint_model {
            c.endpoint.model = v.clone();
        }
        if let Some(v) = &self.token_env {
            c.endpoint.token_env = v.clone();
        }
    }

    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) if !p.exists() => {
                return Err(fail(Category::Input, format!("config file {} not found", p.display())))
            }
            Some(p) => RunConfig::load(p).map_err(|e| fail(Category::Config, e))?,
            None => RunConfig::default(),
        };
        self.apply(&mut c);
        c.validate().map_err(|e| fail(Category::Config, e))?;
        Ok(c)
    }
}

/// Parses `args` and runs the command with the given stdio.
pub fn run_with<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Category::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli, stdin, stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category as u8)
        }
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| fail(Category::Config, format!("no {flag} given (use --{flag} or the config file)")))
}

fn load_vocab(cfg: &RunConfig) -> CliResult<Option<Vocabularies>> {
    cfg.vocab.as_deref().map(Vocabularies::load).transpose().map_err(Into::into)
}

fn load_corpus(cfg: &RunConfig, mode: LoadMode) -> CliResult<Corpus> {
    let path = require(&cfg.corpus, "corpus")?;
    Ok(load_sessions(path, load_vocab(cfg)?, mode)?)
}

fn load_demo_corpus(cfg: &RunConfig, fallback: &Corpus) -> CliResult<Corpus> {
    match &cfg.demo_corpus {
        Some(p) => Ok(load_sessions(p, None, LoadMode::Training)?),
        None => Ok(fallback.clone()),
    }
}

fn load_graph(cfg: &RunConfig) -> CliResult<KnowledgeGraph> {
    let path = require(&cfg.graph, "graph")?;
    Ok(KnowledgeGraph::load(path, cfg.graph_format)?)
}

fn load_model(cfg: &RunConfig) -> CliResult<MedRefModel> {
    if !cfg.checkpoint.exists() {
        return Err(fail(
            Category::Input,
            format!("checkpoint {} not found (run `medref train` first)", cfg.checkpoint.display()),
        ));
    }
    Ok(MedRefModel::load(&cfg.checkpoint)?)
}

fn load_template(cfg: &RunConfig) -> CliResult<PromptTemplate> {
    let builtin = PromptTemplate::builtin(cfg.locale);
    let mut t = match &cfg.template {
        Some(p) => PromptTemplate::load(p)
            .map_err(|e| fail(Category::Config, e))?
            .with_instruction(builtin.instruction.clone()),
        None => builtin,
    };
    if let Some(p) = &cfg.instruction {
        let text = read_input(p)?;
        t = t.with_instruction(text.trim_end().to_string());
    }
    Ok(t)
}

fn load_embedder(cfg: &RunConfig) -> CliResult<Box<dyn Embedder>> {
    match &cfg.embeddings {
        Some(p) => Ok(Box::new(SidecarEmbedder::load(p).map_err(|e| fail(Category::Input, e))?)),
        None => Ok(Box::new(BagEmbedder)),
    }
}

fn read_input(p: &Path) -> CliResult<String> {
    fs::read_to_string(p).map_err(|e| fail(Category::Input, format!("{}: {e}", p.display())))
}

fn write_output(p: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| fail(Category::Other, format!("{}: {e}", dir.display())))?;
    }
    fs::write(p, text).map_err(|e| fail(Category::Other, format!("{}: {e}", p.display())))
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| serde_json::to_string(x).expect("serializable") + "\n")
        .collect()
}

fn read_jsonl<T: DeserializeOwned>(p: &Path) -> CliResult<Vec<T>> {
    let text = read_input(p)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| fail(Category::Validation, format!("{} line {}: {e}", p.display(), i + 1)))
        })
        .collect()
}

type PredictionTable = BTreeMap<(String, usize), PredictionRecord>;

fn load_predictions(p: &Path) -> CliResult<PredictionTable> {
    let records: Vec<PredictionRecord> = read_jsonl(p)?;
    Ok(records
        .into_iter()
        .map(|r| ((r.session.clone(), r.turn), r))
        .collect())
}

/// Labels for a context: from a prediction table when given, else from the model.
enum LabelSource {
    Table(PredictionTable),
    Model(Box<MedRefModel>),
}

impl LabelSource {
    fn open(cfg: &RunConfig, predictions: Option<&Path>) -> CliResult<Self> {
        match predictions {
            Some(p) => Ok(LabelSource::Table(load_predictions(p)?)),
            None => Ok(LabelSource::Model(Box::new(load_model(cfg)?))),
        }
    }

    fn labels(
        &self,
        ctx: &DialogueContext,
        kg: &KnowledgeGraph,
        threshold: f64,
    ) -> CliResult<(PredictedLabels, Option<crate::predictor::Prediction>)> {
        match self {
            LabelSource::Table(t) => {
                let id = ctx.session_id.clone().unwrap_or_default();
                let rec = t.get(&(id.clone(), ctx.turn)).ok_or_else(|| {
                    fail(Category::Input, format!("no prediction for session {id} turn {}", ctx.turn))
                })?;
                Ok((rec.labels(), None))
            }
            LabelSource::Model(m) => {
                let p = m.predict(ctx, kg, threshold)?;
                let labels = PredictedLabels {
                    entities: p.entities.clone(),
                    acts: p.acts.clone(),
                };
                Ok((labels, Some(p)))
            }
        }
    }
}

struct PromptKit {
    template: PromptTemplate,
    demo_corpus: Corpus,
    index: DemoIndex,
    embedder: Box<dyn Embedder>,
}

impl PromptKit {
    fn open(cfg: &RunConfig, corpus: &Corpus) -> CliResult<Self> {
        let demo_corpus = load_demo_corpus(cfg, corpus)?;
        let index = DemoIndex::build(&demo_corpus);
        Ok(Self {
            template: load_template(cfg)?,
            demo_corpus,
            index,
            embedder: load_embedder(cfg)?,
        })
    }

    fn build(
        &self,
        cfg: &RunConfig,
        ctx: &DialogueContext,
        labels: &PredictedLabels,
        kg: &KnowledgeGraph,
    ) -> CliResult<TurnPrompt> {
        let pool = DemoPool {
            corpus: &self.demo_corpus,
            index: &self.index,
            embedder: self.embedder.as_ref(),
        };
        let settings = PromptSettings {
            template: &self.template,
            max_triplets: cfg.max_triplets,
            window: cfg.window,
            frequency_mode: cfg.frequency_mode,
        };
        build_turn_prompt(ctx, labels, kg, Some(&pool), &settings)
            .map_err(|e| fail(Category::Validation, e))
    }
}

fn client(cfg: &RunConfig) -> GenerationClient {
    match cfg.generator {
        GeneratorKind::Stub => GenerationClient::Stub,
        GeneratorKind::Http => GenerationClient::Http(cfg.endpoint.clone()),
    }
}

fn turns_of(corpus: &Corpus, session: Option<&str>, turn: Option<usize>, answered: bool) -> CliResult<Vec<(String, usize)>> {
    let sessions: Vec<&Session> = match session {
        Some(id) => vec![corpus.session(id)?],
        None => corpus.sessions().iter().collect(),
    };
    let mut out = Vec::new();
    for s in sessions {
        match turn {
            Some(t) => out.push((s.id.clone(), t)),
            None => {
                let last = if answered { s.answered_turns() } else { s.turn_count() };
                out.extend((1..=last).map(|t| (s.id.clone(), t)));
            }
        }
    }
    Ok(out)
}

fn execute(cli: &Cli, stdin: &mut dyn BufRead, out: &mut dyn Write) -> CliResult<()> {
    let cfg = cli.overrides.resolve()?;
    let say = |out: &mut dyn Write, msg: String| -> CliResult<()> {
        writeln!(out, "{msg}").map_err(|e| fail(Category::Other, e))
    };
    match &cli.command {
        Command::ShowConfig { out: path } => {
            let json = cfg.to_json() + "\n";
            if let Some(p) = path {
                write_output(p, &json)?;
            }
            out.write_all(json.as_bytes()).map_err(|e| fail(Category::Other, e))?;
        }
        Command::Synth { out: dir, sessions, entities } => {
            if *entities < 2 || *entities > 16 {
                return Err(fail(Category::Config, "--entities must lie in 2..=16"));
            }
            let data = synthesize(&SyntheticConfig {
                sessions: *sessions,
                entities: *entities,
                seed: cfg.seed,
                ..SyntheticConfig::default()
            });
            write_output(&dir.join("sessions.jsonl"), &sessions_to_jsonl(&data.sessions))?;
            write_output(&dir.join("triplets.jsonl"), &jsonl(data.graph.triplets()))?;
            let vocab = serde_json::to_string_pretty(&data.vocabularies()).expect("serializable");
            write_output(&dir.join("vocab.json"), &(vocab + "\n"))?;
            say(out, format!(
                "wrote {} sessions and {} triplets to {}",
                data.sessions.len(),
                data.graph.len(),
                dir.display()
            ))?;
        }
        Command::Ingest { out: path } => {
            let corpus = load_corpus(&cfg, LoadMode::Training)?;
            let json = serde_json::to_string_pretty(&corpus.vocab).expect("serializable");
            write_output(path, &(json + "\n"))?;
            say(out, format!(
                "{} sessions, {} answered turns, {} entities, {} acts; vocabularies written to {}",
                corpus.len(),
                corpus.answered_turns().len(),
                corpus.vocab.entities.len(),
                corpus.vocab.acts.len(),
                path.display()
            ))?;
        }
        Command::BuildIndex { out: path } => {
            let base = match &cfg.demo_corpus {
                Some(_) => Corpus::default(),
                None => load_corpus(&cfg, LoadMode::Training)?,
            };
            let demo = load_demo_corpus(&cfg, &base)?;
            let index = DemoIndex::build(&demo);
            let json = serde_json::to_string_pretty(&index.listing()).expect("serializable");
            write_output(path, &(json + "\n"))?;
            say(out, format!(
                "indexed {} entity sets from {} sessions into {}",
                index.entity_sets().count(),
                demo.len(),
                path.display()
            ))?;
        }
        Command::Train { log } => {
            let corpus = load_corpus(&cfg, LoadMode::Training)?;
            let kg = load_graph(&cfg)?;
            let mut model = MedRefModel::for_corpus(cfg.model_config(), &corpus, &kg);
            let examples = prepare_examples(&model, &corpus, &kg)?;
            let log_path = log.clone().unwrap_or_else(|| {
                let mut p = cfg.checkpoint.clone().into_os_string();
                p.push(".log.jsonl");
                PathBuf::from(p)
            });
            let mut buf = Vec::new();
            let outcome = if cfg.epochs == 0 {
                None
            } else {
                Some(train_stage1(&mut model, &examples, &cfg.train_config(), Some(&mut buf))?)
            };
            write_output(&log_path, &String::from_utf8(buf).expect("utf-8 log"))?;
            model.save(&cfg.checkpoint)?;
            let summary = match outcome.as_ref().and_then(|o| o.history.last().cloned()) {
                Some(last) => format!(
                    "{} examples, {} epochs, final loss {:.4}, entity-F1 {:.3}; checkpoint {}",
                    examples.len(),
                    last.epoch,
                    last.mean_loss,
                    last.entity_f1.unwrap_or(f64::NAN),
                    cfg.checkpoint.display()
                ),
                None => format!("no training epochs; initial checkpoint {}", cfg.checkpoint.display()),
            };
            say(out, summary)?;
        }
        Command::Predict { session, turn, out: path } => {
            let corpus = load_corpus(&cfg, LoadMode::Inference)?;
            let kg = load_graph(&cfg)?;
            let model = load_model(&cfg)?;
            let mut records = Vec::new();
            for (id, t) in turns_of(&corpus, session.as_deref(), *turn, false)? {
                let ctx = corpus.session(&id)?.context_at_turn(t)?;
                let p = model.predict(&ctx, &kg, cfg.threshold)?;
                records.push(PredictionRecord {
                    session: id,
                    turn: t,
                    entities: p.entities,
                    acts: p.acts,
                });
            }
            write_output(path, &jsonl(&records))?;
            if let [one] = records.as_slice() {
                say(out, format!("entities: {:?}\nacts: {:?}", one.entities, one.acts))?;
            }
            say(out, format!("{} predictions written to {}", records.len(), path.display()))?;
        }
        Command::AssemblePrompt { session, turn, predictions, out: path } => {
            let corpus = load_corpus(&cfg, LoadMode::Inference)?;
            let kg = load_graph(&cfg)?;
            let source = LabelSource::open(&cfg, predictions.as_deref())?;
            let kit = PromptKit::open(&cfg, &corpus)?;
            let ctx = corpus.session(session)?.context_at_turn(*turn)?;
            let (labels, _) = source.labels(&ctx, &kg, cfg.threshold)?;
            let p = kit.build(&cfg, &ctx, &labels, &kg)?;
            write_output(path, &p.text)?;
            say(out, format!(
                "{} triplets (tau {}), demonstration: {}; prompt written to {}",
                p.triplets.len(),
                p.tau,
                p.demo.as_ref().map_or("none".to_string(), |d| d.session_id.clone()),
                path.display()
            ))?;
        }
        Command::Generate { session, turn, predictions, out: path } => {
            let corpus = load_corpus(&cfg, LoadMode::Inference)?;
            let kg = load_graph(&cfg)?;
            let source = LabelSource::open(&cfg, predictions.as_deref())?;
            let kit = PromptKit::open(&cfg, &corpus)?;
            let client = client(&cfg);
            let mut generated = Vec::new();
            for (id, t) in turns_of(&corpus, session.as_deref(), *turn, true)? {
                let ctx = corpus.session(&id)?.context_at_turn(t)?;
                let (labels, _) = source.labels(&ctx, &kg, cfg.threshold)?;
                let p = kit.build(&cfg, &ctx, &labels, &kg)?;
                let req = GenerationRequest {
                    prompt: p.text,
                    user_message: ctx.last_patient_utterance().map(|u| u.text.clone()).unwrap_or_default(),
                    labels,
                };
                let response = generate_response(&req, &client).map_err(|e| fail(Category::Generation, e))?;
                generated.push(GeneratedResponse { session: id, turn: t, response });
            }
            write_output(path, &jsonl(&generated))?;
            say(out, format!("{} responses written to {}", generated.len(), path.display()))?;
        }
        Command::Evaluate { generated, out: path } => {
            let corpus = load_corpus(&cfg, LoadMode::Inference)?;
            let items: Vec<GeneratedResponse> = read_jsonl(generated)?;
            let report = evaluate_corpus(&items, &corpus, &corpus.vocab.entities, cfg.tokenizer)
                .map_err(|e| fail(Category::Validation, e))?;
            let json = serde_json::to_string_pretty(&report).expect("serializable");
            write_output(path, &(json + "\n"))?;
            out.write_all(report.to_table().as_bytes()).map_err(|e| fail(Category::Other, e))?;
        }
        Command::Chat { verbose } => {
            let kg = load_graph(&cfg)?;
            let model = load_model(&cfg)?;
            let demo_source = match (&cfg.demo_corpus, &cfg.corpus) {
                (Some(p), _) | (None, Some(p)) => load_sessions(p, None, LoadMode::Training)?,
                (None, None) => Corpus::default(),
            };
            let kit = PromptKit::open(&RunConfig { demo_corpus: None, ..cfg.clone() }, &demo_source)?;
            chat(&cfg, &model, &kg, &kit, *verbose, stdin, out)?;
        }
    }
    Ok(())
}

fn chat(
    cfg: &RunConfig,
    model: &MedRefModel,
    kg: &KnowledgeGraph,
    kit: &PromptKit,
    verbose: bool,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> CliResult<()> {
    let io = |e: std::io::Error| fail(Category::Other, e);
    let client = client(cfg);
    let mut history: Vec<Utterance> = Vec::new();
    writeln!(out, "medref chat; type :reset to start over, :quit to leave").map_err(io)?;
    let mut line = String::new();
    loop {
        write!(out, "patient> ").map_err(io)?;
        out.flush().map_err(io)?;
        line.clear();
        if input.read_line(&mut line).map_err(io)? == 0 {
            break;
        }
        let text = line.trim();
        match text {
            "" => continue,
            ":quit" | ":q" => break,
            ":reset" => {
                history.clear();
                writeln!(out, "(new consultation)").map_err(io)?;
                continue;
            }
            _ => {}
        }
        let mentioned: Vec<String> = extract_entities(text, &model.entities).into_iter().collect();
        let refs: Vec<&str> = mentioned.iter().map(String::as_str).collect();
        history.push(Utterance::patient(text, &refs));
        let ctx = DialogueContext::from_utterances(None, history.clone());
        let prediction = model.predict(&ctx, kg, cfg.threshold)?;
        let labels = PredictedLabels {
            entities: prediction.entities.clone(),
            acts: prediction.acts.clone(),
        };
        let p = kit.build(cfg, &ctx, &labels, kg)?;
        let req = GenerationRequest {
            prompt: p.text.clone(),
            user_message: text.to_string(),
            labels: labels.clone(),
        };
        let reply = generate_response(&req, &client).map_err(|e| fail(Category::Generation, e))?;
        if verbose {
            writeln!(
                out,
                "  entities: {:?}\n  acts: {:?}\n  tau: {} ({} triplets)\n  demonstration: {}",
                labels.entities,
                labels.acts,
                p.tau,
                p.triplets.len(),
                p.demo.as_ref().map_or("none", |d| d.session_id.as_str())
            )
            .map_err(io)?;
        }
        writeln!(out, "doctor> {reply}").map_err(io)?;
        let ents: Vec<&str> = labels.entities.iter().map(String::as_str).collect();
        let acts: Vec<&str> = labels.acts.iter().map(String::as_str).collect();
        history.push(Utterance::doctor(reply, &ents, &acts));
    }
    writeln!(out).map_err(io)?;
    Ok(())
}

/// Parses sessions from a string (used by tests and tools).
pub fn sessions_from_str(text: &str) -> Result<Vec<Session>, CorpusError> {
    parse_sessions(text.as_bytes())
}
