//! Command-line workflows: validate, eval, fit, apply, spans, paraphrase and
//! augment. Machine-readable results go to files, summaries to stdout.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::gbdt::{self, GbdtModel, GbdtParams, TrainingData};
use crate::metrics::{self, ItemMode};
use crate::records::{self, mark_gold_extractive, Candidate, DatasetCollection, Example, Format, Split};
use crate::scoring::{self, softmax_loss};
use crate::spans::{self, MockScorer, PassageToken, SpanConfig};
use crate::temp_scaling::{self, TemperatureBounds, TemperatureModel};
use crate::variants::{self, Corpus, Document};

#[derive(Debug, Parser)]
#[command(name = "qacal", version, about = "Calibration toolkit for candidate-scored QA prediction logs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and invariant-check a prediction log.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Accuracy, ECE, CSV report and reliability diagrams.
    Eval(EvalArgs),
    /// Fit a calibrator on the dev split.
    Fit(FitArgs),
    /// Rewrite candidate confidences with a fitted calibrator.
    Apply(ApplyArgs),
    /// Generate extractive candidates with a table-driven scorer.
    Spans(SpansArgs),
    /// Paraphrase selection, aggregation and sensitivity analysis.
    Paraphrase {
        #[command(subcommand)]
        action: ParaphraseCommand,
    },
    /// Append retrieved context to each question.
    Augment(AugmentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    AllCandidates,
    Predictions,
}

impl From<ModeArg> for ItemMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AllCandidates => ItemMode::AllCandidates,
            ModeArg::Predictions => ItemMode::PredictionsOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

impl SplitArg {
    fn select(self, col: &DatasetCollection) -> DatasetCollection {
        match self {
            SplitArg::Train => col.split(Split::Train),
            SplitArg::Dev => col.split(Split::Dev),
            SplitArg::Test => col.split(Split::Test),
            SplitArg::All => col.clone(),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Dev => "dev",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for report.csv, summary.json and SVG diagrams.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long = "buckets", default_value_t = metrics::DEFAULT_BUCKETS)]
    pub buckets: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::AllCandidates)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Hinge margin for the reported margin loss.
    #[arg(long, default_value_t = scoring::DEFAULT_MARGIN)]
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Temp,
    Xgb,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Fit report path; defaults to `<output>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fit on the test split instead of dev. The result is labelled oracle.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = temp_scaling::DEFAULT_TAU_MIN)]
    pub tau_min: f64,
    #[arg(long, default_value_t = temp_scaling::DEFAULT_TAU_MAX)]
    pub tau_max: f64,
    #[arg(long, default_value_t = 100)]
    pub rounds: usize,
    #[arg(long, default_value_t = 4)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 5)]
    pub parallel_trees: usize,
    #[arg(long, default_value_t = 0.8)]
    pub subsample: f64,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub l2_leaf_reg: f64,
    #[arg(long, default_value_t = 0.0)]
    pub min_split_gain: f64,
}

impl FitArgs {
    fn gbdt_params(&self) -> GbdtParams {
        GbdtParams {
            max_depth: self.max_depth,
            parallel_trees: self.parallel_trees,
            subsample: self.subsample,
            learning_rate: self.learning_rate,
            num_rounds: self.rounds,
            l2_leaf_reg: self.l2_leaf_reg,
            min_split_gain: self.min_split_gain,
            ..GbdtParams::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SpansArgs {
    /// Questions JSONL with tokenized passages.
    #[arg(long)]
    pub input: PathBuf,
    /// Mock scorer JSON: one shared table, or an object keyed by question id.
    #[arg(long)]
    pub scorer: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long = "R", default_value_t = 10)]
    pub top_r: usize,
    #[arg(long = "K", default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
}

#[derive(Debug, Subcommand)]
pub enum ParaphraseCommand {
    /// Keep the most frequent unique beam outputs per answer.
    Select {
        /// JSONL of `{"text": str, "beams": [str]}`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = variants::DEFAULT_PARAPHRASES)]
        k: usize,
    },
    /// Collapse paraphrase groups into one candidate each.
    Aggregate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Leave the original candidate text out of its group's mass.
        #[arg(long)]
        exclude_canonical: bool,
    },
    /// Compare confidences before and after paraphrasing.
    Sensitivity {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Corpus JSONL of `{"doc_id", "title", "text"}`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = variants::DEFAULT_SENTENCES)]
    pub sentences: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { input } => cmd_validate(&input),
        Command::Eval(args) => cmd_eval(&args),
        Command::Fit(args) => cmd_fit(&args),
        Command::Apply(args) => cmd_apply(&args),
        Command::Spans(args) => cmd_spans(&args),
        Command::Paraphrase { action } => cmd_paraphrase(&action),
        Command::Augment(args) => cmd_augment(&args),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

pub fn read_log(path: &Path) -> Result<DatasetCollection> {
    records::parse_log(open(path)?)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_log_file(path: &Path, col: &DatasetCollection) -> Result<()> {
    let mut buf = Vec::new();
    records::write_log(col, &mut buf)?;
    write_file(path, &buf)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Reads non-blank JSONL lines into `T`, reporting 1-based line numbers.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json { line: idx + 1, source })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = BufWriter::new(Vec::new());
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").map_err(io_err(path))?;
    }
    write_file(path, &buf.into_inner().expect("in-memory buffer"))
}

pub fn cmd_validate(input: &Path) -> Result<()> {
    let col = read_log(input)?;
    println!("{}: {} examples", input.display(), col.len());
    let mut counts: BTreeMap<(&str, Split), (usize, usize)> = BTreeMap::new();
    for ex in &col {
        let e = counts.entry((ex.dataset_id.as_str(), ex.split)).or_default();
        e.0 += 1;
        e.1 += ex.candidates.len();
    }
    for ((dataset, split), (n, c)) in counts {
        println!("{dataset}\t{split}\texamples={n}\tcandidates={c}");
    }
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

#[derive(Debug, Serialize)]
struct DatasetSummary {
    dataset: String,
    examples: usize,
    items: usize,
    accuracy: f64,
    ece: f64,
    mean_softmax_loss: Option<f64>,
    mean_margin_loss: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    split: &'static str,
    mode: &'static str,
    buckets: usize,
    margin: f64,
    datasets: Vec<DatasetSummary>,
    macro_acc: f64,
    macro_ece: f64,
}

fn mean_losses(examples: &[&Example], margin: f64) -> Result<(Option<f64>, Option<f64>)> {
    let (mut soft, mut hinge, mut n) = (0.0, 0.0, 0usize);
    for ex in examples {
        let Some(gold) = ex.candidates.iter().position(|c| c.is_gold) else {
            continue;
        };
        let logits = ex.log_probs();
        soft += softmax_loss(&logits, gold)?.loss;
        hinge += scoring::margin_loss(&logits, gold, margin)?.loss;
        n += 1;
    }
    Ok(if n == 0 {
        (None, None)
    } else {
        (Some(soft / n as f64), Some(hinge / n as f64))
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let col = args.split.select(&read_log(&args.input)?);
    let mode: ItemMode = args.mode.into();
    let report = metrics::report(&col, args.buckets, mode)?;
    let acc = scoring::accuracy(&col)?;
    let by_dataset = col.by_dataset();
    let mut datasets = Vec::new();
    for r in &report.per_dataset {
        let examples = &by_dataset[r.dataset.as_str()];
        let (soft, hinge) = mean_losses(examples, args.margin)?;
        datasets.push(DatasetSummary {
            dataset: r.dataset.clone(),
            examples: examples.len(),
            items: r.n,
            accuracy: acc.per_dataset[&r.dataset],
            ece: r.ece,
            mean_softmax_loss: soft,
            mean_margin_loss: hinge,
        });
        let stem = file_stem(&r.dataset);
        write_file(
            &args.output.join(format!("reliability_{stem}.svg")),
            metrics::reliability_svg(r).as_bytes(),
        )?;
        write_file(
            &args.output.join(format!("histogram_{stem}.svg")),
            metrics::histogram_svg(r).as_bytes(),
        )?;
        println!(
            "{}\texamples={}\tacc={:.6}\tece={:.6}",
            r.dataset,
            examples.len(),
            acc.per_dataset[&r.dataset],
            r.ece
        );
    }
    write_file(&args.output.join("report.csv"), metrics::to_csv(&report).as_bytes())?;
    let summary = EvalSummary {
        split: args.split.as_str(),
        mode: mode.as_str(),
        buckets: args.buckets,
        margin: args.margin,
        datasets,
        macro_acc: acc.macro_accuracy,
        macro_ece: report.macro_ece,
    };
    write_json(&args.output.join("summary.json"), &summary)?;
    println!("macro_acc={:.6} macro_ece={:.6}", acc.macro_accuracy, report.macro_ece);
    Ok(())
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let col = read_log(&args.input)?;
    let split = if args.oracle { Split::Test } else { Split::Dev };
    let data = col.split(split);
    if data.is_empty() {
        return Err(Error::param("input", format!("log has no {split} split")));
    }
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut p = args.output.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let label = if args.oracle { "ORACLE (fitted on test split)" } else { "dev" };
    match args.method {
        Method::Temp => {
            let bounds = TemperatureBounds {
                min: args.tau_min,
                max: args.tau_max,
            };
            let mut model = temp_scaling::fit_temperature(&data, bounds)?;
            model.oracle = args.oracle;
            write_json(&args.output, &model)?;
            let report = json!({
                "method": "temp",
                "split": split.as_str(),
                "oracle": args.oracle,
                "tau": model.tau,
                "tau_bounds": [bounds.min, bounds.max],
                "nll_before": model.nll_at_one,
                "nll_after": model.fit_nll,
                "n_used": model.n_used,
                "n_skipped": model.n_skipped,
                "search_trace": model.search_trace,
            });
            write_json(&report_path, &report)?;
            println!(
                "temperature [{label}]: tau={:.6} nll {:.6} -> {:.6} (used {}, skipped {})",
                model.tau, model.nll_at_one, model.fit_nll, model.n_used, model.n_skipped
            );
        }
        Method::Xgb => {
            let training = TrainingData::from_examples(&data);
            let fitted = gbdt::fit(&training, &args.gbdt_params(), args.seed)?;
            write_json(&args.output, &fitted.model)?;
            let report = json!({
                "method": "xgb",
                "split": split.as_str(),
                "oracle": args.oracle,
                "rows": training.rows.len(),
                "positives": training.labels.iter().filter(|l| **l).count(),
                "seed": args.seed,
                "training_loss": fitted.training_loss,
            });
            write_json(&report_path, &report)?;
            let first = fitted.training_loss.first().copied().unwrap_or(f64::NAN);
            let last = fitted.training_loss.last().copied().unwrap_or(f64::NAN);
            println!(
                "gbdt [{label}]: {} rounds, training loss {first:.6} -> {last:.6}",
                fitted.model.rounds.len()
            );
        }
    }
    Ok(())
}

/// A fitted calibrator as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Calibrator {
    Temperature(TemperatureModel),
    Gbdt(GbdtModel),
}

impl Calibrator {
    pub fn from_json(value: Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::param("model", "model file must hold a JSON object"))?;
        if obj.contains_key("tau") {
            Ok(Calibrator::Temperature(serde_json::from_value(value)?))
        } else if obj.contains_key("rounds") {
            Ok(Calibrator::Gbdt(serde_json::from_value(value)?))
        } else {
            Err(Error::param("model", "neither a temperature nor a tree model"))
        }
    }

    pub fn apply(&self, col: &DatasetCollection) -> Result<DatasetCollection> {
        match self {
            Calibrator::Temperature(m) => col.try_map(|ex| {
                let scores = temp_scaling::apply_temperature(ex, m);
                let mut out = ex.clone();
                for (c, p) in out.candidates.iter_mut().zip(scores.probs) {
                    c.confidence = Some(p);
                }
                Ok(out)
            }),
            Calibrator::Gbdt(m) => gbdt::calibrate_collection(m, col),
        }
    }
}

pub fn cmd_apply(args: &ApplyArgs) -> Result<()> {
    let col = read_log(&args.input)?;
    let model: Value = serde_json::from_reader(open(&args.model)?)?;
    let calibrator = Calibrator::from_json(model)?;
    let out = calibrator.apply(&col)?;
    write_log_file(&args.output, &out)?;
    let kind = match calibrator {
        Calibrator::Temperature(m) => format!("temperature tau={:.6}", m.tau),
        Calibrator::Gbdt(m) => format!("gbdt with {} rounds", m.rounds.len()),
    };
    println!("applied {kind} to {} examples", out.len());
    Ok(())
}

/// One question of the `spans` input file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpanQuestion {
    pub id: String,
    pub dataset: String,
    pub split: Split,
    pub input: String,
    pub passage_tokens: Vec<String>,
    #[serde(default)]
    pub passage_token_ids: Option<Vec<u32>>,
    #[serde(default)]
    pub gold_answers: Vec<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SpanQuestion {
    fn passage(&self) -> Result<Vec<PassageToken>> {
        match &self.passage_token_ids {
            None => Ok(spans::tokens_from_strings(&self.passage_tokens)),
            Some(ids) if ids.len() == self.passage_tokens.len() => Ok(ids
                .iter()
                .zip(&self.passage_tokens)
                .map(|(id, t)| PassageToken::new(*id, t.clone()))
                .collect()),
            Some(ids) => Err(Error::invalid(
                &self.id,
                "passage_token_ids",
                format!("{} ids for {} tokens", ids.len(), self.passage_tokens.len()),
            )),
        }
    }
}

enum ScorerTable {
    Shared(MockScorer),
    PerQuestion(BTreeMap<String, MockScorer>),
}

impl ScorerTable {
    fn load(path: &Path) -> Result<Self> {
        let value: Value = serde_json::from_reader(open(path)?)?;
        let table = if value.get("first_token").is_some() {
            ScorerTable::Shared(serde_json::from_value(value)?)
        } else {
            ScorerTable::PerQuestion(serde_json::from_value(value)?)
        };
        match &table {
            ScorerTable::Shared(s) => s.validate()?,
            ScorerTable::PerQuestion(m) => m.values().try_for_each(MockScorer::validate)?,
        }
        Ok(table)
    }

    fn for_question(&self, id: &str) -> Result<&MockScorer> {
        match self {
            ScorerTable::Shared(s) => Ok(s),
            ScorerTable::PerQuestion(m) => m
                .get(id)
                .ok_or_else(|| Error::invalid(id, "scorer", "no scorer table for this question")),
        }
    }
}

pub fn cmd_spans(args: &SpansArgs) -> Result<()> {
    let config = SpanConfig {
        top_r: args.top_r,
        top_k: args.top_k,
        max_len: args.max_len,
    };
    config.validate()?;
    let questions: Vec<SpanQuestion> = read_jsonl(&args.input)?;
    let scorers = ScorerTable::load(&args.scorer)?;
    let mut examples = Vec::with_capacity(questions.len());
    for q in questions {
        let passage = q.passage()?;
        let scorer = scorers.for_question(&q.id)?;
        let found = spans::enumerate_spans(&q.input, &passage, scorer, &config)?;
        let candidates = found
            .into_iter()
            .map(|s| {
                let mut c = Candidate::new(s.text, s.log_prob);
                c.token_log_probs = Some(s.token_log_probs);
                c
            })
            .collect();
        let mut ex = Example::new(q.id, q.dataset, q.split, Format::Extractive, q.input, candidates);
        ex.gold_answers = q.gold_answers;
        ex.extra = q.extra;
        examples.push(mark_gold_extractive(&ex, &ex.gold_answers));
    }
    let col = DatasetCollection::new(examples)?;
    write_log_file(&args.output, &col)?;
    println!(
        "generated candidates for {} questions (R={}, K={}, max_len={})",
        col.len(),
        config.top_r,
        config.top_k,
        config.max_len
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct BeamRecord {
    text: String,
    beams: Vec<String>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Debug, Serialize)]
struct SelectedParaphrases {
    text: String,
    paraphrases: Vec<String>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

pub fn cmd_paraphrase(action: &ParaphraseCommand) -> Result<()> {
    match action {
        ParaphraseCommand::Select { input, output, k } => {
            if *k == 0 {
                return Err(Error::param("k", "must be >= 1"));
            }
            let records: Vec<BeamRecord> = read_jsonl(input)?;
            let selected: Vec<SelectedParaphrases> = records
                .into_iter()
                .map(|r| SelectedParaphrases {
                    paraphrases: variants::select_paraphrases(&r.beams, *k),
                    text: r.text,
                    extra: r.extra,
                })
                .collect();
            write_jsonl(output, &selected)?;
            println!("selected up to {k} paraphrases for {} answers", selected.len());
        }
        ParaphraseCommand::Aggregate {
            input,
            output,
            exclude_canonical,
        } => {
            let col = read_log(input)?;
            let out = col.try_map(|ex| Ok(variants::collapse_paraphrases(ex, !exclude_canonical)))?;
            write_log_file(output, &out)?;
            let before: usize = col.iter().map(|e| e.candidates.len()).sum();
            let after: usize = out.iter().map(|e| e.candidates.len()).sum();
            println!("aggregated {before} candidates into {after} groups");
        }
        ParaphraseCommand::Sensitivity { before, after, output } => {
            let report = metrics::paraphrase_sensitivity(&read_log(before)?, &read_log(after)?)?;
            write_json(output, &report)?;
            println!(
                "threshold={:.2} (absolute) better_calibrated={} unchanged={}",
                report.threshold, report.better_calibrated.count, report.unchanged.count
            );
        }
    }
    Ok(())
}

pub fn cmd_augment(args: &AugmentArgs) -> Result<()> {
    let col = read_log(&args.input)?;
    let documents: Vec<Document> = read_jsonl(&args.corpus)?;
    let corpus = Corpus::new(documents)?;
    let out = col.try_map(|ex| {
        let doc_id = variants::tfidf_retrieve(&corpus, &ex.input_text, 1)?
            .into_iter()
            .next()
            .ok_or(Error::EmptyCorpus)?;
        let doc = corpus.get(&doc_id).expect("retrieved id is indexed");
        let mut aug = variants::augment_input(ex, &doc.text, args.sentences);
        aug.augmented_from = Some(doc_id);
        Ok(aug)
    })?;
    write_log_file(&args.output, &out)?;
    println!("augmented {} examples from {} documents", out.len(), corpus.documents().len());
    Ok(())
}
