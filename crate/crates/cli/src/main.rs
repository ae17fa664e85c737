use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mcrc::ablation::run_grid;
use mcrc::autodiff::Graph;
use mcrc::checkpoint::Checkpoint;
use mcrc::data::{
    debias_shuffle, encode_item, load_dataset, option_distribution, write_dataset, McqItem, SimpleTokenizer, Subject,
    NUM_OPTIONS,
};
use mcrc::gradcheck::{gradcheck, GradcheckOptions, MODULES};
use mcrc::heads::Strategy;
use mcrc::inference::ATTENTION_STAGES;
use mcrc::retrieval::{
    evaluate_retrieval, load_corpus, load_embeddings, load_judgments, segment_corpus, write_corpus,
    Bm25Params, CorpusIndex, EmbedderSpec, RetrievalMode, DEFAULT_CONTEXT_K,
};
use mcrc::synth::{synth_corpus, synth_items, SynthConfig};
use mcrc::tensor::Matrix;
use mcrc::train::{attach_contexts, evaluate, train, write_predictions, TrainConfig};

/// `print!` that ends the process quietly once stdout is gone (for example
/// when piped into `head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if write!(std::io::stdout(), $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

macro_rules! outln {
    () => { out!("\n") };
    ($($arg:tt)*) => {{
        out!($($arg)*);
        out!("\n");
    }};
}

#[derive(Parser)]
#[command(name = "mcrc", version, about = "Retrieval-augmented multiple-choice reading comprehension")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted overlap signal.
    Synth {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        vocab: usize,
        /// Output directory; receives items.jsonl and corpus.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset utilities.
    #[command(subcommand)]
    Data(DataCommand),
    /// Sentence retrieval over a subject-partitioned corpus.
    #[command(subcommand)]
    Retrieve(RetrieveCommand),
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; overrides the config's `checkpoint` key.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a test file.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        gen: GenerationArgs,
        /// Write line-delimited predictions here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Write predictions for every item of a file.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gen: GenerationArgs,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// viwordformer, option_inference, heads, or all.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 8)]
        d: usize,
        /// Zero this parameter's analytic gradient (harness self-test).
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Train the {viwordformer on/off} × {single/multitask} grid.
    Ablate {
        /// Run the full four-configuration grid.
        #[arg(long)]
        grid: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset; defaults to the config's train file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Encoder introspection.
    #[command(subcommand)]
    Encoder(EncoderCommand),
    /// Attention introspection.
    #[command(subcommand)]
    Inspect(InspectCommand),
}

#[derive(Args)]
struct GenerationArgs {
    /// Generate explanations and score them.
    #[arg(long)]
    explain: bool,
    /// Beam width; greedy when absent.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

impl GenerationArgs {
    fn setting(&self, default_len: usize) -> Option<(usize, Strategy)> {
        self.explain.then(|| (self.max_len.unwrap_or(default_len), self.beam.map_or(Strategy::Greedy, Strategy::Beam)))
    }
}

#[derive(Subcommand)]
enum DataCommand {
    /// Parse and validate a dataset file.
    Validate { file: PathBuf },
    /// Permute every item's options by a seeded permutation.
    Shuffle {
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Counts per subject, grade and answer label.
    Stats { file: PathBuf },
}

#[derive(Subcommand)]
enum RetrieveCommand {
    /// Split a plain-text document into sentence units.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        subject: Subject,
        #[arg(long, default_value_t = 0)]
        first_id: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a sparse + dense index over a unit file.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dimension of the hashing embedder.
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Precomputed unit vectors, one `{"id": .., "vector": [..]}` per line.
        #[arg(long)]
        vectors: Option<PathBuf>,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
    /// Ranked units for one item.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = DEFAULT_CONTEXT_K)]
        k: usize,
        #[arg(long, default_value = "rrf")]
        mode: RetrievalMode,
    },
    /// P@K / R@K of every retriever against judgments.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,15,20,30")]
        k_list: Vec<usize>,
        /// Also print every query's hits per method and cutoff.
        #[arg(long)]
        per_query: bool,
    },
    /// Attach retrieved contexts to every item lacking one.
    Context {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CONTEXT_K)]
        k: usize,
        #[arg(long, default_value_t = 400)]
        cap: usize,
    },
}

#[derive(Subcommand)]
enum EncoderCommand {
    /// Print the phrasal score matrix the checkpoint's encoder assigns to a text.
    DumpPhrasal {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: String,
    },
}

#[derive(Subcommand)]
enum InspectCommand {
    /// Print one item's attention matrices at one stage.
    Attention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        item: String,
        /// pairwise, option_context, context_option, or self.
        #[arg(long, default_value = "option_context")]
        stage: String,
        /// Restrict to one option (0-3).
        #[arg(long)]
        option: Option<usize>,
    },
}

fn load_items(path: &Path, index: Option<&Path>, cap: usize) -> Result<Vec<McqItem>> {
    let items = load_dataset(path)?;
    let index = index.map(CorpusIndex::load).transpose()?;
    Ok(attach_contexts(&items, index.as_ref(), DEFAULT_CONTEXT_K, cap)?)
}

fn print_matrix(title: &str, rows: &[String], cols: &[String], m: &Matrix) {
    outln!("{title}");
    let rows: Vec<String> = (0..m.rows()).map(|r| rows.get(r).cloned().unwrap_or_else(|| format!("#{r}"))).collect();
    let cols: Vec<String> = (0..m.cols()).map(|c| cols.get(c).cloned().unwrap_or_else(|| format!("#{c}"))).collect();
    out!("{:>12}", "");
    for c in &cols {
        out!(" {:>8}", truncate(c, 8));
    }
    outln!();
    for (r, name) in rows.iter().enumerate() {
        out!("{:>12}", truncate(name, 12));
        for v in m.row(r) {
            out!(" {v:>8.4}");
        }
        outln!();
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { n, seed, vocab, out } => {
            let items = synth_items(&SynthConfig { items: n, seed, vocab_size: vocab, ..SynthConfig::default() })?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_dataset(out.join("items.jsonl"), &items)?;
            write_corpus(out.join("corpus.jsonl"), &synth_corpus(&items))?;
            outln!("wrote {} items to {}", items.len(), out.display());
        }
        Command::Data(cmd) => match cmd {
            DataCommand::Validate { file } => {
                let items = load_dataset(&file)?;
                outln!("{}: {} valid items", file.display(), items.len());
            }
            DataCommand::Shuffle { file, seed, out } => {
                let (items, _) = debias_shuffle(&load_dataset(&file)?, seed);
                write_dataset(&out, &items)?;
                outln!("shuffled {} items into {}", items.len(), out.display());
            }
            DataCommand::Stats { file } => {
                let items = load_dataset(&file)?;
                outln!("items: {}", items.len());
                for s in Subject::ALL {
                    let n = items.iter().filter(|it| it.subject == s).count();
                    if n > 0 {
                        outln!("subject {s}: {n}");
                    }
                }
                let mut grades: Vec<String> = items.iter().map(|it| it.grade.to_string()).collect();
                grades.sort();
                grades.dedup();
                for g in grades {
                    outln!("grade {g}: {}", items.iter().filter(|it| it.grade.to_string() == g).count());
                }
                let dist = option_distribution(&items);
                for (k, c) in dist.iter().enumerate() {
                    let share = if items.is_empty() { 0.0 } else { *c as f64 / items.len() as f64 };
                    outln!("answer {}: {c} ({:.1}%)", mcrc::data::answer_letter(k), share * 100.0);
                }
                let with_expl = items.iter().filter(|it| it.explanation.is_some()).count();
                let with_ctx = items.iter().filter(|it| it.context.is_some()).count();
                outln!("with explanation: {with_expl}\nwith context: {with_ctx}");
            }
        },
        Command::Retrieve(cmd) => match cmd {
            RetrieveCommand::Segment { input, subject, first_id, out } => {
                let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
                let units = segment_corpus(&text, subject, first_id);
                write_corpus(&out, &units)?;
                outln!("{} units", units.len());
            }
            RetrieveCommand::BuildIndex { corpus, out, dim, vectors, k1, b } => {
                let units = load_corpus(&corpus)?;
                let params = Bm25Params { k1, b };
                let spec = EmbedderSpec::Hash { dim };
                let index = match vectors {
                    Some(v) => CorpusIndex::with_vectors(units, params, spec, load_embeddings(v)?)?,
                    None => CorpusIndex::build(units, params, spec)?,
                };
                index.save(&out)?;
                outln!("indexed {} units into {}", index.units().len(), out.display());
            }
            RetrieveCommand::Query { index, data, id, k, mode } => {
                let index = CorpusIndex::load(&index)?;
                let items = load_dataset(&data)?;
                let item = items.iter().find(|it| it.id == id).with_context(|| format!("no item {id}"))?;
                let ranked = index.retrieve(&item.id, &item.question, &item.options, item.subject, k, mode)?;
                for (rank, (uid, score)) in ranked.entries().iter().enumerate() {
                    let text = index.units().iter().find(|u| u.id == *uid).map_or("", |u| u.text.as_str());
                    outln!("{:>3}  {uid:>6}  {score:>10.6}  {text}", rank + 1);
                }
            }
            RetrieveCommand::Eval { index, data, judgments, k_list, per_query } => {
                let index = CorpusIndex::load(&index)?;
                let items = load_dataset(&data)?;
                let judgments = load_judgments(&judgments)?;
                let report = evaluate_retrieval(&index, &items, &judgments, &k_list, &RetrievalMode::ALL)?;
                outln!("{report}");
                if per_query {
                    for q in &report.per_query {
                        outln!(
                            "{} {} K={} hits={} relevant={} P={:.4} R={:.4}",
                            q.query_id, q.mode, q.k, q.hits, q.relevant, q.precision, q.recall
                        );
                    }
                }
            }
            RetrieveCommand::Context { index, data, out, k, cap } => {
                let index = CorpusIndex::load(&index)?;
                let items = attach_contexts(&load_dataset(&data)?, Some(&index), k, cap)?;
                write_dataset(&out, &items)?;
                outln!("attached contexts to {} items", items.len());
            }
        },
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let train_file = cfg.train_file.clone().context("the config needs a train_file")?;
            let ckpt_path = out.or_else(|| cfg.checkpoint.clone()).context("give --out or a checkpoint key")?;
            let index = cfg.index_file.as_deref();
            let train_items = load_items(&train_file, index, cfg.context_cap)?;
            let dev_items = cfg.dev_file.as_deref().map(|p| load_items(p, index, cfg.context_cap)).transpose()?;
            let outcome = train(&cfg, &train_items, dev_items.as_deref(), &mut |e| outln!("{e}"))?;
            outln!("best epoch {} (dev F1-macro {:.4}) after {} epochs", outcome.best_epoch, outcome.best_dev_f1, outcome.epochs_run);
            Checkpoint::from_outcome(&outcome, &cfg).save(&ckpt_path)?;
            outln!("checkpoint written to {}", ckpt_path.display());
            if let Some(test) = &cfg.test_file {
                let items = load_items(test, index, cfg.context_cap)?;
                let explain = (cfg.mode == mcrc::heads::TaskMode::Multitask).then_some((cfg.max_explanation_len, Strategy::Greedy));
                out!("{}", evaluate(&outcome.model, &items, &cfg.caps(), explain)?.report);
            }
        }
        Command::Evaluate { ckpt, test, gen, predictions, index, json } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = ck.train.clone().unwrap_or_default();
            let model = ck.to_model()?;
            let items = load_items(&test, index.as_deref(), cfg.context_cap)?;
            let eval = evaluate(&model, &items, &cfg.caps(), gen.setting(cfg.max_explanation_len))?;
            if json {
                outln!("{}", serde_json::to_string_pretty(&eval.report)?);
            } else {
                out!("{}", eval.report);
            }
            if let Some(p) = predictions {
                write_predictions(&p, &eval.predictions)?;
            }
        }
        Command::Predict { ckpt, input, out, gen, index } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = ck.train.clone().unwrap_or_default();
            let model = ck.to_model()?;
            let items = load_items(&input, index.as_deref(), cfg.context_cap)?;
            let eval = evaluate(&model, &items, &cfg.caps(), gen.setting(cfg.max_explanation_len))?;
            write_predictions(&out, &eval.predictions)?;
            outln!("wrote {} predictions to {}", eval.predictions.len(), out.display());
        }
        Command::Gradcheck { module, seeds, first_seed, tolerance, step, d, corrupt } => {
            let modules: Vec<&str> = if module == "all" { MODULES.to_vec() } else { vec![module.as_str()] };
            let options = GradcheckOptions { d_model: d, step, tolerance, corrupt, ..GradcheckOptions::default() };
            let mut ok = true;
            let mut worst: f64 = 0.0;
            for m in &modules {
                for seed in first_seed..first_seed + seeds {
                    let report = gradcheck(m, seed, &options)?;
                    worst = worst.max(report.max_rel_error);
                    ok &= report.passed();
                    outln!("{report}");
                }
            }
            outln!("{}: max relative error {worst:.3e} (tolerance {tolerance:.0e})", if ok { "PASS" } else { "FAIL" });
            return Ok(ok);
        }
        Command::Ablate { grid, config, data, seeds, test_fraction } => {
            if !grid {
                bail!("only the full grid is supported; pass --grid");
            }
            let cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            let data = data.or_else(|| cfg.train_file.clone()).context("give --data or a config with train_file")?;
            let items = load_items(&data, cfg.index_file.as_deref(), cfg.context_cap)?;
            let report = run_grid(&cfg, &items, &seeds, test_fraction, &mut |r| {
                outln!("{} seed {}: accuracy {:.4} f1 {:.4} ({} epochs)", r.variant.label(), r.seed, r.accuracy, r.f1_macro, r.epochs)
            })?;
            out!("{report}");
        }
        Command::Encoder(EncoderCommand::DumpPhrasal { ckpt, input }) => {
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let seq = model.vocab.encode(&SimpleTokenizer, &input);
            if seq.is_empty() {
                bail!("the input has no tokens");
            }
            let mut g = Graph::new(&model.store);
            let trace = model.encoder.forward_traced(&mut g, &seq.ids, seq.len())?;
            let Some(&p) = trace.phrasal.first() else {
                bail!("this checkpoint was trained without the phrasal block");
            };
            print_matrix("phrasal score matrix", &seq.tokens, &seq.tokens, g.value(p));
        }
        Command::Inspect(InspectCommand::Attention { ckpt, data, item, stage, option }) => {
            if !ATTENTION_STAGES.contains(&stage.as_str()) {
                bail!("unknown stage {stage:?}; expected one of {}", ATTENTION_STAGES.join(", "));
            }
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = ck.train.clone().unwrap_or_default();
            let model = ck.to_model()?;
            let items = load_dataset(&data)?;
            let raw = items.iter().find(|it| it.id == item).with_context(|| format!("no item {item}"))?;
            let enc = encode_item(raw, &model.vocab, &SimpleTokenizer, &cfg.caps());
            let mut g = Graph::new(&model.store);
            let fwd = model.forward(&mut g, &enc)?;
            let question = &enc.question.tokens;
            let fused = |k: usize| question.iter().chain(&enc.options[k].tokens).cloned().collect::<Vec<_>>();
            let options: Vec<usize> = option.map_or((0..NUM_OPTIONS).collect(), |o| vec![o]);
            for k in options {
                let mats = fwd.features.attention(&stage, k).with_context(|| format!("option {k} out of range"))?;
                for (l_idx, (title, v)) in mats.into_iter().enumerate() {
                    let cols = match stage.as_str() {
                        "pairwise" => {
                            let others: Vec<usize> = (0..NUM_OPTIONS).filter(|&l| l != k).collect();
                            fused(others[l_idx])
                        }
                        "option_context" => enc.context.tokens.clone(),
                        _ => fused(k),
                    };
                    let rows = if stage == "context_option" { enc.context.tokens.clone() } else { fused(k) };
                    print_matrix(&title, &rows, &cols, g.value(v));
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
