//! Command-line driver. [`run`] executes one command and [`exit_code`] maps
//! its error to the process status: 1 for user, configuration and I/O
//! errors, 2 for violated internal invariants.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use graphtext_core::checkpoint::{init_from_checkpoint, load_checkpoint, load_vocab};
use graphtext_core::generate::{generate_text, BeamConfig};
use graphtext_core::gradcheck::GradCheckOptions;
use graphtext_core::graph_data::{linearize, load_corpus, load_graphs, GraphTextPair, GraphUnit};
use graphtext_core::metrics::evaluate;
use graphtext_core::toy::{check_all_losses, synthetic_pair, synthetic_vocab, toy_config};
use graphtext_core::training::{train, Task};
use graphtext_core::{EncoderVariant, Error, Model, Result, Vocabulary};
use log::info;

use crate::config::{io_err, parse_weights, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "graphtext", version, about = "Graph-to-text pre-training, fine-tuning and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train with text reconstruction, graph reconstruction and alignment.
    Pretrain(TrainArgs),
    /// Fine-tune graph-to-text generation from a checkpoint.
    Finetune(FinetuneArgs),
    /// Generate one sentence per input graph.
    Generate(GenerateArgs),
    /// Score hypotheses against references with BLEU and ROUGE-L.
    Eval(EvalArgs),
    /// Finite-difference check of every loss on a seeded toy model.
    Gradcheck(GradcheckArgs),
    /// Print linearized graphs with their unit positions.
    Linearize(LinearizeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Text, graph and alignment loss weights, e.g. `1,0,0`.
    #[arg(long, value_parser = parse_weights)]
    pub weights: Option<[f64; 3]>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<EncoderVariant>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 1.0)]
    pub length_penalty: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model dimensions; the built-in toy model when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LinearizeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<EncoderVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_internal() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => cmd_train(&args, None, Task::Pretrain, out),
        Command::Finetune(args) => cmd_train(&args.train, args.init.as_deref(), Task::Finetune, out),
        Command::Generate(args) => cmd_generate(&args, out),
        Command::Eval(args) => cmd_eval(&args, out),
        Command::Gradcheck(args) => cmd_gradcheck(&args, out),
        Command::Linearize(args) => cmd_linearize(&args, out),
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn resolve(args: &TrainArgs, init: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let o = &args.overrides;
    if let Some(p) = &args.corpus {
        cfg.corpus = Some(p.clone());
    }
    if let Some(p) = &args.out {
        cfg.out = Some(p.clone());
    }
    if let Some(p) = init {
        cfg.init = Some(p.to_path_buf());
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some([t, g, a]) = o.weights {
        (cfg.w_text, cfg.w_graph, cfg.w_ot) = (t, g, a);
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if o.max_steps.is_some() {
        cfg.max_steps = o.max_steps;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = o.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(v) = o.variant {
        cfg.variant = v;
    }
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required (flag or config key)")))
}

/// Every encoder input and decoder sequence of `corpus` must fit the
/// configured maximum lengths.
fn check_lengths(corpus: &[GraphTextPair], cfg: &RunConfig) -> Result<()> {
    for (i, pair) in corpus.iter().enumerate() {
        let enc = linearize(&pair.graph)?.len() + 1 + pair.n();
        if enc > cfg.max_input_len {
            return Err(Error::Config(format!(
                "record {} needs {enc} encoder positions, max_input_len is {}",
                i + 1,
                cfg.max_input_len
            )));
        }
        if pair.n() + 1 > cfg.max_output_len {
            return Err(Error::Config(format!(
                "record {} needs {} decoder positions, max_output_len is {}",
                i + 1,
                pair.n() + 1,
                cfg.max_output_len
            )));
        }
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, init: Option<&Path>, task: Task, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(args, init)?;
    cfg.validate(task)?;
    let corpus_path = required(&cfg.corpus, "corpus")?;
    let out_dir = required(&cfg.out, "out")?;
    let corpus = load_corpus(corpus_path)?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_lengths(&corpus, &cfg)?;

    let (model, vocab) = match task {
        Task::Pretrain => {
            let vocab = match &cfg.vocab {
                Some(p) => Vocabulary::load(p)?,
                None => Vocabulary::build(&corpus, cfg.min_freq)?,
            };
            (Model::seeded(cfg.model(vocab.len()), cfg.seed)?, vocab)
        }
        Task::Finetune => {
            let ckpt = required(&cfg.init, "init")?;
            let vocab = load_vocab(ckpt)?;
            let mut model = Model::seeded(cfg.model(vocab.len()), cfg.seed)?;
            init_from_checkpoint(&mut model, ckpt)?;
            (model, vocab)
        }
    };
    let mut model = model;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let resolved = out_dir.join("config.resolved.json");
    fs::write(&resolved, cfg.to_json() + "\n").map_err(|e| io_err(&resolved, e))?;
    info!(
        "{task:?}: {} pairs, vocabulary {}, {} parameters",
        corpus.len(),
        vocab.len(),
        model.params.num_elements()
    );
    let log = train(&corpus, &mut model, &vocab, &cfg.train(task), Some(out_dir))?;
    let last = log.records.last().expect("at least one step");
    write_out(
        out,
        &format!("{} steps, final loss {:.6}, output in {}\n", last.step, last.total, out_dir.display()),
    )
}

fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let (model, vocab) = load_checkpoint::<f64>(&args.ckpt)?;
    let graphs = load_graphs(&args.input)?;
    let beam = BeamConfig {
        beam_size: args.beam,
        length_penalty: args.length_penalty,
        max_len: model.config.decoder.max_output_len,
    };
    beam.validate()?;
    let mut text = String::new();
    for g in &graphs {
        text.push_str(&generate_text(model.net(), &vocab, g, &beam)?.join(" "));
        text.push('\n');
    }
    fs::write(&args.out, text).map_err(|e| io_err(&args.out, e))?;
    write_out(out, &format!("{} sentences written to {}\n", graphs.len(), args.out.display()))
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let hyps = read_lines(&args.hyp)?;
    let refs: Vec<Vec<Vec<String>>> = read_lines(&args.reference)?.into_iter().map(|r| vec![r]).collect();
    let report = evaluate(&hyps, &refs)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_out(out, &(json + "\n"))
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = synthetic_vocab();
    let (model_cfg, settings) = match &args.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            (cfg.model(vocab.len()), cfg.pretrain_settings())
        }
        None => (toy_config(vocab.len(), EncoderVariant::Joint), Default::default()),
    };
    let mut model = Model::seeded(model_cfg, args.seed)?;
    let opts = GradCheckOptions::default();
    let reports = check_all_losses(&mut model, &vocab, &synthetic_pair(0), &settings, opts, args.seed)?;
    let mut failed = Vec::new();
    for (name, r) in &reports {
        write_out(
            out,
            &format!(
                "{name:<9} {} elements  max relative error {:.3e}  {}\n",
                r.elements(),
                r.max_rel_err(),
                if r.passed() { "ok" } else { "FAIL" }
            ),
        )?;
        if !r.passed() {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {} (tolerance {:e})",
            failed.join(", "),
            opts.tol
        )))
    }
}

fn cmd_linearize(args: &LinearizeArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let mut text = String::new();
    for (i, pair) in corpus.iter().enumerate() {
        let lin = linearize(&pair.graph)?;
        text.push_str(&format!("[{}] {}\n", i + 1, lin.tokens.join(" ")));
        for (e, name) in pair.graph.entities().iter().enumerate() {
            let pos = lin.positions(GraphUnit::Entity(e));
            text.push_str(&format!("  entity {} {name}: positions {pos:?}\n", e + 1));
        }
        for (&(h, t), rel) in pair.graph.relations() {
            let pos = lin.positions(GraphUnit::Relation(h, t));
            text.push_str(&format!("  relation {}->{} {rel}: positions {pos:?}\n", h + 1, t + 1));
        }
    }
    write_out(out, &text)
}
