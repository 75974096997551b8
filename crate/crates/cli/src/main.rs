use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synergy_core::config::{parse_assignment, RunConfig};
use synergy_core::corpus::{
    bpe_segments, bpe_train, clip_segments, read_documents, read_segment_shard, read_vocab, split_corpus,
    write_segment_shard, write_vocab, SpecialTokens,
};
use synergy_core::model::{generate, Checkpoint, DenseModel, LanguageModel, ModelKind, Routing, SynergyModel, LLAMA3_VOCAB};
use synergy_core::router::PositioningMode;
use synergy_core::train::{
    estimate_flops, evaluate, run_k_sweep, run_positioning_ablation, train, write_csv, write_jsonl, AblationTable,
    MetricsRecord, Precision, TrainData, BBPE_BYTES_PER_TOKEN,
};
use synergy_core::viz::{render_routing, route_text, VizFormat};
use synergy_core::{Error, Result};

/// Byte-level language model with a learned router over concept tokens.
///
/// Every command that takes a configuration reads, in order: the preset
/// (or the file given by --config), SYNERGY_* environment variables such as
/// SYNERGY_MODEL__K=32 or SYNERGY_TRAIN__LR=1e-3, then --set flags.
#[derive(Parser)]
#[command(name = "synergy", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML file with [model] and [train] tables; a top-level `preset` key
    /// picks the base values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no --config is given: paper, desk or tiny
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override one key, e.g. --set model.k=32 or --set train.lr=1e-3
    /// (repeatable; `none` clears an optional key)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Training seed, same as --set train.seed=N
    #[arg(long)]
    seed: Option<u64>,
    /// Number of optimizer steps, same as --set train.total_steps=N
    #[arg(long)]
    steps: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.preset)?,
        };
        cfg.apply_env(std::env::vars())?;
        let pairs = self.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>>>()?;
        cfg.apply_overrides(pairs)?;
        let mut extra = Vec::new();
        let seed = self.seed.map(|s| s.to_string());
        if let Some(s) = &seed {
            extra.push(("train.seed", s.as_str()));
        }
        let steps = self.steps.map(|s| s.to_string());
        if let Some(s) = &steps {
            extra.push(("train.total_steps", s.as_str()));
        }
        cfg.apply_overrides(extra)?;
        if cfg.train.precision == Precision::Mixed {
            eprintln!("precision = mixed: computing in f32 on this backend");
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelChoice {
    Synergy,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum RouteChoice {
    /// Top-k over the whole text, as in training
    Topk,
    /// Per-byte calibrated threshold, as in generation
    Threshold,
}

#[derive(Subcommand)]
enum Cmd {
    /// Read documents, split them into train/eval/test and clip them into
    /// segments; writes train.seg, eval.seg and test.seg
    Prepare {
        /// .jsonl file with a `text` field per line, or plain text with
        /// blank lines between documents
        #[arg(long)]
        input: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Fraction of documents used for training; the rest is halved
        /// into eval and test
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a byte-level BPE vocabulary for the dense baseline
    TrainBpe {
        /// Documents file (.jsonl or text) or a prepared .seg shard
        #[arg(long)]
        input: PathBuf,
        /// Vocabulary size including the 256 byte tokens
        #[arg(long, default_value_t = 1024)]
        vocab_size: usize,
        /// Output vocabulary file
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.ckpt, metrics.jsonl, metrics.csv
    /// and the resolved config.toml into --out
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory produced by `prepare`
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "synergy")]
        model: ModelChoice,
        /// BPE vocabulary for the dense baseline (byte tokens when absent)
        #[arg(long)]
        bpe: Option<PathBuf>,
    },
    /// Report bits per byte of a checkpoint on a prepared split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Evaluate at most this many batches (all when absent)
        #[arg(long)]
        max_batches: Option<usize>,
    },
    /// Sample bytes from a byte-level checkpoint; output goes to stdout
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 200)]
        max_new: usize,
        /// 0 picks the most likely byte
        #[arg(long, default_value_t = 0.8)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per positioning mode; writes positioning.csv,
    /// positioning_curves.csv and positioning.json into --out
    AblatePositioning {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated modes (all six when absent)
        #[arg(long, value_delimiter = ',')]
        modes: Vec<PositioningMode>,
    },
    /// Train one model per concept-token count; writes k_sweep.csv,
    /// k_sweep_curves.csv and k_sweep.json into --out
    AblateK {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated k values (T/16, T/8, T/4, T/2 when absent)
        #[arg(long, value_delimiter = ',')]
        k_values: Vec<usize>,
    },
    /// Analytic FLOPs of the routed model against a dense baseline
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Sequence length in bytes (context length when absent)
        #[arg(long)]
        seq_bytes: Option<usize>,
        /// Concept tokens (config k when absent)
        #[arg(long)]
        k: Option<usize>,
        /// Baseline tokens per sequence (seq_bytes / 4.25 when absent)
        #[arg(long)]
        baseline_tokens: Option<usize>,
        /// Baseline vocabulary size
        #[arg(long, default_value_t = LLAMA3_VOCAB)]
        baseline_vocab: usize,
        /// Print JSON instead of a table
        #[arg(long)]
        json: bool,
    },
    /// Render router weights and picked bytes of a text
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text to route
        #[arg(long, conflicts_with = "input")]
        text: Option<String>,
        /// File holding the text to route
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output file (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
        /// html or ansi (from the --out extension when absent)
        #[arg(long)]
        format: Option<String>,
        #[arg(long, value_enum, default_value = "topk")]
        routing: RouteChoice,
    },
}

fn shard_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.seg"))
}

fn load_data(dir: &Path) -> Result<TrainData> {
    Ok(TrainData {
        train: read_segment_shard(&shard_path(dir, "train"))?,
        eval: read_segment_shard(&shard_path(dir, "eval"))?,
        special: SpecialTokens::bytes(),
    })
}

fn progress(label: &str) -> impl FnMut(&MetricsRecord) + '_ {
    move |m| {
        eprintln!(
            "{label}step {:>6}  train {:.4} nats  eval {:.4} bpb  picked {:.3}{}  {:.0}s",
            m.step,
            m.train_loss_nats,
            m.eval_bpb,
            m.picked_fraction,
            if m.glitch { "  GLITCH" } else { "" },
            m.wall_clock_s
        )
    }
}

fn write_metrics(out: &Path, metrics: &[MetricsRecord]) -> Result<()> {
    write_jsonl(fs::File::create(out.join("metrics.jsonl"))?, metrics)?;
    write_csv(fs::File::create(out.join("metrics.csv"))?, metrics)
}

fn cmd_prepare(input: &Path, out: &Path, train_fraction: f64, cfg: &ConfigArgs) -> Result<()> {
    let cfg = cfg.resolve()?;
    let docs = read_documents(input)?;
    let split = split_corpus(docs, train_fraction, cfg.train.seed)?;
    fs::create_dir_all(out)?;
    for (name, docs) in [("train", &split.train), ("eval", &split.eval), ("test", &split.test)] {
        let mut segs = Vec::new();
        for d in docs {
            segs.extend(clip_segments(d, cfg.model.context_length)?);
        }
        write_segment_shard(&shard_path(out, name), &segs)?;
        let bytes: usize = segs.iter().map(|s| s.byte_len).sum();
        println!("{name}: {} documents, {} segments, {bytes} bytes", docs.len(), segs.len());
    }
    Ok(())
}

fn cmd_train_bpe(input: &Path, vocab_size: usize, out: &Path) -> Result<()> {
    let corpus: Vec<u8> = if input.extension().is_some_and(|e| e == "seg") {
        read_segment_shard(input)?.iter().flat_map(|s| s.bytes()).collect()
    } else {
        read_documents(input)?.join("\n").into_bytes()
    };
    let vocab = bpe_train(&corpus, vocab_size)?;
    write_vocab(out, &vocab)?;
    println!("{} merges, vocabulary size {}", vocab.merges.len(), vocab.size());
    Ok(())
}

fn finish_training(out: &Path, outcome_ck: &mut Checkpoint, metrics: &[MetricsRecord], cfg: &RunConfig) -> Result<()> {
    outcome_ck.save(&out.join("checkpoint.ckpt"))?;
    write_metrics(out, metrics)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    if let Some(last) = metrics.last() {
        println!(
            "step {}  eval bpb {:.4}  picked {:.3}  router threshold {:.4}",
            last.step, last.eval_bpb, last.picked_fraction, outcome_ck.router_threshold
        );
    }
    Ok(())
}

fn dump_on_nan(out: &Path, err: Error) -> Error {
    if let Error::NonFiniteLoss { detail, .. } = &err {
        let path = out.join("nan_dump.json");
        if fs::write(&path, detail).is_ok() {
            eprintln!("offending batch written to {}", path.display());
        }
    }
    err
}

fn cmd_train(cfg: &ConfigArgs, data: &Path, out: &Path, model: ModelChoice, bpe: Option<&Path>) -> Result<()> {
    let mut run = cfg.resolve()?;
    let mut data = load_data(data)?;
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    match model {
        ModelChoice::Synergy => {
            let m = SynergyModel::<f32>::new(run.model.clone(), &mut rng)?;
            eprintln!("synergy model, {} parameters", m.count_params());
            let mut o = train(m, &data, &run.train, progress("")).map_err(|e| dump_on_nan(out, e))?;
            finish_training(out, &mut o.checkpoint, &o.metrics, &run)
        }
        ModelChoice::Dense => {
            let mut merges = None;
            if let Some(path) = bpe {
                let vocab = read_vocab(path)?;
                data.train = bpe_segments(&data.train, &vocab);
                data.eval = bpe_segments(&data.eval, &vocab);
                data.special = SpecialTokens::after(vocab.size());
                run.model.vocab_size = vocab.size() + SpecialTokens::COUNT;
                merges = Some(vocab.merges.clone());
            }
            let m = DenseModel::<f32>::new(run.model.clone(), &mut rng)?;
            eprintln!("dense baseline, {} parameters", m.count_params());
            let mut o = train(m, &data, &run.train, progress("")).map_err(|e| dump_on_nan(out, e))?;
            o.checkpoint.bpe_merges = merges;
            finish_training(out, &mut o.checkpoint, &o.metrics, &run)
        }
    }
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: Split, batch_size: usize, max_batches: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let name = match split {
        Split::Train => "train",
        Split::Eval => "eval",
        Split::Test => "test",
    };
    let mut segs = read_segment_shard(&shard_path(data, name))?;
    let mut special = SpecialTokens::bytes();
    if let Some(merges) = &ck.bpe_merges {
        let vocab = synergy_core::corpus::BpeVocab::from_merges(merges.clone())?;
        segs = bpe_segments(&segs, &vocab);
        special = SpecialTokens::after(vocab.size());
    }
    let batches = max_batches.unwrap_or(usize::MAX);
    let ev = match ck.kind {
        ModelKind::Synergy => evaluate(&ck.synergy_model()?, &segs, special, batch_size, batches)?,
        ModelKind::Dense => evaluate(&ck.dense_model()?, &segs, special, batch_size, batches)?,
    };
    println!(
        "{}",
        serde_json::json!({
            "split": name,
            "bpb": ev.bpb,
            "mean_nats": ev.mean_nats(),
            "n_bytes": ev.n_bytes,
            "n_targets": ev.n_targets,
            "picked_fraction": ev.picked_fraction,
        })
    );
    Ok(())
}

fn cmd_generate(checkpoint: &Path, prompt: &str, max_new: usize, temperature: f64, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.bpe_merges.is_some() {
        return Err(Error::InvalidArgument("generate needs a byte-level checkpoint".into()));
    }
    let thr = ck.router_threshold as f32;
    let bytes = match ck.kind {
        ModelKind::Synergy => generate(&ck.synergy_model()?, prompt.as_bytes(), max_new, temperature, thr, seed)?,
        ModelKind::Dense => generate(&ck.dense_model()?, prompt.as_bytes(), max_new, temperature, thr, seed)?,
    };
    let mut out = std::io::stdout().lock();
    out.write_all(&bytes)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn write_table(out: &Path, table: &AblationTable) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{}.csv", table.name)), table.to_csv())?;
    fs::write(out.join(format!("{}_curves.csv", table.name)), table.curves_csv())?;
    fs::write(out.join(format!("{}.json", table.name)), serde_json::to_string_pretty(table)?)?;
    print!("{}", table.to_csv());
    if let Some(t) = table.bbpe_reference_tokens {
        println!("# BBPE reference: {t:.2} tokens per sequence at {BBPE_BYTES_PER_TOKEN} bytes/token");
    }
    if table.rows.iter().any(|r| r.reference_bpb.is_some()) {
        println!("# reference_bpb: published full-scale values, not reproduced at this scale");
    }
    let failed = table.rows.len() - table.completed();
    if failed > 0 {
        eprintln!("{failed} run(s) failed; see the error column");
    }
    Ok(())
}

fn cmd_ablate_positioning(cfg: &ConfigArgs, data: &Path, out: &Path, modes: &[PositioningMode]) -> Result<()> {
    let run = cfg.resolve()?;
    let data = load_data(data)?;
    let modes = if modes.is_empty() { PositioningMode::ALL.to_vec() } else { modes.to_vec() };
    let table = run_positioning_ablation(&run.model, &run.train, &data, &modes, |label, m| {
        progress(&format!("[{label}] "))(m)
    })?;
    write_table(out, &table)
}

fn cmd_ablate_k(cfg: &ConfigArgs, data: &Path, out: &Path, k_values: &[usize]) -> Result<()> {
    let run = cfg.resolve()?;
    let data = load_data(data)?;
    let t = run.model.context_length;
    let ks = if k_values.is_empty() { vec![t / 16, t / 8, t / 4, t / 2] } else { k_values.to_vec() };
    let table = run_k_sweep(&run.model, &run.train, &data, &ks, |label, m| progress(&format!("[{label}] "))(m))?;
    write_table(out, &table)
}

fn cmd_flops(
    cfg: &ConfigArgs,
    seq_bytes: Option<usize>,
    k: Option<usize>,
    baseline_tokens: Option<usize>,
    baseline_vocab: usize,
    json: bool,
) -> Result<()> {
    let run = cfg.resolve()?;
    let seq = seq_bytes.unwrap_or(run.model.context_length);
    let k = k.unwrap_or(run.model.k);
    let base = baseline_tokens.unwrap_or((seq as f64 / BBPE_BYTES_PER_TOKEN).round() as usize);
    let r = estimate_flops(&run.model, seq, k, base, baseline_vocab);
    if json {
        println!("{}", serde_json::to_string_pretty(&r)?);
        return Ok(());
    }
    println!("sequence: {seq} bytes, {k} concept tokens; baseline: {base} tokens, vocabulary {baseline_vocab}");
    println!("{:<10} {:>14} {:>14} {:>14} {:>14} {:>14}", "", "mlp", "attention", "head", "other", "total");
    for (name, b) in [("synergy", &r.synergy), ("baseline", &r.baseline)] {
        println!(
            "{name:<10} {:>14.4e} {:>14.4e} {:>14.4e} {:>14.4e} {:>14.4e}",
            b.mlp,
            b.attention(),
            b.head,
            b.other,
            b.total()
        );
    }
    println!("ratio (synergy / baseline): {:.3}", r.ratio);
    println!("MLP share of the extra layer FLOPs: {:.1}%", 100.0 * r.mlp_share_of_extra);
    Ok(())
}

fn cmd_visualize(
    checkpoint: &Path,
    text: Option<&str>,
    input: Option<&Path>,
    out: Option<&Path>,
    format: Option<&str>,
    routing: RouteChoice,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.kind != ModelKind::Synergy {
        return Err(Error::InvalidArgument("visualize needs a synergy checkpoint".into()));
    }
    let model = ck.synergy_model()?;
    let text = match (text, input) {
        (Some(t), _) => t.as_bytes().to_vec(),
        (None, Some(p)) => fs::read(p)?,
        (None, None) => return Err(Error::InvalidArgument("pass --text or --input".into())),
    };
    let routing = match routing {
        RouteChoice::Topk => Routing::TopK,
        RouteChoice::Threshold => Routing::Threshold(ck.router_threshold as f32),
    };
    let record = route_text(&model, &text, routing)?;
    let format = match format {
        Some(f) => f.parse()?,
        None if out.is_some_and(|p| p.extension().is_some_and(|e| e == "html" || e == "htm")) => VizFormat::Html,
        None if out.is_none() => VizFormat::Ansi,
        None => VizFormat::Html,
    };
    let doc = render_routing(&record, format)?;
    match out {
        Some(p) => fs::write(p, &doc)?,
        None => print!("{doc}"),
    }
    let expected = model.config().k as f64 / model.config().context_length as f64;
    eprintln!(
        "{} bytes, {} picked, picked_fraction {:.4} (k/T = {:.4})",
        record.text_bytes.len(),
        record.m.iter().filter(|&&b| b).count(),
        record.picked_fraction(),
        expected
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Prepare { input, out, train_fraction, cfg } => cmd_prepare(&input, &out, train_fraction, &cfg),
        Cmd::TrainBpe { input, vocab_size, out } => cmd_train_bpe(&input, vocab_size, &out),
        Cmd::Train { cfg, data, out, model, bpe } => cmd_train(&cfg, &data, &out, model, bpe.as_deref()),
        Cmd::Eval { checkpoint, data, split, batch_size, max_batches } => {
            cmd_eval(&checkpoint, &data, split, batch_size, max_batches)
        }
        Cmd::Generate { checkpoint, prompt, max_new, temperature, seed } => {
            cmd_generate(&checkpoint, &prompt, max_new, temperature, seed)
        }
        Cmd::AblatePositioning { cfg, data, out, modes } => cmd_ablate_positioning(&cfg, &data, &out, &modes),
        Cmd::AblateK { cfg, data, out, k_values } => cmd_ablate_k(&cfg, &data, &out, &k_values),
        Cmd::Flops { cfg, seq_bytes, k, baseline_tokens, baseline_vocab, json } => {
            cmd_flops(&cfg, seq_bytes, k, baseline_tokens, baseline_vocab, json)
        }
        Cmd::Visualize { checkpoint, text, input, out, format, routing } => cmd_visualize(
            &checkpoint,
            text.as_deref(),
            input.as_deref(),
            out.as_deref(),
            format.as_deref(),
            routing,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

