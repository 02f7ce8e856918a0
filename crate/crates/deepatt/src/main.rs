//! `deepatt` command line: train, tag, eval, gradcheck, bench.

use clap::{Args, Parser, Subcommand};
use deepatt::checkpoint::{read_checkpoint, read_sidecars, write_checkpoint, write_sidecars};
use deepatt::data::{parse_corpus, serialize_corpus, LabeledSentence, Vocabulary};
use deepatt::decode::{tags_to_spans, TagSet};
use deepatt::encoder::{ModelConfig, ModelParameters};
use deepatt::gradcheck;
use deepatt::metrics::{report, SpanSets};
use deepatt::real::Real;
use deepatt::runconfig::{DecodeMode, RunConfig};
use deepatt::tensor::Tensor;
use deepatt::training::{
    decode_probs, encode_corpus, load_pretrained, predict_probs, train_loop,
    EncodedSentence, TrainOptions,
};
use deepatt::{Error, Result};
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "deepatt", about = "Self-attention semantic role labeling tagger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run-config file.
    Train(TrainArgs),
    /// Tag a corpus with a trained checkpoint.
    Tag(TagArgs),
    /// Score a predicted corpus against gold tags.
    Eval(EvalArgs),
    /// Finite-difference gradient checks over every op (64-bit).
    Gradcheck(GradcheckArgs),
    /// Forward-pass throughput per sub-layer kind.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Train in 64-bit precision regardless of the config.
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct TagArgs {
    /// Single checkpoint to decode with.
    #[arg(long, conflicts_with = "checkpoints")]
    checkpoint: Option<PathBuf>,
    /// Comma-separated checkpoint list; per-token softmax distributions
    /// are averaged before decoding.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<PathBuf>,
    /// Input corpus (tag column optional).
    #[arg(long)]
    input: PathBuf,
    /// Output path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = "argmax")]
    decode: String,
    /// Decode in 64-bit precision.
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Include V spans in the scores.
    #[arg(long)]
    score_verb: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeds per op.
    #[arg(long, default_value_t = 20)]
    seed: u64,
    /// Negative-control hook: corrupt one gradient and expect failure.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Optional run-config for the model shape.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated sentence lengths; bare `--lengths` benches nothing.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "10,50,100")]
    lengths: Vec<usize>,
    /// Forward passes per measurement.
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

fn main() {
    // map clap's usage failures onto exit code 1 (2 is reserved for data errors)
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Tag(a) => cmd_tag(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn build_inventories(corpus: &[LabeledSentence], min_count: usize) -> Result<(Vocabulary, TagSet)> {
    let vocab = Vocabulary::build(corpus, min_count)?;
    let tagset = TagSet::from_tag_strings(
        corpus
            .iter()
            .filter_map(|s| s.tags.as_ref())
            .flat_map(|tags| tags.iter().map(String::as_str)),
    );
    Ok((vocab, tagset))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.f64 {
        cfg.use_f64 = true;
    }
    cfg.validate()?;
    if cfg.use_f64 {
        run_train::<f64>(&cfg)
    } else {
        run_train::<f32>(&cfg)
    }
}

fn run_train<T: Real>(cfg: &RunConfig) -> Result<()> {
    let train_path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("config is missing train_path".into()))?;
    let train_corpus = parse_corpus(Path::new(train_path))?;
    if train_corpus.is_empty() {
        return Err(Error::Data(format!("training corpus {train_path} is empty")));
    }
    let (vocab, tagset) = build_inventories(&train_corpus, cfg.min_count)?;
    let train = encode_corpus(&train_corpus, &vocab, &tagset)?;
    let dev = match &cfg.dev_path {
        Some(p) => Some(encode_corpus(&parse_corpus(Path::new(p))?, &vocab, &tagset)?),
        None => None,
    };

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut params = ModelParameters::<T>::init(&cfg.model, vocab.len(), tagset.len(), &mut rng)?;
    if let Some(emb_path) = &cfg.embeddings_path {
        let text = std::fs::read_to_string(emb_path)
            .map_err(|e| Error::Data(format!("cannot read embeddings {emb_path}: {e}")))?;
        let loaded = load_pretrained(&text, &vocab, cfg.model.word_dim, &mut params)?;
        eprintln!("loaded {loaded} pretrained embedding rows");
    }

    let opts = TrainOptions {
        eval_every: cfg.eval_every,
        early_stop_f1: None,
        constrained: cfg.decode == DecodeMode::Constrained,
        score_verb: cfg.score_verb,
    };
    let outcome = train_loop(
        &train,
        dev.as_deref(),
        &cfg.model,
        &cfg.schedule,
        &mut params,
        &tagset,
        cfg.seed,
        &opts,
    )?;

    let dir = PathBuf::from(cfg.checkpoint_dir.clone().unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&dir)?;
    let mut log = outcome.log.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    std::fs::write(dir.join("metrics.log"), log)?;
    let best = outcome.best_params.as_ref().unwrap_or(&params);
    let ckpt = dir.join("model.ckpt");
    write_checkpoint(&ckpt, &cfg.model, best)?;
    write_sidecars(&ckpt, &vocab, &tagset)?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        outcome.steps_run,
        outcome.final_loss,
        ckpt.display()
    );
    if let Some(f1) = outcome.best_dev_f1 {
        println!("best dev F1 {f1:.4}");
    }
    Ok(())
}

fn cmd_tag(args: TagArgs) -> Result<()> {
    let mut paths = args.checkpoints.clone();
    if let Some(p) = args.checkpoint {
        paths.push(p);
    }
    if paths.is_empty() {
        return Err(Error::Usage("tag needs --checkpoint or --checkpoints".into()));
    }
    let mode = DecodeMode::parse(&args.decode)
        .map_err(|_| Error::Usage(format!("unknown decode mode '{}'", args.decode)))?;
    let constrained = match mode {
        DecodeMode::Argmax => false,
        DecodeMode::Constrained => true,
    };
    let corpus = parse_corpus(&args.input)?;
    let tagged = if args.f64 {
        tag_corpus::<f64>(&paths, &corpus, constrained)?
    } else {
        tag_corpus::<f32>(&paths, &corpus, constrained)?
    };
    let text = serialize_corpus(&tagged);
    match args.output {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn tag_corpus<T: Real>(
    paths: &[PathBuf],
    corpus: &[LabeledSentence],
    constrained: bool,
) -> Result<Vec<LabeledSentence>> {
    let mut models: Vec<(ModelConfig, ModelParameters<T>)> = Vec::new();
    let (vocab, tagset) = read_sidecars(&paths[0])?;
    for p in paths {
        let (cfg, params) = read_checkpoint::<T>(p)?;
        let (v, t) = read_sidecars(p)?;
        if v != vocab || t != tagset {
            return Err(Error::Data(format!(
                "checkpoint {} has a different vocabulary or tag inventory",
                p.display()
            )));
        }
        models.push((cfg, params));
    }
    let data = encode_corpus(corpus, &vocab, &tagset)?;
    let mut out = Vec::with_capacity(corpus.len());
    for (sent, enc) in corpus.iter().zip(&data) {
        let enc_untagged = EncodedSentence { gold: None, ..enc.clone() };
        let mut avg: Option<Tensor<f64>> = None;
        for (cfg, params) in &models {
            let probs = predict_probs(&enc_untagged, cfg, params)?;
            avg = Some(match avg {
                None => probs,
                Some(a) => {
                    let data: Vec<f64> =
                        a.data().iter().zip(probs.data()).map(|(x, y)| x + y).collect();
                    Tensor::new(a.shape().to_vec(), data)?
                }
            });
        }
        let avg = avg.unwrap();
        let n = models.len() as f64;
        let avg = avg.map(|v| v / n);
        let ids = decode_probs(&avg, &tagset, constrained)?;
        out.push(LabeledSentence {
            words: sent.words.clone(),
            mask: sent.mask.clone(),
            tags: Some(ids.iter().map(|&i| tagset.label(i).to_string()).collect()),
        });
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let gold = parse_corpus(&args.gold)?;
    let pred = parse_corpus(&args.pred)?;
    if gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "gold has {} sentences, pred has {}",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(&pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Data(format!(
                "sentence {} differs in length: gold {}, pred {}",
                i + 1,
                g.len(),
                p.len()
            )));
        }
        if g.tags.is_none() || p.tags.is_none() {
            return Err(Error::Data(format!("sentence {} is missing tags", i + 1)));
        }
    }
    let all_tags = gold
        .iter()
        .chain(&pred)
        .filter_map(|s| s.tags.as_ref())
        .flat_map(|t| t.iter().map(String::as_str));
    let tagset = TagSet::from_tag_strings(all_tags);
    let to_ids = |s: &LabeledSentence| -> Result<Vec<usize>> {
        s.tags.as_ref().unwrap().iter().map(|t| tagset.id(t)).collect()
    };
    let mut pred_spans = Vec::new();
    let mut gold_spans = Vec::new();
    for (g, p) in gold.iter().zip(&pred) {
        gold_spans.push(tags_to_spans(&to_ids(g)?, &tagset));
        pred_spans.push(tags_to_spans(&to_ids(p)?, &tagset));
    }
    let instances: Vec<SpanSets> = pred_spans
        .iter()
        .zip(&gold_spans)
        .map(|(p, g)| (p.as_slice(), g.as_slice()))
        .collect();
    print!("{}", report(&instances, args.score_verb));
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports = gradcheck::run_all(args.seed, args.corrupt)?;
    let mut failed = false;
    for r in &reports {
        let ok = r.passed(gradcheck::TOLERANCE);
        println!(
            "{} {}: max relative error {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.op,
            r.max_rel_err
        );
        failed |= !ok;
    }
    if failed {
        let worst = reports
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .unwrap();
        return Err(Error::Numeric(format!(
            "gradient check failed; worst op {} at {:.3e}",
            worst.op, worst.max_rel_err
        )));
    }
    println!("all {} ops within {:.0e}", reports.len(), gradcheck::TOLERANCE);
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let model = match &args.config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig {
            depth: 2,
            width: 200,
            heads: 8,
            ffn_width: 800,
            word_dim: 100,
            mask_dim: 100,
            ..ModelConfig::default()
        },
    };
    println!("sublayer,length,tokens_per_sec");
    for kind in [
        deepatt::sublayers::SublayerKind::Ffn,
        deepatt::sublayers::SublayerKind::CnnGlu,
        deepatt::sublayers::SublayerKind::RnnBilstm,
    ] {
        let cfg = ModelConfig { sublayer: kind, ..model.clone() };
        for &n in &args.lengths {
            let tps = bench_forward(&cfg, n, args.reps.max(1))?;
            println!("{},{n},{tps:.0}", kind.as_str());
        }
    }
    Ok(())
}

fn bench_forward(cfg: &ModelConfig, n: usize, reps: usize) -> Result<f64> {
    let mut rng = StdRng::seed_from_u64(1);
    let params = ModelParameters::<f32>::init(cfg, 64, 9, &mut rng)?;
    let sent = EncodedSentence {
        word_ids: (0..n).map(|i| 2 + (i % 62)).collect(),
        mask_bits: (0..n).map(|i| usize::from(i == n / 2)).collect(),
        gold: None,
    };
    let tagset = TagSet::from_roles(&["A0", "A1", "A2", "V"]);
    // warm up once so allocation noise stays out of the measurement
    deepatt::training::predict_tags(&sent, cfg, &params, &tagset, false)?;
    let start = Instant::now();
    for _ in 0..reps {
        deepatt::training::predict_tags(&sent, cfg, &params, &tagset, false)?;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(n as f64 * reps as f64 / secs)
}
