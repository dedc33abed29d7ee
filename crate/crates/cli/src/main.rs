use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use polyadapt::config::RunConfig;
use polyadapt::data::{Corpus, Tier};
use polyadapt::error::Error;
use polyadapt::eval::{evaluate, DecodeOptions};
use polyadapt::experiment::{checksum, run_ablation, AblationTable, RunOutcome};
use polyadapt::layers::count_language_params;
use polyadapt::model::{build_model, AblationVariant, Checkpoint, Model, DECODER_KIND, ENCODER_KIND};
use polyadapt::pretrain::{pretrain_decoder, pretrain_encoder, DecoderPretrainer, EncoderPretrainer, Pretrained};
use polyadapt::train::fit;

#[derive(Parser)]
#[command(name = "polyadapt", version, about = "Multilingual speech-to-text with language-adaptive weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Beam,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multilingual corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Self-supervised pretraining of the acoustic encoder or the text decoder.
    Pretrain {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune one variant and keep its best-dev checkpoint.
    Train {
        /// tf, w, wm, wma, wmf, fwma or fwmf
        #[arg(long)]
        variant: AblationVariant,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        enc_ckpt: Option<PathBuf>,
        #[arg(long)]
        dec_ckpt: Option<PathBuf>,
        /// Relative-position self-attention in the acoustic encoder.
        #[arg(long)]
        rel_pos: bool,
        /// Append the pretrained text-encoder layers after the acoustic encoder.
        #[arg(long)]
        stack: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a split and score it.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every variant over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print shared, per-language and trainable parameter counts.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict the trainable count to one variant.
        #[arg(long)]
        variant: Option<AblationVariant>,
    },
}

enum Failure {
    Criteria(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Criteria(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical { .. } => 3,
                _ => 2,
            })
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData { config, out, seed } => gen_data(config, out, seed),
        Command::Pretrain { kind, config, data, out } => pretrain(kind, config, data, out),
        Command::Train {
            variant,
            config,
            data,
            enc_ckpt,
            dec_ckpt,
            rel_pos,
            stack,
            out,
        } => train(variant, config, data, enc_ckpt, dec_ckpt, rel_pos, stack, out),
        Command::Evaluate {
            ckpt,
            data,
            split,
            mode,
            out,
        } => evaluate_cmd(ckpt, data, split, mode, out),
        Command::Ablate { config, data, seeds, out } => ablate(config, data, seeds, out),
        Command::CountParams { config, variant } => count_params(config, variant),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.model.validate()?;
    Ok(cfg)
}

/// Creates `out` and writes the resolved config first, so an unwritable
/// destination fails before any work starts.
fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), Error> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join("resolved.cfg"))
}

/// Loads a corpus and aligns the data and vocabulary settings with it.
fn load_corpus(dir: &Path, cfg: &mut RunConfig) -> Result<Corpus, Error> {
    let corpus = Corpus::load(dir)?;
    if cfg.data != corpus.config {
        log::info!("using the [data] section stored with the corpus");
    }
    cfg.data = corpus.config.clone();
    cfg.model.num_languages = corpus.langs.len();
    cfg.model.vocab_size = corpus.vocab.size();
    cfg.model.feature_dim = corpus.acoustics.feature_dim;
    cfg.model.validate()?;
    Ok(corpus)
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct JsonLines {
    path: PathBuf,
    file: fs::File,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self, Error> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    fn push(&mut self, value: serde_json::Value) -> Result<(), Error> {
        writeln!(self.file, "{value}").map_err(|e| Error::io(&self.path, e))
    }
}

fn gen_data(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Outcome {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.model.num_languages = cfg.data.medium_langs + cfg.data.low_langs + cfg.data.very_low_langs;
    prepare_out(&out, &cfg)?;
    let corpus = Corpus::generate(&cfg.data, cfg.model.feature_dim, cfg.seed)?;
    corpus.write(&out)?;
    println!("tier\tlanguages\tutterances");
    for (tier, langs, utts) in corpus.tier_counts() {
        println!("{tier}\t{langs}\t{utts}");
    }
    println!("checksum\t{:016x}", corpus.checksum());
    Ok(())
}

fn run_pretraining(kind: Kind, corpus: &Corpus, cfg: &RunConfig, log: &mut JsonLines) -> Result<Pretrained, Error> {
    let mut sink_err = None;
    let mut on_step = |r: &polyadapt::pretrain::PretrainRecord| {
        if r.step.is_multiple_of(50) {
            log::info!("step {} loss {:.4}", r.step, r.loss);
        }
        if let Err(e) = log.push(json!({"kind": "pretrain", "record": r})) {
            sink_err.get_or_insert(e);
        }
    };
    let done = match kind {
        Kind::Encoder => pretrain_encoder(corpus, cfg, cfg.seed, &mut on_step)?,
        Kind::Decoder => pretrain_decoder(corpus, cfg, cfg.seed, &mut on_step)?,
    };
    match sink_err {
        Some(e) => Err(e),
        None => Ok(done),
    }
}

fn kind_name(kind: Kind) -> &'static str {
    match kind {
        Kind::Encoder => ENCODER_KIND,
        Kind::Decoder => DECODER_KIND,
    }
}

fn pretrain(kind: Kind, config: Option<PathBuf>, data: PathBuf, out: PathBuf) -> Outcome {
    let mut cfg = load_config(config.as_deref())?;
    let corpus = load_corpus(&data, &mut cfg)?;
    prepare_out(&out, &cfg)?;
    let mut log = JsonLines::create(out.join("metrics.jsonl"))?;
    let done = run_pretraining(kind, &corpus, &cfg, &mut log)?;
    let path = out.join(format!("{}.ckpt", kind_name(kind)));
    done.checkpoint.save(&path)?;
    println!("{}\t{}\t{}", kind_name(kind), path.display(), checksum(&done.checkpoint));
    Ok(())
}

fn load_opt(path: Option<PathBuf>) -> Result<Option<Checkpoint>, Error> {
    path.map(|p| Checkpoint::load(&p)).transpose()
}

#[allow(clippy::too_many_arguments)]
fn train(
    variant: AblationVariant,
    config: Option<PathBuf>,
    data: PathBuf,
    enc_ckpt: Option<PathBuf>,
    dec_ckpt: Option<PathBuf>,
    rel_pos: bool,
    stack: bool,
    out: PathBuf,
) -> Outcome {
    let mut cfg = load_config(config.as_deref())?;
    cfg.model.rel_pos |= rel_pos;
    cfg.model.stack_text_encoder |= stack;
    let needs_dec = variant.needs_decoder_ckpt() || cfg.model.stack_text_encoder;
    let missing: Vec<&str> = [
        (variant.needs_encoder_ckpt() && enc_ckpt.is_none(), "--enc-ckpt"),
        (needs_dec && dec_ckpt.is_none(), "--dec-ckpt"),
    ]
    .into_iter()
    .filter_map(|(absent, flag)| absent.then_some(flag))
    .collect();
    if !missing.is_empty() {
        let with = if cfg.model.stack_text_encoder { " with --stack" } else { "" };
        return Err(Error::Usage(format!("variant {variant}{with} requires {}", missing.join(" and "))).into());
    }
    let enc = if variant.needs_encoder_ckpt() { load_opt(enc_ckpt)? } else { None };
    let dec = if needs_dec { load_opt(dec_ckpt)? } else { None };
    let corpus = load_corpus(&data, &mut cfg)?;
    prepare_out(&out, &cfg)?;
    let mut model = build_model(&cfg.model, variant, enc.as_ref(), dec.as_ref(), cfg.seed)?;
    let trainable = model.trainable_count();
    println!("variant\t{variant}\ntrainable\t{trainable}\nrel_pos\t{}", cfg.model.rel_pos);
    let mut log = JsonLines::create(out.join("metrics.jsonl"))?;
    log.push(json!({"kind": "params", "variant": variant.label(), "trainable": trainable, "rel_pos": cfg.model.rel_pos}))?;
    let mut sink_err = None;
    let fitted = fit(&mut model, &corpus, &cfg, cfg.seed, |r| {
        log::info!("update {} train {:.4} dev loss {:.4} dev WER {:.2}", r.update, r.train_loss, r.dev_loss, r.dev_wer);
        if let Err(e) = log.push(json!({"kind": "eval", "record": r})) {
            sink_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = sink_err {
        return Err(e.into());
    }
    log.push(json!({
        "kind": "best",
        "update": fitted.best_update,
        "dev_wer": fitted.best_dev_wer,
        "best_loss_update": fitted.best_loss_update,
    }))?;
    fitted.best.save(&out.join("best.ckpt"))?;
    println!("best_update\t{}\nbest_dev_wer\t{:.2}", fitted.best_update, fitted.best_dev_wer);
    Ok(())
}

fn evaluate_cmd(ckpt: PathBuf, data: PathBuf, split: String, mode: Mode, out: PathBuf) -> Outcome {
    let ck = Checkpoint::load(&ckpt)?;
    let model = Model::from_checkpoint(&ck)?;
    let mut cfg = RunConfig {
        model: model.config.clone(),
        ..RunConfig::default()
    };
    cfg.eval.mode = match mode {
        Mode::Greedy => "greedy",
        Mode::Beam => "beam",
    }
    .to_string();
    cfg.eval.max_per_lang = 0;
    let corpus = Corpus::load(&data)?;
    cfg.data = corpus.config.clone();
    corpus.split(&split)?;
    prepare_out(&out, &cfg)?;
    let opts = DecodeOptions::from_config(&cfg.eval)?;
    let (report, hyps) = evaluate(&model, &corpus, &split, &opts, 0)?;
    write(&out.join("report.tsv"), &report.to_tsv())?;
    write(&out.join("report.txt"), &report.to_text())?;
    write(&out.join("metrics.jsonl"), &report.to_json_lines())?;
    let utts = corpus.split(&split)?;
    let mut h = String::from("lang\treference\thypothesis\n");
    for (u, hyp) in utts.iter().zip(&hyps) {
        let _ = writeln!(h, "{}\t{}\t{}", corpus.langs[u.lang].tag, u.text, corpus.vocab.detokenize(&hyp.tokens));
    }
    write(&out.join("hypotheses.tsv"), &h)?;
    print!("{}", report.to_text());
    Ok(())
}

fn pretrained_ckpt(kind: Kind, corpus: &Corpus, cfg: &RunConfig, dir: &Path) -> Result<Checkpoint, Error> {
    let path = dir.join(format!("{}.ckpt", kind_name(kind)));
    if path.exists() {
        log::info!("reusing {}", path.display());
        return Checkpoint::load(&path);
    }
    log::info!("building {} checkpoint", kind_name(kind));
    let mut log = JsonLines::create(dir.join(format!("{}.jsonl", kind_name(kind))))?;
    let done = run_pretraining(kind, corpus, cfg, &mut log)?;
    done.checkpoint.save(&path)?;
    Ok(done.checkpoint)
}

const ESCALATED_SEEDS: usize = 5;

fn ablate(config: Option<PathBuf>, data: PathBuf, seeds: usize, out: PathBuf) -> Outcome {
    if seeds == 0 {
        return Err(Error::Usage("--seeds must be >= 1".into()).into());
    }
    let mut cfg = load_config(config.as_deref())?;
    let corpus = load_corpus(&data, &mut cfg)?;
    prepare_out(&out, &cfg)?;
    let pre_dir = out.join("pretrain");
    fs::create_dir_all(&pre_dir).map_err(|e| Error::io(&pre_dir, e))?;
    let enc = pretrained_ckpt(Kind::Encoder, &corpus, &cfg, &pre_dir)?;
    let dec = pretrained_ckpt(Kind::Decoder, &corpus, &cfg, &pre_dir)?;
    let sums = [(ENCODER_KIND, checksum(&enc)), (DECODER_KIND, checksum(&dec))];

    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let mut log = JsonLines::create(out.join("metrics.jsonl"))?;
    for (kind, sum) in &sums {
        log.push(json!({"kind": "checkpoint", "which": kind, "checksum": sum}))?;
    }
    let mut runs: Vec<RunOutcome> = Vec::new();
    let batch = |seed_list: &[u64], runs: &mut Vec<RunOutcome>, log: &mut JsonLines| -> Result<(), Error> {
        let mut pending = Vec::new();
        let fresh = run_ablation(&corpus, &cfg, seed_list, &enc, &dec, |r| {
            match &r.result {
                Ok(s) => log::info!("{} seed {}: test WER {:.2}", r.variant, r.seed, s.report.overall()),
                Err(e) => log::warn!("{} seed {} failed: {e}", r.variant, r.seed),
            }
            pending.push(run_json(r));
        })?;
        for v in pending {
            log.push(v)?;
        }
        for r in &fresh {
            if let Ok(s) = &r.result {
                write(&runs_dir.join(format!("{}-{}.tsv", r.variant.label().to_lowercase(), r.seed)), &s.report.to_tsv())?;
            }
        }
        runs.extend(fresh);
        Ok(())
    };
    let first: Vec<u64> = (0..seeds as u64).map(|i| cfg.seed + i).collect();
    batch(&first, &mut runs, &mut log)?;
    let mut table = AblationTable::new(&corpus, &runs);
    if seeds < ESCALATED_SEEDS && table.criteria.iter().any(|c| c.pass == Some(false)) {
        log::info!("a directional check failed; escalating to {ESCALATED_SEEDS} seeds");
        let extra: Vec<u64> = (seeds as u64..ESCALATED_SEEDS as u64).map(|i| cfg.seed + i).collect();
        batch(&extra, &mut runs, &mut log)?;
        table = AblationTable::new(&corpus, &runs);
    }
    for c in &table.criteria {
        log.push(json!({"kind": "criterion", "result": c}))?;
    }
    let mut text = table.to_text();
    for (kind, sum) in &sums {
        let _ = writeln!(text, "{kind} checkpoint checksum {sum}");
    }
    write(&out.join("report.tsv"), &table.to_tsv())?;
    write(&out.join("report.txt"), &text)?;
    print!("{text}");
    if table.any_unevaluable() {
        return Err(Failure::Criteria("directional checks could not be evaluated".into()));
    }
    if !table.all_pass() {
        return Err(Failure::Criteria("directional checks failed".into()));
    }
    Ok(())
}

fn run_json(r: &RunOutcome) -> serde_json::Value {
    match &r.result {
        Ok(s) => {
            let tiers: serde_json::Map<String, serde_json::Value> = Tier::ALL
                .iter()
                .filter_map(|&t| s.report.tier(t).map(|w| (t.label().to_string(), json!(w))))
                .collect();
            json!({
                "kind": "run",
                "variant": r.variant.label(),
                "seed": r.seed,
                "trainable": r.trainable,
                "test_wer": s.report.overall(),
                "tiers": tiers,
                "best_update": s.best_update,
                "best_loss_update": s.best_loss_update,
                "log": s.log,
            })
        }
        Err(e) => json!({"kind": "run", "variant": r.variant.label(), "seed": r.seed, "error": e}),
    }
}

fn count_params(config: Option<PathBuf>, variant: Option<AblationVariant>) -> Outcome {
    let cfg = load_config(config.as_deref())?;
    let counts = count_language_params(&cfg.model);
    let enc = EncoderPretrainer::<f32>::new(&cfg.model, &cfg.pretrain, cfg.seed)?.to_checkpoint();
    let dec = DecoderPretrainer::<f32>::new(&cfg.model, cfg.seed)?.to_checkpoint();
    let base = build_model(&cfg.model, AblationVariant::Wm, Some(&enc), Some(&dec), cfg.seed)?;
    println!("shared\t{}", base.shared_param_count());
    println!("adapter_per_language\t{}", counts.adapter_per_lang);
    println!("factorized_per_language\t{}", counts.factorized_per_lang);
    let variants: Vec<AblationVariant> = match variant {
        Some(v) => vec![v],
        None => AblationVariant::ALL.to_vec(),
    };
    for v in variants {
        let m = build_model(&cfg.model, v, Some(&enc), Some(&dec), cfg.seed)?;
        let name = v.label().to_lowercase();
        println!("trainable_{name}\t{}", m.trainable_count());
        println!("per_language_{name}\t{}", m.language_param_count(0));
    }
    Ok(())
}
