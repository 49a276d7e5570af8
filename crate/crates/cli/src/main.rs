mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cse_core::cascade::{CascadeOptions, ExternalScorer, ExternalTranscriber, OverlapScorer, Transcriber};
use cse_core::corpus::{build_eval_set, write_toy_corpus, Corpus, CorpusSample, CorpusSource};
use cse_core::cues::{
    context_key, format_history, speaker_key, CacheCueProvider, CueProvider, EmbeddingCache, ExternalCueProvider,
    MockCueProvider,
};
use cse_core::eval::{
    build_eval_report, config_digest, evaluate_cascade, evaluate_model, CascadeEvalConfig, CascadeSeparation,
    CueMode, EvalReport,
};
use cse_core::metrics::EvalRecord;
use cse_core::model::{Model, Variant};
use cse_core::signal::{write_wav, WavEncoding};
use cse_core::trainer::{train, TrainOptions};
use cse_core::Error;
use serde::Serialize;

use config::{write_json, FileConfig};

/// Context-conditioned target speech extraction toolkit.
#[derive(Parser)]
#[command(name = "cse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON file with model/train/augment/corpus/eval sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct ProviderArgs {
    /// Cue embedding source: mock, cache or external.
    #[arg(long, default_value = "mock")]
    cue_provider: String,
    #[arg(long)]
    context_cache: Option<PathBuf>,
    #[arg(long)]
    speaker_cache: Option<PathBuf>,
    /// Program speaking the line-delimited JSON embedding protocol.
    #[arg(long)]
    provider_cmd: Option<String>,
    #[arg(long = "provider-arg", allow_hyphen_values = true)]
    provider_args: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic dialogues with toy speakers into train/eval manifests.
    MakeToyCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dialogues: Option<usize>,
        #[arg(long)]
        turns: Option<usize>,
    },
    /// Write evaluation mixtures (mixture, sources, metadata) for a manifest.
    Mix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        max_turns: Option<usize>,
        #[arg(long)]
        min_context_turns: Option<usize>,
    },
    /// Train a model on mixtures drawn from a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// Evaluate on this manifest every `eval_every` steps.
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; `--max-turns sweep` runs 0,1,2,5,10,20.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// "all", "sweep", or a comma-separated list of turn limits.
        #[arg(long, default_value = "all")]
        max_turns: String,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        min_context_turns: Option<usize>,
        #[arg(long, default_value = "both")]
        cue_mode: CueMode,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Separate, transcribe and score every stream; keep the best one.
    Cascade {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Separator checkpoint; the true sources are used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        asr_cmd: Option<String>,
        #[arg(long = "asr-arg", allow_hyphen_values = true)]
        asr_args: Vec<String>,
        #[arg(long)]
        lm_cmd: Option<String>,
        #[arg(long = "lm-arg", allow_hyphen_values = true)]
        lm_args: Vec<String>,
        /// Word deletion rate of the ground-truth transcriber.
        #[arg(long, default_value_t = 0.0)]
        word_dropout: f64,
        #[arg(long)]
        per_token: bool,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        max_turns: Option<usize>,
        #[arg(long)]
        min_context_turns: Option<usize>,
    },
    /// Embed every context and enrollment of a manifest into cache files.
    EmbedCache {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Turn limits to render contexts for; "all", "sweep" or a list.
        #[arg(long, default_value = "all")]
        max_turns: String,
    },
}

pub const SWEEP: [usize; 6] = [0, 1, 2, 5, 10, 20];

fn parse_turns(s: &str) -> Result<Vec<Option<usize>>> {
    match s {
        "all" => Ok(vec![None]),
        "sweep" => Ok(SWEEP.iter().map(|&k| Some(k)).collect()),
        list => list
            .split(',')
            .map(|k| {
                k.trim()
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::Validation(format!("bad turn limit {k:?}")).into())
            })
            .collect(),
    }
}

fn make_provider(args: &ProviderArgs, cfg: &FileConfig) -> Result<Box<dyn CueProvider>> {
    let (cd, sd) = (cfg.model.context_dim, cfg.model.speaker_dim);
    Ok(match args.cue_provider.as_str() {
        "mock" => Box::new(MockCueProvider::new(cd, sd)),
        "cache" => {
            let load = |p: &Option<PathBuf>, dim| -> Result<EmbeddingCache> {
                Ok(match p {
                    Some(p) => EmbeddingCache::load(p)?,
                    None => EmbeddingCache::new(dim),
                })
            };
            Box::new(CacheCueProvider {
                context: load(&args.context_cache, cd)?,
                speaker: load(&args.speaker_cache, sd)?,
            })
        }
        "external" => {
            let Some(cmd) = &args.provider_cmd else {
                bail!(Error::Validation("--provider-cmd is required for the external provider".into()));
            };
            Box::new(ExternalCueProvider::spawn(cmd, &args.provider_args, cd, sd)?)
        }
        other => bail!(Error::Validation(format!("unknown cue provider {other:?}"))),
    })
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    mean_si_snr_i: f64,
    mean_sdr_i: f64,
    acc: f64,
    n_samples: usize,
    config_digest: &'a str,
    max_turns: Option<usize>,
    by_context_turns: &'a std::collections::BTreeMap<usize, cse_core::eval::MetricSummary>,
}

fn write_report(dir: &Path, tag: &str, records: &[EvalRecord], digest: &str, max_turns: Option<usize>) -> Result<EvalReport> {
    let report = build_eval_report(records)?;
    write_jsonl(&dir.join(format!("records{tag}.jsonl")), records)?;
    write_json(
        &dir.join(format!("summary{tag}.json")),
        &Summary {
            mean_si_snr_i: report.overall.mean_si_snr_i,
            mean_sdr_i: report.overall.mean_sdr_i,
            acc: report.overall.acc,
            n_samples: report.overall.n_samples,
            config_digest: digest,
            max_turns,
            by_context_turns: &report.by_context_turns,
        },
    )?;
    Ok(report)
}

fn tag(k: Option<usize>) -> String {
    k.map_or(String::new(), |k| format!("_turns{k}"))
}

fn eval_set(cfg: &FileConfig, manifest: &Path, max_turns: Option<usize>, seed: u64) -> Result<Vec<CorpusSample>> {
    let corpus = Corpus::load(manifest)?;
    let set = build_eval_set(&corpus, cfg.eval.speakers, cfg.eval.min_context_turns, max_turns, seed)?;
    if set.is_empty() {
        bail!(Error::Validation(format!(
            "no entries in {} with at least {} turns of history",
            manifest.display(),
            cfg.eval.min_context_turns
        )));
    }
    Ok(set)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToyCorpus {
            common,
            out,
            dialogues,
            turns,
        } => {
            let mut cfg = FileConfig::load(common.config.as_deref())?;
            if let Some(d) = dialogues {
                cfg.corpus.dialogues = d;
            }
            if let Some(t) = turns {
                cfg.corpus.turns_per_dialogue = t;
            }
            let manifests = write_toy_corpus(&out, &cfg.corpus, &["train", "eval"], common.seed)?;
            for m in manifests {
                println!("{}", m.display());
            }
        }
        Command::Mix {
            common,
            manifest,
            out,
            speakers,
            max_turns,
            min_context_turns,
        } => {
            let mut cfg = FileConfig::load(common.config.as_deref())?;
            cfg.eval.speakers = speakers.unwrap_or(cfg.eval.speakers);
            cfg.eval.min_context_turns = min_context_turns.unwrap_or(cfg.eval.min_context_turns);
            let set = eval_set(&cfg, &manifest, max_turns, common.seed)?;
            create_dir(&out)?;
            let mut rows = Vec::with_capacity(set.len());
            for s in &set {
                let mix = format!("{}_mix.wav", s.id);
                write_wav(out.join(&mix), &s.sample.mixture, WavEncoding::Float32)?;
                let mut sources = Vec::new();
                for (k, src) in s.sample.sources.iter().enumerate() {
                    let name = format!("{}_s{k}.wav", s.id);
                    write_wav(out.join(&name), src, WavEncoding::Float32)?;
                    sources.push(name);
                }
                rows.push(serde_json::json!({
                    "id": s.id,
                    "mixture": mix,
                    "sources": sources,
                    "transcripts": s.transcripts,
                    "target_index": s.sample.target_index,
                    "context": s.sample.context_text,
                    "n_context_turns": s.n_context_turns,
                }));
            }
            write_jsonl(&out.join("mixtures.jsonl"), &rows)?;
            println!("{} mixtures", rows.len());
        }
        Command::Train {
            common,
            provider,
            manifest,
            out,
            variant,
            speakers,
            steps,
            init_checkpoint,
            eval_manifest,
        } => {
            let mut cfg = FileConfig::load(common.config.as_deref())?;
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            if let Some(n) = speakers {
                cfg.model.num_streams = n;
                cfg.eval.speakers = n;
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(s / 4);
            }
            if init_checkpoint.is_some() {
                cfg.train.init_checkpoint = init_checkpoint;
            }
            cfg.train.seed = common.seed;
            create_dir(&out)?;
            write_json(&out.join("config.json"), &cfg)?;
            let corpus = Corpus::load(&manifest)?;
            let mut source = CorpusSource::new(corpus, cfg.model.num_streams, 1, cfg.augment.clone())?;
            let mut prov = make_provider(&provider, &cfg)?;
            let eval = match &eval_manifest {
                Some(m) => Some(eval_set(&cfg, m, None, common.seed)?),
                None => None,
            };
            let mut eval_prov = make_provider(&provider, &cfg)?;
            let on_eval: Option<Box<dyn FnMut(u64, &Model) -> cse_core::Result<()>>> = eval.map(|set| {
                Box::new(move |step: u64, model: &Model| {
                    let records = evaluate_model(model, &set, eval_prov.as_mut(), CueMode::Both, 1)?;
                    let r = build_eval_report(&records)?;
                    println!(
                        "step {step}: acc {:.3} si-snri {:.2} dB sdri {:.2} dB",
                        r.overall.acc, r.overall.mean_si_snr_i, r.overall.mean_sdr_i
                    );
                    Ok(())
                }) as Box<dyn FnMut(u64, &Model) -> cse_core::Result<()>>
            });
            let outcome = train(
                &cfg.model,
                &cfg.train,
                &mut source,
                prov.as_mut(),
                TrainOptions {
                    out_dir: Some(out.clone()),
                    on_eval,
                    initial: None,
                },
            )?;
            if let Some(ws) = &outcome.warm_start {
                println!("warm start: {} tensors loaded, {} fresh", ws.loaded.len(), ws.fresh.len());
            }
            let last = outcome.trace.last().expect("at least one step");
            println!("final loss {:.4} after {} steps", last.loss, last.step);
        }
        Command::Eval {
            common,
            provider,
            checkpoint,
            manifest,
            out,
            max_turns,
            speakers,
            min_context_turns,
            cue_mode,
            workers,
        } => {
            let mut cfg = FileConfig::load(common.config.as_deref())?;
            let model = Model::load(&checkpoint)?;
            cfg.model = model.config.clone();
            cfg.eval.speakers = speakers.unwrap_or(model.config.num_streams);
            cfg.eval.min_context_turns = min_context_turns.unwrap_or(cfg.eval.min_context_turns);
            if !model.config.variant.is_extractor() && cfg.eval.speakers != model.config.num_streams {
                bail!(Error::Validation(format!(
                    "model separates {} streams, --speakers is {}",
                    model.config.num_streams, cfg.eval.speakers
                )));
            }
            let digest = config_digest(&cfg.canonical(), common.seed);
            let mut prov = make_provider(&provider, &cfg)?;
            create_dir(&out)?;
            let limits = parse_turns(&max_turns)?;
            let mut sweep = Vec::new();
            for k in &limits {
                let set = eval_set(&cfg, &manifest, *k, common.seed)?;
                let records = evaluate_model(&model, &set, prov.as_mut(), cue_mode, workers)?;
                let t = if limits.len() > 1 || k.is_some() { tag(*k) } else { String::new() };
                let report = write_report(&out, &t, &records, &digest, *k)?;
                let label = k.map_or("all".to_string(), |k| k.to_string());
                println!(
                    "max_turns {label}: acc {:.3} si-snri {:.2} dB sdri {:.2} dB (n={})",
                    report.overall.acc, report.overall.mean_si_snr_i, report.overall.mean_sdr_i, report.overall.n_samples
                );
                sweep.push(serde_json::json!({ "max_turns": k, "summary": report.overall }));
            }
            if limits.len() > 1 {
                write_json(&out.join("sweep.json"), &sweep)?;
            }
        }
        Command::Cascade {
            common,
            manifest,
            out,
            checkpoint,
            asr_cmd,
            asr_args,
            lm_cmd,
            lm_args,
            word_dropout,
            per_token,
            speakers,
            max_turns,
            min_context_turns,
        } => {
            let mut cfg = FileConfig::load(common.config.as_deref())?;
            let model = checkpoint.as_deref().map(Model::load).transpose()?;
            if let Some(m) = &model {
                cfg.model = m.config.clone();
                cfg.eval.speakers = m.config.num_streams;
            }
            cfg.eval.speakers = speakers.unwrap_or(cfg.eval.speakers);
            cfg.eval.min_context_turns = min_context_turns.unwrap_or(cfg.eval.min_context_turns);
            let set = eval_set(&cfg, &manifest, max_turns, common.seed)?;
            let separation = match &model {
                Some(m) => CascadeSeparation::Model(m),
                None => CascadeSeparation::Oracle,
            };
            let mut ext_asr = asr_cmd
                .as_deref()
                .map(|c| ExternalTranscriber::spawn(c, &asr_args))
                .transpose()?;
            let mut lm: Box<dyn cse_core::cascade::UtteranceScorer> = match lm_cmd.as_deref() {
                Some(c) => Box::new(ExternalScorer::spawn(c, &lm_args)?),
                None => Box::new(OverlapScorer::default()),
            };
            let records = evaluate_cascade(
                &set,
                separation,
                ext_asr.as_mut().map(|a| a as &mut dyn Transcriber),
                lm.as_mut(),
                CascadeEvalConfig {
                    word_dropout,
                    seed: common.seed,
                    options: CascadeOptions { per_token },
                },
            )?;
            create_dir(&out)?;
            let digest = config_digest(&cfg.canonical(), common.seed);
            let report = write_report(&out, "", &records, &digest, max_turns)?;
            println!(
                "cascade: acc {:.3} si-snri {:.2} dB (n={})",
                report.overall.acc, report.overall.mean_si_snr_i, report.overall.n_samples
            );
        }
        Command::EmbedCache {
            common,
            provider,
            manifest,
            out,
            max_turns,
        } => {
            let cfg = FileConfig::load(common.config.as_deref())?;
            let corpus = Corpus::load(&manifest)?;
            let mut prov = make_provider(&provider, &cfg)?;
            let mut ctx = EmbeddingCache::new(prov.context_dim());
            let mut spk = EmbeddingCache::new(prov.speaker_dim());
            for k in parse_turns(&max_turns)? {
                for i in 0..corpus.len() {
                    let text = format_history(&corpus.history(i)?, k);
                    let key = context_key(&text);
                    if !text.is_empty() && !ctx.contains(&key) {
                        ctx.insert(key, prov.context_vector(&text)?)?;
                    }
                }
            }
            for w in &corpus.audio {
                let key = speaker_key(w);
                if !spk.contains(&key) {
                    spk.insert(key, prov.speaker_vector(w)?)?;
                }
            }
            create_dir(&out)?;
            ctx.save(out.join("context.csec"))?;
            spk.save(out.join("speaker.csec"))?;
            println!("{} context and {} speaker embeddings", ctx.len(), spk.len());
        }
    }
    Ok(())
}

/// 2 for configuration or validation problems, 3 for provider failures,
/// 4 for I/O.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Provider { .. } | Error::MissingEmbedding { .. } => 3,
                Error::Io { .. } | Error::Wav { .. } => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("cse failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
