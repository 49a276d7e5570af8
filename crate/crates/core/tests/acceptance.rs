//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails. The two long training runs (AC-5, AC-6) only run when
//! `CSE_SLOW=1`.

mod common;

use std::time::{Duration, Instant};

use common::{toy_mixtures, GradCase};
use cse_core::corpus::{build_eval_set, write_toy_corpus, Corpus, CorpusSample, CorpusSource, ToyCorpusConfig};
use cse_core::cues::{embed_context, MockCueProvider};
use cse_core::eval::{
    build_eval_report, evaluate_cascade, evaluate_model, CascadeEvalConfig, CascadeSeparation, CueMode,
};
use cse_core::losses::{pit_loss, si_snr_loss, si_snr_loss_raw};
use cse_core::metrics::{selection_accuracy, si_snr_improvement};
use cse_core::model::{overlap_add, segment, Cues, Model, ModelConfig, Parameters, Variant};
use cse_core::signal::{read_wav, write_wav, AugmentConfig, MixtureSample, WavEncoding, Waveform};
use cse_core::tensor::Tensor;
use cse_core::trainer::{train, FixedSamples, TrainConfig, TrainOptions, TrainOutcome};
use cse_core::cascade::OverlapScorer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn wave(v: Vec<f32>) -> Waveform {
    Waveform::new(v, 8000).unwrap()
}

fn random_wave(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
    wave((0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
}

/// Independent SI-SNR in dB: project, then energy ratio, no stabilizer.
fn si_snr_db(reference: &[f32], estimate: &[f32]) -> f64 {
    let r: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    let e: Vec<f64> = estimate.iter().map(|&v| v as f64).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let a = r.iter().zip(&e).map(|(x, y)| x * y).sum::<f64>() / rr;
    let s: f64 = r.iter().map(|x| (a * x).powi(2)).sum();
    let n: f64 = r.iter().zip(&e).map(|(x, y)| (y - a * x).powi(2)).sum();
    10.0 * (s / n).log10()
}

fn loss_correctness() -> Outcome {
    let hand = [
        (vec![1.0, 0.0], vec![1.0, 1.0], 0.0),
        // Projection 0.9·y leaves 0.1 on the other axis: ratio 0.81 / 0.01.
        (vec![1.0, 0.0], vec![0.9, 0.1], -10.0 * (0.81f64 / 0.01).log10()),
    ];
    // The published figure is the same value rounded to three decimals.
    let rounding_ok = (hand[1].2 + 19.085).abs() < 5e-4;
    let mut hand_err: f64 = 0.0;
    for (r, e, want) in &hand {
        hand_err = hand_err.max((si_snr_loss_raw(r, e).unwrap() - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut scale_err: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    for _ in 0..100 {
        let r = random_wave(&mut rng, 256);
        let noise = random_wave(&mut rng, 256);
        let e = wave(r.samples().iter().zip(noise.samples()).map(|(a, b)| a + 0.5 * b).collect());
        let base = si_snr_loss(&r, &e).unwrap();
        oracle_err = oracle_err.max((base + si_snr_db(r.samples(), e.samples())).abs());
        for k in [0.5f32, 2.0, 10.0] {
            scale_err = scale_err.max((si_snr_loss(&r, &e.scaled(k)).unwrap() - base).abs());
        }
    }
    outcome(
        rounding_ok && hand_err < 1e-4 && scale_err < 1e-6 && oracle_err < 1e-6,
        format!("hand cases max err {hand_err:.1e} dB, scale invariance max err {scale_err:.1e} dB, formula oracle max err {oracle_err:.1e} dB"),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn pit_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut recovered = 0;
    let mut trials = 0;
    for n in [2usize, 3] {
        for _ in 0..100 {
            trials += 1;
            let refs: Vec<Waveform> = (0..n).map(|_| random_wave(&mut rng, 128)).collect();
            let ests: Vec<Waveform> = (0..n).map(|_| random_wave(&mut rng, 128)).collect();
            let brute = permutations(n)
                .iter()
                .map(|p| (0..n).map(|i| si_snr_loss(&refs[i], &ests[p[i]]).unwrap()).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if pit_loss(&refs, &ests).unwrap().loss != brute {
                mismatches += 1;
            }
            // Estimates are a noisy shuffle of the references: est[j] ~ ref[sigma[j]].
            let all = permutations(n);
            let sigma = &all[rng.gen_range(0..all.len())];
            let shuffled: Vec<Waveform> = sigma
                .iter()
                .map(|&s| {
                    let noise = random_wave(&mut rng, 128);
                    wave(refs[s].samples().iter().zip(noise.samples()).map(|(a, b)| a + 0.1 * b).collect())
                })
                .collect();
            let res = pit_loss(&refs, &shuffled).unwrap();
            if (0..n).all(|i| sigma[res.permutation[i]] == i) {
                recovered += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && recovered == trials,
        format!("{trials} instances: {mismatches} mismatches vs exhaustive search, {recovered} permutations recovered"),
    )
}

fn gradient_check() -> Outcome {
    let mut worst = (0.0, String::new());
    for variant in [Variant::Separator, Variant::ContSep, Variant::Context, Variant::Hybrid] {
        let case = GradCase::new(variant, 17);
        let params: Parameters<f64> = Parameters::<f32>::init(&case.cfg, &mut ChaCha8Rng::seed_from_u64(2)).cast();
        let (err, at) = common::max_grad_error(&case, &params, 1e-4);
        if err > worst.0 {
            worst = (err, format!("{variant}: {at}"));
        }
    }
    outcome(
        worst.0 < 1e-5,
        format!("4 variants, max relative error {:.2e} ({})", worst.0, worst.1),
    )
}

fn overfit_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        warmup_steps: 50,
        peak_lr: 3e-3,
        batch_size: 2,
        segment_s: 1.0,
        ..TrainConfig::default()
    }
}

fn train_fixed(cfg: &ModelConfig, samples: &[MixtureSample], steps: u64) -> TrainOutcome {
    let mut src = FixedSamples::new(samples.to_vec()).unwrap();
    let mut prov = MockCueProvider::new(cfg.context_dim, cfg.speaker_dim);
    train(cfg, &overfit_cfg(steps), &mut src, &mut prov, TrainOptions::default()).unwrap()
}

/// Per sample: (SI-SNRi of the selected stream, whether it is the target).
fn score_fixed(model: &Model, samples: &[MixtureSample]) -> Vec<(f64, bool)> {
    let mut prov = MockCueProvider::new(model.config.context_dim, model.config.speaker_dim);
    samples
        .iter()
        .map(|s| {
            let c = embed_context(&s.context_text, &mut prov).unwrap();
            let out = model.forward(&s.mixture, Cues::context(&c)).unwrap();
            let k = out.predicted_target().unwrap_or(0);
            (
                si_snr_improvement(&s.mixture, &out.streams[k], s.target()).unwrap(),
                selection_accuracy(&out.streams[k], &s.sources, s.target_index).unwrap(),
            )
        })
        .collect()
}

fn overfit_sanity() -> Outcome {
    let samples = toy_mixtures(2, 4, 1.0, 11);
    let out = train_fixed(&ModelConfig::tiny(Variant::Context, 2), &samples, 2000);
    let scores = score_fixed(&out.model, &samples);
    let min_imp = scores.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let correct = scores.iter().filter(|s| s.1).count();
    let (l100, l2000) = (out.trace[99].loss, out.trace[1999].loss);
    outcome(
        min_imp > 10.0 && correct == 4 && l2000 < l100,
        format!(
            "SI-SNRi per sample {:?} dB (min {min_imp:.2}), ACC {correct}/4, loss step 100 {l100:.2} -> step 2000 {l2000:.2}",
            scores.iter().map(|s| (s.0 * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

struct ToyData {
    _dir: tempfile::TempDir,
    train: Corpus,
    eval: Corpus,
}

fn toy_data() -> ToyData {
    let dir = tempfile::tempdir().unwrap();
    let m = write_toy_corpus(dir.path(), &ToyCorpusConfig::default(), &["train", "eval"], 7).unwrap();
    ToyData {
        train: Corpus::load(&m[0]).unwrap(),
        eval: Corpus::load(&m[1]).unwrap(),
        _dir: dir,
    }
}

/// Held-out samples need two turns of history.
const EVAL_MIN_TURNS: usize = 2;

fn train_on_corpus(variant: Variant, data: &ToyData) -> Model {
    let mut cfg = ModelConfig::tiny(variant, 2);
    cfg.context_dim = 256;
    let tcfg = TrainConfig {
        total_steps: 20_000,
        warmup_steps: 200,
        peak_lr: 2e-3,
        batch_size: 2,
        segment_s: 1.0,
        ..TrainConfig::default()
    };
    let mut src = CorpusSource::new(data.train.clone(), 2, 1, AugmentConfig::mixing_only()).unwrap();
    let mut prov = MockCueProvider::new(cfg.context_dim, cfg.speaker_dim);
    train(&cfg, &tcfg, &mut src, &mut prov, TrainOptions::default()).unwrap().model
}

fn model_acc(model: &Model, set: &[CorpusSample], mode: CueMode) -> f64 {
    let mut prov = MockCueProvider::new(model.config.context_dim, model.config.speaker_dim);
    build_eval_report(&evaluate_model(model, set, &mut prov, mode, 1).unwrap())
        .unwrap()
        .overall
        .acc
}

fn contextual_generalization() -> Outcome {
    let data = toy_data();
    let model = train_on_corpus(Variant::Context, &data);
    let held_out = build_eval_set(&data.eval, 2, EVAL_MIN_TURNS, None, 99).unwrap();
    let no_context = build_eval_set(&data.eval, 2, EVAL_MIN_TURNS, Some(0), 99).unwrap();
    let acc = model_acc(&model, &held_out, CueMode::Both);
    let acc0 = model_acc(&model, &no_context, CueMode::Both);
    outcome(
        held_out.len() == 200 && acc >= 0.9 && acc0 <= 0.6,
        format!("{} held-out mixtures: ACC {acc:.3} with full history, {acc0:.3} with no history", held_out.len()),
    )
}

fn hybrid_flexibility() -> Outcome {
    let data = toy_data();
    let model = train_on_corpus(Variant::Hybrid, &data);
    let held_out = build_eval_set(&data.eval, 2, EVAL_MIN_TURNS, None, 99).unwrap();
    let both = model_acc(&model, &held_out, CueMode::Both);
    let ctx = model_acc(&model, &held_out, CueMode::ContextOnly);
    let spk = model_acc(&model, &held_out, CueMode::SpeakerOnly);
    outcome(
        both >= ctx && both >= spk,
        format!("ACC both {both:.3}, context only {ctx:.3}, speaker only {spk:.3}"),
    )
}

fn cascade_oracle() -> Outcome {
    let data = toy_data();
    let set = build_eval_set(&data.eval, 2, EVAL_MIN_TURNS, None, 99).unwrap();
    let acc = |word_dropout| {
        let records = evaluate_cascade(
            &set,
            CascadeSeparation::Oracle,
            None,
            &mut OverlapScorer::default(),
            CascadeEvalConfig {
                word_dropout,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        build_eval_report(&records).unwrap().overall.acc
    };
    let (clean, degraded) = (acc(0.0), acc(0.5));
    outcome(
        clean == 1.0 && degraded < clean,
        format!("{} samples: ACC {clean:.3} with oracle ASR, {degraded:.3} with 50% word dropout", set.len()),
    )
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut seg_err: f32 = 0.0;
    for &(f, c) in &[(37usize, 8usize), (8, 8), (3, 8), (250, 16)] {
        let x = Tensor::from_vec(&[f, 5], (0..f * 5).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let y = overlap_add(&segment(&x, c, 0.5).unwrap(), f).unwrap();
        seg_err = x.data().iter().zip(y.data()).fold(seg_err, |m, (a, b)| m.max((a - b).abs()));
    }

    let dir = tempfile::tempdir().unwrap();
    let mut ckpt_exact = true;
    for variant in [Variant::Separator, Variant::ContSep, Variant::Context, Variant::Hybrid] {
        let model = Model::init(ModelConfig::tiny(variant, 2), 4).unwrap();
        let path = dir.path().join(format!("{variant}.csem"));
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        let mix = random_wave(&mut rng, 900);
        let mut prov = MockCueProvider::new(64, 64);
        let c = embed_context("Speaker 1: hello", &mut prov).unwrap();
        let s = cse_core::cues::embed_speaker(&mix, &mut prov).ok();
        let cues = Cues::both(variant.uses_context().then_some(&c), variant.uses_speaker().then_some(s.as_ref()).flatten());
        let cues = if variant == Variant::Hybrid && cues.speaker.is_none() { Cues::both(Some(&c), None) } else { cues };
        ckpt_exact &= model.forward(&mix, cues).unwrap() == loaded.forward(&mix, cues).unwrap();
    }

    let pcm: Vec<f32> = (0..4000).map(|_| rng.gen_range(-32768i32..32768) as f32 / 32768.0).collect();
    let w = Waveform::new(pcm, 16000).unwrap();
    let path = dir.path().join("x.wav");
    write_wav(&path, &w, WavEncoding::Pcm16).unwrap();
    let wav_exact = read_wav(&path).unwrap() == w;
    outcome(
        seg_err < 1e-6 && ckpt_exact && wav_exact,
        format!("segment/overlap-add max err {seg_err:.1e}, checkpoint forward bit-exact {ckpt_exact}, PCM16 WAV bit-exact {wav_exact}"),
    )
}

fn three_speakers() -> Outcome {
    let samples = toy_mixtures(3, 4, 1.0, 12);
    let mut details = Vec::new();
    let mut pass = true;
    for variant in [Variant::ContSep, Variant::Context] {
        let cfg = ModelConfig::tiny(variant, 3);
        let out = train_fixed(&cfg, &samples, 2000);
        let mut prov = MockCueProvider::new(cfg.context_dim, cfg.speaker_dim);
        let c = embed_context(&samples[0].context_text, &mut prov).unwrap();
        let o = out.model.forward(&samples[0].mixture, Cues::context(&c)).unwrap();
        let (streams, logits) = (o.streams.len(), o.target_logits.as_ref().map_or(0, Vec::len));
        let shape_ok = match variant {
            Variant::ContSep => streams == 3 && logits == 3,
            _ => streams == 1 && logits == 0,
        } && o.streams.iter().all(|s| s.len() == samples[0].mixture.len());
        let correct = score_fixed(&out.model, &samples).iter().filter(|s| s.1).count();
        let acc = correct as f64 / samples.len() as f64;
        pass &= shape_ok && acc > 1.0 / 3.0;
        details.push(format!("{variant}: {streams} streams, {logits} logits, ACC {correct}/4"));
    }
    outcome(pass, details.join("; "))
}

type Criterion = (&'static str, &'static str, fn() -> Outcome, Duration, bool);

fn main() {
    let slow = std::env::var("CSE_SLOW").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 9] = [
        ("AC-1", "loss correctness", loss_correctness, Duration::from_secs(1), false),
        ("AC-2", "PIT oracle equivalence", pit_equivalence, Duration::from_secs(5), false),
        ("AC-3", "gradient check", gradient_check, Duration::from_secs(120), false),
        ("AC-4", "overfit sanity", overfit_sanity, Duration::from_secs(600), false),
        ("AC-5", "contextual generalization", contextual_generalization, Duration::from_secs(4 * 3600), true),
        ("AC-6", "hybrid flexibility", hybrid_flexibility, Duration::from_secs(4 * 3600), true),
        ("AC-7", "cascade oracle", cascade_oracle, Duration::from_secs(60), false),
        ("AC-8", "round trips", round_trips, Duration::from_secs(10), false),
        ("AC-9", "3-speaker regime", three_speakers, Duration::from_secs(900), false),
    ];
    let mut failed = 0;
    for (id, name, run, budget, is_slow) in criteria {
        if is_slow && !slow {
            println!("{id} SKIP {name}: slow suite, set CSE_SLOW=1 to run");
            continue;
        }
        let t0 = Instant::now();
        let o = run();
        let took = t0.elapsed();
        let pass = o.pass && took <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{id} {} {name}: {} [{:.1} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
