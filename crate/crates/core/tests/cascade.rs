use cse_core::cascade::{
    run_cascade, CascadeOptions, ExternalScorer, ExternalTranscriber, ModelSeparator, OracleSeparator,
    OracleTranscriber, OverlapScorer, Separator, Transcriber, UtteranceScorer,
};
use cse_core::corpus::{build_eval_set, write_toy_corpus, Corpus, CorpusSample, ToyCorpusConfig};
use cse_core::eval::{build_eval_report, evaluate_cascade, CascadeEvalConfig, CascadeSeparation};
use cse_core::model::{Model, ModelConfig, Variant};
use cse_core::signal::Waveform;
use cse_core::Error;

fn toy_set(n: usize) -> Vec<CorpusSample> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ToyCorpusConfig {
        dialogues: 6,
        turns_per_dialogue: 6,
        utterance_s: 0.25,
        ..ToyCorpusConfig::default()
    };
    let m = write_toy_corpus(dir.path(), &cfg, &["eval"], 4).unwrap();
    build_eval_set(&Corpus::load(&m[0]).unwrap(), n, 1, None, 0).unwrap()
}

fn acc(set: &[CorpusSample], word_dropout: f64) -> f64 {
    let records = evaluate_cascade(
        set,
        CascadeSeparation::Oracle,
        None,
        &mut OverlapScorer::default(),
        CascadeEvalConfig {
            word_dropout,
            seed: 9,
            options: CascadeOptions::default(),
        },
    )
    .unwrap();
    build_eval_report(&records).unwrap().overall.acc
}

#[test]
fn oracle_pipeline_selects_every_target() {
    for n in [2, 3] {
        let set = toy_set(n);
        assert_eq!(set.len(), 30);
        assert_eq!(acc(&set, 0.0), 1.0, "n = {n}");
    }
}

#[test]
fn word_dropout_hurts_selection() {
    let set = toy_set(2);
    assert!(acc(&set, 0.5) < 1.0);
}

#[test]
fn selected_index_is_argmax_and_rescoring_matches() {
    let set = toy_set(3);
    let s = &set[0];
    let mut sep = OracleSeparator {
        sources: s.sample.sources.clone(),
    };
    let mut asr = OracleTranscriber::new(s.sample.sources.clone(), s.transcripts.clone()).unwrap();
    let mut lm = OverlapScorer::default();
    let res = run_cascade(
        &s.sample.mixture,
        &s.sample.context_text,
        &mut sep,
        &mut asr,
        &mut lm,
        3,
        CascadeOptions::default(),
    )
    .unwrap();
    assert_eq!(res.selected_index, s.sample.target_index);
    assert_eq!(res.transcripts, s.transcripts);
    for (t, &score) in res.transcripts.iter().zip(&res.scores) {
        assert_eq!(lm.score(&s.sample.context_text, t).unwrap(), score);
    }
    let best = res.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(res.scores[res.selected_index], best);
}

#[test]
fn per_token_normalization_divides_by_word_count() {
    let set = toy_set(2);
    let s = &set[0];
    let run = |per_token| {
        let mut sep = OracleSeparator {
            sources: s.sample.sources.clone(),
        };
        let mut asr = OracleTranscriber::new(s.sample.sources.clone(), s.transcripts.clone()).unwrap();
        run_cascade(
            &s.sample.mixture,
            &s.sample.context_text,
            &mut sep,
            &mut asr,
            &mut OverlapScorer::default(),
            2,
            CascadeOptions { per_token },
        )
        .unwrap()
    };
    let (raw, norm) = (run(false), run(true));
    for (k, t) in raw.transcripts.iter().enumerate() {
        let words = t.split_whitespace().count() as f64;
        assert!((norm.scores[k] - raw.scores[k] / words).abs() < 1e-12);
    }
}

#[test]
fn model_separator_checks_variant_and_streams() {
    let ext = Model::init(ModelConfig::tiny(Variant::Context, 2), 0).unwrap();
    assert!(ModelSeparator::new(&ext).is_err());
    let sep = Model::init(ModelConfig::tiny(Variant::Separator, 2), 0).unwrap();
    let mut s = ModelSeparator::new(&sep).unwrap();
    let mix = Waveform::new(vec![0.1; 400], 8000).unwrap();
    assert_eq!(s.separate(&mix, 2).unwrap().len(), 2);
    assert!(matches!(s.separate(&mix, 3), Err(Error::InvalidArgument(_))));
}

const FAKE_ASR_LM: &str = r#"
while read -r line; do
  id=$(echo "$line" | sed 's/.*"id":\([0-9]*\).*/\1/')
  case "$line" in
    *'"kind":"asr"'*) echo "{\"id\":$id,\"text\":\"hello world\"}" ;;
    *'"kind":"lm"'*) echo "{\"id\":$id,\"logprob\":-2.5}" ;;
  esac
done
"#;

#[test]
fn external_asr_and_lm_protocol() {
    let args = ["-c".to_string(), FAKE_ASR_LM.to_string()];
    let mut asr = ExternalTranscriber::spawn("sh", &args).unwrap();
    let mut lm = ExternalScorer::spawn("sh", &args).unwrap();
    let w = Waveform::new(vec![0.1, -0.2, 0.3], 8000).unwrap();
    assert_eq!(asr.transcribe(&w).unwrap(), "hello world");
    assert_eq!(lm.score("context", "hello world").unwrap(), -2.5);
}

#[test]
fn external_asr_crash_reports_status() {
    let args = ["-c".to_string(), "read l; echo 'cuda missing' >&2; exit 9".to_string()];
    let mut asr = ExternalTranscriber::spawn("sh", &args).unwrap();
    let w = Waveform::new(vec![0.1, -0.2, 0.3], 8000).unwrap();
    let err = asr.transcribe(&w).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Provider { .. }));
    assert!(msg.contains("exit status: 9") && msg.contains("cuda missing"), "{msg}");
}
