use cse_core::corpus::{build_eval_set, parse_manifest, write_toy_corpus, Corpus, ManifestEntry, ToyCorpusConfig};
use cse_core::cues::MockCueProvider;
use cse_core::eval::{evaluate_model, CueMode};
use cse_core::model::{Model, ModelConfig, Variant};
use cse_core::Error;

fn line(d: &str, t: u32) -> String {
    serde_json::to_string(&ManifestEntry {
        id: format!("{d}-{t}"),
        audio_path: format!("{d}-{t}.wav"),
        transcript: "hi there".into(),
        speaker_id: "s1".into(),
        dialogue_id: d.into(),
        turn_index: t,
    })
    .unwrap()
}

#[test]
fn manifest_cases() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    std::fs::write(&p, [line("a", 0), line("a", 1), line("b", 0)].join("\n")).unwrap();
    assert_eq!(parse_manifest(&p).unwrap().len(), 3);

    std::fs::write(&p, format!("{}\n{{not json\n", line("a", 0))).unwrap();
    match parse_manifest(&p) {
        Err(Error::Parse { location, .. }) => assert!(location.ends_with(":2"), "{location}"),
        other => panic!("{other:?}"),
    }

    std::fs::write(&p, format!("{}\n{}\n", line("a", 4), line("a", 4))).unwrap();
    match parse_manifest(&p) {
        Err(Error::Validation(m)) => assert!(m.contains("\"a\"") && m.contains("turn 4"), "{m}"),
        other => panic!("{other:?}"),
    }

    assert!(matches!(parse_manifest(dir.path().join("none.jsonl")), Err(Error::Io { .. })));
}

fn toy_corpus(dialogues: usize, turns: usize) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ToyCorpusConfig {
        dialogues,
        turns_per_dialogue: turns,
        utterance_s: 0.25,
        ..ToyCorpusConfig::default()
    };
    let m = write_toy_corpus(dir.path(), &cfg, &["train"], 2).unwrap();
    Corpus::load(&m[0]).unwrap()
}

#[test]
fn min_context_turns_filters_early_turns() {
    let c = toy_corpus(3, 14);
    let eligible = c.eligible(10);
    assert_eq!(eligible.len(), 3 * 4);
    assert!(eligible.iter().all(|&i| c.entries[i].turn_index >= 10));
}

#[test]
fn eval_set_is_deterministic_and_well_formed() {
    let c = toy_corpus(8, 6);
    let a = build_eval_set(&c, 3, 2, Some(1), 5).unwrap();
    let b = build_eval_set(&c, 3, 2, Some(1), 5).unwrap();
    assert_eq!(a, b);
    for s in &a {
        s.sample.validate().unwrap();
        assert_eq!(s.sample.n_streams(), 3);
        assert_eq!(s.n_context_turns, 1);
        assert_eq!(s.sample.context_text.lines().count(), 1);
        assert!(s.sample.enrollment.is_some());
        let target = &s.transcripts[s.sample.target_index];
        let id = &s.id;
        let i = c.entries.iter().position(|e| &e.id == id).unwrap();
        assert_eq!(target, &c.entries[i].transcript);
    }
    let zero = build_eval_set(&c, 2, 2, Some(0), 5).unwrap();
    assert!(zero.iter().all(|s| s.sample.context_text.is_empty() && s.n_context_turns == 0));
}

#[test]
fn parallel_eval_matches_serial() {
    let c = toy_corpus(3, 4);
    let set = build_eval_set(&c, 2, 1, None, 1).unwrap();
    let mut cfg = ModelConfig::tiny(Variant::Hybrid, 2);
    cfg.context_dim = 16;
    cfg.speaker_dim = 8;
    let model = Model::init(cfg, 3).unwrap();
    let mut p = MockCueProvider::new(16, 8);
    let serial = evaluate_model(&model, &set, &mut p, CueMode::SpeakerOnly, 1).unwrap();
    let parallel = evaluate_model(&model, &set, &mut p, CueMode::SpeakerOnly, 3).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.len(), set.len());

    let ctx = Model::init(ModelConfig::tiny(Variant::Context, 2), 0).unwrap();
    let mut p = MockCueProvider::new(64, 64);
    assert!(matches!(
        evaluate_model(&ctx, &set, &mut p, CueMode::SpeakerOnly, 1),
        Err(Error::Validation(_))
    ));
}
