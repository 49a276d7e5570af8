use cse_core::cues::{
    context_key, embed_context, embed_speaker, project_cue, speaker_key, CacheCueProvider, CueEmbedding, CueKind,
    CueProvider, EmbeddingCache, ExternalCueProvider, MockCueProvider,
};
use cse_core::model::{ModelConfig, Parameters, Variant};
use cse_core::signal::{synth_toy_source, Waveform};
use cse_core::tensor::Tensor;
use cse_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(id: u32, seed: u64) -> Waveform {
    synth_toy_source(id, 1.5, 8000, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn mock_context_is_deterministic_unit_norm() {
    let mut p = MockCueProvider::new(64, 32);
    let a = embed_context("Speaker 1: How is your day?", &mut p).unwrap();
    let b = embed_context("Speaker 1: How is your day?", &mut p).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.kind(), CueKind::Context);
    let n: f64 = a.vector().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);
}

#[test]
fn mock_context_separates_texts() {
    let mut p = MockCueProvider::new(64, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let t1: String = (0..12).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        let t2: String = (0..12).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        let a = embed_context(&t1, &mut p).unwrap();
        let b = embed_context(&t2, &mut p).unwrap();
        assert!(cosine(a.vector(), b.vector()) < 0.5, "{t1} {t2}");
    }
}

#[test]
fn mock_speaker_follows_identity() {
    let mut p = MockCueProvider::new(64, 32);
    let a = embed_speaker(&toy(4, 1), &mut p).unwrap();
    let b = embed_speaker(&toy(4, 2), &mut p).unwrap();
    let c = embed_speaker(&toy(5, 1), &mut p).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.dim(), 32);
}

#[test]
fn cache_provider_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut mock = MockCueProvider::new(16, 8);
    let enrollment = toy(2, 3);
    let mut ctx = EmbeddingCache::new(16);
    ctx.insert(context_key("hello there"), mock.context_vector("hello there").unwrap())
        .unwrap();
    let mut spk = EmbeddingCache::new(8);
    spk.insert(speaker_key(&enrollment), mock.speaker_vector(&enrollment).unwrap())
        .unwrap();
    ctx.save(dir.path().join("c.bin")).unwrap();
    spk.save(dir.path().join("s.bin")).unwrap();

    let mut cache = CacheCueProvider {
        context: EmbeddingCache::load(dir.path().join("c.bin")).unwrap(),
        speaker: EmbeddingCache::load(dir.path().join("s.bin")).unwrap(),
    };
    assert_eq!(
        embed_context("hello there", &mut cache).unwrap(),
        embed_context("hello there", &mut mock).unwrap()
    );
    assert_eq!(
        embed_speaker(&enrollment, &mut cache).unwrap(),
        embed_speaker(&enrollment, &mut mock).unwrap()
    );
    match embed_context("unseen", &mut cache) {
        Err(Error::MissingEmbedding { key }) => assert_eq!(key, "context:unseen"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn external_provider_protocol() {
    let script = r#"
while read -r line; do
  id=$(echo "$line" | sed 's/.*"id":\([0-9]*\).*/\1/')
  case "$line" in
    *'"kind":"context"'*) echo "{\"id\":$id,\"dim\":3,\"vector\":[1,0,0.5]}" ;;
    *) echo "{\"id\":$id,\"error\":\"unsupported\"}" ;;
  esac
done
"#;
    let mut p = ExternalCueProvider::spawn("sh", &["-c".into(), script.into()], 3, 2).unwrap();
    let e = embed_context("hi", &mut p).unwrap();
    assert_eq!(e.vector(), &[1.0, 0.0, 0.5]);
    let e2 = embed_context("again", &mut p).unwrap();
    assert_eq!(e2.vector(), e.vector());
    let err = embed_speaker(&toy(0, 0), &mut p).unwrap_err();
    assert!(matches!(err, Error::Provider { .. }), "{err}");
}

#[test]
fn external_provider_crash_carries_stderr() {
    let mut p = ExternalCueProvider::spawn(
        "sh",
        &["-c".into(), "read l; echo 'model not found' >&2; exit 3".into()],
        3,
        2,
    )
    .unwrap();
    let err = embed_context("hi", &mut p).unwrap_err().to_string();
    assert!(err.contains("model not found") && err.contains("exit status: 3"), "{err}");
}

fn projection_params(variant: Variant, e: usize, d: usize) -> (ModelConfig, Parameters) {
    let mut cfg = ModelConfig::tiny(variant, 2);
    cfg.embed_dim = d;
    cfg.context_dim = e;
    cfg.speaker_dim = e;
    let p = Parameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    (cfg, p)
}

#[test]
fn projection_cases() {
    let (cfg, mut p) = projection_params(Variant::Hybrid, 4, 8);
    let e = CueEmbedding::new(CueKind::Context, vec![0.5, -1.0, 2.0, 0.25]).unwrap();

    let absent = project_cue(&e.masked(), &p, &cfg).unwrap();
    assert_eq!(absent, vec![0.0; 8]);

    let mut w = vec![0.0f32; 32];
    for i in 0..4 {
        w[i * 8 + i] = 1.0;
    }
    p.insert("cue.context.weight", Tensor::from_vec(&[4, 8], w));
    let out = project_cue(&e, &p, &cfg).unwrap();
    assert_eq!(out, vec![0.5, -1.0, 2.0, 0.25, 0.0, 0.0, 0.0, 0.0]);

    p.insert("cue.speaker.weight", Tensor::zeros(&[4, 8]));
    let s = CueEmbedding::new(CueKind::Speaker, vec![1.0; 4]).unwrap();
    assert_eq!(project_cue(&s, &p, &cfg).unwrap(), vec![0.0; 8]);

    let wrong = CueEmbedding::new(CueKind::Context, vec![1.0; 5]).unwrap();
    assert!(matches!(project_cue(&wrong, &p, &cfg), Err(Error::InvalidArgument(_))));

    let (cfg, p) = projection_params(Variant::Context, 4, 8);
    assert!(matches!(project_cue(&s, &p, &cfg), Err(Error::InvalidArgument(_))));
}
