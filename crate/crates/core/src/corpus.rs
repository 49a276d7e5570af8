//! JSONL dataset manifests, dialogue histories and mixture construction,
//! plus a synthetic dialogue corpus built from toy speakers.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cues::{format_history, DialogueHistory, Turn};
use crate::error::{Error, Result};
use crate::signal::{
    make_mixture_sample, read_wav, synth_toy_source, write_wav, AugmentConfig, MixtureSample, WavEncoding, Waveform,
};
use crate::trainer::SampleSource;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: String,
    pub transcript: String,
    pub speaker_id: String,
    pub dialogue_id: String,
    pub turn_index: u32,
}

/// Reads a JSONL manifest. Blank lines are skipped.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut keys = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        if !keys.insert((entry.dialogue_id.clone(), entry.turn_index)) {
            return Err(Error::Validation(format!(
                "duplicate turn (dialogue {:?}, turn {}) at {}:{}",
                entry.dialogue_id,
                entry.turn_index,
                path.display(),
                i + 1
            )));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("manifest entries serialize");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Manifest entries with their audio loaded and dialogue structure indexed.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub entries: Vec<ManifestEntry>,
    pub audio: Vec<Waveform>,
    /// Indices of the earlier turns of each entry's dialogue, oldest first.
    history: Vec<Vec<usize>>,
    /// Speaker labels ("1", "2", ...) in order of first appearance per dialogue.
    labels: Vec<String>,
}

impl Corpus {
    pub fn new(entries: Vec<ManifestEntry>, audio: Vec<Waveform>) -> Result<Self> {
        if entries.len() != audio.len() {
            return Err(Error::invalid(format!(
                "{} entries with {} audio clips",
                entries.len(),
                audio.len()
            )));
        }
        let mut by_dialogue: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_dialogue.entry(&e.dialogue_id).or_default().push(i);
        }
        let mut history = vec![Vec::new(); entries.len()];
        let mut labels = vec![String::new(); entries.len()];
        for idx in by_dialogue.values_mut() {
            idx.sort_by_key(|&i| entries[i].turn_index);
            let mut seen: Vec<&str> = Vec::new();
            for (pos, &i) in idx.iter().enumerate() {
                if pos > 0 && entries[idx[pos - 1]].turn_index == entries[i].turn_index {
                    return Err(Error::Validation(format!(
                        "duplicate turn (dialogue {:?}, turn {})",
                        entries[i].dialogue_id, entries[i].turn_index
                    )));
                }
                let spk = entries[i].speaker_id.as_str();
                let n = match seen.iter().position(|s| *s == spk) {
                    Some(p) => p + 1,
                    None => {
                        seen.push(spk);
                        seen.len()
                    }
                };
                labels[i] = n.to_string();
                history[i] = idx[..pos].to_vec();
            }
        }
        Ok(Corpus {
            entries,
            audio,
            history,
            labels,
        })
    }

    /// Parses a manifest and reads every referenced clip.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let entries = parse_manifest(manifest)?;
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let audio = entries
            .iter()
            .map(|e| read_wav(resolve(&base, &e.audio_path)))
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(entries, audio)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Earlier turns of entry `i`'s dialogue.
    pub fn history(&self, i: usize) -> Result<DialogueHistory> {
        DialogueHistory::new(
            self.history[i]
                .iter()
                .map(|&j| Turn::new(self.labels[j].clone(), self.entries[j].transcript.clone(), self.entries[j].turn_index))
                .collect(),
        )
    }

    /// Entries with at least `min_context_turns` turns of history.
    pub fn eligible(&self, min_context_turns: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.history[i].len() >= min_context_turns)
            .collect()
    }

    /// Candidates to overlap with entry `i`: other speakers' turns that are
    /// not part of `i`'s history.
    fn interferer_pool(&self, i: usize) -> Vec<usize> {
        let hist: HashSet<usize> = self.history[i].iter().copied().collect();
        let spk = &self.entries[i].speaker_id;
        (0..self.len())
            .filter(|&j| j != i && !hist.contains(&j) && &self.entries[j].speaker_id != spk)
            .collect()
    }

    /// Another clip of the same speaker, or `None` if there is none.
    pub fn enrollment_for(&self, i: usize) -> Option<usize> {
        let spk = &self.entries[i].speaker_id;
        (0..self.len()).find(|&j| j != i && &self.entries[j].speaker_id == spk)
    }

    /// Builds an `n`-speaker mixture around entry `i`: interferers come from
    /// distinct other speakers, the target lands at a random stream index,
    /// and the context is the entry's history cut to `max_turns`.
    pub fn build_sample<R: Rng + ?Sized>(
        &self,
        i: usize,
        n: usize,
        max_turns: Option<usize>,
        augment: &AugmentConfig,
        rng: &mut R,
    ) -> Result<CorpusSample> {
        let mut pool = self.interferer_pool(i);
        pool.shuffle(rng);
        let mut picked: Vec<usize> = Vec::with_capacity(n - 1);
        let mut speakers: HashSet<&str> = HashSet::new();
        for j in pool {
            if picked.len() + 1 == n {
                break;
            }
            if speakers.insert(self.entries[j].speaker_id.as_str()) {
                picked.push(j);
            }
        }
        if picked.len() + 1 != n {
            return Err(Error::Validation(format!(
                "entry {} has only {} distinct interfering speakers, need {}",
                self.entries[i].id,
                picked.len(),
                n - 1
            )));
        }
        let target_index = rng.gen_range(0..n);
        picked.insert(target_index, i);
        let history = self.history(i)?;
        let context = format_history(&history, max_turns);
        let sources: Vec<Waveform> = picked.iter().map(|&j| self.audio[j].clone()).collect();
        let mut sample = make_mixture_sample(&sources, target_index, &context, augment, rng)?;
        sample.enrollment = self.enrollment_for(i).map(|j| self.audio[j].clone());
        Ok(CorpusSample {
            id: self.entries[i].id.clone(),
            sample,
            transcripts: picked.iter().map(|&j| self.entries[j].transcript.clone()).collect(),
            n_context_turns: max_turns.map_or(history.len(), |k| k.min(history.len())),
        })
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub id: String,
    pub sample: MixtureSample,
    /// Transcript of each source, aligned with `sample.sources`.
    pub transcripts: Vec<String>,
    pub n_context_turns: usize,
}

/// Fixed evaluation set: one mixture per eligible entry, each drawn from its
/// own seed so the set does not depend on iteration order.
pub fn build_eval_set(
    corpus: &Corpus,
    n: usize,
    min_context_turns: usize,
    max_turns: Option<usize>,
    seed: u64,
) -> Result<Vec<CorpusSample>> {
    let aug = AugmentConfig::mixing_only();
    corpus
        .eligible(min_context_turns)
        .into_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i as u64);
            corpus.build_sample(i, n, max_turns, &aug, &mut rng)
        })
        .collect()
}

/// Draws fresh training mixtures from a corpus: a random eligible entry, new
/// interferers, new gains and augmentation on every call.
pub struct CorpusSource {
    corpus: Corpus,
    eligible: Vec<usize>,
    pub n_streams: usize,
    pub max_turns: Option<usize>,
    pub augment: AugmentConfig,
}

impl CorpusSource {
    pub fn new(corpus: Corpus, n_streams: usize, min_context_turns: usize, augment: AugmentConfig) -> Result<Self> {
        augment.validate()?;
        let eligible = corpus.eligible(min_context_turns);
        if eligible.is_empty() {
            return Err(Error::Validation(format!(
                "no entries with at least {min_context_turns} turns of history"
            )));
        }
        Ok(CorpusSource {
            corpus,
            eligible,
            n_streams,
            max_turns: None,
            augment,
        })
    }
}

impl SampleSource for CorpusSource {
    fn next_sample(&mut self, rng: &mut ChaCha8Rng) -> Result<MixtureSample> {
        let i = *self.eligible.choose(rng).expect("non-empty");
        Ok(self
            .corpus
            .build_sample(i, self.n_streams, self.max_turns, &self.augment, rng)?
            .sample)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub dialogues: usize,
    pub turns_per_dialogue: usize,
    /// Size of the toy speaker pool.
    pub speakers: usize,
    /// Spacing of toy speaker ids; wider spacing separates pitches more.
    pub speaker_stride: u32,
    pub utterance_s: f64,
    pub sample_rate: u32,
    /// Words each turn repeats from the previous turn.
    pub echo_words: usize,
    /// Words each turn introduces.
    pub fresh_words: usize,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            dialogues: 20,
            turns_per_dialogue: 12,
            speakers: 4,
            speaker_stride: 3,
            utterance_s: 1.0,
            sample_rate: 8000,
            echo_words: 2,
            fresh_words: 3,
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.dialogues == 0 || self.turns_per_dialogue < 2 {
            return bad("need at least one dialogue of two turns");
        }
        if self.speakers < 2 || self.speaker_stride == 0 {
            return bad("need at least two speakers with a positive stride");
        }
        if !(self.utterance_s > 0.0) || self.sample_rate == 0 {
            return bad("utterance length and sample rate must be positive");
        }
        if self.fresh_words == 0 || self.echo_words > self.fresh_words {
            return bad("need fresh words, and no more echo words than fresh words");
        }
        Ok(())
    }
}

const SYLLABLES: [&str; 16] = [
    "ba", "ko", "mi", "tu", "re", "sa", "no", "li", "vu", "de", "ga", "pe", "zo", "hi", "fa", "ju",
];

/// Distinct three-syllable pseudo-word for every `i < 4096`.
fn pseudo_word(i: usize) -> String {
    (0..3).map(|k| SYLLABLES[(i >> (4 * k)) & 15]).collect()
}

/// Script of one dialogue: speaker pool indices alternating A/B and the
/// transcript of every turn.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueScript {
    pub speakers: [usize; 2],
    pub turns: Vec<String>,
}

/// Dialogue scripts in which every turn repeats `echo_words` of the previous
/// turn's new words and adds `fresh_words` words used nowhere else. A turn's
/// words therefore overlap its history while any turn outside that history
/// shares nothing with it.
pub fn toy_scripts(cfg: &ToyCorpusConfig, seed: u64) -> Result<Vec<DialogueScript>> {
    cfg.validate()?;
    let needed = cfg.dialogues * cfg.turns_per_dialogue * cfg.fresh_words;
    if needed > 4096 {
        return Err(Error::Validation(format!("toy vocabulary holds 4096 words, script needs {needed}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_word = 0usize;
    let mut scripts = Vec::with_capacity(cfg.dialogues);
    for _ in 0..cfg.dialogues {
        let pair: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.speakers, 2).into_vec();
        let mut turns = Vec::with_capacity(cfg.turns_per_dialogue);
        let mut prev_fresh: Vec<String> = Vec::new();
        for _ in 0..cfg.turns_per_dialogue {
            let fresh: Vec<String> = (0..cfg.fresh_words)
                .map(|_| {
                    next_word += 1;
                    pseudo_word(next_word - 1)
                })
                .collect();
            let mut words: Vec<String> = prev_fresh.choose_multiple(&mut rng, cfg.echo_words).cloned().collect();
            words.extend(fresh.iter().cloned());
            words.shuffle(&mut rng);
            turns.push(words.join(" "));
            prev_fresh = fresh;
        }
        scripts.push(DialogueScript {
            speakers: [pair[0], pair[1]],
            turns,
        });
    }
    Ok(scripts)
}

pub fn toy_speaker_id(cfg: &ToyCorpusConfig, pool_index: usize) -> u32 {
    pool_index as u32 * cfg.speaker_stride
}

/// Renders the scripts with toy speakers into `dir/<split>/` and writes
/// `dir/<split>.jsonl` for each split. Splits share the scripts; each split
/// draws its own audio.
pub fn write_toy_corpus(
    dir: impl AsRef<Path>,
    cfg: &ToyCorpusConfig,
    splits: &[&str],
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let scripts = toy_scripts(cfg, seed)?;
    let mut manifests = Vec::new();
    for (s, split) in splits.iter().enumerate() {
        let audio_dir = dir.join(split);
        std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((s as u64 + 1) << 32));
        let mut entries = Vec::new();
        for (d, script) in scripts.iter().enumerate() {
            for (t, text) in script.turns.iter().enumerate() {
                let toy = toy_speaker_id(cfg, script.speakers[t % 2]);
                let w = synth_toy_source(toy, cfg.utterance_s, cfg.sample_rate, &mut rng)?;
                let id = format!("{split}-d{d:03}-t{t:02}");
                let rel = format!("{split}/{id}.wav");
                write_wav(dir.join(&rel), &w, WavEncoding::Pcm16)?;
                entries.push(ManifestEntry {
                    id,
                    audio_path: rel,
                    transcript: text.clone(),
                    speaker_id: format!("spk{toy:02}"),
                    dialogue_id: format!("d{d:03}"),
                    turn_index: t as u32,
                });
            }
        }
        let path = dir.join(format!("{split}.jsonl"));
        write_manifest(&path, &entries)?;
        manifests.push(path);
    }
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_words_are_distinct() {
        let words: HashSet<String> = (0..4096).map(pseudo_word).collect();
        assert_eq!(words.len(), 4096);
    }

    #[test]
    fn scripts_echo_previous_turn_only() {
        let cfg = ToyCorpusConfig::default();
        let scripts = toy_scripts(&cfg, 1).unwrap();
        assert_eq!(scripts.len(), cfg.dialogues);
        for s in &scripts {
            assert_ne!(s.speakers[0], s.speakers[1]);
            for k in 1..s.turns.len() {
                let cur: HashSet<&str> = s.turns[k].split(' ').collect();
                let prev: HashSet<&str> = s.turns[k - 1].split(' ').collect();
                assert_eq!(cur.intersection(&prev).count(), cfg.echo_words);
                for j in 0..k - 1 {
                    let older: HashSet<&str> = s.turns[j].split(' ').collect();
                    assert_eq!(cur.intersection(&older).count(), 0);
                }
            }
        }
    }

    #[test]
    fn history_labels_follow_first_appearance() {
        let e = |d: &str, t: u32, spk: &str| ManifestEntry {
            id: format!("{d}{t}"),
            audio_path: String::new(),
            transcript: format!("w{t}"),
            speaker_id: spk.into(),
            dialogue_id: d.into(),
            turn_index: t,
        };
        let entries = vec![e("a", 2, "x"), e("a", 0, "y"), e("a", 1, "x"), e("b", 0, "z")];
        let audio = vec![Waveform::silence(4, 8000); 4];
        let c = Corpus::new(entries, audio).unwrap();
        assert_eq!(format_history(&c.history(0).unwrap(), None), "Speaker 1: w0\nSpeaker 2: w1");
        assert!(c.history(3).unwrap().is_empty());
        assert_eq!(c.eligible(2), vec![0]);
    }
}
