use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    /// `None` for unlabeled (monologue) text.
    pub speaker_label: Option<String>,
    pub text: String,
    pub turn_index: u32,
}

impl Turn {
    pub fn new(speaker_label: impl Into<String>, text: impl Into<String>, turn_index: u32) -> Self {
        Turn {
            speaker_label: Some(speaker_label.into()),
            text: text.into(),
            turn_index,
        }
    }

    pub fn unlabeled(text: impl Into<String>, turn_index: u32) -> Self {
        Turn {
            speaker_label: None,
            text: text.into(),
            turn_index,
        }
    }

    fn render(&self) -> String {
        match &self.speaker_label {
            Some(l) => format!("Speaker {l}: {}", self.text),
            None => self.text.clone(),
        }
    }
}

/// Turns preceding the target utterance, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueHistory {
    turns: Vec<Turn>,
}

impl DialogueHistory {
    pub fn new(turns: Vec<Turn>) -> Result<Self> {
        for w in turns.windows(2) {
            if w[1].turn_index <= w[0].turn_index {
                return Err(Error::Validation(format!(
                    "turn indices must increase strictly: {} then {}",
                    w[0].turn_index, w[1].turn_index
                )));
            }
        }
        Ok(DialogueHistory { turns })
    }

    pub fn push(&mut self, turn: Turn) -> Result<()> {
        if let Some(last) = self.turns.last() {
            if turn.turn_index <= last.turn_index {
                return Err(Error::Validation(format!(
                    "turn index {} does not follow {}",
                    turn.turn_index, last.turn_index
                )));
            }
        }
        self.turns.push(turn);
        Ok(())
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

/// Renders the last `max_turns` turns (all when `None`) as
/// `Speaker {label}: {text}` lines. A history with no labels at all is a
/// monologue and renders as one space-joined passage.
pub fn format_history(h: &DialogueHistory, max_turns: Option<usize>) -> String {
    let skip = max_turns.map_or(0, |k| h.turns.len().saturating_sub(k));
    let kept = &h.turns[skip..];
    if kept.iter().all(|t| t.speaker_label.is_none()) {
        let parts: Vec<&str> = kept.iter().map(|t| t.text.as_str()).collect();
        return parts.join(" ");
    }
    let lines: Vec<String> = kept.iter().map(Turn::render).collect();
    lines.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(n: u32) -> DialogueHistory {
        DialogueHistory::new(
            (0..n)
                .map(|i| Turn::new(format!("{}", i % 2 + 1), format!("line {i}"), i))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn renders_labeled_turns() {
        let h = DialogueHistory::new(vec![Turn::new("1", "Hi", 0), Turn::new("2", "Hello", 1)]).unwrap();
        assert_eq!(format_history(&h, None), "Speaker 1: Hi\nSpeaker 2: Hello");
    }

    #[test]
    fn truncates_to_last_turns() {
        let h = hist(3);
        assert_eq!(format_history(&h, Some(1)), "Speaker 1: line 2");
        assert_eq!(format_history(&h, Some(0)), "");
        assert_eq!(format_history(&h, Some(10)), format_history(&h, None));
    }

    #[test]
    fn monologue_is_one_passage() {
        let h = DialogueHistory::new(vec![Turn::unlabeled("so today", 0), Turn::unlabeled("we talk", 1)]).unwrap();
        assert_eq!(format_history(&h, None), "so today we talk");
    }

    #[test]
    fn rejects_non_increasing_turns() {
        assert!(DialogueHistory::new(vec![Turn::new("1", "a", 2), Turn::new("2", "b", 2)]).is_err());
        let mut h = hist(2);
        assert!(h.push(Turn::new("1", "x", 1)).is_err());
        h.push(Turn::new("1", "x", 5)).unwrap();
    }

    #[test]
    fn output_depends_only_on_kept_suffix() {
        let a = hist(6);
        let mut turns = a.turns().to_vec();
        turns[0].text = "changed".into();
        turns[1].speaker_label = Some("9".into());
        let b = DialogueHistory::new(turns).unwrap();
        assert_eq!(format_history(&a, Some(4)), format_history(&b, Some(4)));
        assert_ne!(format_history(&a, Some(6)), format_history(&b, Some(6)));
    }
}
