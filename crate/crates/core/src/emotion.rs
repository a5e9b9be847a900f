//! The 32 EmpatheticDialogues emotion labels and their positive/negative
//! partition.

use std::fmt;
use std::path::Path;

use crate::error::{MimeError, Result};

pub const NUM_EMOTIONS: usize = 32;

/// Label names, indexed by emotion id (alphabetical).
pub const EMOTIONS: [&str; NUM_EMOTIONS] = [
    "afraid",
    "angry",
    "annoyed",
    "anticipating",
    "anxious",
    "apprehensive",
    "ashamed",
    "caring",
    "confident",
    "content",
    "devastated",
    "disappointed",
    "disgusted",
    "embarrassed",
    "excited",
    "faithful",
    "furious",
    "grateful",
    "guilty",
    "hopeful",
    "impressed",
    "jealous",
    "joyful",
    "lonely",
    "nostalgic",
    "prepared",
    "proud",
    "sad",
    "sentimental",
    "surprised",
    "terrified",
    "trusting",
];

const POSITIVE: [&str; 13] = [
    "confident",
    "joyful",
    "grateful",
    "impressed",
    "proud",
    "excited",
    "trusting",
    "hopeful",
    "faithful",
    "prepared",
    "content",
    "surprised",
    "caring",
];

const NEGATIVE: [&str; 19] = [
    "afraid",
    "angry",
    "annoyed",
    "anticipating",
    "anxious",
    "apprehensive",
    "ashamed",
    "devastated",
    "disappointed",
    "disgusted",
    "embarrassed",
    "furious",
    "guilty",
    "jealous",
    "lonely",
    "nostalgic",
    "sad",
    "sentimental",
    "terrified",
];

pub fn emotion_id(label: &str) -> Option<usize> {
    EMOTIONS.iter().position(|&e| e == label)
}

pub fn emotion_name(id: usize) -> &'static str {
    EMOTIONS[id]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn flip(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        })
    }
}

/// A partition of all emotion ids into a positive and a negative group.
/// Group members are kept in ascending id order; that order defines the
/// coordinates of the per-group emotion distributions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionGrouping {
    positive: Vec<usize>,
    negative: Vec<usize>,
}

impl Default for EmotionGrouping {
    fn default() -> Self {
        Self::standard()
    }
}

impl EmotionGrouping {
    /// 13 positive and 19 negative labels.
    pub fn standard() -> Self {
        Self::from_labels(&POSITIVE, &NEGATIVE).expect("built-in grouping is a partition")
    }

    pub fn from_labels<S: AsRef<str>>(positive: &[S], negative: &[S]) -> Result<Self> {
        let ids = |labels: &[S]| -> Result<Vec<usize>> {
            labels
                .iter()
                .map(|l| emotion_id(l.as_ref()).ok_or_else(|| MimeError::UnknownEmotion(l.as_ref().to_string())))
                .collect()
        };
        Self::from_ids(ids(positive)?, ids(negative)?)
    }

    pub fn from_ids(mut positive: Vec<usize>, mut negative: Vec<usize>) -> Result<Self> {
        positive.sort_unstable();
        negative.sort_unstable();
        if positive.is_empty() || negative.is_empty() {
            return Err(MimeError::Grouping("both groups need at least one label".into()));
        }
        let mut seen = [false; NUM_EMOTIONS];
        for &id in positive.iter().chain(&negative) {
            if id >= NUM_EMOTIONS {
                return Err(MimeError::LabelOutOfRange(id));
            }
            if seen[id] {
                return Err(MimeError::Grouping(format!("{} listed twice", EMOTIONS[id])));
            }
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(MimeError::Grouping(format!("{} is in neither group", EMOTIONS[missing])));
        }
        Ok(Self { positive, negative })
    }

    /// Parses `[positive]` / `[negative]` sections, one label per line.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut positive = Vec::new();
        let mut negative = Vec::new();
        let mut section: Option<Polarity> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[positive]" => section = Some(Polarity::Positive),
                "[negative]" => section = Some(Polarity::Negative),
                label => match section {
                    Some(Polarity::Positive) => positive.push(label.to_string()),
                    Some(Polarity::Negative) => negative.push(label.to_string()),
                    None => {
                        return Err(MimeError::Grouping(format!("line {}: label before any section header", n + 1)))
                    }
                },
            }
        }
        Self::from_labels(&positive, &negative)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MimeError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("[positive]\n");
        for &id in &self.positive {
            out.push_str(EMOTIONS[id]);
            out.push('\n');
        }
        out.push_str("[negative]\n");
        for &id in &self.negative {
            out.push_str(EMOTIONS[id]);
            out.push('\n');
        }
        out
    }

    pub fn group(&self, polarity: Polarity) -> &[usize] {
        match polarity {
            Polarity::Positive => &self.positive,
            Polarity::Negative => &self.negative,
        }
    }

    pub fn polarity(&self, emotion: usize) -> Polarity {
        if self.positive.binary_search(&emotion).is_ok() {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    pub fn labels(&self, polarity: Polarity) -> Vec<&'static str> {
        self.group(polarity).iter().map(|&id| EMOTIONS[id]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_partition_sizes() {
        let g = EmotionGrouping::standard();
        assert_eq!(g.group(Polarity::Positive).len(), 13);
        assert_eq!(g.group(Polarity::Negative).len(), 19);
        let mut all: Vec<usize> = g.positive.iter().chain(&g.negative).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..NUM_EMOTIONS).collect::<Vec<_>>());
    }

    #[test]
    fn table_memberships() {
        let g = EmotionGrouping::standard();
        assert_eq!(g.polarity(emotion_id("joyful").unwrap()), Polarity::Positive);
        assert_eq!(g.polarity(emotion_id("afraid").unwrap()), Polarity::Negative);
        assert_eq!(g.polarity(emotion_id("surprised").unwrap()), Polarity::Positive);
        assert_eq!(g.polarity(emotion_id("anticipating").unwrap()), Polarity::Negative);
    }

    #[test]
    fn text_round_trip() {
        let g = EmotionGrouping::standard();
        assert_eq!(EmotionGrouping::parse(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn rejects_overlap_and_gaps() {
        let mut pos: Vec<&str> = POSITIVE.to_vec();
        pos.push("sad");
        assert!(matches!(EmotionGrouping::from_labels(&pos, &NEGATIVE), Err(MimeError::Grouping(_))));
        assert!(matches!(
            EmotionGrouping::from_labels(&POSITIVE[1..], &NEGATIVE),
            Err(MimeError::Grouping(_))
        ));
        assert!(matches!(
            EmotionGrouping::parse("[positive]\nshocked\n"),
            Err(MimeError::UnknownEmotion(_))
        ));
    }

    #[test]
    fn regrouping_from_text() {
        let mut text = String::from("# surprise moved\n[positive]\n");
        for l in POSITIVE.iter().filter(|&&l| l != "surprised") {
            text += l;
            text += "\n";
        }
        text += "[negative]\nsurprised\n";
        for l in NEGATIVE {
            text += l;
            text += "\n";
        }
        let g = EmotionGrouping::parse(&text).unwrap();
        assert_eq!(g.polarity(emotion_id("surprised").unwrap()), Polarity::Negative);
        assert_eq!(g.group(Polarity::Negative).len(), 20);
    }
}
