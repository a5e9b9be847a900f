//! Reader for EmpatheticDialogues-style split files.
//!
//! Each file is comma-separated with a header row. The columns used are
//! `conv_id`, `utterance_idx`, `context` (the emotion label) and
//! `utterance`; commas inside text are escaped as `_comma_`, so rows are
//! split on every comma without quote handling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;

use crate::emotion::{emotion_id, NUM_EMOTIONS};
use crate::error::{MimeError, Result};

pub const SPEAKER_CTX: usize = 0;
pub const NUM_SPEAKERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Speaker {
    User,
    Agent,
}

impl Speaker {
    /// Row in the speaker embedding table; row 0 belongs to the CTX token.
    pub fn id(self) -> usize {
        match self {
            Speaker::User => 1,
            Speaker::Agent => 2,
        }
    }

    /// Speakers alternate starting with the user.
    pub fn at_turn(turn: usize) -> Self {
        if turn % 2 == 0 {
            Speaker::User
        } else {
            Speaker::Agent
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Valid => "valid.csv",
            Split::Test => "test.csv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(MimeError::Dataset(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: Speaker,
    /// 0-based turn index inside the conversation.
    pub turn: usize,
    pub tokens: Vec<String>,
}

/// One training example: every turn before an agent reply, the emotion of
/// the conversation and the reply itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueSample {
    pub conv_id: String,
    pub context: Vec<Utterance>,
    pub emotion: usize,
    pub response: Vec<String>,
    pub response_turn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub emotion: usize,
    pub utterances: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedSplit {
    pub conversations: Vec<Conversation>,
    pub samples: Vec<DialogueSample>,
    pub skipped_rows: usize,
}

impl LoadedSplit {
    pub fn labels(&self) -> BTreeSet<usize> {
        self.conversations.iter().map(|c| c.emotion).collect()
    }
}

/// Lowercases, splits on whitespace and peels leading/trailing punctuation
/// off each word as separate single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let chars: Vec<char> = word.chars().collect();
        let start = chars.iter().position(|c| !c.is_ascii_punctuation());
        let Some(start) = start else {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        };
        let end = chars.iter().rposition(|c| !c.is_ascii_punctuation()).unwrap_or(start) + 1;
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        out.push(chars[start..end].iter().collect());
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" ")
}

pub fn decode_escapes(text: &str) -> String {
    text.replace("_comma_", ",")
}

struct Row {
    conv_id: String,
    index: usize,
    label: String,
    text: String,
}

fn parse_row(record: &csv::StringRecord) -> Option<Row> {
    if record.len() < 6 {
        return None;
    }
    let conv_id = record.get(0)?.trim();
    if conv_id.is_empty() {
        return None;
    }
    Some(Row {
        conv_id: conv_id.to_string(),
        index: record.get(1)?.trim().parse().ok()?,
        label: record.get(2)?.trim().to_string(),
        text: decode_escapes(record.get(5)?),
    })
}

/// Parses one split from any reader. Conversations keep file order; turns
/// inside a conversation are ordered by their utterance index.
pub fn read_split<R: std::io::Read>(reader: R) -> Result<LoadedSplit> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .flexible(true)
        .from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, (String, Vec<(usize, String)>)> = BTreeMap::new();
    let mut skipped = 0;
    for record in rdr.records() {
        let Some(row) = record.ok().as_ref().and_then(parse_row) else {
            skipped += 1;
            continue;
        };
        let entry = rows.entry(row.conv_id.clone()).or_insert_with(|| {
            order.push(row.conv_id.clone());
            (row.label.clone(), Vec::new())
        });
        if entry.0 != row.label {
            skipped += 1;
            continue;
        }
        entry.1.push((row.index, row.text));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} malformed rows");
    }

    let mut split = LoadedSplit {
        skipped_rows: skipped,
        ..Default::default()
    };
    for id in order {
        let (label, mut turns) = rows.remove(&id).expect("every ordered id has rows");
        let emotion = emotion_id(&label).ok_or_else(|| MimeError::UnknownEmotion(label.clone()))?;
        debug_assert!(emotion < NUM_EMOTIONS);
        turns.sort_by_key(|(i, _)| *i);
        let utterances: Vec<Vec<String>> = turns.iter().map(|(_, t)| tokenize(t)).collect();
        let conv = Conversation {
            id,
            emotion,
            utterances,
        };
        split.samples.extend(conversation_samples(&conv));
        split.conversations.push(conv);
    }
    Ok(split)
}

/// One sample per agent turn, with every earlier turn as context.
pub fn conversation_samples(conv: &Conversation) -> Vec<DialogueSample> {
    let context_of = |upto: usize| {
        conv.utterances[..upto]
            .iter()
            .enumerate()
            .map(|(turn, tokens)| Utterance {
                speaker: Speaker::at_turn(turn),
                turn,
                tokens: tokens.clone(),
            })
            .collect::<Vec<_>>()
    };
    (1..conv.utterances.len())
        .step_by(2)
        .map(|turn| DialogueSample {
            conv_id: conv.id.clone(),
            context: context_of(turn),
            emotion: conv.emotion,
            response: conv.utterances[turn].clone(),
            response_turn: turn,
        })
        .collect()
}

pub fn load_split(dir: &Path, split: Split) -> Result<LoadedSplit> {
    let path = dir.join(split.file_name());
    let file = File::open(&path).map_err(|e| MimeError::io(&path, e))?;
    read_split(std::io::BufReader::new(file)).map_err(|e| match e {
        MimeError::UnknownEmotion(l) => MimeError::Dataset(format!("{}: unknown emotion label {l:?}", path.display())),
        other => other,
    })
}
