//! Multiple-choice items: schema, line-delimited ingestion, validation and
//! answer-position de-biasing.

mod text;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use text::{
    encode_item, truncate_item, EncodedItem, SimpleTokenizer, TokenSequence, Tokenizer, TruncationCaps, Vocabulary,
    BOS, EOS, PAD, UNK,
};

/// Number of options per question.
pub const NUM_OPTIONS: usize = 4;

const LETTERS: [char; NUM_OPTIONS] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subject {
    Literature,
    History,
    Geography,
    CivicEducation,
}

impl Subject {
    pub const ALL: [Subject; 4] = [Subject::Literature, Subject::History, Subject::Geography, Subject::CivicEducation];

    pub fn as_str(self) -> &'static str {
        match self {
            Subject::Literature => "Literature",
            Subject::History => "History",
            Subject::Geography => "Geography",
            Subject::CivicEducation => "CivicEducation",
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subject {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
        match key.as_str() {
            "literature" => Ok(Subject::Literature),
            "history" => Ok(Subject::History),
            "geography" => Ok(Subject::Geography),
            "civiceducation" | "civic" => Ok(Subject::CivicEducation),
            _ => Err(Error::Parse(format!("unknown subject {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Grade {
    Ten,
    Eleven,
    Twelve,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::Ten, Grade::Eleven, Grade::Twelve];

    pub fn number(self) -> u8 {
        match self {
            Grade::Ten => 10,
            Grade::Eleven => 11,
            Grade::Twelve => 12,
        }
    }
}

impl TryFrom<u8> for Grade {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            10 => Ok(Grade::Ten),
            11 => Ok(Grade::Eleven),
            12 => Ok(Grade::Twelve),
            other => Err(format!("grade {other} not in {{10, 11, 12}}")),
        }
    }
}

impl From<Grade> for u8 {
    fn from(g: Grade) -> u8 {
        g.number()
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// One question with exactly four options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub subject: Subject,
    pub grade: Grade,
    pub question: String,
    pub options: [String; NUM_OPTIONS],
    /// Zero-based index of the gold option.
    pub answer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl McqItem {
    pub fn gold_text(&self) -> &str {
        &self.options[self.answer]
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.answer >= NUM_OPTIONS {
            return Err("answer out of range".into());
        }
        if let Some(k) = self.options.iter().position(|o| o.trim().is_empty()) {
            return Err(format!("option {} is empty", LETTERS[k]));
        }
        Ok(())
    }
}

/// Letter for a zero-based option index.
pub fn answer_letter(index: usize) -> char {
    LETTERS[index]
}

/// Zero-based index for an option letter.
pub fn letter_index(letter: &str) -> Option<usize> {
    let mut chars = letter.trim().chars();
    let c = chars.next()?.to_ascii_uppercase();
    if chars.next().is_some() {
        return None;
    }
    LETTERS.iter().position(|&l| l == c)
}

fn parse_record(value: &Value) -> std::result::Result<McqItem, String> {
    let obj = value.as_object().ok_or("record is not an object")?;
    let text_field = |name: &str| -> std::result::Result<String, String> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(format!("field {name} is not a string")),
            None => Err(format!("missing field {name}")),
        }
    };
    let opt_text = |name: &str| -> std::result::Result<Option<String>, String> {
        match obj.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(format!("field {name} is not a string")),
        }
    };

    let id = text_field("id")?;
    let subject: Subject = text_field("subject")?.parse().map_err(|e: Error| e.to_string())?;
    let grade = match obj.get("grade") {
        Some(Value::Number(n)) => n.as_u64().and_then(|v| u8::try_from(v).ok()).ok_or("grade not an integer")?,
        Some(Value::String(s)) => s.trim().parse::<u8>().map_err(|_| format!("grade {s:?} not an integer"))?,
        Some(_) => return Err("grade not an integer".into()),
        None => return Err("missing field grade".into()),
    };
    let grade = Grade::try_from(grade)?;
    let question = text_field("question")?;
    let options = match obj.get("options") {
        Some(Value::Array(arr)) => {
            if arr.len() != NUM_OPTIONS {
                return Err(format!("expected 4 options, found {}", arr.len()));
            }
            let mut out: [String; NUM_OPTIONS] = Default::default();
            for (slot, v) in out.iter_mut().zip(arr) {
                *slot = v.as_str().ok_or("option is not a string")?.to_string();
            }
            out
        }
        Some(_) => return Err("options is not an array".into()),
        None => return Err("missing field options".into()),
    };
    let answer = match obj.get("answer") {
        Some(Value::Number(n)) => {
            let v = n.as_i64().ok_or("answer out of range")?;
            usize::try_from(v).map_err(|_| "answer out of range")?
        }
        Some(Value::String(s)) => match letter_index(s) {
            Some(i) => i,
            None => s.trim().parse::<usize>().map_err(|_| format!("answer {s:?} is not 0-3 or A-D"))?,
        },
        Some(_) => return Err("answer is not a number or letter".into()),
        None => return Err("missing field answer".into()),
    };
    let item = McqItem {
        id,
        subject,
        grade,
        question,
        options,
        answer,
        explanation: opt_text("explanation")?,
        context: opt_text("context")?,
    };
    item.check()?;
    Ok(item)
}

/// Parses line-delimited JSON records. Blank lines are skipped; the first
/// malformed record aborts with its line number and id.
pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<McqItem>> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse(format!("line {line_no}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: line_no,
            id: "?".into(),
            reason: format!("malformed record: {e}"),
        })?;
        let id = value.get("id").and_then(Value::as_str).unwrap_or("?").to_string();
        let item = parse_record(&value).map_err(|reason| Error::Schema { line: line_no, id, reason })?;
        if !seen.insert(item.id.clone()) {
            return Err(Error::DuplicateId(item.id));
        }
        items.push(item);
    }
    Ok(items)
}

/// Loads and validates a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<McqItem>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

pub fn write_dataset(path: impl AsRef<Path>, items: &[McqItem]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("items serialize"));
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Option order applied to one item: `order[new_position] = old_position`.
pub type OptionPermutation = [usize; NUM_OPTIONS];

/// Reorders options by `order` and remaps the answer so the gold text is kept.
pub fn permute_options(item: &McqItem, order: &OptionPermutation) -> McqItem {
    let mut out = item.clone();
    for (new_pos, &old_pos) in order.iter().enumerate() {
        out.options[new_pos] = item.options[old_pos].clone();
    }
    out.answer = order.iter().position(|&old| old == item.answer).expect("order is a permutation");
    out
}

pub fn invert_permutation(order: &OptionPermutation) -> OptionPermutation {
    let mut inv = [0; NUM_OPTIONS];
    for (new_pos, &old_pos) in order.iter().enumerate() {
        inv[old_pos] = new_pos;
    }
    inv
}

/// Shuffles each item's options with a seed-derived permutation.
///
/// Returns the shuffled items alongside the permutation applied to each, so
/// the shuffle can be undone with [`invert_permutation`].
pub fn debias_shuffle(items: &[McqItem], seed: u64) -> (Vec<McqItem>, Vec<OptionPermutation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .map(|item| {
            let mut order = [0, 1, 2, 3];
            order.shuffle(&mut rng);
            (permute_options(item, &order), order)
        })
        .unzip()
}

/// Counts of gold labels A–D.
pub fn option_distribution(items: &[McqItem]) -> [usize; NUM_OPTIONS] {
    let mut counts = [0; NUM_OPTIONS];
    for item in items {
        counts[item.answer] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, answer: usize) -> McqItem {
        McqItem {
            id: id.into(),
            subject: Subject::History,
            grade: Grade::Eleven,
            question: "who led the uprising".into(),
            options: ["a one".into(), "b two".into(), "c three".into(), "d four".into()],
            answer,
            explanation: None,
            context: None,
        }
    }

    #[test]
    fn parses_two_records_in_order() {
        let text = concat!(
            r#"{"id":"q1","subject":"History","grade":10,"question":"x","options":["a","b","c","d"],"answer":2}"#,
            "\n\n",
            r#"{"id":"q2","subject":"Geography","grade":"12","question":"y","options":["a","b","c","d"],"answer":"D","explanation":"because"}"#,
        );
        let items = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].id, "q1");
        assert_eq!(items[0].answer, 2);
        assert_eq!(items[1].answer, 3);
        assert_eq!(items[1].grade, Grade::Twelve);
    }

    #[test]
    fn three_options_rejected_with_id() {
        let text = r#"{"id":"bad7","subject":"History","grade":10,"question":"x","options":["a","b","c"],"answer":0}"#;
        let err = parse_dataset(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad7"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn answer_four_rejected() {
        let text = r#"{"id":"q9","subject":"History","grade":10,"question":"x","options":["a","b","c","d"],"answer":4}"#;
        let err = parse_dataset(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("answer out of range"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let line = r#"{"id":"q","subject":"History","grade":10,"question":"x","options":["a","b","c","d"],"answer":0}"#;
        let text = format!("{line}\n{line}\n");
        assert!(matches!(parse_dataset(text.as_bytes()), Err(Error::DuplicateId(id)) if id == "q"));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(load_dataset("/nonexistent/data.jsonl"), Err(Error::Io { .. })));
    }

    #[test]
    fn identity_permutation_leaves_item_unchanged() {
        let it = item("q", 2);
        assert_eq!(permute_options(&it, &[0, 1, 2, 3]), it);
    }

    #[test]
    fn permutation_remaps_answer() {
        let it = item("q", 0);
        let out = permute_options(&it, &[2, 0, 1, 3]);
        assert_eq!(out.answer, 1);
        assert_eq!(out.gold_text(), it.gold_text());
    }

    #[test]
    fn distribution_counts() {
        assert_eq!(option_distribution(&[]), [0, 0, 0, 0]);
        let items: Vec<_> = [0, 0, 1, 2, 3].iter().map(|&a| item(&format!("q{a}"), a)).collect();
        assert_eq!(option_distribution(&items), [2, 1, 1, 1]);
    }

    #[test]
    fn shuffle_is_deterministic_and_invertible() {
        let items: Vec<_> = (0..50).map(|i| item(&format!("q{i}"), i % 4)).collect();
        let (a, perms) = debias_shuffle(&items, 17);
        let (b, _) = debias_shuffle(&items, 17);
        assert_eq!(a, b);
        for ((orig, shuffled), order) in items.iter().zip(&a).zip(&perms) {
            assert_eq!(&permute_options(shuffled, &invert_permutation(order)), orig);
        }
    }

    #[test]
    fn monte_carlo_label_frequencies_are_near_uniform() {
        // All gold answers start at A; a uniform permutation spreads them.
        let items: Vec<_> = (0..10_000).map(|i| item(&format!("q{i}"), 0)).collect();
        let (shuffled, _) = debias_shuffle(&items, 2024);
        for count in option_distribution(&shuffled) {
            let freq = count as f64 / 10_000.0;
            assert!((0.23..=0.27).contains(&freq), "frequency {freq}");
        }
    }
}
