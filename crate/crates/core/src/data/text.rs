//! Tokenization, vocabulary and field truncation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{McqItem, Grade, Subject, NUM_OPTIONS};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Splits text into normalized surface tokens.
pub trait Tokenizer {
    fn split(&self, text: &str) -> Vec<String>;
}

/// Lowercases, splits on whitespace, and emits each punctuation character
/// as its own token.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenizer;

impl Tokenizer for SimpleTokenizer {
    fn split(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }
}

impl SimpleTokenizer {
    /// The longest prefix of `text` holding at most `cap` tokens.
    pub fn prefix_tokens<'t>(&self, text: &'t str, cap: usize) -> &'t str {
        let mut count = 0;
        let mut in_word = false;
        for (pos, ch) in text.char_indices() {
            if ch.is_alphanumeric() {
                if !in_word {
                    if count == cap {
                        return text[..pos].trim_end();
                    }
                    count += 1;
                    in_word = true;
                }
                continue;
            }
            in_word = false;
            if !ch.is_whitespace() {
                if count == cap {
                    return text[..pos].trim_end();
                }
                count += 1;
            }
        }
        text
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Keeps the first `cap` tokens.
    pub fn truncated(&self, cap: usize) -> TokenSequence {
        let n = self.len().min(cap);
        TokenSequence { ids: self.ids[..n].to_vec(), tokens: self.tokens[..n].to_vec() }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Token ↔ id map with PAD, BOS, EOS, UNK fixed at ids 0–3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from(Vec::new())
    }
}

impl From<Vec<String>> for Vocabulary {
    /// Accepts either a full token list (starting with the reserved tokens) or
    /// a list of ordinary tokens, to which the reserved ones are prepended.
    fn from(tokens: Vec<String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let skip = if tokens.iter().take(4).map(String::as_str).eq(RESERVED) { 4 } else { 0 };
        let mut vocab = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        all.extend(tokens.into_iter().skip(skip));
        for t in all {
            vocab.insert(t);
        }
        vocab
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from texts; ids follow first appearance.
    pub fn build<'a>(tokenizer: &impl Tokenizer, texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocabulary::default();
        for text in texts {
            for tok in tokenizer.split(text) {
                vocab.insert(tok);
            }
        }
        vocab
    }

    /// Vocabulary over every text field of the given items.
    pub fn from_items(tokenizer: &impl Tokenizer, items: &[McqItem]) -> Self {
        let texts = items.iter().flat_map(|it| {
            std::iter::once(it.question.as_str())
                .chain(it.options.iter().map(String::as_str))
                .chain(it.explanation.as_deref())
                .chain(it.context.as_deref())
        });
        Self::build(tokenizer, texts)
    }

    fn insert(&mut self, token: String) -> usize {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes `text`; unknown tokens map to UNK.
    pub fn encode(&self, tokenizer: &impl Tokenizer, text: &str) -> TokenSequence {
        let tokens = tokenizer.split(text);
        let ids = tokens.iter().map(|t| self.id(t).unwrap_or(UNK)).collect();
        TokenSequence { ids, tokens }
    }

    /// Surface text for ids, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.len()) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size: self.len() }),
            None => Ok(()),
        }
    }
}

/// Per-field token caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationCaps {
    pub context: usize,
    pub question: usize,
    pub option: usize,
}

impl Default for TruncationCaps {
    fn default() -> Self {
        Self { context: 400, question: 80, option: 20 }
    }
}

impl TruncationCaps {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.question == 0 || self.option == 0 {
            return Err(Error::Invalid("truncation caps must be positive".into()));
        }
        Ok(())
    }
}

/// A tokenized item ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedItem {
    pub id: String,
    pub subject: Subject,
    pub grade: Grade,
    pub answer: usize,
    pub question: TokenSequence,
    pub options: [TokenSequence; NUM_OPTIONS],
    pub context: TokenSequence,
    pub explanation: Option<TokenSequence>,
}

/// Cuts every field to its cap, keeping prefixes. Idempotent.
pub fn truncate_item(item: &EncodedItem, caps: &TruncationCaps) -> EncodedItem {
    EncodedItem {
        question: item.question.truncated(caps.question),
        options: item.options.clone().map(|o| o.truncated(caps.option)),
        context: item.context.truncated(caps.context),
        ..item.clone()
    }
}

/// Tokenizes and truncates an item.
pub fn encode_item(item: &McqItem, vocab: &Vocabulary, tokenizer: &impl Tokenizer, caps: &TruncationCaps) -> EncodedItem {
    let encoded = EncodedItem {
        id: item.id.clone(),
        subject: item.subject,
        grade: item.grade,
        answer: item.answer,
        question: vocab.encode(tokenizer, &item.question),
        options: item.options.clone().map(|o| vocab.encode(tokenizer, &o)),
        context: vocab.encode(tokenizer, item.context.as_deref().unwrap_or("")),
        explanation: item.explanation.as_deref().map(|e| vocab.encode(tokenizer, e)),
    };
    truncate_item(&encoded, caps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&SimpleTokenizer, ["Hà Nội là thủ đô", "của Việt Nam ."])
    }

    fn seq(n: usize) -> TokenSequence {
        TokenSequence { ids: (0..n).map(|i| 4 + i % 3).collect(), tokens: (0..n).map(|i| format!("t{i}")).collect() }
    }

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(SimpleTokenizer.split("Hà Nội, 1945!"), vec!["hà", "nội", ",", "1945", "!"]);
        assert!(SimpleTokenizer.split("").is_empty());
    }

    #[test]
    fn prefix_tokens_matches_split() {
        let text = "Một, hai ba! Bốn năm.";
        for cap in 0..9 {
            let prefix = SimpleTokenizer.prefix_tokens(text, cap);
            let want: Vec<String> = SimpleTokenizer.split(text).into_iter().take(cap).collect();
            assert_eq!(SimpleTokenizer.split(prefix), want, "cap {cap}");
        }
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = vocab();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("hà"), Some(4));
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(vocab().encode(&SimpleTokenizer, "").is_empty());
    }

    #[test]
    fn known_words_map_to_their_ids_and_round_trip() {
        let v = vocab();
        let s = v.encode(&SimpleTokenizer, "Thủ đô Việt Nam");
        assert_eq!(s.ids, vec![v.id("thủ").unwrap(), v.id("đô").unwrap(), v.id("việt").unwrap(), v.id("nam").unwrap()]);
        assert_eq!(v.decode(&s.ids), "thủ đô việt nam");
    }

    #[test]
    fn one_unknown_word_gives_one_unk() {
        let s = vocab().encode(&SimpleTokenizer, "hà nội là thành phố");
        assert_eq!(s.ids.iter().filter(|&&id| id == UNK).count(), 2);
        let s = vocab().encode(&SimpleTokenizer, "hà nội là huế");
        assert_eq!(s.ids.iter().filter(|&&id| id == UNK).count(), 1);
    }

    #[test]
    fn vocabulary_serializes_as_token_list() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    fn encoded(q: usize, o: usize, c: usize) -> EncodedItem {
        EncodedItem {
            id: "x".into(),
            subject: Subject::History,
            grade: Grade::Ten,
            answer: 0,
            question: seq(q),
            options: [seq(o), seq(3), seq(3), seq(3)],
            context: seq(c),
            explanation: None,
        }
    }

    #[test]
    fn truncation_boundaries() {
        let caps = TruncationCaps::default();
        let item = encoded(80, 25, 401);
        let t = truncate_item(&item, &caps);
        assert_eq!(t.question, item.question);
        assert_eq!(t.context.len(), 400);
        assert_eq!(t.context.ids[..], item.context.ids[..400]);
        assert_eq!(t.options[0].len(), 20);
        assert_eq!(t.options[0].tokens[..], item.options[0].tokens[..20]);
        assert_eq!(truncate_item(&t, &caps), t);
    }
}
