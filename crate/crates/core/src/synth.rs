//! Synthetic items with a planted answer signal.
//!
//! Every item carries its own context. The gold option's words appear in
//! that context as a contiguous phrase; distractor words never do. The
//! explanation is `answer <letter> because <gold option words>`.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{answer_letter, Grade, McqItem, SimpleTokenizer, Subject, Tokenizer, NUM_OPTIONS};
use crate::error::{Error, Result};
use crate::retrieval::SentenceUnit;

const ONSETS: [&str; 20] = ["b", "c", "d", "đ", "g", "h", "k", "l", "m", "n", "ng", "nh", "ph", "qu", "s", "t", "th", "tr", "v", "x"];
const RHYMES: [&str; 24] = [
    "a", "an", "anh", "ao", "ăm", "âu", "e", "em", "ê", "i", "iên", "in", "o", "oa", "ong", "ô", "ơn", "u", "uy", "ư", "ương", "ai", "ân", "ôi",
];

/// Words the explanation template reserves.
pub const TEMPLATE_WORDS: [&str; 2] = ["answer", "because"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub items: usize,
    pub seed: u64,
    /// Size of the syllable pool the items draw from.
    pub vocab_size: usize,
    pub context_words: usize,
    pub question_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { items: 500, seed: 0, vocab_size: 400, context_words: 24, question_words: 5 }
    }
}

/// The first `size` syllables of the fixed onset × rhyme grid.
pub fn syllable_pool(size: usize) -> Result<Vec<String>> {
    let max = ONSETS.len() * RHYMES.len();
    if size > max {
        return Err(Error::Invalid(format!("vocab size {size} exceeds the {max} available syllables")));
    }
    let mut out = Vec::with_capacity(size);
    'outer: for r in RHYMES {
        for o in ONSETS {
            if out.len() == size {
                break 'outer;
            }
            out.push(format!("{o}{r}"));
        }
    }
    Ok(out)
}

/// Distinct option tokens that also occur in the context.
pub fn token_overlap(option: &str, context: &str) -> usize {
    let ctx: HashSet<String> = SimpleTokenizer.split(context).into_iter().collect();
    let opt: BTreeSet<String> = SimpleTokenizer.split(option).into_iter().collect();
    opt.iter().filter(|t| ctx.contains(*t)).count()
}

fn words<R: Rng>(pool: &[String], count: usize, rng: &mut R) -> Vec<String> {
    pool.choose_multiple(rng, count).cloned().collect()
}

/// Generates `config.items` items. Labels are drawn uniformly.
pub fn synth_items(config: &SynthConfig) -> Result<Vec<McqItem>> {
    if config.items == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    let min_vocab = config.context_words + 3 * 3 + 4;
    if config.vocab_size < min_vocab {
        return Err(Error::Invalid(format!("vocab size must be at least {min_vocab}")));
    }
    let pool = syllable_pool(config.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.items);
    for i in 0..config.items {
        let subject = *Subject::ALL.choose(&mut rng).expect("subjects");
        let grade = *Grade::ALL.choose(&mut rng).expect("grades");
        let answer = rng.gen_range(0..NUM_OPTIONS);
        let lens: Vec<usize> = (0..NUM_OPTIONS).map(|_| rng.gen_range(2..=3)).collect();
        let option_words = words(&pool, lens.iter().sum(), &mut rng);
        let mut options: Vec<Vec<String>> = Vec::with_capacity(NUM_OPTIONS);
        let mut at = 0;
        for len in &lens {
            options.push(option_words[at..at + len].to_vec());
            at += len;
        }
        let taken: HashSet<&String> = option_words.iter().collect();
        let rest: Vec<String> = pool.iter().filter(|w| !taken.contains(w)).cloned().collect();
        let mut context = words(&rest, config.context_words, &mut rng);
        let insert_at = rng.gen_range(0..=context.len());
        let gold = &options[answer];
        context.splice(insert_at..insert_at, gold.iter().cloned());
        let mut question = words(&rest, config.question_words, &mut rng);
        question.push("?".into());
        let explanation = format!("{} {} {} {}", TEMPLATE_WORDS[0], answer_letter(answer), TEMPLATE_WORDS[1], gold.join(" "));
        out.push(McqItem {
            id: format!("syn-{}-{i:05}", config.seed),
            subject,
            grade,
            question: question.join(" "),
            options: [0, 1, 2, 3].map(|k| options[k].join(" ")),
            answer,
            explanation: Some(explanation),
            context: Some(format!("{}.", context.join(" "))),
        });
    }
    Ok(out)
}

/// Every item's context as one retrieval unit in the item's subject, ids
/// from 0.
pub fn synth_corpus(items: &[McqItem]) -> Vec<SentenceUnit> {
    items
        .iter()
        .filter_map(|it| it.context.as_ref().map(|c| (it.subject, c)))
        .enumerate()
        .map(|(i, (subject, text))| SentenceUnit { id: i as u64, subject, text: text.clone() })
        .collect()
}
