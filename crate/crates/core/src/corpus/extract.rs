//! Rule-based weak labeller: keyword matching with a short negation window.

use super::vocab::{LabelVector, ObservationVocabulary};

/// Negation cues, each a token sequence.
pub const NEGATION_CUES: [&[&str]; 4] = [&["no"], &["without"], &["free", "of"], &["negative", "for"]];

/// How many tokens before a mention are searched for a negation cue.
pub const NEGATION_WINDOW: usize = 3;

/// Lowercase alphanumeric word tokens.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Splits on `.`, `!`, `?` and newlines, trimming whitespace; empty pieces are
/// dropped. Terminators stay attached to their sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch == '\n' {
            push_sentence(&mut out, &mut cur);
            continue;
        }
        cur.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            push_sentence(&mut out, &mut cur);
        }
    }
    push_sentence(&mut out, &mut cur);
    out
}

fn push_sentence(out: &mut Vec<String>, cur: &mut String) {
    let s = cur.trim();
    if !s.is_empty() && s.chars().any(char::is_alphanumeric) {
        out.push(s.to_string());
    }
    cur.clear();
}

/// Sentences with at least `min_tokens` whitespace-separated tokens, in order.
pub fn sentence_filter(report: &str, min_tokens: usize) -> Vec<String> {
    split_sentences(report)
        .into_iter()
        .filter(|s| s.split_whitespace().count() >= min_tokens)
        .collect()
}

fn negated(tokens: &[String], start: usize) -> bool {
    let window = &tokens[start.saturating_sub(NEGATION_WINDOW)..start];
    NEGATION_CUES.iter().any(|cue| window.windows(cue.len()).any(|w| w.iter().zip(cue.iter()).all(|(a, b)| a == b)))
}

/// Observation `k` is positive iff one of its synonyms occurs in some sentence
/// with no negation cue among the three preceding tokens. Longer phrases claim
/// their tokens first, so "effusion" inside a negated "pleural effusion" is
/// not read as a separate positive mention.
pub fn extract_labels(report: &str, vocab: &ObservationVocabulary) -> LabelVector {
    let mut phrases: Vec<(usize, Vec<String>)> = vocab
        .observations
        .iter()
        .enumerate()
        .flat_map(|(k, o)| o.synonyms.iter().map(move |s| (k, words(s))))
        .filter(|(_, w)| !w.is_empty())
        .collect();
    // stable: longest first, then vocabulary order
    phrases.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
    let mut found = Vec::new();
    for sentence in split_sentences(report) {
        let toks = words(&sentence);
        let mut claimed = vec![false; toks.len()];
        for (k, syn) in &phrases {
            for start in 0..toks.len().saturating_sub(syn.len() - 1) {
                let span = start..start + syn.len();
                if toks[span.clone()] != syn[..] || claimed[span.clone()].iter().any(|&c| c) {
                    continue;
                }
                claimed[span].iter_mut().for_each(|c| *c = true);
                if !negated(&toks, start) && !found.contains(k) {
                    found.push(*k);
                }
            }
        }
    }
    LabelVector::from_findings(&found)
}
