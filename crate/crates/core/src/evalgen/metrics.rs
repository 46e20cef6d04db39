//! Answer-matching metrics: exact match, token F1, and the geometric mean
//! of ROUGE-1/2/L F-measures.

use std::collections::HashMap;

/// SQuAD-style normalization: lowercase, strip punctuation, drop articles,
/// collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let depunct: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { '\0' })
        .filter(|&c| c != '\0')
        .collect();
    depunct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn counts(tokens: &[&str]) -> HashMap<String, usize> {
    let mut map = HashMap::new();
    for t in tokens {
        *map.entry((*t).to_string()).or_insert(0) += 1;
    }
    map
}

fn token_f1(pred: &str, reference: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if p.is_empty() || r.is_empty() {
        return if p.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
    }
    let pc = counts(&p);
    let rc = counts(&r);
    let overlap: usize = pc
        .iter()
        .map(|(t, &c)| c.min(*rc.get(t).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// (EM, token F1) of a prediction against one or more references.
///
/// EM is 1 iff the normalized prediction equals any normalized reference;
/// F1 is the maximum token-overlap harmonic mean over references.
pub fn qa_metrics(prediction: &str, references: &[String]) -> (f64, f64) {
    let pred = normalize_answer(prediction);
    let mut em = 0.0;
    let mut f1: f64 = 0.0;
    for r in references {
        let reference = normalize_answer(r);
        if pred == reference {
            em = 1.0;
        }
        f1 = f1.max(token_f1(&pred, &reference));
    }
    (em, f1)
}

fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    map
}

fn f_measure(overlap: usize, pred_total: usize, ref_total: usize) -> f64 {
    if pred_total == 0 || ref_total == 0 || overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

fn rouge_n(pred: &[String], reference: &[String], n: usize) -> f64 {
    let pc = ngram_counts(pred, n);
    let rc = ngram_counts(reference, n);
    let overlap: usize = pc
        .iter()
        .map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0)))
        .sum();
    let pred_total = pred.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    f_measure(overlap, pred_total, ref_total)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l(pred: &[String], reference: &[String]) -> f64 {
    f_measure(lcs_len(pred, reference), pred.len(), reference.len())
}

/// ROUGE-1, ROUGE-2, and ROUGE-L F-measures on whitespace tokens.
pub fn rouge_scores(prediction: &str, reference: &str) -> (f64, f64, f64) {
    let p = rouge_tokens(prediction);
    let r = rouge_tokens(reference);
    (rouge_n(&p, &r, 1), rouge_n(&p, &r, 2), rouge_l(&p, &r))
}

/// Geometric mean of ROUGE-1/2/L; zero if any component is zero. For
/// multiple references, the best single-reference geometric mean.
pub fn rouge_geo(prediction: &str, references: &[String]) -> f64 {
    references
        .iter()
        .map(|r| {
            let (r1, r2, rl) = rouge_scores(prediction, r);
            if r1 == 0.0 || r2 == 0.0 || rl == 0.0 {
                0.0
            } else {
                (r1 * r2 * rl).powf(1.0 / 3.0)
            }
        })
        .fold(0.0, f64::max)
}
