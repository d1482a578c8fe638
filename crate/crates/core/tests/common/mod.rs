//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;

pub const ALPHABET: [&str; 5] = ["a", "b", "c", "d", "e"];

/// Every sequence over `ALPHABET` of length `0..=max_len`.
pub fn all_sequences(max_len: usize) -> Vec<Vec<&'static str>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * ALPHABET.len());
        for seq in &frontier {
            for sym in ALPHABET {
                let mut s: Vec<&str> = seq.clone();
                s.push(sym);
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn random_sequence<R: Rng>(rng: &mut R, max_len: usize) -> Vec<&'static str> {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn div(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn multiset(tokens: &[&str], n: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    if n <= tokens.len() {
        for i in 0..=tokens.len() - n {
            *m.entry(tokens[i..i + n].join(" ")).or_insert(0) += 1;
        }
    }
    m
}

/// (precision, recall, f1) by explicit clipped multiset intersection. With
/// no n-grams on either side, the score is 1 for equal sequences, else 0.
pub fn rouge_n_oracle(cand: &[&str], reference: &[&str], n: usize) -> (f64, f64, f64) {
    let c = multiset(cand, n);
    let r = multiset(reference, n);
    let ct: usize = c.values().sum();
    let rt: usize = r.values().sum();
    if ct == 0 && rt == 0 {
        return if cand == reference { (1.0, 1.0, 1.0) } else { (0.0, 0.0, 0.0) };
    }
    let mut inter = 0;
    for (g, &k) in &c {
        inter += k.min(*r.get(g).unwrap_or(&0));
    }
    let (p, rc) = (div(inter, ct), div(inter, rt));
    (p, rc, f1(p, rc))
}

/// Full quadratic LCS table.
pub fn lcs_oracle(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn rouge_l_oracle(cand: &[&str], reference: &[&str]) -> (f64, f64, f64) {
    if cand.is_empty() && reference.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let l = lcs_oracle(cand, reference);
    let (p, r) = (div(l, cand.len()), div(l, reference.len()));
    (p, r, f1(p, r))
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}
