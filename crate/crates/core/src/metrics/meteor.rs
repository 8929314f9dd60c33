use std::collections::HashMap;

use crate::tokenizer::normalize;

pub const ALPHA: f64 = 0.9;
pub const GAMMA: f64 = 0.5;
pub const BETA: f64 = 3.0;

/// Exact-match unigram alignment between candidate and reference words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    /// `(candidate index, reference index)` pairs in candidate order.
    pub pairs: Vec<(usize, usize)>,
    pub chunks: usize,
}

/// Number of maximal runs that are contiguous in both sentences.
pub fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    for (i, &(c, r)) in pairs.iter().enumerate() {
        if i == 0 || !(c == pairs[i - 1].0 + 1 && r == pairs[i - 1].1 + 1) {
            chunks += 1;
        }
    }
    chunks
}

/// Alignment with the most matches and, among those, the fewest chunks.
/// Ties are resolved towards the lexicographically smallest reference
/// assignment.
pub fn align(cand: &[&str], reference: &[&str]) -> Alignment {
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in reference.iter().enumerate() {
        positions.entry(w).or_default().push(j);
    }
    let mut cand_count: HashMap<&str, usize> = HashMap::new();
    for w in cand {
        *cand_count.entry(w).or_default() += 1;
    }
    // Every word matches min(count in cand, count in ref) times at best.
    let target: usize = cand_count
        .iter()
        .map(|(w, &c)| c.min(positions.get(w).map_or(0, Vec::len)))
        .sum();
    if target == 0 {
        return Alignment { pairs: Vec::new(), chunks: 0 };
    }
    let options: Vec<&[usize]> = cand
        .iter()
        .map(|w| positions.get(w).map_or(&[][..], |v| v.as_slice()))
        .collect();
    // Remaining matchable capacity per word, used to keep only maximal alignments.
    let mut search = Search {
        options: &options,
        cand,
        used: vec![false; reference.len()],
        current: Vec::with_capacity(target),
        best: None,
        target,
        remaining: cand_count
            .iter()
            .map(|(w, &c)| (*w, c.min(positions.get(w).map_or(0, Vec::len))))
            .collect(),
        skips_left: cand_count.iter().map(|(w, &c)| (*w, c - c.min(positions.get(w).map_or(0, Vec::len)))).collect(),
    };
    search.run(0, 0);
    let (chunks, pairs) = search.best.expect("a maximal alignment always exists");
    Alignment { pairs, chunks }
}

struct Search<'a> {
    options: &'a [&'a [usize]],
    cand: &'a [&'a str],
    used: Vec<bool>,
    current: Vec<(usize, usize)>,
    best: Option<(usize, Vec<(usize, usize)>)>,
    target: usize,
    remaining: HashMap<&'a str, usize>,
    skips_left: HashMap<&'a str, usize>,
}

impl Search<'_> {
    fn run(&mut self, i: usize, chunks: usize) {
        if let Some((b, _)) = &self.best {
            if chunks >= *b {
                return;
            }
        }
        if i == self.cand.len() {
            if self.current.len() == self.target {
                self.best = Some((chunks, self.current.clone()));
            }
            return;
        }
        let w = self.cand[i];
        let opts = self.options[i];
        if !opts.is_empty() && self.remaining[w] > 0 {
            for &j in opts {
                if self.used[j] {
                    continue;
                }
                let extends = self
                    .current
                    .last()
                    .is_some_and(|&(c, r)| c + 1 == i && r + 1 == j);
                let nc = if extends { chunks } else { chunks + 1 };
                self.used[j] = true;
                self.current.push((i, j));
                *self.remaining.get_mut(w).unwrap() -= 1;
                self.run(i + 1, nc);
                *self.remaining.get_mut(w).unwrap() += 1;
                self.current.pop();
                self.used[j] = false;
            }
        }
        if self.skips_left[w] > 0 {
            *self.skips_left.get_mut(w).unwrap() -= 1;
            self.run(i + 1, chunks);
            *self.skips_left.get_mut(w).unwrap() += 1;
        }
    }
}

/// Score from match count, chunk count and sentence lengths.
pub fn score_from_counts(m: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand_len as f64;
    let r = m as f64 / ref_len as f64;
    let f = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let penalty = GAMMA * (chunks as f64 / m as f64).powf(BETA);
    f * (1.0 - penalty)
}

/// Exact-match METEOR on normalised words. An empty side scores 0.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let c = normalize(candidate);
    let r = normalize(reference);
    let cw: Vec<&str> = c.split(' ').filter(|w| !w.is_empty()).collect();
    let rw: Vec<&str> = r.split(' ').filter(|w| !w.is_empty()).collect();
    if cw.is_empty() || rw.is_empty() {
        return 0.0;
    }
    let a = align(&cw, &rw);
    score_from_counts(a.pairs.len(), a.chunks, cw.len(), rw.len())
}
