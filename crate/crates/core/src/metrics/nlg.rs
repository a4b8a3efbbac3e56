use std::collections::HashMap;
use std::hash::Hash;

pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;

/// Alignment search nodes before METEOR settles for the best alignment found.
const METEOR_NODE_BUDGET: usize = 200_000;

/// Lowercase whitespace tokens.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Unsmoothed sentence BLEU over orders `1..=n` with brevity penalty.
///
/// Orders for which neither side has any n-gram are skipped, so identical
/// sequences shorter than `n` still score 1.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4");
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for k in 1..=n {
        if candidate.len() < k && reference.len() < k {
            continue;
        }
        let cand = ngram_counts(candidate, k);
        let refc = ngram_counts(reference, k);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
        orders += 1;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / orders as f64).exp()
}

fn lcs<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-score with recall weight `ROUGE_BETA`.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

struct ChunkSearch<'a> {
    /// Reference positions holding each candidate token.
    options: Vec<Vec<usize>>,
    /// How many candidate occurrences of each token may stay unmatched.
    skips: Vec<usize>,
    word_of: &'a [usize],
    used: Vec<bool>,
    best: usize,
    nodes: usize,
}

impl ChunkSearch<'_> {
    fn run(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best {
            return;
        }
        if i == self.options.len() {
            self.best = chunks;
            return;
        }
        if self.nodes > METEOR_NODE_BUDGET && self.best != usize::MAX {
            return;
        }
        let mut order = self.options[i].clone();
        if let Some(p) = prev {
            if let Some(pos) = order.iter().position(|&j| j == p + 1) {
                order.remove(pos);
                order.insert(0, p + 1);
            }
        }
        for j in order {
            if self.used[j] {
                continue;
            }
            self.used[j] = true;
            let extends = prev.is_some_and(|p| p + 1 == j);
            self.run(i + 1, Some(j), chunks + usize::from(!extends));
            self.used[j] = false;
        }
        let w = self.word_of[i];
        if self.skips[w] > 0 {
            self.skips[w] -= 1;
            self.run(i + 1, None, chunks);
            self.skips[w] += 1;
        }
    }
}

/// Exact-match METEOR: a one-to-one alignment with the most matches and,
/// among those, the fewest chunks.
pub fn meteor_em<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut ids: HashMap<&T, usize> = HashMap::new();
    for t in candidate.iter().chain(reference) {
        let n = ids.len();
        ids.entry(t).or_insert(n);
    }
    let mut cand_count = vec![0usize; ids.len()];
    let mut ref_count = vec![0usize; ids.len()];
    let word_of: Vec<usize> = candidate.iter().map(|t| ids[t]).collect();
    for &w in &word_of {
        cand_count[w] += 1;
    }
    let mut positions = vec![Vec::new(); ids.len()];
    for (j, t) in reference.iter().enumerate() {
        ref_count[ids[t]] += 1;
        positions[ids[t]].push(j);
    }
    let matches: usize = cand_count.iter().zip(&ref_count).map(|(&c, &r)| c.min(r)).sum();
    if matches == 0 {
        return 0.0;
    }
    let mut search = ChunkSearch {
        options: word_of.iter().map(|&w| positions[w].clone()).collect(),
        skips: cand_count.iter().zip(&ref_count).map(|(&c, &r)| c.saturating_sub(r)).collect(),
        word_of: &word_of,
        used: vec![false; reference.len()],
        best: usize::MAX,
        nodes: 0,
    };
    search.run(0, None, 0);
    let chunks = search.best as f64;
    let m = matches as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks / m).powi(3);
    f_mean * (1.0 - penalty)
}

/// Per-report means over a set of (candidate, reference) pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NlgScores {
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
}

impl NlgScores {
    pub fn compute<S: AsRef<str>>(pairs: &[(S, S)]) -> Self {
        let mut s = NlgScores::default();
        if pairs.is_empty() {
            return s;
        }
        for (c, r) in pairs {
            let (c, r) = (words(c.as_ref()), words(r.as_ref()));
            for n in 1..=4 {
                s.bleu[n - 1] += bleu_n(&c, &r, n);
            }
            s.meteor += meteor_em(&c, &r);
            s.rouge_l += rouge_l(&c, &r);
        }
        let k = pairs.len() as f64;
        s.bleu.iter_mut().for_each(|b| *b /= k);
        s.meteor /= k;
        s.rouge_l /= k;
        s
    }
}
