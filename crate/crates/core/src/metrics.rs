//! Caption metrics: CIDEr-D (the self-critical reward and primary score)
//! and BLEU-n for reporting.
//!
//! CIDEr-D here follows the reference definition: tf-idf n-gram vectors for
//! n = 1..4, candidate counts clipped to reference counts, cosine similarity
//! scaled by a gaussian length penalty with σ = 6, averaged over references
//! and over n, times 10.

use std::collections::HashMap;

use crate::data::TokenSequence;
use crate::error::{Error, Result};

pub const CIDER_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

type Gram = Vec<u32>;

fn ngram_counts(tokens: &[u32]) -> Vec<HashMap<Gram, usize>> {
    (1..=CIDER_N)
        .map(|n| {
            let mut counts: HashMap<Gram, usize> = HashMap::new();
            if tokens.len() >= n {
                for w in tokens.windows(n) {
                    *counts.entry(w.to_vec()).or_insert(0) += 1;
                }
            }
            counts
        })
        .collect()
}

/// Document frequencies over a reference corpus plus its size; immutable
/// after build.
#[derive(Debug, Clone)]
pub struct NGramStats {
    /// df[n-1][gram] = number of images whose reference set contains gram.
    df: Vec<HashMap<Gram, u32>>,
    corpus_size: usize,
}

impl NGramStats {
    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn doc_freq(&self, gram: &[u32]) -> u32 {
        let n = gram.len();
        if n == 0 || n > CIDER_N {
            return 0;
        }
        self.df[n - 1].get(gram).copied().unwrap_or(0)
    }

    /// idf(g) = log(corpus_size / max(1, df(g))).
    pub fn idf(&self, gram: &[u32]) -> f64 {
        (self.corpus_size as f64).ln() - f64::from(self.doc_freq(gram).max(1)).ln()
    }
}

/// Build document frequencies from per-image reference sets (tokenized;
/// content tokens only).
pub fn build_idf(reference_corpus: &[Vec<TokenSequence>]) -> Result<NGramStats> {
    if reference_corpus.is_empty() {
        return Err(Error::contract("build_idf: empty reference corpus".to_string()));
    }
    let mut df: Vec<HashMap<Gram, u32>> = vec![HashMap::new(); CIDER_N];
    for refs in reference_corpus {
        let mut seen: Vec<HashMap<Gram, ()>> = vec![HashMap::new(); CIDER_N];
        for r in refs {
            for (n_ix, counts) in ngram_counts(r.content()).into_iter().enumerate() {
                for gram in counts.into_keys() {
                    seen[n_ix].entry(gram).or_insert(());
                }
            }
        }
        for (n_ix, grams) in seen.into_iter().enumerate() {
            for (gram, ()) in grams {
                *df[n_ix].entry(gram).or_insert(0) += 1;
            }
        }
    }
    Ok(NGramStats { df, corpus_size: reference_corpus.len() })
}

struct TfIdf {
    /// vec[n-1][gram] = count(gram) · idf(gram).
    vecs: Vec<HashMap<Gram, f64>>,
    norms: [f64; CIDER_N],
    len: usize,
}

fn tfidf(tokens: &[u32], stats: &NGramStats) -> TfIdf {
    let mut vecs = Vec::with_capacity(CIDER_N);
    let mut norms = [0.0; CIDER_N];
    for (n_ix, counts) in ngram_counts(tokens).into_iter().enumerate() {
        let mut vec = HashMap::with_capacity(counts.len());
        for (gram, count) in counts {
            let w = count as f64 * stats.idf(&gram);
            norms[n_ix] += w * w;
            vec.insert(gram, w);
        }
        vecs.push(vec);
    }
    for n in norms.iter_mut() {
        *n = n.sqrt();
    }
    TfIdf { vecs, norms, len: tokens.len() }
}

/// CIDEr-D of one candidate against its reference set. Empty candidates
/// score 0.
pub fn cider_d(candidate: &TokenSequence, refs: &[TokenSequence], stats: &NGramStats) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let hyp = tfidf(candidate.content(), stats);
    let mut per_n = [0.0; CIDER_N];
    for r in refs {
        let rv = tfidf(r.content(), stats);
        let delta = hyp.len as f64 - rv.len as f64;
        let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        for n_ix in 0..CIDER_N {
            if hyp.norms[n_ix] == 0.0 || rv.norms[n_ix] == 0.0 {
                continue;
            }
            let mut sim = 0.0;
            for (gram, &hw) in &hyp.vecs[n_ix] {
                if let Some(&rw) = rv.vecs[n_ix].get(gram) {
                    sim += hw.min(rw) * rw;
                }
            }
            per_n[n_ix] += penalty * sim / (hyp.norms[n_ix] * rv.norms[n_ix]);
        }
    }
    let refs_count = refs.len() as f64;
    10.0 * per_n.iter().map(|v| v / refs_count).sum::<f64>() / CIDER_N as f64
}

/// Mean CIDEr-D over a split.
pub fn corpus_cider_d(
    candidates: &[TokenSequence],
    refs: &[Vec<TokenSequence>],
    stats: &NGramStats,
) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    candidates
        .iter()
        .zip(refs)
        .map(|(c, r)| cider_d(c, r, stats))
        .sum::<f64>()
        / candidates.len() as f64
}

fn closest_ref_len(cand_len: usize, refs: &[TokenSequence]) -> usize {
    let mut best = 0usize;
    let mut best_diff = usize::MAX;
    for r in refs {
        let len = r.content().len();
        let diff = len.abs_diff(cand_len);
        if diff < best_diff || (diff == best_diff && len < best) {
            best = len;
            best_diff = diff;
        }
    }
    best
}

/// Clipped k-gram matches of a candidate against the max reference count,
/// plus the candidate total.
fn clipped_matches(cand: &[u32], refs: &[TokenSequence], k: usize) -> (usize, usize) {
    if cand.len() < k {
        return (0, 0);
    }
    let mut cand_counts: HashMap<Gram, usize> = HashMap::new();
    for w in cand.windows(k) {
        *cand_counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    let mut max_ref: HashMap<Gram, usize> = HashMap::new();
    for r in refs {
        let content = r.content();
        if content.len() < k {
            continue;
        }
        let mut counts: HashMap<Gram, usize> = HashMap::new();
        for w in content.windows(k) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
        for (gram, c) in counts {
            let slot = max_ref.entry(gram).or_insert(0);
            *slot = (*slot).max(c);
        }
    }
    let matched = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len() + 1 - k)
}

/// Sentence BLEU-n: clipped-precision geometric mean over k = 1..n with the
/// brevity penalty against the closest reference length.
pub fn bleu_n(candidate: &TokenSequence, refs: &[TokenSequence], n: usize) -> Result<f64> {
    if n == 0 || n > 4 {
        return Err(Error::config(format!("bleu_n: order {n} out of range 1..=4")));
    }
    if refs.is_empty() {
        return Ok(0.0);
    }
    let cand = candidate.content();
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (matched, total) = clipped_matches(cand, refs, k);
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let r = closest_ref_len(cand.len(), refs) as f64;
    let c = cand.len() as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Corpus BLEU-n: counts aggregated over all candidates before combining.
pub fn corpus_bleu_n(
    candidates: &[TokenSequence],
    refs: &[Vec<TokenSequence>],
    n: usize,
) -> Result<f64> {
    if n == 0 || n > 4 {
        return Err(Error::config(format!("corpus_bleu_n: order {n} out of range 1..=4")));
    }
    let mut matched = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, r) in candidates.iter().zip(refs) {
        let content = cand.content();
        cand_len += content.len();
        ref_len += closest_ref_len(content.len(), r);
        for k in 1..=n {
            let (m, t) = clipped_matches(content, r, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if matched[k] == 0 || totals[k] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[k] as f64 / totals[k] as f64).ln();
    }
    let bp = if cand_len < ref_len && cand_len > 0 {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else if cand_len == 0 {
        0.0
    } else {
        1.0
    };
    Ok(bp * (log_sum / n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec())
    }

    fn image(refs: &[&[u32]]) -> Vec<TokenSequence> {
        refs.iter().map(|r| seq(r)).collect()
    }

    #[test]
    fn idf_is_zero_on_single_image_corpus() {
        let corpus = vec![image(&[&[5, 6, 7]])];
        let stats = build_idf(&corpus).unwrap();
        assert_eq!(stats.corpus_size(), 1);
        assert_eq!(stats.idf(&[5]), 0.0);
        assert_eq!(stats.idf(&[5, 6]), 0.0);
        // Unseen grams also get log(1) = 0 here.
        assert_eq!(stats.idf(&[9]), 0.0);
    }

    #[test]
    fn idf_log2_when_gram_in_one_of_two_images() {
        let corpus = vec![image(&[&[5, 6]]), image(&[&[7, 8]])];
        let stats = build_idf(&corpus).unwrap();
        assert!((stats.idf(&[5]) - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(stats.doc_freq(&[5]), 1);
    }

    #[test]
    fn idf_three_image_corpus_matches_hand_enumeration() {
        // Images: {5 6, 6 7}, {6 8}, {5 6}.
        // df(5)=2, df(6)=3, df(7)=1, df(8)=1, df(5 6)=2, df(6 7)=1, df(6 8)=1.
        let corpus = vec![
            image(&[&[5, 6], &[6, 7]]),
            image(&[&[6, 8]]),
            image(&[&[5, 6]]),
        ];
        let stats = build_idf(&corpus).unwrap();
        let ln3 = 3.0f64.ln();
        let hand: BTreeMap<Vec<u32>, f64> = [
            (vec![5], ln3 - 2.0f64.ln()),
            (vec![6], ln3 - 3.0f64.ln()),
            (vec![7], ln3),
            (vec![8], ln3),
            (vec![5, 6], ln3 - 2.0f64.ln()),
            (vec![6, 7], ln3),
            (vec![6, 8], ln3),
        ]
        .into_iter()
        .collect();
        for (gram, want) in hand {
            assert!((stats.idf(&gram) - want).abs() < 1e-12, "{gram:?}");
        }
        assert!(stats.doc_freq(&[6]) as usize <= stats.corpus_size());
    }

    #[test]
    fn empty_corpus_is_contract_error() {
        assert!(matches!(build_idf(&[]).unwrap_err(), Error::Contract(_)));
    }

    /// Independent loop-level transcription of the CIDEr-D definition, kept
    /// deliberately naive (BTreeMaps, explicit loops, no shared helpers).
    pub(super) fn cider_oracle(cand: &[u32], refs: &[Vec<u32>], corpus: &[Vec<Vec<u32>>]) -> f64 {
        let n_images = corpus.len() as f64;
        let grams = |toks: &[u32], n: usize| -> BTreeMap<Vec<u32>, f64> {
            let mut m = BTreeMap::new();
            if toks.len() >= n {
                for w in toks.windows(n) {
                    *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
                }
            }
            m
        };
        let mut df: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for image in corpus {
            let mut seen: BTreeMap<Vec<u32>, bool> = BTreeMap::new();
            for r in image {
                for n in 1..=4 {
                    for g in grams(r, n).into_keys() {
                        seen.insert(g, true);
                    }
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        let idf = |g: &Vec<u32>| n_images.ln() - df.get(g).copied().unwrap_or(0.0).max(1.0).ln();

        let mut total = 0.0;
        for n in 1..=4 {
            let hyp = grams(cand, n);
            let hyp_vec: BTreeMap<Vec<u32>, f64> =
                hyp.iter().map(|(g, c)| (g.clone(), c * idf(g))).collect();
            let hyp_norm = hyp_vec.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut over_refs = 0.0;
            for r in refs {
                let rf = grams(r, n);
                let ref_vec: BTreeMap<Vec<u32>, f64> =
                    rf.iter().map(|(g, c)| (g.clone(), c * idf(g))).collect();
                let ref_norm = ref_vec.values().map(|v| v * v).sum::<f64>().sqrt();
                let mut sim = 0.0;
                for (g, hv) in &hyp_vec {
                    if let Some(rv) = ref_vec.get(g) {
                        sim += hv.min(*rv) * rv;
                    }
                }
                let delta = cand.len() as f64 - r.len() as f64;
                let pen = (-(delta * delta) / (2.0 * 36.0)).exp();
                if hyp_norm > 0.0 && ref_norm > 0.0 {
                    over_refs += pen * sim / (hyp_norm * ref_norm);
                }
            }
            total += 10.0 * over_refs / refs.len() as f64;
        }
        total / 4.0
    }

    #[test]
    fn cider_matches_transcription_oracle() {
        let corpus_tok: Vec<Vec<Vec<u32>>> = vec![
            vec![vec![5, 6, 7, 8], vec![5, 6, 9]],
            vec![vec![7, 8, 9, 9, 5]],
            vec![vec![6, 6, 7], vec![8, 9]],
        ];
        let corpus: Vec<Vec<TokenSequence>> = corpus_tok
            .iter()
            .map(|imgs| imgs.iter().map(|r| seq(r)).collect())
            .collect();
        let stats = build_idf(&corpus).unwrap();

        for cand_tok in [vec![5u32, 6, 7, 8], vec![5, 6, 9], vec![9, 9], vec![5, 6, 7, 5, 6]] {
            for (img_ix, refs) in corpus_tok.iter().enumerate() {
                let got = cider_d(&seq(&cand_tok), &corpus[img_ix], &stats);
                let want = cider_oracle(&cand_tok, refs, &corpus_tok);
                assert!(
                    (got - want).abs() < 1e-6,
                    "cand {cand_tok:?} image {img_ix}: {got} vs {want}"
                );
                assert!((0.0..=10.0).contains(&got));
            }
        }
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let corpus = vec![image(&[&[5, 6, 7]]), image(&[&[8, 9]])];
        let stats = build_idf(&corpus).unwrap();
        assert_eq!(cider_d(&seq(&[10, 11, 12]), &corpus[0], &stats), 0.0);
        assert_eq!(cider_d(&seq(&[]), &corpus[0], &stats), 0.0);
    }

    #[test]
    fn cider_is_reference_order_invariant() {
        let corpus = vec![image(&[&[5, 6, 7], &[6, 7, 8], &[5, 8]]), image(&[&[9, 5]])];
        let stats = build_idf(&corpus).unwrap();
        let cand = seq(&[5, 6, 7, 8]);
        let fwd = cider_d(&cand, &corpus[0], &stats);
        let mut reversed = corpus[0].clone();
        reversed.reverse();
        let rev = cider_d(&cand, &reversed, &stats);
        assert_eq!(fwd, rev);
    }

    #[test]
    fn reference_is_corpus_maximal_among_same_length_candidates() {
        // Exhaustive enumeration over a 5-word vocabulary, length ≤ 4.
        let corpus = vec![
            image(&[&[5, 6, 7], &[5, 6]]),
            image(&[&[7, 8, 9]]),
            image(&[&[6, 9]]),
        ];
        let stats = build_idf(&corpus).unwrap();
        let vocab = [5u32, 6, 7, 8, 9];
        for (img_ix, refs) in corpus.iter().enumerate() {
            for r in refs {
                let len = r.content().len();
                let best = cider_d(r, refs, &stats);
                let mut count = 0usize;
                let mut stack = vec![Vec::new()];
                while let Some(prefix) = stack.pop() {
                    if prefix.len() == len {
                        count += 1;
                        let score = cider_d(&seq(&prefix), refs, &stats);
                        assert!(
                            score <= best + 1e-12,
                            "image {img_ix}: candidate {prefix:?} beats its reference"
                        );
                        continue;
                    }
                    for &w in &vocab {
                        let mut next = prefix.clone();
                        next.push(w);
                        stack.push(next);
                    }
                }
                assert_eq!(count, vocab.len().pow(len as u32));
            }
        }
    }

    #[test]
    fn bleu_identical_is_one_and_disjoint_is_zero() {
        let refs = image(&[&[5, 6, 7, 8]]);
        assert!((bleu_n(&seq(&[5, 6, 7, 8]), &refs, 4).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu_n(&seq(&[9, 10]), &refs, 1).unwrap(), 0.0);
    }

    #[test]
    fn bleu_matches_hand_computation() {
        // Candidate [5 6 7] vs ref [5 6 7 8 5 9]: p1 = p2 = p3 = 1,
        // BP = exp(1 − 6/3) = e⁻¹.
        let refs = image(&[&[5, 6, 7, 8, 5, 9]]);
        let got = bleu_n(&seq(&[5, 6, 7]), &refs, 3).unwrap();
        assert!((got - (-1.0f64).exp()).abs() < 1e-12);

        // Clipping: candidate [5 5 5 5] vs ref [5 5]: p1 = 2/4, BP = 1.
        let refs = image(&[&[5, 5]]);
        let got = bleu_n(&seq(&[5, 5, 5, 5]), &refs, 1).unwrap();
        assert!((got - 0.5).abs() < 1e-12);

        // Two refs, closest length wins the brevity penalty.
        let refs = image(&[&[5, 6], &[5, 6, 7, 8, 9, 10]]);
        let got = bleu_n(&seq(&[5, 6]), &refs, 2).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_inputs_strip_markers() {
        use crate::data::{EOS, SOS};
        let corpus = vec![image(&[&[5, 6]])];
        let stats = build_idf(&corpus).unwrap();
        let with_markers = TokenSequence::new(vec![SOS, 5, 6, EOS]);
        let bare = seq(&[5, 6]);
        assert_eq!(
            cider_d(&with_markers, &corpus[0], &stats),
            cider_d(&bare, &corpus[0], &stats)
        );
    }
}
