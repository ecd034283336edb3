//! Corpus BLEU and CIDEr-D.
//!
//! BLEU@N = BP · exp(Σ_{n≤N} ln p_n / N), where p_n is the clipped n-gram
//! precision summed over the corpus and BP = exp(1 − r/c) when the total
//! candidate length c is below the total closest-reference length r (ties go to
//! the shorter reference). A p_n with no candidate n-grams counts as 0.
//!
//! CIDEr-D follows the reference scorer used for COCO captions:
//! * n-gram counts for n = 1..4, weighted by idf = ln(#images) − ln(max(1, df)),
//!   where df counts the images whose references contain the n-gram
//! * per n: Σ_g min(h_g, r_g)·r_g / (‖h‖‖r‖), times exp(−δ²/2σ²) with σ = 6
//!   and δ the difference in bigram counts
//! * mean over n, mean over references, times 10; corpus score is the mean
//!
//! When idf is zero on every n-gram of both vectors (a corpus of one image, or
//! n-grams shared by every image) the per-n term falls back to raw counts so
//! that an exact match still scores 10.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const BLEU_MAX_N: usize = 4;
pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<()> {
    ensure!(!candidates.is_empty(), "empty candidate set");
    ensure!(
        candidates.len() == references.len(),
        "{} candidates but {} reference sets",
        candidates.len(),
        references.len()
    );
    ensure!(
        references.iter().all(|r| !r.is_empty()),
        "every candidate needs at least one reference"
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct BleuStats {
    matches: [usize; BLEU_MAX_N],
    totals: [usize; BLEU_MAX_N],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, cand: &[String], refs: &[Vec<String>]) {
        for n in 1..=BLEU_MAX_N {
            let c = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &c {
                self.matches[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                self.totals[n - 1] += k;
            }
        }
        self.cand_len += cand.len();
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("at least one reference");
        self.ref_len += closest;
    }

    fn scores(&self) -> [f64; BLEU_MAX_N] {
        let c = self.cand_len as f64;
        let r = self.ref_len as f64;
        let bp = if self.cand_len == 0 {
            0.0
        } else if c < r {
            (1.0 - r / c).exp()
        } else {
            1.0
        };
        let mut out = [0.0; BLEU_MAX_N];
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 0..BLEU_MAX_N {
            if self.matches[n] == 0 {
                zero = true;
            } else {
                log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
            }
            out[n] = if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() };
        }
        out
    }
}

/// Corpus BLEU@1..4.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<[f64; BLEU_MAX_N]> {
    check_corpus(candidates, references)?;
    let mut stats = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        stats.add(c, r);
    }
    Ok(stats.scores())
}

/// BLEU@1..4 of a single candidate against its references.
pub fn sentence_bleu(candidate: &[String], references: &[Vec<String>]) -> Result<[f64; BLEU_MAX_N]> {
    ensure!(!references.is_empty(), "a candidate needs at least one reference");
    let mut stats = BleuStats::default();
    stats.add(candidate, references);
    Ok(stats.scores())
}

struct TfIdf {
    /// Per n: n-gram → (raw count, tf-idf weight).
    grams: Vec<BTreeMap<Vec<String>, (f64, f64)>>,
    norm: [f64; CIDER_MAX_N],
    raw_norm: [f64; CIDER_MAX_N],
    bigrams: usize,
}

fn tfidf(tokens: &[String], df: &BTreeMap<Vec<String>, usize>, log_images: f64) -> TfIdf {
    let mut grams = Vec::with_capacity(CIDER_MAX_N);
    let mut norm = [0.0; CIDER_MAX_N];
    let mut raw_norm = [0.0; CIDER_MAX_N];
    for n in 1..=CIDER_MAX_N {
        let mut map = BTreeMap::new();
        for (g, k) in ngram_counts(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let tf = k as f64;
            let w = tf * (log_images - d.ln());
            norm[n - 1] += w * w;
            raw_norm[n - 1] += tf * tf;
            map.insert(g.to_vec(), (tf, w));
        }
        grams.push(map);
    }
    TfIdf {
        grams,
        norm: norm.map(f64::sqrt),
        raw_norm: raw_norm.map(f64::sqrt),
        bigrams: tokens.len().saturating_sub(1),
    }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> f64 {
    let delta = h.bigrams as f64 - r.bigrams as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_MAX_N {
        let raw = h.norm[n] == 0.0 && r.norm[n] == 0.0;
        let (hn, rn) = if raw { (h.raw_norm[n], r.raw_norm[n]) } else { (h.norm[n], r.norm[n]) };
        let mut val = 0.0;
        for (g, &(htf, hw)) in &h.grams[n] {
            if let Some(&(rtf, rw)) = r.grams[n].get(g) {
                val += if raw { htf.min(rtf) * rtf } else { hw.min(rw) * rw };
            }
        }
        if hn != 0.0 && rn != 0.0 {
            val /= hn * rn;
        }
        total += val * penalty;
    }
    total / CIDER_MAX_N as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderScores {
    pub mean: f64,
    pub per_example: Vec<f64>,
}

/// CIDEr-D of each candidate; document frequencies come from `references`.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<CiderScores> {
    check_corpus(candidates, references)?;
    let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for refs in references {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in refs {
            for n in 1..=CIDER_MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    let log_images = (references.len() as f64).ln();
    let per_example: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            let h = tfidf(c, &df, log_images);
            let sum: f64 = refs.iter().map(|r| cider_sim(&h, &tfidf(r, &df, log_images))).sum();
            10.0 * sum / refs.len() as f64
        })
        .collect();
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(CiderScores { mean, per_example })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub feature_id: usize,
    pub bleu: [f64; BLEU_MAX_N],
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: [f64; BLEU_MAX_N],
    /// CIDEr-D.
    pub cider: f64,
    pub per_example: Vec<ExampleScore>,
}

/// Scores `candidates[i]` for image `feature_ids[i]` against `references[i]`.
pub fn evaluate(
    feature_ids: &[usize],
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<MetricReport> {
    ensure!(
        feature_ids.len() == candidates.len(),
        "{} feature ids for {} candidates",
        feature_ids.len(),
        candidates.len()
    );
    let corpus_bleu = bleu(candidates, references)?;
    let ciders = cider(candidates, references)?;
    let per_example = feature_ids
        .iter()
        .zip(candidates.iter().zip(references))
        .zip(&ciders.per_example)
        .map(|((&fid, (c, r)), &cd)| {
            Ok(ExampleScore {
                feature_id: fid,
                bleu: sentence_bleu(c, r)?,
                cider: cd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        bleu: corpus_bleu,
        cider: ciders.mean,
        per_example,
    })
}
