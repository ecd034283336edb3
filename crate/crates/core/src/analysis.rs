//! Nearest neighbours among the text-conditional masks (columns of `W_c`).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;
use crate::vocab::{Vocabulary, RESERVED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub word_id: usize,
    pub distance: f64,
}

fn column_distance(cond: &Matrix, a: usize, b: usize) -> f64 {
    (0..cond.rows())
        .map(|r| {
            let d = cond.get(r, a) - cond.get(r, b);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn ranked(cond: &Matrix, word_id: usize, k: usize, candidates: impl Iterator<Item = usize>) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = candidates
        .filter(|&j| j != word_id)
        .map(|j| Neighbor {
            word_id: j,
            distance: column_distance(cond, word_id, j),
        })
        .collect();
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.word_id.cmp(&b.word_id)));
    all.truncate(k);
    all
}

/// The `k` columns closest to column `word_id` in Euclidean distance, nearest
/// first (ties by id). The word itself is excluded.
pub fn mask_nearest_neighbors(cond: &Matrix, word_id: usize, k: usize) -> Result<Vec<Neighbor>> {
    let v = cond.cols();
    ensure!(word_id < v, "word id {word_id} out of range for {v} mask columns");
    ensure!(k < v, "k = {k} must be below the vocabulary size {v}");
    Ok(ranked(cond, word_id, k, 0..v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordNeighbors {
    pub word: String,
    pub neighbors: Vec<(String, f64)>,
}

/// Neighbours of `word` among the ordinary vocabulary words.
pub fn nearest_words(cond: &Matrix, vocab: &Vocabulary, word: &str, k: usize) -> Result<WordNeighbors> {
    ensure!(cond.cols() == vocab.len(), "mask matrix has {} columns for {} ids", cond.cols(), vocab.len());
    if !vocab.contains(word) {
        return Err(Error::IdOutOfRange(format!("word {word:?} is not in the vocabulary")));
    }
    let id = vocab.lookup(word);
    let available = vocab.len() - RESERVED - 1;
    ensure!(k <= available, "k = {k} exceeds the {available} other vocabulary words");
    let neighbors = ranked(cond, id, k, RESERVED..vocab.len())
        .into_iter()
        .map(|n| (vocab.word(n.word_id).expect("id from vocab").to_string(), n.distance))
        .collect();
    Ok(WordNeighbors {
        word: word.to_string(),
        neighbors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCheck {
    pub word: String,
    pub category: String,
    /// Category peers in this word's top-k that also list this word.
    pub mutual_peers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub k: usize,
    pub words: Vec<CategoryCheck>,
    /// Share of category words with at least one mutual category peer.
    pub fraction: f64,
}

/// For each word of each category, the category peers that it and the peer
/// both rank among their `k` nearest ordinary words.
pub fn category_clustering(
    cond: &Matrix,
    vocab: &Vocabulary,
    categories: &[(String, Vec<String>)],
    k: usize,
) -> Result<ClusteringReport> {
    let mut near = std::collections::BTreeMap::new();
    for (_, members) in categories {
        for w in members {
            let list: Vec<String> = nearest_words(cond, vocab, w, k)?.neighbors.into_iter().map(|(n, _)| n).collect();
            near.insert(w.clone(), list);
        }
    }
    let mut words = Vec::new();
    for (name, members) in categories {
        for w in members {
            let mutual_peers = members
                .iter()
                .filter(|m| *m != w && near[w].contains(m) && near[*m].contains(w))
                .cloned()
                .collect();
            words.push(CategoryCheck {
                word: w.clone(),
                category: name.clone(),
                mutual_peers,
            });
        }
    }
    ensure!(!words.is_empty(), "no category words to check");
    let ok = words.iter().filter(|c| !c.mutual_peers.is_empty()).count();
    Ok(ClusteringReport {
        k,
        fraction: ok as f64 / words.len() as f64,
        words,
    })
}

/// Plain-text table: one row per word, neighbours with distances.
pub fn neighbor_table(rows: &[WordNeighbors]) -> String {
    let width = rows.iter().map(|r| r.word.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  neighbours (distance)\n", "word");
    for r in rows {
        let cells: Vec<String> = r.neighbors.iter().map(|(w, d)| format!("{w} ({d:.4})")).collect();
        out.push_str(&format!("{:<width$}  {}\n", r.word, cells.join(", ")));
    }
    out
}
