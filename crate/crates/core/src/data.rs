//! Caption datasets: a JSON manifest plus a binary feature store.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! b"FEAT" | u32 version = 1 | u32 count | u32 dim | count * dim f32, row-major
//! ```
//!
//! The manifest names the feature file relative to its own directory and lists
//! the ordinary vocabulary words (ids 3..V) plus one entry per example whose
//! tokens exclude the start/stop markers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{SeededRng, Vector};
use crate::vocab::{build_vocab, encode_caption, Vocabulary, START, STOP};

pub const FEATURE_MAGIC: [u8; 4] = *b"FEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

/// One image paired with one encoded caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionExample {
    pub feature_id: usize,
    pub token_ids: Vec<usize>,
}

impl CaptionExample {
    pub fn new(feature_id: usize, token_ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        validate_caption(&token_ids, vocab_size)?;
        Ok(CaptionExample {
            feature_id,
            token_ids,
        })
    }

    /// Number of predicted tokens (everything after START).
    pub fn num_targets(&self) -> usize {
        self.token_ids.len() - 1
    }
}

pub(crate) fn validate_caption(ids: &[usize], vocab_size: usize) -> Result<()> {
    if ids.len() < 2 || ids[0] != START || ids[ids.len() - 1] != STOP {
        return Err(Error::Format(format!(
            "caption {ids:?} must start with START and end with STOP"
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::IdOutOfRange(format!(
            "token id {bad} >= vocabulary size {vocab_size}"
        )));
    }
    if ids[1..ids.len() - 1].iter().any(|&id| id == START || id == STOP) {
        return Err(Error::Format(format!(
            "caption {ids:?} has an interior start/stop marker"
        )));
    }
    Ok(())
}

/// Precomputed image feature rows, stored as `f32` exactly as on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    count: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(count >= 1 && dim >= 1, "feature store needs count >= 1 and dim >= 1");
        if data.len() != count * dim {
            return Err(Error::DimMismatch(format!(
                "{} feature values for {count} rows of dim {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("feature value {i} is not finite")));
        }
        Ok(FeatureStore { count, dim, data })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw_row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row(&self, i: usize) -> Vector {
        Vector::from_raw(self.raw_row(i).iter().map(|&v| v as f64).collect())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 {
            return Err(Error::Format(format!(
                "{}: feature file shorter than its header",
                path.display()
            )));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: FEATURE_MAGIC,
                found: magic,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version,
            });
        }
        let count = word(8) as usize;
        let dim = word(12) as usize;
        let payload = &bytes[16..];
        if payload.len() != count * dim * 4 {
            return Err(Error::DimMismatch(format!(
                "{}: header says {count}x{dim} floats but payload has {} bytes",
                path.display(),
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureStore::new(count, dim, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + self.data.len() * 4);
        bytes.extend_from_slice(&FEATURE_MAGIC);
        bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.count as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub features: FeatureStore,
    pub examples: Vec<CaptionExample>,
}

impl Dataset {
    pub fn new(vocab: Vocabulary, features: FeatureStore, examples: Vec<CaptionExample>) -> Result<Self> {
        for ex in &examples {
            validate_caption(&ex.token_ids, vocab.len())?;
            if ex.feature_id >= features.len() {
                return Err(Error::IdOutOfRange(format!(
                    "feature_id {} >= feature count {}",
                    ex.feature_id,
                    features.len()
                )));
            }
        }
        Ok(Dataset {
            vocab,
            features,
            examples,
        })
    }

    /// Reference captions (as words) grouped by feature id, ascending.
    pub fn references(&self) -> Vec<(usize, Vec<Vec<String>>)> {
        let mut grouped: std::collections::BTreeMap<usize, Vec<Vec<String>>> = Default::default();
        for ex in &self.examples {
            grouped
                .entry(ex.feature_id)
                .or_default()
                .push(self.vocab.decode(&ex.token_ids));
        }
        grouped.into_iter().collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    feature_file: String,
    vocab: ManifestVocab,
    examples: Vec<ManifestExample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestVocab {
    words: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestExample {
    feature_id: usize,
    tokens: Vec<String>,
}

fn sibling(manifest_path: &Path, name: &str) -> PathBuf {
    manifest_path
        .parent()
        .map(|dir| dir.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            path: manifest_path.into(),
            version: manifest.version,
        });
    }
    let vocab = Vocabulary::from_words(manifest.vocab.words)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let features = FeatureStore::read(&sibling(manifest_path, &manifest.feature_file))?;
    let examples = manifest
        .examples
        .into_iter()
        .map(|ex| CaptionExample {
            feature_id: ex.feature_id,
            token_ids: encode_caption(&vocab, &ex.tokens),
        })
        .collect();
    Dataset::new(vocab, features, examples)
}

/// Writes `manifest_path` and a feature file named `feature_file` next to it.
pub fn save_dataset(dataset: &Dataset, manifest_path: &Path, feature_file: &str) -> Result<()> {
    dataset.features.write(&sibling(manifest_path, feature_file))?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        feature_file: feature_file.to_string(),
        vocab: ManifestVocab {
            words: dataset.vocab.ordinary_words().to_vec(),
        },
        examples: dataset
            .examples
            .iter()
            .map(|ex| ManifestExample {
                feature_id: ex.feature_id,
                tokens: dataset.vocab.decode(&ex.token_ids),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCategory {
    pub name: String,
    pub words: Vec<String>,
}

/// Compositional toy corpus: every caption is `prefix` followed by one word per
/// category, and every feature vector carries one block per category in which
/// the chosen word's slot is set to `signal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub prefix: Vec<String>,
    pub categories: Vec<SynthCategory>,
    pub examples: usize,
    pub signal: f64,
    pub noise_stddev: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let cat = |name: &str, words: &[&str]| SynthCategory {
            name: name.into(),
            words: words.iter().map(|w| w.to_string()).collect(),
        };
        SynthSpec {
            prefix: vec!["a".into()],
            categories: vec![
                cat("color", &["red", "blue", "green", "yellow"]),
                cat("object", &["dog", "cat", "bear", "horse"]),
                cat("action", &["sitting", "standing"]),
            ],
            examples: 32,
            signal: 1.0,
            noise_stddev: 0.1,
            seed: 17,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.categories.is_empty(), "synth spec needs at least one category");
        ensure!(self.examples >= 1, "synth spec needs at least one example");
        ensure!(
            self.noise_stddev >= 0.0 && self.noise_stddev.is_finite(),
            "noise_stddev must be finite and >= 0"
        );
        ensure!(self.signal.is_finite(), "signal must be finite");
        let mut seen = std::collections::HashSet::new();
        for w in &self.prefix {
            ensure!(seen.insert(w.as_str()), "duplicate template word {w:?}");
        }
        for cat in &self.categories {
            ensure!(!cat.words.is_empty(), "category {:?} has no words", cat.name);
            for w in &cat.words {
                ensure!(seen.insert(w.as_str()), "duplicate template word {w:?}");
            }
        }
        for w in seen {
            ensure!(
                crate::vocab::tokenize(w) == [w],
                "template word {w:?} is not a single lowercase token"
            );
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.categories.iter().map(|c| c.words.len()).sum()
    }

    /// Start offset of each category's feature block.
    pub fn block_offsets(&self) -> Vec<usize> {
        self.categories
            .iter()
            .scan(0, |off, c| {
                let start = *off;
                *off += c.words.len();
                Some(start)
            })
            .collect()
    }
}

/// Example `i` takes the mixed-radix digits of `i` (first category fastest) as
/// its word choices, so consecutive examples cycle through every combination.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.feature_dim();
    let offsets = spec.block_offsets();
    let mut rng = SeededRng::new(spec.seed);
    let mut features = Vec::with_capacity(spec.examples * dim);
    let mut captions = Vec::with_capacity(spec.examples);
    for i in 0..spec.examples {
        let mut rest = i;
        let mut row = vec![0.0f64; dim];
        let mut caption = spec.prefix.clone();
        for (cat, &off) in spec.categories.iter().zip(&offsets) {
            let choice = rest % cat.words.len();
            rest /= cat.words.len();
            row[off + choice] = spec.signal;
            caption.push(cat.words[choice].clone());
        }
        for v in row.iter_mut() {
            *v += spec.noise_stddev * rng.standard_normal();
        }
        features.extend(row.iter().map(|&v| v as f32));
        captions.push(caption);
    }
    let vocab = build_vocab(&captions, 1)?;
    let examples = captions
        .iter()
        .enumerate()
        .map(|(i, c)| CaptionExample {
            feature_id: i,
            token_ids: encode_caption(&vocab, c),
        })
        .collect();
    Dataset::new(vocab, FeatureStore::new(spec.examples, dim, features)?, examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            prefix: vec!["a".into()],
            categories: vec![
                SynthCategory { name: "color".into(), words: vec!["red".into()] },
                SynthCategory { name: "object".into(), words: vec!["dog".into()] },
                SynthCategory { name: "action".into(), words: vec!["sitting".into()] },
            ],
            examples: 1,
            signal: 1.0,
            noise_stddev: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn degenerate_spec_gives_one_fixed_pair() {
        let d = synth_dataset(&tiny_spec()).unwrap();
        assert_eq!(d.examples.len(), 1);
        assert_eq!(d.features.raw_row(0), &[1.0f32, 1.0, 1.0]);
        assert_eq!(d.vocab.decode(&d.examples[0].token_ids), ["a", "red", "dog", "sitting"]);
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec::default();
        assert_eq!(synth_dataset(&spec).unwrap(), synth_dataset(&spec).unwrap());
        let other = SynthSpec { seed: spec.seed + 1, ..spec.clone() };
        assert_ne!(synth_dataset(&spec).unwrap().features, synth_dataset(&other).unwrap().features);
    }

    #[test]
    fn captions_follow_template_grammar() {
        let spec = SynthSpec {
            categories: vec![
                SynthCategory { name: "color".into(), words: vec!["red".into(), "blue".into()] },
                SynthCategory { name: "object".into(), words: vec!["dog".into(), "cat".into()] },
                SynthCategory { name: "action".into(), words: vec!["sitting".into()] },
            ],
            examples: 32,
            ..SynthSpec::default()
        };
        let d = synth_dataset(&spec).unwrap();
        let grammar = regex::Regex::new(r"^a (red|blue) (dog|cat) sitting$").unwrap();
        assert_eq!(d.examples.len(), 32);
        for ex in &d.examples {
            let text = d.vocab.decode(&ex.token_ids).join(" ");
            assert!(grammar.is_match(&text), "{text}");
        }
    }

    #[test]
    fn feature_blocks_carry_the_caption_words() {
        let spec = SynthSpec { noise_stddev: 0.0, ..SynthSpec::default() };
        let d = synth_dataset(&spec).unwrap();
        let offsets = spec.block_offsets();
        for ex in &d.examples {
            let words = d.vocab.decode(&ex.token_ids);
            let row = d.features.raw_row(ex.feature_id);
            for (c, cat) in spec.categories.iter().enumerate() {
                let j = cat.words.iter().position(|w| *w == words[1 + c]).unwrap();
                assert_eq!(row[offsets[c] + j], 1.0);
                assert_eq!(row[offsets[c]..offsets[c] + cat.words.len()].iter().sum::<f32>(), 1.0);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = tiny_spec();
        s.examples = 0;
        assert!(synth_dataset(&s).is_err());
        let mut s = tiny_spec();
        s.categories[1].words = vec!["red".into()];
        assert!(synth_dataset(&s).is_err());
        let mut s = tiny_spec();
        s.noise_stddev = -1.0;
        assert!(synth_dataset(&s).is_err());
        let mut s = tiny_spec();
        s.categories[0].words.clear();
        assert!(synth_dataset(&s).is_err());
    }

    #[test]
    fn caption_validation() {
        assert!(CaptionExample::new(0, vec![0, 5, 1], 6).is_ok());
        assert!(matches!(CaptionExample::new(0, vec![0, 6, 1], 6), Err(Error::IdOutOfRange(_))));
        assert!(CaptionExample::new(0, vec![0, 0, 1], 6).is_err());
        assert!(CaptionExample::new(0, vec![0], 6).is_err());
        assert!(CaptionExample::new(0, vec![3, 1], 6).is_err());
    }
}
