//! Run configuration: defaults, then the JSON config file, then `--key value`
//! dot-path overrides, then the `--seed` / `--threads` flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use tcap_core::data::SynthSpec;
use tcap_core::decode::{DecodeConfig, DEFAULT_MAX_LENGTH};
use tcap_core::model::{GuidanceMode, GuidanceVariant, ModelDims};
use tcap_core::numerics::TransferKind;
use tcap_core::training::{GradCheckOptions, ModelConfig, TrainConfig};
use tcap_core::vocab::{START, STOP};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest read by train, generate and eval.
    pub dataset: Option<PathBuf>,
    /// Every artifact of a run is written here.
    pub output_dir: PathBuf,
    /// Checkpoint read by generate and analyze. Defaults to
    /// `<output_dir>/checkpoint.tcg`.
    pub checkpoint: Option<PathBuf>,
    /// Captions read by eval. Defaults to `<output_dir>/captions.jsonl`.
    pub captions: Option<PathBuf>,
    /// When set, replaces `train.seed`, `synth.seed` and `gradcheck.seed`.
    pub seed: Option<u64>,
    /// Worker threads for batch gradients and decoding.
    pub threads: usize,
    /// Guidance used by train. generate reads it from the checkpoint.
    pub mode: GuidanceMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeSettings,
    pub synth: SynthSpec,
    pub gradcheck: GradCheckSettings,
    pub analyze: AnalyzeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            captions: None,
            seed: None,
            threads: 1,
            mode: GuidanceMode::new(GuidanceVariant::Sentence, TransferKind::Tanh),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeSettings::default(),
            synth: SynthSpec::default(),
            gradcheck: GradCheckSettings::default(),
            analyze: AnalyzeSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    /// 1 decodes greedily.
    pub beam_size: usize,
    pub max_length: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            beam_size: 1,
            max_length: DEFAULT_MAX_LENGTH,
        }
    }
}

/// The finite-difference check runs on a random tiny model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub dims: ModelDims,
    pub stddev: f64,
    /// Seed of the random parameters.
    pub seed: u64,
    pub raw: Vec<f64>,
    pub caption: Vec<usize>,
    pub variants: Vec<GuidanceVariant>,
    pub transfers: Vec<TransferKind>,
    pub options: GradCheckOptions,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            dims: ModelDims {
                vocab: 9,
                embed: 5,
                hidden: 6,
                image: 7,
                raw: 4,
            },
            stddev: 0.5,
            seed: 0,
            raw: vec![0.8, -0.4, 1.1, 0.3],
            caption: vec![START, 5, 3, 5, 7, STOP],
            variants: vec![
                GuidanceVariant::TimeInvariant,
                GuidanceVariant::NGram { n: 1 },
                GuidanceVariant::NGram { n: 3 },
                GuidanceVariant::Sentence,
                GuidanceVariant::FullTensor,
            ],
            transfers: TransferKind::ALL.to_vec(),
            options: GradCheckOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSettings {
    /// Empty lists every ordinary vocabulary word.
    pub words: Vec<String>,
    pub k: usize,
}

impl Default for AnalyzeSettings {
    fn default() -> Self {
        AnalyzeSettings { words: Vec::new(), k: 6 }
    }
}

impl RunConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("checkpoint.tcg"))
    }

    pub fn captions_path(&self) -> PathBuf {
        self.captions.clone().unwrap_or_else(|| self.output_dir.join("captions.jsonl"))
    }

    pub fn dataset_path(&self) -> Result<&Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Usage("no dataset manifest given (set `dataset` or pass --dataset PATH)".into()))
    }

    pub fn decode_config(&self, mode: GuidanceMode) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.decode.beam_size,
            max_length: self.decode.max_length,
            mode,
        }
    }

    /// Pushes the shared seed and thread count into the sections that use them.
    fn resolve(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.synth.seed = seed;
            self.gradcheck.seed = seed;
            self.gradcheck.options.seed = seed;
        }
        self.train.threads = self.threads;
    }

    fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: tcap_core::Error| CliError::Config(e.to_string());
        if self.threads == 0 {
            return Err(CliError::Config("threads must be positive".into()));
        }
        self.train.validate().map_err(invalid)?;
        self.mode.validate().map_err(invalid)?;
        self.decode_config(self.mode).validate().map_err(invalid)?;
        self.synth.validate().map_err(invalid)?;
        self.gradcheck.dims.validate().map_err(invalid)?;
        Ok(())
    }
}

/// Splits `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| CliError::Usage(format!("expected `--key value`, got {arg:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let value = it.next().ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?;
                out.push((key.to_string(), value.clone()));
            }
        }
    }
    Ok(out)
}

/// Values are read as JSON when they parse, otherwise as plain strings.
fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("--{path}: {} is not a section", keys[..i].join("."))))?;
        let key = key.replace('-', "_");
        if i + 1 == keys.len() {
            obj.insert(key, value);
            return Ok(());
        }
        node = obj
            .get_mut(&key)
            .ok_or_else(|| CliError::Usage(format!("--{path}: unknown section {key:?}")))?;
    }
    unreachable!("split yields at least one key")
}

pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let base: RunConfig = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let mut config = if overrides.is_empty() {
        base
    } else {
        let mut tree = serde_json::to_value(&base).expect("config serializes");
        for (key, value) in overrides {
            set_path(&mut tree, key, value)?;
        }
        serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("bad override: {e}")))?
    };
    config.resolve();
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(args: &[&str]) -> Vec<String> {
        args.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
        let empty: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(empty, RunConfig::default());
    }

    #[test]
    fn overrides_apply_in_order() {
        let pairs = parse_overrides(&strings(&[
            "--train.lr_lm",
            "0.01",
            "--train.iterations=[1,2,3]",
            "--output-dir",
            "runs/a",
            "--mode.variant",
            "ngram",
            "--mode.n",
            "2",
            "--train.lr_lm",
            "0.02",
        ]))
        .unwrap();
        let cfg = load(None, &pairs).unwrap();
        assert_eq!(cfg.train.lr_lm, 0.02);
        assert_eq!(cfg.train.iterations, [1, 2, 3]);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/a"));
        assert_eq!(cfg.mode.variant, GuidanceVariant::NGram { n: 2 });
    }

    #[test]
    fn seed_reaches_every_section() {
        let cfg = load(None, &[("seed".into(), "9".into())]).unwrap();
        assert_eq!((cfg.train.seed, cfg.synth.seed, cfg.gradcheck.seed), (9, 9, 9));
        let cfg = load(None, &[]).unwrap();
        assert_eq!(cfg.train.seed, TrainConfig::default().seed);
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        assert!(matches!(parse_overrides(&strings(&["train.lr_lm", "1"])), Err(CliError::Usage(_))));
        assert!(matches!(parse_overrides(&strings(&["--train.lr_lm"])), Err(CliError::Usage(_))));
        let unknown = load(None, &[("train.learning_rate".into(), "1".into())]);
        assert!(matches!(unknown, Err(CliError::Usage(_))));
        let nested = load(None, &[("nope.lr".into(), "1".into())]);
        assert!(matches!(nested, Err(CliError::Usage(_))));
        assert!(matches!(load(None, &[("threads".into(), "0".into())]), Err(CliError::Config(_))));
    }
}
