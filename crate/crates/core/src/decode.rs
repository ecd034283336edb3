//! Greedy and beam-search caption generation.
//!
//! Scores are summed log-probabilities with no length normalization. START is
//! never generated. Equal scores are ordered by the token sequence, smallest
//! first, which makes `beam_size = 1` reproduce greedy decoding exactly.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::model::{compute_guidance, embed_image, step, GuidanceMode, GuidanceVariant, History, ModelParams};
use crate::numerics::{log_softmax, Vector};
use crate::vocab::{START, STOP};

pub const DEFAULT_MAX_LENGTH: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Generated tokens, STOP included.
    pub max_length: usize,
    pub mode: GuidanceMode,
}

impl DecodeConfig {
    pub fn new(beam_size: usize, mode: GuidanceMode) -> Self {
        DecodeConfig {
            beam_size,
            max_length: DEFAULT_MAX_LENGTH,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.beam_size >= 1, "beam_size must be at least 1");
        ensure!(self.max_length >= 1, "max_length must be at least 1");
        self.mode.validate()
    }
}

/// A decoded caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Starts with START; ends with STOP when `finished`.
    pub token_ids: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone)]
struct BeamHypothesis {
    token_ids: Vec<usize>,
    logprob: f64,
    c: Vec<f64>,
    m: Vec<f64>,
}

/// Recurrent state plus the fixed parts of one decoding run.
struct Decoder<'a> {
    params: &'a ModelParams,
    image: Vec<f64>,
    mode: GuidanceMode,
}

impl<'a> Decoder<'a> {
    fn new(params: &'a ModelParams, raw: &Vector, mode: GuidanceMode) -> Result<Self> {
        mode.validate()?;
        if mode.variant == GuidanceVariant::FullTensor {
            ensure!(params.full_tensor.is_some(), "full-tensor guidance needs coupling tensor parameters");
        }
        let image = embed_image(params, raw)?.into_inner();
        Ok(Decoder { params, image, mode })
    }

    /// Feeds the last token of `tokens` and returns the next-token logprobs
    /// and the new state. Mirrors one step of the teacher-forced pass.
    fn advance(&self, tokens: &[usize], c: &[f64], m: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let p = self.params;
        let input = *tokens.last().expect("hypotheses start with START");
        let x = p.word_embed.column(input).into_inner();
        let hist = History::new(tokens, self.mode.variant, p.dims.vocab)?;
        let g = compute_guidance(p, &self.image, &hist, self.mode).g;
        let (c, m, _) = step(p, &x, c, m, &g);
        let mut logits = p.output_weight.matvec(&m);
        for (z, b) in logits.iter_mut().zip(p.output_bias.iter()) {
            *z += b;
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NumericDomain("non-finite logits while decoding".into()));
        }
        Ok((log_softmax(&logits), c, m))
    }

    fn root(&self) -> BeamHypothesis {
        let h = self.params.dims.hidden;
        BeamHypothesis {
            token_ids: vec![START],
            logprob: 0.0,
            c: vec![0.0; h],
            m: vec![0.0; h],
        }
    }
}

/// Highest-probability token other than START, lowest id on ties.
fn argmax_token(logprobs: &[f64]) -> usize {
    let mut best = usize::MAX;
    for (k, &lp) in logprobs.iter().enumerate() {
        if k == START {
            continue;
        }
        if best == usize::MAX || lp > logprobs[best] {
            best = k;
        }
    }
    best
}

pub fn greedy_decode(params: &ModelParams, raw: &Vector, config: &DecodeConfig) -> Result<Hypothesis> {
    config.validate()?;
    let dec = Decoder::new(params, raw, config.mode)?;
    let mut hyp = dec.root();
    for _ in 0..config.max_length {
        let (lp, c, m) = dec.advance(&hyp.token_ids, &hyp.c, &hyp.m)?;
        let k = argmax_token(&lp);
        hyp.token_ids.push(k);
        hyp.logprob += lp[k];
        hyp.c = c;
        hyp.m = m;
        if k == STOP {
            return Ok(Hypothesis {
                token_ids: hyp.token_ids,
                logprob: hyp.logprob,
                finished: true,
            });
        }
    }
    Ok(Hypothesis {
        token_ids: hyp.token_ids,
        logprob: hyp.logprob,
        finished: false,
    })
}

/// Higher score first, then the smaller token sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Returns every retired hypothesis, best first.
pub fn beam_search(params: &ModelParams, raw: &Vector, config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let dec = Decoder::new(params, raw, config.mode)?;
    let mut live = vec![dec.root()];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for _ in 0..config.max_length {
        if live.is_empty() {
            break;
        }
        let mut expanded = Vec::with_capacity(live.len());
        for hyp in &live {
            expanded.push(dec.advance(&hyp.token_ids, &hyp.c, &hyp.m)?);
        }
        // (parent, token, score)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (i, (lp, _, _)) in expanded.iter().enumerate() {
            for (k, &l) in lp.iter().enumerate() {
                if k != START {
                    cands.push((i, k, live[i].logprob + l));
                }
            }
        }
        let seq = |&(i, k, _): &(usize, usize, f64)| {
            let mut t = live[i].token_ids.clone();
            t.push(k);
            t
        };
        let mut keyed: Vec<(Vec<usize>, (usize, usize, f64))> = cands.iter().map(|c| (seq(c), *c)).collect();
        keyed.sort_by(|a, b| rank((a.1 .2, &a.0), (b.1 .2, &b.0)));
        keyed.truncate(config.beam_size);

        let mut next = Vec::with_capacity(keyed.len());
        for (tokens, (i, k, score)) in keyed {
            if k == STOP {
                pool.push(Hypothesis {
                    token_ids: tokens,
                    logprob: score,
                    finished: true,
                });
            } else {
                let (_, c, m) = &expanded[i];
                next.push(BeamHypothesis {
                    token_ids: tokens,
                    logprob: score,
                    c: c.clone(),
                    m: m.clone(),
                });
            }
        }
        live = next;
    }
    pool.extend(live.into_iter().map(|h| Hypothesis {
        token_ids: h.token_ids,
        logprob: h.logprob,
        finished: false,
    }));
    pool.sort_by(|a, b| rank((a.logprob, &a.token_ids), (b.logprob, &b.token_ids)));
    Ok(pool)
}

/// Best caption under `config`: greedy for beam size 1, else the top beam.
pub fn decode(params: &ModelParams, raw: &Vector, config: &DecodeConfig) -> Result<Hypothesis> {
    if config.beam_size == 1 {
        greedy_decode(params, raw, config)
    } else {
        let mut all = beam_search(params, raw, config)?;
        Ok(all.swap_remove(0))
    }
}

/// One line of decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedCaption {
    pub feature_id: usize,
    /// Words between START and STOP.
    pub tokens: Vec<String>,
    pub logprob: f64,
}

/// Decodes every distinct feature of `dataset`, in ascending feature id.
pub fn decode_dataset(params: &ModelParams, dataset: &Dataset, config: &DecodeConfig, parallel: bool) -> Result<Vec<DecodedCaption>> {
    ensure!(
        dataset.vocab.len() == params.dims.vocab,
        "dataset vocabulary has {} ids but the model has {}",
        dataset.vocab.len(),
        params.dims.vocab
    );
    let mut ids: Vec<usize> = dataset.examples.iter().map(|e| e.feature_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let one = |&fid: &usize| -> Result<DecodedCaption> {
        let hyp = decode(params, &dataset.features.row(fid), config)?;
        Ok(DecodedCaption {
            feature_id: fid,
            tokens: dataset.vocab.decode(&hyp.token_ids),
            logprob: hyp.logprob,
        })
    };
    if parallel {
        ids.par_iter().map(one).collect()
    } else {
        ids.iter().map(one).collect()
    }
}

pub fn write_jsonl(path: &Path, captions: &[DecodedCaption]) -> Result<()> {
    let mut out = Vec::new();
    for c in captions {
        serde_json::to_writer(&mut out, c).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DecodedCaption>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_sequence, ModelDims};
    use crate::numerics::{Matrix, TransferKind};
    use crate::vocab::UNK;

    fn mode() -> GuidanceMode {
        GuidanceMode::new(GuidanceVariant::Sentence, TransferKind::Tanh)
    }

    fn dims(vocab: usize) -> ModelDims {
        ModelDims { vocab, embed: 3, hidden: 4, image: 3, raw: 2 }
    }

    fn raw() -> Vector {
        Vector::new(vec![0.7, -0.3]).unwrap()
    }

    /// Output layer ignores the state: every step has the same logits.
    fn constant_logits(logits: &[f64]) -> ModelParams {
        let mut p = ModelParams::random(dims(logits.len()), false, 0.5, 1).unwrap();
        p.output_weight = Matrix::zeros(logits.len(), 4);
        p.output_bias = Vector::new(logits.to_vec()).unwrap();
        p
    }

    #[test]
    fn stop_favoured_gives_empty_caption() {
        let p = constant_logits(&[0.0, 5.0, 1.0, 1.0]);
        let h = greedy_decode(&p, &raw(), &DecodeConfig::new(1, mode())).unwrap();
        assert_eq!(h.token_ids, vec![START, STOP]);
        assert!(h.finished);
    }

    #[test]
    fn truncates_at_max_length() {
        let p = constant_logits(&[0.0, -5.0, 1.0, 2.0]);
        let cfg = DecodeConfig { max_length: 3, ..DecodeConfig::new(1, mode()) };
        let h = greedy_decode(&p, &raw(), &cfg).unwrap();
        assert_eq!(h.token_ids, vec![START, 3, 3, 3]);
        assert!(!h.finished);
        let b = beam_search(&p, &raw(), &DecodeConfig { beam_size: 2, ..cfg }).unwrap();
        assert!(b.iter().all(|h| h.token_ids.len() <= 4));
    }

    #[test]
    fn start_is_never_generated() {
        let p = constant_logits(&[9.0, 0.0, 1.0]);
        let cfg = DecodeConfig { max_length: 4, ..DecodeConfig::new(1, mode()) };
        let h = greedy_decode(&p, &raw(), &cfg).unwrap();
        assert_eq!(h.token_ids, vec![START, UNK, UNK, UNK, UNK]);
        for hyp in beam_search(&p, &raw(), &DecodeConfig { beam_size: 3, ..cfg }).unwrap() {
            assert_eq!(hyp.token_ids[0], START);
            assert!(!hyp.token_ids[1..].contains(&START));
        }
    }

    #[test]
    fn ties_break_to_lowest_id() {
        let p = constant_logits(&[0.0, -1.0, 2.0, 2.0, 2.0]);
        let cfg = DecodeConfig { max_length: 2, ..DecodeConfig::new(1, mode()) };
        assert_eq!(greedy_decode(&p, &raw(), &cfg).unwrap().token_ids, vec![START, 2, 2]);
        let top = beam_search(&p, &raw(), &cfg).unwrap();
        assert_eq!(top[0].token_ids, vec![START, 2, 2]);
    }

    #[test]
    fn greedy_logprob_matches_teacher_forcing() {
        for seed in 0..5 {
            let p = ModelParams::random(dims(7), false, 0.8, seed).unwrap();
            let cfg = DecodeConfig { max_length: 6, ..DecodeConfig::new(1, mode()) };
            let h = greedy_decode(&p, &raw(), &cfg).unwrap();
            if h.finished {
                let trace = forward_sequence(&p, &raw(), &h.token_ids, mode()).unwrap();
                assert_eq!(-trace.nll(), h.logprob);
            }
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let ft = GuidanceMode::new(GuidanceVariant::NGram { n: 2 }, TransferKind::Sigmoid);
        for seed in 0..100 {
            let p = ModelParams::random(dims(6), false, 1.0, seed).unwrap();
            let mode = if seed % 2 == 0 { mode() } else { ft };
            let cfg = DecodeConfig { max_length: 8, ..DecodeConfig::new(1, mode) };
            let g = greedy_decode(&p, &raw(), &cfg).unwrap();
            let b = beam_search(&p, &raw(), &cfg).unwrap();
            assert_eq!(b[0], g, "seed {seed}");
        }
    }

    /// Every caption of up to `max_len` generated tokens, scored by teacher forcing.
    fn enumerate(p: &ModelParams, max_len: usize) -> Vec<(Vec<usize>, f64)> {
        let v = p.dims.vocab;
        let mut out = Vec::new();
        let mut frontier = vec![vec![START]];
        for depth in 1..=max_len {
            let mut next = Vec::new();
            for prefix in &frontier {
                for k in 1..v {
                    let mut t: Vec<usize> = prefix.clone();
                    t.push(k);
                    if k == STOP || depth == max_len {
                        let mut closed = t.clone();
                        if k != STOP {
                            closed.push(STOP);
                        }
                        let lps = forward_sequence(p, &raw(), &closed, mode()).unwrap().target_logprobs();
                        out.push((t.clone(), lps[..depth].iter().sum()));
                    }
                    if k != STOP {
                        next.push(t);
                    }
                }
            }
            frontier = next;
        }
        out
    }

    #[test]
    fn three_word_vocabulary_beam_is_exhaustive() {
        for seed in 0..20 {
            let p = if seed == 0 { constant_logits(&[0.0, 0.3, 0.3]) } else {
                ModelParams::random(dims(3), false, 1.5, seed).unwrap()
            };
            let all = enumerate(&p, 5);
            let best = all.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
            let cfg = DecodeConfig { max_length: 5, ..DecodeConfig::new(2, mode()) };
            let beams = beam_search(&p, &raw(), &cfg).unwrap();
            assert_eq!(beams.len(), all.len());
            assert!((beams[0].logprob - best).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn exhaustive_beam_dominates_greedy() {
        for seed in 0..20 {
            let p = ModelParams::random(dims(5), false, 1.2, seed).unwrap();
            let exhaustive = DecodeConfig { max_length: 3, ..DecodeConfig::new(64, mode()) };
            let all = enumerate(&p, 3);
            let best = all.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
            let top = decode(&p, &raw(), &exhaustive).unwrap();
            let greedy = greedy_decode(&p, &raw(), &DecodeConfig { beam_size: 1, ..exhaustive }).unwrap();
            assert!((top.logprob - best).abs() < 1e-12);
            assert!(top.logprob >= greedy.logprob);
            for beam in [2, 3] {
                let h = decode(&p, &raw(), &DecodeConfig { beam_size: beam, ..exhaustive }).unwrap();
                assert!(h.logprob <= best + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let p = constant_logits(&[0.0, 1.0, 1.0]);
        assert!(greedy_decode(&p, &raw(), &DecodeConfig { max_length: 0, ..DecodeConfig::new(1, mode()) }).is_err());
        assert!(beam_search(&p, &raw(), &DecodeConfig::new(0, mode())).is_err());
        let ft = GuidanceMode::new(GuidanceVariant::FullTensor, TransferKind::Tanh);
        assert!(greedy_decode(&p, &raw(), &DecodeConfig::new(1, ft)).is_err());
    }
}
