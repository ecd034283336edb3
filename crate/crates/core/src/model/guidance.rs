//! Guidance vectors fed to every gate.
//!
//! * time-invariant: `g = Φ(I)`
//! * n-gram / sentence: `g_t = Φ(I ⊙ W_c h_t)` where `h_t` averages the one-hot
//!   vectors of the last `n` (or all) tokens of the history, START included
//! * full tensor: `g_t^i = Φ(Σ_jk W[i,j,k] I^j s_t^k + b^i)` with `s_t` the
//!   one-hot vector of the previous token

use serde::{Deserialize, Serialize};

use super::params::{FullTensorParams, ModelParams};
use crate::error::{ensure, Result};
use crate::numerics::{TransferKind, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum GuidanceVariant {
    TimeInvariant,
    #[serde(rename = "ngram")]
    NGram {
        n: usize,
    },
    Sentence,
    FullTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GuidanceMode {
    #[serde(flatten)]
    pub variant: GuidanceVariant,
    pub transfer: TransferKind,
}

impl GuidanceMode {
    pub fn new(variant: GuidanceVariant, transfer: TransferKind) -> Self {
        GuidanceMode { variant, transfer }
    }

    pub fn validate(&self) -> Result<()> {
        if let GuidanceVariant::NGram { n } = self.variant {
            ensure!(n >= 1, "n-gram guidance needs n >= 1");
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let v = match self.variant {
            GuidanceVariant::TimeInvariant => "time-invariant".to_string(),
            GuidanceVariant::NGram { n } => format!("{n}-gram"),
            GuidanceVariant::Sentence => "sentence".to_string(),
            GuidanceVariant::FullTensor => "full-tensor".to_string(),
        };
        format!("{v}/{}", self.transfer.name())
    }
}

/// Averaged one-hot history kept as integer counts, so that `W_c h` can be
/// formed as `(W_c · counts) / total`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct History {
    vocab_size: usize,
    total: usize,
    /// `(token, count)` sorted by token.
    counts: Vec<(usize, usize)>,
}

impl History {
    /// History for the step that follows `tokens_so_far`.
    pub fn new(tokens_so_far: &[usize], variant: GuidanceVariant, vocab_size: usize) -> Result<Self> {
        ensure!(!tokens_so_far.is_empty(), "history must contain at least START");
        if let Some(&bad) = tokens_so_far.iter().find(|&&t| t >= vocab_size) {
            return Err(crate::error::Error::IdOutOfRange(format!(
                "history token {bad} >= vocabulary size {vocab_size}"
            )));
        }
        let window = match variant {
            GuidanceVariant::NGram { n } => {
                ensure!(n >= 1, "n-gram guidance needs n >= 1");
                n.min(tokens_so_far.len())
            }
            GuidanceVariant::FullTensor => 1,
            GuidanceVariant::Sentence | GuidanceVariant::TimeInvariant => tokens_so_far.len(),
        };
        let mut window_tokens = tokens_so_far[tokens_so_far.len() - window..].to_vec();
        window_tokens.sort_unstable();
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for t in window_tokens {
            match counts.last_mut() {
                Some((tok, c)) if *tok == t => *c += 1,
                _ => counts.push((t, 1)),
            }
        }
        Ok(History {
            vocab_size,
            total: window,
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn counts(&self) -> &[(usize, usize)] {
        &self.counts
    }

    /// Dense average of one-hot vectors; entries are non-negative and sum to one.
    pub fn to_vector(&self) -> Vector {
        let mut v = vec![0.0; self.vocab_size];
        for &(k, c) in &self.counts {
            v[k] = c as f64 / self.total as f64;
        }
        Vector::from_raw(v)
    }

    /// `W_c h`, computed as the count-weighted column sum divided by the window length.
    pub(crate) fn mask(&self, cond: &crate::numerics::Matrix) -> Vec<f64> {
        let total = self.total as f64;
        (0..cond.rows())
            .map(|i| {
                let row = cond.row(i);
                let mut acc = 0.0;
                for &(k, c) in &self.counts {
                    acc += row[k] * c as f64;
                }
                acc / total
            })
            .collect()
    }
}

pub fn history_vector(tokens_so_far: &[usize], variant: GuidanceVariant, vocab_size: usize) -> Result<Vector> {
    Ok(History::new(tokens_so_far, variant, vocab_size)?.to_vector())
}

/// Intermediate values of one guidance evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceCache {
    /// `W_c h` for the masked variants.
    pub mask: Option<Vec<f64>>,
    /// Input to the transfer function.
    pub pre: Vec<f64>,
    pub g: Vec<f64>,
}

fn tensor_pre(ft: &FullTensorParams, image: &[f64], hist: &History) -> Vec<f64> {
    let total = hist.total as f64;
    (0..ft.image)
        .map(|i| {
            let mut acc = 0.0;
            for (j, &ij) in image.iter().enumerate() {
                for &(k, c) in &hist.counts {
                    acc += ft.get(i, j, k) * ij * (c as f64 / total);
                }
            }
            acc + ft.bias[i]
        })
        .collect()
}

pub(crate) fn compute(params: &ModelParams, image: &[f64], hist: &History, mode: GuidanceMode) -> GuidanceCache {
    let (mask, pre) = match mode.variant {
        GuidanceVariant::TimeInvariant => (None, image.to_vec()),
        GuidanceVariant::NGram { .. } | GuidanceVariant::Sentence => {
            let mask = hist.mask(&params.cond_embed);
            let pre = image.iter().zip(&mask).map(|(a, b)| a * b).collect();
            (Some(mask), pre)
        }
        GuidanceVariant::FullTensor => {
            let ft = params
                .full_tensor
                .as_ref()
                .expect("full-tensor guidance requires coupling tensor parameters");
            (None, tensor_pre(ft, image, hist))
        }
    };
    let g = mode.transfer.apply_slice(&pre);
    GuidanceCache { mask, pre, g }
}

/// Propagates `dg` back into the guidance parameters and returns the gradient
/// with respect to the embedded image feature.
pub(crate) fn backward(
    params: &ModelParams,
    image: &[f64],
    hist: &History,
    cache: &GuidanceCache,
    mode: GuidanceMode,
    dg: &[f64],
    grads: &mut ModelParams,
    d_image: &mut [f64],
) {
    let dpre = mode.transfer.backward(&cache.pre, &cache.g, dg);
    match mode.variant {
        GuidanceVariant::TimeInvariant => {
            for (d, p) in d_image.iter_mut().zip(&dpre) {
                *d += p;
            }
        }
        GuidanceVariant::NGram { .. } | GuidanceVariant::Sentence => {
            let mask = cache.mask.as_ref().expect("masked guidance caches its mask");
            let total = hist.total as f64;
            let cols = grads.cond_embed.cols();
            let dcond = grads.cond_embed.as_mut_slice();
            for i in 0..image.len() {
                d_image[i] += dpre[i] * mask[i];
                let dmask = dpre[i] * image[i];
                for &(k, c) in &hist.counts {
                    dcond[i * cols + k] += dmask * (c as f64 / total);
                }
            }
        }
        GuidanceVariant::FullTensor => {
            let ft = params.full_tensor.as_ref().expect("coupling tensor");
            let gft = grads.full_tensor.as_mut().expect("coupling tensor gradient");
            let total = hist.total as f64;
            for i in 0..ft.image {
                let di = dpre[i];
                gft.bias.as_mut_slice()[i] += di;
                for (j, &ij) in image.iter().enumerate() {
                    for &(k, c) in &hist.counts {
                        let s = c as f64 / total;
                        let idx = ft.index(i, j, k);
                        gft.weight[idx] += di * ij * s;
                        d_image[j] += di * ft.weight[idx] * s;
                    }
                }
            }
        }
    }
}

/// Guidance from an explicit dense history vector.
pub fn guidance(params: &ModelParams, image: &Vector, hist: &Vector, mode: GuidanceMode) -> Result<Vector> {
    mode.validate()?;
    ensure!(
        image.len() == params.dims.image,
        "image feature has length {} but the model expects {}",
        image.len(),
        params.dims.image
    );
    ensure!(
        hist.len() == params.dims.vocab,
        "history vector has length {} but the vocabulary has {} words",
        hist.len(),
        params.dims.vocab
    );
    let pre: Vec<f64> = match mode.variant {
        GuidanceVariant::TimeInvariant => image.to_vec(),
        GuidanceVariant::NGram { .. } | GuidanceVariant::Sentence => {
            let mask = params.cond_embed.matvec(hist);
            image.iter().zip(&mask).map(|(a, b)| a * b).collect()
        }
        GuidanceVariant::FullTensor => {
            let ft = params.full_tensor.as_ref().ok_or_else(|| {
                crate::error::Error::InvalidArgument("model has no coupling tensor".into())
            })?;
            return guidance_full_tensor(ft, image, hist, mode.transfer);
        }
    };
    crate::numerics::transfer_apply(mode.transfer, &Vector::new(pre)?)
}

/// `g^i = Φ(Σ_jk W[i,j,k] I^j s^k + b^i)`, dense triple loop.
pub fn guidance_full_tensor(ft: &FullTensorParams, image: &Vector, s: &Vector, transfer: TransferKind) -> Result<Vector> {
    ensure!(
        image.len() == ft.image && s.len() == ft.vocab,
        "coupling tensor is {0}x{0}x{1} but got image length {2} and word vector length {3}",
        ft.image,
        ft.vocab,
        image.len(),
        s.len()
    );
    let pre: Vec<f64> = (0..ft.image)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..ft.image {
                for k in 0..ft.vocab {
                    acc += ft.get(i, j, k) * image[j] * s[k];
                }
            }
            acc + ft.bias[i]
        })
        .collect();
    crate::numerics::transfer_apply(transfer, &Vector::new(pre)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelDims;
    use crate::vocab::START;

    const V: usize = 9;

    fn dims() -> ModelDims {
        ModelDims { vocab: V, embed: 5, hidden: 6, image: 7, raw: 4 }
    }

    fn mode(variant: GuidanceVariant, transfer: TransferKind) -> GuidanceMode {
        GuidanceMode { variant, transfer }
    }

    #[test]
    fn history_examples() {
        let h = history_vector(&[START], GuidanceVariant::NGram { n: 1 }, V).unwrap();
        assert_eq!(h, Vector::one_hot(V, START).unwrap());

        let h = history_vector(&[START, 4], GuidanceVariant::Sentence, V).unwrap();
        let mut expected = vec![0.0; V];
        expected[START] = 0.5;
        expected[4] = 0.5;
        assert_eq!(h.as_slice(), &expected[..]);

        // brute force: sum the last three one-hots and divide by three
        let hist = [0, 3, 5, 3, 7];
        let h = history_vector(&hist, GuidanceVariant::NGram { n: 3 }, V).unwrap();
        let mut sum = vec![0.0; V];
        for &t in &hist[2..] {
            for (k, s) in sum.iter_mut().enumerate() {
                *s += if k == t { 1.0 } else { 0.0 };
            }
        }
        for k in 0..V {
            assert!((h[k] - sum[k] / 3.0).abs() < 1e-15);
        }
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn history_errors() {
        assert!(History::new(&[], GuidanceVariant::Sentence, V).is_err());
        assert!(History::new(&[0, 9], GuidanceVariant::Sentence, V).is_err());
        assert!(History::new(&[0], GuidanceVariant::NGram { n: 0 }, V).is_err());
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let params = ModelParams::zeros(dims(), false).unwrap();
        let image = Vector::new(vec![0.3, -1.0, 2.5, 0.0, 1e-3, -7.0, 4.2]).unwrap();
        let m = mode(GuidanceVariant::Sentence, TransferKind::Identity);
        for tokens in [&[0usize][..], &[0, 3], &[0, 3, 3, 8, 4, 5, 6], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 3, 3]] {
            let hist = History::new(tokens, m.variant, V).unwrap();
            let cache = compute(&params, &image, &hist, m);
            assert_eq!(cache.g, image.as_slice());
        }
        let dense = history_vector(&[0, 4], m.variant, V).unwrap();
        assert_eq!(guidance(&params, &image, &dense, m).unwrap(), image);
    }

    #[test]
    fn zero_image_gives_zero_tanh_guidance() {
        let params = ModelParams::random(dims(), false, 1.0, 4).unwrap();
        let h = history_vector(&[0, 3, 4], GuidanceVariant::Sentence, V).unwrap();
        let g = guidance(&params, &Vector::zeros(7), &h, mode(GuidanceVariant::Sentence, TransferKind::Tanh)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_history_selects_a_mask_column() {
        let params = ModelParams::random(dims(), false, 1.0, 11).unwrap();
        let image = Vector::new((0..7).map(|i| i as f64 * 0.5 - 1.0).collect()).unwrap();
        let k = 5;
        let h = Vector::one_hot(V, k).unwrap();
        let g = guidance(&params, &image, &h, mode(GuidanceVariant::NGram { n: 1 }, TransferKind::Identity)).unwrap();
        for i in 0..7 {
            assert!((g[i] - image[i] * params.cond_embed.get(i, k)).abs() < 1e-15);
        }
    }

    #[test]
    fn full_tensor_examples() {
        let ft = FullTensorParams::zeros(7, V).unwrap();
        let image = Vector::new(vec![1.0; 7]).unwrap();
        let s = Vector::one_hot(V, 2).unwrap();
        let g = guidance_full_tensor(&ft, &image, &s, TransferKind::Identity).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        // D=2, V=2, I=[1,2], s=e_1; g^i = Σ_j W[i,j,1] I^j + b^i
        let mut ft = FullTensorParams::zeros(2, 2).unwrap();
        let vals = [[[0.5, 1.0], [-2.0, 3.0]], [[4.0, -1.5], [0.25, 0.75]]];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    ft.set(i, j, k, vals[i][j][k]);
                }
            }
        }
        ft.bias = Vector::new(vec![0.1, -0.2]).unwrap();
        let g = guidance_full_tensor(
            &ft,
            &Vector::new(vec![1.0, 2.0]).unwrap(),
            &Vector::one_hot(2, 1).unwrap(),
            TransferKind::Identity,
        )
        .unwrap();
        assert!((g[0] - (1.0 * 1.0 + 3.0 * 2.0 + 0.1)).abs() < 1e-15);
        assert!((g[1] - (-1.5 * 1.0 + 0.75 * 2.0 - 0.2)).abs() < 1e-15);

        assert!(guidance_full_tensor(&ft, &Vector::zeros(3), &Vector::zeros(2), TransferKind::Identity).is_err());
    }

    #[test]
    fn diagonal_tensor_matches_mask_form() {
        let cond = crate::numerics::gaussian_init(7, V, 1.0, 0.5, 3).unwrap();
        let ft = FullTensorParams::diagonal_from(&cond).unwrap();
        let mut params = ModelParams::zeros(dims(), false).unwrap();
        params.cond_embed = cond;
        let image = Vector::new(vec![0.2, -0.4, 1.3, 0.7, -2.2, 0.05, 1.1]).unwrap();
        for k in 0..V {
            let s = Vector::one_hot(V, k).unwrap();
            for t in TransferKind::ALL {
                let a = guidance_full_tensor(&ft, &image, &s, t).unwrap();
                let b = guidance(&params, &image, &s, mode(GuidanceVariant::NGram { n: 1 }, t)).unwrap();
                for i in 0..7 {
                    assert!((a[i] - b[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dimension_checks() {
        let params = ModelParams::zeros(dims(), false).unwrap();
        let m = mode(GuidanceVariant::Sentence, TransferKind::Tanh);
        assert!(guidance(&params, &Vector::zeros(6), &Vector::zeros(V), m).is_err());
        assert!(guidance(&params, &Vector::zeros(7), &Vector::zeros(V + 1), m).is_err());
        let ft_mode = mode(GuidanceVariant::FullTensor, TransferKind::Tanh);
        assert!(guidance(&params, &Vector::zeros(7), &Vector::zeros(V), ft_mode).is_err());
    }

    #[test]
    fn mode_serde_shape() {
        let m = mode(GuidanceVariant::NGram { n: 3 }, TransferKind::ReLU);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"variant":"ngram","n":3,"transfer":"relu"}"#);
        let back: GuidanceMode = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let s: GuidanceMode = serde_json::from_str(r#"{"variant":"sentence","transfer":"tanh"}"#).unwrap();
        assert_eq!(s, mode(GuidanceVariant::Sentence, TransferKind::Tanh));
    }
}
