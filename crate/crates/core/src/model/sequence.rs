//! Teacher-forced forward pass over one caption and its exact backward pass.

use super::cell::{self, GateCache};
use super::guidance::{self, GuidanceCache, GuidanceMode, GuidanceVariant, History};
use super::params::{Gate, ModelParams};
use crate::data::validate_caption;
use crate::error::{ensure, Error, Result};
use crate::numerics::{log_softmax, Vector};

/// `W_e` column `word_id`.
pub fn embed_word(params: &ModelParams, word_id: usize) -> Result<Vector> {
    ensure!(
        word_id < params.dims.vocab,
        "word id {word_id} out of range for vocabulary of {}",
        params.dims.vocab
    );
    Ok(params.word_embed.column(word_id))
}

/// `W_img raw + b_img`.
pub fn embed_image(params: &ModelParams, raw: &Vector) -> Result<Vector> {
    crate::numerics::affine(&params.image_weight, raw, &params.image_bias)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// Token fed at this step.
    pub input: usize,
    /// Token predicted at this step.
    pub target: usize,
    pub x: Vec<f64>,
    /// `None` when the guidance was supplied externally.
    pub history: Option<History>,
    pub guidance: GuidanceCache,
    pub gates: GateCache,
    pub c_prev: Vec<f64>,
    pub m_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub m: Vec<f64>,
    pub logits: Vec<f64>,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub raw: Vec<f64>,
    /// Embedded image feature `I`.
    pub image: Vec<f64>,
    pub steps: Vec<StepTrace>,
}

impl ForwardTrace {
    /// `-Σ_t log p_t(target_t)`.
    pub fn nll(&self) -> f64 {
        self.steps.iter().map(|s| -s.logprobs[s.target]).sum()
    }

    pub fn target_logprobs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.logprobs[s.target]).collect()
    }

    pub fn logprob_rows(&self) -> Vec<&[f64]> {
        self.steps.iter().map(|s| s.logprobs.as_slice()).collect()
    }
}

fn run(
    params: &ModelParams,
    raw: Vec<f64>,
    image: Vec<f64>,
    token_ids: &[usize],
    mut guide: impl FnMut(usize) -> Result<(Option<History>, GuidanceCache)>,
) -> Result<ForwardTrace> {
    let h = params.dims.hidden;
    let mut c_prev = vec![0.0; h];
    let mut m_prev = vec![0.0; h];
    let mut steps = Vec::with_capacity(token_ids.len() - 1);
    for t in 1..token_ids.len() {
        let input = token_ids[t - 1];
        let x: Vec<f64> = params.word_embed.column(input).into_inner();
        let (history, gcache) = guide(t)?;
        let (c, m, gates) = cell::step(params, &x, &c_prev, &m_prev, &gcache.g);
        let mut logits = params.output_weight.matvec(&m);
        for (z, b) in logits.iter_mut().zip(params.output_bias.iter()) {
            *z += b;
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NumericDomain(format!("non-finite logits at step {t}")));
        }
        let logprobs = log_softmax(&logits);
        steps.push(StepTrace {
            input,
            target: token_ids[t],
            x,
            history,
            guidance: gcache,
            gates,
            c_prev: std::mem::replace(&mut c_prev, c.clone()),
            m_prev: std::mem::replace(&mut m_prev, m.clone()),
            c,
            m,
            logits,
            logprobs,
        });
    }
    Ok(ForwardTrace { raw, image, steps })
}

/// Runs the captioner over `token_ids` (START … STOP) from a zero state. Step
/// `t` consumes `token_ids[t-1]`, builds guidance from `token_ids[..t]`, and
/// predicts `token_ids[t]`.
pub fn forward_sequence(params: &ModelParams, raw: &Vector, token_ids: &[usize], mode: GuidanceMode) -> Result<ForwardTrace> {
    mode.validate()?;
    validate_caption(token_ids, params.dims.vocab)?;
    if mode.variant == GuidanceVariant::FullTensor {
        ensure!(params.full_tensor.is_some(), "full-tensor guidance needs coupling tensor parameters");
    }
    let image = embed_image(params, raw)?.into_inner();
    let fixed = match mode.variant {
        GuidanceVariant::TimeInvariant => {
            let pre = image.clone();
            let g = mode.transfer.apply_slice(&pre);
            Some(GuidanceCache { mask: None, pre, g })
        }
        _ => None,
    };
    let vocab = params.dims.vocab;
    run(params, raw.to_vec(), image.clone(), token_ids, |t| {
        let hist = History::new(&token_ids[..t], mode.variant, vocab)?;
        let cache = match &fixed {
            Some(c) => c.clone(),
            None => guidance::compute(params, &image, &hist, mode),
        };
        Ok((Some(hist), cache))
    })
}

/// Runs the recurrence with caller-supplied guidance `g_t` for every step
/// (`guidance.len() == token_ids.len() - 1`). The image embedding is bypassed.
pub fn forward_with_guidance(params: &ModelParams, token_ids: &[usize], guidance: &[Vector]) -> Result<ForwardTrace> {
    validate_caption(token_ids, params.dims.vocab)?;
    ensure!(
        guidance.len() + 1 == token_ids.len(),
        "need {} guidance vectors, got {}",
        token_ids.len() - 1,
        guidance.len()
    );
    ensure!(
        guidance.iter().all(|g| g.len() == params.dims.image),
        "guidance vectors must have length {}",
        params.dims.image
    );
    run(params, Vec::new(), Vec::new(), token_ids, |t| {
        let g = guidance[t - 1].to_vec();
        Ok((None, GuidanceCache { mask: None, pre: g.clone(), g }))
    })
}

/// Exact gradient of `trace.nll()` with respect to every parameter, through the
/// recurrence, the guidance, and the image embedding.
pub fn backward_sequence(params: &ModelParams, trace: &ForwardTrace, token_ids: &[usize], mode: GuidanceMode) -> Result<ModelParams> {
    ensure!(
        trace.steps.len() + 1 == token_ids.len(),
        "trace has {} steps for a caption of {} tokens",
        trace.steps.len(),
        token_ids.len()
    );
    for (t, s) in trace.steps.iter().enumerate() {
        ensure!(
            s.input == token_ids[t] && s.target == token_ids[t + 1],
            "trace step {t} does not match the caption"
        );
        ensure!(s.history.is_some(), "trace was produced with external guidance");
    }
    ensure!(
        trace.image.len() == params.dims.image && trace.raw.len() == params.dims.raw,
        "trace does not match the model dimensions"
    );
    if mode.variant == GuidanceVariant::FullTensor {
        ensure!(params.full_tensor.is_some(), "full-tensor guidance needs coupling tensor parameters");
    }

    let d = params.dims;
    let mut grads = params.zeros_like();
    let mut dm_next = vec![0.0; d.hidden];
    let mut dc_next = vec![0.0; d.hidden];
    let mut d_image = vec![0.0; d.image];

    for s in trace.steps.iter().rev() {
        let mut dz: Vec<f64> = s.logprobs.iter().map(|lp| lp.exp()).collect();
        dz[s.target] -= 1.0;
        grads.output_weight.add_outer(&dz, &s.m);
        for (b, v) in grads.output_bias.as_mut_slice().iter_mut().zip(&dz) {
            *b += v;
        }

        let mut dm = dm_next.clone();
        params.output_weight.add_matvec_transposed(&dz, &mut dm);

        let i = s.gates.act(Gate::Input);
        let f = s.gates.act(Gate::Forget);
        let o = s.gates.act(Gate::Output);
        let cand = s.gates.act(Gate::Cell);

        let mut da = [
            vec![0.0; d.hidden],
            vec![0.0; d.hidden],
            vec![0.0; d.hidden],
            vec![0.0; d.hidden],
        ];
        for r in 0..d.hidden {
            let dc = dm[r] * o[r] + dc_next[r];
            da[Gate::Output.index()][r] = dm[r] * s.c[r] * o[r] * (1.0 - o[r]);
            da[Gate::Input.index()][r] = dc * cand[r] * i[r] * (1.0 - i[r]);
            da[Gate::Forget.index()][r] = dc * s.c_prev[r] * f[r] * (1.0 - f[r]);
            da[Gate::Cell.index()][r] = dc * i[r] * (1.0 - cand[r] * cand[r]);
            dc_next[r] = dc * f[r];
        }

        let mut dx = vec![0.0; d.embed];
        let mut dg = vec![0.0; d.image];
        dm_next.iter_mut().for_each(|v| *v = 0.0);
        for gate in Gate::ALL {
            let a = &da[gate.index()];
            let p = params.gate(gate);
            let gp = &mut grads.gates[gate.index()];
            gp.wx.add_outer(a, &s.x);
            gp.wm.add_outer(a, &s.m_prev);
            gp.wq.add_outer(a, &s.guidance.g);
            for (b, v) in gp.b.as_mut_slice().iter_mut().zip(a) {
                *b += v;
            }
            p.wx.add_matvec_transposed(a, &mut dx);
            p.wm.add_matvec_transposed(a, &mut dm_next);
            p.wq.add_matvec_transposed(a, &mut dg);
        }

        let vocab = d.vocab;
        let we = grads.word_embed.as_mut_slice();
        for (e, v) in dx.iter().enumerate() {
            we[e * vocab + s.input] += v;
        }

        let hist = s.history.as_ref().expect("checked above");
        guidance::backward(params, &trace.image, hist, &s.guidance, mode, &dg, &mut grads, &mut d_image);
    }

    grads.image_weight.add_outer(&d_image, &trace.raw);
    for (b, v) in grads.image_bias.as_mut_slice().iter_mut().zip(&d_image) {
        *b += v;
    }
    Ok(grads)
}
