use super::params::{Gate, ModelParams};
use crate::error::{ensure, Result};
use crate::numerics::{sigmoid, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    /// Memory cell.
    pub c: Vector,
    /// Hidden output.
    pub m: Vector,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            c: Vector::zeros(hidden),
            m: Vector::zeros(hidden),
        }
    }
}

/// Pre-activations and activations of the four gates, indexed by `Gate`.
/// The cell entry holds the tanh candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCache {
    pub pre: [Vec<f64>; 4],
    pub act: [Vec<f64>; 4],
}

impl GateCache {
    pub fn pre(&self, g: Gate) -> &[f64] {
        &self.pre[g.index()]
    }

    pub fn act(&self, g: Gate) -> &[f64] {
        &self.act[g.index()]
    }
}

pub(crate) fn step(params: &ModelParams, x: &[f64], c_prev: &[f64], m_prev: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, GateCache) {
    let pre = Gate::ALL.map(|gate| {
        let p = params.gate(gate);
        let vx = p.wx.matvec(x);
        let vm = p.wm.matvec(m_prev);
        let vq = p.wq.matvec(g);
        (0..vx.len())
            .map(|r| vx[r] + vm[r] + vq[r] + p.b[r])
            .collect::<Vec<f64>>()
    });
    let act = Gate::ALL.map(|gate| {
        let a = &pre[gate.index()];
        match gate {
            Gate::Cell => a.iter().map(|v| v.tanh()).collect(),
            _ => a.iter().map(|&v| sigmoid(v)).collect::<Vec<f64>>(),
        }
    });
    let (i, f, o, cand) = (&act[0], &act[1], &act[2], &act[3]);
    let c: Vec<f64> = (0..c_prev.len()).map(|r| f[r] * c_prev[r] + i[r] * cand[r]).collect();
    let m: Vec<f64> = (0..c.len()).map(|r| o[r] * c[r]).collect();
    (c, m, GateCache { pre, act })
}

/// One recurrence step with guidance `g`:
///
/// ```text
/// i = σ(W_ix x + W_im m + W_iq g + b_i)     f, o likewise
/// c' = f ⊙ c + i ⊙ tanh(W_cx x + W_cm m + W_cq g + b_c)
/// m' = o ⊙ c'
/// ```
pub fn glstm_step(params: &ModelParams, x: &Vector, prev: &LstmState, g: &Vector) -> Result<(LstmState, GateCache)> {
    let d = params.dims;
    ensure!(x.len() == d.embed, "word input has length {}, expected {}", x.len(), d.embed);
    ensure!(g.len() == d.image, "guidance has length {}, expected {}", g.len(), d.image);
    ensure!(
        prev.c.len() == d.hidden && prev.m.len() == d.hidden,
        "state has lengths {}/{}, expected {}",
        prev.c.len(),
        prev.m.len(),
        d.hidden
    );
    let (c, m, cache) = step(params, x, &prev.c, &prev.m, g);
    let state = LstmState {
        c: Vector::new(c)?,
        m: Vector::new(m)?,
    };
    Ok((state, cache))
}
