use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{gaussian_init, Matrix, SeededRng, Vector};

/// Largest full coupling tensor (entries) the reference implementation accepts.
pub const MAX_TENSOR_ENTRIES: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Vocabulary size including reserved ids.
    pub vocab: usize,
    /// Word embedding width.
    pub embed: usize,
    /// LSTM state width.
    pub hidden: usize,
    /// Embedded image feature width; also the guidance width.
    pub image: usize,
    /// Raw (precomputed) image feature width.
    pub raw: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab >= 3, "vocabulary must hold at least the 3 reserved ids");
        ensure!(
            self.embed > 0 && self.hidden > 0 && self.image > 0 && self.raw > 0,
            "model dims must be positive: {self:?}"
        );
        Ok(())
    }

    pub fn tensor_entries(&self) -> usize {
        self.image * self.image * self.vocab
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Input,
    Forget,
    Output,
    Cell,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Cell];

    pub fn name(self) -> &'static str {
        match self {
            Gate::Input => "input",
            Gate::Forget => "forget",
            Gate::Output => "output",
            Gate::Cell => "cell",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

/// Weights feeding one gate: word input, previous hidden state, guidance, bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub wx: Matrix,
    pub wm: Matrix,
    pub wq: Matrix,
    pub b: Vector,
}

/// Coupling tensor for the fully coupled guidance `u_i = Σ_jk W[i,j,k] I_j s_k + b_i`.
/// Entry `(i, j, k)` lives at `(i * image + j) * vocab + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullTensorParams {
    pub image: usize,
    pub vocab: usize,
    pub weight: Vec<f64>,
    pub bias: Vector,
}

impl FullTensorParams {
    pub fn zeros(image: usize, vocab: usize) -> Result<Self> {
        ensure!(
            image * image * vocab <= MAX_TENSOR_ENTRIES,
            "full coupling tensor of {image}x{image}x{vocab} exceeds {MAX_TENSOR_ENTRIES} entries"
        );
        Ok(FullTensorParams {
            image,
            vocab,
            weight: vec![0.0; image * image * vocab],
            bias: Vector::zeros(image),
        })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.image + j) * self.vocab + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.weight[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.index(i, j, k);
        self.weight[idx] = value;
    }

    /// Tensor whose only non-zero entries are `W[i,i,k] = cond[i,k]`, which makes
    /// the coupled form collapse to the masked form `I ⊙ (cond · s)`.
    pub fn diagonal_from(cond: &Matrix) -> Result<Self> {
        let mut ft = FullTensorParams::zeros(cond.rows(), cond.cols())?;
        for i in 0..cond.rows() {
            for k in 0..cond.cols() {
                ft.set(i, i, k, cond.get(i, k));
            }
        }
        Ok(ft)
    }
}

/// Initialization of the text-conditional matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CondInit {
    AllOnes,
    Gaussian { mean: f64, stddev: f64 },
}

impl Default for CondInit {
    fn default() -> Self {
        CondInit::Gaussian {
            mean: 1.0,
            stddev: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub word_embed_stddev: f64,
    /// Stddev for gate, image-embedding and output weights. Biases start at zero.
    pub weight_stddev: f64,
    pub cond: CondInit,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            word_embed_stddev: 0.01,
            weight_stddev: 0.08,
            cond: CondInit::default(),
        }
    }
}

/// Every learnable tensor, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    WordEmbed,
    CondEmbed,
    ImageWeight,
    ImageBias,
    GateInput(Gate),
    GateHidden(Gate),
    GateGuide(Gate),
    GateBias(Gate),
    OutputWeight,
    OutputBias,
    TensorWeight,
    TensorBias,
}

impl ParamGroup {
    pub fn name(self) -> String {
        match self {
            ParamGroup::WordEmbed => "word_embed".into(),
            ParamGroup::CondEmbed => "cond_embed".into(),
            ParamGroup::ImageWeight => "image_weight".into(),
            ParamGroup::ImageBias => "image_bias".into(),
            ParamGroup::GateInput(g) => format!("{}_gate.input", g.name()),
            ParamGroup::GateHidden(g) => format!("{}_gate.hidden", g.name()),
            ParamGroup::GateGuide(g) => format!("{}_gate.guide", g.name()),
            ParamGroup::GateBias(g) => format!("{}_gate.bias", g.name()),
            ParamGroup::OutputWeight => "output_weight".into(),
            ParamGroup::OutputBias => "output_bias".into(),
            ParamGroup::TensorWeight => "tensor_weight".into(),
            ParamGroup::TensorBias => "tensor_bias".into(),
        }
    }

    /// Parameters of the image embedding (the CNN stand-in).
    pub fn is_image_embedding(self) -> bool {
        matches!(self, ParamGroup::ImageWeight | ParamGroup::ImageBias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// `embed × vocab`; column `k` embeds word `k`.
    pub word_embed: Matrix,
    /// `image × vocab`; column `k` is the attention mask of word `k`.
    pub cond_embed: Matrix,
    /// `image × raw`.
    pub image_weight: Matrix,
    pub image_bias: Vector,
    /// Indexed by `Gate`.
    pub gates: [GateParams; 4],
    /// `vocab × hidden`.
    pub output_weight: Matrix,
    pub output_bias: Vector,
    pub full_tensor: Option<FullTensorParams>,
}

fn group_seed(seed: u64, index: u64) -> u64 {
    seed ^ (index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seed of the text-conditional matrix drawn by `ModelParams::init(.., seed)`.
pub(crate) fn cond_seed(seed: u64) -> u64 {
    group_seed(seed, 1000)
}

impl ModelParams {
    pub fn zeros(dims: ModelDims, with_tensor: bool) -> Result<Self> {
        dims.validate()?;
        let ModelDims { vocab, embed, hidden, image, raw } = dims;
        let gate = || GateParams {
            wx: Matrix::zeros(hidden, embed),
            wm: Matrix::zeros(hidden, hidden),
            wq: Matrix::zeros(hidden, image),
            b: Vector::zeros(hidden),
        };
        Ok(ModelParams {
            dims,
            word_embed: Matrix::zeros(embed, vocab),
            cond_embed: Matrix::filled(image, vocab, 1.0),
            image_weight: Matrix::zeros(image, raw),
            image_bias: Vector::zeros(image),
            gates: [gate(), gate(), gate(), gate()],
            output_weight: Matrix::zeros(vocab, hidden),
            output_bias: Vector::zeros(vocab),
            full_tensor: if with_tensor {
                Some(FullTensorParams::zeros(image, vocab)?)
            } else {
                None
            },
        })
    }

    /// Same shapes with every entry zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for g in self.groups() {
            z.slice_mut(g).fill(0.0);
        }
        z
    }

    pub fn init(dims: ModelDims, config: &InitConfig, with_tensor: bool, seed: u64) -> Result<Self> {
        let mut p = ModelParams::zeros(dims, with_tensor)?;
        let std = config.weight_stddev;
        ensure!(std >= 0.0 && config.word_embed_stddev >= 0.0, "init stddevs must be >= 0");
        let mut idx = 0u64;
        let mut next = |rows, cols, s| {
            idx += 1;
            gaussian_init(rows, cols, 0.0, s, group_seed(seed, idx))
        };
        p.word_embed = next(dims.embed, dims.vocab, config.word_embed_stddev)?;
        p.image_weight = next(dims.image, dims.raw, std)?;
        for g in p.gates.iter_mut() {
            g.wx = next(dims.hidden, dims.embed, std)?;
            g.wm = next(dims.hidden, dims.hidden, std)?;
            g.wq = next(dims.hidden, dims.image, std)?;
        }
        p.output_weight = next(dims.vocab, dims.hidden, std)?;
        p.init_cond(config.cond, cond_seed(seed))?;
        Ok(p)
    }

    /// Reinitializes the text-conditional matrix (and the coupling tensor's
    /// diagonal, when present) from `cond`.
    pub fn init_cond(&mut self, cond: CondInit, seed: u64) -> Result<()> {
        let (rows, cols) = (self.dims.image, self.dims.vocab);
        self.cond_embed = match cond {
            CondInit::AllOnes => Matrix::filled(rows, cols, 1.0),
            CondInit::Gaussian { mean, stddev } => gaussian_init(rows, cols, mean, stddev, seed)?,
        };
        if self.full_tensor.is_some() {
            self.full_tensor = Some(FullTensorParams::diagonal_from(&self.cond_embed)?);
        }
        Ok(())
    }

    pub fn gate(&self, g: Gate) -> &GateParams {
        &self.gates[g.index()]
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut out = vec![
            ParamGroup::WordEmbed,
            ParamGroup::CondEmbed,
            ParamGroup::ImageWeight,
            ParamGroup::ImageBias,
        ];
        for g in Gate::ALL {
            out.extend([
                ParamGroup::GateInput(g),
                ParamGroup::GateHidden(g),
                ParamGroup::GateGuide(g),
                ParamGroup::GateBias(g),
            ]);
        }
        out.extend([ParamGroup::OutputWeight, ParamGroup::OutputBias]);
        if self.full_tensor.is_some() {
            out.extend([ParamGroup::TensorWeight, ParamGroup::TensorBias]);
        }
        out
    }

    /// Panics if a tensor group is requested on a model without the tensor.
    pub fn slice(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::WordEmbed => self.word_embed.as_slice(),
            ParamGroup::CondEmbed => self.cond_embed.as_slice(),
            ParamGroup::ImageWeight => self.image_weight.as_slice(),
            ParamGroup::ImageBias => self.image_bias.as_slice(),
            ParamGroup::GateInput(g) => self.gates[g.index()].wx.as_slice(),
            ParamGroup::GateHidden(g) => self.gates[g.index()].wm.as_slice(),
            ParamGroup::GateGuide(g) => self.gates[g.index()].wq.as_slice(),
            ParamGroup::GateBias(g) => self.gates[g.index()].b.as_slice(),
            ParamGroup::OutputWeight => self.output_weight.as_slice(),
            ParamGroup::OutputBias => self.output_bias.as_slice(),
            ParamGroup::TensorWeight => &self.full_tensor.as_ref().expect("no coupling tensor").weight,
            ParamGroup::TensorBias => self.full_tensor.as_ref().expect("no coupling tensor").bias.as_slice(),
        }
    }

    pub fn slice_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::WordEmbed => self.word_embed.as_mut_slice(),
            ParamGroup::CondEmbed => self.cond_embed.as_mut_slice(),
            ParamGroup::ImageWeight => self.image_weight.as_mut_slice(),
            ParamGroup::ImageBias => self.image_bias.as_mut_slice(),
            ParamGroup::GateInput(g) => self.gates[g.index()].wx.as_mut_slice(),
            ParamGroup::GateHidden(g) => self.gates[g.index()].wm.as_mut_slice(),
            ParamGroup::GateGuide(g) => self.gates[g.index()].wq.as_mut_slice(),
            ParamGroup::GateBias(g) => self.gates[g.index()].b.as_mut_slice(),
            ParamGroup::OutputWeight => self.output_weight.as_mut_slice(),
            ParamGroup::OutputBias => self.output_bias.as_mut_slice(),
            ParamGroup::TensorWeight => &mut self.full_tensor.as_mut().expect("no coupling tensor").weight,
            ParamGroup::TensorBias => self.full_tensor.as_mut().expect("no coupling tensor").bias.as_mut_slice(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.groups().into_iter().map(|g| self.slice(g).len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.groups()
            .into_iter()
            .all(|g| self.slice(g).iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, group by group.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for g in self.groups() {
            for (a, b) in self.slice_mut(g).iter_mut().zip(other.slice(g)) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.groups() {
            self.slice_mut(g).iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.groups()
            .into_iter()
            .flat_map(|g| self.slice(g).iter())
            .map(|v| v * v)
            .sum()
    }

    /// Random parameters with every entry drawn from `N(0, stddev²)`; used by
    /// tests and the gradient-check harness to get away from the symmetric
    /// initialization.
    pub fn random(dims: ModelDims, with_tensor: bool, stddev: f64, seed: u64) -> Result<Self> {
        let mut p = ModelParams::zeros(dims, with_tensor)?;
        let mut rng = SeededRng::new(seed);
        for g in p.groups() {
            for v in p.slice_mut(g) {
                *v = rng.normal(0.0, stddev);
            }
        }
        Ok(p)
    }
}
