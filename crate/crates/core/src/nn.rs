//! Parameter storage and the small layer vocabulary shared by the networks.

use std::ops::Index;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform init in ±√(6/(fan_in+fan_out)), shape `[fan_in, fan_out]`.
    pub fn glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("shape"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::filled(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn total_numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        Binding(
            self.values
                .iter()
                .map(|v| tape.leaf(v.clone(), trainable))
                .collect(),
        )
    }
}

/// Tape handles of a bound [`ParamSet`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding(Vec<Var>);

impl Binding {
    /// Binding over caller-provided handles, one per parameter in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Accumulated gradients in parameter order; zeros where none flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .map(|v| {
                tape.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(*v).numel()])
            })
            .collect()
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
    }
}

/// Affine–activation chain; the last layer is left linear.
pub fn mlp_forward(
    tape: &mut Tape,
    x: Var,
    layers: &[(Var, Var)],
    activation: Activation,
) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_row(z, b)?;
        if i + 1 < layers.len() {
            h = activate(tape, h, activation);
        }
    }
    Ok(h)
}

/// Inverted dropout: kept entries are scaled by `1/(1-p)`. Identity when
/// `training` is off or `p == 0`.
pub fn dropout_mask(tape: &mut Tape, x: Var, p: f64, seed: u64, training: bool) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_with(tape, x, p, &mut rng, training)
}

pub(crate) fn dropout_with(
    tape: &mut Tape,
    x: Var,
    p: f64,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Parameter {
            op: "dropout",
            msg: format!("probability {p} outside [0, 1)"),
        });
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

/// Per-forward-pass settings: training flag, dropout rates, dropout RNG.
pub struct ForwardCtx {
    pub training: bool,
    pub attn_dropout: f64,
    pub mlp_dropout: f64,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn inference() -> Self {
        Self {
            training: false,
            attn_dropout: 0.0,
            mlp_dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn training(attn_dropout: f64, mlp_dropout: f64, seed: u64) -> Self {
        Self {
            training: true,
            attn_dropout,
            mlp_dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn attn_dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.attn_dropout;
        dropout_with(tape, x, p, &mut self.rng, self.training)
    }

    pub fn mlp_dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.mlp_dropout;
        dropout_with(tape, x, p, &mut self.rng, self.training)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, inp: usize, out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = params.glorot(format!("{name}.weight"), inp, out, rng);
        let bias = bias.then(|| params.zeros(format!("{name}.bias"), &[out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b[self.weight])?;
        match self.bias {
            Some(bias) => tape.add_row(y, b[bias]),
            None => Ok(y),
        }
    }
}

/// ReLU multilayer perceptron with dropout after each hidden activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists input, hidden and output sizes.
    pub fn new(params: &mut ParamSet, name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, b, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
                h = ctx.mlp_dropout(tape, h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(params: &mut ParamSet, name: &str, width: usize) -> Self {
        Self {
            gain: params.ones(format!("{name}.gain"), &[width]),
            bias: params.zeros(format!("{name}.bias"), &[width]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, b[self.gain], b[self.bias])
    }
}
