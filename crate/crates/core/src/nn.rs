//! Named parameter storage and the small dense building blocks shared by
//! the decoder, the speaker encoder and the speaker-ID classifier.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape as a leaf, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }
}

/// Uniform Glorot-style initialisation for a `fan_in × fan_out` matrix.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(&[fan_in, fan_out], data)
}

/// `y = x W + b`, with `W` stored as `in × out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        Self::with_gain(params, rng, name, fan_in, fan_out, bias, 1.0)
    }

    pub fn with_gain(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out, gain));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, bound[self.weight]);
        match self.bias {
            Some(b) => tape.add_row(y, bound[b]),
            None => y,
        }
    }
}

/// Shallow fully connected network: linear, ReLU, linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        out_gain: f64,
    ) -> Self {
        Mlp {
            hidden: Linear::new(params, rng, &format!("{name}.0"), fan_in, hidden, true),
            out: Linear::with_gain(
                params,
                rng,
                &format!("{name}.1"),
                hidden,
                fan_out,
                true,
                out_gain,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        let h = self.hidden.forward(tape, bound, x);
        let h = tape.relu(h);
        self.out.forward(tape, bound, h)
    }
}

/// Plain (tape-free) evaluation of a linear layer on one row vector.
pub fn linear_row(params: &ParamSet, layer: &Linear, x: &[f64]) -> Vec<f64> {
    let w = params.get(layer.weight).data();
    let mut y = match layer.bias {
        Some(b) => params.get(b).data().to_vec(),
        None => vec![0.0; layer.fan_out],
    };
    for (i, xi) in x.iter().enumerate() {
        for (o, wv) in y
            .iter_mut()
            .zip(&w[i * layer.fan_out..(i + 1) * layer.fan_out])
        {
            *o += xi * wv;
        }
    }
    y
}
