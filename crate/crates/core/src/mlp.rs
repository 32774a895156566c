//! Fully connected network with explicit reverse-mode gradients.
//!
//! All parameters live in one flat vector, layer by layer: the weight matrix
//! `[fan_in × fan_out]` row-major, then the bias `[fan_out]`. Gradients use
//! the same layout, which keeps the optimizer, EMA, clipping and checkpoint
//! code oblivious to the network shape.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Silu,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Silu => z * sigmoid(z),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; n],
        }
    }

    /// Uniform(±1/√fan_in) initialisation for weights and biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes, activation);
        let mut offset = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let len = w[0] * w[1] + w[1];
            for p in &mut net.params[offset..offset + len] {
                *p = rng.random_range(-bound..bound);
            }
            offset += len;
        }
        net
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Replaces the parameter vector; panics on a length mismatch.
    pub fn set_params(&mut self, params: Vec<f64>) {
        assert_eq!(params.len(), self.params.len(), "parameter length mismatch");
        self.params = params;
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l);
        let w =
            ArrayView2::from_shape((fan_in, fan_out), &self.params[off..off + fan_in * fan_out])
                .expect("layer shape");
        let b = ArrayView1::from(
            &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out],
        );
        (w, b)
    }

    /// Bias of layer `l`, mutable.
    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l) + fan_in * fan_out;
        &mut self.params[off..off + fan_out]
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.input_dim(), "input width");
        let last = self.num_layers() - 1;
        let mut h: Array2<f64> = x.to_owned();
        for l in 0..=last {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w);
            z += &b;
            if l < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        h
    }

    pub fn forward_tape(&self, x: ArrayView2<'_, f64>) -> Tape {
        assert_eq!(x.ncols(), self.input_dim(), "input width");
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(last);
        let mut h: Array2<f64> = x.to_owned();
        for l in 0..=last {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w);
            z += &b;
            inputs.push(h);
            if l < last {
                let act = self.activation;
                h = z.mapv(|v| act.apply(v));
                pre.push(z);
            } else {
                h = z;
            }
        }
        Tape {
            inputs,
            pre,
            output: h,
        }
    }

    /// Back-propagated error signal at the output of every layer.
    fn deltas(&self, tape: &Tape, grad_out: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let layers = self.num_layers();
        let mut deltas = vec![Array2::zeros((0, 0)); layers];
        let mut delta = grad_out.to_owned();
        for l in (0..layers).rev() {
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut g = delta.dot(&w.t());
                let act = self.activation;
                g.zip_mut_with(&tape.pre[l - 1], |gi, z| *gi *= act.derivative(*z));
                deltas[l] = std::mem::replace(&mut delta, g);
            } else {
                deltas[0] = std::mem::replace(&mut delta, Array2::zeros((0, 0)));
            }
        }
        deltas
    }

    /// Gradient of Σ_rows ⟨grad_out_row, output_row⟩ with respect to the parameters.
    pub fn backward(&self, tape: &Tape, grad_out: ArrayView2<'_, f64>) -> Vec<f64> {
        let deltas = self.deltas(tape, grad_out);
        let mut grad = Vec::with_capacity(self.num_params());
        for (l, delta) in deltas.iter().enumerate() {
            let dw = tape.inputs[l].t().dot(delta);
            let db: Array1<f64> = delta.sum_axis(Axis(0));
            grad.extend(dw.iter());
            grad.extend(db.iter());
        }
        grad
    }

    /// Gradient of the input-row contributions, one flat vector per row.
    pub fn per_sample_backward(&self, tape: &Tape, grad_out: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
        let deltas = self.deltas(tape, grad_out);
        let rows = grad_out.nrows();
        (0..rows)
            .map(|i| {
                let mut g = Vec::with_capacity(self.num_params());
                for (l, delta) in deltas.iter().enumerate() {
                    let a = tape.inputs[l].row(i);
                    let d = delta.row(i);
                    for &ak in a.iter() {
                        g.extend(d.iter().map(|dj| ak * dj));
                    }
                    g.extend(d.iter());
                }
                g
            })
            .collect()
    }
}
