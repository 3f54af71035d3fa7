//! Dense and LSTM layers with hand-written backward passes.
//!
//! Layers own only their parameter names and dimensions; the values live in a
//! shared [`Params`] store so whole models can be optimised and serialised as
//! one unit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Params, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn accumulate(grads: &mut Params, name: &str, local: &[f64]) -> Result<()> {
    let g = grads.values_mut(name)?;
    for (a, b) in g.iter_mut().zip(local) {
        *a += b;
    }
    Ok(())
}

/// Fully connected layer `activation(W x + b)`, W stored `output × input`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    weight: String,
    bias: String,
}

impl Dense {
    pub fn new(name: &str, input: usize, output: usize, activation: Activation) -> Self {
        Self {
            input,
            output,
            activation,
            weight: format!("{name}.w"),
            bias: format!("{name}.b"),
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        params.insert(
            self.weight.clone(),
            Tensor::glorot(&[self.output, self.input], self.input, self.output, rng),
        );
        params.insert(self.bias.clone(), Tensor::zeros(&[self.output]));
    }

    fn check(&self, params: &Params, x: &[f64]) -> Result<()> {
        if x.len() != self.input {
            return Err(Error::ShapeMismatch(format!(
                "dense `{}` expects input {}, got {}",
                self.weight,
                self.input,
                x.len()
            )));
        }
        let w = params.get(&self.weight)?;
        if w.shape != [self.output, self.input] {
            return Err(Error::ShapeMismatch(format!(
                "`{}` has shape {:?}, expected [{}, {}]",
                self.weight, w.shape, self.output, self.input
            )));
        }
        if params.get(&self.bias)?.len() != self.output {
            return Err(Error::ShapeMismatch(format!("`{}` length", self.bias)));
        }
        Ok(())
    }

    pub fn forward(&self, params: &Params, x: &[f64]) -> Result<Vec<f64>> {
        self.check(params, x)?;
        let w = params.values(&self.weight)?;
        let b = params.values(&self.bias)?;
        Ok(self.apply(w, b, x))
    }

    fn apply(&self, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.output)
            .map(|r| self.activation.apply(b[r] + dot(&w[r * self.input..(r + 1) * self.input], x)))
            .collect()
    }

    /// Applies the layer independently to each row of a `steps × input` matrix.
    pub fn forward_rows(&self, params: &Params, xs: &[f64]) -> Result<Vec<f64>> {
        if xs.len() % self.input != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values are not whole rows of width {}",
                xs.len(),
                self.input
            )));
        }
        if let Some(first) = xs.chunks(self.input).next() {
            self.check(params, first)?;
        }
        let w = params.values(&self.weight)?;
        let b = params.values(&self.bias)?;
        Ok(xs.chunks(self.input).flat_map(|x| self.apply(w, b, x)).collect())
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dx.
    /// `y` is the forward output for `x`.
    pub fn backward(
        &self,
        params: &Params,
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        grads: &mut Params,
    ) -> Result<Vec<f64>> {
        self.backward_rows(params, x, y, dy, grads)
    }

    /// Row-wise backward matching [`Dense::forward_rows`].
    pub fn backward_rows(
        &self,
        params: &Params,
        xs: &[f64],
        ys: &[f64],
        dys: &[f64],
        grads: &mut Params,
    ) -> Result<Vec<f64>> {
        let w = params.values(&self.weight)?;
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; self.output];
        let mut dx = vec![0.0; xs.len()];
        for ((x, y), (dy, dxr)) in xs
            .chunks(self.input)
            .zip(ys.chunks(self.output))
            .zip(dys.chunks(self.output).zip(dx.chunks_mut(self.input)))
        {
            for r in 0..self.output {
                let da = dy[r] * self.activation.derivative_from_output(y[r]);
                if da == 0.0 {
                    continue;
                }
                db[r] += da;
                axpy(da, x, &mut dw[r * self.input..(r + 1) * self.input]);
                axpy(da, &w[r * self.input..(r + 1) * self.input], dxr);
            }
        }
        accumulate(grads, &self.weight, &dw)?;
        accumulate(grads, &self.bias, &db)?;
        Ok(dx)
    }
}

/// Single-layer LSTM. Gate blocks are stacked `[input, forget, cell, output]`
/// in `w_x` (`4H × d`), `w_h` (`4H × H`) and `b` (`4H`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    w_x: String,
    w_h: String,
    bias: String,
}

/// Everything the backward pass needs from a forward run.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    pub steps: usize,
    hidden: usize,
    xs: Vec<f64>,
    /// `(steps + 1) × H`, row 0 is h0.
    hs: Vec<f64>,
    /// `(steps + 1) × H`, row 0 is c0.
    cs: Vec<f64>,
    /// tanh(c_t), `steps × H`.
    tanh_cs: Vec<f64>,
    /// Post-activation gates, `steps × 4H`.
    gates: Vec<f64>,
}

impl LstmTrace {
    /// Hidden state after every step, `steps × H`.
    pub fn hidden_states(&self) -> &[f64] {
        &self.hs[self.hidden..]
    }

    pub fn final_h(&self) -> &[f64] {
        &self.hs[self.steps * self.hidden..]
    }

    pub fn final_c(&self) -> &[f64] {
        &self.cs[self.steps * self.hidden..]
    }
}

/// Gradients flowing out of an LSTM into its inputs.
#[derive(Debug, Clone)]
pub struct LstmInputGrads {
    pub d_seq: Vec<f64>,
    pub d_h0: Vec<f64>,
    pub d_c0: Vec<f64>,
}

impl Lstm {
    pub fn new(name: &str, input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            w_x: format!("{name}.w_x"),
            w_h: format!("{name}.w_h"),
            bias: format!("{name}.b"),
        }
    }

    pub fn param_names(&self) -> [&str; 3] {
        [&self.w_x, &self.w_h, &self.bias]
    }

    /// Glorot-uniform weights, zero biases except the forget gate (+1).
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let (d, h) = (self.input, self.hidden);
        params.insert(self.w_x.clone(), Tensor::glorot(&[4 * h, d], d, 4 * h, rng));
        params.insert(self.w_h.clone(), Tensor::glorot(&[4 * h, h], h, 4 * h, rng));
        let mut b = Tensor::zeros(&[4 * h]);
        b.values[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        params.insert(self.bias.clone(), b);
    }

    fn check(&self, params: &Params, seq: &[f64], h0: &[f64], c0: &[f64]) -> Result<()> {
        let (d, h) = (self.input, self.hidden);
        if seq.len() % d != 0 || h0.len() != h || c0.len() != h {
            return Err(Error::ShapeMismatch(format!(
                "lstm `{}` expects rows of width {d} and states of width {h}, got {} values, h0 {}, c0 {}",
                self.w_x,
                seq.len(),
                h0.len(),
                c0.len()
            )));
        }
        for (name, shape) in [
            (&self.w_x, vec![4 * h, d]),
            (&self.w_h, vec![4 * h, h]),
            (&self.bias, vec![4 * h]),
        ] {
            let t = params.get(name)?;
            if t.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
        }
        Ok(())
    }

    /// Runs the recurrence over a `steps × input` sequence.
    pub fn forward(&self, params: &Params, seq: &[f64], h0: &[f64], c0: &[f64]) -> Result<LstmTrace> {
        self.check(params, seq, h0, c0)?;
        let (d, h) = (self.input, self.hidden);
        let wx = params.values(&self.w_x)?;
        let wh = params.values(&self.w_h)?;
        let b = params.values(&self.bias)?;
        let steps = seq.len() / d;

        let mut hs = Vec::with_capacity((steps + 1) * h);
        let mut cs = Vec::with_capacity((steps + 1) * h);
        hs.extend_from_slice(h0);
        cs.extend_from_slice(c0);
        let mut tanh_cs = Vec::with_capacity(steps * h);
        let mut gates = Vec::with_capacity(steps * 4 * h);
        let mut a = vec![0.0; 4 * h];

        for t in 0..steps {
            let x = &seq[t * d..(t + 1) * d];
            let h_prev = &hs[t * h..(t + 1) * h];
            for r in 0..4 * h {
                a[r] = b[r] + dot(&wx[r * d..(r + 1) * d], x) + dot(&wh[r * h..(r + 1) * h], h_prev);
            }
            for r in 0..h {
                gates.push(sigmoid(a[r]));
            }
            for r in h..2 * h {
                gates.push(sigmoid(a[r]));
            }
            for r in 2 * h..3 * h {
                gates.push(a[r].tanh());
            }
            for r in 3 * h..4 * h {
                gates.push(sigmoid(a[r]));
            }
            let g = &gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                let c = g[h + j] * cs[t * h + j] + g[j] * g[2 * h + j];
                let tc = c.tanh();
                cs.push(c);
                tanh_cs.push(tc);
                hs.push(g[3 * h + j] * tc);
            }
        }
        Ok(LstmTrace {
            steps,
            hidden: h,
            xs: seq.to_vec(),
            hs,
            cs,
            tanh_cs,
            gates,
        })
    }

    /// Backpropagation through time. `d_hidden` (optional, `steps × H`)
    /// carries gradients on every emitted hidden state; `d_h_final` and
    /// `d_c_final` those on the final states. Parameter gradients are
    /// accumulated into `grads`.
    pub fn backward(
        &self,
        params: &Params,
        trace: &LstmTrace,
        d_hidden: Option<&[f64]>,
        d_h_final: &[f64],
        d_c_final: &[f64],
        grads: &mut Params,
    ) -> Result<LstmInputGrads> {
        let (d, h) = (self.input, self.hidden);
        let steps = trace.steps;
        if let Some(dh) = d_hidden {
            if dh.len() != steps * h {
                return Err(Error::ShapeMismatch(format!(
                    "hidden-state gradient has {} values, expected {}",
                    dh.len(),
                    steps * h
                )));
            }
        }
        if d_h_final.len() != h || d_c_final.len() != h {
            return Err(Error::ShapeMismatch("final-state gradient width".into()));
        }
        let wx = params.values(&self.w_x)?;
        let wh = params.values(&self.w_h)?;

        let mut dwx = vec![0.0; wx.len()];
        let mut dwh = vec![0.0; wh.len()];
        let mut db = vec![0.0; 4 * h];
        let mut d_seq = vec![0.0; steps * d];
        let mut dh_next = d_h_final.to_vec();
        let mut dc_next = d_c_final.to_vec();
        let mut da = vec![0.0; 4 * h];

        for t in (0..steps).rev() {
            let g = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
            let c_prev = &trace.cs[t * h..(t + 1) * h];
            let tanh_c = &trace.tanh_cs[t * h..(t + 1) * h];
            let h_prev = &trace.hs[t * h..(t + 1) * h];
            let x = &trace.xs[t * d..(t + 1) * d];
            for j in 0..h {
                let dh = dh_next[j] + d_hidden.map_or(0.0, |v| v[t * h + j]);
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let d_o = dh * tanh_c[j];
                let dc = dc_next[j] + dh * o * (1.0 - tanh_c[j] * tanh_c[j]);
                da[j] = dc * gg * i * (1.0 - i);
                da[h + j] = dc * c_prev[j] * f * (1.0 - f);
                da[2 * h + j] = dc * i * (1.0 - gg * gg);
                da[3 * h + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            let dx = &mut d_seq[t * d..(t + 1) * d];
            for r in 0..4 * h {
                let a = da[r];
                if a == 0.0 {
                    continue;
                }
                db[r] += a;
                axpy(a, x, &mut dwx[r * d..(r + 1) * d]);
                axpy(a, h_prev, &mut dwh[r * h..(r + 1) * h]);
                axpy(a, &wx[r * d..(r + 1) * d], dx);
                axpy(a, &wh[r * h..(r + 1) * h], &mut dh_next);
            }
        }
        accumulate(grads, &self.w_x, &dwx)?;
        accumulate(grads, &self.w_h, &dwh)?;
        accumulate(grads, &self.bias, &db)?;
        Ok(LstmInputGrads {
            d_seq,
            d_h0: dh_next,
            d_c0: dc_next,
        })
    }
}

/// Functional form of [`Lstm::forward`]: all hidden states plus final (h, c).
pub fn lstm_forward(
    lstm: &Lstm,
    params: &Params,
    seq: &[f64],
    h0: &[f64],
    c0: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let trace = lstm.forward(params, seq, h0, c0)?;
    Ok((
        trace.hidden_states().to_vec(),
        trace.final_h().to_vec(),
        trace.final_c().to_vec(),
    ))
}

/// Functional form of [`Dense::forward`].
pub fn dense_forward(dense: &Dense, params: &Params, x: &[f64]) -> Result<Vec<f64>> {
    dense.forward(params, x)
}
