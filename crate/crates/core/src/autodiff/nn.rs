//! Small networks expressed as tape operations.

use rand::Rng;

use super::tape::matvec_raw;
use super::{AdError, ParamVector, Tape, Var};

/// Fully connected layout: `sizes[0]` inputs, `tanh` hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub sizes: Vec<usize>,
}

impl LayerSpec {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output widths");
        Self { sizes }
    }

    /// `input -> hidden -> hidden -> output`.
    pub fn two_hidden(input: usize, hidden: usize, output: usize) -> Self {
        Self::new(vec![input, hidden, hidden, output])
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// `(len, fan_in)` for each weight and bias block.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        self.sizes
            .windows(2)
            .flat_map(|w| [(w[1] * w[0], w[0]), (w[1], w[0])])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.0).sum()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        ParamVector::init_uniform(&self.blocks(), rng)
    }

    /// Plain forward pass without recording, for rollouts.
    pub fn eval(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        assert_eq!(params.len(), self.param_count());
        assert_eq!(input.len(), self.input());
        let mut h = input.to_vec();
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for (i, w) in self.sizes.windows(2).enumerate() {
            let (cols, rows) = (w[0], w[1]);
            let mut z = matvec_raw(&params[off..off + rows * cols], &h, rows, cols);
            off += rows * cols;
            for (zi, bi) in z.iter_mut().zip(&params[off..off + rows]) {
                *zi += bi;
            }
            off += rows;
            if i != last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = z;
        }
        h
    }
}

/// An MLP whose weights have been sliced out of a parameter node.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(Var, Var, usize, usize)>,
}

impl Mlp {
    pub fn bind(tape: &mut Tape, params: Var, spec: &LayerSpec) -> Result<Self, AdError> {
        let expected = spec.param_count();
        if params.len() != expected {
            return Err(AdError::ShapeMismatch {
                expected,
                found: params.len(),
            });
        }
        let mut off = 0;
        let mut layers = Vec::new();
        for w in spec.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = tape.slice(params, off, fan_in * fan_out);
            off += fan_in * fan_out;
            let bias = tape.slice(params, off, fan_out);
            off += fan_out;
            layers.push((weight, bias, fan_out, fan_in));
        }
        Ok(Self { layers })
    }

    pub fn input(&self) -> usize {
        self.layers[0].3
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var, AdError> {
        if input.len() != self.input() {
            return Err(AdError::ShapeMismatch {
                expected: self.input(),
                found: input.len(),
            });
        }
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, &(w, b, rows, cols)) in self.layers.iter().enumerate() {
            let z = tape.matvec(w, h, rows, cols);
            let z = tape.add(z, b);
            h = if i == last { z } else { tape.tanh(z) };
        }
        Ok(h)
    }

    pub fn forward_values(&self, tape: &mut Tape, input: &[f64]) -> Result<Var, AdError> {
        let x = tape.constant(input.to_vec());
        self.forward(tape, x)
    }
}

/// One-shot MLP evaluation on a tape.
pub fn mlp_forward(tape: &mut Tape, params: Var, spec: &LayerSpec, input: &[f64]) -> Result<Var, AdError> {
    Mlp::bind(tape, params, spec)?.forward_values(tape, input)
}

/// Stacked LSTM with a linear head applied to the top layer's hidden state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecurrentSpec {
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
    pub output: usize,
}

impl RecurrentSpec {
    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.input
        } else {
            self.hidden
        }
    }

    pub fn blocks(&self) -> Vec<(usize, usize)> {
        let h = self.hidden;
        let mut out = Vec::new();
        for l in 0..self.layers {
            let fan_in = self.layer_input(l) + h;
            out.push((4 * h * self.layer_input(l), fan_in));
            out.push((4 * h * h, fan_in));
            out.push((4 * h, fan_in));
        }
        out.push((self.output * h, h));
        out.push((self.output, h));
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.0).sum()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        ParamVector::init_uniform(&self.blocks(), rng)
    }

    /// Layer widths recorded in checkpoint headers.
    pub fn header(&self) -> Vec<u32> {
        let mut sizes = vec![self.input as u32];
        sizes.extend(std::iter::repeat(self.hidden as u32).take(self.layers));
        sizes.push(self.output as u32);
        sizes
    }

    pub fn from_header(sizes: &[u32]) -> Option<Self> {
        if sizes.len() < 3 {
            return None;
        }
        let hidden = sizes[1];
        if sizes[1..sizes.len() - 1].iter().any(|&h| h != hidden) {
            return None;
        }
        Some(Self {
            input: sizes[0] as usize,
            hidden: hidden as usize,
            layers: sizes.len() - 2,
            output: *sizes.last().unwrap() as usize,
        })
    }
}

#[derive(Debug, Clone)]
struct LstmLayer {
    w: Var,
    u: Var,
    b: Var,
    input: usize,
}

/// LSTM weights bound to a tape. Gate order: input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    spec: RecurrentSpec,
    layers: Vec<LstmLayer>,
    head_w: Var,
    head_b: Var,
}

impl Lstm {
    pub fn bind(tape: &mut Tape, params: Var, spec: &RecurrentSpec) -> Result<Self, AdError> {
        let expected = spec.param_count();
        if params.len() != expected {
            return Err(AdError::ShapeMismatch {
                expected,
                found: params.len(),
            });
        }
        let h = spec.hidden;
        let mut off = 0;
        let mut take = |tape: &mut Tape, n: usize| {
            let v = tape.slice(params, off, n);
            off += n;
            v
        };
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let input = spec.layer_input(l);
            let w = take(tape, 4 * h * input);
            let u = take(tape, 4 * h * h);
            let b = take(tape, 4 * h);
            layers.push(LstmLayer { w, u, b, input });
        }
        let head_w = take(tape, spec.output * h);
        let head_b = take(tape, spec.output);
        Ok(Self {
            spec: spec.clone(),
            layers,
            head_w,
            head_b,
        })
    }

    /// Head logits after every element of `seq`.
    pub fn forward_all(&self, tape: &mut Tape, seq: &[Vec<f64>]) -> Result<Vec<Var>, AdError> {
        if seq.is_empty() {
            return Err(AdError::EmptySequence);
        }
        if let Some(bad) = seq.iter().find(|x| x.len() != self.spec.input) {
            return Err(AdError::ShapeMismatch {
                expected: self.spec.input,
                found: bad.len(),
            });
        }
        let h = self.spec.hidden;
        let zeros = tape.constant(vec![0.0; h]);
        let mut state: Vec<(Var, Var)> = vec![(zeros, zeros); self.layers.len()];
        let mut out = Vec::with_capacity(seq.len());
        for x in seq {
            let mut input = tape.constant(x.clone());
            for (layer, st) in self.layers.iter().zip(state.iter_mut()) {
                let (hn, cn) = cell(tape, layer, h, input, st.0, st.1);
                *st = (hn, cn);
                input = hn;
            }
            let z = tape.matvec(self.head_w, input, self.spec.output, h);
            out.push(tape.add(z, self.head_b));
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape, seq: &[Vec<f64>]) -> Result<Var, AdError> {
        Ok(*self.forward_all(tape, seq)?.last().unwrap())
    }
}

fn cell(tape: &mut Tape, layer: &LstmLayer, h: usize, x: Var, h_prev: Var, c_prev: Var) -> (Var, Var) {
    let wx = tape.matvec(layer.w, x, 4 * h, layer.input);
    let uh = tape.matvec(layer.u, h_prev, 4 * h, h);
    let z = tape.add(wx, uh);
    let z = tape.add(z, layer.b);
    let zi = tape.slice(z, 0, h);
    let zf = tape.slice(z, h, h);
    let zg = tape.slice(z, 2 * h, h);
    let zo = tape.slice(z, 3 * h, h);
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, c_prev);
    let ig = tape.mul(i, g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let hn = tape.mul(o, tc);
    (hn, c)
}

/// One-shot LSTM evaluation returning the final-step logits.
pub fn rnn_forward(tape: &mut Tape, params: Var, spec: &RecurrentSpec, sequence: &[Vec<f64>]) -> Result<Var, AdError> {
    Lstm::bind(tape, params, spec)?.forward(tape, sequence)
}
