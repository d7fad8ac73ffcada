//! Small fully connected network with Adam updates, used as the critic.
//!
//! Activations are row-major `f32` buffers (`rows x width`) and every
//! product goes straight to `sgemm`; transposed operands are expressed
//! through strides instead of copies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut [f32]) {
        match self {
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
        }
    }

    /// Multiplies `grad` by the derivative, given the activated output `a`.
    fn backprop(self, a: &[f32], grad: &mut [f32]) {
        match self {
            Activation::Relu => grad.iter_mut().zip(a).for_each(|(g, &a)| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.iter_mut().zip(a).for_each(|(g, &a)| *g *= 1.0 - a * a),
        }
    }
}

/// `c = a * b` for an `m x k` by `k x n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the
    // slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    /// Row-major `fan_in x fan_out`.
    w: Vec<f32>,
    b: Vec<f32>,
    // Adam moments.
    mw: Vec<f32>,
    vw: Vec<f32>,
    mb: Vec<f32>,
    vb: Vec<f32>,
}

/// Feed-forward network `R^in -> R` with a linear output unit.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
    lr: f32,
    step: i32,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Forward-pass cache for backprop.
pub struct Tape {
    rows: usize,
    /// Input followed by the activated output of every hidden layer.
    acts: Vec<Vec<f32>>,
    pub out: Vec<f32>,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], activation: Activation, lr: f32, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = match activation {
                    Activation::Relu => (6.0 / fan_in as f32).sqrt(),
                    Activation::Tanh => (6.0 / (fan_in + fan_out) as f32).sqrt(),
                };
                let size = fan_in * fan_out;
                Layer {
                    fan_in,
                    fan_out,
                    w: (0..size).map(|_| rng.random_range(-bound..bound)).collect(),
                    b: vec![0.0; fan_out],
                    mw: vec![0.0; size],
                    vw: vec![0.0; size],
                    mb: vec![0.0; fan_out],
                    vb: vec![0.0; fan_out],
                }
            })
            .collect();
        Self {
            layers,
            activation,
            lr,
            step: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    /// Forward pass over a row-major batch of `rows x input_dim`.
    pub fn forward(&self, x: Vec<f32>, rows: usize) -> Tape {
        assert_eq!(x.len(), rows * self.input_dim());
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            let mut z = vec![0.0f32; rows * fo];
            gemm(rows, fi, fo, &h, (fi, 1), &layer.w, (fo, 1), &mut z);
            for row in z.chunks_exact_mut(fo) {
                row.iter_mut().zip(&layer.b).for_each(|(v, b)| *v += b);
            }
            if li < last {
                self.activation.apply(&mut z);
            }
            acts.push(h);
            h = z;
        }
        Tape { rows, acts, out: h }
    }

    /// Backprop of `d loss / d out` followed by one Adam step.
    pub fn backward_step(&mut self, tape: Tape, grad_out: &[f32]) {
        let rows = tape.rows;
        assert_eq!(grad_out.len(), rows);
        self.step += 1;
        let t = self.step;
        let lr_t = self.lr * (1.0 - BETA2.powi(t)).sqrt() / (1.0 - BETA1.powi(t));
        let mut grad = grad_out.to_vec();
        let mut acts = tape.acts;
        for li in (0..self.layers.len()).rev() {
            let input = acts.pop().expect("one activation per layer");
            let (fi, fo) = (self.layers[li].fan_in, self.layers[li].fan_out);
            // dW = input^T * grad.
            let mut gw = vec![0.0f32; fi * fo];
            gemm(fi, rows, fo, &input, (1, fi), &grad, (fo, 1), &mut gw);
            let mut gb = vec![0.0f32; fo];
            for row in grad.chunks_exact(fo) {
                gb.iter_mut().zip(row).for_each(|(s, g)| *s += g);
            }
            if li > 0 {
                // d input = grad * W^T.
                let mut next = vec![0.0f32; rows * fi];
                gemm(rows, fo, fi, &grad, (fo, 1), &self.layers[li].w, (1, fo), &mut next);
                self.activation.backprop(&input, &mut next);
                grad = next;
            }
            let layer = &mut self.layers[li];
            adam(&mut layer.w, &mut layer.mw, &mut layer.vw, &gw, lr_t);
            adam(&mut layer.b, &mut layer.mb, &mut layer.vb, &gb, lr_t);
        }
    }
}

fn adam(p: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32], lr_t: f32) {
    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr_t * *m / (v.sqrt() + ADAM_EPS);
    }
}
