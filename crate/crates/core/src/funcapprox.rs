//! Fully connected ReLU networks with hand-written reverse mode and Adam.
//!
//! Parameters of all layers live in one flat vector. Layer `l` stores its
//! weight matrix row-major as `[in × out]` followed by `out` biases, so a
//! forward pass is `x · W + b`.

use std::io::{self, Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::rng::Rng;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FaError {
    #[error("input has {got} columns, network expects {expected}")]
    InputDim { got: usize, expected: usize },
    #[error("output gradient is {got:?}, expected {expected:?}")]
    GradShape { got: (usize, usize), expected: (usize, usize) },
    #[error("tape was recorded for a different network")]
    TapeMismatch,
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    layer_shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    grads: Vec<f64>,
    moment1: Vec<f64>,
    moment2: Vec<f64>,
    step_count: u64,
}

/// Per-layer caches from one forward pass: the input to every layer and the
/// pre-activation of every hidden layer.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    shapes: Vec<(usize, usize)>,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl ForwardTape {
    pub fn batch(&self) -> usize {
        self.inputs[0].nrows()
    }
}

fn offsets_for(shapes: &[(usize, usize)]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut n = 0;
    for &(i, o) in shapes {
        offsets.push(n);
        n += i * o + o;
    }
    (offsets, n)
}

impl ParamStore {
    /// All-zero network with the given `(in, out)` layer shapes.
    pub fn zeros(layer_shapes: Vec<(usize, usize)>) -> Self {
        assert!(!layer_shapes.is_empty(), "network needs at least one layer");
        for w in layer_shapes.windows(2) {
            assert_eq!(w[0].1, w[1].0, "layer shapes do not chain");
        }
        let (offsets, n) = offsets_for(&layer_shapes);
        Self {
            layer_shapes,
            offsets,
            params: vec![0.0; n],
            grads: vec![0.0; n],
            moment1: vec![0.0; n],
            moment2: vec![0.0; n],
            step_count: 0,
        }
    }

    /// MLP `input → hidden… → output`, weights uniform in ±√(1/in), biases 0.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, rng: &mut Rng) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let shapes: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        let mut p = Self::zeros(shapes);
        for l in 0..p.layer_shapes.len() {
            let (i, o) = p.layer_shapes[l];
            let bound = (1.0 / i as f64).sqrt();
            let off = p.offsets[l];
            for w in &mut p.params[off..off + i * o] {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        p
    }

    pub fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.layer_shapes
    }

    pub fn in_dim(&self) -> usize {
        self.layer_shapes[0].0
    }

    pub fn out_dim(&self) -> usize {
        self.layer_shapes[self.layer_shapes.len() - 1].1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let (i, o) = self.layer_shapes[l];
        let off = self.offsets[l];
        ArrayView2::from_shape((i, o), &self.params[off..off + i * o]).expect("layer slice")
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (i, o) = self.layer_shapes[l];
        let off = self.offsets[l] + i * o;
        &self.params[off..off + o]
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), FaError> {
        if x.ncols() != self.in_dim() {
            return Err(FaError::InputDim {
                got: x.ncols(),
                expected: self.in_dim(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights(l));
        let b = self.bias(l);
        for mut row in z.rows_mut() {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        z
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, FaError> {
        self.check_input(&x)?;
        let last = self.layer_shapes.len() - 1;
        let mut h = self.affine(0, &x);
        for l in 1..=last {
            h.mapv_inplace(|v| v.max(0.0));
            h = self.affine(l, &h.view());
        }
        Ok(h)
    }

    /// Single-row convenience wrapper around [`predict`](Self::predict).
    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>, FaError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardTape), FaError> {
        self.check_input(&x)?;
        let layers = self.layer_shapes.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let mut h = x.to_owned();
        for l in 0..layers {
            let z = self.affine(l, &h.view());
            inputs.push(h);
            if l + 1 == layers {
                let tape = ForwardTape {
                    shapes: self.layer_shapes.clone(),
                    inputs,
                    pre,
                };
                return Ok((z, tape));
            }
            h = z.mapv(|v| v.max(0.0));
            pre.push(z);
        }
        unreachable!("loop returns on the last layer")
    }

    /// Accumulates `∂L/∂params` into the gradient buffer given `∂L/∂y`, and
    /// returns `∂L/∂x`.
    pub fn backward(&mut self, tape: &ForwardTape, dy: ArrayView2<f64>) -> Result<Array2<f64>, FaError> {
        if tape.shapes != self.layer_shapes {
            return Err(FaError::TapeMismatch);
        }
        let expected = (tape.batch(), self.out_dim());
        if dy.dim() != expected {
            return Err(FaError::GradShape {
                got: dy.dim(),
                expected,
            });
        }
        let mut delta = dy.to_owned();
        for l in (0..self.layer_shapes.len()).rev() {
            let (i, o) = self.layer_shapes[l];
            let off = self.offsets[l];
            let gw = tape.inputs[l].t().dot(&delta);
            for (g, v) in self.grads[off..off + i * o].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, v) in self.grads[off + i * o..off + i * o + o].iter_mut().zip(gb.iter()) {
                *g += v;
            }
            let mut dx = delta.dot(&self.weights(l).t());
            if l > 0 {
                dx.zip_mut_with(&tape.pre[l - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = dx;
        }
        Ok(delta)
    }

    /// Clips the global gradient norm, applies one bias-corrected Adam update
    /// and zeroes the gradients. Returns the pre-clip norm.
    pub fn adam_step(&mut self, lr: f64, clip_norm: f64) -> Result<f64, FaError> {
        if let Some(index) = self.grads.iter().position(|g| !g.is_finite()) {
            return Err(FaError::NonFiniteGradient { index });
        }
        let norm = clip_global_norm(&mut self.grads, clip_norm);
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for k in 0..self.params.len() {
            let g = self.grads[k];
            self.moment1[k] = BETA1 * self.moment1[k] + (1.0 - BETA1) * g;
            self.moment2[k] = BETA2 * self.moment2[k] + (1.0 - BETA2) * g * g;
            let mh = self.moment1[k] / c1;
            let vh = self.moment2[k] / c2;
            self.params[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        self.zero_grads();
        Ok(norm)
    }

    /// Layer count, `(in, out)` pairs, then the parameters, all little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), FaError> {
        w.write_all(&(self.layer_shapes.len() as u64).to_le_bytes())?;
        for &(i, o) in &self.layer_shapes {
            w.write_all(&(i as u64).to_le_bytes())?;
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, FaError> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<u64, FaError> {
            r.read_exact(&mut word)
                .map_err(|e| FaError::Checkpoint(format!("truncated: {e}")))?;
            Ok(u64::from_le_bytes(word))
        };
        let layers = next(&mut r)? as usize;
        if layers == 0 || layers > 64 {
            return Err(FaError::Checkpoint(format!("implausible layer count {layers}")));
        }
        let mut shapes = Vec::with_capacity(layers);
        for _ in 0..layers {
            let i = next(&mut r)? as usize;
            let o = next(&mut r)? as usize;
            shapes.push((i, o));
        }
        if shapes.windows(2).any(|w| w[0].1 != w[1].0) {
            return Err(FaError::Checkpoint("layer shapes do not chain".into()));
        }
        let mut p = Self::zeros(shapes);
        for k in 0..p.params.len() {
            p.params[k] = f64::from_bits(next(&mut r)?);
        }
        Ok(p)
    }
}

/// Scales `grads` in place so that their L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}
