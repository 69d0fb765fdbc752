//! Small multilayer perceptron engine.
//!
//! Batches are stored column-wise: a `(features × batch)` matrix holds one
//! sample per column. Reverse mode gives parameter gradients; forward mode
//! (tangent propagation) gives input Jacobians and Jacobian-vector products.
//! [`Mlp::forward_dual`] and [`Mlp::backward_dual`] differentiate a loss that
//! depends on both the output and a Jacobian-vector product, which the
//! PDE-residual loss of the autoencoder needs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KklError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
    Identity,
}

#[inline]
fn sigmoid<T: Scalar>(u: T) -> T {
    T::one() / (T::one() + (-u).exp())
}

/// `u · sigmoid(u)`.
#[inline]
pub fn silu<T: Scalar>(u: T) -> T {
    u * sigmoid(u)
}

#[inline]
pub fn silu_prime<T: Scalar>(u: T) -> T {
    let s = sigmoid(u);
    s * (T::one() + u * (T::one() - s))
}

#[inline]
pub fn silu_second<T: Scalar>(u: T) -> T {
    let s = sigmoid(u);
    s * (T::one() - s) * (T::lit(2.0) + u * (T::one() - T::lit(2.0) * s))
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, u: T) -> T {
        match self {
            Activation::Silu => silu(u),
            Activation::Tanh => u.tanh(),
            Activation::Identity => u,
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, u: T) -> T {
        match self {
            Activation::Silu => silu_prime(u),
            Activation::Tanh => {
                let t = u.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }

    #[inline]
    pub fn second_derivative<T: Scalar>(self, u: T) -> T {
        match self {
            Activation::Silu => silu_second(u),
            Activation::Tanh => {
                let t = u.tanh();
                T::lit(-2.0) * t * (T::one() - t * t)
            }
            Activation::Identity => T::zero(),
        }
    }
}

/// Weights and biases of one network. Hidden layers use `activation`, the
/// output layer is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Scalar> {
    pub layer_sizes: Vec<usize>,
    /// `weights[k]` is `layer_sizes[k+1] × layer_sizes[k]`.
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
    pub activation: Activation,
}

/// Gradient with the same layout as [`Mlp`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<T: Scalar> {
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
}

impl<T: Scalar> MlpGrads<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn max_abs(&self) -> T {
        self.slices().iter().flat_map(|s| s.iter()).fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Intermediate values of a batched primal pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Scalar> {
    /// Input to each layer.
    inputs: Vec<DMatrix<T>>,
    /// Pre-activation of each layer.
    pre: Vec<DMatrix<T>>,
}

/// Intermediate values of a batched primal + tangent pass.
#[derive(Clone, Debug)]
pub struct DualCache<T: Scalar> {
    inputs: Vec<DMatrix<T>>,
    input_tangents: Vec<DMatrix<T>>,
    pre: Vec<DMatrix<T>>,
    pre_tangents: Vec<DMatrix<T>>,
}

fn add_bias<T: Scalar>(m: &mut DMatrix<T>, b: &DVector<T>) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

fn row_sums<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    let mut out = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        out += col;
    }
    out
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(KklError::InvalidInput(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| T::lit(rng.gen_range(-limit..limit))));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), weights, biases, activation })
    }

    /// Single affine layer `x ↦ W x + b`.
    pub fn affine(w: DMatrix<T>, b: DVector<T>) -> Result<Self> {
        if w.nrows() != b.len() || w.nrows() == 0 || w.ncols() == 0 {
            return Err(KklError::InvalidInput("affine layer shape mismatch".into()));
        }
        Ok(Self { layer_sizes: vec![w.ncols(), w.nrows()], weights: vec![w], biases: vec![b], activation: Activation::Identity })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn act_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            Activation::Identity
        } else {
            self.activation
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() != self.weights.len() + 1 || self.weights.len() != self.biases.len() {
            return Err(KklError::InvalidInput("layer count mismatch".into()));
        }
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.shape() != (self.layer_sizes[k + 1], self.layer_sizes[k]) || b.len() != self.layer_sizes[k + 1] {
                return Err(KklError::InvalidInput(format!("layer {k} has inconsistent shape")));
            }
            if !w.iter().chain(b.iter()).all(|v| v.is_finite()) {
                return Err(KklError::InvalidInput(format!("layer {k} has non-finite parameters")));
            }
        }
        Ok(())
    }

    fn check_batch(&self, x: &DMatrix<T>) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(KklError::InvalidInput(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        Ok(())
    }

    /// Evaluates one input vector.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward_batch(&x)?.as_slice().to_vec())
    }

    /// Evaluates a batch (one sample per column).
    pub fn forward_batch(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.check_batch(x)?;
        let mut h = x.clone();
        for k in 0..self.num_layers() {
            let mut a = &self.weights[k] * &h;
            add_bias(&mut a, &self.biases[k]);
            let act = self.act_for(k);
            if act != Activation::Identity {
                a.apply(|v| *v = act.apply(*v));
            }
            h = a;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &DMatrix<T>) -> Result<(DMatrix<T>, ForwardCache<T>)> {
        self.check_batch(x)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut h = x.clone();
        for k in 0..self.num_layers() {
            let mut a = &self.weights[k] * &h;
            add_bias(&mut a, &self.biases[k]);
            let act = self.act_for(k);
            let out = a.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(a);
            h = out;
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Back-propagates `∂L/∂output` through a cached pass. Returns the
    /// parameter gradient and `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache<T>, out_grad: &DMatrix<T>) -> (MlpGrads<T>, DMatrix<T>) {
        let n = self.num_layers();
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = out_grad.clone();
        for k in (0..n).rev() {
            let act = self.act_for(k);
            if act != Activation::Identity {
                g.zip_apply(&cache.pre[k], |gv, a| *gv *= act.derivative(a));
            }
            grads.weights[k] = &g * cache.inputs[k].transpose();
            grads.biases[k] = row_sums(&g);
            g = self.weights[k].transpose() * &g;
        }
        (grads, g)
    }

    /// Mean-squared-error loss `1/(2B) Σ‖net(x) − y‖²` and its gradient.
    pub fn grad_mse(&self, x: &DMatrix<T>, target: &DMatrix<T>) -> Result<(T, MlpGrads<T>)> {
        if x.ncols() == 0 || x.ncols() != target.ncols() || target.nrows() != self.output_dim() {
            return Err(KklError::InvalidInput("batch and target shapes do not match".into()));
        }
        let (out, cache) = self.forward_cached(x)?;
        let inv_b = T::one() / T::from_usize(x.ncols()).expect("batch size");
        let diff = out - target;
        let loss = diff.iter().map(|&d| d * d).sum::<T>() * inv_b * T::lit(0.5);
        let (grads, _) = self.backward(&cache, &(diff * inv_b));
        Ok((loss, grads))
    }

    /// Primal and tangent pass: returns `net(x)` and `J(x) v` per column.
    pub fn forward_dual(&self, x: &DMatrix<T>, v: &DMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>, DualCache<T>)> {
        self.check_batch(x)?;
        if v.shape() != x.shape() {
            return Err(KklError::InvalidInput("tangent batch must match input batch".into()));
        }
        let n = self.num_layers();
        let mut cache = DualCache {
            inputs: Vec::with_capacity(n),
            input_tangents: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            pre_tangents: Vec::with_capacity(n),
        };
        let mut h = x.clone();
        let mut hd = v.clone();
        for k in 0..n {
            let mut a = &self.weights[k] * &h;
            add_bias(&mut a, &self.biases[k]);
            let ad = &self.weights[k] * &hd;
            let act = self.act_for(k);
            let out = a.map(|u| act.apply(u));
            let mut outd = ad.clone();
            if act != Activation::Identity {
                outd.zip_apply(&a, |t, u| *t *= act.derivative(u));
            }
            cache.inputs.push(h);
            cache.input_tangents.push(hd);
            cache.pre.push(a);
            cache.pre_tangents.push(ad);
            h = out;
            hd = outd;
        }
        Ok((h, hd, cache))
    }

    /// Reverse pass through [`Mlp::forward_dual`] given adjoints of the
    /// output and of the output tangent.
    pub fn backward_dual(&self, cache: &DualCache<T>, out_grad: &DMatrix<T>, tangent_grad: &DMatrix<T>) -> MlpGrads<T> {
        let n = self.num_layers();
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = out_grad.clone();
        let mut gd = tangent_grad.clone();
        for k in (0..n).rev() {
            let act = self.act_for(k);
            if act != Activation::Identity {
                // a̅ = o̅ σ'(a) + ȯ̅ σ''(a) ȧ ;  ȧ̅ = ȯ̅ σ'(a)
                let a = &cache.pre[k];
                let ad = &cache.pre_tangents[k];
                for i in 0..g.len() {
                    let (u, ud) = (a[i], ad[i]);
                    let d1 = act.derivative(u);
                    g[i] = g[i] * d1 + gd[i] * act.second_derivative(u) * ud;
                    gd[i] *= d1;
                }
            }
            grads.weights[k] = &g * cache.inputs[k].transpose() + &gd * cache.input_tangents[k].transpose();
            grads.biases[k] = row_sums(&g);
            if k > 0 {
                let wt = self.weights[k].transpose();
                g = &wt * &g;
                gd = &wt * &gd;
            }
        }
        grads
    }

    /// Jacobian `∂net/∂input` (output-dim × input-dim) by forward mode.
    pub fn input_jacobian(&self, input: &[T]) -> Result<DMatrix<T>> {
        if input.len() != self.input_dim() {
            return Err(KklError::InvalidInput(format!("network expects {} inputs, got {}", self.input_dim(), input.len())));
        }
        let mut h = DVector::from_column_slice(input);
        let mut tangent = DMatrix::<T>::identity(input.len(), input.len());
        for k in 0..self.num_layers() {
            let a = &self.weights[k] * &h + &self.biases[k];
            let mut td = &self.weights[k] * &tangent;
            let act = self.act_for(k);
            if act != Activation::Identity {
                for (i, &u) in a.iter().enumerate() {
                    let d = act.derivative(u);
                    td.row_mut(i).apply(|t| *t *= d);
                }
            }
            h = a.map(|u| act.apply(u));
            tangent = td;
        }
        Ok(tangent)
    }

    /// Jacobian-vector product `J(x) v` for a single sample.
    pub fn jvp(&self, input: &[T], v: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        let t = DMatrix::from_column_slice(v.len(), 1, v);
        let (out, outd, _) = self.forward_dual(&x, &t)?;
        Ok((out.as_slice().to_vec(), outd.as_slice().to_vec()))
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    /// Casts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.iter().map(|w| w.map(|v| U::lit(v.as_f64()))).collect(),
            biases: self.biases.iter().map(|b| b.map(|v| U::lit(v.as_f64()))).collect(),
            activation: self.activation,
        }
    }

    pub fn to_doc(&self) -> MlpDoc {
        MlpDoc {
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            weights: self
                .weights
                .iter()
                .map(|w| w.row_iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.iter().map(|v| v.as_f64()).collect()).collect(),
        }
    }

    pub fn from_doc(doc: &MlpDoc) -> Result<Self> {
        let mut weights = Vec::new();
        for (k, rows) in doc.weights.iter().enumerate() {
            let r = rows.len();
            let c = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|row| row.len() != c) {
                return Err(KklError::InvalidInput(format!("ragged weight matrix in layer {k}")));
            }
            weights.push(DMatrix::from_fn(r, c, |i, j| T::lit(rows[i][j])));
        }
        let biases = doc.biases.iter().map(|b| DVector::from_iterator(b.len(), b.iter().map(|&v| T::lit(v)))).collect();
        let net = Self { layer_sizes: doc.layer_sizes.clone(), weights, biases, activation: doc.activation };
        net.validate()?;
        Ok(net)
    }
}

/// Serialized network: row-major weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpDoc {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

/// Componentwise standardization `(v − mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

pub const SCALE_FLOOR: f64 = 1e-8;

impl<T: Scalar> Normalizer<T> {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], scale: vec![T::one(); dim] }
    }

    /// Fits mean and (population) standard deviation over rows.
    pub fn fit<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [T]>,
    {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let rows: Vec<&[T]> = rows.into_iter().collect();
        for r in &rows {
            if count == 0 {
                sum = vec![0.0; r.len()];
                sq = vec![0.0; r.len()];
            } else if r.len() != sum.len() {
                return Err(KklError::InvalidInput("rows of unequal length".into()));
            }
            for (s, v) in sum.iter_mut().zip(r.iter()) {
                *s += v.as_f64();
            }
            count += 1;
        }
        if count == 0 {
            return Err(KklError::InvalidInput("cannot fit a normalizer on empty data".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for r in &rows {
            for (k, v) in r.iter().enumerate() {
                let d = v.as_f64() - mean[k];
                sq[k] += d * d;
            }
        }
        let scale = sq
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let std = (s / count as f64).sqrt();
                if std < SCALE_FLOOR {
                    log::warn!("component {k} has (near) zero variance; flooring its scale at {SCALE_FLOOR:e}");
                    SCALE_FLOOR
                } else {
                    std
                }
            })
            .map(T::lit)
            .collect();
        Ok(Self { mean: mean.into_iter().map(T::lit).collect(), scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn transform_into(&self, v: &[T], out: &mut [T]) {
        for k in 0..self.mean.len() {
            out[k] = (v[k] - self.mean[k]) / self.scale[k];
        }
    }

    pub fn transform(&self, v: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.transform_into(v, &mut out);
        out
    }

    pub fn inverse(&self, v: &[T]) -> Vec<T> {
        v.iter().zip(self.mean.iter().zip(&self.scale)).map(|(&x, (&m, &s))| x * s + m).collect()
    }

    /// Standardizes every column of a batch in place.
    pub fn transform_batch(&self, m: &mut DMatrix<T>) {
        for mut col in m.column_iter_mut() {
            for k in 0..self.mean.len() {
                col[k] = (col[k] - self.mean[k]) / self.scale[k];
            }
        }
    }

    pub fn inverse_batch(&self, m: &mut DMatrix<T>) {
        for mut col in m.column_iter_mut() {
            for k in 0..self.mean.len() {
                col[k] = col[k] * self.scale[k] + self.mean[k];
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Normalizer<U> {
        Normalizer {
            mean: self.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            scale: self.scale.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Adaptive-moment optimizer over a list of flat parameter slices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_defaults(lr: T) -> Self {
        Self::new(lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(30.0f64) - 30.0).abs() < 1e-9);
        assert_eq!(silu_prime(0.0f64), 0.5);
        for u in [-3.0f64, -0.4, 0.0, 0.7, 2.5] {
            let h = 1e-5;
            let fd = (silu(u + h) - silu(u - h)) / (2.0 * h);
            assert!((fd - silu_prime(u)).abs() < 1e-9);
            let fd2 = (silu_prime(u + h) - silu_prime(u - h)) / (2.0 * h);
            assert!((fd2 - silu_second(u)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut net = Mlp::<f64>::new(&[2, 4, 3], Activation::Silu, &mut rng()).unwrap();
        for w in net.weights.iter_mut() {
            w.fill(0.0);
        }
        net.biases[1] = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(net.forward(&[0.3, 0.9]).unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn affine_layer() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0f64, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let b = DVector::from_vec(vec![0.1, 0.2]);
        let net = Mlp::affine(w.clone(), b).unwrap();
        let y = net.forward(&[1.0, 1.0, 1.0]).unwrap();
        assert!((y[0] - 6.1).abs() < 1e-14 && (y[1] + 0.3).abs() < 1e-14);
        assert_eq!(net.input_jacobian(&[0.2, -3.0, 4.0]).unwrap(), w);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn identity_hidden_layer_on_large_inputs() {
        let mut net = Mlp::<f64>::new(&[2, 2, 2], Activation::Silu, &mut rng()).unwrap();
        net.weights[0] = DMatrix::identity(2, 2);
        net.weights[1] = DMatrix::identity(2, 2);
        net.biases[0] = DVector::from_vec(vec![1.0, 2.0]);
        net.biases[1] = DVector::zeros(2);
        let y = net.forward(&[40.0, 50.0]).unwrap();
        assert!((y[0] - 41.0).abs() < 1e-9 && (y[1] - 52.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let net = Mlp::<f64>::new(&[2, 5, 2], Activation::Silu, &mut rng()).unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, -0.5, 0.4, 0.0]);
        let y = net.forward_batch(&x).unwrap();
        let (loss, g) = net.grad_mse(&x, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn duplicated_batch_keeps_gradient() {
        let net = Mlp::<f64>::new(&[2, 6, 2], Activation::Silu, &mut rng()).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[0.1, 0.7, -0.5, 0.4]);
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, -1.0]);
        let x2 = DMatrix::from_fn(2, 4, |i, j| x[(i, j % 2)]);
        let y2 = DMatrix::from_fn(2, 4, |i, j| y[(i, j % 2)]);
        let (l1, g1) = net.grad_mse(&x, &y).unwrap();
        let (l2, g2) = net.grad_mse(&x2, &y2).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.slices().iter().zip(g2.slices()) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dual_pass_matches_jacobian() {
        let net = Mlp::<f64>::new(&[3, 8, 8, 2], Activation::Silu, &mut rng()).unwrap();
        let x = [0.3, -0.2, 0.9];
        let v = [1.0, 0.5, -2.0];
        let jac = net.input_jacobian(&x).unwrap();
        let (_, jv) = net.jvp(&x, &v).unwrap();
        let expect = &jac * DVector::from_column_slice(&v);
        for i in 0..2 {
            assert!((jv[i] - expect[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn tanh_second_derivative() {
        for u in [-1.2f64, 0.0, 0.8] {
            let h = 1e-5;
            let fd = (Activation::Tanh.derivative(u + h) - Activation::Tanh.derivative(u - h)) / (2.0 * h);
            assert!((fd - Activation::Tanh.second_derivative(u)).abs() < 1e-9);
        }
    }

    #[test]
    fn normalizer_roundtrip_and_floor() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![2.0, 5.0]];
        let n = Normalizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.scale[1], SCALE_FLOOR);
        let v = [1.234, 5.0];
        let back = n.inverse(&n.transform(&v));
        assert!((back[0] - v[0]).abs() < 1e-12 && (back[1] - v[1]).abs() < 1e-12);
        let empty: Vec<&[f64]> = vec![];
        assert!(Normalizer::fit(empty).is_err());
    }

    #[test]
    fn doc_roundtrip() {
        let net = Mlp::<f64>::new(&[3, 4, 2], Activation::Silu, &mut rng()).unwrap();
        let doc = net.to_doc();
        assert_eq!(doc.weights[0].len(), 4);
        assert_eq!(doc.weights[0][0].len(), 3);
        assert_eq!(doc.weights[0][1][2], net.weights[0][(1, 2)]);
        assert_eq!(Mlp::<f64>::from_doc(&doc).unwrap(), net);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::with_defaults(0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut [p.as_mut_slice()], &[g.as_slice()]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }
}
