//! Training of the observer transformations.
//!
//! Two routes are provided:
//!
//! * supervised regression on backward-forward pairs, learning `T(x, ω_c)`
//!   and its pseudo-inverse `T*(z, ω_c)` as functions of the tuning frequency;
//! * an autoencoder trained from states only, whose loss combines the
//!   reconstruction error with the residual of the PDE
//!   `∂T/∂x(x) f(x) = D T(x) + F h(x)`, optionally optimizing the poles of `D`.
//!
//! Losses are evaluated in normalized network coordinates, except the PDE
//! residual, which is taken in raw coordinates by the chain rule through the
//! normalizers.

use std::io::Write;

use nalgebra::{Complex, DMatrix};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::SystemModel;
use crate::error::{KklError, Result};
use crate::export::write_header;
use crate::linfilter::{block_diagonal_from_poles, BesselNorm, FilterDesign, C64};
use crate::neural::{Activation, Adam, Mlp, MlpDoc, MlpGrads, Normalizer};
use crate::sampling::{Dataset, FilterMatrices};
use crate::scalar::Scalar;

/// How `ω_c` enters the networks as an extra input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmegaConditioning {
    #[default]
    Log10,
    Raw,
}

impl OmegaConditioning {
    pub fn feature<T: Scalar>(self, omega: T) -> T {
        match self {
            OmegaConditioning::Log10 => omega.log10(),
            OmegaConditioning::Raw => omega,
        }
    }
}

/// Frequency-dependent rescaling of `z` applied before normalization.
///
/// The filter's DC gain falls like `1/ω_c`, so `Omega` multiplies `z` by
/// `ω_c` to bring all frequencies to a comparable range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZScaling {
    None,
    #[default]
    Omega,
}

impl ZScaling {
    pub fn gain<T: Scalar>(self, omega: T) -> T {
        match self {
            ZScaling::None => T::one(),
            ZScaling::Omega => omega,
        }
    }
}

/// Optimizer and architecture settings shared by both trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Multiply the step size by `lr_decay` after this many stale epochs.
    pub lr_patience: Option<usize>,
    pub lr_decay: f64,
    pub min_lr: f64,
    pub omega_conditioning: OmegaConditioning,
    pub z_scaling: ZScaling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50; 5],
            activation: Activation::Silu,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1024,
            max_epochs: 100,
            val_fraction: 0.1,
            patience: 10,
            lr_patience: None,
            lr_decay: 0.5,
            min_lr: 1e-6,
            omega_conditioning: OmegaConditioning::Log10,
            z_scaling: ZScaling::Omega,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KklError::InvalidInput(format!("training config: {m}")));
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden layer sizes must be positive");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("lr, batch_size and max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_json(&serde_json::to_value(self).expect("config serializes"))
    }

    fn adam<T: Scalar>(&self) -> Adam<T> {
        Adam::new(T::lit(self.lr), T::lit(self.beta1), T::lit(self.beta2), T::lit(self.eps))
    }
}

/// Hex SHA-256 of a JSON value with sorted keys.
pub fn digest_json(value: &serde_json::Value) -> String {
    // serde_json maps are sorted (BTreeMap) unless preserve_order is enabled.
    let text = serde_json::to_string(value).expect("json value serializes");
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Training/validation index split, shuffled with the config seed.
fn split_indices(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = if n >= 10 { ((n as f64) * val_fraction).round() as usize } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn gather<T: Scalar>(m: &DMatrix<T>, cols: &[usize]) -> DMatrix<T> {
    let mut out = DMatrix::zeros(m.nrows(), cols.len());
    for (j, &c) in cols.iter().enumerate() {
        out.column_mut(j).copy_from(&m.column(c));
    }
    out
}

fn mse_value<T: Scalar>(net: &Mlp<T>, x: &DMatrix<T>, y: &DMatrix<T>) -> Result<T> {
    if x.ncols() == 0 {
        return Ok(T::zero());
    }
    let out = net.forward_batch(x)?;
    let n = T::from_usize(x.ncols()).expect("count");
    Ok((out - y).iter().map(|&d| d * d).sum::<T>() / n * T::lit(0.5))
}

/// Early-stopping and step-size bookkeeping for one parameter set.
#[derive(Clone, Debug)]
struct Monitor<P> {
    best: f64,
    best_params: Option<P>,
    stale: usize,
    lr_stale: usize,
    stopped: bool,
    epochs: usize,
}

impl<P: Clone> Monitor<P> {
    fn new() -> Self {
        Self { best: f64::INFINITY, best_params: None, stale: 0, lr_stale: 0, stopped: false, epochs: 0 }
    }

    /// Returns `true` when the step size should decay.
    fn observe(&mut self, val: f64, params: &P, cfg: &TrainConfig) -> bool {
        self.epochs += 1;
        if val < self.best {
            self.best = val;
            self.best_params = Some(params.clone());
            self.stale = 0;
            self.lr_stale = 0;
            return false;
        }
        self.stale += 1;
        self.lr_stale += 1;
        if self.stale >= cfg.patience {
            self.stopped = true;
        }
        match cfg.lr_patience {
            Some(p) if self.lr_stale >= p => {
                self.lr_stale = 0;
                true
            }
            _ => false,
        }
    }
}

fn decay<T: Scalar>(opt: &mut Adam<T>, cfg: &TrainConfig) {
    let next = (opt.lr.as_f64() * cfg.lr_decay).max(cfg.min_lr);
    opt.lr = T::lit(next);
}

/// One epoch of record in a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: Vec<f64>,
    pub val_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub columns: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|s| s.to_string()).collect(), epochs: Vec::new() }
    }

    /// Writes `epoch,<loss columns>` CSV.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut cols = vec!["epoch".to_string()];
        cols.extend(self.columns.iter().cloned());
        write_header(w, &cols)?;
        for rec in &self.epochs {
            write!(w, "{}", rec.epoch)?;
            for l in &rec.losses {
                write!(w, ",{}", crate::export::fmt_num(*l))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub config_digest: String,
    /// Digest of the experiment configuration that produced the data, if any.
    #[serde(default)]
    pub experiment_digest: Option<String>,
    pub epochs_run: Vec<usize>,
    pub final_losses: Vec<f64>,
    pub best_val_losses: Vec<f64>,
}

/// Supervised observer: `T_θ(x, ω_c)` and `T*_η(z, ω_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedObserver<T: Scalar> {
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    pub x_normalizer: Normalizer<T>,
    pub z_normalizer: Normalizer<T>,
    /// Statistics of the conditioning feature of `ω_c`.
    pub omega_normalizer: Normalizer<T>,
    pub omega_conditioning: OmegaConditioning,
    pub z_scaling: ZScaling,
    pub bessel_norm: BesselNorm,
    pub meta: Option<TrainingMeta>,
}

impl<T: Scalar> LearnedObserver<T> {
    /// Filter design the observer was trained for at `omega_c`.
    pub fn design(&self, omega_c: f64) -> Result<FilterDesign> {
        FilterDesign::bessel(omega_c, self.d_z, self.d_y, self.bessel_norm)
    }

    fn omega_feature(&self, omega: T) -> T {
        (self.omega_conditioning.feature(omega) - self.omega_normalizer.mean[0]) / self.omega_normalizer.scale[0]
    }

    fn encoder_input(&self, xs: &[&[T]], omega: T) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.d_x + 1, xs.len());
        let w = self.omega_feature(omega);
        for (j, x) in xs.iter().enumerate() {
            for k in 0..self.d_x {
                m[(k, j)] = (x[k] - self.x_normalizer.mean[k]) / self.x_normalizer.scale[k];
            }
            m[(self.d_x, j)] = w;
        }
        m
    }

    fn decoder_input(&self, zs: &[&[T]], omega: T) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.d_z + 1, zs.len());
        let w = self.omega_feature(omega);
        let g = self.z_scaling.gain(omega);
        for (j, z) in zs.iter().enumerate() {
            for k in 0..self.d_z {
                m[(k, j)] = (z[k] * g - self.z_normalizer.mean[k]) / self.z_normalizer.scale[k];
            }
            m[(self.d_z, j)] = w;
        }
        m
    }

    fn columns_to_rows(m: &DMatrix<T>) -> Vec<Vec<T>> {
        m.column_iter().map(|c| c.iter().copied().collect()).collect()
    }

    /// `T_θ(x, ω_c)` in raw coordinates.
    pub fn encode(&self, x: &[T], omega: T) -> Result<Vec<T>> {
        Ok(self.encode_batch(&[x], omega)?.remove(0))
    }

    pub fn encode_batch(&self, xs: &[&[T]], omega: T) -> Result<Vec<Vec<T>>> {
        let mut out = self.encoder.forward_batch(&self.encoder_input(xs, omega))?;
        self.z_normalizer.inverse_batch(&mut out);
        out /= self.z_scaling.gain(omega);
        Ok(Self::columns_to_rows(&out))
    }

    /// `T*_η(z, ω_c)` in raw coordinates.
    pub fn decode(&self, z: &[T], omega: T) -> Result<Vec<T>> {
        Ok(self.decode_batch(&[z], omega)?.remove(0))
    }

    pub fn decode_batch(&self, zs: &[&[T]], omega: T) -> Result<Vec<Vec<T>>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = self.decoder.forward_batch(&self.decoder_input(zs, omega))?;
        self.x_normalizer.inverse_batch(&mut out);
        Ok(Self::columns_to_rows(&out))
    }

    /// Raw-coordinate Jacobians `∂T*/∂z` (d_x × d_z) at each point.
    pub fn decoder_jacobians(&self, zs: &[&[T]], omega: T) -> Result<Vec<DMatrix<T>>> {
        let n = zs.len();
        let input = self.decoder_input(zs, omega);
        let mut jacs = vec![DMatrix::zeros(self.d_x, self.d_z); n];
        for k in 0..self.d_z {
            let mut tangent = DMatrix::zeros(self.d_z + 1, n);
            tangent.row_mut(k).fill(self.z_scaling.gain(omega) / self.z_normalizer.scale[k]);
            let (_, td, _) = self.decoder.forward_dual(&input, &tangent)?;
            for (j, jac) in jacs.iter_mut().enumerate() {
                for i in 0..self.d_x {
                    jac[(i, k)] = td[(i, j)] * self.x_normalizer.scale[i];
                }
            }
        }
        Ok(jacs)
    }

    pub fn decoder_jacobian(&self, z: &[T], omega: T) -> Result<DMatrix<T>> {
        Ok(self.decoder_jacobians(&[z], omega)?.remove(0))
    }

    pub fn to_doc(&self) -> ObserverDoc {
        ObserverDoc {
            kind: "supervised".into(),
            d_x: self.d_x,
            d_y: self.d_y,
            d_z: self.d_z,
            encoder: self.encoder.to_doc(),
            decoder: self.decoder.to_doc(),
            x_normalizer: self.x_normalizer.cast(),
            z_normalizer: self.z_normalizer.cast(),
            omega_normalizer: self.omega_normalizer.cast(),
            omega_conditioning: self.omega_conditioning,
            z_scaling: self.z_scaling,
            bessel_norm: self.bessel_norm,
            meta: self.meta.clone(),
        }
    }

    pub fn from_doc(doc: &ObserverDoc) -> Result<Self> {
        if doc.kind != "supervised" {
            return Err(KklError::InvalidInput(format!("expected a supervised checkpoint, found {:?}", doc.kind)));
        }
        let obs = Self {
            d_x: doc.d_x,
            d_y: doc.d_y,
            d_z: doc.d_z,
            encoder: Mlp::from_doc(&doc.encoder)?,
            decoder: Mlp::from_doc(&doc.decoder)?,
            x_normalizer: doc.x_normalizer.cast(),
            z_normalizer: doc.z_normalizer.cast(),
            omega_normalizer: doc.omega_normalizer.cast(),
            omega_conditioning: doc.omega_conditioning,
            z_scaling: doc.z_scaling,
            bessel_norm: doc.bessel_norm,
            meta: doc.meta.clone(),
        };
        obs.check_shapes()?;
        Ok(obs)
    }

    fn check_shapes(&self) -> Result<()> {
        let ok = self.encoder.input_dim() == self.d_x + 1
            && self.encoder.output_dim() == self.d_z
            && self.decoder.input_dim() == self.d_z + 1
            && self.decoder.output_dim() == self.d_x
            && self.x_normalizer.dim() == self.d_x
            && self.z_normalizer.dim() == self.d_z
            && self.omega_normalizer.dim() == 1;
        if ok {
            Ok(())
        } else {
            Err(KklError::InvalidInput("observer networks and normalizers have inconsistent dimensions".into()))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(text)?)
    }

    /// Observer made of affine maps `z = T x` and `x = M z` (independent of
    /// `ω_c`), with identity normalizers. Used with exact linear solutions.
    pub fn from_linear_maps(t: DMatrix<T>, m: DMatrix<T>, d_y: usize) -> Result<Self> {
        let (d_z, d_x) = t.shape();
        if m.shape() != (d_x, d_z) {
            return Err(KklError::InvalidInput("pseudo-inverse shape must be the transpose of T's".into()));
        }
        let mut enc_w = DMatrix::zeros(d_z, d_x + 1);
        enc_w.view_mut((0, 0), (d_z, d_x)).copy_from(&t);
        let mut dec_w = DMatrix::zeros(d_x, d_z + 1);
        dec_w.view_mut((0, 0), (d_x, d_z)).copy_from(&m);
        let obs = Self {
            d_x,
            d_y,
            d_z,
            encoder: Mlp::affine(enc_w, nalgebra::DVector::zeros(d_z))?,
            decoder: Mlp::affine(dec_w, nalgebra::DVector::zeros(d_x))?,
            x_normalizer: Normalizer::identity(d_x),
            z_normalizer: Normalizer::identity(d_z),
            omega_normalizer: Normalizer::identity(1),
            omega_conditioning: OmegaConditioning::Log10,
            z_scaling: ZScaling::None,
            bessel_norm: BesselNorm::default(),
            meta: None,
        };
        obs.check_shapes()?;
        Ok(obs)
    }
}

/// JSON checkpoint layout for observers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverDoc {
    pub kind: String,
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub encoder: MlpDoc,
    pub decoder: MlpDoc,
    pub x_normalizer: Normalizer<f64>,
    pub z_normalizer: Normalizer<f64>,
    pub omega_normalizer: Normalizer<f64>,
    pub omega_conditioning: OmegaConditioning,
    #[serde(default)]
    pub z_scaling: ZScaling,
    pub bessel_norm: BesselNorm,
    pub meta: Option<TrainingMeta>,
}

/// Normalizers for states, filter states and the `ω_c` feature.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizerSet<T> {
    pub x: Normalizer<T>,
    pub z: Normalizer<T>,
    pub omega: Normalizer<T>,
}

/// Fits normalizers on the given pairs (pass the training split only).
pub fn fit_normalizers<T: Scalar>(
    dataset: &Dataset<T>,
    indices: &[usize],
    conditioning: OmegaConditioning,
    z_scaling: ZScaling,
) -> Result<NormalizerSet<T>> {
    if indices.is_empty() {
        return Err(KklError::InvalidInput("cannot fit normalizers on an empty split".into()));
    }
    let pairs = &dataset.pairs;
    let x = Normalizer::fit(indices.iter().map(|&i| pairs[i].x.as_slice()))?;
    let scaled: Vec<Vec<T>> = indices
        .iter()
        .map(|&i| {
            let g = z_scaling.gain(pairs[i].omega_c);
            pairs[i].z.iter().map(|&v| v * g).collect()
        })
        .collect();
    let z = Normalizer::fit(scaled.iter().map(Vec::as_slice))?;
    let feats: Vec<[T; 1]> = indices.iter().map(|&i| [conditioning.feature(pairs[i].omega_c)]).collect();
    let mut omega = Normalizer::fit(feats.iter().map(|f| f.as_slice()))?;
    if omega.scale[0].as_f64() <= crate::neural::SCALE_FLOOR {
        // single frequency: leave the feature centred but unscaled
        omega.scale[0] = T::one();
    }
    Ok(NormalizerSet { x, z, omega })
}

/// Network outputs computed for a [`Dataset`] in normalized coordinates.
struct SupervisedData<T: Scalar> {
    enc_in: DMatrix<T>,
    enc_out: DMatrix<T>,
    dec_in: DMatrix<T>,
    dec_out: DMatrix<T>,
}

fn prepare_supervised<T: Scalar>(obs: &LearnedObserver<T>, dataset: &Dataset<T>) -> SupervisedData<T> {
    let n = dataset.len();
    let (dx, dz) = (obs.d_x, obs.d_z);
    let mut enc_in = DMatrix::zeros(dx + 1, n);
    let mut enc_out = DMatrix::zeros(dz, n);
    let mut dec_in = DMatrix::zeros(dz + 1, n);
    let mut dec_out = DMatrix::zeros(dx, n);
    let mut xn = vec![T::zero(); dx];
    let mut zn = vec![T::zero(); dz];
    for (j, p) in dataset.pairs.iter().enumerate() {
        obs.x_normalizer.transform_into(&p.x, &mut xn);
        let g = obs.z_scaling.gain(p.omega_c);
        let zs: Vec<T> = p.z.iter().map(|&v| v * g).collect();
        obs.z_normalizer.transform_into(&zs, &mut zn);
        let w = obs.omega_feature(p.omega_c);
        for k in 0..dx {
            enc_in[(k, j)] = xn[k];
            dec_out[(k, j)] = xn[k];
        }
        enc_in[(dx, j)] = w;
        for k in 0..dz {
            enc_out[(k, j)] = zn[k];
            dec_in[(k, j)] = zn[k];
        }
        dec_in[(dz, j)] = w;
    }
    SupervisedData { enc_in, enc_out, dec_in, dec_out }
}

/// Trains both supervised networks from scratch.
pub fn train_supervised<T: Scalar>(dataset: &Dataset<T>, config: &TrainConfig) -> Result<(LearnedObserver<T>, TrainingLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(KklError::InvalidInput("dataset is empty".into()));
    }
    let d_x = dataset.meta.d_x;
    let d_z = dataset.meta.d_z;
    if dataset.pairs.iter().any(|p| p.x.len() != d_x || p.z.len() != d_z) {
        return Err(KklError::InvalidInput("dataset pairs do not match the declared dimensions".into()));
    }
    if d_z % (d_x + 1) != 0 {
        return Err(KklError::InvalidInput(format!("d_z = {d_z} is not a multiple of d_x + 1 = {}", d_x + 1)));
    }
    let d_y = d_z / (d_x + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, val_idx) = split_indices(dataset.len(), config.val_fraction, &mut rng);
    let norms = fit_normalizers(dataset, &train_idx, config.omega_conditioning, config.z_scaling)?;
    let mut enc_sizes = vec![d_x + 1];
    enc_sizes.extend(&config.hidden);
    enc_sizes.push(d_z);
    let mut dec_sizes = vec![d_z + 1];
    dec_sizes.extend(&config.hidden);
    dec_sizes.push(d_x);
    let obs = LearnedObserver {
        d_x,
        d_y,
        d_z,
        encoder: Mlp::new(&enc_sizes, config.activation, &mut rng)?,
        decoder: Mlp::new(&dec_sizes, config.activation, &mut rng)?,
        x_normalizer: norms.x,
        z_normalizer: norms.z,
        omega_normalizer: norms.omega,
        omega_conditioning: config.omega_conditioning,
        z_scaling: config.z_scaling,
        bessel_norm: BesselNorm::default(),
        meta: None,
    };
    run_supervised(obs, dataset, config, train_idx, val_idx, rng)
}

/// Continues training an existing observer, keeping its normalizers.
/// Restricting `dataset` to one frequency gives the per-`ω_c` fine-tune.
pub fn resume_supervised<T: Scalar>(
    init: LearnedObserver<T>,
    dataset: &Dataset<T>,
    config: &TrainConfig,
) -> Result<(LearnedObserver<T>, TrainingLog)> {
    config.validate()?;
    if dataset.meta.d_x != init.d_x || dataset.meta.d_z != init.d_z {
        return Err(KklError::InvalidInput("dataset dimensions do not match the checkpoint".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, val_idx) = split_indices(dataset.len(), config.val_fraction, &mut rng);
    run_supervised(init, dataset, config, train_idx, val_idx, rng)
}

fn run_supervised<T: Scalar>(
    mut obs: LearnedObserver<T>,
    dataset: &Dataset<T>,
    config: &TrainConfig,
    mut train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    mut rng: ChaCha8Rng,
) -> Result<(LearnedObserver<T>, TrainingLog)> {
    let data = prepare_supervised(&obs, dataset);
    let val_sets = if val_idx.is_empty() {
        None
    } else {
        Some((
            gather(&data.enc_in, &val_idx),
            gather(&data.enc_out, &val_idx),
            gather(&data.dec_in, &val_idx),
            gather(&data.dec_out, &val_idx),
        ))
    };
    let mut log = TrainingLog::new(&["loss_T", "loss_Tstar"]);
    let mut opts = [config.adam::<T>(), config.adam::<T>()];
    let mut monitors = [Monitor::<Mlp<T>>::new(), Monitor::<Mlp<T>>::new()];
    let mut last_train = [f64::NAN; 2];

    for epoch in 0..config.max_epochs {
        if monitors.iter().all(|m| m.stopped) {
            break;
        }
        train_idx.shuffle(&mut rng);
        let mut sums = [0.0f64; 2];
        let mut batches = 0usize;
        for (b, chunk) in train_idx.chunks(config.batch_size).enumerate() {
            let nets: [(&mut Mlp<T>, &DMatrix<T>, &DMatrix<T>); 2] =
                [(&mut obs.encoder, &data.enc_in, &data.enc_out), (&mut obs.decoder, &data.dec_in, &data.dec_out)];
            for (k, (net, xin, yout)) in nets.into_iter().enumerate() {
                if monitors[k].stopped {
                    continue;
                }
                let (loss, grads) = net.grad_mse(&gather(xin, chunk), &gather(yout, chunk))?;
                if !loss.is_finite() || !grads.max_abs().is_finite() {
                    return Err(KklError::NonFiniteLoss { epoch, batch: b });
                }
                sums[k] += loss.as_f64();
                opts[k].step(&mut net.param_slices_mut(), &grads.slices());
            }
            batches += 1;
        }
        let mut val_losses = [0.0f64; 2];
        for k in 0..2 {
            if monitors[k].stopped {
                val_losses[k] = monitors[k].best;
                continue;
            }
            last_train[k] = sums[k] / batches.max(1) as f64;
            let net = if k == 0 { &obs.encoder } else { &obs.decoder };
            let val = match &val_sets {
                Some((ei, eo, di, dout)) => {
                    if k == 0 {
                        mse_value(net, ei, eo)?
                    } else {
                        mse_value(net, di, dout)?
                    }
                }
                None => T::lit(last_train[k]),
            };
            val_losses[k] = val.as_f64();
            if !val_losses[k].is_finite() {
                return Err(KklError::NonFiniteLoss { epoch, batch: batches });
            }
            if monitors[k].observe(val_losses[k], net, config) {
                decay(&mut opts[k], config);
            }
        }
        log.epochs.push(EpochRecord { epoch, losses: last_train.to_vec(), val_losses: val_losses.to_vec() });
        log::debug!("epoch {epoch}: loss_T {:.3e} loss_Tstar {:.3e}", last_train[0], last_train[1]);
    }
    if let Some(best) = monitors[0].best_params.take() {
        obs.encoder = best;
    }
    if let Some(best) = monitors[1].best_params.take() {
        obs.decoder = best;
    }
    obs.meta = Some(TrainingMeta {
        config: config.clone(),
        config_digest: config.digest(),
        experiment_digest: dataset.meta.config_digest.clone(),
        epochs_run: monitors.iter().map(|m| m.epochs).collect(),
        final_losses: last_train.to_vec(),
        best_val_losses: monitors.iter().map(|m| m.best).collect(),
    });
    Ok((obs, log))
}

/// Normalized-coordinate mean losses of both networks over a dataset.
pub fn supervised_losses<T: Scalar>(obs: &LearnedObserver<T>, dataset: &Dataset<T>) -> Result<(f64, f64)> {
    let data = prepare_supervised(obs, dataset);
    Ok((mse_value(&obs.encoder, &data.enc_in, &data.enc_out)?.as_f64(), mse_value(&obs.decoder, &data.dec_in, &data.dec_out)?.as_f64()))
}

/// Smallest admissible `|Re|` of a trainable pole.
pub const POLE_MARGIN: f64 = 1e-4;

/// Unconstrained pole coordinates: real part `−(margin + e^ρ)`, imaginary
/// part `μ` for conjugate pairs. Hurwitz by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoleParams {
    /// `ρ` of each real pole.
    pub real_log: Vec<f64>,
    /// `(ρ, μ)` of each conjugate pair.
    pub pairs: Vec<[f64; 2]>,
}

impl PoleParams {
    pub fn from_poles(poles: &[C64]) -> Result<Self> {
        let poles = crate::linfilter::canonical_pole_order(poles)?;
        let to_rho = |re: f64| -> Result<f64> {
            let mag = -re - POLE_MARGIN;
            if !(mag > 0.0) {
                return Err(KklError::Design(format!("pole real part {re} is not below -{POLE_MARGIN}")));
            }
            Ok(mag.ln())
        };
        let mut real_log = Vec::new();
        let mut pairs = Vec::new();
        let mut i = 0;
        while i < poles.len() {
            if poles[i].im == 0.0 {
                real_log.push(to_rho(poles[i].re)?);
                i += 1;
            } else {
                pairs.push([to_rho(poles[i].re)?, poles[i].im.abs()]);
                i += 2;
            }
        }
        Ok(Self { real_log, pairs })
    }

    pub fn dim(&self) -> usize {
        self.real_log.len() + 2 * self.pairs.len()
    }

    /// Poles in block order: real poles first, then pairs `(re, ±|μ|)`.
    pub fn poles(&self) -> Vec<C64> {
        let mut out: Vec<C64> = self.real_log.iter().map(|&r| Complex::new(-(POLE_MARGIN + r.exp()), 0.0)).collect();
        for &[r, mu] in &self.pairs {
            let re = -(POLE_MARGIN + r.exp());
            let im = mu.abs().max(1e-300);
            out.push(Complex::new(re, im));
            out.push(Complex::new(re, -im));
        }
        out
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        block_diagonal_from_poles(&self.poles()).expect("pairs are emitted with their conjugates")
    }

    /// Chain rule from `∂L/∂D` to the flat parameter vector
    /// `[ρ_real..., (ρ, μ) per pair...]`.
    pub fn grad_from_matrix(&self, grad_d: &DMatrix<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.real_log.len() + 2 * self.pairs.len());
        for (i, &r) in self.real_log.iter().enumerate() {
            out.push(-grad_d[(i, i)] * r.exp());
        }
        let mut i = self.real_log.len();
        for &[r, mu] in &self.pairs {
            let d_re = grad_d[(i, i)] + grad_d[(i + 1, i + 1)];
            let d_im = grad_d[(i, i + 1)] - grad_d[(i + 1, i)];
            out.push(-d_re * r.exp());
            out.push(d_im * if mu < 0.0 { -1.0 } else { 1.0 });
            i += 2;
        }
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.real_log.clone();
        for p in &self.pairs {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let nr = self.real_log.len();
        self.real_log.copy_from_slice(&v[..nr]);
        for (k, p) in self.pairs.iter_mut().enumerate() {
            p[0] = v[nr + 2 * k];
            p[1] = v[nr + 2 * k + 1];
        }
    }
}

/// Autoencoder settings on top of [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub train: TrainConfig,
    /// Weight of the reconstruction term.
    pub lambda_weight: f64,
    pub optimize_d: bool,
    /// Step size of the pole parameters; defaults to the network step.
    pub pole_lr: Option<f64>,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), lambda_weight: 0.1, optimize_d: false, pole_lr: None }
    }
}

/// Autoencoder observer with its own filter matrix `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderModel<T: Scalar> {
    pub d_x: usize,
    pub d_y: usize,
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    pub x_normalizer: Normalizer<T>,
    pub poles: PoleParams,
    pub initial_poles: PoleParams,
    pub lambda_weight: f64,
    pub optimize_d: bool,
    pub omega_init: f64,
    pub meta: Option<TrainingMeta>,
}

/// Per-sample loss terms of the autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderTerms<T> {
    /// `‖x − T*(T(x))‖²` in normalized coordinates.
    pub reconstruction: Vec<T>,
    /// PDE residual vectors in raw coordinates.
    pub residuals: Vec<Vec<T>>,
}

impl<T: Scalar> AutoencoderModel<T> {
    pub fn d_z(&self) -> usize {
        self.poles.dim()
    }

    pub fn d_matrix(&self) -> DMatrix<f64> {
        self.poles.matrix()
    }

    pub fn filter(&self) -> FilterMatrices<T> {
        let d = self.d_matrix();
        FilterMatrices::from_matrices(&d, &DMatrix::from_element(d.nrows(), self.d_y, 1.0))
    }

    /// Current `(D, F)` as a design record.
    pub fn design(&self) -> Result<FilterDesign> {
        FilterDesign::from_poles(self.omega_init, &self.poles.poles(), self.d_y)
    }

    fn normalized_batch(&self, xs: &[&[T]]) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.d_x, xs.len());
        for (j, x) in xs.iter().enumerate() {
            for k in 0..self.d_x {
                m[(k, j)] = (x[k] - self.x_normalizer.mean[k]) / self.x_normalizer.scale[k];
            }
        }
        m
    }

    pub fn encode_batch(&self, xs: &[&[T]]) -> Result<Vec<Vec<T>>> {
        let out = self.encoder.forward_batch(&self.normalized_batch(xs))?;
        Ok(out.column_iter().map(|c| c.iter().copied().collect()).collect())
    }

    pub fn decode_batch(&self, zs: &[&[T]]) -> Result<Vec<Vec<T>>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let dz = self.d_z();
        let mut m = DMatrix::zeros(dz, zs.len());
        for (j, z) in zs.iter().enumerate() {
            for k in 0..dz {
                m[(k, j)] = z[k];
            }
        }
        let mut out = self.decoder.forward_batch(&m)?;
        self.x_normalizer.inverse_batch(&mut out);
        Ok(out.column_iter().map(|c| c.iter().copied().collect()).collect())
    }

    /// Both loss terms for each sample, evaluated by the training code path.
    pub fn loss_terms(&self, system: &SystemModel<T>, xs: &[&[T]]) -> Result<AutoencoderTerms<T>> {
        let batch = AeBatch::new(self, system, xs);
        let eval = ae_forward(self, &batch)?;
        let reconstruction = eval.recon_err.column_iter().map(|c| c.iter().map(|&v| v * v).sum()).collect();
        let residuals = eval.residual.column_iter().map(|c| c.iter().copied().collect()).collect();
        Ok(AutoencoderTerms { reconstruction, residuals })
    }

    pub fn to_doc(&self) -> AutoencoderDoc {
        AutoencoderDoc {
            kind: "autoencoder".into(),
            d_x: self.d_x,
            d_y: self.d_y,
            encoder: self.encoder.to_doc(),
            decoder: self.decoder.to_doc(),
            x_normalizer: self.x_normalizer.cast(),
            poles: self.poles.clone(),
            initial_poles: self.initial_poles.clone(),
            design: self.design().ok(),
            lambda_weight: self.lambda_weight,
            optimize_d: self.optimize_d,
            omega_init: self.omega_init,
            meta: self.meta.clone(),
        }
    }

    pub fn from_doc(doc: &AutoencoderDoc) -> Result<Self> {
        if doc.kind != "autoencoder" {
            return Err(KklError::InvalidInput(format!("expected an autoencoder checkpoint, found {:?}", doc.kind)));
        }
        let m = Self {
            d_x: doc.d_x,
            d_y: doc.d_y,
            encoder: Mlp::from_doc(&doc.encoder)?,
            decoder: Mlp::from_doc(&doc.decoder)?,
            x_normalizer: doc.x_normalizer.cast(),
            poles: doc.poles.clone(),
            initial_poles: doc.initial_poles.clone(),
            lambda_weight: doc.lambda_weight,
            optimize_d: doc.optimize_d,
            omega_init: doc.omega_init,
            meta: doc.meta.clone(),
        };
        if m.encoder.input_dim() != m.d_x || m.encoder.output_dim() != m.d_z() || m.decoder.input_dim() != m.d_z() {
            return Err(KklError::InvalidInput("autoencoder checkpoint has inconsistent dimensions".into()));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderDoc {
    pub kind: String,
    pub d_x: usize,
    pub d_y: usize,
    pub encoder: MlpDoc,
    pub decoder: MlpDoc,
    pub x_normalizer: Normalizer<f64>,
    pub poles: PoleParams,
    pub initial_poles: PoleParams,
    pub design: Option<FilterDesign>,
    pub lambda_weight: f64,
    pub optimize_d: bool,
    pub omega_init: f64,
    pub meta: Option<TrainingMeta>,
}

/// Inputs of an autoencoder batch: normalized states, the scaled field
/// `f(x)/s_x` (tangent in normalized coordinates) and raw outputs `h(x)`.
struct AeBatch<T: Scalar> {
    xn: DMatrix<T>,
    tangent: DMatrix<T>,
    y: DMatrix<T>,
}

impl<T: Scalar> AeBatch<T> {
    fn new(model: &AutoencoderModel<T>, system: &SystemModel<T>, xs: &[&[T]]) -> Self {
        let n = xs.len();
        let xn = model.normalized_batch(xs);
        let mut tangent = DMatrix::zeros(model.d_x, n);
        let mut y = DMatrix::zeros(model.d_y, n);
        let mut fx = vec![T::zero(); model.d_x];
        let mut hx = vec![T::zero(); model.d_y];
        for (j, x) in xs.iter().enumerate() {
            system.f(x, &mut fx);
            system.h(x, &mut hx);
            for k in 0..model.d_x {
                tangent[(k, j)] = fx[k] / model.x_normalizer.scale[k];
            }
            for k in 0..model.d_y {
                y[(k, j)] = hx[k];
            }
        }
        Self { xn, tangent, y }
    }

    fn gather(&self, cols: &[usize]) -> Self {
        Self { xn: gather(&self.xn, cols), tangent: gather(&self.tangent, cols), y: gather(&self.y, cols) }
    }
}

struct AeEval<T: Scalar> {
    z: DMatrix<T>,
    enc_cache: crate::neural::DualCache<T>,
    dec_cache: crate::neural::ForwardCache<T>,
    recon_err: DMatrix<T>,
    residual: DMatrix<T>,
    d: DMatrix<T>,
}

fn ae_forward<T: Scalar>(model: &AutoencoderModel<T>, batch: &AeBatch<T>) -> Result<AeEval<T>> {
    let (z, zdot, enc_cache) = model.encoder.forward_dual(&batch.xn, &batch.tangent)?;
    let (xhat, dec_cache) = model.decoder.forward_cached(&z)?;
    let recon_err = xhat - &batch.xn;
    let d: DMatrix<T> = model.d_matrix().map(T::lit);
    // r = J f − D z − F h, with F all ones
    let mut residual = zdot - &d * &z;
    for j in 0..residual.ncols() {
        let ysum: T = batch.y.column(j).iter().copied().sum();
        for i in 0..residual.nrows() {
            residual[(i, j)] -= ysum;
        }
    }
    Ok(AeEval { z, enc_cache, dec_cache, recon_err, residual, d })
}

struct AeGrads<T: Scalar> {
    loss: [f64; 3],
    encoder: MlpGrads<T>,
    decoder: MlpGrads<T>,
    poles: Vec<f64>,
}

/// Mean batch loss `1/B Σ ½[λ‖x − x̂‖² + ‖r‖²]` and its gradients.
fn ae_gradients<T: Scalar>(model: &AutoencoderModel<T>, batch: &AeBatch<T>) -> Result<AeGrads<T>> {
    let eval = ae_forward(model, batch)?;
    let n = batch.xn.ncols();
    let inv_b = T::one() / T::from_usize(n).expect("batch size");
    let lambda = T::lit(model.lambda_weight);
    let half = T::lit(0.5);
    let recon = eval.recon_err.iter().map(|&v| v * v).sum::<T>() * inv_b * half;
    let pde = eval.residual.iter().map(|&v| v * v).sum::<T>() * inv_b * half;

    let (dec_grads, dz_recon) = model.decoder.backward(&eval.dec_cache, &(&eval.recon_err * (lambda * inv_b)));
    let g_res = &eval.residual * inv_b;
    let dz = dz_recon - eval.d.transpose() * &g_res;
    let enc_grads = model.encoder.backward_dual(&eval.enc_cache, &dz, &g_res);
    let poles = if model.optimize_d {
        // ∂L/∂D = −Σ r zᵀ / B
        let gd = -(&g_res * eval.z.transpose());
        model.poles.grad_from_matrix(&gd.map(|v| v.as_f64()))
    } else {
        Vec::new()
    };
    Ok(AeGrads {
        loss: [(lambda * recon + pde).as_f64(), recon.as_f64(), pde.as_f64()],
        encoder: enc_grads,
        decoder: dec_grads,
        poles,
    })
}

fn ae_value<T: Scalar>(model: &AutoencoderModel<T>, batch: &AeBatch<T>) -> Result<f64> {
    let eval = ae_forward(model, batch)?;
    let n = batch.xn.ncols().max(1) as f64;
    let recon: f64 = eval.recon_err.iter().map(|v| v.as_f64() * v.as_f64()).sum();
    let pde: f64 = eval.residual.iter().map(|v| v.as_f64() * v.as_f64()).sum();
    Ok(0.5 * (model.lambda_weight * recon + pde) / n)
}

/// Snapshot used for early stopping.
#[derive(Clone)]
struct AeSnapshot<T: Scalar> {
    encoder: Mlp<T>,
    decoder: Mlp<T>,
    poles: PoleParams,
}

/// Trains the autoencoder from state samples only. Returns the model and a
/// log with columns `loss_total,loss_recon,loss_pde`.
pub fn train_autoencoder<T: Scalar>(
    x_samples: &[Vec<T>],
    system: &SystemModel<T>,
    d_init: &FilterDesign,
    config: &AutoencoderConfig,
) -> Result<(AutoencoderModel<T>, TrainingLog)> {
    let cfg = &config.train;
    cfg.validate()?;
    if !(config.lambda_weight > 0.0) {
        return Err(KklError::InvalidInput("lambda_weight must be positive".into()));
    }
    if x_samples.is_empty() {
        return Err(KklError::InvalidInput("no state samples".into()));
    }
    let d_x = system.dim_x();
    let d_y = system.dim_y();
    if d_init.d_y != d_y {
        return Err(KklError::InvalidInput("initial design output dimension does not match the system".into()));
    }
    let d_z = d_init.d_z;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = split_indices(x_samples.len(), cfg.val_fraction, &mut rng);
    let x_normalizer = Normalizer::fit(train_idx.iter().map(|&i| x_samples[i].as_slice()))?;
    let mut enc_sizes = vec![d_x];
    enc_sizes.extend(&cfg.hidden);
    enc_sizes.push(d_z);
    let mut dec_sizes = vec![d_z];
    dec_sizes.extend(&cfg.hidden);
    dec_sizes.push(d_x);
    let poles = PoleParams::from_poles(&d_init.poles)?;
    let model = AutoencoderModel {
        d_x,
        d_y,
        encoder: Mlp::new(&enc_sizes, cfg.activation, &mut rng)?,
        decoder: Mlp::new(&dec_sizes, cfg.activation, &mut rng)?,
        x_normalizer,
        initial_poles: poles.clone(),
        poles,
        lambda_weight: config.lambda_weight,
        optimize_d: config.optimize_d,
        omega_init: d_init.omega_c,
        meta: None,
    };
    run_autoencoder(model, x_samples, system, config, train_idx, val_idx, rng)
}

/// Continues autoencoder training from a checkpoint, keeping its normalizer
/// and the recorded initial poles.
pub fn resume_autoencoder<T: Scalar>(
    init: AutoencoderModel<T>,
    x_samples: &[Vec<T>],
    system: &SystemModel<T>,
    config: &AutoencoderConfig,
) -> Result<(AutoencoderModel<T>, TrainingLog)> {
    config.train.validate()?;
    if x_samples.is_empty() || x_samples.iter().any(|x| x.len() != init.d_x) || system.dim_x() != init.d_x {
        return Err(KklError::InvalidInput("state samples do not match the checkpoint".into()));
    }
    let mut model = init;
    model.lambda_weight = config.lambda_weight;
    model.optimize_d = config.optimize_d;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let (train_idx, val_idx) = split_indices(x_samples.len(), config.train.val_fraction, &mut rng);
    run_autoencoder(model, x_samples, system, config, train_idx, val_idx, rng)
}

fn run_autoencoder<T: Scalar>(
    mut model: AutoencoderModel<T>,
    x_samples: &[Vec<T>],
    system: &SystemModel<T>,
    config: &AutoencoderConfig,
    mut train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    mut rng: ChaCha8Rng,
) -> Result<(AutoencoderModel<T>, TrainingLog)> {
    let cfg = &config.train;
    let refs: Vec<&[T]> = x_samples.iter().map(Vec::as_slice).collect();
    let all = AeBatch::new(&model, system, &refs);
    let val = if val_idx.is_empty() { None } else { Some(all.gather(&val_idx)) };

    let mut opt_enc = cfg.adam::<T>();
    let mut opt_dec = cfg.adam::<T>();
    let mut opt_pole = Adam::<f64>::new(config.pole_lr.unwrap_or(cfg.lr), cfg.beta1, cfg.beta2, cfg.eps);
    let mut monitor = Monitor::<AeSnapshot<T>>::new();
    let mut log = TrainingLog::new(&["loss_total", "loss_recon", "loss_pde"]);
    let mut last = [f64::NAN; 3];

    for epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for (b, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let batch = all.gather(chunk);
            let g = ae_gradients(&model, &batch)?;
            if g.loss.iter().any(|l| !l.is_finite()) || !g.encoder.max_abs().is_finite() || !g.decoder.max_abs().is_finite() {
                return Err(KklError::NonFiniteLoss { epoch, batch: b });
            }
            opt_enc.step(&mut model.encoder.param_slices_mut(), &g.encoder.slices());
            opt_dec.step(&mut model.decoder.param_slices_mut(), &g.decoder.slices());
            if model.optimize_d {
                let mut flat = model.poles.flat();
                opt_pole.step(&mut [flat.as_mut_slice()], &[g.poles.as_slice()]);
                model.poles.set_flat(&flat);
            }
            for k in 0..3 {
                sums[k] += g.loss[k];
            }
            batches += 1;
        }
        for k in 0..3 {
            last[k] = sums[k] / batches.max(1) as f64;
        }
        let val_loss = match &val {
            Some(v) => ae_value(&model, v)?,
            None => last[0],
        };
        if !val_loss.is_finite() {
            return Err(KklError::NonFiniteLoss { epoch, batch: batches });
        }
        let snap = AeSnapshot { encoder: model.encoder.clone(), decoder: model.decoder.clone(), poles: model.poles.clone() };
        if monitor.observe(val_loss, &snap, cfg) {
            decay(&mut opt_enc, cfg);
            decay(&mut opt_dec, cfg);
            let next = (opt_pole.lr * cfg.lr_decay).max(cfg.min_lr);
            opt_pole.lr = next;
        }
        log.epochs.push(EpochRecord { epoch, losses: last.to_vec(), val_losses: vec![val_loss] });
        log::debug!("epoch {epoch}: total {:.3e} recon {:.3e} pde {:.3e} val {val_loss:.3e}", last[0], last[1], last[2]);
        if monitor.stopped {
            break;
        }
    }
    if let Some(best) = monitor.best_params.take() {
        model.encoder = best.encoder;
        model.decoder = best.decoder;
        model.poles = best.poles;
    }
    model.meta = Some(TrainingMeta {
        config: cfg.clone(),
        config_digest: digest_json(&serde_json::to_value(config)?),
        experiment_digest: None,
        epochs_run: vec![monitor.epochs],
        final_losses: last.to_vec(),
        best_val_losses: vec![monitor.best],
    });
    Ok((model, log))
}

/// Access to an encoder `T` and its filter, for PDE-residual evaluation.
pub trait Encoder<T: Scalar> {
    fn state_dim(&self) -> usize;
    fn encode_state(&self, x: &[T], omega: T) -> Result<Vec<T>>;
    /// `(T(x), ∂T/∂x(x) v)` in raw coordinates.
    fn encode_jvp(&self, x: &[T], v: &[T], omega: T) -> Result<(Vec<T>, Vec<T>)>;
    fn filter_at(&self, omega: f64) -> Result<FilterMatrices<T>>;
}

impl<T: Scalar> Encoder<T> for LearnedObserver<T> {
    fn state_dim(&self) -> usize {
        self.d_x
    }

    fn encode_state(&self, x: &[T], omega: T) -> Result<Vec<T>> {
        self.encode(x, omega)
    }

    fn encode_jvp(&self, x: &[T], v: &[T], omega: T) -> Result<(Vec<T>, Vec<T>)> {
        let input = self.encoder_input(&[x], omega);
        let mut tangent = DMatrix::zeros(self.d_x + 1, 1);
        for k in 0..self.d_x {
            tangent[(k, 0)] = v[k] / self.x_normalizer.scale[k];
        }
        let (out, outd, _) = self.encoder.forward_dual(&input, &tangent)?;
        let g = self.z_scaling.gain(omega);
        let z = (0..self.d_z).map(|i| (out[(i, 0)] * self.z_normalizer.scale[i] + self.z_normalizer.mean[i]) / g).collect();
        let zd = (0..self.d_z).map(|i| outd[(i, 0)] * self.z_normalizer.scale[i] / g).collect();
        Ok((z, zd))
    }

    fn filter_at(&self, omega: f64) -> Result<FilterMatrices<T>> {
        Ok(FilterMatrices::from_design(&self.design(omega)?))
    }
}

impl<T: Scalar> Encoder<T> for AutoencoderModel<T> {
    fn state_dim(&self) -> usize {
        self.d_x
    }

    fn encode_state(&self, x: &[T], _omega: T) -> Result<Vec<T>> {
        Ok(self.encode_batch(&[x])?.remove(0))
    }

    fn encode_jvp(&self, x: &[T], v: &[T], _omega: T) -> Result<(Vec<T>, Vec<T>)> {
        let xn: Vec<T> = self.x_normalizer.transform(x);
        let vn: Vec<T> = v.iter().zip(&self.x_normalizer.scale).map(|(&a, &s)| a / s).collect();
        self.encoder.jvp(&xn, &vn)
    }

    fn filter_at(&self, _omega: f64) -> Result<FilterMatrices<T>> {
        Ok(self.filter())
    }
}

/// Access to a decoder `T*` in raw coordinates.
pub trait Decoder<T: Scalar> {
    fn filter_dim(&self) -> usize;
    fn decode_states(&self, zs: &[&[T]], omega: T) -> Result<Vec<Vec<T>>>;
    /// `∂T*/∂z` at each point, `d_x × d_z`.
    fn decode_jacobians(&self, zs: &[&[T]], omega: T) -> Result<Vec<DMatrix<T>>>;
}

impl<T: Scalar> Decoder<T> for LearnedObserver<T> {
    fn filter_dim(&self) -> usize {
        self.d_z
    }

    fn decode_states(&self, zs: &[&[T]], omega: T) -> Result<Vec<Vec<T>>> {
        self.decode_batch(zs, omega)
    }

    fn decode_jacobians(&self, zs: &[&[T]], omega: T) -> Result<Vec<DMatrix<T>>> {
        self.decoder_jacobians(zs, omega)
    }
}

impl<T: Scalar> Decoder<T> for AutoencoderModel<T> {
    fn filter_dim(&self) -> usize {
        self.d_z()
    }

    fn decode_states(&self, zs: &[&[T]], _omega: T) -> Result<Vec<Vec<T>>> {
        self.decode_batch(zs)
    }

    fn decode_jacobians(&self, zs: &[&[T]], _omega: T) -> Result<Vec<DMatrix<T>>> {
        zs.iter()
            .map(|z| {
                let mut j = self.decoder.input_jacobian(z)?;
                for (i, mut row) in j.row_iter_mut().enumerate() {
                    row *= self.x_normalizer.scale[i];
                }
                Ok(j)
            })
            .collect()
    }
}

/// `∂T/∂x(x) f(x) − D T(x) − F h(x)` in raw coordinates.
pub fn pde_residual<T: Scalar, M: Encoder<T> + ?Sized>(model: &M, system: &SystemModel<T>, x: &[T], omega: f64) -> Result<Vec<T>> {
    if x.len() != model.state_dim() || x.len() != system.dim_x() {
        return Err(KklError::InvalidInput("state dimension mismatch".into()));
    }
    let fx = system.eval_f(x);
    let hx = system.eval_h(x);
    let (z, jf) = model.encode_jvp(x, &fx, T::lit(omega))?;
    let filter = model.filter_at(omega)?;
    let mut rate = vec![T::zero(); filter.d_z];
    filter.rate(&z, &hx, &mut rate);
    Ok(jf.iter().zip(&rate).map(|(&a, &b)| a - b).collect())
}
