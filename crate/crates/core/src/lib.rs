//! Learned Kazantzis–Kravaris/Luenberger (KKL) observers for autonomous
//! nonlinear systems, parametrized by a single tuning frequency `ω_c`.

pub mod dynamics;
pub mod error;
pub mod export;
pub mod learning;
pub mod linfilter;
pub mod neural;
pub mod observer;
pub mod sampling;
pub mod scalar;
pub mod tuning;

pub use error::{KklError, Result};
pub use scalar::Scalar;

pub type System64 = dynamics::SystemModel<f64>;
pub type Mlp64 = neural::Mlp<f64>;
pub type Dataset64 = sampling::Dataset<f64>;
pub type LearnedObserver64 = learning::LearnedObserver<f64>;
pub type AutoencoderModel64 = learning::AutoencoderModel<f64>;

pub type System32 = dynamics::SystemModel<f32>;
pub type Mlp32 = neural::Mlp<f32>;
pub type LearnedObserver32 = learning::LearnedObserver<f32>;
pub type AutoencoderModel32 = learning::AutoencoderModel<f32>;
