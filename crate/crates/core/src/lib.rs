//! Bitwise information bottleneck quantization of neural network activations.
//!
//! Real-valued activations are first quantized to `D`-bit fixed-point codes,
//! the codes are split into binary bit-planes, and a sparse real coefficient
//! is fitted to every plane by L1-penalized least squares. Bits whose
//! coefficient vanishes are dropped, so the number of surviving planes is the
//! effective code rate of the layer. The penalty is swept upward per layer
//! until the worst per-sample PSNR loss crosses a threshold.
//!
//! Module map:
//!
//! * [`tensor_store`]: activation containers, NPY input, scheme files.
//! * [`bitplane`]: initial quantization and bit-plane codebooks.
//! * [`solver`]: Gram-system LASSO, regularization paths, exact L0 oracle.
//! * [`bottleneck`]: per-layer threshold sweep producing [`QuantScheme`]s.
//! * [`metrics`]: MSE/PSNR, bit statistics, efficiency estimates.
//! * [`synthetic`]: deterministic rectified-sparse activation generator.

pub mod bitplane;
pub mod bottleneck;
mod error;
pub mod hexfloat;
pub mod kvtext;
pub mod metrics;
pub mod npy;
pub mod solver;
pub mod synthetic;
pub mod tensor_store;

pub use bitplane::{BitplaneCodebook, ClipRule, InitQuantizerSpec, QuantizerKind};
pub use bottleneck::{BottleneckOptions, LayerOutcome, LossReference, QuantScheme, SweepPoint, SweepTrace};
pub use error::{Error, Result};
pub use metrics::{BitStatistics, EfficiencyReport};
pub use solver::{CoefficientVector, DesignSystem, LambdaGrid, SolverOptions};
pub use tensor_store::{ActivationTensor, DatasetManifest, DatasetWriter, Shape};
