//! GUARD: robust dataset distillation via curvature regularization.
//!
//! The crate distills small synthetic datasets whose students come out
//! adversarially robust, and numerically verifies the curvature bound that
//! justifies the method. Modules:
//!
//! - [`tensor`]: dense f64 tensors plus a reverse-mode autodiff engine
//!   whose gradients are themselves differentiable (double backprop).
//! - [`models`]: small MLP / ConvNet classifiers with SGD training.
//! - [`curvature`]: the regularized loss, Hessian-vector products, power
//!   iteration spectra, and the gradient-penalty ablation.
//! - [`attacks`]: FGSM/PGD/MIM/CW/Square attack suite and robust accuracy.
//! - [`distill`]: gradient-matching and squeeze/recover/relabel pipelines.
//! - [`theory`]: exact trust-region maximization and the bound chain checks.
//! - [`harness`]: config, datasets, CLI subcommands, benchmarks, reports.

pub mod attacks;
pub mod curvature;
pub mod models;
pub mod tensor;
