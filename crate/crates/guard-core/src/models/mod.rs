//! Small differentiable classifiers: an MLP for vector data and a compact
//! ConvNet for images up to 32x32. One architecture serves as teacher,
//! matching network, and student.

mod forward;
mod io;
mod train;

pub use forward::{Bound, ForwardOut};
pub use io::{load_model, save_model};
pub use train::{train, BatchLoss, LossBuilt, PlainLoss, TrainConfig, TrainResult};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Rng, Tape, Tensor, TensorError, TensorResult, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid model container: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Softplus { beta: f64 },
}

impl Activation {
    pub(crate) fn apply(&self, v: &Var) -> TensorResult<Var> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Softplus { beta } => v.softplus(*beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ArchKind {
    /// Fully connected net; `hidden` lists the hidden layer widths.
    Mlp { hidden: Vec<usize> },
    /// conv3x3(c1) -> [BN] -> act -> pool2 -> conv3x3(c2) -> [BN] -> act -> pool2 -> fc
    ConvNetS { c1: usize, c2: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchKind,
    pub activation: Activation,
    pub batch_norm: bool,
    /// `[d]` for vector data, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn mlp(dims: &[usize], activation: Activation) -> ModelResult<Self> {
        if dims.len() < 2 {
            return Err(ModelError::Config("mlp needs at least [in, classes]".into()));
        }
        Ok(ModelSpec {
            arch: ArchKind::Mlp {
                hidden: dims[1..dims.len() - 1].to_vec(),
            },
            activation,
            batch_norm: false,
            input_shape: vec![dims[0]],
            classes: dims[dims.len() - 1],
        })
    }

    pub fn convnet_s(input_shape: &[usize], classes: usize, activation: Activation) -> ModelResult<Self> {
        if input_shape.len() != 3 {
            return Err(ModelError::Config(format!(
                "convnet-s input shape must be [c,h,w], got {input_shape:?}"
            )));
        }
        Ok(ModelSpec {
            arch: ArchKind::ConvNetS { c1: 16, c2: 32 },
            activation,
            batch_norm: true,
            input_shape: input_shape.to_vec(),
            classes,
        })
    }

    pub fn validate(&self) -> ModelResult<()> {
        if self.classes < 2 {
            return Err(ModelError::Config(format!(
                "class count {} must be >= 2",
                self.classes
            )));
        }
        match &self.arch {
            ArchKind::Mlp { .. } => {
                if self.input_shape.len() != 1 {
                    return Err(ModelError::Config(format!(
                        "mlp input shape must be [d], got {:?}",
                        self.input_shape
                    )));
                }
            }
            ArchKind::ConvNetS { c1, c2 } => {
                if self.input_shape.len() != 3 {
                    return Err(ModelError::Config(format!(
                        "convnet-s input shape must be [c,h,w], got {:?}",
                        self.input_shape
                    )));
                }
                if *c1 == 0 || *c2 == 0 {
                    return Err(ModelError::Config("channel plan must be positive".into()));
                }
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                if h < 4 || w < 4 || h > 32 || w > 32 {
                    return Err(ModelError::Config(format!(
                        "convnet-s supports 4..=32 spatial extents, got {h}x{w}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fully-connected layer widths, input to logits.
    pub(crate) fn mlp_dims(&self) -> Vec<usize> {
        match &self.arch {
            ArchKind::Mlp { hidden } => {
                let mut dims = vec![self.input_shape[0]];
                dims.extend_from_slice(hidden);
                dims.push(self.classes);
                dims
            }
            ArchKind::ConvNetS { .. } => unreachable!("mlp_dims on convnet"),
        }
    }

    /// Spatial extent after the two stride-2 pools.
    pub(crate) fn conv_flat_dim(&self) -> usize {
        match &self.arch {
            ArchKind::ConvNetS { c2, .. } => {
                let h = self.input_shape[1] / 2 / 2;
                let w = self.input_shape[2] / 2 / 2;
                c2 * h * w
            }
            ArchKind::Mlp { .. } => unreachable!("conv_flat_dim on mlp"),
        }
    }

    /// Number of BN layers implied by the spec.
    pub fn bn_layers(&self) -> usize {
        if !self.batch_norm {
            return 0;
        }
        match &self.arch {
            ArchKind::Mlp { hidden } => hidden.len(),
            ArchKind::ConvNetS { .. } => 2,
        }
    }

    /// Total trainable parameter count; a pure function of the spec.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        match &self.arch {
            ArchKind::Mlp { .. } => {
                let dims = self.mlp_dims();
                for i in 0..dims.len() - 1 {
                    count += dims[i] * dims[i + 1] + dims[i + 1];
                }
            }
            ArchKind::ConvNetS { c1, c2 } => {
                let cin = self.input_shape[0];
                count += c1 * cin * 9 + c1;
                count += c2 * c1 * 9 + c2;
                count += self.conv_flat_dim() * self.classes + self.classes;
            }
        }
        count += 2 * self.bn_channel_counts().iter().sum::<usize>(); // gamma & beta
        count
    }

    pub(crate) fn bn_channel_counts(&self) -> Vec<usize> {
        if !self.batch_norm {
            return vec![];
        }
        match &self.arch {
            ArchKind::Mlp { hidden } => hidden.clone(),
            ArchKind::ConvNetS { c1, c2 } => vec![*c1, *c2],
        }
    }
}

/// Per-layer batch-norm running statistics (eval-mode normalizers).
#[derive(Debug, Clone)]
pub struct BnRunning {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Parameters plus a differentiable forward mapping producing class logits.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Tensor>,
    pub param_names: Vec<String>,
    pub bn_running: Vec<BnRunning>,
}

/// Hard class indices or soft probability vectors.
#[derive(Debug, Clone)]
pub enum Labels {
    Hard(Vec<usize>),
    Soft(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Hard(v) => v.len(),
            Labels::Soft(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hard view: argmax for soft labels.
    pub fn hard(&self) -> Vec<usize> {
        match self {
            Labels::Hard(v) => v.clone(),
            Labels::Soft(t) => {
                let c = t.shape()[1];
                (0..t.shape()[0])
                    .map(|i| {
                        let row = &t.data()[i * c..(i + 1) * c];
                        argmax(row)
                    })
                    .collect()
            }
        }
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Hard(v) => Labels::Hard(indices.iter().map(|&i| v[i]).collect()),
            Labels::Soft(t) => {
                let rows: Vec<Tensor> = indices.iter().map(|&i| t.slice_first(i)).collect();
                Labels::Soft(Tensor::stack(&rows).expect("label rows share shape"))
            }
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fan-in-scaled uniform init: weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// zero biases, BN scale 1 / shift 0, running stats (0, 1).
pub fn init(spec: &ModelSpec, rng: &mut Rng) -> ModelResult<Model> {
    spec.validate()?;
    let mut params = Vec::new();
    let mut names = Vec::new();
    let mut push_linear = |name: &str, fan_in: usize, shape: &[usize], rng: &mut Rng| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        params.push(Tensor::rand_uniform(shape, -bound, bound, rng));
        names.push(format!("{name}.w"));
        params.push(Tensor::zeros(&[shape[shape.len() - 1]]));
        names.push(format!("{name}.b"));
    };

    match &spec.arch {
        ArchKind::Mlp { .. } => {
            let dims = spec.mlp_dims();
            for i in 0..dims.len() - 1 {
                push_linear(&format!("fc{i}"), dims[i], &[dims[i], dims[i + 1]], rng);
            }
        }
        ArchKind::ConvNetS { c1, c2 } => {
            let cin = spec.input_shape[0];
            let bound1 = 1.0 / ((cin * 9) as f64).sqrt();
            params.push(Tensor::rand_uniform(&[*c1, cin, 3, 3], -bound1, bound1, rng));
            names.push("conv0.w".into());
            params.push(Tensor::zeros(&[*c1]));
            names.push("conv0.b".into());
            let bound2 = 1.0 / ((c1 * 9) as f64).sqrt();
            params.push(Tensor::rand_uniform(&[*c2, *c1, 3, 3], -bound2, bound2, rng));
            names.push("conv1.w".into());
            params.push(Tensor::zeros(&[*c2]));
            names.push("conv1.b".into());
            let flat = spec.conv_flat_dim();
            let bound3 = 1.0 / (flat as f64).sqrt();
            params.push(Tensor::rand_uniform(&[flat, spec.classes], -bound3, bound3, rng));
            names.push("fc.w".into());
            params.push(Tensor::zeros(&[spec.classes]));
            names.push("fc.b".into());
        }
    }

    let mut bn_running = Vec::new();
    for (i, ch) in spec.bn_channel_counts().iter().enumerate() {
        params.push(Tensor::ones(&[*ch]));
        names.push(format!("bn{i}.gamma"));
        params.push(Tensor::zeros(&[*ch]));
        names.push(format!("bn{i}.beta"));
        bn_running.push(BnRunning {
            mean: Tensor::zeros(&[*ch]),
            var: Tensor::ones(&[*ch]),
        });
    }

    Ok(Model {
        spec: spec.clone(),
        params,
        param_names: names,
        bn_running,
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, x: &Tensor) -> ModelResult<Tensor> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let out = bound.forward(&xv, false)?;
        Ok(out.logits.value())
    }

    /// Per-sample predicted classes.
    pub fn predict_classes(&self, x: &Tensor) -> ModelResult<Vec<usize>> {
        let logits = self.predict(x)?;
        let c = logits.shape()[1];
        Ok((0..logits.shape()[0])
            .map(|i| argmax(&logits.data()[i * c..(i + 1) * c]))
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, y: &Labels) -> ModelResult<f64> {
        let pred = self.predict_classes(x)?;
        let truth = y.hard();
        let hits = pred.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / truth.len().max(1) as f64)
    }
}

/// Mean softmax cross-entropy (hard labels) or soft-label cross-entropy.
pub fn loss(model: &Model, x: &Tensor, y: &Labels) -> ModelResult<f64> {
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let xv = tape.constant(x.clone());
    let out = bound.forward(&xv, false)?;
    let l = cross_entropy_mean(&out.logits, y)?;
    Ok(l.item())
}

/// Sum over the batch of per-sample cross-entropies. Summing (rather than
/// averaging) keeps rows of the input gradient equal to per-sample
/// gradients.
pub fn cross_entropy_sum(logits: &Var, y: &Labels) -> TensorResult<Var> {
    per_sample_cross_entropy(logits, y)?.sum_all()
}

pub fn cross_entropy_mean(logits: &Var, y: &Labels) -> TensorResult<Var> {
    let n = logits.shape()[0] as f64;
    cross_entropy_sum(logits, y)?.mul_scalar(1.0 / n)
}

/// Vector of per-sample cross-entropies, shape (n,).
pub fn per_sample_cross_entropy(logits: &Var, y: &Labels) -> TensorResult<Var> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("logits must be (batch, classes), got {shape:?}"),
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if y.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{n} logits rows vs {} labels", y.len()),
        });
    }
    let tape = logits.tape().clone();
    let values = logits.value();
    // Fixed shift for numerical stability; exact for any constant shift.
    let row_max: Vec<f64> = (0..n)
        .map(|i| {
            values.data()[i * c..(i + 1) * c]
                .iter()
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        })
        .collect();
    let m = tape.constant(Tensor::from_parts(vec![n], row_max));
    let shifted = logits.sub(&m.row_broadcast(c)?)?;
    let lse = shifted.exp()?.row_sum()?.ln()?.add(&m)?;

    match y {
        Labels::Hard(labels) => {
            let picked = logits.gather_label(&std::rc::Rc::new(labels.clone()))?;
            lse.sub(&picked)
        }
        Labels::Soft(p) => {
            if p.shape() != [n, c] {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    detail: format!("soft labels {:?} vs logits {shape:?}", p.shape()),
                });
            }
            let log_softmax = logits.sub(&lse.row_broadcast(c)?)?;
            let pv = tape.constant(p.clone());
            pv.mul(&log_softmax)?.row_sum()?.neg()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_282() -> ModelSpec {
        ModelSpec::mlp(&[2, 8, 2], Activation::Relu).unwrap()
    }

    #[test]
    fn mlp_parameter_count_matches_arithmetic() {
        let mut rng = Rng::new(0);
        let model = init(&mlp_282(), &mut rng).unwrap();
        assert_eq!(model.param_count(), 2 * 8 + 8 + 8 * 2 + 2);
        assert_eq!(model.param_count(), model.spec.param_count());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init(&mlp_282(), &mut Rng::new(7)).unwrap();
        let b = init(&mlp_282(), &mut Rng::new(7)).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn convnet_forward_of_zero_image_is_finite() {
        let spec = ModelSpec::convnet_s(&[1, 28, 28], 10, Activation::Relu).unwrap();
        let mut rng = Rng::new(3);
        let model = init(&spec, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        let logits = model.predict(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(logits.all_finite());
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        // direct check on the loss composite: equal logits, any label -> ln C
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 10]));
        let y = Labels::Hard(vec![0, 5, 9]);
        let l = cross_entropy_mean(&logits, &y).unwrap().item();
        assert!((l - (10.0_f64).ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn soft_label_equal_to_softmax_gives_entropy() {
        let tape = Tape::new();
        let raw = Tensor::new(&[1, 3], vec![0.2, -0.4, 1.1]).unwrap();
        let logits = tape.constant(raw.clone());
        // softmax(logits)
        let exps: Vec<f64> = raw.data().iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        let soft = Labels::Soft(Tensor::new(&[1, 3], p).unwrap());
        let l = cross_entropy_mean(&logits, &soft).unwrap().item();
        assert!((l - entropy).abs() < 1e-12, "{l} vs {entropy}");
    }

    #[test]
    fn hard_loss_nonnegative_and_zero_iff_confident() {
        let tape = Tape::new();
        let confident = tape.constant(Tensor::new(&[1, 2], vec![60.0, -60.0]).unwrap());
        let l0 = cross_entropy_mean(&confident, &Labels::Hard(vec![0])).unwrap().item();
        assert!(l0 >= 0.0 && l0 < 1e-12);
        let wrong = cross_entropy_mean(&confident, &Labels::Hard(vec![1])).unwrap().item();
        assert!(wrong > 1.0);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 3]));
        let err = cross_entropy_mean(&logits, &Labels::Hard(vec![0, 3])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }
}
