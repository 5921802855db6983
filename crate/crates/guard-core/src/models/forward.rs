//! Binding a model's parameters onto a tape and running the forward pass.

use crate::tensor::{Tape, Tensor, TensorResult, Var};

use super::{ArchKind, Model, ModelSpec};

const BN_EPS: f64 = 1e-5;

/// A model whose parameters live on a specific tape.
pub struct Bound<'m> {
    pub spec: &'m ModelSpec,
    pub params: Vec<Var>,
    bn_running: Vec<(Tensor, Tensor)>,
    tape: Tape,
}

/// Forward artifacts: logits, the penultimate activations used as the
/// feature map h(.), and per-BN-layer batch statistics (train mode only).
pub struct ForwardOut {
    pub logits: Var,
    pub features: Var,
    /// (mean, variance) per BN layer, recorded as differentiable vars.
    pub bn_batch: Vec<(Var, Var)>,
}

impl Model {
    /// Places parameters on the tape as differentiable inputs.
    pub fn bind<'m>(&'m self, tape: &Tape) -> Bound<'m> {
        self.bind_impl(tape, true)
    }

    /// Places parameters on the tape as constants (inference, attacks).
    pub fn bind_frozen<'m>(&'m self, tape: &Tape) -> Bound<'m> {
        self.bind_impl(tape, false)
    }

    fn bind_impl<'m>(&'m self, tape: &Tape, trainable: bool) -> Bound<'m> {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.input(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound {
            spec: &self.spec,
            params,
            bn_running: self
                .bn_running
                .iter()
                .map(|s| (s.mean.clone(), s.var.clone()))
                .collect(),
            tape: tape.clone(),
        }
    }
}

impl Bound<'_> {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Runs the network. `train_bn` selects batch statistics (true) or the
    /// frozen running statistics (false) in batch-norm layers.
    pub fn forward(&self, x: &Var, train_bn: bool) -> TensorResult<ForwardOut> {
        match self.spec.arch {
            ArchKind::Mlp { .. } => self.forward_mlp(x, train_bn),
            ArchKind::ConvNetS { .. } => self.forward_conv(x, train_bn),
        }
    }

    fn forward_mlp(&self, x: &Var, train_bn: bool) -> TensorResult<ForwardOut> {
        let dims = self.spec.mlp_dims();
        let layers = dims.len() - 1;
        let bn_base = 2 * layers; // params after the linear layers are BN pairs
        let mut h = x.clone();
        let mut bn_batch = Vec::new();
        let mut features = x.clone();
        for l in 0..layers {
            let w = &self.params[2 * l];
            let b = &self.params[2 * l + 1];
            let cols = dims[l + 1];
            let mut z = h.matmul(w)?.add(&b.channel_broadcast(&[h.shape()[0], cols])?)?;
            if l + 1 < layers {
                if self.spec.batch_norm {
                    let gamma = &self.params[bn_base + 2 * l];
                    let beta = &self.params[bn_base + 2 * l + 1];
                    let (zn, stats) =
                        self.batch_norm(&z, gamma, beta, l, train_bn)?;
                    if let Some(s) = stats {
                        bn_batch.push(s);
                    }
                    z = zn;
                }
                h = self.spec.activation.apply(&z)?;
                features = h.clone();
            } else {
                h = z;
            }
        }
        Ok(ForwardOut {
            logits: h,
            features,
            bn_batch,
        })
    }

    fn forward_conv(&self, x: &Var, train_bn: bool) -> TensorResult<ForwardOut> {
        let mut bn_batch = Vec::new();
        let n = x.shape()[0];

        let mut h = x.clone();
        for (l, conv_base) in [(0usize, 0usize), (1, 2)] {
            let w = &self.params[conv_base];
            let b = &self.params[conv_base + 1];
            let mut z = h.conv2d(w, 1, 1)?;
            z = z.add(&b.channel_broadcast(&z.shape())?)?;
            if self.spec.batch_norm {
                let gamma = &self.params[6 + 2 * l];
                let beta = &self.params[6 + 2 * l + 1];
                let (zn, stats) = self.batch_norm(&z, gamma, beta, l, train_bn)?;
                if let Some(s) = stats {
                    bn_batch.push(s);
                }
                z = zn;
            }
            let a = self.spec.activation.apply(&z)?;
            h = a.maxpool2d(2, 2)?;
        }

        let flat = self.spec.conv_flat_dim();
        let features = h.reshape(&[n, flat])?;
        let w_fc = &self.params[4];
        let b_fc = &self.params[5];
        let logits = features
            .matmul(w_fc)?
            .add(&b_fc.channel_broadcast(&[n, self.spec.classes])?)?;
        Ok(ForwardOut {
            logits,
            features,
            bn_batch,
        })
    }

    /// Batch norm over axis 1. Train mode normalizes with (and reports)
    /// batch statistics; eval mode uses the frozen running statistics.
    fn batch_norm(
        &self,
        z: &Var,
        gamma: &Var,
        beta: &Var,
        layer: usize,
        train: bool,
    ) -> TensorResult<(Var, Option<(Var, Var)>)> {
        let shape = z.shape();
        let count: usize = shape.iter().product::<usize>() / shape[1];
        let inv_count = 1.0 / count as f64;

        let (mean, var, stats) = if train {
            let mean = z.channel_sum()?.mul_scalar(inv_count)?;
            let centered = z.sub(&mean.channel_broadcast(&shape)?)?;
            let var = centered
                .mul(&centered)?
                .channel_sum()?
                .mul_scalar(inv_count)?;
            (mean.clone(), var.clone(), Some((mean, var)))
        } else {
            let (rm, rv) = &self.bn_running[layer];
            let mean = self.tape.constant(rm.clone());
            let var = self.tape.constant(rv.clone());
            (mean, var, None)
        };

        let inv_std = var.add_scalar(BN_EPS)?.sqrt()?.recip()?;
        let centered = z.sub(&mean.channel_broadcast(&shape)?)?;
        let normalized = centered.mul(&inv_std.channel_broadcast(&shape)?)?;
        let out = normalized
            .mul(&gamma.channel_broadcast(&shape)?)?
            .add(&beta.channel_broadcast(&shape)?)?;
        Ok((out, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init, Activation, ModelSpec};
    use crate::tensor::{grad, Rng};

    #[test]
    fn bn_train_mode_normalizes_batch() {
        let mut spec = ModelSpec::mlp(&[3, 4, 2], Activation::Relu).unwrap();
        spec.batch_norm = true;
        let mut rng = Rng::new(5);
        let model = init(&spec, &mut rng).unwrap();

        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let x = tape.constant(Tensor::rand_normal(&[16, 3], 1.0, 2.0, &mut rng));
        let out = bound.forward(&x, true).unwrap();
        assert_eq!(out.bn_batch.len(), 1);
        let (mean, var) = &out.bn_batch[0];
        assert_eq!(mean.shape(), vec![4]);
        assert_eq!(var.shape(), vec![4]);
        assert!(out.logits.value().all_finite());
    }

    #[test]
    fn conv_forward_shapes_and_gradients() {
        let spec = ModelSpec::convnet_s(&[1, 8, 8], 10, Activation::Relu).unwrap();
        let mut rng = Rng::new(1);
        let model = init(&spec, &mut rng).unwrap();

        let tape = Tape::new();
        let bound = model.bind(&tape);
        let x = tape.constant(Tensor::rand_uniform(&[3, 1, 8, 8], 0.0, 1.0, &mut rng));
        let out = bound.forward(&x, true).unwrap();
        assert_eq!(out.logits.shape(), vec![3, 10]);
        assert_eq!(out.features.shape(), vec![3, 32 * 2 * 2]);

        let loss = out.logits.mul(&out.logits).unwrap().sum_all().unwrap();
        let wrt: Vec<&Var> = bound.params.iter().collect();
        let grads = grad(&loss, &wrt).unwrap();
        assert_eq!(grads.len(), bound.params.len());
        for g in grads {
            assert!(g.value().all_finite());
        }
    }
}
