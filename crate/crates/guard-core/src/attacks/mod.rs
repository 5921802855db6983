//! Adversarial example generation and robust-accuracy measurement.
//!
//! Every family clips its output to the valid input range [0,1] and
//! projects into the epsilon-ball around the clean input, so ball and
//! range containment hold for every emitted sample.

use serde::{Deserialize, Serialize};

use crate::curvature::input_gradient;
use crate::models::{argmax, Labels, Model, ModelError, ModelResult};
use crate::tensor::{Rng, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackFamily {
    None,
    Fgsm,
    Pgd,
    Mim,
    CwL2,
    Square,
    AutoLite,
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AttackFamily::None => "none",
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::Mim => "mim",
            AttackFamily::CwL2 => "cw-l2",
            AttackFamily::Square => "square",
            AttackFamily::AutoLite => "auto-lite",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackNorm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub norm: AttackNorm,
    pub epsilon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Step size; when absent, 2.5 * epsilon / steps (PGD) or
    /// epsilon / steps (MIM).
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// MIM momentum.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// CW margin weight (the paper's box constraint c).
    #[serde(default = "default_cw_c")]
    pub cw_c: f64,
    /// CW step size; the paper does not state one.
    #[serde(default = "default_cw_lr")]
    pub cw_lr: f64,
    /// CW iteration count; the paper does not state one.
    #[serde(default = "default_cw_iters")]
    pub cw_iters: usize,
    #[serde(default)]
    pub rng_stream: u64,
}

fn default_steps() -> usize {
    20
}
fn default_restarts() -> usize {
    1
}
fn default_momentum() -> f64 {
    1.0
}
fn default_cw_c() -> f64 {
    1e-5
}
fn default_cw_lr() -> f64 {
    0.01
}
fn default_cw_iters() -> usize {
    100
}

impl AttackSpec {
    pub fn new(family: AttackFamily, norm: AttackNorm, epsilon: f64) -> Self {
        AttackSpec {
            family,
            norm,
            epsilon,
            steps: default_steps(),
            step_size: None,
            restarts: default_restarts(),
            momentum: default_momentum(),
            cw_c: default_cw_c(),
            cw_lr: default_cw_lr(),
            cw_iters: default_cw_iters(),
            rng_stream: 0,
        }
    }

    pub fn none() -> Self {
        Self::new(AttackFamily::None, AttackNorm::Linf, 0.0)
    }

    pub fn validate(&self) -> ModelResult<()> {
        if self.epsilon < 0.0 {
            return Err(bad("epsilon must be >= 0"));
        }
        match self.family {
            AttackFamily::Pgd | AttackFamily::Mim => {
                if self.steps < 1 {
                    return Err(bad("iterative attacks need steps >= 1"));
                }
            }
            AttackFamily::CwL2 => {
                if self.cw_iters < 1 {
                    return Err(bad("cw needs cw_iters >= 1"));
                }
                if self.norm != AttackNorm::L2 {
                    return Err(bad("cw-l2 is an l2 attack"));
                }
            }
            AttackFamily::Square | AttackFamily::AutoLite => {
                if self.norm != AttackNorm::Linf {
                    return Err(bad("square and auto-lite support the linf norm"));
                }
                if self.steps < 1 {
                    return Err(bad("square needs steps >= 1"));
                }
            }
            AttackFamily::None | AttackFamily::Fgsm => {}
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(match self.family {
            AttackFamily::Mim => self.epsilon / self.steps as f64,
            _ => 2.5 * self.epsilon / self.steps as f64,
        })
    }
}

fn bad(msg: &str) -> ModelError {
    ModelError::Tensor(TensorError::InvalidArg(msg.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleOutcome {
    pub sample_id: usize,
    pub family: String,
    /// The attack flipped an originally-correct prediction.
    pub success: bool,
    pub final_loss: f64,
    pub pert_norm: f64,
    /// Non-finite logits aborted this sample; its clean input was kept.
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub outcomes: Vec<SampleOutcome>,
}

/// Per-sample cross-entropy values from raw logits.
fn ce_rows(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let c = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect()
}

/// Margin z_y - max_{j != y} z_j per sample; negative means misclassified.
fn margin_rows(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let c = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut other = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if j != y {
                    other = other.max(v);
                }
            }
            row[y] - other
        })
        .collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects row i of `adv` into the epsilon-ball around `clean` and into
/// [0,1]. Clamping never increases the distance to the clean input, so the
/// ball property survives it.
fn project(adv: &mut Tensor, clean: &Tensor, norm: AttackNorm, eps: f64) {
    let n = clean.shape()[0];
    let stride = clean.numel() / n;
    let cd = clean.data().to_vec();
    let ad = adv.data_mut();
    match norm {
        AttackNorm::Linf => {
            for i in 0..ad.len() {
                ad[i] = ad[i].clamp(cd[i] - eps, cd[i] + eps).clamp(0.0, 1.0);
            }
        }
        AttackNorm::L2 => {
            for r in 0..n {
                let lo = r * stride;
                let hi = lo + stride;
                let dist: f64 = (lo..hi).map(|i| (ad[i] - cd[i]).powi(2)).sum::<f64>().sqrt();
                if dist > eps {
                    let scale = eps / dist;
                    for i in lo..hi {
                        ad[i] = cd[i] + (ad[i] - cd[i]) * scale;
                    }
                }
                for i in lo..hi {
                    ad[i] = ad[i].clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn per_row_norm(adv: &Tensor, clean: &Tensor, norm: AttackNorm) -> Vec<f64> {
    let n = clean.shape()[0];
    let stride = clean.numel() / n;
    (0..n)
        .map(|r| {
            let lo = r * stride;
            let hi = lo + stride;
            match norm {
                AttackNorm::Linf => (lo..hi)
                    .map(|i| (adv.data()[i] - clean.data()[i]).abs())
                    .fold(0.0, f64::max),
                AttackNorm::L2 => (lo..hi)
                    .map(|i| (adv.data()[i] - clean.data()[i]).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            }
        })
        .collect()
}

struct GradEval<'m> {
    model: &'m Model,
    labels: Labels,
}

impl GradEval<'_> {
    /// (per-sample CE, per-sample gradient rows); aborts are flagged by the
    /// caller via the logits check.
    fn ce_and_grad(&self, x: &Tensor) -> ModelResult<(Vec<f64>, Tensor)> {
        let (_, g) = input_gradient(self.model, x, &self.labels)?;
        let logits = self.model.predict(x)?;
        Ok((ce_rows(&logits, &self.labels.hard()), g))
    }
}

/// Generates adversarial examples for a labeled batch.
pub fn perturb(
    model: &Model,
    x: &Tensor,
    y: &Labels,
    spec: &AttackSpec,
    rng: &Rng,
) -> ModelResult<AttackResult> {
    spec.validate()?;
    let labels = y.hard();
    let clean_pred = model.predict_classes(x)?;

    let x_adv = if spec.epsilon == 0.0 || spec.family == AttackFamily::None {
        x.clone()
    } else {
        let rng = rng.stream(spec.rng_stream);
        match spec.family {
            AttackFamily::None => unreachable!(),
            AttackFamily::Fgsm => fgsm(model, x, &labels, spec)?,
            AttackFamily::Pgd => pgd(model, x, &labels, spec, &rng)?,
            AttackFamily::Mim => mim(model, x, &labels, spec)?,
            AttackFamily::CwL2 => cw_l2(model, x, &labels, spec)?,
            AttackFamily::Square => square(model, x, &labels, spec, &rng)?,
            AttackFamily::AutoLite => {
                return auto_lite(model, x, y, spec, &rng);
            }
        }
    };

    finish(model, x, y, spec, x_adv, &clean_pred, &labels)
}

fn finish(
    model: &Model,
    x: &Tensor,
    _y: &Labels,
    spec: &AttackSpec,
    mut x_adv: Tensor,
    clean_pred: &[usize],
    labels: &[usize],
) -> ModelResult<AttackResult> {
    // final containment pass plus per-sample abort handling
    if spec.family != AttackFamily::None && spec.epsilon > 0.0 {
        project(&mut x_adv, x, spec.norm, spec.epsilon);
    }
    let n = x.shape()[0];
    let stride = x.numel() / n;
    let logits = model.predict(&x_adv)?;
    let mut aborted = vec![false; n];
    for i in 0..n {
        let row = &logits.data()[i * logits.shape()[1]..(i + 1) * logits.shape()[1]];
        if !row.iter().all(|v| v.is_finite()) {
            aborted[i] = true;
            let xd = x.data()[i * stride..(i + 1) * stride].to_vec();
            x_adv.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(&xd);
        }
    }
    let logits = model.predict(&x_adv)?;
    let losses = ce_rows(&logits, labels);
    let norms = per_row_norm(&x_adv, x, spec.norm);
    let c = logits.shape()[1];
    let outcomes = (0..n)
        .map(|i| {
            let adv_pred = argmax(&logits.data()[i * c..(i + 1) * c]);
            SampleOutcome {
                sample_id: i,
                family: spec.family.to_string(),
                success: clean_pred[i] == labels[i] && adv_pred != labels[i],
                final_loss: losses[i],
                pert_norm: norms[i],
                aborted: aborted[i],
            }
        })
        .collect();
    Ok(AttackResult { x_adv, outcomes })
}

fn fgsm(model: &Model, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> ModelResult<Tensor> {
    let eval = GradEval {
        model,
        labels: Labels::Hard(labels.to_vec()),
    };
    let (_, g) = eval.ce_and_grad(x)?;
    let mut adv = match spec.norm {
        AttackNorm::Linf => {
            let step = g.map(|v| spec.epsilon * sign(v));
            x.add(&step)?
        }
        AttackNorm::L2 => {
            let n = x.shape()[0];
            let stride = x.numel() / n;
            let mut out = x.data().to_vec();
            for r in 0..n {
                let lo = r * stride;
                let hi = lo + stride;
                let nrm: f64 = (lo..hi).map(|i| g.data()[i].powi(2)).sum::<f64>().sqrt();
                if nrm > 0.0 {
                    for i in lo..hi {
                        out[i] += spec.epsilon * g.data()[i] / nrm;
                    }
                }
            }
            Tensor::new(x.shape(), out)?
        }
    };
    project(&mut adv, x, spec.norm, spec.epsilon);
    Ok(adv)
}

fn pgd(model: &Model, x: &Tensor, labels: &[usize], spec: &AttackSpec, rng: &Rng) -> ModelResult<Tensor> {
    let eval = GradEval {
        model,
        labels: Labels::Hard(labels.to_vec()),
    };
    let n = x.shape()[0];
    let stride = x.numel() / n;
    let alpha = spec.alpha();

    let mut best = x.clone();
    let mut best_loss = {
        let logits = model.predict(x)?;
        ce_rows(&logits, labels)
    };

    for restart in 0..spec.restarts.max(1) {
        let mut r = rng.stream(restart as u64);
        // random start inside the ball
        let mut adv = x.clone();
        {
            let ad = adv.data_mut();
            match spec.norm {
                AttackNorm::Linf => {
                    for v in ad.iter_mut() {
                        *v += r.range(-spec.epsilon, spec.epsilon);
                    }
                }
                AttackNorm::L2 => {
                    for row in 0..n {
                        let dir: Vec<f64> = (0..stride).map(|_| r.normal()).collect();
                        let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        let radius = spec.epsilon * r.uniform().powf(1.0 / stride as f64);
                        for (k, d) in dir.iter().enumerate() {
                            ad[row * stride + k] += radius * d / nrm;
                        }
                    }
                }
            }
        }
        project(&mut adv, x, spec.norm, spec.epsilon);

        for _ in 0..spec.steps {
            let (losses, g) = eval.ce_and_grad(&adv)?;
            for (i, &l) in losses.iter().enumerate() {
                if l > best_loss[i] && l.is_finite() {
                    best_loss[i] = l;
                    let lo = i * stride;
                    let src = adv.data()[lo..lo + stride].to_vec();
                    best.data_mut()[lo..lo + stride].copy_from_slice(&src);
                }
            }
            let ad = adv.data_mut();
            match spec.norm {
                AttackNorm::Linf => {
                    for (v, gv) in ad.iter_mut().zip(g.data()) {
                        *v += alpha * sign(*gv);
                    }
                }
                AttackNorm::L2 => {
                    for row in 0..n {
                        let lo = row * stride;
                        let hi = lo + stride;
                        let nrm: f64 =
                            (lo..hi).map(|i| g.data()[i].powi(2)).sum::<f64>().sqrt();
                        if nrm > 0.0 {
                            for i in lo..hi {
                                ad[i] += alpha * g.data()[i] / nrm;
                            }
                        }
                    }
                }
            }
            project(&mut adv, x, spec.norm, spec.epsilon);
        }
        // final candidate of this restart
        let (losses, _) = eval.ce_and_grad(&adv)?;
        for (i, &l) in losses.iter().enumerate() {
            if l > best_loss[i] && l.is_finite() {
                best_loss[i] = l;
                let lo = i * stride;
                let src = adv.data()[lo..lo + stride].to_vec();
                best.data_mut()[lo..lo + stride].copy_from_slice(&src);
            }
        }
    }
    Ok(best)
}

fn mim(model: &Model, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> ModelResult<Tensor> {
    let eval = GradEval {
        model,
        labels: Labels::Hard(labels.to_vec()),
    };
    let n = x.shape()[0];
    let stride = x.numel() / n;
    let alpha = spec.alpha();
    let mut adv = x.clone();
    let mut acc = vec![0.0; x.numel()];

    for _ in 0..spec.steps {
        let (_, g) = eval.ce_and_grad(&adv)?;
        for row in 0..n {
            let lo = row * stride;
            let hi = lo + stride;
            let l1: f64 = (lo..hi).map(|i| g.data()[i].abs()).sum::<f64>().max(1e-12);
            for i in lo..hi {
                acc[i] = spec.momentum * acc[i] + g.data()[i] / l1;
            }
        }
        let ad = adv.data_mut();
        match spec.norm {
            AttackNorm::Linf => {
                for (v, a) in ad.iter_mut().zip(acc.iter()) {
                    *v += alpha * sign(*a);
                }
            }
            AttackNorm::L2 => {
                for row in 0..n {
                    let lo = row * stride;
                    let hi = lo + stride;
                    let nrm: f64 = (lo..hi).map(|i| acc[i].powi(2)).sum::<f64>().sqrt();
                    if nrm > 0.0 {
                        for i in lo..hi {
                            ad[i] += alpha * acc[i] / nrm;
                        }
                    }
                }
            }
        }
        project(&mut adv, x, spec.norm, spec.epsilon);
    }
    Ok(adv)
}

fn cw_l2(model: &Model, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> ModelResult<Tensor> {
    use crate::tensor::{grad, Tape};

    let n = x.shape()[0];
    let stride = x.numel() / n;
    // tanh reparameterization: x = (tanh(w) + 1) / 2
    let squash = |v: f64| (2.0 * v.clamp(1e-6, 1.0 - 1e-6) - 1.0).atanh();
    let mut w = x.map(squash);

    let mut best = x.clone();
    let mut best_score = vec![f64::INFINITY; n];

    for _ in 0..spec.cw_iters {
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let wv = tape.input(w.clone());
        let xv = wv.tanh()?.add_scalar(1.0)?.mul_scalar(0.5)?;
        let out = bound.forward(&xv, false)?;
        let logits_val = out.logits.value();
        if !logits_val.all_finite() {
            break; // abort handling happens in finish()
        }

        // margin = relu(z_y - max_{j!=y} z_j): zero once misclassified
        let hard = labels.to_vec();
        let c = logits_val.shape()[1];
        let other: Vec<usize> = (0..n)
            .map(|i| {
                let row = &logits_val.data()[i * c..(i + 1) * c];
                let mut best_j = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if j != hard[i] && v > best_v {
                        best_v = v;
                        best_j = j;
                    }
                }
                best_j
            })
            .collect();
        let z_true = out.logits.gather_label(&std::rc::Rc::new(hard.clone()))?;
        let z_other = out.logits.gather_label(&std::rc::Rc::new(other))?;
        let margin = z_true.sub(&z_other)?.relu()?;

        let x0 = tape.constant(x.clone());
        let delta = xv.sub(&x0)?;
        let dist = delta.mul(&delta)?.reshape(&[n, stride])?.row_sum()?;
        let objective = dist.add(&margin.mul_scalar(spec.cw_c)?)?.sum_all()?;

        // track the best candidate per sample: prefer misclassified with
        // the smallest distance
        let xv_val = xv.value();
        let margins = margin_rows(&logits_val, labels);
        for i in 0..n {
            let lo = i * stride;
            let d2: f64 = (lo..lo + stride)
                .map(|k| (xv_val.data()[k] - x.data()[k]).powi(2))
                .sum();
            let score = if margins[i] < 0.0 { d2 } else { f64::INFINITY };
            if score < best_score[i] {
                best_score[i] = score;
                let src = xv_val.data()[lo..lo + stride].to_vec();
                best.data_mut()[lo..lo + stride].copy_from_slice(&src);
            }
        }

        let gw = grad(&objective, &[&wv])?.remove(0).value();
        w = w.axpy(-spec.cw_lr, &gw)?;
    }

    // samples never misclassified keep their final iterate
    let final_x = {
        let mut out = best;
        let reparam = w.map(|v| (v.tanh() + 1.0) * 0.5);
        for i in 0..n {
            if best_score[i].is_infinite() {
                let lo = i * stride;
                let src = reparam.data()[lo..lo + stride].to_vec();
                out.data_mut()[lo..lo + stride].copy_from_slice(&src);
            }
        }
        out
    };
    Ok(final_x)
}

fn square(model: &Model, x: &Tensor, labels: &[usize], spec: &AttackSpec, rng: &Rng) -> ModelResult<Tensor> {
    let n = x.shape()[0];
    let stride = x.numel() / n;
    let (channels, height, width) = if x.shape().len() == 4 {
        (x.shape()[1], x.shape()[2], x.shape()[3])
    } else {
        (1, 1, stride)
    };
    let mut r = rng.stream(5);

    // stripe initialization: per channel and column, a random +-eps offset
    let mut adv = x.clone();
    {
        let ad = adv.data_mut();
        for i in 0..n {
            for ch in 0..channels {
                for col in 0..width {
                    let s = r.sign() * spec.epsilon;
                    for row in 0..height {
                        let idx = i * stride + (ch * height + row) * width + col;
                        ad[idx] += s;
                    }
                }
            }
        }
    }
    project(&mut adv, x, AttackNorm::Linf, spec.epsilon);

    let logits = model.predict(&adv)?;
    let mut best_margin = margin_rows(&logits, labels);

    for it in 0..spec.steps {
        // shrinking schedule for the square side
        let frac = (0.4 * (1.0 - it as f64 / spec.steps as f64).powi(2)).max(0.02);
        let side_h = ((frac * height as f64).sqrt().round() as usize).clamp(1, height);
        let side_w = ((frac * width as f64).sqrt().round() as usize).clamp(1, width.max(1));

        let mut candidate = adv.clone();
        {
            let cd = candidate.data_mut();
            for i in 0..n {
                if best_margin[i] < 0.0 {
                    continue; // already misclassified
                }
                let r0 = if height > side_h { r.below(height - side_h + 1) } else { 0 };
                let c0 = if width > side_w { r.below(width - side_w + 1) } else { 0 };
                for ch in 0..channels {
                    let s = r.sign() * spec.epsilon;
                    for dr in 0..side_h {
                        for dc in 0..side_w {
                            let idx = i * stride + (ch * height + r0 + dr) * width + c0 + dc;
                            cd[idx] = x.data()[idx] + s;
                        }
                    }
                }
            }
        }
        project(&mut candidate, x, AttackNorm::Linf, spec.epsilon);

        let logits = model.predict(&candidate)?;
        let margins = margin_rows(&logits, labels);
        for i in 0..n {
            if margins[i] < best_margin[i] {
                best_margin[i] = margins[i];
                let lo = i * stride;
                let src = candidate.data()[lo..lo + stride].to_vec();
                adv.data_mut()[lo..lo + stride].copy_from_slice(&src);
            }
        }
    }
    Ok(adv)
}

/// Per-sample worst case over {pgd, mim, square}: a sample counts as robust
/// only if it survives every component attack (and was clean-correct, the
/// implicit identity candidate).
fn auto_lite(
    model: &Model,
    x: &Tensor,
    y: &Labels,
    spec: &AttackSpec,
    rng: &Rng,
) -> ModelResult<AttackResult> {
    let labels = y.hard();
    let n = x.shape()[0];
    let stride = x.numel() / n;
    let clean_pred = model.predict_classes(x)?;

    let component = |family: AttackFamily, stream: u64| -> ModelResult<AttackResult> {
        let mut sub = spec.clone();
        sub.family = family;
        sub.rng_stream = stream;
        let result = match family {
            AttackFamily::Pgd => pgd(model, x, &labels, &sub, &rng.stream(stream))?,
            AttackFamily::Mim => mim(model, x, &labels, &sub)?,
            AttackFamily::Square => square(model, x, &labels, &sub, &rng.stream(stream))?,
            _ => unreachable!(),
        };
        finish(model, x, y, &sub, result, &clean_pred, &labels)
    };

    let parts = [
        component(AttackFamily::Pgd, 1)?,
        component(AttackFamily::Mim, 2)?,
        component(AttackFamily::Square, 3)?,
    ];

    let mut x_adv = x.clone();
    let mut outcomes = Vec::with_capacity(n);
    for i in 0..n {
        // prefer a successful component; otherwise the highest loss
        let mut chosen: Option<&AttackResult> = None;
        for p in &parts {
            if p.outcomes[i].success {
                chosen = Some(p);
                break;
            }
        }
        let chosen = chosen.unwrap_or_else(|| {
            parts
                .iter()
                .max_by(|a, b| a.outcomes[i].final_loss.total_cmp(&b.outcomes[i].final_loss))
                .expect("nonempty")
        });
        let lo = i * stride;
        let src = chosen.x_adv.data()[lo..lo + stride].to_vec();
        x_adv.data_mut()[lo..lo + stride].copy_from_slice(&src);
        let mut o = chosen.outcomes[i].clone();
        o.family = AttackFamily::AutoLite.to_string();
        outcomes.push(o);
    }
    Ok(AttackResult { x_adv, outcomes })
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustAccuracy {
    pub accuracy: f64,
    pub clean_accuracy: f64,
    pub aborted: usize,
}

/// Fraction of samples still classified correctly after the attack.
/// `AttackFamily::None` measures clean accuracy.
pub fn robust_accuracy(
    model: &Model,
    x: &Tensor,
    y: &Labels,
    spec: &AttackSpec,
    rng: &Rng,
) -> ModelResult<RobustAccuracy> {
    let labels = y.hard();
    let clean_pred = model.predict_classes(x)?;
    let clean_hits = clean_pred
        .iter()
        .zip(labels.iter())
        .filter(|(a, b)| a == b)
        .count();
    let clean_accuracy = clean_hits as f64 / labels.len().max(1) as f64;

    if spec.family == AttackFamily::None {
        return Ok(RobustAccuracy {
            accuracy: clean_accuracy,
            clean_accuracy,
            aborted: 0,
        });
    }

    let result = perturb(model, x, y, spec, rng)?;
    let adv_pred = model.predict_classes(&result.x_adv)?;
    let hits = adv_pred
        .iter()
        .zip(labels.iter())
        .filter(|(a, b)| a == b)
        .count();
    Ok(RobustAccuracy {
        accuracy: hits as f64 / labels.len().max(1) as f64,
        clean_accuracy,
        aborted: result.outcomes.iter().filter(|o| o.aborted).count(),
    })
}

/// CSV export: sample_id, family, success, final_loss, pert_norm.
pub fn outcomes_to_csv<W: std::io::Write>(outcomes: &[SampleOutcome], w: W) -> ModelResult<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer
        .write_record(["sample_id", "family", "success", "final_loss", "pert_norm"])
        .map_err(|e| ModelError::Format(e.to_string()))?;
    for o in outcomes {
        writer
            .write_record([
                o.sample_id.to_string(),
                o.family.clone(),
                o.success.to_string(),
                format!("{}", o.final_loss),
                format!("{}", o.pert_norm),
            ])
            .map_err(|e| ModelError::Format(e.to_string()))?;
    }
    writer.flush().map_err(ModelError::Io)?;
    Ok(())
}
