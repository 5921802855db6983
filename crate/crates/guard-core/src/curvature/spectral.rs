//! Spectral estimation of the input Hessian via finite-difference
//! Hessian-vector products.
//!
//! Power iteration runs on the shifted operator H + mu*I with mu tracking
//! the running magnitude estimate, so indefinite Hessians (the common case
//! for cross-entropy in input space) still converge to the algebraically
//! largest eigenvalue. Deflation against already-found eigenpairs yields
//! the top-k profile.

use rayon::prelude::*;
use serde::Serialize;

use crate::tensor::{Rng, Tensor, TensorError, TensorResult};

use super::{hvp_fd, InputLoss, SampleLoss};
use crate::models::{Labels, Model};

#[derive(Debug, Clone)]
pub struct PowerOpts {
    pub iters: usize,
    /// Relative residual tolerance: accept when ||Hv - l v|| <= tol * |l|.
    pub tol: f64,
    /// Finite-difference step for the HVP.
    pub fd_step: f64,
}

impl Default for PowerOpts {
    fn default() -> Self {
        PowerOpts {
            iters: 100,
            tol: 1e-4,
            fd_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lambda1 {
    pub value: f64,
    pub vector: Tensor,
    /// ||Hv - lambda v||, absolute.
    pub residual: f64,
    pub converged: bool,
    pub iters_used: usize,
}

impl Lambda1 {
    /// Residual relative to |lambda| (absolute when lambda is zero).
    pub fn relative_residual(&self) -> f64 {
        if self.value.abs() > 1e-12 {
            self.residual / self.value.abs()
        } else {
            self.residual
        }
    }
}

fn orthogonalize(v: &mut Tensor, basis: &[(f64, Tensor)]) {
    for (_, b) in basis {
        let proj = v.dot(b).expect("deflation basis shares shape");
        *v = v.axpy(-proj, b).expect("deflation basis shares shape");
    }
}

fn deflated_hvp(
    loss: &dyn InputLoss,
    x: &Tensor,
    v: &Tensor,
    fd_step: f64,
    deflate: &[(f64, Tensor)],
) -> TensorResult<Tensor> {
    let mut hv = hvp_fd(loss, x, v, fd_step)?;
    for (lam, b) in deflate {
        let proj = v.dot(b)?;
        hv = hv.axpy(-lam * proj, b)?;
    }
    Ok(hv)
}

fn top_eig_deflated(
    loss: &dyn InputLoss,
    x: &Tensor,
    opts: &PowerOpts,
    rng: &mut Rng,
    deflate: &[(f64, Tensor)],
) -> TensorResult<Lambda1> {
    if opts.iters == 0 {
        return Err(TensorError::InvalidArg("power iteration needs iters >= 1".into()));
    }
    let mut v = Tensor::rand_normal(x.shape(), 0.0, 1.0, rng);
    orthogonalize(&mut v, deflate);
    let norm = v.norm_l2();
    if norm < 1e-12 {
        return Err(TensorError::InvalidArg(
            "could not draw a start vector orthogonal to the deflation basis".into(),
        ));
    }
    v = v.scale(1.0 / norm);

    let mut shift = 0.0_f64;
    let mut lambda = 0.0_f64;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iters_used = opts.iters;

    for it in 0..opts.iters {
        let hv = deflated_hvp(loss, x, &v, opts.fd_step, deflate)?;
        lambda = v.dot(&hv)?;
        residual = hv.axpy(-lambda, &v)?.norm_l2();
        if residual <= opts.tol * lambda.abs() || residual <= 1e-12 {
            converged = true;
            iters_used = it + 1;
            break;
        }
        shift = shift.max(lambda.abs());
        let mut next = hv.axpy(shift, &v)?;
        orthogonalize(&mut next, deflate);
        let n = next.norm_l2();
        if n < 1e-300 {
            // v is annihilated by the shifted operator; the estimate cannot
            // improve from here
            iters_used = it + 1;
            break;
        }
        v = next.scale(1.0 / n);
    }

    Ok(Lambda1 {
        value: lambda,
        vector: v,
        residual,
        converged,
        iters_used,
    })
}

/// Largest (algebraic) eigenvalue of the input Hessian at `x`.
pub fn lambda1_power(
    loss: &dyn InputLoss,
    x: &Tensor,
    opts: &PowerOpts,
    rng: &mut Rng,
) -> TensorResult<Lambda1> {
    top_eig_deflated(loss, x, opts, rng, &[])
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub sample_id: usize,
    /// Top-k eigenvalue estimates, sorted non-increasing.
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
    pub iters: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvatureProfile {
    pub k: usize,
    pub rows: Vec<ProfileRow>,
}

impl CurvatureProfile {
    pub fn median_lambda1(&self) -> f64 {
        let mut tops: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| r.eigenvalues.first().copied())
            .collect();
        if tops.is_empty() {
            return f64::NAN;
        }
        tops.sort_by(|a, b| a.total_cmp(b));
        let mid = tops.len() / 2;
        if tops.len() % 2 == 1 {
            tops[mid]
        } else {
            0.5 * (tops[mid - 1] + tops[mid])
        }
    }
}

/// Top-k eigenvalues of one sample's input Hessian via deflated power
/// iteration.
pub fn profile_sample(
    loss: &dyn InputLoss,
    x: &Tensor,
    sample_id: usize,
    k: usize,
    opts: &PowerOpts,
    rng: &mut Rng,
) -> TensorResult<ProfileRow> {
    if k > x.numel() {
        return Err(TensorError::InvalidArg(format!(
            "k={k} exceeds input dimension {}",
            x.numel()
        )));
    }
    let mut found: Vec<(f64, Tensor)> = Vec::with_capacity(k);
    let mut row = ProfileRow {
        sample_id,
        eigenvalues: Vec::with_capacity(k),
        residuals: Vec::with_capacity(k),
        converged: Vec::with_capacity(k),
        iters: Vec::with_capacity(k),
    };
    for _ in 0..k {
        let est = top_eig_deflated(loss, x, opts, rng, &found)?;
        row.eigenvalues.push(est.value);
        row.residuals.push(est.residual);
        row.converged.push(est.converged);
        row.iters.push(est.iters_used);
        found.push((est.value, est.vector));
    }
    // deflation yields eigenvalues in descending order up to estimation
    // noise; enforce the invariant
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| row.eigenvalues[b].total_cmp(&row.eigenvalues[a]));
    row.eigenvalues = order.iter().map(|&i| row.eigenvalues[i]).collect();
    row.residuals = order.iter().map(|&i| row.residuals[i]).collect();
    row.converged = order.iter().map(|&i| row.converged[i]).collect();
    row.iters = order.iter().map(|&i| row.iters[i]).collect();
    Ok(row)
}

/// Per-sample top-k input-Hessian spectra of a model's CE loss.
/// Samples run in parallel; each derives its own rng stream, so the result
/// does not depend on scheduling.
pub fn profile(
    model: &Model,
    xs: &Tensor,
    ys: &Labels,
    k: usize,
    opts: &PowerOpts,
    rng: &Rng,
) -> TensorResult<CurvatureProfile> {
    let n = xs.shape()[0];
    let labels = ys.hard();
    let rows: Vec<TensorResult<ProfileRow>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = xs.slice_first(i);
            let loss = SampleLoss::new(model, labels[i]);
            let mut sample_rng = rng.stream(0x5eed_0000 + i as u64);
            profile_sample(&loss, &x, i, k, opts, &mut sample_rng)
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for r in rows {
        out.push(r?);
    }
    Ok(CurvatureProfile { k, rows: out })
}

/// CSV emission: sample_id, rank, eigenvalue, residual, converged.
pub fn profile_to_csv<W: std::io::Write>(p: &CurvatureProfile, w: W) -> TensorResult<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer
        .write_record(["sample_id", "rank", "eigenvalue", "residual", "converged"])
        .map_err(csv_err)?;
    for row in &p.rows {
        for rank in 0..row.eigenvalues.len() {
            writer
                .write_record([
                    row.sample_id.to_string(),
                    (rank + 1).to_string(),
                    format!("{}", row.eigenvalues[rank]),
                    format!("{}", row.residuals[rank]),
                    row.converged[rank].to_string(),
                ])
                .map_err(csv_err)?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> TensorError {
    TensorError::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::QuadraticLoss;

    fn quad_from_diag(diag: &[f64]) -> QuadraticLoss {
        let d = diag.len();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = diag[i];
        }
        QuadraticLoss::new(
            Tensor::new(&[d, d], a).unwrap(),
            Tensor::zeros(&[d]),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn diagonal_quadratic_lambda1() {
        let quad = quad_from_diag(&[3.0, 1.0, 0.5]);
        let x = Tensor::zeros(&[3]);
        let opts = PowerOpts {
            iters: 500,
            tol: 1e-8,
            fd_step: 1e-3,
        };
        let mut rng = Rng::new(3);
        let est = lambda1_power(&quad, &x, &opts, &mut rng).unwrap();
        assert!(est.converged);
        assert!((est.value - 3.0).abs() < 1e-6, "{}", est.value);
    }

    #[test]
    fn zero_hessian_returns_zero_with_zero_residual() {
        // linear loss: gradient constant, Hessian zero
        let quad = quad_from_diag(&[0.0, 0.0]);
        let x = Tensor::zeros(&[2]);
        let opts = PowerOpts::default();
        let mut rng = Rng::new(4);
        let est = lambda1_power(&quad, &x, &opts, &mut rng).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(est.residual <= 1e-12);
        assert!(est.converged);
    }

    #[test]
    fn indefinite_hessian_finds_algebraic_max() {
        // largest magnitude is -5 but the algebraic max is 2
        let quad = quad_from_diag(&[-5.0, 2.0, 1.0]);
        let x = Tensor::zeros(&[3]);
        let opts = PowerOpts {
            iters: 2000,
            tol: 1e-9,
            fd_step: 1e-3,
        };
        let mut rng = Rng::new(5);
        let est = lambda1_power(&quad, &x, &opts, &mut rng).unwrap();
        assert!((est.value - 2.0).abs() < 1e-5, "{}", est.value);
    }

    #[test]
    fn deflated_profile_recovers_full_spectrum() {
        let quad = quad_from_diag(&[4.0, -1.0, 2.5, 0.5]);
        let x = Tensor::zeros(&[4]);
        let opts = PowerOpts {
            iters: 2000,
            tol: 1e-9,
            fd_step: 1e-3,
        };
        let mut rng = Rng::new(6);
        let row = profile_sample(&quad, &x, 0, 4, &opts, &mut rng).unwrap();
        let expect = [4.0, 2.5, 0.5, -1.0];
        for (got, want) in row.eigenvalues.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        for w in row.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn k_exceeding_dimension_is_rejected() {
        let quad = quad_from_diag(&[1.0, 2.0]);
        let x = Tensor::zeros(&[2]);
        let mut rng = Rng::new(7);
        assert!(profile_sample(&quad, &x, 0, 3, &PowerOpts::default(), &mut rng).is_err());
    }
}
