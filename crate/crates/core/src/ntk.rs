//! Exact empirical NTK for small networks.

use crate::autodiff::{forward, ActivationMode};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::pruning::px;
use crate::tensor::Tensor;

/// Default ceiling on `N·K·m` Jacobian entries.
pub const DEFAULT_JACOBIAN_CAP: usize = 20_000_000;
pub const EIGEN_TOLERANCE: f64 = 1e-12;
pub const EIGEN_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct NtkResult {
    /// `NK × NK` kernel `J Jᵀ`, rows ordered `(n, k)` with `k` fastest.
    pub kernel: Tensor,
    /// `Σ diag(J Jᵀ)`.
    pub trace: f64,
    /// `‖J‖²_F`, computed independently of the kernel.
    pub trace_frobenius: f64,
    /// Descending; empty until [`with_spectrum`](Self::with_spectrum) runs.
    pub eigenvalues: Vec<f64>,
}

impl NtkResult {
    pub fn with_spectrum(mut self) -> Result<Self> {
        self.eigenvalues = eigenspectrum(&self.kernel)?;
        Ok(self)
    }
}

/// Row `(n, k)` holds `∂f^k(x_n)/∂θ` under the current mask.
pub fn jacobian(net: &Network, x: &Tensor) -> Result<Tensor> {
    jacobian_capped(net, x, DEFAULT_JACOBIAN_CAP)
}

pub fn jacobian_capped(net: &Network, x: &Tensor, cap: usize) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(0);
    let k = net.output_dim();
    let m = net.num_params();
    let needed = n * k * m;
    if needed > cap {
        return Err(Error::CapExceeded {
            what: "jacobian entries",
            needed,
            cap,
        });
    }
    let pass = forward(net, x, ActivationMode::Standard)?;
    let row = |r: usize| -> Result<Vec<f64>> {
        let mut seed = Tensor::zeros(&[n, k]);
        seed.data_mut()[r] = 1.0;
        pass.backward(&seed)
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..n * k).into_par_iter().map(row).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<f64>> = (0..n * k).map(row).collect::<Result<_>>()?;
    Tensor::new(vec![n * k, m], rows.concat())
}

pub fn ntk_from_jacobian(jac: &Tensor) -> Result<NtkResult> {
    let kernel = jac.matmul_transposed(jac)?;
    let rows = kernel.shape()[0];
    let trace = (0..rows).map(|i| kernel.data()[i * rows + i]).sum();
    Ok(NtkResult {
        kernel,
        trace,
        trace_frobenius: jac.sum_sq(),
        eigenvalues: Vec::new(),
    })
}

/// Full NTK with spectrum at the network's current (masked) weights.
pub fn ntk(net: &Network, x: &Tensor) -> Result<NtkResult> {
    ntk_from_jacobian(&jacobian(net, x)?)?.with_spectrum()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn eigenspectrum(kernel: &Tensor) -> Result<Vec<f64>> {
    eigenspectrum_with(kernel, EIGEN_TOLERANCE, EIGEN_MAX_SWEEPS)
}

pub fn eigenspectrum_with(kernel: &Tensor, tol: f64, max_sweeps: usize) -> Result<Vec<f64>> {
    let (n, c) = kernel.dims2("eigenspectrum")?;
    if n != c {
        return Err(Error::InvalidArgument(format!("eigenspectrum needs a square matrix, got {n}x{c}")));
    }
    let mut a = kernel.data().to_vec();
    let fro = kernel.sum_sq().sqrt();
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-12 * fro.max(f64::MIN_POSITIVE) {
                return Err(Error::InvalidArgument("eigenspectrum needs a symmetric matrix".into()));
            }
        }
    }
    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut converged = off_norm(&a) <= tol * fro;
    let mut sweep = 0;
    while !converged && sweep < max_sweeps {
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
            }
        }
        sweep += 1;
        converged = off_norm(&a) <= tol * fro;
    }
    if !converged {
        return Err(Error::NoConvergence(sweep));
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

/// The two factors of the trace bound, computed with g and h forward passes.
///
/// `jvf_sq = Σ_n Σ_k g^k(x_n², 1, a_n)` and `jtv_sq = Σ_k Σ_j ∂h^k/∂θ_j²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub jvf_sq: f64,
    pub jtv_sq: f64,
}

impl BoundTerms {
    pub fn bound(&self) -> f64 {
        self.jvf_sq * self.jtv_sq
    }
}

pub fn bound_terms(net: &Network, x: &Tensor) -> Result<BoundTerms> {
    let record = forward(net, x, ActivationMode::Standard)?.record;
    let g = px::g_outputs(net, x, &record)?;
    let squared: Vec<f64> = net.params().iter().map(|t| t * t).collect();
    let h = px::h_forward(net, &squared)?;
    let grads = h.backward(&Tensor::ones(h.output.shape()))?;
    Ok(BoundTerms {
        jvf_sq: g.sum(),
        jtv_sq: grads.iter().sum(),
    })
}
