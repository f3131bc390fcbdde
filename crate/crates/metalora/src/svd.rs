//! Singular value decomposition of small dense matrices by one-sided
//! Jacobi rotations. Accurate to near machine precision for the adapter
//! factors analyzed here (at most a few hundred rows/columns).

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Svd {
    /// Left singular vectors as columns, `[n, k]` with `k = min(n, m)`.
    pub u: Tensor,
    /// Singular values, sorted descending.
    pub s: Vec<f64>,
    /// Right singular vectors as rows, `[k, m]`.
    pub vt: Tensor,
}

impl Svd {
    /// `U diag(s) V^T`, for reconstruction checks.
    pub fn reconstruct(&self) -> Tensor {
        let (n, k) = (self.u.rows(), self.u.cols());
        let m = self.vt.cols();
        let mut out = Tensor::zeros(vec![n, m]);
        for p in 0..k {
            let sp = self.s[p];
            if sp == 0.0 {
                continue;
            }
            for i in 0..n {
                let uip = self.u.at(i, p) * sp;
                for j in 0..m {
                    let cur = out.at(i, j);
                    out.set(i, j, cur + uip * self.vt.at(p, j));
                }
            }
        }
        out
    }
}

/// Full SVD of a 2-D tensor. Transposes internally when the input is
/// wider than tall, so the Jacobi sweep always orthogonalizes at most
/// `min(n, m)` columns.
pub fn svd(matrix: &Tensor) -> Svd {
    assert_eq!(matrix.shape().len(), 2, "svd requires a 2-d tensor");
    let (n, m) = (matrix.rows(), matrix.cols());
    if m > n {
        let t = svd(&matrix.transpose());
        return Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        };
    }

    // Work on a column-major copy of the columns of `matrix`.
    let mut cols: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..n).map(|i| matrix.at(i, j)).collect())
        .collect();
    // V accumulates the applied rotations, starting from identity.
    let mut v: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = 1e-15;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..m {
            for q in (p + 1)..m {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..n {
                    app += cols[p][i] * cols[p][i];
                    aqq += cols[q][i] * cols[q][i];
                    apq += cols[p][i] * cols[q][i];
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let (xp, xq) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * xp - s * xq;
                    cols[q][i] = s * xp + c * xq;
                }
                for i in 0..m {
                    let (vp, vq) = (v[p][i], v[q][i]);
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; normalize to get U.
    let mut order: Vec<usize> = (0..m).collect();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());

    let mut u = Tensor::zeros(vec![n, m]);
    let mut vt = Tensor::zeros(vec![m, m]);
    let mut s = Vec::with_capacity(m);
    for (out_j, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..n {
                u.set(i, out_j, cols[j][i] / sigma);
            }
        }
        for i in 0..m {
            vt.set(out_j, i, v[j][i]);
        }
    }
    Svd { u, s, vt }
}

/// Singular values only, sorted descending.
pub fn singular_values(matrix: &Tensor) -> Vec<f64> {
    svd(matrix).s
}
