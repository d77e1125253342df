//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix, written out
/// longhand as an oracle independent of the library's eigensolver.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    (0..n)
        .map(|i| (0..m).map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

pub fn cov(x: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = x.len() as f64;
    let d = x[0].len();
    let mu: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let c = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| x.iter().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).sum::<f64>() / (n - 1.0))
                .collect()
        })
        .collect();
    (mu, c)
}

pub fn oracle_fid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> f64 {
    let (mr, sr) = cov(real);
    let (mf, sf) = cov(fake);
    let (lam, v) = jacobi_eigen(&sr);
    let d = lam.len();
    let root_diag: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| if i == j { lam[i].max(0.0).sqrt() } else { 0.0 })
                .collect()
        })
        .collect();
    let vt: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| v[j][i]).collect()).collect();
    let root = matmul(&matmul(&v, &root_diag), &vt);
    let p = matmul(&matmul(&root, &sf), &root);
    let (mu, _) = jacobi_eigen(&p);
    let tr_sqrt: f64 = mu.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean: f64 = mr.iter().zip(&mf).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr: f64 = (0..d).map(|i| sr[i][i] + sf[i][i]).sum();
    mean + tr - 2.0 * tr_sqrt
}

pub fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64, scale: f64) -> Vec<Vec<f64>> {
    // Correlated features: x = A z + shift with a random mixing matrix.
    let a: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect())
        .collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            (0..d)
                .map(|i| shift + (0..d).map(|k| a[i][k] * z[k]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn to_dmatrix(x: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), x[0].len(), |i, j| x[i][j])
}
