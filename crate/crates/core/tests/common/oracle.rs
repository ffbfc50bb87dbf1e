//! Scalar-loop reference implementations of the losses, independent of the
//! tape.

// Index loops mirror the summation notation on purpose.
#![allow(clippy::needless_range_loop)]

use byol_core::loss::LossConfig;

pub fn normalize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = (r.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn oracle_byol(q: &[Vec<f64>], z: &[Vec<f64>]) -> f64 {
    let n = q.len();
    (0..n).map(|i| 2.0 - 2.0 * dot(&q[i], &z[i])).sum::<f64>() / n as f64
}

pub fn oracle_ccsl(q: &[Vec<f64>], z: &[Vec<f64>], c: &LossConfig, repulsion: bool) -> f64 {
    let n = q.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 2.0 - 2.0 * dot(&q[i], &z[i]);
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = dot(&q[i], &z[j]);
            if s >= c.theta_p {
                row += c.lambda * (2.0 - 2.0 * s);
            }
            if repulsion && s <= c.theta_n {
                row -= c.lambda * (2.0 - 2.0 * s);
            }
        }
        total += row;
    }
    total / n as f64
}

pub fn oracle_cssl(q: &[Vec<f64>], z: &[Vec<f64>], c: &LossConfig) -> f64 {
    let n = q.len();
    let t = c.sigmoid_temperature;
    let mut total = 0.0;
    for i in 0..n {
        let mut row = -sigmoid(dot(&q[i], &z[i]) / t).ln();
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = dot(&q[i], &z[j]);
            let p = sigmoid(s / t);
            if s >= c.theta_p {
                row += c.lambda * -p.ln();
            }
            if s <= c.theta_n {
                row += c.lambda * -(1.0 - p).ln();
            }
        }
        total += row;
    }
    total / n as f64
}

pub fn oracle_nt_xent(z: &[Vec<f64>], zt: &[Vec<f64>], temp: f64) -> f64 {
    let n = z.len();
    let u: Vec<Vec<f64>> = normalize(&[z, zt].concat());
    let m = 2 * n;
    let mut total = 0.0;
    for k in 0..m {
        let pos = (k + n) % m;
        let denom: f64 = (0..m).filter(|&l| l != k).map(|l| (dot(&u[k], &u[l]) / temp).exp()).sum();
        total += -((dot(&u[k], &u[pos]) / temp).exp() / denom).ln();
    }
    total / m as f64
}
