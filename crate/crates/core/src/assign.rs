//! Index assignment for the analog-index mode.
//!
//! A PAM symbol mostly slips to neighbouring levels, so the numbering of the
//! codewords decides what a channel error costs. Codewords are ordered along
//! their principal axis, then refined by binary switching: greedy pairwise
//! swaps that lower the expected distortion over a set of SNRs.

use crate::channel::{noise_variance, pam_amplitude};
use crate::error::{Error, Result};

const MAX_PASSES: usize = 50;

/// Standard normal CDF. The erfc fit has fractional error below 1.2e-7.
pub fn normal_cdf(x: f64) -> f64 {
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07 + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let tail = 0.5 * t * poly.exp();
    if x >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Row-major `n x n` matrix of P(level a is decided as b) for unit-power PAM
/// under AWGN of variance `var`, with decisions clamped into range.
pub fn pam_transitions(n: usize, var: f64) -> Vec<f64> {
    let amp: Vec<f64> = (0..n).map(|i| pam_amplitude(i, n)).collect();
    let edges: Vec<f64> = amp.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    let s = var.sqrt();
    let mut t = vec![0.0; n * n];
    for a in 0..n {
        let cdf = |e: f64| if s == 0.0 { f64::from(e >= amp[a]) } else { normal_cdf((e - amp[a]) / s) };
        let mut below = 0.0;
        for b in 0..n {
            let upto = if b + 1 < n { cdf(edges[b]) } else { 1.0 };
            t[a * n + b] = upto - below;
            below = upto;
        }
    }
    t
}

/// Expected distortion `sum_ab T[a][b] * D[order[a]][order[b]]`, where level
/// `a` carries codeword `order[a]`.
pub fn expected_cost(dist: &[f64], trans: &[f64], order: &[usize]) -> f64 {
    let n = order.len();
    let mut sum = 0.0;
    for a in 0..n {
        for b in 0..n {
            sum += trans[a * n + b] * dist[order[a] * n + order[b]];
        }
    }
    sum
}

/// Mean absolute difference between every pair of rows.
pub fn mae_matrix(rows: &[Vec<f32>]) -> Vec<f64> {
    let n = rows.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let len = rows[i].len().max(1) as f64;
            let v = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / len;
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Rows sorted by their projection on the first principal axis (power iteration).
pub fn principal_order(rows: &[Vec<f32>]) -> Vec<usize> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mut order: Vec<usize> = (0..n).collect();
    if n < 2 || d == 0 {
        return order;
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j] as f64).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    // Deterministic, non-symmetric start so it is unlikely to be orthogonal to the axis.
    let mut v: Vec<f64> = (0..d).map(|j| 1.0 + (j % 7) as f64 / 10.0).collect();
    for _ in 0..200 {
        let mut next = vec![0.0; d];
        for r in &centered {
            let p = dot(r, &v);
            next.iter_mut().zip(r).for_each(|(acc, x)| *acc += p * x);
        }
        let norm = dot(&next, &next).sqrt();
        if norm == 0.0 {
            return order;
        }
        v = next.into_iter().map(|x| x / norm).collect();
    }
    let proj: Vec<f64> = centered.iter().map(|r| dot(r, &v)).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    order
}

/// Swaps pairs of levels while any swap lowers [`expected_cost`].
pub fn binary_switching(dist: &[f64], trans: &[f64], mut order: Vec<usize>) -> Vec<usize> {
    let n = order.len();
    for _ in 0..MAX_PASSES {
        let mut improved = false;
        for a in 0..n {
            for b in a + 1..n {
                let (wa, wb) = (order[a], order[b]);
                let d = |x: usize, y: usize| dist[x * n + y];
                let t = |x: usize, y: usize| trans[x * n + y];
                let mut delta = t(a, b) * (d(wb, wa) - d(wa, wb)) + t(b, a) * (d(wa, wb) - d(wb, wa));
                for c in 0..n {
                    if c == a || c == b {
                        continue;
                    }
                    let wc = order[c];
                    delta += (t(a, c) - t(b, c)) * (d(wb, wc) - d(wa, wc)) + (t(c, a) - t(c, b)) * (d(wc, wb) - d(wc, wa));
                }
                if delta < -1e-12 {
                    order.swap(a, b);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `order[level]` is the original index of the codeword sent at that level.
    pub order: Vec<usize>,
    /// Weighted expected distortion of the identity order and of `order`.
    pub cost_before: f64,
    pub cost_after: f64,
}

/// Orders codewords given what each decodes to, weighting every SNR so that
/// the principal-axis start has unit cost there.
pub fn assign(decoded: &[Vec<f32>], snrs: &[f64]) -> Result<Assignment> {
    let n = decoded.len();
    if n == 0 || snrs.is_empty() || snrs.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("index assignment", format!("{n} codewords, SNRs {snrs:?}")));
    }
    let dist = mae_matrix(decoded);
    let start = principal_order(decoded);
    let mut trans = vec![0.0; n * n];
    for &snr in snrs {
        let t = pam_transitions(n, noise_variance(snr));
        let c = expected_cost(&dist, &t, &start);
        let w = if c > 0.0 { 1.0 / c } else { 1.0 };
        trans.iter_mut().zip(&t).for_each(|(acc, p)| *acc += w * p);
    }
    let identity: Vec<usize> = (0..n).collect();
    let cost_before = expected_cost(&dist, &trans, &identity);
    let order = binary_switching(&dist, &trans, start);
    let cost_after = expected_cost(&dist, &trans, &order);
    Ok(Assignment {
        order,
        cost_before,
        cost_after,
    })
}
