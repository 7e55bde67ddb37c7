//! Test-only reference implementations. Nothing here calls into the crate's
//! numerical code paths it is compared against.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Literal transcription of the per-layer alignment pseudocode: softmax for
/// categorization, boolean head masks, average pooling over global semantic
/// heads, max pooling over core semantic heads, blends on the raw scores.
pub fn alignment_reference(w_cur: &[Vec<f64>], e: usize, kappa: f64, omega: f64) -> Vec<Vec<f64>> {
    let heads = w_cur.len();
    let width = w_cur[0].len();
    let mut w_sf = vec![vec![0.0; width]; heads];
    for h in 0..heads {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..width {
            if w_cur[h][j] > mx {
                mx = w_cur[h][j];
            }
        }
        let mut z = 0.0;
        for j in 0..width {
            w_sf[h][j] = (w_cur[h][j] - mx).exp();
            z += w_sf[h][j];
        }
        for j in 0..width {
            w_sf[h][j] /= z;
        }
    }
    let mut h_s = vec![false; heads];
    let mut h_c = vec![false; heads];
    for h in 0..heads {
        let mut sum_s = 0.0;
        let mut max_s = 0.0f64;
        let mut sum_o = 0.0;
        for j in 0..width {
            if j > e {
                sum_s += w_sf[h][j];
                if w_sf[h][j] > max_s {
                    max_s = w_sf[h][j];
                }
            } else {
                sum_o += w_sf[h][j];
            }
        }
        h_s[h] = sum_s > sum_o;
        h_c[h] = max_s > kappa * sum_s;
    }
    let h_o: Vec<usize> = (0..heads).filter(|&h| !h_s[h]).collect();
    let h_sg: Vec<usize> = (0..heads).filter(|&h| h_s[h] && !h_c[h]).collect();
    let h_sc: Vec<usize> = (0..heads).filter(|&h| h_s[h] && h_c[h]).collect();

    let mut w = w_cur.to_vec();
    if !h_o.is_empty() && !h_sg.is_empty() {
        let mut m1 = vec![0.0; width];
        for j in 0..width {
            let mut s = 0.0;
            for &t in &h_sg {
                s += w[t][j];
            }
            m1[j] = s / h_sg.len() as f64;
        }
        for &h in &h_o {
            for j in 0..width {
                w[h][j] = (w[h][j] + omega * m1[j]) / (1.0 + omega);
            }
        }
    }
    if !h_sc.is_empty() && !h_sg.is_empty() {
        let mut m2 = vec![f64::NEG_INFINITY; width];
        for j in 0..width {
            for &t in &h_sc {
                if w[t][j] > m2[j] {
                    m2[j] = w[t][j];
                }
            }
        }
        for &h in &h_sg {
            for j in 0..width {
                w[h][j] = (w[h][j] + omega * m2[j]) / (1.0 + omega);
            }
        }
    }
    w
}

/// A random alignment instance: raw rows for `heads ≤ 8` over `width ≤ 32`
/// keys with a random visual end. Some heads get a sharp spike on a random
/// key so that all three head kinds show up regularly.
pub struct Instance {
    pub rows: Vec<Vec<f64>>,
    pub visual_end: usize,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let heads = rng.random_range(1..=8);
    let width = rng.random_range(2..=32);
    let visual_end = rng.random_range(0..width - 1);
    let rows = (0..heads)
        .map(|_| {
            let spread = rng.random_range(0.1..4.0);
            let mut row: Vec<f64> = (0..width)
                .map(|_| rng.random_range(-spread..spread))
                .collect();
            match rng.random_range(0..3) {
                0 => {
                    let k = rng.random_range(0..width);
                    row[k] += rng.random_range(2.0..8.0);
                }
                1 => {
                    for v in row.iter_mut().skip(visual_end + 1) {
                        *v += rng.random_range(0.0..3.0);
                    }
                }
                _ => {}
            }
            row
        })
        .collect();
    Instance { rows, visual_end }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random normalized row of `width` entries.
pub fn random_distribution(rng: &mut ChaCha8Rng, width: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..width)
        .map(|_| rng.random_range(0.0..1.0f64).powi(3))
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        let mut row = vec![0.0; width];
        row[0] = 1.0;
        return row;
    }
    raw.iter().map(|v| v / total).collect()
}

/// Dense rollout with explicit matrices: `F ← F · ((I + W)/2)ᵀ`.
pub fn dense_rollout(attention_avg: &[Vec<Vec<f64>>], n: usize) -> Vec<Vec<Vec<f64>>> {
    let mut f: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut out = vec![f.clone()];
    for w in attention_avg {
        let mut m = vec![vec![0.0; n]; n];
        for j in 0..n {
            for i in 0..n {
                m[j][i] = 0.5 * w[j][i] + if i == j { 0.5 } else { 0.0 };
            }
        }
        let mut next = vec![vec![0.0; n]; n];
        for a in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for i in 0..n {
                    s += f[a][i] * m[j][i];
                }
                next[a][j] = s;
            }
        }
        f = next;
        out.push(f.clone());
    }
    out
}
