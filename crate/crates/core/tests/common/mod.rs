//! Independent reference implementations shared by the integration tests and
//! the acceptance run.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechstyle::Tensor;

/// CTC negative log-likelihood by enumerating all `V^T` frame paths.
/// Returns `None` when no path collapses to `labels`.
pub fn ctc_by_enumeration(logits: &Tensor, labels: &[usize]) -> Option<f64> {
    let (t, v) = (logits.shape()[0], logits.shape()[1]);
    let log_probs: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let row = &logits.data()[i * v..(i + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            row.iter().map(|x| (x.exp() / z).ln()).collect()
        })
        .collect();
    let mut total = 0.0f64;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != 0 {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == labels {
            total += path
                .iter()
                .enumerate()
                .map(|(i, &s)| log_probs[i][s])
                .sum::<f64>()
                .exp();
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == t {
                return (total > 0.0).then(|| -total.ln());
            }
            path[k] += 1;
            if path[k] < v {
                break;
            }
            path[k] = 0;
            k += 1;
        }
    }
}

/// Every label sequence of length `0..=max_len` over symbols `1..v`.
pub fn label_sequences(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for s in 1..v {
                let mut n: Vec<usize> = seq.clone();
                n.push(s);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `G[i][j][k][l] = (1/T) Σ_t C[t,i,k] C[t,j,l]` by nested loops.
pub fn gram_tensor_loops(c: &Tensor) -> Vec<Vec<Vec<Vec<f64>>>> {
    let (t, f, d) = (c.shape()[0], c.shape()[1], c.shape()[2]);
    let at = |a: usize, b: usize, e: usize| c.data()[(a * f + b) * d + e];
    let mut g = vec![vec![vec![vec![0.0; d]; d]; f]; f];
    for (i, gi) in g.iter_mut().enumerate() {
        for (j, gij) in gi.iter_mut().enumerate() {
            for (k, gijk) in gij.iter_mut().enumerate() {
                for (l, out) in gijk.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for tt in 0..t {
                        s += at(tt, i, k) * at(tt, j, l);
                    }
                    *out = s / t as f64;
                }
            }
        }
    }
    g
}

/// `G[i][j] = (1/(WH)) Σ_{w,h} C[w,h,i] C[w,h,j]` by nested loops.
pub fn gram_image_loops(c: &Tensor) -> Vec<Vec<f64>> {
    let (w, h, d) = (c.shape()[0], c.shape()[1], c.shape()[2]);
    let at = |a: usize, b: usize, e: usize| c.data()[(a * h + b) * d + e];
    let mut g = vec![vec![0.0; d]; d];
    for (i, gi) in g.iter_mut().enumerate() {
        for (j, out) in gi.iter_mut().enumerate() {
            let mut s = 0.0;
            for a in 0..w {
                for b in 0..h {
                    s += at(a, b, i) * at(a, b, j);
                }
            }
            *out = s / (w * h) as f64;
        }
    }
    g
}

/// Classical MDS reference on a tiny matrix: dense Jacobi eigensolver on the
/// double-centered squared distances.
pub fn mds_by_jacobi(dist: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = dist.len();
    let mut b = vec![vec![0.0; n]; n];
    let sq: Vec<Vec<f64>> = dist.iter().map(|r| r.iter().map(|x| x * x).collect()).collect();
    let row: Vec<f64> = sq.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let all: f64 = row.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            b[i][j] = -0.5 * (sq[i][j] - row[i] - row[j] + all);
        }
    }
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for _ in 0..100 {
        for p in 0..n {
            for q in p + 1..n {
                if b[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (b[q][q] - b[p][p]) / (2.0 * b[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (bkp, bkq) = (b[k][p], b[k][q]);
                    b[k][p] = c * bkp - s * bkq;
                    b[k][q] = s * bkp + c * bkq;
                }
                for k in 0..n {
                    let (bpk, bqk) = (b[p][k], b[q][k]);
                    b[p][k] = c * bpk - s * bqk;
                    b[q][k] = s * bpk + c * bqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| b[c][c].partial_cmp(&b[a][a]).unwrap());
    (0..n)
        .map(|i| {
            let mut out = [0.0; 2];
            for (k, &e) in order.iter().take(2).enumerate() {
                out[k] = v[i][e] * b[e][e].max(0.0).sqrt();
            }
            out
        })
        .collect()
}
