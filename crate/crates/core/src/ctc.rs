//! CTC negative log-likelihood with its analytic gradient, greedy decoding,
//! and the charset file.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BLANK: usize = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-wise log-softmax of a `T × V` matrix.
pub fn log_softmax(logits: &Tensor) -> Vec<Vec<f64>> {
    let v = logits.shape()[1];
    logits
        .data()
        .chunks(v)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(|x| x - lse).collect()
        })
        .collect()
}

/// Minimum frame count for `labels`: one frame per label plus a blank
/// between each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> (usize, usize) {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    (labels.len() + repeats, repeats)
}

/// `(−log p(labels | softmax(logits)), ∂/∂logits)` for `T × V` logits.
pub fn ctc_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "ctc_loss",
            detail: format!("logits {:?}, expected [T, V]", logits.shape()),
        });
    }
    let (t_len, v) = (logits.shape()[0], logits.shape()[1]);
    if labels.is_empty() {
        return Err(Error::InvalidArgument("CTC labels must be non-empty".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= v) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 1..{v}")));
    }
    let (need, repeats) = min_frames(labels);
    if t_len < need {
        return Err(Error::InfeasibleAlignment {
            frames: t_len,
            labels: labels.len(),
            repeats,
        });
    }

    let lp = log_softmax(logits);
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = lp[0][ext[0]];
    alpha[0][1] = lp[0][ext[1]];
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if skip(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a == ninf { ninf } else { a + lp[t][ext[s]] };
        }
    }
    // beta excludes the emission at t
    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    beta[t_len - 1][s_len - 2] = 0.0;
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + lp[t + 1][ext[s]];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + lp[t + 1][ext[s + 1]]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, beta[t + 1][s + 2] + lp[t + 1][ext[s + 2]]);
            }
            beta[t][s] = b;
        }
    }
    let log_p = log_add(alpha[t_len - 1][s_len - 1], alpha[t_len - 1][s_len - 2]);
    if !log_p.is_finite() {
        return Err(Error::Numerical("CTC likelihood underflowed".into()));
    }

    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        let row = &mut grad[t * v..(t + 1) * v];
        for (k, g) in row.iter_mut().enumerate() {
            *g = lp[t][k].exp();
        }
        for s in 0..s_len {
            let occ = alpha[t][s] + beta[t][s] - log_p;
            if occ > ninf {
                row[ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, Tensor::new(vec![t_len, v], grad)?))
}

/// Per-frame argmax, repeats collapsed, blanks dropped.
pub fn greedy_decode(logits: &Tensor) -> Vec<usize> {
    let v = logits.shape()[1];
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.data().chunks(v) {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
            .0;
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Levenshtein distance between two symbol sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + usize::from(x != y));
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Output alphabet; index 0 is the blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    pub symbols: Vec<String>,
}

impl Charset {
    pub fn parse(text: &str) -> Result<Self> {
        let symbols: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if symbols.len() < 2 {
            return Err(Error::InvalidArgument(
                "charset needs a blank line 0 and at least one symbol".into(),
            ));
        }
        Ok(Self { symbols })
    }

    pub fn to_text(&self) -> String {
        self.symbols.iter().map(|s| format!("{s}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn render(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .map(|&l| self.symbols[l].as_str())
            .collect::<Vec<_>>()
            .join("")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_single_label() {
        // softmax([ln 0.3, ln 0.7]) = [0.3, 0.7]
        let logits = Tensor::new(vec![1, 2], vec![0.3f64.ln(), 0.7f64.ln()]).unwrap();
        let (loss, _) = ctc_loss(&logits, &[1]).unwrap();
        assert!((loss + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform() {
        let (loss, _) = ctc_loss(&Tensor::zeros(&[2, 2]), &[1]).unwrap();
        assert!((loss + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_an_error() {
        let err = ctc_loss(&Tensor::zeros(&[2, 3]), &[1, 1]).unwrap_err();
        assert!(matches!(
            err,
            Error::InfeasibleAlignment {
                frames: 2,
                labels: 2,
                repeats: 1
            }
        ));
        assert!(ctc_loss(&Tensor::zeros(&[2, 3]), &[1, 2, 1]).is_err());
        assert!(ctc_loss(&Tensor::zeros(&[3, 3]), &[1, 1]).is_ok());
    }

    #[test]
    fn greedy_rules() {
        let onehot = |path: &[usize]| {
            let mut t = Tensor::zeros(&[path.len(), 3]);
            for (i, &p) in path.iter().enumerate() {
                t.set(&[i, p], 1.0);
            }
            t
        };
        assert_eq!(greedy_decode(&onehot(&[0, 1, 1, 0, 2])), vec![1, 2]);
        assert_eq!(greedy_decode(&onehot(&[0, 0, 0])), Vec::<usize>::new());
        assert_eq!(greedy_decode(&onehot(&[1, 0, 1])), vec![1, 1]);
    }

    #[test]
    fn edit_distances() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[4, 4]), 2);
        assert_eq!(edit_distance(&[1, 2], &[2, 1]), 2);
    }

    #[test]
    fn charset_round_trip() {
        let cs = Charset::parse("_\na\ni\n").unwrap();
        assert_eq!(cs.len(), 3);
        assert_eq!(Charset::parse(&cs.to_text()).unwrap(), cs);
        assert_eq!(cs.render(&[2, 1]), "ia");
    }
}
