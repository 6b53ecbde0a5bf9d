//! Permutation-free binary cross-entropy and posterior alignment.

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Posteriors are clamped to `[CLAMP, 1 − CLAMP]` inside the logs.
pub const CLAMP: f64 = 1e-7;

/// Largest speaker count for which permutations are enumerated.
pub const MAX_SPEAKERS: usize = 6;

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = vec![p.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("pivot has a successor");
        p.swap(i - 1, j);
        p[i..].reverse();
        out.push(p.clone());
    }
}

/// Row `s` of the result is row `perm[s]` of `t`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let cols = t.cols();
    Tensor::from_fn(t.shape(), |i| t.get(perm[i / cols], i % cols))
}

fn check_pair(y: &[usize], l: &[usize]) -> Result<()> {
    if y != l || y.len() != 2 {
        return Err(shape_err!("posteriors {y:?} and labels {l:?} differ"));
    }
    Ok(())
}

fn check_speakers(s: usize) -> Result<()> {
    if s > MAX_SPEAKERS {
        return Err(Error::Config(format!(
            "{s} speakers exceed the enumeration limit of {MAX_SPEAKERS}"
        )));
    }
    Ok(())
}

/// BCE value of `y` against row-permuted labels, without a tape.
fn bce_permuted(y: &Tensor, labels: &Tensor, perm: &[usize]) -> f64 {
    let t = y.cols();
    let mut acc = 0.0;
    for (s, &ls) in perm.iter().enumerate() {
        for (p, l) in y.row(s).iter().zip(labels.row(ls)) {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            acc += l * p.ln() + (1.0 - l) * (1.0 - p).ln();
        }
    }
    -acc / (perm.len() * t) as f64
}

/// `−(1/(S·T)) Σ [L log Y + (1−L) log(1−Y)]` on plain tensors.
pub fn bce_value(y: &Tensor, labels: &Tensor) -> Result<f64> {
    check_pair(y.shape(), labels.shape())?;
    let id: Vec<usize> = (0..y.rows()).collect();
    Ok(bce_permuted(y, labels, &id))
}

/// Taped BCE of posteriors `y` against fixed labels.
pub fn bce(tape: &mut Tape, y: Var, labels: &Tensor) -> Result<Var> {
    check_pair(tape.shape(y), labels.shape())?;
    let n = labels.numel() as f64;
    let yc = tape.clamp(y, CLAMP, 1.0 - CLAMP);
    let log_y = tape.log(yc)?;
    let neg = tape.scale(yc, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_1my = tape.log(one_minus)?;
    let l = tape.constant(labels.clone());
    let not_l = tape.constant(Tensor::from_fn(labels.shape(), |i| 1.0 - labels.data()[i]));
    let a = tape.mul(l, log_y)?;
    let b = tape.mul(not_l, log_1my)?;
    let ab = tape.add(a, b)?;
    let total = tape.sum(ab);
    Ok(tape.scale(total, -1.0 / n))
}

/// Loss value and minimizing permutation over all label row orders.
/// Ties go to the lexicographically smallest permutation.
pub fn best_label_permutation(y: &Tensor, labels: &Tensor) -> Result<(f64, Vec<usize>)> {
    check_pair(y.shape(), labels.shape())?;
    check_speakers(y.rows())?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(y.rows()) {
        let v = bce_permuted(y, labels, &perm);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, perm));
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Permutation-free BCE: `min_π bce(Y, π(L))`. The gradient flows through
/// the selected permutation only.
pub fn pit_loss(tape: &mut Tape, y: Var, labels: &Tensor) -> Result<(Var, Vec<usize>)> {
    let (_, perm) = best_label_permutation(tape.value(y), labels)?;
    let loss = bce(tape, y, &permute_rows(labels, &perm))?;
    Ok((loss, perm))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Permutation `π` of `y_b`'s rows maximizing `Σ_s corr(y_a[s], y_b[π[s]])`.
pub fn best_permutation_by_correlation(y_a: &Tensor, y_b: &Tensor) -> Result<Vec<usize>> {
    check_pair(y_a.shape(), y_b.shape())?;
    check_speakers(y_a.rows())?;
    let s = y_a.rows();
    let corr: Vec<Vec<f64>> = (0..s)
        .map(|i| (0..s).map(|j| pearson(y_a.row(i), y_b.row(j))).collect())
        .collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(s) {
        let v: f64 = perm.iter().enumerate().map(|(i, &j)| corr[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, perm));
        }
    }
    Ok(best.expect("at least one permutation").1)
}
