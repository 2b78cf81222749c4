//! Base reconstruction losses and their gradients with respect to the output.

use crate::{Error, Result};

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty series".into()));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Indices that sort `v` ascending; ties keep their original order.
fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    idx
}

/// Wasserstein-1 distance between the value distributions of `a` and `b`:
/// mean absolute difference of the sorted values.
pub fn emd(a: &[f64], b: &[f64]) -> Result<f64> {
    check(a, b)?;
    let (sa, sb) = (sorted(a), sorted(b));
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub fn l_combine(out: &[f64], target: &[f64], emd_weight: f64) -> Result<f64> {
    if emd_weight == 0.0 {
        return mse(out, target);
    }
    Ok(mse(out, target)? + emd_weight * emd(out, target)?)
}

/// `l_combine` and its gradient with respect to `out`.
///
/// The sort permutation is held fixed in the backward pass, so each output
/// value receives the sign of its difference to the target value of equal rank.
pub fn l_combine_grad(out: &[f64], target: &[f64], emd_weight: f64) -> Result<(f64, Vec<f64>)> {
    check(out, target)?;
    let n = out.len() as f64;
    let mut loss = 0.0;
    let mut grad: Vec<f64> = out
        .iter()
        .zip(target)
        .map(|(o, t)| {
            loss += (o - t) * (o - t);
            2.0 * (o - t) / n
        })
        .collect();
    loss /= n;
    if emd_weight != 0.0 {
        let st = sorted(target);
        let mut e = 0.0;
        for (rank, &i) in argsort(out).iter().enumerate() {
            let d = out[i] - st[rank];
            e += d.abs();
            grad[i] += emd_weight * d.signum() * f64::from(d != 0.0) / n;
        }
        loss += emd_weight * e / n;
    }
    Ok((loss, grad))
}

/// Minimum of `l_combine` over a set of acceptable targets, with the gradient
/// of the first minimizing target. One target reduces to `l_combine_grad`.
pub fn class_loss_grad(out: &[f64], targets: &[Vec<f64>], emd_weight: f64) -> Result<(f64, Vec<f64>)> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for t in targets {
        let (l, g) = l_combine_grad(out, t, emd_weight)?;
        if best.as_ref().is_none_or(|(b, _)| l < *b) {
            best = Some((l, g));
        }
    }
    best.ok_or_else(|| Error::Invalid("empty target set".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.0, 0.0], &[2.0, 0.0]).unwrap(), 2.0);
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn emd_examples() {
        assert_eq!(emd(&[0.0, 0.0, 5.0, 0.0], &[0.0, 5.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(emd(&[0.0, 4.0], &[2.0, 2.0]).unwrap(), 2.0);
        assert!(emd(&[], &[]).is_err());
    }

    #[test]
    fn combine_reduces_to_mse() {
        let a = [1.0, 4.0, 2.0];
        let b = [0.0, 1.0, 5.0];
        assert_eq!(l_combine(&a, &b, 0.0).unwrap(), mse(&a, &b).unwrap());
        assert_eq!(l_combine(&a, &a, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let out: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..5.0)).collect();
            let target: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..5.0)).collect();
            let (l, g) = l_combine_grad(&out, &target, 0.7).unwrap();
            assert_relative_eq!(l, l_combine(&out, &target, 0.7).unwrap(), max_relative = 1e-12);
            let h = 1e-6;
            for i in 0..out.len() {
                let mut p = out.clone();
                p[i] += h;
                let mut m = out.clone();
                m[i] -= h;
                let fd = (l_combine(&p, &target, 0.7).unwrap() - l_combine(&m, &target, 0.7).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-8), "i={i} fd={fd} g={}", g[i]);
            }
        }
    }
}
