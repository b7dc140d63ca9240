//! Entropy, KL divergence and rank correlation of next-token distributions.

use super::LmError;

/// Shannon entropy in nats.
pub fn dist_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `KL(p || q)` in nats. Errors when `q` puts zero mass where `p` does not.
pub fn dist_kl(p: &[f64], q: &[f64]) -> Result<f64, LmError> {
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(LmError::UndefinedKl { index: i });
        }
        kl += pi * (pi / qi).ln();
    }
    // Rounding can leave a tiny negative value when p == q.
    Ok(kl.max(0.0))
}

/// Average ranks (1-based), ties share the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average-rank tie handling.
///
/// A constant vector has no rank variance; two constant vectors are treated
/// as perfectly correlated and one constant against a varying vector as 0.
pub fn spearman_corr(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "spearman_corr: length mismatch");
    let rp = ranks(p);
    let rq = ranks(q);
    let n = rp.len() as f64;
    let mp = rp.iter().sum::<f64>() / n;
    let mq = rq.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vq) = (0.0, 0.0, 0.0);
    for (a, b) in rp.iter().zip(&rq) {
        cov += (a - mp) * (b - mq);
        vp += (a - mp).powi(2);
        vq += (b - mq).powi(2);
    }
    match (vp > 0.0, vq > 0.0) {
        (false, false) => 1.0,
        (true, true) => (cov / (vp * vq).sqrt()).clamp(-1.0, 1.0),
        _ => 0.0,
    }
}
