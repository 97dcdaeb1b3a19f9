use crate::vecops::dot;

/// `-<d, g> / sqrt(<d, H d>)` given `hd = H d`; `None` when the curvature
/// along `d` is not positive.
pub fn lp_term(d: &[f64], g: &[f64], hd: &[f64]) -> Option<f64> {
    let q = dot(d, hd);
    (q > 0.0).then(|| -dot(d, g) / q.sqrt())
}

/// Cotangent of [`lp_term`] with respect to `d`, holding `H` fixed.
pub fn lp_term_grad(d: &[f64], g: &[f64], hd: &[f64]) -> Option<Vec<f64>> {
    let q = dot(d, hd);
    if !(q > 0.0) {
        return None;
    }
    let dg = dot(d, g);
    let inv = 1.0 / q.sqrt();
    let k = dg * inv / q;
    Some(g.iter().zip(hd).map(|(gi, hi)| -gi * inv + k * hi).collect())
}

/// Mean of the available terms over the window length.
pub fn loss_lp(terms: &[Option<f64>], window: usize) -> f64 {
    terms.iter().flatten().sum::<f64>() / window as f64
}

/// `l(x', w') + l(x, w') - 2 l(x, w)`.
pub fn ls_term(loss_next: f64, loss_same: f64, loss_before: f64) -> f64 {
    loss_next + loss_same - 2.0 * loss_before
}

/// Softmax of the terms, shifted by their maximum.
pub fn softmax_weights(terms: &[f64]) -> Vec<f64> {
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = terms.iter().map(|t| (t - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Softmax-weighted average of the terms and the weights used.
pub fn loss_ls(terms: &[f64]) -> (f64, Vec<f64>) {
    let w = softmax_weights(terms);
    (dot(&w, terms), w)
}
