//! Dense reference computations for small problems.

use mlhf::nn::{Batch, LossKind, Model, ModelSpec, Targets};
use mlhf::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Models small enough for dense assembly, with a matching loss.
pub fn small_zoo() -> Vec<(&'static str, ModelSpec, LossKind)> {
    use mlhf::nn::{Activation, Layer};
    let bn_mlp = ModelSpec {
        input_shape: vec![2],
        layers: vec![
            Layer::Dense { units: 6, activation: Activation::Tanh, batchnorm: true },
            Layer::Dense { units: 2, activation: Activation::None, batchnorm: false },
        ],
    };
    vec![
        ("mlp_tanh_ce", ModelSpec::mlp(&[2, 8, 3]), LossKind::CrossEntropy),
        ("mlp_relu_mse", ModelSpec::mlp_with(&[3, 5, 2], Activation::Relu), LossKind::MeanSquaredError),
        ("mlp_bn_ce", bn_mlp, LossKind::CrossEntropy),
        ("convnet_ce", ModelSpec::mini_convnet([1, 4, 4], [1, 2], 3, 2), LossKind::CrossEntropy),
        ("resnet_ce", ModelSpec::mini_resnet([1, 3, 3], &[2], 1, 2), LossKind::CrossEntropy),
    ]
}

/// A random batch for `spec` with `k` outputs.
pub fn random_batch(spec: &ModelSpec, kind: LossKind, k: usize, size: usize, rng: &mut ChaCha8Rng) -> Batch {
    let per: usize = spec.input_shape.iter().product();
    let mut shape = vec![size];
    shape.extend(&spec.input_shape);
    let x = Tensor::new(shape, (0..size * per).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = match kind {
        LossKind::CrossEntropy => Targets::Classes((0..size).map(|_| rng.gen_range(0..k)).collect()),
        LossKind::MeanSquaredError => {
            Targets::Values(Tensor::new(vec![size, k], (0..size * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        }
    };
    Batch::new(x, y).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Output Jacobian `dz/dw` (rows: flattened z) by central differences.
pub fn fd_jacobian(model: &Model, w: &[f64], x: &Tensor, h: f64) -> DMatrix<f64> {
    let out = |w: &[f64]| model.execute(w, x).unwrap().outputs()[0].data().to_vec();
    let m = out(w).len();
    let mut j = DMatrix::zeros(m, w.len());
    for i in 0..w.len() {
        let mut wp = w.to_vec();
        let mut wm = w.to_vec();
        wp[i] += h;
        wm[i] -= h;
        let (zp, zm) = (out(&wp), out(&wm));
        for r in 0..m {
            j[(r, i)] = (zp[r] - zm[r]) / (2.0 * h);
        }
    }
    j
}

/// Loss Hessian in z for the batch-mean loss, written out per sample.
pub fn loss_hessian(kind: LossKind, z: &Tensor) -> DMatrix<f64> {
    let (b, k) = (z.shape()[0], z.shape()[1]);
    let mut hl = DMatrix::zeros(b * k, b * k);
    for s in 0..b {
        let row = &z.data()[s * k..(s + 1) * k];
        match kind {
            LossKind::MeanSquaredError => {
                for a in 0..k {
                    hl[(s * k + a, s * k + a)] = 1.0 / b as f64;
                }
            }
            LossKind::CrossEntropy => {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let total: f64 = e.iter().sum();
                let p: Vec<f64> = e.iter().map(|v| v / total).collect();
                for a in 0..k {
                    for c in 0..k {
                        let d = if a == c { p[a] } else { 0.0 };
                        hl[(s * k + a, s * k + c)] = (d - p[a] * p[c]) / b as f64;
                    }
                }
            }
        }
    }
    hl
}

/// `J^T H_l J + diag(s)`.
pub fn dense_ggn(model: &Model, kind: LossKind, w: &[f64], x: &Tensor, s: &[f64]) -> DMatrix<f64> {
    let z = model.execute(w, x).unwrap().outputs()[0].clone();
    let j = fd_jacobian(model, w, x, 1e-6);
    let mut g = j.transpose() * loss_hessian(kind, &z) * &j;
    for (i, v) in s.iter().enumerate() {
        g[(i, i)] += v;
    }
    g
}

/// Random SPD matrix with eigenvalues log-uniform in `[lo, hi]`.
pub fn random_spd(d: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let q = m.qr().q();
    let eig = DVector::from_fn(d, |_, _| (rng.gen_range(lo.ln()..hi.ln())).exp());
    let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&a + a.transpose()) * 0.5
}

pub fn to_vec(m: &DMatrix<f64>) -> Vec<f64> {
    // Row-major, as the dense operators expect.
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Moves `w` off the exact-zero pre-activations that zero biases and dead
/// relu units produce, where finite differences straddle a kink.
pub fn jitter(w: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    w.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect()
}
