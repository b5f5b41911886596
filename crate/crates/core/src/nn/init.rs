use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Real, Tensor4};

/// A `rows x cols` row-major matrix with orthonormal rows (if
/// `rows <= cols`) or orthonormal columns, from the QR factorization of a
/// seeded Gaussian matrix.
pub fn orthogonal(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix column signs so the factorization, and hence the init, is unique
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

/// `(out, in, 3, 3)` kernels whose unfolded `(out, in*9)` matrix is
/// orthogonal.
pub fn init_conv<T: Real>(cout: usize, cin: usize, seed: u64) -> Tensor4<T> {
    let w = orthogonal(cout, cin * 9, seed);
    Tensor4 {
        shape: [cout, cin, 3, 3],
        data: w.into_iter().map(T::of).collect(),
        grad: None,
    }
}

pub fn init_dense_ones<T: Real>(fout: usize, fin: usize) -> Tensor4<T> {
    Tensor4 {
        shape: [fout, fin, 1, 1],
        data: vec![T::one(); fout * fin],
        grad: None,
    }
}
