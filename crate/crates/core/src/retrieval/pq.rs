//! Product quantization with a learned orthogonal rotation.
//!
//! Vectors are rotated, split into `n_sub` subspaces, and each subspace is
//! coded against a 256-entry codebook (8 bits per subquantizer). The rotation
//! starts from a seeded random orthogonal matrix and is refined by
//! alternating PQ training with an orthogonal Procrustes solve, capped at a
//! fixed number of rounds.

use nalgebra::DMatrix;

use super::kmeans::kmeans;
use crate::rng::Rng;

pub const CODES_PER_SUB: usize = 256;

/// Orthogonal d x d rotation, stored row-major; `apply` computes `R x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    pub dim: usize,
    pub mat: Vec<f32>,
}

impl Rotation {
    pub fn identity(dim: usize) -> Self {
        let mut mat = vec![0.0; dim * dim];
        for i in 0..dim {
            mat[i * dim + i] = 1.0;
        }
        Self { dim, mat }
    }

    /// QR of a seeded Gaussian matrix.
    pub fn random_orthogonal(dim: usize, rng: &mut Rng) -> Self {
        let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.normal());
        let qr = g.qr();
        let q = qr.q();
        let mut mat = vec![0.0f32; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                mat[i * dim + j] = q[(i, j)] as f32;
            }
        }
        Self { dim, mat }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.dim);
        let d = self.dim;
        let mut y = vec![0.0f32; d];
        for (i, out) in y.iter_mut().enumerate() {
            *out = crate::numerics::dot(&self.mat[i * d..(i + 1) * d], x);
        }
        y
    }

    pub fn apply_batch(&self, xs: &[f32], n: usize) -> Vec<f32> {
        let d = self.dim;
        let mut out = vec![0.0f32; n * d];
        // y = x R^T since mat rows are the rotated basis.
        crate::numerics::matmul_nt_acc(&mut out, xs, &self.mat, n, d, d);
        out
    }
}

/// Per-subspace codebooks: `n_sub` x 256 x `sub_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    pub n_sub: usize,
    pub sub_dim: usize,
    pub codebooks: Vec<f32>,
}

impl ProductQuantizer {
    /// Trains one 256-entry k-means codebook per subspace.
    pub fn train(vectors: &[f32], n: usize, d: usize, n_sub: usize, iters: usize, rng: &mut Rng) -> Self {
        assert!(d % n_sub == 0, "n_sub {n_sub} must divide dim {d}");
        let sub_dim = d / n_sub;
        let k = CODES_PER_SUB.min(n);
        let mut codebooks = vec![0.0f32; n_sub * CODES_PER_SUB * sub_dim];
        let mut sub_data = vec![0.0f32; n * sub_dim];
        for s in 0..n_sub {
            for i in 0..n {
                sub_data[i * sub_dim..(i + 1) * sub_dim]
                    .copy_from_slice(&vectors[i * d + s * sub_dim..i * d + (s + 1) * sub_dim]);
            }
            let res = kmeans(&sub_data, n, sub_dim, k, iters, rng);
            codebooks[s * CODES_PER_SUB * sub_dim..s * CODES_PER_SUB * sub_dim + k * sub_dim]
                .copy_from_slice(&res.centroids);
            // If n < 256 the tail codes duplicate code 0; they are never
            // emitted by encode.
            for extra in k..CODES_PER_SUB {
                let (head, tail) = codebooks.split_at_mut(s * CODES_PER_SUB * sub_dim + extra * sub_dim);
                tail[..sub_dim]
                    .copy_from_slice(&head[s * CODES_PER_SUB * sub_dim..s * CODES_PER_SUB * sub_dim + sub_dim]);
            }
        }
        Self {
            n_sub,
            sub_dim,
            codebooks,
        }
    }

    fn codebook(&self, s: usize) -> &[f32] {
        &self.codebooks[s * CODES_PER_SUB * self.sub_dim..(s + 1) * CODES_PER_SUB * self.sub_dim]
    }

    /// Nearest code per subspace; ties break toward the lower code.
    pub fn encode(&self, v: &[f32]) -> Vec<u8> {
        assert_eq!(v.len(), self.n_sub * self.sub_dim);
        let mut code = Vec::with_capacity(self.n_sub);
        for s in 0..self.n_sub {
            let x = &v[s * self.sub_dim..(s + 1) * self.sub_dim];
            let cb = self.codebook(s);
            let mut best = 0usize;
            let mut best_d = f32::INFINITY;
            for c in 0..CODES_PER_SUB {
                let row = &cb[c * self.sub_dim..(c + 1) * self.sub_dim];
                let mut d2 = 0.0;
                for (a, b) in x.iter().zip(row) {
                    let t = a - b;
                    d2 += t * t;
                }
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            code.push(best as u8);
        }
        code
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        assert_eq!(code.len(), self.n_sub);
        let mut v = Vec::with_capacity(self.n_sub * self.sub_dim);
        for (s, &c) in code.iter().enumerate() {
            let cb = self.codebook(s);
            v.extend_from_slice(&cb[c as usize * self.sub_dim..(c as usize + 1) * self.sub_dim]);
        }
        v
    }

    /// Dot-product lookup table for a rotated query: `n_sub` x 256 entries.
    ///
    /// The approximate inner product of the query with a coded vector is the
    /// sum over subspaces of `lut[s * 256 + code[s]]`.
    pub fn dot_lut(&self, y: &[f32]) -> Vec<f32> {
        assert_eq!(y.len(), self.n_sub * self.sub_dim);
        let mut lut = vec![0.0f32; self.n_sub * CODES_PER_SUB];
        for s in 0..self.n_sub {
            let q = &y[s * self.sub_dim..(s + 1) * self.sub_dim];
            let cb = self.codebook(s);
            for c in 0..CODES_PER_SUB {
                lut[s * CODES_PER_SUB + c] =
                    crate::numerics::dot(q, &cb[c * self.sub_dim..(c + 1) * self.sub_dim]);
            }
        }
        lut
    }

    pub fn mean_reconstruction_error(&self, vectors: &[f32], n: usize) -> f64 {
        let d = self.n_sub * self.sub_dim;
        let mut total = 0.0f64;
        for i in 0..n {
            let x = &vectors[i * d..(i + 1) * d];
            let r = self.decode(&self.encode(x));
            total += x
                .iter()
                .zip(&r)
                .map(|(a, b)| f64::from((a - b) * (a - b)))
                .sum::<f64>();
        }
        total / n as f64
    }
}

/// Alternating rotation/codebook optimization on residual vectors.
///
/// Returns the rotation together with codebooks trained in the rotated
/// space. `rounds` caps the alternations.
pub fn train_opq(
    residuals: &[f32],
    n: usize,
    d: usize,
    n_sub: usize,
    kmeans_iters: usize,
    rounds: usize,
    rng: &mut Rng,
) -> (Rotation, ProductQuantizer) {
    let mut rotation = Rotation::random_orthogonal(d, rng);
    let mut rotated = rotation.apply_batch(residuals, n);
    let mut pq = ProductQuantizer::train(&rotated, n, d, n_sub, kmeans_iters, rng);
    for _ in 1..rounds {
        // Procrustes: find R minimizing |R r - decode(encode(R r))|.
        let mut m = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let y = &rotated[i * d..(i + 1) * d];
            let rec = pq.decode(&pq.encode(y));
            let r = &residuals[i * d..(i + 1) * d];
            for a in 0..d {
                for b in 0..d {
                    m[(a, b)] += f64::from(rec[a]) * f64::from(r[b]);
                }
            }
        }
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let r_new = u * vt;
        for i in 0..d {
            for j in 0..d {
                rotation.mat[i * d + j] = r_new[(i, j)] as f32;
            }
        }
        rotated = rotation.apply_batch(residuals, n);
        pq = ProductQuantizer::train(&rotated, n, d, n_sub, kmeans_iters, rng);
    }
    (rotation, pq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_unit_vectors(n: usize, d: usize, rng: &mut Rng) -> Vec<f32> {
        let mut data = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &mut data[i * d..(i + 1) * d];
            for v in row.iter_mut() {
                *v = rng.normal() as f32;
            }
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        data
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = Rng::new(4);
        let r = Rotation::random_orthogonal(32, &mut rng);
        // R R^T = I
        for i in 0..32 {
            for j in 0..32 {
                let d = crate::numerics::dot(&r.mat[i * 32..(i + 1) * 32], &r.mat[j * 32..(j + 1) * 32]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-5, "R R^T [{i},{j}] = {d}");
            }
        }
    }

    #[test]
    fn rotation_preserves_inner_products() {
        let mut rng = Rng::new(5);
        let r = Rotation::random_orthogonal(16, &mut rng);
        let data = random_unit_vectors(2, 16, &mut rng);
        let (a, b) = data.split_at(16);
        let ip = crate::numerics::dot(a, b);
        let ip_rot = crate::numerics::dot(&r.apply(a), &r.apply(b));
        assert!((ip - ip_rot).abs() < 1e-5);
    }

    #[test]
    fn apply_batch_matches_apply() {
        let mut rng = Rng::new(6);
        let r = Rotation::random_orthogonal(8, &mut rng);
        let data = random_unit_vectors(5, 8, &mut rng);
        let batch = r.apply_batch(&data, 5);
        for i in 0..5 {
            let single = r.apply(&data[i * 8..(i + 1) * 8]);
            for (x, y) in single.iter().zip(&batch[i * 8..(i + 1) * 8]) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encode_decode_shrinks_error_vs_single_subquantizer() {
        let mut rng = Rng::new(7);
        let (n, d) = (800, 32);
        let data = random_unit_vectors(n, d, &mut rng);
        let pq16 = ProductQuantizer::train(&data, n, d, 16, 10, &mut Rng::new(1));
        let pq1 = ProductQuantizer::train(&data, n, d, 1, 10, &mut Rng::new(1));
        let e16 = pq16.mean_reconstruction_error(&data, n);
        let e1 = pq1.mean_reconstruction_error(&data, n);
        assert!(e16 < e1, "16-sub error {e16} should beat 1-sub error {e1}");
    }

    #[test]
    fn lut_matches_decode_dot() {
        let mut rng = Rng::new(9);
        let (n, d) = (300, 16);
        let data = random_unit_vectors(n, d, &mut rng);
        let pq = ProductQuantizer::train(&data, n, d, 4, 8, &mut rng);
        let q = &random_unit_vectors(1, d, &mut rng)[..];
        let lut = pq.dot_lut(q);
        for i in 0..10 {
            let code = pq.encode(&data[i * d..(i + 1) * d]);
            let via_lut: f32 = code
                .iter()
                .enumerate()
                .map(|(s, &c)| lut[s * CODES_PER_SUB + c as usize])
                .sum();
            let via_decode = crate::numerics::dot(q, &pq.decode(&code));
            assert!((via_lut - via_decode).abs() < 1e-4);
        }
    }

    #[test]
    fn opq_rounds_do_not_hurt_reconstruction() {
        let mut rng = Rng::new(11);
        let (n, d) = (600, 16);
        let data = random_unit_vectors(n, d, &mut rng);
        let (rot1, pq1) = train_opq(&data, n, d, 4, 8, 1, &mut Rng::new(2));
        let (rot3, pq3) = train_opq(&data, n, d, 4, 8, 3, &mut Rng::new(2));
        let e1 = pq1.mean_reconstruction_error(&rot1.apply_batch(&data, n), n);
        let e3 = pq3.mean_reconstruction_error(&rot3.apply_batch(&data, n), n);
        assert!(
            e3 <= e1 * 1.05,
            "alternation should not materially hurt: {e3} vs {e1}"
        );
    }
}
