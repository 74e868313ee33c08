//! Token embeddings and the tied rounding head.
//!
//! Row `i` of the table is the embedding `e_i`. The rounding head reuses the
//! same matrix: `p(y | z) = softmax(E z)_y` with raw dot-product logits.
//! Squared distances are mean squares (divided by `d`) so that loss scales do
//! not grow with the embedding width.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::rng::{self, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vectors: Array2<f64>,
    sigma_e: f64,
}

impl EmbeddingTable {
    /// I.i.d. `N(0, σ_e²)` entries, deterministic in `seed`.
    pub fn init_gaussian(vocab: usize, dim: usize, sigma_e: f64, seed: u64) -> Result<Self> {
        if vocab < 2 || dim == 0 {
            return Err(Error::config(format!("embedding table needs V ≥ 2 and d ≥ 1, got V = {vocab}, d = {dim}")));
        }
        if !(sigma_e > 0.0) || !sigma_e.is_finite() {
            return Err(Error::config(format!("sigma_e must be positive, got {sigma_e}")));
        }
        let mut data = rng::normals(seed, Purpose::EmbeddingInit, &[vocab as u64, dim as u64], vocab * dim);
        data.iter_mut().for_each(|v| *v *= sigma_e);
        let vectors = Array2::from_shape_vec((vocab, dim), data).expect("shape matches data length");
        Ok(EmbeddingTable { vectors, sigma_e })
    }

    pub fn from_matrix(vectors: Array2<f64>, sigma_e: f64) -> Result<Self> {
        let (vocab, dim) = vectors.dim();
        if vocab < 2 || dim == 0 {
            return Err(Error::config(format!("embedding table needs V ≥ 2 and d ≥ 1, got V = {vocab}, d = {dim}")));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("embedding table has non-finite entries"));
        }
        Ok(EmbeddingTable { vectors, sigma_e })
    }

    pub fn vocab(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn sigma_e(&self) -> f64 {
        self.sigma_e
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub(crate) fn matrix(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut Array2<f64> {
        &mut self.vectors
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    fn check_token(&self, y: usize) -> Result<()> {
        if y >= self.vocab() {
            return Err(Error::Token { index: y, vocab: self.vocab() });
        }
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::shape(format!("vector of length {}", self.dim()), format!("length {len}")));
        }
        Ok(())
    }

    /// `z_0 = e_φ(y)`: one row per token.
    pub fn lookup(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        for &y in tokens {
            self.check_token(y)?;
        }
        Ok(self.vectors.select(Axis(0), tokens))
    }

    /// Squared row norms `‖e_i‖²` (sums, not means).
    pub fn row_norms_sq(&self) -> Array1<f64> {
        self.vectors.map_axis(Axis(1), |r| r.dot(&r))
    }

    /// Rounding-head logits `z · e_i` for every token.
    pub fn round_logits(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(z.len())?;
        Ok(self.vectors.dot(&z))
    }

    /// Index of the row with the smallest mean squared distance to `z`;
    /// ties go to the lowest index.
    pub fn nearest_neighbor(&self, z: ArrayView1<'_, f64>) -> Result<usize> {
        self.check_dim(z.len())?;
        let mut best = (0, f64::INFINITY);
        for (i, row) in self.vectors.outer_iter().enumerate() {
            let dist = mean_sq_dist(z, row);
            if dist < best.1 {
                best = (i, dist);
            }
        }
        Ok(best.0)
    }

    /// Mean pairwise cosine similarity over ordered pairs `i ≠ j`.
    pub fn anisotropy(&self) -> Result<f64> {
        let v = self.vocab() as f64;
        let mut sum = Array1::<f64>::zeros(self.dim());
        for (i, row) in self.vectors.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm { row: i });
            }
            sum.scaled_add(1.0 / norm, &row);
        }
        // Σ_{i≠j} u_i·u_j = ‖Σ u_i‖² − Σ ‖u_i‖²
        let ani = (sum.dot(&sum) - v) / (v * (v - 1.0));
        Ok(ani.clamp(-1.0, 1.0))
    }

    /// `(1/d)‖z − e_y‖² − log p(y | z)`.
    pub fn classification_loss(&self, z: ArrayView1<'_, f64>, y: usize) -> Result<f64> {
        self.check_token(y)?;
        let logits = self.round_logits(z)?;
        Ok(mean_sq_dist(z, self.row(y)) - log_softmax_at(logits.view(), y))
    }

    /// The token minimising [`classification_loss`](Self::classification_loss).
    pub fn min_loss_token(&self, z: ArrayView1<'_, f64>) -> Result<usize> {
        let logits = self.round_logits(z)?;
        let lse = log_sum_exp(logits.view());
        let mut best = (0, f64::INFINITY);
        for (i, row) in self.vectors.outer_iter().enumerate() {
            let loss = mean_sq_dist(z, row) + lse - logits[i];
            if loss < best.1 {
                best = (i, loss);
            }
        }
        Ok(best.0)
    }
}

pub fn mean_sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let d = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / d
}

pub fn log_sum_exp(x: ArrayView1<'_, f64>) -> f64 {
    let m = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log softmax(x)_i`.
pub fn log_softmax_at(x: ArrayView1<'_, f64>, i: usize) -> f64 {
    x[i] - log_sum_exp(x)
}

pub fn softmax(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let lse = log_sum_exp(x);
    x.mapv(|v| (v - lse).exp())
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax(x: ArrayView1<'_, f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in x.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Helper for tests and examples: a table from nested rows.
pub fn table_from_rows(rows: &[&[f64]], sigma_e: f64) -> Result<EmbeddingTable> {
    let dim = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::shape(format!("rows of length {dim}"), "ragged rows"));
    }
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let m = Array2::from_shape_vec((rows.len(), dim), data).map_err(|e| Error::shape("rectangular rows", e))?;
    EmbeddingTable::from_matrix(m, sigma_e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;

    fn brute_anisotropy(t: &EmbeddingTable) -> f64 {
        let v = t.vocab();
        let mut s = 0.0;
        for i in 0..v {
            for j in 0..v {
                if i != j {
                    let (a, b) = (t.row(i), t.row(j));
                    s += a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
                }
            }
        }
        s / (v * (v - 1)) as f64
    }

    #[test]
    fn gaussian_init_is_deterministic_and_validated() {
        let a = EmbeddingTable::init_gaussian(50, 8, 1.0, 3).unwrap();
        let b = EmbeddingTable::init_gaussian(50, 8, 1.0, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, EmbeddingTable::init_gaussian(50, 8, 1.0, 4).unwrap());
        assert!(EmbeddingTable::init_gaussian(50, 8, 0.0, 3).is_err());
        assert!(EmbeddingTable::init_gaussian(1, 8, 1.0, 3).is_err());
        assert!(EmbeddingTable::init_gaussian(5, 0, 1.0, 3).is_err());
    }

    #[test]
    fn gaussian_init_moments() {
        let t = EmbeddingTable::init_gaussian(10_000, 128, 1.0, 11).unwrap();
        let n = (10_000 * 128) as f64;
        let mean = t.vectors().sum() / n;
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
        let var = t.vectors().mapv(|v| v * v).sum() / n;
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn lookup_is_row_exact() {
        let t = EmbeddingTable::init_gaussian(20, 4, 1.0, 1).unwrap();
        let z = t.lookup(&[3, 0, 3]).unwrap();
        assert_eq!(z.row(0), t.row(3));
        assert_eq!(z.row(1), t.row(0));
        assert!(matches!(t.lookup(&[20]), Err(Error::Token { .. })));
    }

    #[test]
    fn logits_on_orthogonal_rows() {
        // rows orthogonal with ‖e_k‖² = d
        let d = 4.0_f64;
        let s = d.sqrt();
        let t = table_from_rows(&[&[s, 0., 0., 0.], &[0., s, 0., 0.], &[0., 0., s, 0.]], 1.0).unwrap();
        let l = t.round_logits(t.row(1)).unwrap();
        assert_relative_eq!(l[1], d, max_relative = 1e-15);
        assert_eq!(l[0], 0.0);
        assert_eq!(l[2], 0.0);

        let p = softmax(t.round_logits(Array1::zeros(4).view()).unwrap().view());
        for v in p.iter() {
            assert_relative_eq!(*v, 1.0 / 3.0, max_relative = 1e-15);
        }
        assert!(t.round_logits(Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn softmax_by_hand() {
        // e = (1,0), (0,1), (1,1); z = (1,2) → logits 1, 2, 3
        let t = table_from_rows(&[&[1., 0.], &[0., 1.], &[1., 1.]], 1.0).unwrap();
        let p = softmax(t.round_logits(arr1(&[1.0, 2.0]).view()).unwrap().view());
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        assert_relative_eq!(p[0], 1f64.exp() / denom, max_relative = 1e-14);
        assert_relative_eq!(p[1], 2f64.exp() / denom, max_relative = 1e-14);
        assert_relative_eq!(p[2], 3f64.exp() / denom, max_relative = 1e-14);
        assert_relative_eq!(p[2], 0.665_240_955_774_821_5, max_relative = 1e-14);
    }

    #[test]
    fn nearest_neighbor_cases() {
        let t = table_from_rows(&[&[5., 5.], &[0., 0.], &[2., 2.]], 1.0).unwrap();
        assert_eq!(t.nearest_neighbor(t.row(2)).unwrap(), 2);
        // exactly midway between rows 1 and 2
        assert_eq!(t.nearest_neighbor(arr1(&[1.0, 1.0]).view()).unwrap(), 1);

        let big = EmbeddingTable::init_gaussian(100, 8, 1.0, 5).unwrap();
        for k in 0..20u64 {
            let z = Array1::from(rng::normals(k, Purpose::Validation, &[], 8));
            let want = (0..100)
                .min_by(|&a, &b| mean_sq_dist(z.view(), big.row(a)).total_cmp(&mean_sq_dist(z.view(), big.row(b))))
                .unwrap();
            assert_eq!(big.nearest_neighbor(z.view()).unwrap(), want);
        }
    }

    #[test]
    fn anisotropy_cases() {
        let same = table_from_rows(&[&[1., 2.], &[1., 2.], &[1., 2.]], 1.0).unwrap();
        assert_relative_eq!(same.anisotropy().unwrap(), 1.0, max_relative = 1e-12);
        let ortho = table_from_rows(&[&[1., 0., 0.], &[0., 3., 0.], &[0., 0., 2.]], 1.0).unwrap();
        assert!(ortho.anisotropy().unwrap().abs() < 1e-15);
        // cos(a,b) = 0.6, cos(a,c) = 0, cos(b,c) = 0.8 → mean of 6 = 1.4·2/6
        let three = table_from_rows(&[&[1., 0.], &[0.6, 0.8], &[0., 1.]], 1.0).unwrap();
        assert_relative_eq!(three.anisotropy().unwrap(), 2.8 / 6.0, max_relative = 1e-12);
        let zero = table_from_rows(&[&[1., 0.], &[0., 0.]], 1.0).unwrap();
        assert!(matches!(zero.anisotropy(), Err(Error::ZeroNorm { row: 1 })));
    }

    #[test]
    fn gaussian_table_is_near_isotropic() {
        let t = EmbeddingTable::init_gaussian(10_000, 128, 1.0, 2).unwrap();
        assert!(t.anisotropy().unwrap().abs() < 0.01);
    }

    #[test]
    fn classification_loss_cases() {
        // V=2, d=1, e = {-1, +1}, z = 0, y = 0 → MSE 1 + NLL log 2
        let t = table_from_rows(&[&[-1.0], &[1.0]], 1.0).unwrap();
        assert_relative_eq!(
            t.classification_loss(arr1(&[0.0]).view(), 0).unwrap(),
            1.0 + 2f64.ln(),
            max_relative = 1e-15
        );
        assert!(matches!(t.classification_loss(arr1(&[0.0]).view(), 2), Err(Error::Token { .. })));

        // well separated table with ‖e_i‖² = d σ_e², σ_e = 3
        let d = 16;
        let sigma: f64 = 3.0;
        let mut m = Array2::zeros((4, d));
        for i in 0..4 {
            for j in 0..d {
                m[[i, j]] = if j % 4 == i { 2.0 * sigma } else { 0.0 };
            }
        }
        let t = EmbeddingTable::from_matrix(m, sigma).unwrap();
        let loss = t.classification_loss(t.row(2), 2).unwrap();
        assert!((0.0..1e-30).contains(&loss), "{loss}");
        for y in [0, 1, 3] {
            assert!(loss <= t.classification_loss(t.row(2), y).unwrap());
        }
        assert_eq!(t.min_loss_token(t.row(2)).unwrap(), 2);
    }

    #[test]
    fn argmax_on_self_with_high_dimension() {
        let t = EmbeddingTable::init_gaussian(1000, 128, 1.0, 9).unwrap();
        let hits = (0..1000).filter(|&k| argmax(t.round_logits(t.row(k)).unwrap().view()) == k).count();
        assert!(hits >= 995, "{hits}");
    }

    proptest! {
        #[test]
        fn anisotropy_matches_pairwise_and_is_scale_free(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let t = EmbeddingTable::init_gaussian(12, 5, 1.0, seed).unwrap();
            let fast = t.anisotropy().unwrap();
            prop_assert!((fast - brute_anisotropy(&t)).abs() < 1e-12);
            let scaled = EmbeddingTable::from_matrix(t.vectors().mapv(|v| v * scale), 1.0).unwrap();
            prop_assert!((scaled.anisotropy().unwrap() - fast).abs() < 1e-12);
        }

        #[test]
        fn nearest_neighbor_is_translation_invariant(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let t = EmbeddingTable::init_gaussian(30, 6, 1.0, seed).unwrap();
            let z = Array1::from(rng::normals(seed, Purpose::Validation, &[], 6));
            let c = Array1::from(rng::normals(seed + 1, Purpose::Validation, &[], 6)) * shift;
            let moved = EmbeddingTable::from_matrix(&t.vectors() + &c, 1.0).unwrap();
            prop_assert_eq!(t.nearest_neighbor(z.view()).unwrap(), moved.nearest_neighbor((&z + &c).view()).unwrap());
        }
    }
}
