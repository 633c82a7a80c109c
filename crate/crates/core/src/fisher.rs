//! Kronecker-factored Fisher statistics.
//!
//! For a linear layer `Y = W X` the empirical Fisher of the weight is
//! approximated as `S_X ⊗ S_Y`, with `S_X = E[x xᵀ]` over layer inputs and
//! `S_Y = E[g gᵀ]` over output gradients. `vec(·)` stacks columns, so
//! `vec(u vᵀ) = v ⊗ u` and the Fisher Energy of a rank-1 direction factors
//! as `(vᵀ S_X v)(uᵀ S_Y u)`.
//!
//! The full `(mn)×(mn)` Fisher is available only for tiny layers, as an
//! oracle for the factored form.

use crate::autodiff::LayerTap;
use crate::error::{Error, Result};
use crate::linalg::{kron, matmul_nt, norm, Matrix};

/// Largest `m·n` for which [`full_fisher`] will run.
pub const FULL_FISHER_LIMIT: usize = 256;

const UNIT_TOL: f64 = 1e-9;

/// Divisor applied to each tap's outer products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TapNormalization {
    /// Divide by the tap's column (sample) count.
    #[default]
    Columns,
    /// Divide by the feature dimension (`n` for `S_X`, `m` for `S_Y`).
    FeatureDim,
}

/// Running second-moment accumulators for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherFactors {
    pub layer_id: usize,
    s_x: Matrix,
    s_y: Matrix,
    batches_seen: usize,
    columns_seen: usize,
    normalization: TapNormalization,
}

impl FisherFactors {
    /// Empty accumulators for a layer with `n` inputs and `m` outputs.
    pub fn new(layer_id: usize, n: usize, m: usize) -> Self {
        FisherFactors {
            layer_id,
            s_x: Matrix::zeros(n, n),
            s_y: Matrix::zeros(m, m),
            batches_seen: 0,
            columns_seen: 0,
            normalization: TapNormalization::Columns,
        }
    }

    pub fn with_normalization(mut self, normalization: TapNormalization) -> Self {
        self.normalization = normalization;
        self
    }

    /// Rebuilds accumulators from raw (un-normalized) sums.
    pub fn from_raw(
        layer_id: usize,
        s_x_sum: Matrix,
        s_y_sum: Matrix,
        batches_seen: usize,
        columns_seen: usize,
    ) -> Result<Self> {
        if s_x_sum.rows() != s_x_sum.cols() || s_y_sum.rows() != s_y_sum.cols() {
            return Err(Error::shape("fisher_factors", "accumulators must be square"));
        }
        Ok(FisherFactors {
            layer_id,
            s_x: s_x_sum,
            s_y: s_y_sum,
            batches_seen,
            columns_seen,
            normalization: TapNormalization::Columns,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.s_x.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.s_y.rows()
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    pub fn columns_seen(&self) -> usize {
        self.columns_seen
    }

    /// Raw accumulated sums, before division by the batch count.
    pub fn raw_sums(&self) -> (&Matrix, &Matrix) {
        (&self.s_x, &self.s_y)
    }

    /// Adds `X Xᵀ / c` and `G Gᵀ / c` for one tap.
    pub fn accumulate(&mut self, tap: &LayerTap) -> Result<()> {
        let (n, m) = (self.input_dim(), self.output_dim());
        if tap.x.rows() != n || tap.g.rows() != m || tap.x.cols() != tap.g.cols() {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "layer expects X with {n} rows and G with {m} rows, tap has X {:?}, G {:?}",
                    tap.x.shape(),
                    tap.g.shape()
                ),
            ));
        }
        let l = tap.columns();
        let (cx, cy) = match self.normalization {
            TapNormalization::Columns => (l as f64, l as f64),
            TapNormalization::FeatureDim => (n as f64, m as f64),
        };
        self.s_x.axpy(1.0 / cx, &matmul_nt(&tap.x, &tap.x)?)?;
        self.s_y.axpy(1.0 / cy, &matmul_nt(&tap.g, &tap.g)?)?;
        self.batches_seen += 1;
        self.columns_seen += l;
        Ok(())
    }

    /// Folds another shard's sums into this one.
    pub fn merge(&mut self, other: &FisherFactors) -> Result<()> {
        if self.s_x.shape() != other.s_x.shape() || self.s_y.shape() != other.s_y.shape() {
            return Err(Error::shape("merge", "shards describe different layer shapes"));
        }
        self.s_x.axpy(1.0, &other.s_x)?;
        self.s_y.axpy(1.0, &other.s_y)?;
        self.batches_seen += other.batches_seen;
        self.columns_seen += other.columns_seen;
        Ok(())
    }

    /// `(S_X, S_Y)` averaged over the accumulated taps and symmetrized.
    pub fn finalize(&self) -> Result<(Matrix, Matrix)> {
        if self.batches_seen == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let t = self.batches_seen as f64;
        Ok((self.s_x.scaled(1.0 / t).symmetrized(), self.s_y.scaled(1.0 / t).symmetrized()))
    }
}

/// Merges shards by repeated pairwise addition in index order, so the
/// floating-point result depends only on the shard order.
pub fn merge_shards(mut shards: Vec<FisherFactors>) -> Result<FisherFactors> {
    if shards.is_empty() {
        return Err(Error::EmptyAccumulator);
    }
    while shards.len() > 1 {
        let mut next = Vec::with_capacity(shards.len().div_ceil(2));
        let mut iter = shards.into_iter();
        while let Some(mut left) = iter.next() {
            if let Some(right) = iter.next() {
                left.merge(&right)?;
            }
            next.push(left);
        }
        shards = next;
    }
    Ok(shards.pop().expect("non-empty"))
}

/// Column-major `vec(·)`.
pub fn vec_col_major(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for j in 0..cols {
        for i in 0..rows {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Dense empirical Fisher `E[vec(∇W) vec(∇W)ᵀ]` over individual samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FullFisher {
    pub layer_id: usize,
    pub s_w: Matrix,
    pub sample_count: usize,
    /// Output dimension `m` of the layer.
    pub m: usize,
    /// Input dimension `n` of the layer.
    pub n: usize,
}

/// Averages `vec(g_j x_jᵀ) vec(g_j x_jᵀ)ᵀ` over every sample column of
/// every tap.
pub fn full_fisher(taps: &[LayerTap]) -> Result<FullFisher> {
    let first = taps.first().ok_or(Error::EmptyAccumulator)?;
    let (n, m) = (first.x.rows(), first.g.rows());
    let size = m * n;
    if size > FULL_FISHER_LIMIT {
        return Err(Error::FullFisherTooLarge { size, limit: FULL_FISHER_LIMIT });
    }
    let mut s_w = Matrix::zeros(size, size);
    let mut samples = 0usize;
    let mut g_vec = vec![0.0; size];
    for tap in taps {
        if tap.x.rows() != n || tap.g.rows() != m || tap.x.cols() != tap.g.cols() {
            return Err(Error::shape("full_fisher", "taps disagree on layer shape"));
        }
        for s in 0..tap.columns() {
            // vec(g xᵀ)[j*m + i] = g_i x_j
            for j in 0..n {
                let xj = tap.x[(j, s)];
                for i in 0..m {
                    g_vec[j * m + i] = tap.g[(i, s)] * xj;
                }
            }
            for a in 0..size {
                if g_vec[a] == 0.0 {
                    continue;
                }
                for b in 0..size {
                    s_w[(a, b)] += g_vec[a] * g_vec[b];
                }
            }
            samples += 1;
        }
    }
    s_w.scale_in_place(1.0 / samples as f64);
    Ok(FullFisher { layer_id: first.layer_id, s_w, sample_count: samples, m, n })
}

fn check_unit(what: &'static str, v: &[f64]) -> Result<()> {
    let nrm = norm(v);
    if (nrm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit { what, norm: nrm });
    }
    Ok(())
}

/// `vec(u vᵀ)ᵀ S_W vec(u vᵀ)` against the dense Fisher.
pub fn fisher_energy_exact(full: &FullFisher, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != full.m || v.len() != full.n {
        return Err(Error::shape(
            "fisher_energy_exact",
            format!("u has {} entries (want {}), v has {} (want {})", u.len(), full.m, v.len(), full.n),
        ));
    }
    check_unit("u", u)?;
    check_unit("v", v)?;
    let z: Vec<f64> = v.iter().flat_map(|&vj| u.iter().map(move |&ui| ui * vj)).collect();
    full.s_w.quadratic_form(&z)
}

/// Factored Fisher Energy `(vᵀ S_X v)(uᵀ S_Y u)`.
pub fn fisher_energy_factored(s_x: &Matrix, s_y: &Matrix, u: &[f64], v: &[f64]) -> Result<f64> {
    check_unit("u", u)?;
    check_unit("v", v)?;
    Ok(s_x.quadratic_form(v)? * s_y.quadratic_form(u)?)
}

/// `‖S_W − S_X ⊗ S_Y‖_F / ‖S_W‖_F`.
pub fn kfac_relative_error(full: &FullFisher, s_x: &Matrix, s_y: &Matrix) -> Result<f64> {
    let approx = kron(s_x, s_y)?;
    let diff = full.s_w.sub(&approx)?;
    let denom = full.s_w.frobenius_norm();
    if denom == 0.0 {
        return Ok(if diff.frobenius_norm() == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(diff.frobenius_norm() / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, outer, svd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tap(x: Matrix, g: Matrix) -> LayerTap {
        LayerTap::new(0, x, g).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        let v = Matrix::random_normal(len, 1, rng).into_vec();
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn two_single_column_taps() {
        let mut f = FisherFactors::new(0, 2, 1);
        f.accumulate(&tap(Matrix::column_vector(&[1.0, 0.0]).unwrap(), Matrix::zeros(1, 1))).unwrap();
        f.accumulate(&tap(Matrix::column_vector(&[0.0, 1.0]).unwrap(), Matrix::zeros(1, 1))).unwrap();
        let (sx, sy) = f.finalize().unwrap();
        assert_eq!(sx, Matrix::diag(&[0.5, 0.5]));
        assert_eq!(sy, Matrix::zeros(1, 1));
        assert_eq!((f.batches_seen(), f.columns_seen()), (2, 2));
    }

    #[test]
    fn stacked_oracle_for_equal_sized_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, m, l, t) = (3, 2, 4, 20);
        let mut f = FisherFactors::new(0, n, m);
        let mut all_x = Matrix::zeros(n, l * t);
        for b in 0..t {
            let x = Matrix::random_normal(n, l, &mut rng);
            for j in 0..l {
                for i in 0..n {
                    all_x[(i, b * l + j)] = x[(i, j)];
                }
            }
            f.accumulate(&tap(x, Matrix::random_normal(m, l, &mut rng))).unwrap();
        }
        let (sx, _) = f.finalize().unwrap();
        let oracle = matmul(&all_x, &all_x.transpose()).unwrap().scaled(1.0 / f.columns_seen() as f64);
        assert!(sx.max_abs_diff(&oracle) <= 1e-10);
    }

    #[test]
    fn finalize_requires_taps_and_is_idempotent_mean() {
        let f = FisherFactors::new(0, 2, 2);
        assert!(matches!(f.finalize(), Err(Error::EmptyAccumulator)));

        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let t0 = tap(Matrix::random_normal(2, 3, &mut rng), Matrix::random_normal(2, 3, &mut rng));
        let mut once = FisherFactors::new(0, 2, 2);
        once.accumulate(&t0).unwrap();
        let (sx1, sy1) = once.finalize().unwrap();
        let direct = matmul(&t0.x, &t0.x.transpose()).unwrap().scaled(1.0 / 3.0);
        assert!(sx1.max_abs_diff(&direct) <= 1e-15);

        let mut many = FisherFactors::new(0, 2, 2);
        for _ in 0..7 {
            many.accumulate(&t0).unwrap();
        }
        let (sx7, sy7) = many.finalize().unwrap();
        assert!(sx7.max_abs_diff(&sx1) <= 1e-14);
        assert!(sy7.max_abs_diff(&sy1) <= 1e-14);
    }

    #[test]
    fn finalized_factors_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut f = FisherFactors::new(0, 5, 4);
        for _ in 0..6 {
            f.accumulate(&tap(Matrix::random_normal(5, 2, &mut rng), Matrix::random_normal(4, 2, &mut rng))).unwrap();
        }
        let (sx, sy) = f.finalize().unwrap();
        for s in [&sx, &sy] {
            assert!(s.asymmetry() <= 1e-12);
            // eigenvalues of a symmetric PSD matrix equal its singular values;
            // check vᵀ S v ≥ 0 on the singular vectors.
            let d = svd(s).unwrap();
            for k in 0..s.rows() {
                assert!(s.quadratic_form(&d.v.column(k)).unwrap() >= -1e-9);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut f = FisherFactors::new(0, 3, 2);
        let bad = tap(Matrix::zeros(2, 1), Matrix::zeros(2, 1));
        assert!(matches!(f.accumulate(&bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn feature_dim_normalization() {
        let mut f = FisherFactors::new(0, 2, 1).with_normalization(TapNormalization::FeatureDim);
        f.accumulate(&tap(Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]).unwrap(), Matrix::from_rows(&[&[1.0, 1.0]]).unwrap()))
            .unwrap();
        let (sx, sy) = f.finalize().unwrap();
        assert_eq!(sx[(0, 0)], 1.0); // 2 / n
        assert_eq!(sy[(0, 0)], 2.0); // 2 / m
    }

    #[test]
    fn sharded_merge_matches_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let taps: Vec<LayerTap> = (0..9)
            .map(|_| tap(Matrix::random_normal(3, 2, &mut rng), Matrix::random_normal(2, 2, &mut rng)))
            .collect();
        let mut serial = FisherFactors::new(0, 3, 2);
        taps.iter().for_each(|t| serial.accumulate(t).unwrap());
        let shards: Vec<FisherFactors> = taps
            .chunks(2)
            .map(|c| {
                let mut f = FisherFactors::new(0, 3, 2);
                c.iter().for_each(|t| f.accumulate(t).unwrap());
                f
            })
            .collect();
        let merged = merge_shards(shards.clone()).unwrap();
        let again = merge_shards(shards).unwrap();
        assert_eq!(merged, again);
        let (a, b) = (serial.finalize().unwrap(), merged.finalize().unwrap());
        assert!(a.0.max_abs_diff(&b.0) <= 1e-12 && a.1.max_abs_diff(&b.1) <= 1e-12);
        assert_eq!(merged.batches_seen(), 9);
    }

    #[test]
    fn full_fisher_examples() {
        let f = full_fisher(&[tap(Matrix::column_vector(&[2.0]).unwrap(), Matrix::column_vector(&[3.0]).unwrap())]).unwrap();
        assert_eq!(f.s_w, Matrix::from_vec(1, 1, vec![36.0]).unwrap());

        let z = full_fisher(&[tap(Matrix::random_normal(2, 3, &mut ChaCha8Rng::seed_from_u64(1)), Matrix::zeros(2, 3))]).unwrap();
        assert_eq!(z.s_w.max_abs(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let taps: Vec<LayerTap> = (0..4)
            .map(|_| tap(Matrix::random_normal(3, 5, &mut rng), Matrix::random_normal(2, 5, &mut rng)))
            .collect();
        let f = full_fisher(&taps).unwrap();
        assert!(f.s_w.asymmetry() <= 1e-12);
        let mut trace_oracle = 0.0;
        for t in &taps {
            for s in 0..5 {
                let g = outer(&t.g.column(s), &t.x.column(s));
                trace_oracle += g.frobenius_norm().powi(2);
            }
        }
        trace_oracle /= 20.0;
        assert!((f.s_w.trace() - trace_oracle).abs() <= 1e-12 * trace_oracle.max(1.0));
    }

    #[test]
    fn full_fisher_guard() {
        let big = tap(Matrix::zeros(17, 1), Matrix::zeros(16, 1));
        assert!(matches!(full_fisher(&[big]), Err(Error::FullFisherTooLarge { size: 272, .. })));
    }

    #[test]
    fn energy_examples() {
        let full_id = FullFisher { layer_id: 0, s_w: Matrix::identity(6), sample_count: 1, m: 2, n: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (u, v) = (unit(&mut rng, 2), unit(&mut rng, 3));
        assert!((fisher_energy_exact(&full_id, &u, &v).unwrap() - 1.0).abs() <= 1e-14);
        let full_zero = FullFisher { s_w: Matrix::zeros(6, 6), ..full_id.clone() };
        assert_eq!(fisher_energy_exact(&full_zero, &u, &v).unwrap(), 0.0);
        assert!(matches!(fisher_energy_exact(&full_id, &[1.0, 1.0], &v), Err(Error::NotUnit { .. })));

        let e = fisher_energy_factored(&Matrix::diag(&[1.0, 4.0]), &Matrix::diag(&[2.0, 3.0]), &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(e, 8.0);
        let e = fisher_energy_factored(&Matrix::identity(3), &Matrix::identity(2), &u, &v).unwrap();
        assert!((e - 1.0).abs() <= 1e-14);
    }

    #[test]
    fn exact_energy_matches_dense_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let a = Matrix::random_normal(6, 6, &mut rng);
        let s_w = matmul(&a, &a.transpose()).unwrap();
        let full = FullFisher { layer_id: 0, s_w: s_w.clone(), sample_count: 1, m: 3, n: 2 };
        let (u, v) = (unit(&mut rng, 3), unit(&mut rng, 2));
        let z = vec_col_major(&outer(&u, &v));
        let mut oracle = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                oracle += z[i] * s_w[(i, j)] * z[j];
            }
        }
        assert!((fisher_energy_exact(&full, &u, &v).unwrap() - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    }
}
