//! Candidate direction bases and Fisher-Energy-ranked selection.
//!
//! A candidate is a column pair `(u_j, v_j)` of a left basis (m×c) and right
//! basis (n×c). The surrogate basis comes from the Gram matrix of the weight
//! (`V̂ = normalize(W₀ᵀW₀)`, `Û = normalize(W₀ V̂)`) and never needs an SVD;
//! the exact basis is the SVD itself.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::csvio::{fmt_f64, parse_f64, Table};
use crate::error::{Error, Result};
use crate::linalg::{gram, matmul, normalize_columns, svd, topk_min, Matrix};

/// Anything that supplies candidate direction pairs column by column.
pub trait DirectionBasis {
    /// Left (output-side) directions, m×c.
    fn left(&self) -> &Matrix;
    /// Right (input-side) directions, n×c.
    fn right(&self) -> &Matrix;
    /// `true` for candidates that must never be selected.
    fn dead_mask(&self) -> &[bool];

    fn candidate_count(&self) -> usize {
        self.right().cols()
    }

    fn live_count(&self) -> usize {
        self.dead_mask().iter().filter(|d| !**d).count()
    }
}

/// Surrogate singular bases. Columns are unit length but not mutually
/// orthogonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateBasis {
    /// n×n
    pub v_hat: Matrix,
    /// m×n
    pub u_hat: Matrix,
    pub dead_mask: Vec<bool>,
}

impl DirectionBasis for SurrogateBasis {
    fn left(&self) -> &Matrix {
        &self.u_hat
    }
    fn right(&self) -> &Matrix {
        &self.v_hat
    }
    fn dead_mask(&self) -> &[bool] {
        &self.dead_mask
    }
}

/// Leading `h = min(m, n)` singular triplets of the weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdBasis {
    /// m×h
    pub u: Matrix,
    pub sigma: Vec<f64>,
    /// n×h
    pub v: Matrix,
    dead_mask: Vec<bool>,
}

impl DirectionBasis for SvdBasis {
    fn left(&self) -> &Matrix {
        &self.u
    }
    fn right(&self) -> &Matrix {
        &self.v
    }
    fn dead_mask(&self) -> &[bool] {
        &self.dead_mask
    }
}

pub fn surrogate_basis(w0: &Matrix) -> Result<SurrogateBasis> {
    let (v_hat, dead_right) = normalize_columns(&gram(w0)?);
    let (u_hat, dead_left) = normalize_columns(&matmul(w0, &v_hat)?);
    let dead_mask = dead_right.iter().zip(&dead_left).map(|(a, b)| *a || *b).collect();
    Ok(SurrogateBasis { v_hat, u_hat, dead_mask })
}

pub fn exact_svd_basis(w0: &Matrix) -> Result<SvdBasis> {
    let s = svd(w0)?;
    let h = s.sigma.len();
    let idx: Vec<usize> = (0..h).collect();
    Ok(SvdBasis {
        u: s.u.select_columns(&idx)?,
        v: s.v.select_columns(&idx)?,
        sigma: s.sigma,
        dead_mask: vec![false; h],
    })
}

/// Per-candidate Fisher Energies; dead candidates carry `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySpectrum {
    pub energies: Vec<f64>,
    pub dead_mask: Vec<bool>,
}

impl EnergySpectrum {
    pub fn new(energies: Vec<f64>, dead_mask: Vec<bool>) -> Result<Self> {
        if energies.len() != dead_mask.len() {
            return Err(Error::shape("energy_spectrum", "energies and mask differ in length"));
        }
        let energies = energies
            .into_iter()
            .zip(&dead_mask)
            .map(|(e, &d)| if d { f64::INFINITY } else { e })
            .collect();
        Ok(EnergySpectrum { energies, dead_mask })
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn live_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| !self.dead_mask[j]).collect()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["index", "energy", "dead"]);
        for (j, (&e, &d)) in self.energies.iter().zip(&self.dead_mask).enumerate() {
            t.push(vec![j.to_string(), fmt_f64(e), d.to_string()]);
        }
        t
    }

    pub fn from_table(t: &Table) -> Result<Self> {
        let (ie, id) = (t.column_index("energy")?, t.column_index("dead")?);
        let mut energies = Vec::with_capacity(t.rows.len());
        let mut dead = Vec::with_capacity(t.rows.len());
        for row in &t.rows {
            energies.push(parse_f64(&row[ie])?);
            dead.push(match row[id].as_str() {
                "true" => true,
                "false" => false,
                other => return Err(Error::Csv(format!("bad dead flag {other:?}"))),
            });
        }
        EnergySpectrum::new(energies, dead)
    }
}

/// `energies[j] = (v_jᵀ S_X v_j)(u_jᵀ S_Y u_j)`, i.e. the diagonal of
/// `diag(V̂ᵀS_XV̂) ⊙ diag(ÛᵀS_YÛ)` without forming either projection.
pub fn project_energies(basis: &impl DirectionBasis, s_x: &Matrix, s_y: &Matrix) -> Result<EnergySpectrum> {
    let (left, right) = (basis.left(), basis.right());
    if s_x.rows() != right.rows() || s_y.rows() != left.rows() || left.cols() != right.cols() {
        return Err(Error::shape(
            "project_energies",
            format!(
                "S_X {:?}, S_Y {:?}, right basis {:?}, left basis {:?}",
                s_x.shape(),
                s_y.shape(),
                right.shape(),
                left.shape()
            ),
        ));
    }
    let dead = basis.dead_mask().to_vec();
    let mut energies = vec![f64::INFINITY; right.cols()];
    for (j, e) in energies.iter_mut().enumerate() {
        if dead[j] {
            continue;
        }
        *e = s_x.quadratic_form(&right.column(j))? * s_y.quadratic_form(&left.column(j))?;
    }
    EnergySpectrum::new(energies, dead)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    MinEnergy,
    MaxEnergy,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scaling {
    /// Scale by the selected Fisher Energies.
    Fisher,
    /// Scale by singular values (exact SVD basis only).
    SvdSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisKind {
    Surrogate,
    ExactSvd,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::MinEnergy => "min",
            Criterion::MaxEnergy => "max",
            Criterion::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "min" => Some(Criterion::MinEnergy),
            "max" => Some(Criterion::MaxEnergy),
            "random" => Some(Criterion::Random),
            _ => None,
        }
    }

    /// Single-letter variant tag: M(inimal), P (maximal), R(andom).
    pub fn tag(self) -> &'static str {
        match self {
            Criterion::MinEnergy => "M",
            Criterion::MaxEnergy => "P",
            Criterion::Random => "R",
        }
    }
}

impl Scaling {
    pub fn name(self) -> &'static str {
        match self {
            Scaling::Fisher => "fisher",
            Scaling::SvdSigma => "svd_sigma",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fisher" => Some(Scaling::Fisher),
            "svd_sigma" => Some(Scaling::SvdSigma),
            _ => None,
        }
    }
}

impl BasisKind {
    pub fn name(self) -> &'static str {
        match self {
            BasisKind::Surrogate => "surrogate",
            BasisKind::ExactSvd => "exact_svd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "surrogate" => Some(BasisKind::Surrogate),
            "exact_svd" => Some(BasisKind::ExactSvd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SelectionStrategy {
    pub criterion: Criterion,
    pub scaling: Scaling,
    pub basis: BasisKind,
    pub rng_seed: u64,
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        SelectionStrategy {
            criterion: Criterion::MinEnergy,
            scaling: Scaling::Fisher,
            basis: BasisKind::Surrogate,
            rng_seed: 0,
        }
    }
}

impl SelectionStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.scaling == Scaling::SvdSigma && self.basis != BasisKind::ExactSvd {
            return Err(Error::InvalidArgument("svd_sigma scaling requires the exact_svd basis".into()));
        }
        Ok(())
    }
}

/// Picks `r` live candidates; the result is sorted by index.
pub fn select(spectrum: &EnergySpectrum, r: usize, strategy: &SelectionStrategy) -> Result<Vec<usize>> {
    strategy.validate()?;
    let live = spectrum.live_indices();
    if r > live.len() {
        return Err(Error::RankTooLarge { rank: r, live: live.len() });
    }
    let live_energies: Vec<f64> = live.iter().map(|&j| spectrum.energies[j]).collect();
    let picked: Vec<usize> = match strategy.criterion {
        Criterion::MinEnergy => topk_min(&live_energies, r)?,
        Criterion::MaxEnergy => {
            let negated: Vec<f64> = live_energies.iter().map(|e| -e).collect();
            topk_min(&negated, r)?
        }
        Criterion::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(strategy.rng_seed);
            sample(&mut rng, live.len(), r).into_vec()
        }
    };
    let mut out: Vec<usize> = picked.into_iter().map(|k| live[k]).collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupAggregate {
    #[default]
    Sum,
    Mean,
}

/// Aggregate energy of a group of live candidates.
pub fn group_energy(spectrum: &EnergySpectrum, indices: &[usize], aggregate: GroupAggregate) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty direction group".into()));
    }
    let mut total = 0.0;
    for &j in indices {
        if j >= spectrum.len() {
            return Err(Error::IndexOutOfRange { index: j, len: spectrum.len() });
        }
        if spectrum.dead_mask[j] {
            return Err(Error::DeadIndex { index: j });
        }
        total += spectrum.energies[j];
    }
    Ok(match aggregate {
        GroupAggregate::Sum => total,
        GroupAggregate::Mean => total / indices.len() as f64,
    })
}

/// Selected columns of both sides of a basis: `(U_sel m×r, V_sel n×r)`.
pub fn selected_directions(basis: &impl DirectionBasis, indices: &[usize]) -> Result<(Matrix, Matrix)> {
    Ok((basis.left().select_columns(indices)?, basis.right().select_columns(indices)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::fisher_energy_factored;
    use crate::linalg::matmul_tn;
    use proptest::prelude::*;

    fn spectrum(e: &[f64]) -> EnergySpectrum {
        EnergySpectrum::new(e.to_vec(), vec![false; e.len()]).unwrap()
    }

    fn strat(criterion: Criterion) -> SelectionStrategy {
        SelectionStrategy { criterion, ..SelectionStrategy::default() }
    }

    #[test]
    fn surrogate_examples() {
        let b = surrogate_basis(&Matrix::identity(2)).unwrap();
        assert_eq!(b.v_hat, Matrix::identity(2));
        assert_eq!(b.u_hat, Matrix::identity(2));
        assert_eq!(b.dead_mask, vec![false, false]);

        let b = surrogate_basis(&Matrix::diag(&[2.0, 3.0])).unwrap();
        assert_eq!(b.v_hat, Matrix::identity(2));
        assert_eq!(b.u_hat, Matrix::identity(2));
    }

    #[test]
    fn surrogate_flags_dead_columns() {
        let w = Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]]).unwrap();
        let b = surrogate_basis(&w).unwrap();
        assert_eq!(b.dead_mask, vec![false, false, true]);
        assert_eq!(b.live_count(), 2);
        let e = project_energies(&b, &Matrix::identity(3), &Matrix::identity(2)).unwrap();
        assert_eq!(e.energies[2], f64::INFINITY);
        assert!(matches!(select(&e, 3, &strat(Criterion::MinEnergy)), Err(Error::RankTooLarge { rank: 3, live: 2 })));
    }

    #[test]
    fn project_examples() {
        let b = surrogate_basis(&Matrix::identity(2)).unwrap();
        let e = project_energies(&b, &Matrix::identity(2), &Matrix::identity(2)).unwrap();
        assert_eq!(e.energies, vec![1.0, 1.0]);
        let e = project_energies(&b, &Matrix::diag(&[1.0, 4.0]), &Matrix::diag(&[2.0, 3.0])).unwrap();
        assert_eq!(e.energies, vec![2.0, 12.0]);
    }

    #[test]
    fn project_matches_per_column_energy() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = Matrix::random_normal(5, 4, &mut rng);
        let b = surrogate_basis(&w).unwrap();
        let ax = Matrix::random_normal(4, 4, &mut rng);
        let ay = Matrix::random_normal(5, 5, &mut rng);
        let (sx, sy) = (matmul_tn(&ax, &ax).unwrap(), matmul_tn(&ay, &ay).unwrap());
        let e = project_energies(&b, &sx, &sy).unwrap();
        for j in 0..4 {
            let oracle = fisher_energy_factored(&sx, &sy, &b.u_hat.column(j), &b.v_hat.column(j)).unwrap();
            assert!((e.energies[j] - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }
        assert!(project_energies(&b, &sy, &sx).is_err());
    }

    #[test]
    fn select_examples() {
        let s = spectrum(&[3.0, 1.0, 2.0]);
        assert_eq!(select(&s, 2, &strat(Criterion::MinEnergy)).unwrap(), vec![1, 2]);
        assert_eq!(select(&s, 2, &strat(Criterion::MaxEnergy)).unwrap(), vec![0, 2]);
        for c in [Criterion::MinEnergy, Criterion::MaxEnergy, Criterion::Random] {
            assert_eq!(select(&s, 3, &strat(c)).unwrap(), vec![0, 1, 2]);
        }
    }

    #[test]
    fn svd_sigma_requires_exact_basis() {
        let bad = SelectionStrategy { scaling: Scaling::SvdSigma, ..SelectionStrategy::default() };
        assert!(select(&spectrum(&[1.0]), 1, &bad).is_err());
    }

    #[test]
    fn random_selection_is_reproducible_and_live_only() {
        let s = EnergySpectrum::new(vec![1.0; 10], (0..10).map(|j| j % 3 == 0).collect()).unwrap();
        let st = SelectionStrategy { criterion: Criterion::Random, rng_seed: 99, ..SelectionStrategy::default() };
        let a = select(&s, 4, &st).unwrap();
        assert_eq!(a, select(&s, 4, &st).unwrap());
        assert!(a.iter().all(|&j| j % 3 != 0));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn group_energy_examples() {
        let s = spectrum(&[1.0, 2.0, 3.0]);
        assert_eq!(group_energy(&s, &[1], GroupAggregate::Sum).unwrap(), 2.0);
        assert_eq!(group_energy(&s, &[0, 2], GroupAggregate::Sum).unwrap(), 4.0);
        assert_eq!(group_energy(&s, &[0, 2], GroupAggregate::Mean).unwrap(), 2.0);
        let dead = EnergySpectrum::new(vec![1.0, 2.0], vec![false, true]).unwrap();
        assert!(matches!(group_energy(&dead, &[1], GroupAggregate::Sum), Err(Error::DeadIndex { index: 1 })));
    }

    #[test]
    fn spectrum_csv_round_trip() {
        let s = EnergySpectrum::new(vec![0.1, 2.5e-17, 7.0], vec![false, false, true]).unwrap();
        let text = s.to_table().to_csv_string();
        assert!(text.starts_with("index,energy,dead\n"));
        let back = EnergySpectrum::from_table(&Table::parse(&text).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_table().to_csv_string(), text);
    }

    #[test]
    fn exact_svd_basis_has_h_candidates() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let b = exact_svd_basis(&Matrix::random_normal(3, 5, &mut rng)).unwrap();
        assert_eq!(b.candidate_count(), 3);
        assert_eq!(b.u.shape(), (3, 3));
        assert_eq!(b.v.shape(), (5, 3));
    }

    proptest! {
        #[test]
        fn min_selection_dominates(energies in proptest::collection::vec(0.0f64..10.0, 1..30), r_frac in 0.0f64..1.0) {
            let r = ((energies.len() as f64) * r_frac).floor() as usize;
            let s = spectrum(&energies);
            let sel = select(&s, r, &strat(Criterion::MinEnergy)).unwrap();
            let max_sel = sel.iter().map(|&j| energies[j]).fold(f64::NEG_INFINITY, f64::max);
            for j in 0..energies.len() {
                if !sel.contains(&j) {
                    prop_assert!(max_sel <= energies[j]);
                }
            }
            let sel = select(&s, r, &strat(Criterion::MaxEnergy)).unwrap();
            let min_sel = sel.iter().map(|&j| energies[j]).fold(f64::INFINITY, f64::min);
            for j in 0..energies.len() {
                if !sel.contains(&j) {
                    prop_assert!(min_sel >= energies[j]);
                }
            }
        }

        #[test]
        fn selection_is_scale_invariant(energies in proptest::collection::vec(0.0f64..10.0, 1..20), c in 1e-3f64..1e3) {
            let r = energies.len() / 2;
            let a = select(&spectrum(&energies), r, &strat(Criterion::MinEnergy)).unwrap();
            let scaled: Vec<f64> = energies.iter().map(|e| e * c).collect();
            let b = select(&spectrum(&scaled), r, &strat(Criterion::MinEnergy)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
