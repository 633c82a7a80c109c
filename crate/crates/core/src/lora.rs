//! Low-rank adapter construction from selected directions.
//!
//! Given selected left/right directions `U_sel` (m×r), `V_sel` (n×r) and
//! non-negative magnitudes `σ_sel`, the factors are
//! `A = √Σ V_selᵀ` (r×n) and `B = U_sel √Σ` (m×r), so `B A = U_sel Σ V_selᵀ`.
//! The frozen residual is `W_res = W₀ − scale · B A` with `scale = α / r`,
//! which makes the adapted layer reproduce `W₀` exactly at initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, forward, Batch, Model};
use crate::error::{Error, Result};
use crate::fisher::{fisher_energy_exact, fisher_energy_factored, FullFisher};
use crate::linalg::{matmul, matmul_nt, matmul_tn, norm, outer, Matrix};
use crate::stats::spearman;
use crate::subspace::{selected_directions, SvdBasis};

const UNIT_TOL: f64 = 1e-9;

/// `α / r`, or `α` itself when reproducing the raw-α convention.
pub fn lora_scale(alpha: f64, rank: usize, raw_alpha: bool) -> f64 {
    if raw_alpha {
        alpha
    } else {
        alpha / rank as f64
    }
}

/// Adapter factors before the residual is formed.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub indices: Vec<usize>,
    pub sigma_sel: Vec<f64>,
    /// r×n
    pub a: Matrix,
    /// m×r
    pub b: Matrix,
    pub alpha: f64,
    pub scale: f64,
}

impl LoraFactors {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

/// A complete adapter: factors plus the frozen residual weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraInit {
    pub layer_id: usize,
    pub indices: Vec<usize>,
    pub sigma_sel: Vec<f64>,
    /// r×n
    pub a: Matrix,
    /// m×r
    pub b: Matrix,
    /// m×n
    pub w_res: Matrix,
    pub scale: f64,
    pub alpha: f64,
}

impl LoraInit {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `scale · B A`.
    pub fn delta(&self) -> Result<Matrix> {
        Ok(matmul(&self.b, &self.a)?.scaled(self.scale))
    }

    /// `W_res + scale · B A`.
    pub fn merged_weight(&self) -> Result<Matrix> {
        self.w_res.add(&self.delta()?)
    }
}

/// Builds `A = √σ V_selᵀ`, `B = U_sel √σ`.
pub fn build_factors(
    u_sel: &Matrix,
    v_sel: &Matrix,
    sigma_sel: &[f64],
    indices: Vec<usize>,
    alpha: f64,
    raw_alpha: bool,
) -> Result<LoraFactors> {
    let r = sigma_sel.len();
    if u_sel.cols() != r || v_sel.cols() != r || indices.len() != r {
        return Err(Error::shape(
            "build_factors",
            format!(
                "U_sel {:?}, V_sel {:?}, {} magnitudes, {} indices",
                u_sel.shape(),
                v_sel.shape(),
                r,
                indices.len()
            ),
        ));
    }
    if let Some((index, &value)) = sigma_sel.iter().enumerate().find(|(_, s)| !(**s >= 0.0)) {
        return Err(Error::NegativeSigma { index, value });
    }
    let roots: Vec<f64> = sigma_sel.iter().map(|s| s.sqrt()).collect();
    let a = Matrix::from_fn(r, v_sel.rows(), |i, j| roots[i] * v_sel[(j, i)]);
    let b = Matrix::from_fn(u_sel.rows(), r, |i, j| u_sel[(i, j)] * roots[j]);
    Ok(LoraFactors {
        indices,
        sigma_sel: sigma_sel.to_vec(),
        a,
        b,
        alpha,
        scale: lora_scale(alpha, r, raw_alpha),
    })
}

/// Fills in `W_res = W₀ − scale · B A`.
pub fn decompose(w0: &Matrix, factors: LoraFactors, layer_id: usize) -> Result<LoraInit> {
    if factors.b.rows() != w0.rows() || factors.a.cols() != w0.cols() {
        return Err(Error::shape(
            "decompose",
            format!("W₀ {:?} vs B {:?}, A {:?}", w0.shape(), factors.b.shape(), factors.a.shape()),
        ));
    }
    let delta = matmul(&factors.b, &factors.a)?.scaled(factors.scale);
    let w_res = w0.sub(&delta)?;
    Ok(LoraInit {
        layer_id,
        indices: factors.indices,
        sigma_sel: factors.sigma_sel,
        a: factors.a,
        b: factors.b,
        w_res,
        scale: factors.scale,
        alpha: factors.alpha,
    })
}

/// `(W_res + scale·B A) x`, evaluated as `W_res x + scale·B (A x)`.
pub fn adapted_forward(init: &LoraInit, x: &Matrix) -> Result<Matrix> {
    if x.rows() != init.w_res.cols() {
        return Err(Error::shape(
            "adapted_forward",
            format!("layer takes {} inputs, x has {} rows", init.w_res.cols(), x.rows()),
        ));
    }
    let mut out = matmul(&init.w_res, x)?;
    let low = matmul(&init.b, &matmul(&init.a, x)?)?;
    out.axpy(init.scale, &low)?;
    Ok(out)
}

/// Standard LoRA initialization: `A ~ N(0, 1/n)`, `B = 0`, `W_res = W₀`.
pub fn plain_lora_init(w0: &Matrix, layer_id: usize, rank: usize, alpha: f64, raw_alpha: bool, seed: u64) -> Result<LoraInit> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = w0.cols();
    let a = Matrix::random_normal(rank, n, &mut rng).scaled(1.0 / (n as f64).sqrt());
    Ok(LoraInit {
        layer_id,
        indices: Vec::new(),
        sigma_sel: vec![0.0; rank],
        a,
        b: Matrix::zeros(w0.rows(), rank),
        w_res: w0.clone(),
        scale: lora_scale(alpha, rank, raw_alpha),
        alpha,
    })
}

/// Which global singular value scales every direction of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SigmaMode {
    Min,
    Max,
}

impl SigmaMode {
    pub fn name(self) -> &'static str {
        match self {
            SigmaMode::Min => "min",
            SigmaMode::Max => "max",
        }
    }
}

/// First candidate index of group `group` out of `groups` over `h` directions.
pub fn group_start(group: usize, groups: usize, h: usize) -> usize {
    group * h / groups
}

/// Adapter on `r` consecutive singular directions starting at
/// `⌊group·h/groups⌋`, each scaled by the global minimum or maximum
/// singular value.
#[allow(clippy::too_many_arguments)]
pub fn preliminary_init(
    w0: &Matrix,
    basis: &SvdBasis,
    group: usize,
    groups: usize,
    rank: usize,
    mode: SigmaMode,
    alpha: f64,
    raw_alpha: bool,
    layer_id: usize,
) -> Result<LoraInit> {
    let h = basis.sigma.len();
    if groups == 0 || group >= groups {
        return Err(Error::InvalidArgument(format!("group {group} out of {groups}")));
    }
    if rank == 0 || rank > h / groups {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} does not fit {groups} groups over {h} directions (max {})",
            h / groups
        )));
    }
    let start = group_start(group, groups, h);
    if start + rank > h {
        return Err(Error::IndexOutOfRange { index: start + rank - 1, len: h });
    }
    let magnitude = match mode {
        SigmaMode::Min => basis.sigma.iter().copied().fold(f64::INFINITY, f64::min),
        SigmaMode::Max => basis.sigma.iter().copied().fold(0.0, f64::max),
    };
    let indices: Vec<usize> = (start..start + rank).collect();
    let (u_sel, v_sel) = selected_directions(basis, &indices)?;
    let factors = build_factors(&u_sel, &v_sel, &vec![magnitude; rank], indices, alpha, raw_alpha)?;
    decompose(w0, factors, layer_id)
}

/// Rank-1 direction `u vᵀ` with unit `u` and `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Direction {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        for (what, vec) in [("u", &u), ("v", &v)] {
            let n = norm(vec);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::NotUnit { what, norm: n });
            }
        }
        Ok(Direction { u, v })
    }

    /// Normalizes both sides; fails on zero vectors.
    pub fn normalized(u: &[f64], v: &[f64]) -> Result<Self> {
        let (nu, nv) = (norm(u), norm(v));
        if nu == 0.0 || nv == 0.0 {
            return Err(Error::InvalidArgument("zero direction".into()));
        }
        Direction::new(u.iter().map(|x| x / nu).collect(), v.iter().map(|x| x / nv).collect())
    }

    pub fn matrix(&self) -> Matrix {
        outer(&self.u, &self.v)
    }
}

/// `½[L(W₀+γZ) + L(W₀−γZ)] − L(W₀)`.
pub fn sym_perturb_probe<F>(loss_eval: F, w0: &Matrix, z: &Direction, gamma: f64) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<f64>,
{
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let zm = z.matrix();
    if zm.shape() != w0.shape() {
        return Err(Error::shape("sym_perturb_probe", format!("direction {:?} vs weight {:?}", zm.shape(), w0.shape())));
    }
    let mut plus = w0.clone();
    plus.axpy(gamma, &zm)?;
    let mut minus = w0.clone();
    minus.axpy(-gamma, &zm)?;
    let (lp, lm, l0) = (loss_eval(&plus)?, loss_eval(&minus)?, loss_eval(w0)?);
    let delta = 0.5 * (lp + lm) - l0;
    if !delta.is_finite() {
        return Err(Error::NonFinite { op: "sym_perturb_probe" });
    }
    Ok(delta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub direction: usize,
    pub gamma: f64,
    /// `ΔL_sym / γ²`
    pub curvature: f64,
    /// `½ (vᵀS_Xv)(uᵀS_Yu)`
    pub half_factored_energy: f64,
    /// `½ vec(Z)ᵀ S_W vec(Z)` when the dense Fisher is available.
    pub half_exact_energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorReport {
    pub rows: Vec<ProbeRow>,
    /// Spearman correlation across directions between the curvature at the
    /// smallest γ and the factored energy.
    pub spearman_factored: f64,
    pub spearman_exact: Option<f64>,
}

impl TaylorReport {
    /// Spearman correlations use each direction's last row, i.e. its
    /// smallest γ when rows are grouped by direction with γ decreasing.
    pub fn from_rows(rows: Vec<ProbeRow>) -> Self {
        let mut last: Vec<&ProbeRow> = Vec::new();
        for r in &rows {
            match last.last_mut() {
                Some(prev) if prev.direction == r.direction => *prev = r,
                _ => last.push(r),
            }
        }
        let curv: Vec<f64> = last.iter().map(|r| r.curvature).collect();
        let factored: Vec<f64> = last.iter().map(|r| r.half_factored_energy).collect();
        let exact: Option<Vec<f64>> = last.iter().map(|r| r.half_exact_energy).collect();
        let spearman_factored = spearman(&curv, &factored);
        let spearman_exact = exact.map(|e| spearman(&curv, &e));
        TaylorReport { rows, spearman_factored, spearman_exact }
    }
}

/// Symmetric-perturbation curvature of one layer of `model` along each
/// direction and γ, next to the Fisher Energies.
#[allow(clippy::too_many_arguments)]
pub fn taylor_report(
    model: &Model,
    batch: &Batch,
    layer_id: usize,
    directions: &[Direction],
    gammas: &[f64],
    s_x: &Matrix,
    s_y: &Matrix,
    full: Option<&FullFisher>,
) -> Result<TaylorReport> {
    if gammas.is_empty() || gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::InvalidArgument("gammas must be positive".into()));
    }
    if gammas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("gammas must be strictly decreasing".into()));
    }
    let w0 = model.weight(layer_id)?.clone();
    let loss_eval = |w: &Matrix| -> Result<f64> {
        let mut m = model.clone();
        m.set_weight(layer_id, w.clone())?;
        m.loss(batch)
    };
    let mut rows = Vec::with_capacity(directions.len() * gammas.len());
    for (d, z) in directions.iter().enumerate() {
        let ef = fisher_energy_factored(s_x, s_y, &z.u, &z.v)?;
        let ee = full.map(|f| fisher_energy_exact(f, &z.u, &z.v)).transpose()?;
        for &gamma in gammas {
            rows.push(ProbeRow {
                direction: d,
                gamma,
                curvature: sym_perturb_probe(loss_eval, &w0, z, gamma)? / (gamma * gamma),
                half_factored_energy: 0.5 * ef,
                half_exact_energy: ee.map(|e| 0.5 * e),
            });
        }
    }
    Ok(TaylorReport::from_rows(rows))
}

/// A model whose selected layers run as `W_res + scale·B A` with only the
/// adapter factors trainable.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    base: Model,
    adapters: Vec<LoraInit>,
}

impl AdaptedModel {
    pub fn new(base: Model, adapters: Vec<LoraInit>) -> Result<Self> {
        for ad in &adapters {
            let w = base.weight(ad.layer_id)?;
            if w.shape() != ad.w_res.shape() {
                return Err(Error::shape(
                    "adapted_model",
                    format!("layer {} weight {:?} vs residual {:?}", ad.layer_id, w.shape(), ad.w_res.shape()),
                ));
            }
        }
        Ok(AdaptedModel { base, adapters })
    }

    pub fn adapters(&self) -> &[LoraInit] {
        &self.adapters
    }

    /// Base model with every adapted layer replaced by its merged weight.
    pub fn effective_model(&self) -> Result<Model> {
        let mut m = self.base.clone();
        for ad in &self.adapters {
            m.set_weight(ad.layer_id, ad.merged_weight()?)?;
        }
        Ok(m)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.effective_model()?.loss(batch)
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.effective_model()?.predict(inputs)
    }

    /// Gradients `(∂L/∂A, ∂L/∂B)` per adapter, plus the loss.
    pub fn adapter_gradients(&self, batch: &Batch) -> Result<(f64, Vec<(Matrix, Matrix)>)> {
        let eff = self.effective_model()?;
        let (loss, cache) = forward(&eff, batch)?;
        let grads = backward(&eff, &cache)?.grads;
        let mut out = Vec::with_capacity(self.adapters.len());
        for ad in &self.adapters {
            let g = &grads[ad.layer_id];
            let da = matmul_tn(&ad.b, g)?.scaled(ad.scale);
            let db = matmul_nt(g, &ad.a)?.scaled(ad.scale);
            out.push((da, db));
        }
        Ok((loss, out))
    }

    /// One gradient-descent step on every `A` and `B`. Returns the loss
    /// before the update.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {lr}")));
        }
        let (loss, grads) = self.adapter_gradients(batch)?;
        if lr > 0.0 {
            for (ad, (da, db)) in self.adapters.iter_mut().zip(grads) {
                ad.a.axpy(-lr, &da)?;
                ad.b.axpy(-lr, &db)?;
            }
        }
        Ok(loss)
    }
}
