//! Low-rank reparameterization of a frozen weight, `θ = θ₀ + s·A·B`.
//!
//! `A` is `d × r`, `B` is `r × k`. Gradients with respect to the full weight
//! are routed into the factors as `∂/∂A = s·∂θ·Bᵀ` and `∂/∂B = s·Aᵀ·∂θ`; the
//! frozen base never receives one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};

pub const DEFAULT_INIT_STD: f64 = 0.01;
pub const DEFAULT_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAdapter")]
pub struct LoraAdapter {
    base: Matrix,
    a: Matrix,
    b: Matrix,
    scale: f64,
}

#[derive(Deserialize)]
struct RawAdapter {
    base: Matrix,
    a: Matrix,
    b: Matrix,
    scale: f64,
}

impl TryFrom<RawAdapter> for LoraAdapter {
    type Error = Error;

    fn try_from(raw: RawAdapter) -> Result<Self> {
        LoraAdapter::from_parts(raw.base, raw.a, raw.b, raw.scale)
    }
}

impl LoraAdapter {
    /// Gaussian `A` with standard deviation `init_std`, zero `B`, so the
    /// effective weight starts out equal to `base`.
    pub fn new(base: Matrix, rank: usize, rng: &mut SeededRng, init_std: f64) -> Result<Self> {
        let (d, k) = base.shape();
        check_rank(d, k, rank)?;
        if !(init_std > 0.0 && init_std.is_finite()) {
            return Err(Error::invalid(format!("init_std must be positive, got {init_std}")));
        }
        let a = Matrix::new(d, rank, (0..d * rank).map(|_| init_std * rng.normal()).collect())?;
        Ok(Self {
            base,
            a,
            b: Matrix::zeros(rank, k),
            scale: DEFAULT_SCALE,
        })
    }

    /// Reassembles an adapter from stored parts (checkpoint loading).
    pub fn from_parts(base: Matrix, a: Matrix, b: Matrix, scale: f64) -> Result<Self> {
        let (d, k) = base.shape();
        let rank = a.cols();
        check_rank(d, k, rank)?;
        if a.rows() != d || b.shape() != (rank, k) {
            return Err(Error::shape(
                "LoraAdapter::from_parts",
                format!("base {d}x{k}, A {}x{}", a.rows(), a.cols()),
                format!("B {}x{}", b.rows(), b.cols()),
            ));
        }
        if !scale.is_finite() {
            return Err(Error::invalid("adapter scale must be finite"));
        }
        Ok(Self { base, a, b, scale })
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    /// Replaces both factors, keeping shapes.
    pub fn set_factors(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::shape(
                "set_factors",
                format!("A {:?}, B {:?}", self.a.shape(), self.b.shape()),
                format!("A {:?}, B {:?}", a.shape(), b.shape()),
            ));
        }
        self.a = a;
        self.b = b;
        Ok(())
    }

    /// `base + scale·(A·B)`.
    pub fn effective_weight(&self) -> Matrix {
        let delta = self.a.matmul(&self.b).expect("adapter factor shapes are invariant");
        let mut w = self.base.clone();
        w.axpy(self.scale, &delta).expect("adapter shapes are invariant");
        w
    }

    /// Plain weight for export; identical to [`LoraAdapter::effective_weight`].
    pub fn merge(&self) -> Matrix {
        self.effective_weight()
    }

    /// Splits `∂L/∂θ` into `(∂L/∂A, ∂L/∂B)`.
    pub fn route_gradient(&self, d_theta: &Matrix) -> Result<(Matrix, Matrix)> {
        if d_theta.shape() != self.base.shape() {
            return Err(Error::shape(
                "route_gradient",
                format!("base {:?}", self.base.shape()),
                format!("gradient {:?}", d_theta.shape()),
            ));
        }
        let da = d_theta.matmul_t(&self.b)?.scale(self.scale);
        let db = self.a.t_matmul(d_theta)?.scale(self.scale);
        Ok((da, db))
    }

    pub fn trainable_count(&self) -> usize {
        self.rank() * (self.base.rows() + self.base.cols())
    }
}

fn check_rank(d: usize, k: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::invalid(format!(
            "rank {rank} outside 1..={} for a {d}x{k} weight",
            d.min(k)
        )));
    }
    Ok(())
}

/// Shapes needed to count trainable parameters of an adapted model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCountSpec {
    /// `(d, k)` of every weight carrying an adapter.
    pub adapted: Vec<(usize, usize)>,
    pub rank: usize,
    /// Element counts of tensors that are trained in full (e.g. a classifier
    /// head's weight and bias).
    pub auxiliary: Vec<usize>,
}

impl ParamCountSpec {
    /// ViT-B/16 shaped backbone (12 blocks, width 768) with adapters on two
    /// 768×768 attention projections per block and a fully trained linear
    /// head over `num_classes`.
    pub fn vit_b16_two_projections(rank: usize, num_classes: usize) -> Self {
        Self {
            adapted: vec![(768, 768); 24],
            rank,
            auxiliary: vec![768 * num_classes, num_classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.adapted.is_empty() && self.rank == 0 {
            return Err(Error::invalid("adapters need rank >= 1"));
        }
        if self.adapted.iter().any(|&(d, k)| d == 0 || k == 0) || self.auxiliary.contains(&0) {
            return Err(Error::invalid("all tensor dimensions must be positive"));
        }
        Ok(())
    }
}

/// `Σ r·(d + k)` over adapted matrices plus all auxiliary element counts.
pub fn count_trainable(spec: &ParamCountSpec) -> Result<usize> {
    spec.validate()?;
    let adapters: usize = spec.adapted.iter().map(|&(d, k)| spec.rank * (d + k)).sum();
    Ok(adapters + spec.auxiliary.iter().sum::<usize>())
}
