//! Information atoms and the running Fisher information matrix.
//!
//! Each candidate measurement contributes `Q_k = Jᵀ Σ⁻¹ J`. Atoms keep the
//! whitened Jacobian `W = chol(Σ)⁻¹ J` so that `Q_k = Wᵀ W` has rank at most
//! `r` (the measurement dimension). With the running total factored as
//! `T = L Lᵀ`, the marginal gain of an atom follows from the determinant
//! lemma:
//!
//! ```text
//! log det(T + Wᵀ W) − log det(T) = log det(I_r + Z ᵀ Z),   Z = L⁻¹ Wᵀ
//! ```
//!
//! which costs one triangular solve per row, `O(r·p²)`.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::sensors::{MeasurementModel, SensorType};

/// Pushes between full refactorizations of the running total.
pub const REFACTOR_INTERVAL: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AtomId(pub usize);

impl fmt::Display for AtomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// One measurement's contribution to the information matrix, kept in
/// low-rank whitened form over the nonzero columns only.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoAtom {
    id: AtomId,
    source: Option<SensorType>,
    dim: usize,
    cols: Vec<usize>,
    jacobian: DMatrix<f64>,
    noise: DMatrix<f64>,
    whitened: DMatrix<f64>,
}

impl InfoAtom {
    /// Atom from a dense `r × p` Jacobian and its `r × r` noise covariance.
    pub fn from_jacobian(id: AtomId, jacobian: &DMatrix<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let r = jacobian.nrows();
        if noise.nrows() != r || noise.ncols() != r {
            return Err(Error::Dimension { expected: r, got: noise.nrows() });
        }
        crate::params::check_symmetric(&noise, "measurement noise covariance")?;
        let chol = noise
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("measurement noise covariance"))?;
        if jacobian.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!("atom {id} has a non-finite Jacobian")));
        }
        let cols: Vec<usize> = (0..jacobian.ncols())
            .filter(|&c| jacobian.column(c).iter().any(|&x| x != 0.0))
            .collect();
        let sparse = jacobian.select_columns(&cols);
        let whitened = chol.l().solve_lower_triangular(&sparse).expect("cholesky factor is nonsingular");
        Ok(InfoAtom { id, source: None, dim: jacobian.ncols(), cols, jacobian: sparse, noise, whitened })
    }

    /// Atom for a measurement model linearized at `theta_ref`.
    pub fn from_model<M: MeasurementModel>(id: AtomId, model: &M, theta_ref: &ParamVector) -> Result<Self> {
        let jac = model.jacobian(theta_ref)?;
        Self::from_jacobian(id, &jac, model.noise_covariance())
    }

    /// Atom from an explicit symmetric PSD information matrix.
    pub fn from_information(id: AtomId, info: &DMatrix<f64>) -> Result<Self> {
        let p = info.nrows();
        if info.ncols() != p {
            return Err(Error::Dimension { expected: p, got: info.ncols() });
        }
        let sym = (info + info.transpose()) * 0.5;
        let scale = sym.amax();
        let eig = sym.symmetric_eigen();
        let mut rows = Vec::new();
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda < -1e-10 * scale {
                return Err(Error::NotPositiveDefinite("information atom (negative eigenvalue)"));
            }
            if lambda > 1e-14 * scale {
                rows.push(eig.eigenvectors.column(k).transpose() * lambda.sqrt());
            }
        }
        let jac = if rows.is_empty() { DMatrix::zeros(1, p) } else { DMatrix::from_rows(&rows) };
        let r = jac.nrows();
        Self::from_jacobian(id, &jac, DMatrix::identity(r, r))
    }

    pub fn with_source(mut self, source: SensorType) -> Self {
        self.source = Some(source);
        self
    }

    pub fn id(&self) -> AtomId {
        self.id
    }

    pub fn source(&self) -> Option<SensorType> {
        self.source
    }

    /// Parameter dimension `p`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank_bound(&self) -> usize {
        self.whitened.nrows()
    }

    /// Indices of the nonzero Jacobian columns.
    pub fn columns(&self) -> &[usize] {
        &self.cols
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    fn scatter(&self, sparse: &DMatrix<f64>) -> DMatrix<f64> {
        let mut dense = DMatrix::zeros(sparse.nrows(), self.dim);
        for (k, &c) in self.cols.iter().enumerate() {
            dense.set_column(c, &sparse.column(k));
        }
        dense
    }

    pub fn dense_jacobian(&self) -> DMatrix<f64> {
        self.scatter(&self.jacobian)
    }

    /// Whitened rows `W` with `Q_k = Wᵀ W`, scattered to full width.
    pub fn whitened_rows(&self) -> DMatrix<f64> {
        self.scatter(&self.whitened)
    }

    /// Dense `p × p` information matrix `Jᵀ Σ⁻¹ J`.
    pub fn information(&self) -> DMatrix<f64> {
        let w = self.whitened_rows();
        let q = w.transpose() * &w;
        (&q + q.transpose()) * 0.5
    }
}

/// `log det` of a symmetric positive-definite matrix via Cholesky.
pub fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite("information matrix"))?;
    Ok(chol_logdet(&chol))
}

fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `base + Σ Q_k` for the given atoms.
pub fn total_information<'a>(base: &DMatrix<f64>, atoms: impl IntoIterator<Item = &'a InfoAtom>) -> DMatrix<f64> {
    let mut total = base.clone();
    for a in atoms {
        let w = a.whitened_rows();
        total.gemm_tr(1.0, &w, &w, 1.0);
    }
    total
}

/// Normalized log-det criterion of a set, evaluated densely.
pub fn set_value<'a>(base: &DMatrix<f64>, atoms: impl IntoIterator<Item = &'a InfoAtom>) -> Result<f64> {
    Ok(logdet_spd(&total_information(base, atoms))? - logdet_spd(base)?)
}

/// Running information matrix `base + Σ_{k ∈ F} Q_k` for a growing selection.
///
/// Gains may be evaluated concurrently through `&self`; pushing needs `&mut self`.
#[derive(Debug, Clone)]
pub struct FimState {
    base: DMatrix<f64>,
    base_logdet: f64,
    total: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    logdet: f64,
    chosen: Vec<AtomId>,
    since_refactor: usize,
}

impl FimState {
    pub fn new(base: &DMatrix<f64>) -> Result<Self> {
        if base.nrows() != base.ncols() {
            return Err(Error::Dimension { expected: base.nrows(), got: base.ncols() });
        }
        let scale = base.amax();
        if base.iter().any(|x| !x.is_finite())
            || (base - base.transpose()).amax() > 1e-9 * scale.max(f64::MIN_POSITIVE)
        {
            return Err(Error::NotPositiveDefinite("base information matrix"));
        }
        let base = (base + base.transpose()) * 0.5;
        let factor = base
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("base information matrix"))?;
        let logdet = chol_logdet(&factor);
        Ok(FimState {
            total: base.clone(),
            base,
            base_logdet: logdet,
            factor,
            logdet,
            chosen: Vec::new(),
            since_refactor: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.base
    }

    pub fn total(&self) -> &DMatrix<f64> {
        &self.total
    }

    pub fn chosen(&self) -> &[AtomId] {
        &self.chosen
    }

    pub fn contains(&self, id: AtomId) -> bool {
        self.chosen.contains(&id)
    }

    /// `log det` of the current total.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Criterion value `log det(total) − log det(base)`.
    pub fn value(&self) -> f64 {
        self.logdet - self.base_logdet
    }

    /// Marginal gain of adding `atom`, without changing the state.
    pub fn logdet_gain(&self, atom: &InfoAtom) -> f64 {
        debug_assert_eq!(atom.dim(), self.dim());
        let w = atom.whitened_rows();
        let z = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&w.transpose())
            .expect("factor has a positive diagonal");
        let gram = z.transpose() * &z;
        let gain = match gram.nrows() {
            1 => gram[(0, 0)].ln_1p(),
            2 => {
                let (a, b, c) = (gram[(0, 0)], gram[(0, 1)], gram[(1, 1)]);
                (a + c + a * c - b * b).ln_1p()
            }
            r => {
                let m = DMatrix::identity(r, r) + gram;
                m.cholesky().map(|c| chol_logdet(&c)).unwrap_or(0.0)
            }
        };
        gain.max(0.0)
    }

    /// Add an atom to the selection; returns the gain that was realized.
    pub fn push(&mut self, atom: &InfoAtom) -> Result<f64> {
        if self.contains(atom.id()) {
            return Err(Error::DuplicateAtom(atom.id().0));
        }
        if atom.dim() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: atom.dim() });
        }
        let gain = self.logdet_gain(atom);
        let w = atom.whitened_rows();
        self.total.gemm_tr(1.0, &w, &w, 1.0);
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_INTERVAL {
            self.refactor()?;
        } else {
            for row in w.row_iter() {
                let v: DVector<f64> = row.transpose();
                self.factor.rank_one_update(&v, 1.0);
            }
        }
        self.logdet += gain;
        self.chosen.push(atom.id());
        Ok(gain)
    }

    fn refactor(&mut self) -> Result<()> {
        self.total = (&self.total + self.total.transpose()) * 0.5;
        self.factor = self
            .total
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("running information matrix"))?;
        self.since_refactor = 0;
        Ok(())
    }

    /// `log det` of the current total recomputed from scratch.
    pub fn dense_logdet(&self) -> Result<f64> {
        logdet_spd(&self.total)
    }

    /// Criterion diagnostics for the current selection.
    pub fn report(&self) -> Result<CriterionReport> {
        criterion_report(self, &self.base)
    }
}

/// Criterion diagnostics relative to a base information matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionReport {
    /// `log det(FIM(F)) − log det(base)`.
    pub f_logdet: f64,
    /// `trace(FIM(F)⁻¹) / trace(base⁻¹)`.
    pub trace_inv_ratio: f64,
    /// `λmax(FIM(F)⁻¹) / λmax(base⁻¹)`.
    pub max_eig_inv_ratio: f64,
}

pub fn criterion_report(state: &FimState, base: &DMatrix<f64>) -> Result<CriterionReport> {
    let base_chol = base.clone().cholesky().ok_or(Error::NotPositiveDefinite("base information matrix"))?;
    let total_chol = state
        .total
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("running information matrix"))?;
    let min_eig = |m: &DMatrix<f64>| m.clone().symmetric_eigen().eigenvalues.min();
    Ok(CriterionReport {
        f_logdet: state.logdet - chol_logdet(&base_chol),
        trace_inv_ratio: total_chol.inverse().trace() / base_chol.inverse().trace(),
        max_eig_inv_ratio: min_eig(base) / min_eig(&state.total),
    })
}
