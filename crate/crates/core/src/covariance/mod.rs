//! Covariance structures: unstructured random-effects covariance `G`, the Kronecker
//! `C ⊗ AR(1)` serial process, per-marker measurement error, and their sum `V_i`.
//!
//! Every structure has an unconstrained coordinate vector: log-Cholesky for `G` and
//! `C`, `atanh` for AR(1) correlations and `ln` for variances. Serial lags are integer
//! occasion differences, so a gap in the visits of a subject lengthens the lag.

pub mod log_cholesky;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Marker, SubjectDesign};
use crate::error::{Error, Result};

/// Unstructured random-effects covariance, optionally with the cross-marker block
/// forced to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectsCov {
    marker_dims: [usize; 2],
    independent: bool,
    theta: Vec<f64>,
    factor: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl RandomEffectsCov {
    pub fn n_params(marker_dims: [usize; 2], independent: bool) -> usize {
        if independent {
            log_cholesky::tri_len(marker_dims[0]) + log_cholesky::tri_len(marker_dims[1])
        } else {
            log_cholesky::tri_len(marker_dims[0] + marker_dims[1])
        }
    }

    fn blocks(marker_dims: [usize; 2], independent: bool) -> Vec<(usize, usize)> {
        if independent {
            vec![(0, marker_dims[0]), (marker_dims[0], marker_dims[1])]
        } else {
            vec![(0, marker_dims[0] + marker_dims[1])]
        }
    }

    pub fn from_theta(theta: &[f64], marker_dims: [usize; 2], independent: bool) -> Result<Self> {
        let n = Self::n_params(marker_dims, independent);
        if theta.len() != n {
            return Err(Error::invalid(format!(
                "random-effects parameter vector needs {n} entries, got {}",
                theta.len()
            )));
        }
        let dim = marker_dims[0] + marker_dims[1];
        let mut factor = DMatrix::zeros(dim, dim);
        let mut off = 0;
        for (start, d) in Self::blocks(marker_dims, independent) {
            let len = log_cholesky::tri_len(d);
            let l = log_cholesky::factor_from_theta(&theta[off..off + len], d)?;
            factor.view_mut((start, start), (d, d)).copy_from(&l);
            off += len;
        }
        let g = &factor * factor.transpose();
        Ok(Self {
            marker_dims,
            independent,
            theta: theta.to_vec(),
            factor,
            g,
        })
    }

    /// Coordinates of a positive-definite `g`. With `independent`, the cross-marker
    /// block of `g` is ignored.
    pub fn from_matrix(g: &DMatrix<f64>, marker_dims: [usize; 2], independent: bool) -> Result<Self> {
        let dim = marker_dims[0] + marker_dims[1];
        if g.nrows() != dim || g.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "G is {}x{}, expected {dim}x{dim}",
                g.nrows(),
                g.ncols()
            )));
        }
        let mut theta = Vec::with_capacity(Self::n_params(marker_dims, independent));
        for (start, d) in Self::blocks(marker_dims, independent) {
            theta.extend(log_cholesky::theta_from_matrix(
                &g.view((start, start), (d, d)).into_owned(),
            )?);
        }
        Self::from_theta(&theta, marker_dims, independent)
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn marker_dims(&self) -> [usize; 2] {
        self.marker_dims
    }

    pub fn independent(&self) -> bool {
        self.independent
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Free `(row, col)` entries of `G` with `row <= col`, in reporting order.
    pub fn free_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (start, d) in Self::blocks(self.marker_dims, self.independent) {
            for a in 0..d {
                for b in a..d {
                    out.push((start + a, start + b));
                }
            }
        }
        out
    }

    /// Gradient of `½ tr(P G(θ))` for symmetric `P`.
    pub fn half_trace_gradient(&self, p: &DMatrix<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.theta.len());
        for (start, d) in Self::blocks(self.marker_dims, self.independent) {
            let pb = p.view((start, start), (d, d)).into_owned();
            let lb = self.factor.view((start, start), (d, d)).into_owned();
            out.extend(log_cholesky::half_trace_gradient(&pb, &lb));
        }
        out
    }
}

/// `G(θ)` for random effects of `marker_dims` columns per marker.
pub fn g_from_theta(theta: &[f64], marker_dims: [usize; 2], independent: bool) -> Result<RandomEffectsCov> {
    RandomEffectsCov::from_theta(theta, marker_dims, independent)
}

fn check_correlation(rho: f64) -> Result<()> {
    if !(rho.is_finite() && rho.abs() < 1.0) {
        return Err(Error::invalid(format!("AR(1) correlation must lie in (-1, 1), got {rho}")));
    }
    Ok(())
}

fn check_variance(v: f64, what: &str) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::invalid(format!("{what} must be positive, got {v}")));
    }
    Ok(())
}

fn lag_power(rho: f64, lag: u32) -> f64 {
    rho.powi(lag as i32)
}

/// `d ρ^lag / d atanh(ρ)`.
fn lag_power_derivative(rho: f64, lag: u32) -> f64 {
    if lag == 0 {
        0.0
    } else {
        lag as f64 * rho.powi(lag as i32 - 1) * (1.0 - rho * rho)
    }
}

/// Bivariate AR(1) process with covariance `C[k,l] · ρ^|j-m|` between marker `k` at
/// occasion `j` and marker `l` at occasion `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerAr1 {
    c: DMatrix<f64>,
    factor: DMatrix<f64>,
    rho: f64,
}

impl KroneckerAr1 {
    pub const N_PARAMS: usize = 4;

    pub fn new(c: DMatrix<f64>, rho: f64) -> Result<Self> {
        if c.nrows() != 2 || c.ncols() != 2 {
            return Err(Error::DimensionMismatch("process covariance C must be 2x2".into()));
        }
        check_correlation(rho)?;
        let factor = c
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("process covariance C must be positive definite"))?
            .l();
        Ok(Self { c, factor, rho })
    }

    /// From `(σ²_w1, σ_w1w2, σ²_w2)` and `ρ`.
    pub fn from_entries(var1: f64, cov12: f64, var2: f64, rho: f64) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(2, 2, &[var1, cov12, cov12, var2]), rho)
    }

    pub fn from_theta(theta: &[f64]) -> Result<Self> {
        if theta.len() != Self::N_PARAMS {
            return Err(Error::invalid("Kronecker AR(1) needs 4 coordinates"));
        }
        let factor = log_cholesky::factor_from_theta(&theta[..3], 2)?;
        let c = &factor * factor.transpose();
        Ok(Self {
            c,
            factor,
            rho: theta[3].tanh(),
        })
    }

    pub fn theta(&self) -> Vec<f64> {
        let f = &self.factor;
        vec![f[(0, 0)].ln(), f[(1, 0)], f[(1, 1)].ln(), self.rho.atanh()]
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn cov(&self, k: Marker, j: u32, l: Marker, m: u32) -> f64 {
        self.c[(k.index(), l.index())] * lag_power(self.rho, j.abs_diff(m))
    }
}

/// Univariate AR(1) process for one marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerAr1 {
    pub sigma2: f64,
    pub rho: f64,
}

impl MarkerAr1 {
    pub fn new(sigma2: f64, rho: f64) -> Result<Self> {
        check_variance(sigma2, "AR(1) variance")?;
        check_correlation(rho)?;
        Ok(Self { sigma2, rho })
    }
}

/// Measurement-error variances `(σ²_ε1, σ²_ε2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupedDiagonalError {
    pub sigma2: [f64; 2],
}

impl GroupedDiagonalError {
    pub fn new(sigma2_1: f64, sigma2_2: f64) -> Result<Self> {
        check_variance(sigma2_1, "measurement-error variance 1")?;
        check_variance(sigma2_2, "measurement-error variance 2")?;
        Ok(Self {
            sigma2: [sigma2_1, sigma2_2],
        })
    }
}

/// Choice of residual structure, without parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    /// Measurement error only, one variance per marker.
    GroupedDiagonal,
    /// Kronecker `C ⊗ AR(1)` plus measurement error.
    KroneckerAr1PlusError,
    /// Kronecker `C ⊗ AR(1)` without measurement error.
    KroneckerAr1Only,
    /// Separate AR(1) per marker (no cross-marker serial covariance) plus
    /// measurement error: the pair of univariate AR(1) models.
    IndependentAr1PlusError,
}

impl ResidualKind {
    pub fn n_params(self) -> usize {
        match self {
            ResidualKind::GroupedDiagonal => 2,
            ResidualKind::KroneckerAr1PlusError => 6,
            ResidualKind::KroneckerAr1Only => 4,
            ResidualKind::IndependentAr1PlusError => 6,
        }
    }

    pub fn has_serial(self) -> bool {
        !matches!(self, ResidualKind::GroupedDiagonal)
    }

    pub fn has_error(self) -> bool {
        !matches!(self, ResidualKind::KroneckerAr1Only)
    }

    pub fn label(self) -> &'static str {
        match self {
            ResidualKind::GroupedDiagonal => "grouped_diagonal",
            ResidualKind::KroneckerAr1PlusError => "kronecker_ar1_plus_error",
            ResidualKind::KroneckerAr1Only => "kronecker_ar1_only",
            ResidualKind::IndependentAr1PlusError => "independent_ar1_plus_error",
        }
    }
}

/// Residual covariance `R_i + Σ_i` with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualStructure {
    GroupedDiagonal(GroupedDiagonalError),
    KroneckerAr1PlusError(KroneckerAr1, GroupedDiagonalError),
    KroneckerAr1Only(KroneckerAr1),
    IndependentAr1PlusError([MarkerAr1; 2], GroupedDiagonalError),
}

fn error_from_theta(t: &[f64]) -> GroupedDiagonalError {
    GroupedDiagonalError {
        sigma2: [t[0].exp(), t[1].exp()],
    }
}

fn error_theta(e: &GroupedDiagonalError) -> [f64; 2] {
    [e.sigma2[0].ln(), e.sigma2[1].ln()]
}

impl ResidualStructure {
    pub fn kind(&self) -> ResidualKind {
        match self {
            ResidualStructure::GroupedDiagonal(_) => ResidualKind::GroupedDiagonal,
            ResidualStructure::KroneckerAr1PlusError(..) => ResidualKind::KroneckerAr1PlusError,
            ResidualStructure::KroneckerAr1Only(_) => ResidualKind::KroneckerAr1Only,
            ResidualStructure::IndependentAr1PlusError(..) => ResidualKind::IndependentAr1PlusError,
        }
    }

    /// Coordinate layout: Kronecker `(ln L11, L21, ln L22, atanh ρ)`, independent
    /// AR(1) `(ln σ²_w1, atanh ρ1, ln σ²_w2, atanh ρ2)`, then `(ln σ²_ε1, ln σ²_ε2)`.
    pub fn from_theta(kind: ResidualKind, theta: &[f64]) -> Result<Self> {
        if theta.len() != kind.n_params() {
            return Err(Error::invalid(format!(
                "{} needs {} coordinates, got {}",
                kind.label(),
                kind.n_params(),
                theta.len()
            )));
        }
        Ok(match kind {
            ResidualKind::GroupedDiagonal => Self::GroupedDiagonal(error_from_theta(theta)),
            ResidualKind::KroneckerAr1PlusError => Self::KroneckerAr1PlusError(
                KroneckerAr1::from_theta(&theta[..4])?,
                error_from_theta(&theta[4..]),
            ),
            ResidualKind::KroneckerAr1Only => Self::KroneckerAr1Only(KroneckerAr1::from_theta(theta)?),
            ResidualKind::IndependentAr1PlusError => Self::IndependentAr1PlusError(
                [
                    MarkerAr1 {
                        sigma2: theta[0].exp(),
                        rho: theta[1].tanh(),
                    },
                    MarkerAr1 {
                        sigma2: theta[2].exp(),
                        rho: theta[3].tanh(),
                    },
                ],
                error_from_theta(&theta[4..]),
            ),
        })
    }

    pub fn theta(&self) -> Vec<f64> {
        match self {
            Self::GroupedDiagonal(e) => error_theta(e).to_vec(),
            Self::KroneckerAr1PlusError(k, e) => {
                let mut t = k.theta();
                t.extend(error_theta(e));
                t
            }
            Self::KroneckerAr1Only(k) => k.theta(),
            Self::IndependentAr1PlusError(ar, e) => {
                let mut t = vec![
                    ar[0].sigma2.ln(),
                    ar[0].rho.atanh(),
                    ar[1].sigma2.ln(),
                    ar[1].rho.atanh(),
                ];
                t.extend(error_theta(e));
                t
            }
        }
    }

    pub fn error(&self) -> Option<&GroupedDiagonalError> {
        match self {
            Self::GroupedDiagonal(e)
            | Self::KroneckerAr1PlusError(_, e)
            | Self::IndependentAr1PlusError(_, e) => Some(e),
            Self::KroneckerAr1Only(_) => None,
        }
    }

    pub fn error_variance(&self, marker: Marker) -> f64 {
        self.error().map_or(0.0, |e| e.sigma2[marker.index()])
    }

    pub fn has_serial(&self) -> bool {
        self.kind().has_serial()
    }

    /// Serial covariance between marker `k` at occasion `j` and marker `l` at `m`.
    pub fn serial_cov(&self, k: Marker, j: u32, l: Marker, m: u32) -> f64 {
        match self {
            Self::GroupedDiagonal(_) => 0.0,
            Self::KroneckerAr1PlusError(ar, _) | Self::KroneckerAr1Only(ar) => ar.cov(k, j, l, m),
            Self::IndependentAr1PlusError(ar, _) => {
                if k == l {
                    let a = ar[k.index()];
                    a.sigma2 * lag_power(a.rho, j.abs_diff(m))
                } else {
                    0.0
                }
            }
        }
    }

    /// Serial covariance matrix over labelled rows.
    pub fn serial_matrix(&self, markers: &[Marker], occasions: &[u32]) -> DMatrix<f64> {
        let n = markers.len();
        DMatrix::from_fn(n, n, |r, s| {
            self.serial_cov(markers[r], occasions[r], markers[s], occasions[s])
        })
    }

    /// Gradient of `½ Σ_rs M[r,s] · ∂(R + Σ)[r,s]/∂θ` over the residual coordinates,
    /// for symmetric `M` on the labelled rows.
    pub fn half_trace_gradient(&self, m: &DMatrix<f64>, markers: &[Marker], occasions: &[u32]) -> Vec<f64> {
        let n = markers.len();
        let error_part = |e: &GroupedDiagonalError| {
            let mut g = [0.0; 2];
            for r in 0..n {
                g[markers[r].index()] += m[(r, r)];
            }
            [0.5 * g[0] * e.sigma2[0], 0.5 * g[1] * e.sigma2[1]]
        };
        let kron_part = |ar: &KroneckerAr1| {
            // S[k,l] = Σ_{r∈k, s∈l} M[r,s] ρ^lag
            let mut s = DMatrix::zeros(2, 2);
            let mut d_rho = 0.0;
            for r in 0..n {
                for c in 0..n {
                    let lag = occasions[r].abs_diff(occasions[c]);
                    let (k, l) = (markers[r].index(), markers[c].index());
                    s[(k, l)] += m[(r, c)] * lag_power(ar.rho, lag);
                    d_rho += m[(r, c)] * ar.c[(k, l)] * lag_power_derivative(ar.rho, lag);
                }
            }
            let mut g = log_cholesky::half_trace_gradient(&s, &ar.factor);
            g.push(0.5 * d_rho);
            g
        };
        match self {
            Self::GroupedDiagonal(e) => error_part(e).to_vec(),
            Self::KroneckerAr1PlusError(ar, e) => {
                let mut g = kron_part(ar);
                g.extend(error_part(e));
                g
            }
            Self::KroneckerAr1Only(ar) => kron_part(ar),
            Self::IndependentAr1PlusError(ar, e) => {
                let mut g = vec![0.0; 4];
                for r in 0..n {
                    for c in 0..n {
                        if markers[r] != markers[c] {
                            continue;
                        }
                        let k = markers[r].index();
                        let lag = occasions[r].abs_diff(occasions[c]);
                        let a = ar[k];
                        g[2 * k] += 0.5 * m[(r, c)] * a.sigma2 * lag_power(a.rho, lag);
                        g[2 * k + 1] += 0.5 * m[(r, c)] * a.sigma2 * lag_power_derivative(a.rho, lag);
                    }
                }
                g.extend(error_part(e));
                g
            }
        }
    }
}

fn check_occasions(occ: &[u32]) -> Result<()> {
    if occ.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "occasions must be strictly ascending, got {occ:?}"
        )));
    }
    Ok(())
}

/// Serial covariance `R_i` for the rows `(M1, occasions_m1) ++ (M2, occasions_m2)`.
pub fn build_serial_cov(k: &KroneckerAr1, occasions_m1: &[u32], occasions_m2: &[u32]) -> Result<DMatrix<f64>> {
    check_occasions(occasions_m1)?;
    check_occasions(occasions_m2)?;
    let rows: Vec<(Marker, u32)> = occasions_m1
        .iter()
        .map(|&o| (Marker::M1, o))
        .chain(occasions_m2.iter().map(|&o| (Marker::M2, o)))
        .collect();
    let n = rows.len();
    Ok(DMatrix::from_fn(n, n, |r, s| k.cov(rows[r].0, rows[r].1, rows[s].0, rows[s].1)))
}

/// AR(1) correlation matrix `[ρ^|j-m|]` over `n` consecutive occasions.
pub fn ar1_correlation(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| lag_power(rho, (i as u32).abs_diff(j as u32)))
}

/// Marginal covariance `V_i = Z G Zᵀ + R_i + Σ_i` of one subject.
pub fn build_marginal_cov(
    design: &SubjectDesign,
    g: Option<&RandomEffectsCov>,
    res: &ResidualStructure,
) -> Result<DMatrix<f64>> {
    let n = design.n_rows();
    if design.markers.len() != n || design.occasions.len() != n || design.z.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "subject {}: row labels and design disagree",
            design.subject
        )));
    }
    let mut v = if res.has_serial() {
        res.serial_matrix(&design.markers, &design.occasions)
    } else {
        DMatrix::zeros(n, n)
    };
    if let Some(g) = g {
        if design.z.ncols() != g.dim() {
            return Err(Error::DimensionMismatch(format!(
                "subject {}: Z has {} columns, G is {}x{}",
                design.subject,
                design.z.ncols(),
                g.dim(),
                g.dim()
            )));
        }
        v += &design.z * g.g() * design.z.transpose();
    }
    for (r, m) in design.markers.iter().enumerate() {
        v[(r, r)] += res.error_variance(*m);
    }
    Ok(v)
}
