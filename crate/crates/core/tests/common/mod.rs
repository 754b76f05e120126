//! Shared test oracles: a dense multivariate-normal likelihood evaluated by LU on
//! the whole stacked covariance, and a random small-instance generator.
#![allow(dead_code)]

use bivlmm::covariance::{ResidualKind, ResidualStructure};
use bivlmm::data::{DesignSpec, Marker, SubjectDesign, TimeTerm};
use bivlmm::estimation::{CovarianceParams, Method, ModelSpec, RandomEffects};
use bivlmm::simulate::CounterRng;
use nalgebra::{DMatrix, DVector};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Serial covariance between (k, j) and (l, m) written out from the definition.
pub fn serial_entry(res: &ResidualStructure, k: Marker, j: u32, l: Marker, m: u32) -> f64 {
    let lag = j.abs_diff(m) as i32;
    match res {
        ResidualStructure::KroneckerAr1PlusError(kr, _) | ResidualStructure::KroneckerAr1Only(kr) => {
            kr.c()[(k.index(), l.index())] * kr.rho().powi(lag)
        }
        ResidualStructure::IndependentAr1PlusError(ar, _) => {
            if k == l {
                ar[k.index()].sigma2 * ar[k.index()].rho.powi(lag)
            } else {
                0.0
            }
        }
        ResidualStructure::GroupedDiagonal(_) => 0.0,
    }
}

fn error_entry(res: &ResidualStructure, k: Marker) -> f64 {
    res.error().map_or(0.0, |e| e.sigma2[k.index()])
}

/// `V_i` entry by entry: `Σ_ab Z[r,a] G[a,b] Z[c,b]` + serial + error.
pub fn brute_force_v(d: &SubjectDesign, params: &CovarianceParams) -> DMatrix<f64> {
    let n = d.n_rows();
    DMatrix::from_fn(n, n, |r, c| {
        let mut v = 0.0;
        if let Some(g) = &params.g {
            let g = g.g();
            for a in 0..g.nrows() {
                for b in 0..g.ncols() {
                    v += d.z[(r, a)] * g[(a, b)] * d.z[(c, b)];
                }
            }
        }
        v += serial_entry(&params.residual, d.markers[r], d.occasions[r], d.markers[c], d.occasions[c]);
        if r == c {
            v += error_entry(&params.residual, d.markers[r]);
        }
        v
    })
}

fn ln_abs_det(m: &DMatrix<f64>) -> f64 {
    let lu = m.clone().lu();
    let u = lu.u();
    (0..u.nrows()).map(|i| u[(i, i)].abs().ln()).sum()
}

/// Negative (restricted) log-likelihood at the GLS `β`, from one dense `N × N`
/// covariance factorized by LU.
pub fn dense_negloglik(theta: &[f64], designs: &[SubjectDesign], spec: &ModelSpec) -> (f64, DVector<f64>) {
    let params = CovarianceParams::from_theta(spec, theta).unwrap();
    let n: usize = designs.iter().map(|d| d.n_rows()).sum();
    let p = spec.design.n_fixed();
    let mut v = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut off = 0;
    for d in designs {
        let k = d.n_rows();
        v.view_mut((off, off), (k, k)).copy_from(&brute_force_v(d, &params));
        x.view_mut((off, 0), (k, p)).copy_from(&d.x);
        y.rows_mut(off, k).copy_from(&d.y);
        off += k;
    }
    let lu = v.clone().lu();
    let vinv_x = lu.solve(&x).unwrap();
    let vinv_y = lu.solve(&y).unwrap();
    let a = x.transpose() * &vinv_x;
    let beta = a.clone().lu().solve(&(x.transpose() * &vinv_y)).unwrap();
    let r = &y - &x * &beta;
    let quad = r.dot(&lu.solve(&r).unwrap());
    let mut f = 0.5 * (n as f64 * LN_2PI + ln_abs_det(&v) + quad);
    if spec.method == Method::Reml {
        f += 0.5 * (ln_abs_det(&a) - p as f64 * LN_2PI);
    }
    (f, beta)
}

pub fn uniform_in(rng: &mut CounterRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

pub fn below(rng: &mut CounterRng, n: usize) -> usize {
    ((rng.uniform() * n as f64) as usize).min(n - 1)
}

fn random_subset(rng: &mut CounterRng, count: usize, max_occasion: u32) -> Vec<u32> {
    let mut all: Vec<u32> = (0..=max_occasion).collect();
    for i in (1..all.len()).rev() {
        let j = below(rng, i + 1);
        all.swap(i, j);
    }
    let mut s: Vec<u32> = all[..count].to_vec();
    s.sort_unstable();
    s
}

pub const DESIGNS: usize = 3;

pub fn design_choice(i: usize) -> DesignSpec {
    match i {
        0 => DesignSpec::piecewise(6.0),
        1 => DesignSpec::intercept_linear(),
        _ => DesignSpec {
            tau: 6.0,
            include_intercept: true,
            terms: [vec![TimeTerm::PreChange, TimeTerm::PostChange], vec![TimeTerm::Time]],
        },
    }
}

pub const RESIDUALS: [ResidualKind; 4] = [
    ResidualKind::GroupedDiagonal,
    ResidualKind::KroneckerAr1PlusError,
    ResidualKind::KroneckerAr1Only,
    ResidualKind::IndependentAr1PlusError,
];

pub fn random_spec(rng: &mut CounterRng) -> ModelSpec {
    let design = design_choice(below(rng, DESIGNS));
    let re = match below(rng, 3) {
        0 => RandomEffects::None,
        1 => RandomEffects::Slopes { independent: false },
        _ => RandomEffects::Slopes { independent: true },
    };
    let residual = RESIDUALS[below(rng, 4)];
    let method = if rng.uniform() < 0.5 { Method::Ml } else { Method::Reml };
    ModelSpec::new(design, re, residual, method)
}

/// Design rows for one subject observed at the given occasions (spacing 4).
pub fn subject_design(name: &str, spec: &DesignSpec, occ: [&[u32]; 2], y: &[f64]) -> SubjectDesign {
    use bivlmm::data::{build_design, OccasionGrid, StackedDataset};
    let grid = OccasionGrid::new(4.0, 0.0).unwrap();
    let mut obs = Vec::new();
    let mut i = 0;
    for m in Marker::BOTH {
        for &o in occ[m.index()] {
            obs.push((name.to_string(), m, grid.time_of(o), y[i]));
            i += 1;
        }
    }
    let data = StackedDataset::from_observations(obs, grid).unwrap();
    build_design(&data, spec).unwrap().remove(0)
}

/// Up to 4 subjects with at most 8 rows each and standard-normal responses.
pub fn random_designs(rng: &mut CounterRng, spec: &DesignSpec, max_subjects: usize) -> Vec<SubjectDesign> {
    let n_subjects = 1 + below(rng, max_subjects);
    (0..n_subjects)
        .map(|s| {
            let n1 = 1 + below(rng, 4);
            let n2 = 1 + below(rng, 4);
            let o1 = random_subset(rng, n1, 5);
            let o2 = random_subset(rng, n2, 5);
            let y: Vec<f64> = (0..n1 + n2).map(|_| rng.normal()).collect();
            subject_design(&format!("s{s}"), spec, [&o1, &o2], &y)
        })
        .collect()
}

pub fn random_theta(rng: &mut CounterRng, spec: &ModelSpec, half_width: f64) -> Vec<f64> {
    (0..spec.n_covariance_params())
        .map(|_| uniform_in(rng, -half_width, half_width))
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
