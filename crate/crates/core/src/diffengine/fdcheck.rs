//! Central finite differences, kept as a test oracle for the engine.

use alloc::vec::Vec;

use super::{DiffError, ParameterSet};

/// Step sizes tried for every entry; the smallest discrepancy wins.
pub const STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Relative error used throughout gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Central difference of `f` with respect to one flat parameter entry.
pub fn central_difference<F>(params: &mut ParameterSet, index: usize, h: f64, f: &mut F) -> Result<f64, DiffError>
where
    F: FnMut(&ParameterSet) -> Result<f64, DiffError>,
{
    let orig = *params
        .flat_value_mut(index)
        .ok_or_else(|| DiffError::Structural(alloc::format!("flat index {index} out of range")))?;
    let set = |p: &mut ParameterSet, v: f64| {
        if let Some(x) = p.flat_value_mut(index) {
            *x = v;
        }
    };
    set(params, orig + h);
    let plus = f(params);
    set(params, orig - h);
    let minus = f(params);
    set(params, orig);
    Ok((plus? - minus?) / (2.0 * h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` (flat gradient) with central differences of `f` at
/// each index in `indices` (all entries when `None`).
pub fn check_gradient<F>(
    params: &mut ParameterSet,
    analytic: &[f64],
    indices: Option<&[usize]>,
    mut f: F,
) -> Result<GradCheck, DiffError>
where
    F: FnMut(&ParameterSet) -> Result<f64, DiffError>,
{
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..params.numel()).collect();
            &all
        }
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in idx {
        let a = *analytic
            .get(i)
            .ok_or_else(|| DiffError::Structural(alloc::format!("gradient index {i} out of range")))?;
        let mut best = f64::INFINITY;
        for h in STEPS {
            let n = central_difference(params, i, h, &mut f)?;
            best = best.min(relative_error(a, n));
        }
        if best > report.max_rel_error {
            report.max_rel_error = best;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Central-difference Jacobian of `f: R⁴ → R³` with step `h`.
pub fn jacobian_fd<F>(f: F, x: [f64; 4], h: f64) -> [[f64; 4]; 3]
where
    F: Fn([f64; 4]) -> [f64; 3],
{
    let mut j = [[0.0; 4]; 3];
    for d in 0..4 {
        let mut xp = x;
        let mut xm = x;
        xp[d] += h;
        xm[d] -= h;
        let (fp, fm) = (f(xp), f(xm));
        for r in 0..3 {
            j[r][d] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    j
}
