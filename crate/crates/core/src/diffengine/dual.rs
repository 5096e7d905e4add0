//! Forward-mode dual numbers with four tangent directions, one per
//! space-time input `(x, y, z, t)`.

use core::ops::{Add, Div, Mul, Neg, Sub};

use super::DiffError;
use crate::math::Real;

/// Number of seeded tangent directions.
pub const DIRS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub tangent: [f64; DIRS],
}

impl Dual {
    pub const fn constant(value: f64) -> Self {
        Dual {
            value,
            tangent: [0.0; DIRS],
        }
    }

    /// Independent variable seeded along direction `dir`.
    pub fn variable(value: f64, dir: usize) -> Self {
        let mut tangent = [0.0; DIRS];
        tangent[dir] = 1.0;
        Dual { value, tangent }
    }

    pub fn new(value: f64, tangent: [f64; DIRS]) -> Self {
        Dual { value, tangent }
    }

    /// Seeds the four inputs `(x, y, z, t)`.
    pub fn seed(x: [f64; DIRS]) -> [Dual; DIRS] {
        [
            Dual::variable(x[0], 0),
            Dual::variable(x[1], 1),
            Dual::variable(x[2], 2),
            Dual::variable(x[3], 3),
        ]
    }

    #[inline]
    fn chain(self, value: f64, deriv: f64) -> Dual {
        let mut tangent = self.tangent;
        for d in tangent.iter_mut() {
            *d *= deriv;
        }
        Dual { value, tangent }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.tangent.iter().all(|d| d.is_finite())
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, rhs: Dual) -> Dual {
        let mut tangent = self.tangent;
        for (d, r) in tangent.iter_mut().zip(rhs.tangent) {
            *d += r;
        }
        Dual {
            value: self.value + rhs.value,
            tangent,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, rhs: Dual) -> Dual {
        let mut tangent = self.tangent;
        for (d, r) in tangent.iter_mut().zip(rhs.tangent) {
            *d -= r;
        }
        Dual {
            value: self.value - rhs.value,
            tangent,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        let mut tangent = [0.0; DIRS];
        for (i, d) in tangent.iter_mut().enumerate() {
            *d = self.tangent[i] * rhs.value + self.value * rhs.tangent[i];
        }
        Dual {
            value: self.value * rhs.value,
            tangent,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.value;
        let value = self.value * inv;
        let mut tangent = [0.0; DIRS];
        for (i, d) in tangent.iter_mut().enumerate() {
            *d = (self.tangent[i] - value * rhs.tangent[i]) * inv;
        }
        Dual { value, tangent }
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        self.chain(-self.value, -1.0)
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.value
    }
    fn sqrt(self) -> Self {
        let s = libm::sqrt(self.value);
        self.chain(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.chain(libm::sin(self.value), libm::cos(self.value))
    }
    fn cos(self) -> Self {
        self.chain(libm::cos(self.value), -libm::sin(self.value))
    }
    fn exp(self) -> Self {
        let e = libm::exp(self.value);
        self.chain(e, e)
    }
    fn scale(self, c: f64) -> Self {
        self.chain(self.value * c, c)
    }
}

/// Value and exact 3×4 Jacobian of a map `(x, y, z, t) -> R³` evaluated with
/// dual numbers. Column `j` is the derivative along input direction `j`.
pub fn forward_jacobian<F>(f: F, x: [f64; DIRS]) -> Result<([f64; 3], [[f64; DIRS]; 3]), DiffError>
where
    F: Fn(&[Dual; DIRS]) -> [Dual; 3],
{
    let out = f(&Dual::seed(x));
    if !out.iter().all(Dual::is_finite) {
        return Err(DiffError::NonFinite {
            op: "forward_jacobian",
        });
    }
    Ok((
        [out[0].value, out[1].value, out[2].value],
        [out[0].tangent, out[1].tangent, out[2].tangent],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map_jacobian() {
        let (v, j) = forward_jacobian(|x| [x[0], x[1], x[2]], [1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(v, [1.0, 2.0, 3.0]);
        assert_eq!(
            j,
            [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0]
            ]
        );
    }

    #[test]
    fn rotation_map_jacobian() {
        let (_, j) = forward_jacobian(|x| [-x[1], x[0], Dual::constant(0.0)], [0.3, -0.7, 2.0, 1.0]).unwrap();
        assert_eq!(
            j,
            [
                [0.0, -1.0, 0.0, 0.0],
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, 0.0]
            ]
        );
    }

    #[test]
    fn non_finite_is_reported() {
        let err = forward_jacobian(|x| [x[0] / Dual::constant(0.0), x[1], x[2]], [1.0, 0.0, 0.0, 0.0]).unwrap_err();
        assert_eq!(
            err,
            DiffError::NonFinite {
                op: "forward_jacobian"
            }
        );
    }

    #[test]
    fn elementary_derivatives() {
        let x = Dual::variable(0.7, 0);
        assert!((x.sin().tangent[0] - libm::cos(0.7)).abs() < 1e-15);
        assert!((x.exp().tangent[0] - libm::exp(0.7)).abs() < 1e-15);
        assert!((x.sqrt().tangent[0] - 0.5 / libm::sqrt(0.7)).abs() < 1e-15);
        let q = Dual::constant(1.0) / x;
        assert!((q.tangent[0] + 1.0 / 0.49).abs() < 1e-12);
    }

    #[test]
    fn tangent_is_linear() {
        let a = Dual::new(1.0, [1.0, 2.0, 3.0, 4.0]);
        let b = Dual::new(-2.0, [0.5, -1.0, 0.0, 2.0]);
        let c = a.scale(2.0) + b.scale(-3.0);
        for i in 0..DIRS {
            assert_eq!(c.tangent[i], 2.0 * a.tangent[i] - 3.0 * b.tangent[i]);
        }
    }
}
