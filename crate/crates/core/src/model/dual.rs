//! Second-order forward-mode dual numbers.
//!
//! `Dual2<N>` carries a value, its gradient and its (symmetric) Hessian with
//! respect to `N` independent variables. Arithmetic propagates all three by the
//! usual product/chain rules, so evaluating a function on seeded variables gives
//! exact first and second derivatives.

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar type the model equations are written against.
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, p: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Value, gradient and Hessian with respect to `N` seeded variables.
#[derive(Clone, Copy, PartialEq)]
pub struct Dual2<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [[f64; N]; N],
}

impl<const N: usize> fmt::Debug for Dual2<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dual2({}, g={:?})", self.v, self.g)
    }
}

impl<const N: usize> Dual2<N> {
    #[inline]
    pub fn constant(v: f64) -> Self {
        Self { v, g: [0.0; N], h: [[0.0; N]; N] }
    }

    /// The `i`-th independent variable at value `v`.
    #[inline]
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = Self::constant(v);
        d.g[i] = 1.0;
        d
    }

    /// Seeds a full vector of independent variables.
    pub fn vars(vals: &[f64]) -> [Self; N] {
        assert_eq!(vals.len(), N, "seed length must equal the dual dimension");
        std::array::from_fn(|i| Self::var(vals[i], i))
    }

    /// Applies a scalar function given its value and first two derivatives at `self.v`.
    #[inline]
    fn chain(self, f: f64, df: f64, d2f: f64) -> Self {
        let mut out = Self { v: f, g: [0.0; N], h: [[0.0; N]; N] };
        for i in 0..N {
            out.g[i] = df * self.g[i];
        }
        for i in 0..N {
            let gi = d2f * self.g[i];
            for j in 0..N {
                out.h[i][j] = df * self.h[i][j] + gi * self.g[j];
            }
        }
        out
    }
}

impl<const N: usize> Add for Dual2<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, b: Self) -> Self {
        self += b;
        self
    }
}

impl<const N: usize> AddAssign for Dual2<N> {
    #[inline]
    fn add_assign(&mut self, b: Self) {
        self.v += b.v;
        for i in 0..N {
            self.g[i] += b.g[i];
            for j in 0..N {
                self.h[i][j] += b.h[i][j];
            }
        }
    }
}

impl<const N: usize> Sub for Dual2<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, b: Self) -> Self {
        self -= b;
        self
    }
}

impl<const N: usize> SubAssign for Dual2<N> {
    #[inline]
    fn sub_assign(&mut self, b: Self) {
        self.v -= b.v;
        for i in 0..N {
            self.g[i] -= b.g[i];
            for j in 0..N {
                self.h[i][j] -= b.h[i][j];
            }
        }
    }
}

impl<const N: usize> Mul for Dual2<N> {
    type Output = Self;
    #[inline]
    fn mul(self, b: Self) -> Self {
        let mut out = Self { v: self.v * b.v, g: [0.0; N], h: [[0.0; N]; N] };
        for i in 0..N {
            out.g[i] = self.v * b.g[i] + b.v * self.g[i];
        }
        for i in 0..N {
            for j in 0..N {
                out.h[i][j] = self.v * b.h[i][j] + b.v * self.h[i][j] + self.g[i] * b.g[j] + self.g[j] * b.g[i];
            }
        }
        out
    }
}

impl<const N: usize> MulAssign for Dual2<N> {
    #[inline]
    fn mul_assign(&mut self, b: Self) {
        *self = *self * b;
    }
}

impl<const N: usize> Div for Dual2<N> {
    type Output = Self;
    #[inline]
    fn div(self, b: Self) -> Self {
        let r = 1.0 / b.v;
        self * b.chain(r, -r * r, 2.0 * r * r * r)
    }
}

impl<const N: usize> DivAssign for Dual2<N> {
    #[inline]
    fn div_assign(&mut self, b: Self) {
        *self = *self / b;
    }
}

impl<const N: usize> Neg for Dual2<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl<const N: usize> Add<f64> for Dual2<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, b: f64) -> Self {
        self.v += b;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual2<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, b: f64) -> Self {
        self.v -= b;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual2<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, b: f64) -> Self {
        self.v *= b;
        for i in 0..N {
            self.g[i] *= b;
            for j in 0..N {
                self.h[i][j] *= b;
            }
        }
        self
    }
}

impl<const N: usize> Div<f64> for Dual2<N> {
    type Output = Self;
    #[inline]
    fn div(self, b: f64) -> Self {
        self * (1.0 / b)
    }
}

impl<const N: usize> Scalar for Dual2<N> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        let nf = n as f64;
        let d2 = if n == 0 || n == 1 { 0.0 } else { nf * (nf - 1.0) * self.v.powi(n - 2) };
        let d1 = if n == 0 { 0.0 } else { nf * self.v.powi(n - 1) };
        self.chain(self.v.powi(n), d1, d2)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        self.chain(self.v.powf(p), p * self.v.powf(p - 1.0), p * (p - 1.0) * self.v.powf(p - 2.0))
    }
    #[inline]
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    #[inline]
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
}
