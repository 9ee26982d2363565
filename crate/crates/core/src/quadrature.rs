//! Quadrature rules on the reference interval `[0, 1]`, the reference square
//! `[0, 1]^2` and the reference triangle with vertices `(0,0), (1,0), (0,1)`.
//!
//! Interval and square rules are Gauss-Legendre (tensor products on the
//! square). Triangle rules are collapsed Gauss-Legendre rules obtained through
//! the Duffy map `(u, v) -> (u (1 - v), v)`, which are exact for any requested
//! degree without stored tables.

use crate::error::{Error, Result};
use crate::mesh::CellType;

/// Highest exactness degree any rule is built for.
pub const MAX_DEGREE: usize = 40;

/// A quadrature rule in reference coordinates.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    /// Reference points; for interval rules only the first coordinate is used.
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    /// Polynomial degree integrated exactly.
    pub degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Sum of `w_q f(x_q)`.
    pub fn integrate(&self, mut f: impl FnMut([f64; 2]) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(*x))
            .sum()
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` with `n` points.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-like initial guess, then Newton on P_n.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() <= 1e-16 * z.abs().max(1.0) {
                let (_, d) = legendre_with_derivative(n, z);
                dp = d;
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_DEGREE {
        return Err(Error::QuadratureDegree {
            requested: degree,
            max: MAX_DEGREE,
        });
    }
    Ok(())
}

fn points_for(degree: usize) -> usize {
    // n-point Gauss integrates degree 2n - 1.
    (degree + 2) / 2
}

/// Gauss rule on `[0, 1]` with at least the requested exactness.
pub fn make_face_quadrature(degree: usize) -> Result<QuadratureRule> {
    check_degree(degree)?;
    let n = points_for(degree);
    let (x, w) = gauss_legendre(n);
    Ok(QuadratureRule {
        points: x.iter().map(|&t| [0.5 * (t + 1.0), 0.0]).collect(),
        weights: w.iter().map(|&wi| 0.5 * wi).collect(),
        degree: 2 * n - 1,
    })
}

/// Volume rule on the reference element of `cell_type`.
pub fn make_quadrature(cell_type: CellType, degree: usize) -> Result<QuadratureRule> {
    check_degree(degree)?;
    match cell_type {
        CellType::Quad => {
            let line = make_face_quadrature(degree)?;
            let mut points = Vec::with_capacity(line.len() * line.len());
            let mut weights = Vec::with_capacity(line.len() * line.len());
            for (py, wy) in line.points.iter().zip(&line.weights) {
                for (px, wx) in line.points.iter().zip(&line.weights) {
                    points.push([px[0], py[0]]);
                    weights.push(wx * wy);
                }
            }
            Ok(QuadratureRule {
                points,
                weights,
                degree: line.degree,
            })
        }
        CellType::Tri => {
            // The Duffy Jacobian (1 - v) raises the degree in v by one.
            let nu = points_for(degree);
            let nv = points_for(degree + 1);
            let (xu, wu) = gauss_legendre(nu);
            let (xv, wv) = gauss_legendre(nv);
            let mut points = Vec::with_capacity(nu * nv);
            let mut weights = Vec::with_capacity(nu * nv);
            for (tv, wvi) in xv.iter().zip(&wv) {
                let v = 0.5 * (tv + 1.0);
                for (tu, wui) in xu.iter().zip(&wu) {
                    let u = 0.5 * (tu + 1.0);
                    points.push([u * (1.0 - v), v]);
                    weights.push(0.25 * wui * wvi * (1.0 - v));
                }
            }
            Ok(QuadratureRule {
                points,
                weights,
                degree: (2 * nu - 1).min(2 * nv - 2),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    #[test]
    fn degree_one_interval_rule_is_midpoint() {
        let q = make_face_quadrature(1).unwrap();
        assert_eq!(q.len(), 1);
        assert!((q.weights[0] - 1.0).abs() < 1e-15);
        assert!((q.points[0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_point_rule_integrates_cubics() {
        let q = make_face_quadrature(3).unwrap();
        assert_eq!(q.len(), 2);
        assert!(q.weights.iter().all(|&w| w > 0.0));
        for k in 0..=3 {
            let approx = q.integrate(|x| x[0].powi(k));
            assert!((approx - 1.0 / (k as f64 + 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn quad_degree_one_is_one_point() {
        let q = make_quadrature(CellType::Quad, 1).unwrap();
        assert_eq!(q.len(), 1);
        let lin = q.integrate(|x| 2.0 + 3.0 * x[0] - x[1]);
        assert!((lin - 3.0).abs() < 1e-15);
    }

    #[test]
    fn quad_degree_four_integrates_x2y2() {
        let q = make_quadrature(CellType::Quad, 4).unwrap();
        let v = q.integrate(|x| x[0] * x[0] * x[1] * x[1]);
        assert!((v - 1.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn weights_sum_to_reference_measure() {
        for d in 0..=12 {
            let q = make_quadrature(CellType::Quad, d).unwrap();
            assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let t = make_quadrature(CellType::Tri, d).unwrap();
            assert!((t.weights.iter().sum::<f64>() - 0.5).abs() < 1e-14);
            assert!(t.degree >= d && q.degree >= d);
        }
    }

    #[test]
    fn triangle_rules_integrate_monomials() {
        // int_T x^a y^b = a! b! / (a + b + 2)!
        for d in [2usize, 4, 6, 9] {
            let q = make_quadrature(CellType::Tri, d).unwrap();
            for a in 0..=d as u32 {
                for b in 0..=(d as u32 - a) {
                    let exact = factorial(a) * factorial(b) / factorial(a + b + 2);
                    let v = q.integrate(|x| x[0].powi(a as i32) * x[1].powi(b as i32));
                    assert!(
                        (v - exact).abs() <= 1e-12 * exact.max(1e-3),
                        "degree {d}: x^{a} y^{b}: {v} vs {exact}"
                    );
                }
            }
            assert!(q.points.iter().all(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0));
        }
    }

    #[test]
    fn too_high_degree_reports_maximum() {
        let err = make_quadrature(CellType::Tri, MAX_DEGREE + 1).unwrap_err();
        assert!(err.to_string().contains(&MAX_DEGREE.to_string()));
    }
}
