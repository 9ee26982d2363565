//! Modal orthogonal bases on the reference elements.
//!
//! Quads use tensor-product shifted Legendre polynomials (the `Q_p` space),
//! triangles use the Dubiner basis (the `P_p` space). Every mode is scaled so
//! that `<phi_i, phi_j> = delta_ij * |reference|`, with `phi_0 = 1`. Under an
//! affine map this becomes `delta_ij * |K|` on each physical cell, so the
//! first coefficient of any expansion is the cell average.

use crate::error::{Error, Result};
use crate::mesh::CellType;

/// Dense bivariate polynomial `sum c[i][j] x^i y^j` with `i, j <= deg`.
#[derive(Clone, Debug, PartialEq)]
pub struct Poly2 {
    deg: usize,
    c: Vec<f64>,
}

impl Poly2 {
    pub fn zero(deg: usize) -> Self {
        Poly2 {
            deg,
            c: vec![0.0; (deg + 1) * (deg + 1)],
        }
    }

    pub fn constant(v: f64) -> Self {
        Poly2 { deg: 0, c: vec![v] }
    }

    /// `a + bx x + by y`
    pub fn linear(a: f64, bx: f64, by: f64) -> Self {
        let mut p = Poly2::zero(1);
        p.set(0, 0, a);
        p.set(1, 0, bx);
        p.set(0, 1, by);
        p
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.deg + 1) + j
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i > self.deg || j > self.deg {
            0.0
        } else {
            self.c[self.idx(i, j)]
        }
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.c[k] = v;
    }

    pub fn add(&self, other: &Poly2) -> Poly2 {
        let deg = self.deg.max(other.deg);
        let mut r = Poly2::zero(deg);
        for i in 0..=deg {
            for j in 0..=deg {
                r.set(i, j, self.get(i, j) + other.get(i, j));
            }
        }
        r
    }

    pub fn scale(&self, s: f64) -> Poly2 {
        Poly2 {
            deg: self.deg,
            c: self.c.iter().map(|v| v * s).collect(),
        }
    }

    pub fn mul(&self, other: &Poly2) -> Poly2 {
        let deg = self.deg + other.deg;
        let mut r = Poly2::zero(deg);
        for i in 0..=self.deg {
            for j in 0..=self.deg {
                let a = self.get(i, j);
                if a == 0.0 {
                    continue;
                }
                for k in 0..=other.deg {
                    for l in 0..=other.deg {
                        let idx = r.idx(i + k, j + l);
                        r.c[idx] += a * other.get(k, l);
                    }
                }
            }
        }
        r
    }

    pub fn pow(&self, n: usize) -> Poly2 {
        (0..n).fold(Poly2::constant(1.0), |acc, _| acc.mul(self))
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        // Horner in x over Horner-in-y coefficients.
        let mut acc = 0.0;
        for i in (0..=self.deg).rev() {
            let mut row = 0.0;
            for j in (0..=self.deg).rev() {
                row = row * x[1] + self.get(i, j);
            }
            acc = acc * x[0] + row;
        }
        acc
    }

    pub fn dx(&self) -> Poly2 {
        let mut r = Poly2::zero(self.deg);
        for i in 1..=self.deg {
            for j in 0..=self.deg {
                r.set(i - 1, j, self.get(i, j) * i as f64);
            }
        }
        r
    }

    pub fn dy(&self) -> Poly2 {
        let mut r = Poly2::zero(self.deg);
        for i in 0..=self.deg {
            for j in 1..=self.deg {
                r.set(i, j - 1, self.get(i, j) * j as f64);
            }
        }
        r
    }
}

/// Legendre `P_n(t)` as a polynomial in `t` (stored in the x slot).
fn legendre_poly(n: usize, t: &Poly2) -> Poly2 {
    let mut p0 = Poly2::constant(1.0);
    if n == 0 {
        return p0;
    }
    let mut p1 = t.clone();
    for k in 2..=n {
        let kf = k as f64;
        let p2 = t
            .mul(&p1)
            .scale((2.0 * kf - 1.0) / kf)
            .add(&p0.scale(-(kf - 1.0) / kf));
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Jacobi `P_n^{(a, 0)}(t)` for a polynomial argument `t`.
fn jacobi_poly(n: usize, a: f64, t: &Poly2) -> Poly2 {
    let mut p0 = Poly2::constant(1.0);
    if n == 0 {
        return p0;
    }
    // P_1 = ((a + 2) t + a) / 2
    let mut p1 = t.scale(0.5 * (a + 2.0)).add(&Poly2::constant(0.5 * a));
    for k in 2..=n {
        let k = k as f64;
        let c = 2.0 * k + a;
        let a1 = 2.0 * k * (k + a) * (c - 2.0);
        let a2 = (c - 1.0) * a * a;
        let a3 = (c - 2.0) * (c - 1.0) * c;
        let a4 = 2.0 * (k + a - 1.0) * (k - 1.0) * c;
        let p2 = t
            .scale(a3)
            .add(&Poly2::constant(a2))
            .mul(&p1)
            .add(&p0.scale(-a4))
            .scale(1.0 / a1);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Modal basis on a reference element with precomputed gradient polynomials.
#[derive(Clone, Debug)]
pub struct ReferenceBasis {
    pub cell_type: CellType,
    pub order: usize,
    functions: Vec<Poly2>,
    gradients: Vec<[Poly2; 2]>,
}

/// Number of modes for order `p`.
pub fn num_dofs(cell_type: CellType, p: usize) -> usize {
    match cell_type {
        CellType::Quad => (p + 1) * (p + 1),
        CellType::Tri => (p + 1) * (p + 2) / 2,
    }
}

pub fn make_basis(cell_type: CellType, p: usize) -> Result<ReferenceBasis> {
    if p > 8 {
        return Err(Error::InvalidArgument(format!(
            "polynomial order {p} is not supported (maximum 8)"
        )));
    }
    let x = Poly2::linear(0.0, 1.0, 0.0);
    let y = Poly2::linear(0.0, 0.0, 1.0);
    let mut functions = Vec::with_capacity(num_dofs(cell_type, p));
    match cell_type {
        CellType::Quad => {
            let tx = x.scale(2.0).add(&Poly2::constant(-1.0));
            let ty = y.scale(2.0).add(&Poly2::constant(-1.0));
            // Modes ordered by max degree, then total degree.
            let mut pairs: Vec<(usize, usize)> =
                (0..=p).flat_map(|a| (0..=p).map(move |b| (a, b))).collect();
            pairs.sort_by_key(|&(a, b)| (a.max(b), a + b, b));
            for (a, b) in pairs {
                let s = (((2 * a + 1) * (2 * b + 1)) as f64).sqrt();
                functions.push(legendre_poly(a, &tx).mul(&legendre_poly(b, &ty)).scale(s));
            }
        }
        CellType::Tri => {
            // psi_ij = P_i(xi) (1 - y)^i P_j^{(2i+1,0)}(2y - 1),
            // xi = (2x - 1 + y) / (1 - y), expanded term by term.
            let one_minus_y = Poly2::linear(1.0, 0.0, -1.0);
            let numer = Poly2::linear(-1.0, 2.0, 1.0);
            let t = y.scale(2.0).add(&Poly2::constant(-1.0));
            let xi = Poly2::linear(0.0, 1.0, 0.0);
            for k in 0..=p {
                for i in (0..=k).rev() {
                    let j = k - i;
                    let leg = legendre_poly(i, &xi);
                    let mut head = Poly2::zero(i);
                    for m in 0..=i {
                        let coef = leg.get(m, 0);
                        if coef != 0.0 {
                            head = head.add(
                                &numer
                                    .pow(m)
                                    .mul(&one_minus_y.pow(i - m))
                                    .scale(coef),
                            );
                        }
                    }
                    let tail = jacobi_poly(j, (2 * i + 1) as f64, &t);
                    let s = (((2 * i + 1) * (i + j + 1)) as f64).sqrt();
                    functions.push(head.mul(&tail).scale(s));
                }
            }
        }
    }
    let gradients = functions.iter().map(|f| [f.dx(), f.dy()]).collect();
    Ok(ReferenceBasis {
        cell_type,
        order: p,
        functions,
        gradients,
    })
}

impl ReferenceBasis {
    pub fn num_dofs(&self) -> usize {
        self.functions.len()
    }

    pub fn value(&self, j: usize, x: [f64; 2]) -> f64 {
        self.functions[j].eval(x)
    }

    pub fn ref_gradient(&self, j: usize, x: [f64; 2]) -> [f64; 2] {
        [self.gradients[j][0].eval(x), self.gradients[j][1].eval(x)]
    }

    pub fn values(&self, x: [f64; 2]) -> Vec<f64> {
        (0..self.num_dofs()).map(|j| self.value(j, x)).collect()
    }

    pub fn ref_gradients(&self, x: [f64; 2]) -> Vec<[f64; 2]> {
        (0..self.num_dofs()).map(|j| self.ref_gradient(j, x)).collect()
    }

    pub fn polynomial(&self, j: usize) -> &Poly2 {
        &self.functions[j]
    }

    /// Evaluation tables at a set of reference points.
    pub fn tabulate(&self, points: &[[f64; 2]]) -> Tabulation {
        let n = self.num_dofs();
        let mut values = Vec::with_capacity(points.len() * n);
        let mut grads = Vec::with_capacity(points.len() * n);
        for &x in points {
            values.extend(self.values(x));
            grads.extend(self.ref_gradients(x));
        }
        Tabulation {
            num_dofs: n,
            num_points: points.len(),
            values,
            grads,
        }
    }
}

/// Basis values and reference gradients at `num_points` points, point-major.
#[derive(Clone, Debug)]
pub struct Tabulation {
    pub num_dofs: usize,
    pub num_points: usize,
    values: Vec<f64>,
    grads: Vec<[f64; 2]>,
}

impl Tabulation {
    pub fn values(&self, q: usize) -> &[f64] {
        &self.values[q * self.num_dofs..(q + 1) * self.num_dofs]
    }

    pub fn grads(&self, q: usize) -> &[[f64; 2]] {
        &self.grads[q * self.num_dofs..(q + 1) * self.num_dofs]
    }

    /// `sum_j c_j phi_j(x_q)`
    pub fn eval(&self, q: usize, coeffs: &[f64]) -> f64 {
        self.values(q).iter().zip(coeffs).map(|(v, c)| v * c).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::make_quadrature;

    fn gram(cell_type: CellType, p: usize) -> Vec<Vec<f64>> {
        let b = make_basis(cell_type, p).unwrap();
        let q = make_quadrature(cell_type, 2 * p + 2).unwrap();
        let n = b.num_dofs();
        let mut g = vec![vec![0.0; n]; n];
        for (x, w) in q.points.iter().zip(&q.weights) {
            let v = b.values(*x);
            for i in 0..n {
                for j in 0..n {
                    g[i][j] += w * v[i] * v[j];
                }
            }
        }
        g
    }

    #[test]
    fn order_zero_is_constant_one() {
        for ct in [CellType::Quad, CellType::Tri] {
            let b = make_basis(ct, 0).unwrap();
            assert_eq!(b.num_dofs(), 1);
            assert_eq!(b.value(0, [0.3, 0.2]), 1.0);
            assert_eq!(b.ref_gradient(0, [0.3, 0.2]), [0.0, 0.0]);
        }
    }

    #[test]
    fn dof_counts() {
        assert_eq!(make_basis(CellType::Quad, 1).unwrap().num_dofs(), 4);
        assert_eq!(make_basis(CellType::Tri, 1).unwrap().num_dofs(), 3);
        assert_eq!(make_basis(CellType::Quad, 3).unwrap().num_dofs(), 16);
        assert_eq!(make_basis(CellType::Tri, 3).unwrap().num_dofs(), 10);
    }

    #[test]
    fn gram_matrix_is_scaled_identity() {
        for ct in [CellType::Quad, CellType::Tri] {
            for p in 0..=4 {
                let g = gram(ct, p);
                let m = ct.reference_measure();
                for (i, row) in g.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        let expected = if i == j { m } else { 0.0 };
                        assert!((v - expected).abs() < 1e-12, "{ct:?} p={p} ({i},{j}) = {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn first_mode_is_exactly_one() {
        for ct in [CellType::Quad, CellType::Tri] {
            let b = make_basis(ct, 3).unwrap();
            for x in [[0.1, 0.2], [0.7, 0.05], [0.0, 1.0]] {
                assert_eq!(b.value(0, x), 1.0);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for ct in [CellType::Quad, CellType::Tri] {
            let b = make_basis(ct, 3).unwrap();
            for x in [[0.2, 0.3], [0.6, 0.1], [0.05, 0.9]] {
                if !ct.contains_reference(x) {
                    continue;
                }
                for j in 0..b.num_dofs() {
                    let g = b.ref_gradient(j, x);
                    let fx = (b.value(j, [x[0] + h, x[1]]) - b.value(j, [x[0] - h, x[1]])) / (2.0 * h);
                    let fy = (b.value(j, [x[0], x[1] + h]) - b.value(j, [x[0], x[1] - h])) / (2.0 * h);
                    assert!((g[0] - fx).abs() < 1e-6 && (g[1] - fy).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn poly_arithmetic() {
        let p = Poly2::linear(1.0, 2.0, 3.0);
        let q = p.mul(&p);
        let x = [0.4, -0.7];
        assert!((q.eval(x) - p.eval(x).powi(2)).abs() < 1e-14);
        assert!((q.dx().eval(x) - 2.0 * p.eval(x) * 2.0).abs() < 1e-14);
        assert!((q.dy().eval(x) - 2.0 * p.eval(x) * 3.0).abs() < 1e-14);
    }
}
