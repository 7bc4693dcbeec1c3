//! Div-curl products: the scalar Wente problem `Δφ = ∂₁a∂₂b − ∂₂a∂₁b` on
//! the disc, and the matrix pairing `2Σ⟨ξᵏₗ, dQⁱₖ∧dQⁱₗ⟩` that controls
//! `‖dQ‖²` once `dQ = [Q, d*ξ]`.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gauge::{GaugeSolution, QReport};
use crate::grid::{
    exterior_derivative, form_count, partial, poisson_solve, Boundary, Field, GridDomain,
    ValueShape,
};
use crate::maps::band_limited_scalar;
use crate::norms::{bmo_seminorm, morrey_norm, BallFamily};

/// `√(3/(16π))`, the sharp constant in `‖dφ‖ ≤ C‖da‖‖db‖`.
pub fn sharp_gradient_constant() -> f64 {
    (3.0 / (16.0 * std::f64::consts::PI)).sqrt()
}

/// `ρ` for `a = x₁, b = x₂` on the unit disc, where `φ = (|x|² − 1)/4`.
pub fn linear_pair_ratio() -> f64 {
    1.0 / (8.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone)]
pub struct WenteInstance {
    pub a: Field,
    pub b: Field,
    pub phi: Field,
    pub norms: WenteNorms,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WenteNorms {
    pub da: f64,
    pub db: f64,
    pub dphi: f64,
    pub phi_sup: f64,
    /// `‖dφ‖/(‖da‖‖db‖)`, zero when either factor vanishes.
    pub ratio: f64,
    pub solver_iterations: usize,
}

/// `∂₁a∂₂b − ∂₂a∂₁b`.
pub fn jacobian(a: &Field, b: &Field) -> Result<Field> {
    for f in [a, b] {
        if f.degree() != 0 || f.shape() != ValueShape::Scalar {
            return Err(Error::ShapeMismatch("Jacobian needs scalar 0-forms".into()));
        }
        if f.domain().dim() != 2 {
            return Err(Error::Unsupported(
                "the scalar Wente problem lives in two dimensions".into(),
            ));
        }
    }
    if !a.domain().same_grid(b.domain()) {
        return Err(Error::ShapeMismatch(
            "a and b live on different grids".into(),
        ));
    }
    let (a1, a2) = (partial(a, 0), partial(a, 1));
    let (b1, b2) = (partial(b, 0), partial(b, 1));
    let dom = a.domain();
    let mut j = Field::zeros(dom, 0, ValueShape::Scalar)?;
    for p in dom.valid_nodes() {
        j.node_mut(p)[0] = a1.node(p)[0] * b2.node(p)[0] - a2.node(p)[0] * b1.node(p)[0];
    }
    Ok(j)
}

/// Solves `Δφ = J(a, b)` with `φ = 0` on the circle and measures the ratio.
pub fn wente_solve(a: &Field, b: &Field) -> Result<WenteInstance> {
    let j = jacobian(a, b)?;
    let (phi, rep) = poisson_solve(&j, &Boundary::DirichletZero)?;
    let da = exterior_derivative(a)?.l2_norm();
    let db = exterior_derivative(b)?.l2_norm();
    let dphi = exterior_derivative(&phi)?.l2_norm();
    let denom = da * db;
    let ratio = if denom > 0.0 { dphi / denom } else { 0.0 };
    Ok(WenteInstance {
        a: a.clone(),
        b: b.clone(),
        norms: WenteNorms {
            da,
            db,
            dphi,
            phi_sup: phi.max_norm(),
            ratio,
            solver_iterations: rep.iterations,
        },
        phi,
    })
}

/// One seeded band-limited pair per row.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WenteRow {
    pub seed: u64,
    pub da: f64,
    pub db: f64,
    pub dphi: f64,
    pub ratio: f64,
}

/// Frequencies up to `N/8` keep the pair well resolved.
pub fn band_limit(n: usize) -> usize {
    (n / 8).max(1)
}

/// The pair for `seed`: two independent band-limited scalars.
pub fn random_pair(domain: &Arc<GridDomain>, seed: u64) -> (Field, Field) {
    let k = band_limit(domain.resolution());
    (
        band_limited_scalar(domain, 1.0, k, 2 * seed),
        band_limited_scalar(domain, 1.0, k, 2 * seed + 1),
    )
}

pub fn random_suite(
    domain: &Arc<GridDomain>,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<WenteRow>> {
    seeds
        .into_iter()
        .map(|seed| {
            let (a, b) = random_pair(domain, seed);
            let w = wente_solve(&a, &b)?;
            Ok(WenteRow {
                seed,
                da: w.norms.da,
                db: w.norms.db,
                dphi: w.norms.dphi,
                ratio: w.norms.ratio,
            })
        })
        .collect()
}

pub fn write_csv<W: Write>(mut w: W, rows: &[WenteRow]) -> Result<()> {
    w.write_all(b"seed,da,db,dphi,ratio\n")?;
    for r in rows {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e}",
            r.seed, r.da, r.db, r.dphi, r.ratio
        )?;
    }
    Ok(())
}

fn matrix_dim(f: &Field) -> Result<usize> {
    match f.shape() {
        ValueShape::Matrix(d) => Ok(d),
        s => Err(Error::ShapeMismatch(format!(
            "expected matrix values, got {s:?}"
        ))),
    }
}

/// `2 Σ_nodes Σ_{i,k,l} ⟨ξᵏₗ, dQⁱₖ ∧ dQⁱₗ⟩ hᵐ`.
///
/// The sum runs over `k < l` with the factor `ξᵏₗ − ξˡₖ`, which is the same
/// quantity for skew `ξ` and vanishes identically for symmetric `ξ`.
pub fn duality_pairing(xi: &Field, q: &Field) -> Result<f64> {
    let d = matrix_dim(q)?;
    if xi.degree() != 2
        || q.degree() != 0
        || matrix_dim(xi)? != d
        || !xi.domain().same_grid(q.domain())
    {
        return Err(Error::ShapeMismatch(
            "pairing needs a matrix 2-form and a matrix 0-form of equal size".into(),
        ));
    }
    let dom = q.domain();
    let m = dom.dim();
    let dq = exterior_derivative(q)?;
    let pairs: Vec<(usize, usize, usize)> = {
        let mut v = Vec::new();
        for a in 0..m {
            for b in a + 1..m {
                v.push((a, b, v.len()));
            }
        }
        v
    };
    debug_assert_eq!(pairs.len(), form_count(m, 2));
    let mut total = 0.0;
    for p in dom.valid_nodes() {
        let mut s = 0.0;
        for &(a, b, c) in &pairs {
            let (qa, qb) = (dq.value(p, a), dq.value(p, b));
            let x = xi.value(p, c);
            for k in 0..d {
                for l in k + 1..d {
                    let w: f64 = (0..d)
                        .map(|i| qa[i * d + k] * qb[i * d + l] - qb[i * d + k] * qa[i * d + l])
                        .sum();
                    s += (x[k * d + l] - x[l * d + k]) * w;
                }
            }
        }
        total += s;
    }
    Ok(2.0 * total * dom.cell_volume())
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "branch", rename_all = "snake_case")]
pub enum Smallness {
    /// `‖dQ‖ ≤ 1e-12`: nothing to contract.
    ExactConstancy { dq_norm: f64 },
    Measured {
        pairing: f64,
        dq_norm_sq: f64,
        /// `pairing/‖dQ‖²`; one in the continuum.
        kappa: f64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct SmallnessCertificate {
    pub result: Smallness,
    /// `‖Dξ‖_{M^{2,m−2}}`, all first derivatives of all components of `ξ`.
    pub dxi_morrey: f64,
    /// `[ξ]_BMO` over the dyadic family.
    pub xi_bmo: f64,
    /// `pairing / (‖Dξ‖_M·‖dQ‖²)`: the empirical constant in the contraction
    /// `‖dQ‖² ≤ C‖Dξ‖_M‖dQ‖²`, or zero on the exact-constancy branch.
    pub contraction_constant: f64,
}

/// All first partials of every component of a form, packed as a vector 0-form.
pub fn full_gradient(f: &Field) -> Result<Field> {
    let dom = f.domain();
    let m = dom.dim();
    let stride = f.stride();
    let parts: Vec<Field> = (0..m).map(|a| partial(f, a)).collect();
    let mut out = Field::zeros(dom, 0, ValueShape::Vector(m * stride))?;
    for p in dom.valid_nodes() {
        let o = out.node_mut(p);
        for (a, part) in parts.iter().enumerate() {
            o[a * stride..(a + 1) * stride].copy_from_slice(part.node(p));
        }
    }
    Ok(out)
}

/// All components of a form as a vector 0-form.
fn flatten(f: &Field) -> Result<Field> {
    let dom = f.domain();
    let mut out = Field::zeros(dom, 0, ValueShape::Vector(f.stride()))?;
    for p in dom.valid_nodes() {
        out.node_mut(p).copy_from_slice(f.node(p));
    }
    Ok(out)
}

pub fn smallness_certificate(gauge: &GaugeSolution, q: &QReport) -> Result<SmallnessCertificate> {
    let qf =
        q.q.as_ref()
            .ok_or_else(|| Error::InvalidParameter("Q report carries no field".into()))?;
    let dom = qf.domain();
    let family = BallFamily::dyadic(dom);
    let dxi_morrey = morrey_norm(&full_gradient(&gauge.xi)?, &family)?.value;
    let xi_bmo = bmo_seminorm(&flatten(&gauge.xi)?, &family)?.value;
    let (result, contraction_constant) = if q.dq_norm <= 1e-12 {
        (Smallness::ExactConstancy { dq_norm: q.dq_norm }, 0.0)
    } else {
        let pairing = duality_pairing(&gauge.xi, qf)?;
        let dq2 = q.dq_norm * q.dq_norm;
        let c = if dxi_morrey > 0.0 {
            pairing / (dxi_morrey * dq2)
        } else {
            0.0
        };
        (
            Smallness::Measured {
                pairing,
                dq_norm_sq: dq2,
                kappa: pairing / dq2,
            },
            c,
        )
    };
    Ok(SmallnessCertificate {
        result,
        dxi_morrey,
        xi_bmo,
        contraction_constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    fn disc(n: usize) -> Arc<GridDomain> {
        GridDomain::ball(2, n).unwrap()
    }

    #[test]
    fn identical_factors_have_zero_jacobian() {
        let g = disc(32);
        let (a, _) = random_pair(&g, 3);
        let w = wente_solve(&a, &a).unwrap();
        assert_eq!(w.norms.dphi, 0.0);
        assert_eq!(w.norms.ratio, 0.0);
    }

    #[test]
    fn linear_pair_reproduces_the_radial_solution() {
        let g = disc(128);
        let a = Field::scalar_fn(&g, |x| x[0]);
        let b = Field::scalar_fn(&g, |x| x[1]);
        let w = wente_solve(&a, &b).unwrap();
        let rel = (w.norms.ratio - linear_pair_ratio()).abs() / linear_pair_ratio();
        assert!(rel < 0.02, "ρ = {}", w.norms.ratio);
        for p in g.valid_nodes() {
            let x = g.coords(p);
            let exact = (x[0] * x[0] + x[1] * x[1] - 1.0) / 4.0;
            assert!((w.phi.node(p)[0] - exact).abs() < 1e-3);
        }
    }

    #[test]
    fn adding_a_constant_leaves_phi_unchanged() {
        let g = disc(40);
        let (a, b) = random_pair(&g, 7);
        let shifted = b.map_values(ValueShape::Scalar, |_, v, o| o[0] = v[0] + 3.0);
        let w1 = wente_solve(&a, &b).unwrap();
        let w2 = wente_solve(&a, &shifted).unwrap();
        let diff = w1.phi.sub(&w2.phi).unwrap().max_norm();
        assert!(diff <= 1e-13 * w1.phi.max_norm().max(1.0), "{diff}");
    }

    #[test]
    fn random_ratios_stay_below_the_sharp_constant() {
        let g = disc(64);
        let rows = random_suite(&g, 1..=5).unwrap();
        for r in &rows {
            assert!(
                r.ratio > 0.0 && r.ratio <= sharp_gradient_constant() * 1.05,
                "{r:?}"
            );
        }
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn three_dimensional_inputs_are_rejected() {
        let g = GridDomain::ball(3, 12).unwrap();
        let a = Field::scalar_fn(&g, |x| x[0]);
        assert!(matches!(wente_solve(&a, &a), Err(Error::Unsupported(_))));
    }

    fn sample_q(g: &Arc<GridDomain>) -> Field {
        Field::matrix_fn(g, 3, |x, o| {
            let k = [
                0.0,
                -x[0],
                x[1] * x[0],
                x[0],
                0.0,
                -x[1],
                -x[1] * x[0],
                x[1],
                0.0,
            ];
            o.copy_from_slice(&linalg::expm_skew(&k, 3));
        })
    }

    #[test]
    fn pairing_vanishes_on_trivial_inputs() {
        for m in [2, 3] {
            let g = GridDomain::ball(m, 12).unwrap();
            let xi = Field::zeros(&g, 2, ValueShape::Matrix(3)).unwrap();
            assert_eq!(duality_pairing(&xi, &sample_q(&g)).unwrap(), 0.0);
            let xi = Field::from_fn(&g, 2, ValueShape::Matrix(3), |_, x, o| {
                for (i, v) in o.iter_mut().enumerate() {
                    *v = (i as f64 + x[0]).sin();
                }
            })
            .unwrap();
            let q = Field::matrix_fn(&g, 3, |_, o| o.copy_from_slice(&linalg::identity(3)));
            assert_eq!(duality_pairing(&xi, &q).unwrap(), 0.0);
        }
    }

    #[test]
    fn symmetric_xi_pairs_to_exactly_zero() {
        for m in [2, 3] {
            let g = GridDomain::ball(m, 12).unwrap();
            let xi = Field::from_fn(&g, 2, ValueShape::Matrix(3), |_, x, o| {
                for i in 0..3 {
                    for j in 0..3 {
                        o[i * 3 + j] = (x[0] * (i + j) as f64).cos() + x[1] * (i * j) as f64;
                    }
                }
            })
            .unwrap();
            assert_eq!(duality_pairing(&xi, &sample_q(&g)).unwrap(), 0.0);
            // swapping the matrix indices of a skew ξ flips the sign exactly
            let skew = Field::from_fn(&g, 2, ValueShape::Matrix(3), |_, x, o| {
                let k = [0.0, -x[0], 0.5, x[0], 0.0, -x[1], -0.5, x[1], 0.0];
                for c in 0..o.len() / 9 {
                    o[c * 9..(c + 1) * 9].copy_from_slice(&k);
                }
            })
            .unwrap();
            let swapped = skew.scaled(-1.0);
            let (p1, p2) = (
                duality_pairing(&skew, &sample_q(&g)).unwrap(),
                duality_pairing(&swapped, &sample_q(&g)).unwrap(),
            );
            assert!(p1 != 0.0);
            assert_eq!(p1, -p2);
        }
    }
}
