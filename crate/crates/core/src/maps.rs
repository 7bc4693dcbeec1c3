//! Named analytic map families used by the experiments.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, GridDomain, Shape};
use crate::linalg;
use crate::targets::{MapField, TargetManifold};

/// Inner cutoff of the hedgehog annulus, in grid spacings.
pub const HEDGEHOG_CUTOFF_CELLS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MapSpec {
    /// The base point of the target.
    Constant,
    /// `project(z₀ + t·Σₐ xₐWₐ)` with `Wₐ` tangent at `z₀`.
    LinearProjected { amplitude: f64 },
    /// Like `LinearProjected` plus quadratic and trigonometric terms.
    SmoothProjected { amplitude: f64 },
    /// `x/|x|` on the annulus; sphere(m−1) targets only.
    Hedgehog,
    /// Flow initial data: smooth boundary values plus an interior bump that
    /// vanishes on the unit sphere.
    BoundaryData { amplitude: f64, bump: f64 },
    /// `project(z₀ + t·(band-limited random perturbation))`.
    RandomBandLimited {
        amplitude: f64,
        max_freq: usize,
        seed: u64,
    },
}

impl MapSpec {
    pub fn build(
        &self,
        domain: &Arc<GridDomain>,
        target: &Arc<TargetManifold>,
    ) -> Result<MapField> {
        match *self {
            MapSpec::Constant => constant(domain, target, &target.base_point()),
            MapSpec::LinearProjected { amplitude } => linear_projected(domain, target, amplitude),
            MapSpec::SmoothProjected { amplitude } => smooth_projected(domain, target, amplitude),
            MapSpec::Hedgehog => hedgehog_on(domain, target),
            MapSpec::BoundaryData { amplitude, bump } => {
                boundary_data(domain, target, amplitude, bump)
            }
            MapSpec::RandomBandLimited {
                amplitude,
                max_freq,
                seed,
            } => random_band_limited(domain, target, amplitude, max_freq, seed),
        }
    }
}

/// Orthonormal basis of `T_z𝒩`, from the unit eigenvectors of `T̃(z)`.
pub fn tangent_basis(target: &TargetManifold, z: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = target.ambient_dim();
    let t = target.tangent_projector(z)?;
    let (_, vecs) = linalg::symmetric_eigen(&t, d);
    Ok((d - target.intrinsic_dim()..d)
        .map(|c| vecs.column(c).iter().copied().collect())
        .collect())
}

/// Orthonormal basis of the normal space at `z`.
pub fn normal_basis(target: &TargetManifold, z: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = target.ambient_dim();
    let t = target.tangent_projector(z)?;
    let (_, vecs) = linalg::symmetric_eigen(&t, d);
    Ok((0..d - target.intrinsic_dim())
        .map(|c| vecs.column(c).iter().copied().collect())
        .collect())
}

pub fn constant(
    domain: &Arc<GridDomain>,
    target: &Arc<TargetManifold>,
    point: &[f64],
) -> Result<MapField> {
    let z = target.project(point)?;
    MapField::from_fn(domain, target.clone(), |_, o| o.copy_from_slice(&z))
}

fn projected(
    domain: &Arc<GridDomain>,
    target: &Arc<TargetManifold>,
    perturbation: impl Fn(&[f64], &[Vec<f64>], &mut [f64]),
) -> Result<MapField> {
    let z0 = target.base_point();
    let basis = tangent_basis(target, &z0)?;
    let d = target.ambient_dim();
    let mut p = vec![0.0; d];
    MapField::from_fn(domain, target.clone(), |x, o| {
        p.iter_mut().for_each(|v| *v = 0.0);
        perturbation(x, &basis, &mut p);
        for i in 0..d {
            o[i] = z0[i] + p[i];
        }
    })
}

pub fn linear_projected(
    domain: &Arc<GridDomain>,
    target: &Arc<TargetManifold>,
    amplitude: f64,
) -> Result<MapField> {
    projected(domain, target, |x, w, p| {
        for (a, xa) in x.iter().enumerate() {
            let wa = &w[a % w.len()];
            for i in 0..p.len() {
                p[i] += amplitude * xa * wa[i];
            }
        }
    })
}

pub fn smooth_projected(
    domain: &Arc<GridDomain>,
    target: &Arc<TargetManifold>,
    amplitude: f64,
) -> Result<MapField> {
    projected(domain, target, |x, w, p| {
        let m = x.len();
        let k = w.len();
        for a in 0..m {
            let b = (a + 1) % m;
            let coeff = x[a] + 0.5 * x[a] * x[b] + 0.3 * (PI * x[b]).sin() * x[a];
            let w1 = &w[a % k];
            let w2 = &w[(a + 1) % k];
            for i in 0..p.len() {
                p[i] += amplitude * (coeff * w1[i] + 0.25 * x[b] * x[b] * w2[i]);
            }
        }
    })
}

/// The annulus domain on which the hedgehog is sampled.
pub fn hedgehog_domain(n: usize) -> Result<Arc<GridDomain>> {
    let h = 2.0 / (n - 1) as f64;
    GridDomain::new(
        3,
        n,
        Shape::Annulus {
            inner: HEDGEHOG_CUTOFF_CELLS * h,
        },
    )
}

/// `u(x) = x/|x|` into `S^{m−1}`; the domain must exclude the origin.
pub fn hedgehog_on(domain: &Arc<GridDomain>, target: &Arc<TargetManifold>) -> Result<MapField> {
    if target.ambient_dim() != domain.dim() {
        return Err(Error::Unsupported(format!(
            "hedgehog needs a sphere in R^{}, got {}",
            domain.dim(),
            target.kind().label()
        )));
    }
    if !matches!(domain.shape(), Shape::Annulus { .. }) {
        return Err(Error::Unsupported(
            "hedgehog needs an annulus domain".into(),
        ));
    }
    MapField::from_fn(domain, target.clone(), |x, o| o.copy_from_slice(x))
}

/// Stereographic-type map `(2λx, 1 − λ²|x|²)/(1 + λ²|x|²)` into `S^m`. For
/// `m = 2` it is conformal, hence harmonic; `λ = 1` traces the equator on the
/// unit circle.
pub fn stereographic(domain: &Arc<GridDomain>, lambda: f64) -> Result<MapField> {
    let m = domain.dim();
    let target = Arc::new(TargetManifold::sphere(m)?);
    MapField::from_fn(domain, target, |x, o| stereographic_point(x, lambda, o))
}

pub fn stereographic_point(x: &[f64], lambda: f64, o: &mut [f64]) {
    let r2: f64 = x.iter().map(|v| v * v).sum::<f64>() * lambda * lambda;
    let den = 1.0 + r2;
    for (a, xa) in x.iter().enumerate() {
        o[a] = 2.0 * lambda * xa / den;
    }
    o[x.len()] = (1.0 - r2) / den;
}

/// Smooth boundary values `project(z₀ + t·Σₐ xₐWₐ)` with an interior bump
/// `(1 − |x|²)·b·W` that vanishes on the unit sphere.
pub fn boundary_data(
    domain: &Arc<GridDomain>,
    target: &Arc<TargetManifold>,
    amplitude: f64,
    bump: f64,
) -> Result<MapField> {
    projected(domain, target, |x, w, p| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let k = w.len();
        for (a, xa) in x.iter().enumerate() {
            let wa = &w[a % k];
            for i in 0..p.len() {
                p[i] += amplitude * xa * wa[i];
            }
        }
        let wb = &w[k - 1];
        let s = bump * (1.0 - r2).max(0.0) * (1.0 + 0.5 * x[0]);
        for i in 0..p.len() {
            p[i] += s * wb[i];
        }
    })
}

/// Random trigonometric polynomial `Σ_k c_k cos(πk·x) + s_k sin(πk·x)` over
/// integer frequencies with `max|kₐ| ≤ K` and coefficients uniform in
/// `±amplitude/(1 + |k|²)`. Fully determined by the generator state.
pub struct BandLimited {
    freqs: Vec<[f64; 3]>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl BandLimited {
    pub fn new(dim: usize, max_freq: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let kmax = max_freq as i64;
        let mut freqs = Vec::new();
        let mut cos = Vec::new();
        let mut sin = Vec::new();
        let range = -kmax..=kmax;
        for k0 in range.clone() {
            for k1 in range.clone() {
                for k2 in if dim == 3 { range.clone() } else { 0..=0 } {
                    let k = [k0 as f64, k1 as f64, k2 as f64];
                    let k2n = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
                    let damp = amplitude / (1.0 + k2n);
                    freqs.push(k);
                    cos.push(damp * rng.gen_range(-1.0..1.0));
                    sin.push(damp * rng.gen_range(-1.0..1.0));
                }
            }
        }
        Self { freqs, cos, sin }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((k, c), sn) in self.freqs.iter().zip(&self.cos).zip(&self.sin) {
            let phase = PI * x.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
            s += c * phase.cos() + sn * phase.sin();
        }
        s
    }
}

pub fn band_limited_scalar(
    domain: &Arc<GridDomain>,
    amplitude: f64,
    max_freq: usize,
    seed: u64,
) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = BandLimited::new(domain.dim(), max_freq, amplitude, &mut rng);
    Field::scalar_fn(domain, |x| f.eval(x))
}

pub fn random_band_limited(
    domain: &Arc<GridDomain>,
    target: &Arc<TargetManifold>,
    amplitude: f64,
    max_freq: usize,
    seed: u64,
) -> Result<MapField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = target.ambient_dim();
    let comps: Vec<BandLimited> = (0..d)
        .map(|_| BandLimited::new(domain.dim(), max_freq, amplitude, &mut rng))
        .collect();
    let z0 = target.base_point();
    MapField::from_fn(domain, target.clone(), |x, o| {
        for i in 0..d {
            o[i] = z0[i] + comps[i].eval(x);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tangent_and_normal_bases_split_the_ambient_space() {
        for t in [
            TargetManifold::sphere(2).unwrap(),
            TargetManifold::special_orthogonal(3).unwrap(),
            TargetManifold::grassmann(2, 4).unwrap(),
        ] {
            let z = t.base_point();
            let tb = tangent_basis(&t, &z).unwrap();
            let nb = normal_basis(&t, &z).unwrap();
            assert_eq!(tb.len() + nb.len(), t.ambient_dim());
            for v in &tb {
                assert!(linalg::norm(&t.apply_normal(&z, v)) < 1e-12);
            }
            for v in &nb {
                assert!(linalg::norm(&t.apply_tangent(&z, v)) < 1e-12);
            }
        }
    }

    #[test]
    fn stereographic_unit_circle_is_the_equator() {
        let mut o = [0.0; 3];
        stereographic_point(&[0.6, 0.8], 1.0, &mut o);
        assert!((o[0] - 0.6).abs() < 1e-15 && (o[1] - 0.8).abs() < 1e-15 && o[2].abs() < 1e-15);
    }

    #[test]
    fn band_limited_is_seed_determined() {
        let g = GridDomain::ball(2, 16).unwrap();
        let a = band_limited_scalar(&g, 1.0, 3, 7);
        let b = band_limited_scalar(&g, 1.0, 3, 7);
        let c = band_limited_scalar(&g, 1.0, 3, 8);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn families_land_on_the_target() {
        let g = GridDomain::ball(2, 16).unwrap();
        let specs = [
            MapSpec::Constant,
            MapSpec::LinearProjected { amplitude: 0.3 },
            MapSpec::SmoothProjected { amplitude: 0.3 },
            MapSpec::BoundaryData {
                amplitude: 0.3,
                bump: 0.2,
            },
            MapSpec::RandomBandLimited {
                amplitude: 0.2,
                max_freq: 2,
                seed: 3,
            },
        ];
        for t in [
            TargetManifold::sphere(2).unwrap(),
            TargetManifold::special_orthogonal(2).unwrap(),
            TargetManifold::grassmann(1, 3).unwrap(),
        ] {
            let t = Arc::new(t);
            for s in specs {
                let u = s.build(&g, &t).unwrap();
                assert!(u.on_manifold_residual() < 1e-12, "{s:?}");
            }
        }
        let hd = hedgehog_domain(24).unwrap();
        let s2 = Arc::new(TargetManifold::sphere(2).unwrap());
        let u = MapSpec::Hedgehog.build(&hd, &s2).unwrap();
        assert!(u.on_manifold_residual() < 1e-15);
        assert!(MapSpec::Hedgehog.build(&g, &s2).is_err());
    }
}
