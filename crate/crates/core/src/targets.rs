//! Embedded target manifolds `𝒩 ⊂ ℝᵈ` and maps into them.
//!
//! Points are flat `ℝᵈ` vectors. Matrix-valued points (`SO(k)` and the
//! Grassmannian of projections) are stored row-major, so `d = k²` or `d₀²`
//! and the ambient inner product is the Frobenius one.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, GridDomain, ValueShape};
use crate::linalg;

/// Points farther than this from `𝒩` are rejected by the geometric operations.
pub const ON_MANIFOLD_TOLERANCE: f64 = 1e-8;

/// Default first step of the Richardson-extrapolated finite differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetKind {
    /// The unit sphere `Sⁿ ⊂ ℝⁿ⁺¹`.
    Sphere { n: usize },
    /// Rotation matrices in `ℝ^{k²}`.
    SpecialOrthogonal { k: usize },
    /// Rank-`rank` orthogonal projections of `ℝ^{ambient}`, in `ℝ^{ambient²}`.
    Grassmann { rank: usize, ambient: usize },
}

impl TargetKind {
    pub fn label(&self) -> String {
        match *self {
            TargetKind::Sphere { n } => format!("sphere({n})"),
            TargetKind::SpecialOrthogonal { k } => format!("so({k})"),
            TargetKind::Grassmann { rank, ambient } => format!("grassmann({rank},{ambient})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetManifold {
    kind: TargetKind,
    d: usize,
    n: usize,
    generators: Vec<Vec<f64>>,
    killing_bound: f64,
}

impl TargetManifold {
    pub fn new(kind: TargetKind) -> Result<Self> {
        let (d, n) = match kind {
            TargetKind::Sphere { n } if n >= 1 => (n + 1, n),
            TargetKind::SpecialOrthogonal { k } if k >= 2 => (k * k, k * (k - 1) / 2),
            TargetKind::Grassmann { rank, ambient } if rank >= 1 && rank < ambient => {
                (ambient * ambient, rank * (ambient - rank))
            }
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "unsupported target {kind:?}"
                )))
            }
        };
        let generators = build_generators(kind, d);
        let killing_bound = generators
            .iter()
            .map(|m| linalg::operator_norm(m, d))
            .fold(0.0, f64::max);
        Ok(Self {
            kind,
            d,
            n,
            generators,
            killing_bound,
        })
    }

    pub fn sphere(n: usize) -> Result<Self> {
        Self::new(TargetKind::Sphere { n })
    }

    pub fn special_orthogonal(k: usize) -> Result<Self> {
        Self::new(TargetKind::SpecialOrthogonal { k })
    }

    pub fn grassmann(rank: usize, ambient: usize) -> Result<Self> {
        Self::new(TargetKind::Grassmann { rank, ambient })
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn ambient_dim(&self) -> usize {
        self.d
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.n
    }

    /// Every target in the zoo has a parallel second fundamental form.
    pub fn parallel_a(&self) -> bool {
        true
    }

    pub fn homogeneous(&self) -> bool {
        true
    }

    /// Name of the ambient metric, recorded in reports.
    pub fn metric_label(&self) -> &'static str {
        match self.kind {
            TargetKind::Sphere { .. } => "euclidean",
            TargetKind::SpecialOrthogonal { .. } => "frobenius",
            TargetKind::Grassmann { .. } => "frobenius-projection",
        }
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "point of length {} for a target in R^{}",
                z.len(),
                self.d
            )));
        }
        Ok(())
    }

    /// Nearest point of `𝒩`.
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        match self.kind {
            TargetKind::Sphere { .. } => {
                let r = linalg::norm(z);
                if !(r > 1e-300) || !r.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "cannot normalize vector of length {r:e}"
                    )));
                }
                Ok(z.iter().map(|x| x / r).collect())
            }
            TargetKind::SpecialOrthogonal { k } => linalg::polar_rotation(z, k),
            TargetKind::Grassmann { rank, ambient } => {
                let (vals, vecs) = linalg::symmetric_eigen(z, ambient);
                let lo = vals[ambient - rank - 1];
                let hi = vals[ambient - rank];
                let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                if !(hi - lo > 1e-12 * scale) {
                    return Err(Error::Degenerate(format!(
                        "no spectral gap between eigenvalues {lo} and {hi}"
                    )));
                }
                let mut p = vec![0.0; self.d];
                for c in ambient - rank..ambient {
                    let v = vecs.column(c);
                    for i in 0..ambient {
                        for j in 0..ambient {
                            p[i * ambient + j] += v[i] * v[j];
                        }
                    }
                }
                Ok(linalg::sym_part(&p, ambient))
            }
        }
    }

    /// Algebraic distance from `𝒩`: `||z|−1|`, `‖ZᵀZ − I‖`, or
    /// `‖P² − P‖ + ‖P − Pᵀ‖ + |tr P − n|`. Each vanishes exactly on `𝒩` and is
    /// comparable to the true distance nearby.
    pub fn defect(&self, z: &[f64]) -> Result<f64> {
        self.check_len(z)?;
        Ok(match self.kind {
            TargetKind::Sphere { .. } => (linalg::norm(z) - 1.0).abs(),
            TargetKind::SpecialOrthogonal { k } => {
                let g = linalg::matmul_tn(z, z, k);
                let id = linalg::identity(k);
                let off: Vec<f64> = g.iter().zip(&id).map(|(a, b)| a - b).collect();
                let det = linalg::determinant(z, k);
                linalg::norm(&off) + if det < 0.0 { 1.0 } else { 0.0 }
            }
            TargetKind::Grassmann { rank, ambient } => {
                let p2 = linalg::matmul(z, z, ambient);
                let idem: Vec<f64> = p2.iter().zip(z).map(|(a, b)| a - b).collect();
                let skew = linalg::skew_part(z, ambient);
                linalg::norm(&idem)
                    + 2.0 * linalg::norm(&skew)
                    + (linalg::trace(z, ambient) - rank as f64).abs()
            }
        })
    }

    /// `sup`-style residual `|z − project(z)|`.
    pub fn projection_residual(&self, z: &[f64]) -> Result<f64> {
        let p = self.project(z)?;
        Ok(z.iter()
            .zip(&p)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt())
    }

    fn require_on(&self, z: &[f64]) -> Result<()> {
        let r = self.defect(z)?;
        if !(r <= ON_MANIFOLD_TOLERANCE) {
            return Err(Error::OffManifold(r));
        }
        Ok(())
    }

    /// `T̃(z)v` for an on-manifold `z`, without the membership check.
    pub fn apply_tangent(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        match self.kind {
            TargetKind::Sphere { .. } => {
                let c = linalg::dot(z, v);
                v.iter().zip(z).map(|(a, b)| a - c * b).collect()
            }
            TargetKind::SpecialOrthogonal { k } => {
                let w = linalg::skew_part(&linalg::matmul_tn(z, v, k), k);
                linalg::matmul(z, &w, k)
            }
            TargetKind::Grassmann { ambient: a, .. } => {
                let s = linalg::sym_part(v, a);
                // PSQ + QSP = PS + SP − 2PSP
                let ps = linalg::matmul(z, &s, a);
                let sp = linalg::matmul(&s, z, a);
                let psp = linalg::matmul(&ps, z, a);
                (0..self.d).map(|i| ps[i] + sp[i] - 2.0 * psp[i]).collect()
            }
        }
    }

    /// `Ṽ(z)v = v − T̃(z)v`.
    pub fn apply_normal(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let t = self.apply_tangent(z, v);
        v.iter().zip(&t).map(|(a, b)| a - b).collect()
    }

    /// The orthogonal projector onto `T_z𝒩`, as a row-major `d × d` matrix.
    pub fn tangent_projector(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.require_on(z)?;
        Ok(self.tangent_projector_unchecked(z))
    }

    pub fn tangent_projector_unchecked(&self, z: &[f64]) -> Vec<f64> {
        let d = self.d;
        if let TargetKind::Sphere { .. } = self.kind {
            let mut t = linalg::identity(d);
            for i in 0..d {
                for j in 0..d {
                    t[i * d + j] -= z[i] * z[j];
                }
            }
            return t;
        }
        let mut t = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            let col = self.apply_tangent(z, &e);
            for i in 0..d {
                t[i * d + j] = col[i];
            }
            e[j] = 0.0;
        }
        // exact symmetry; the columnwise build can differ in the last ulp
        linalg::sym_part(&t, d)
    }

    pub fn normal_projector(&self, z: &[f64]) -> Result<Vec<f64>> {
        let t = self.tangent_projector(z)?;
        let id = linalg::identity(self.d);
        Ok(id.iter().zip(&t).map(|(a, b)| a - b).collect())
    }

    /// `R̃(z) = T̃(z) − Ṽ(z) = 2T̃(z) − I`.
    pub fn gauss_reflection(&self, z: &[f64]) -> Result<Vec<f64>> {
        let t = self.tangent_projector(z)?;
        let id = linalg::identity(self.d);
        Ok(t.iter().zip(&id).map(|(a, b)| 2.0 * a - b).collect())
    }

    /// `A(X^⊤, Y^⊤)` at `z`.
    pub fn second_fundamental_form(&self, z: &[f64], x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.require_on(z)?;
        self.check_len(x)?;
        self.check_len(y)?;
        Ok(self.second_fundamental_form_unchecked(z, x, y))
    }

    pub fn second_fundamental_form_unchecked(&self, z: &[f64], x: &[f64], y: &[f64]) -> Vec<f64> {
        let xt = self.apply_tangent(z, x);
        let yt = self.apply_tangent(z, y);
        match self.kind {
            TargetKind::Sphere { .. } => {
                let c = linalg::dot(&xt, &yt);
                z.iter().map(|v| -c * v).collect()
            }
            TargetKind::SpecialOrthogonal { k } => {
                // X = ZΩ₁, Y = ZΩ₂  ⇒  A = Z·sym(Ω₁Ω₂)
                let w1 = linalg::matmul_tn(z, &xt, k);
                let w2 = linalg::matmul_tn(z, &yt, k);
                let s = linalg::sym_part(&linalg::matmul(&w1, &w2, k), k);
                linalg::matmul(z, &s, k)
            }
            TargetKind::Grassmann { ambient: a, .. } => {
                // A = Q(XY+YX)Q − P(XY+YX)P
                let xy = linalg::matmul(&xt, &yt, a);
                let yx = linalg::matmul(&yt, &xt, a);
                let s: Vec<f64> = xy.iter().zip(&yx).map(|(p, q)| p + q).collect();
                let q: Vec<f64> = linalg::identity(a)
                    .iter()
                    .zip(z)
                    .map(|(i, p)| i - p)
                    .collect();
                let qsq = linalg::matmul(&linalg::matmul(&q, &s, a), &q, a);
                let psp = linalg::matmul(&linalg::matmul(z, &s, a), z, a);
                qsq.iter().zip(&psp).map(|(p, q)| p - q).collect()
            }
        }
    }

    /// `D_X T̃(z)` by central differences along `t ↦ project(z + tX)`,
    /// Richardson-extrapolated from steps `h₀` and `h₀/2`.
    pub fn tangent_projector_derivative_fd(
        &self,
        z: &[f64],
        x: &[f64],
        h0: f64,
    ) -> Result<Vec<f64>> {
        self.require_on(z)?;
        let xt = self.apply_tangent(z, x);
        let diff = |h: f64| -> Result<Vec<f64>> {
            let zp: Vec<f64> = z.iter().zip(&xt).map(|(a, b)| a + h * b).collect();
            let zm: Vec<f64> = z.iter().zip(&xt).map(|(a, b)| a - h * b).collect();
            let tp = self.tangent_projector_unchecked(&self.project(&zp)?);
            let tm = self.tangent_projector_unchecked(&self.project(&zm)?);
            Ok(tp
                .iter()
                .zip(&tm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect())
        };
        let d1 = diff(h0)?;
        let d2 = diff(0.5 * h0)?;
        Ok(d1
            .iter()
            .zip(&d2)
            .map(|(a, b)| (4.0 * b - a) / 3.0)
            .collect())
    }

    /// Second fundamental form from the finite-difference derivative of `T̃`:
    /// `A(X, Y) = Ṽ·(D_{X^⊤}T̃)(Y^⊤)`.
    pub fn second_fundamental_form_fd(
        &self,
        z: &[f64],
        x: &[f64],
        y: &[f64],
        h0: f64,
    ) -> Result<Vec<f64>> {
        let dt = self.tangent_projector_derivative_fd(z, x, h0)?;
        let yt = self.apply_tangent(z, y);
        let v = linalg::matvec(&dt, &yt, self.d);
        Ok(self.apply_normal(z, &v))
    }

    /// The vector `A(·, X)^♯ v`, characterized by `⟨A(·,X)^♯ v, w⟩ = ⟨A(w, X), v⟩`.
    pub fn shape_adjoint(&self, z: &[f64], x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut e = vec![0.0; self.d];
        let mut out = vec![0.0; self.d];
        for j in 0..self.d {
            e[j] = 1.0;
            out[j] = linalg::dot(&self.second_fundamental_form_unchecked(z, &e, x), v);
            e[j] = 0.0;
        }
        out
    }

    /// Linear Killing generators `M_j`, each a skew `d × d` matrix.
    pub fn killing_generators(&self) -> &[Vec<f64>] {
        &self.generators
    }

    pub fn killing_fields(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.require_on(z)?;
        Ok(self
            .generators
            .iter()
            .map(|m| linalg::matvec(m, z, self.d))
            .collect())
    }

    /// `max_j ‖M_j‖_op`.
    pub fn killing_bound(&self) -> f64 {
        self.killing_bound
    }

    /// A point drawn by projecting a Gaussian-ish ambient sample.
    pub fn random_point<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        loop {
            let z: Vec<f64> = (0..self.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z = match self.kind {
                TargetKind::SpecialOrthogonal { k } => {
                    // keep away from the singular set
                    let mut z = z;
                    for i in 0..k {
                        z[i * k + i] += 1.5;
                    }
                    z
                }
                _ => z,
            };
            if let Ok(p) = self.project(&z) {
                return p;
            }
        }
    }

    /// A uniformly scaled random tangent vector at `z`.
    pub fn random_tangent<R: Rng>(&self, z: &[f64], rng: &mut R) -> Vec<f64> {
        let v: Vec<f64> = (0..self.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        self.apply_tangent(z, &v)
    }

    /// A fixed reference point: the north pole, the identity, or the
    /// projection onto the last `rank` coordinates.
    pub fn base_point(&self) -> Vec<f64> {
        match self.kind {
            TargetKind::Sphere { n } => {
                let mut z = vec![0.0; n + 1];
                z[n] = 1.0;
                z
            }
            TargetKind::SpecialOrthogonal { k } => linalg::identity(k),
            TargetKind::Grassmann { rank, ambient } => {
                let mut p = vec![0.0; ambient * ambient];
                for i in ambient - rank..ambient {
                    p[i * ambient + i] = 1.0;
                }
                p
            }
        }
    }
}

fn rotation_generator(k: usize, a: usize, b: usize) -> Vec<f64> {
    let mut w = vec![0.0; k * k];
    w[a * k + b] = 1.0;
    w[b * k + a] = -1.0;
    w
}

/// Matrix of the linear map `V ↦ f(V)` on row-major `s × s` matrices.
fn operator_matrix(s: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let d = s * s;
    let mut m = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let col = f(&e);
        for i in 0..d {
            m[i * d + j] = col[i];
        }
        e[j] = 0.0;
    }
    m
}

fn build_generators(kind: TargetKind, d: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    match kind {
        TargetKind::Sphere { .. } => {
            for a in 0..d {
                for b in a + 1..d {
                    out.push(rotation_generator(d, b, a));
                }
            }
        }
        TargetKind::SpecialOrthogonal { k } => {
            for a in 0..k {
                for b in a + 1..k {
                    let w = rotation_generator(k, b, a);
                    out.push(operator_matrix(k, |v| linalg::matmul(&w, v, k)));
                }
            }
            for a in 0..k {
                for b in a + 1..k {
                    let w = rotation_generator(k, b, a);
                    out.push(operator_matrix(k, |v| linalg::matmul(v, &w, k)));
                }
            }
        }
        TargetKind::Grassmann { ambient, .. } => {
            for a in 0..ambient {
                for b in a + 1..ambient {
                    let w = rotation_generator(ambient, b, a);
                    out.push(operator_matrix(ambient, |v| {
                        linalg::commutator(&w, v, ambient)
                    }));
                }
            }
        }
    }
    out
}

/// A map `u : B₁ → 𝒩` sampled on a grid.
#[derive(Debug, Clone)]
pub struct MapField {
    u: Field,
    target: Arc<TargetManifold>,
    residual: f64,
}

impl MapField {
    /// Projects every valid node of a vector-valued 0-form onto the target.
    pub fn new(field: Field, target: Arc<TargetManifold>) -> Result<Self> {
        let d = target.ambient_dim();
        if field.degree() != 0 || field.shape() != ValueShape::Vector(d) {
            return Err(Error::ShapeMismatch(format!(
                "map fields are vector({d})-valued 0-forms, got degree {} {:?}",
                field.degree(),
                field.shape()
            )));
        }
        let mut m = Self {
            u: field,
            target,
            residual: 0.0,
        };
        let nodes: Vec<usize> = m.u.domain().valid_nodes().collect();
        m.reproject(&nodes)?;
        Ok(m)
    }

    pub fn from_fn(
        domain: &Arc<GridDomain>,
        target: Arc<TargetManifold>,
        mut f: impl FnMut(&[f64], &mut [f64]),
    ) -> Result<Self> {
        let d = target.ambient_dim();
        let field = Field::from_fn(domain, 0, ValueShape::Vector(d), |_, x, o| f(x, o))?;
        Self::new(field, target)
    }

    pub fn field(&self) -> &Field {
        &self.u
    }

    pub fn into_field(self) -> Field {
        self.u
    }

    pub fn target(&self) -> &Arc<TargetManifold> {
        &self.target
    }

    pub fn domain(&self) -> &Arc<GridDomain> {
        self.u.domain()
    }

    pub fn value(&self, p: usize) -> &[f64] {
        self.u.node(p)
    }

    /// `sup` over valid nodes of `|u − project(u)|`, as of the last projection.
    pub fn on_manifold_residual(&self) -> f64 {
        self.residual
    }

    /// Overwrites the listed nodes with `values` (`d` entries per node) and
    /// re-projects them.
    pub fn set_nodes(&mut self, nodes: &[usize], values: &[f64]) -> Result<()> {
        let d = self.target.ambient_dim();
        if values.len() != nodes.len() * d {
            return Err(Error::ShapeMismatch("node/value count mismatch".into()));
        }
        for (i, &p) in nodes.iter().enumerate() {
            self.u
                .node_mut(p)
                .copy_from_slice(&values[i * d..(i + 1) * d]);
        }
        self.reproject(nodes)
    }

    fn reproject(&mut self, nodes: &[usize]) -> Result<()> {
        let mut worst = 0.0f64;
        for &p in nodes {
            let z = self.target.project(self.u.node(p))?;
            self.u.node_mut(p).copy_from_slice(&z);
        }
        for p in self.u.domain().valid_nodes() {
            worst = worst.max(self.target.projection_residual(self.u.node(p))?);
        }
        self.residual = worst;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zoo() -> Vec<TargetManifold> {
        vec![
            TargetManifold::sphere(1).unwrap(),
            TargetManifold::sphere(2).unwrap(),
            TargetManifold::sphere(4).unwrap(),
            TargetManifold::special_orthogonal(2).unwrap(),
            TargetManifold::special_orthogonal(3).unwrap(),
            TargetManifold::grassmann(1, 2).unwrap(),
            TargetManifold::grassmann(1, 3).unwrap(),
            TargetManifold::grassmann(2, 4).unwrap(),
        ]
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn projection_examples() {
        let s = TargetManifold::sphere(2).unwrap();
        assert_eq!(s.project(&[0.0, 0.0, 2.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        let so = TargetManifold::special_orthogonal(2).unwrap();
        let r = so.project(&[2.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(dist(&r, &[1.0, 0.0, 0.0, 1.0]) < 1e-14);
        let g = TargetManifold::grassmann(1, 2).unwrap();
        let p = g.project(&[0.9, 0.0, 0.0, 0.1]).unwrap();
        assert!(dist(&p, &[1.0, 0.0, 0.0, 0.0]) < 1e-14);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let s = TargetManifold::sphere(2).unwrap();
        assert!(matches!(s.project(&[0.0; 3]), Err(Error::Degenerate(_))));
        let g = TargetManifold::grassmann(1, 2).unwrap();
        assert!(matches!(
            g.project(&[0.5, 0.0, 0.0, 0.5]),
            Err(Error::Degenerate(_))
        ));
        assert!(s.tangent_projector(&[0.0, 0.0, 1.1]).is_err());
        assert!(TargetManifold::grassmann(2, 2).is_err());
        assert!(TargetManifold::sphere(0).is_err());
    }

    #[test]
    fn projectors_are_symmetric_idempotent_with_correct_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in zoo() {
            let d = t.ambient_dim();
            for _ in 0..5 {
                let z = t.random_point(&mut rng);
                let p = t.tangent_projector(&z).unwrap();
                let p2 = linalg::matmul(&p, &p, d);
                assert!(dist(&p2, &p) < 1e-12, "{:?}", t.kind());
                assert!(dist(&p, &linalg::transpose(&p, d)) == 0.0);
                assert!((linalg::trace(&p, d) - t.intrinsic_dim() as f64).abs() < 1e-10);
                let n = t.normal_projector(&z).unwrap();
                let sum: Vec<f64> = p.iter().zip(&n).map(|(a, b)| a + b).collect();
                assert!(dist(&sum, &linalg::identity(d)) < 1e-15);
            }
        }
    }

    #[test]
    fn sphere_tangent_projector_closed_form() {
        let s = TargetManifold::sphere(2).unwrap();
        let z = [0.6, 0.0, 0.8];
        let t = s.tangent_projector(&z).unwrap();
        assert!(linalg::norm(&linalg::matvec(&t, &z, 3)) < 1e-15);
        let v = [0.8, 0.3, -0.6];
        assert!(dist(&linalg::matvec(&t, &v, 3), &v) < 1e-15);
    }

    #[test]
    fn reflection_is_an_involution_with_the_right_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in zoo() {
            let d = t.ambient_dim();
            let z = t.random_point(&mut rng);
            let r = t.gauss_reflection(&z).unwrap();
            assert!(dist(&linalg::matmul(&r, &r, d), &linalg::identity(d)) < 1e-12);
            let (vals, _) = linalg::symmetric_eigen(&r, d);
            let plus = vals.iter().filter(|v| (**v - 1.0).abs() < 1e-10).count();
            let minus = vals.iter().filter(|v| (**v + 1.0).abs() < 1e-10).count();
            assert_eq!((plus, minus), (t.intrinsic_dim(), d - t.intrinsic_dim()));
        }
        let s = TargetManifold::sphere(2).unwrap();
        let r = s.gauss_reflection(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(r, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn sphere_second_fundamental_form_example() {
        let s = TargetManifold::sphere(2).unwrap();
        let a = s
            .second_fundamental_form(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(a, vec![-0.0, -0.0, -1.0]);
    }

    #[test]
    fn second_fundamental_form_is_symmetric_and_kills_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in zoo() {
            for _ in 0..5 {
                let z = t.random_point(&mut rng);
                let x = t.random_tangent(&z, &mut rng);
                let y = t.random_tangent(&z, &mut rng);
                let axy = t.second_fundamental_form(&z, &x, &y).unwrap();
                let ayx = t.second_fundamental_form(&z, &y, &x).unwrap();
                assert!(dist(&axy, &ayx) < 1e-10);
                assert!(
                    linalg::norm(&t.apply_tangent(&z, &axy)) < 1e-12,
                    "A is normal"
                );
                let w: Vec<f64> = (0..t.ambient_dim())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect();
                let nrm = t.apply_normal(&z, &w);
                assert!(linalg::norm(&t.second_fundamental_form(&z, &x, &nrm).unwrap()) < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in zoo() {
            for _ in 0..3 {
                let z = t.random_point(&mut rng);
                let x = t.random_tangent(&z, &mut rng);
                let y = t.random_tangent(&z, &mut rng);
                let exact = t.second_fundamental_form(&z, &x, &y).unwrap();
                let fd = t.second_fundamental_form_fd(&z, &x, &y, FD_STEP).unwrap();
                let scale = linalg::norm(&x) * linalg::norm(&y);
                assert!(dist(&exact, &fd) <= 1e-6 * scale, "{:?}", t.kind());

                // dT̃[X]v = A(·,X)^♯ v + A(v, X) for arbitrary ambient v
                let v: Vec<f64> = (0..t.ambient_dim())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect();
                let dt = t.tangent_projector_derivative_fd(&z, &x, FD_STEP).unwrap();
                let lhs = linalg::matvec(&dt, &v, t.ambient_dim());
                let a1 = t.shape_adjoint(&z, &x, &v);
                let a2 = t.second_fundamental_form(&z, &v, &x).unwrap();
                let rhs: Vec<f64> = a1.iter().zip(&a2).map(|(p, q)| p + q).collect();
                let scale = linalg::norm(&x) * linalg::norm(&v);
                assert!(
                    dist(&lhs, &rhs) <= 1e-6 * scale,
                    "{:?}: {}",
                    t.kind(),
                    dist(&lhs, &rhs)
                );
            }
        }
    }

    #[test]
    fn second_fundamental_form_is_parallel() {
        // (∇_W A)(X, Y) with X, Y extended by T̃X₀, T̃Y₀ (which are parallel at z,
        // since T̃ dT̃ T̃ = 0): only Ṽ·d/dt A survives.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in zoo() {
            let z = t.random_point(&mut rng);
            let w = t.random_tangent(&z, &mut rng);
            let x = t.random_tangent(&z, &mut rng);
            let y = t.random_tangent(&z, &mut rng);
            let along = |s: f64| {
                let zs: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a + s * b).collect();
                let zs = t.project(&zs).unwrap();
                t.second_fundamental_form_unchecked(&zs, &x, &y)
            };
            let diff = |h: f64| -> Vec<f64> {
                along(h)
                    .iter()
                    .zip(&along(-h))
                    .map(|(a, b)| (a - b) / (2.0 * h))
                    .collect()
            };
            let (d1, d2) = (diff(FD_STEP), diff(0.5 * FD_STEP));
            let dd: Vec<f64> = d1
                .iter()
                .zip(&d2)
                .map(|(a, b)| (4.0 * b - a) / 3.0)
                .collect();
            let nabla = t.apply_normal(&z, &dd);
            let scale = linalg::norm(&w) * linalg::norm(&x) * linalg::norm(&y);
            assert!(
                linalg::norm(&nabla) <= 1e-6 * scale,
                "{:?}: {}",
                t.kind(),
                linalg::norm(&nabla)
            );
        }
    }

    #[test]
    fn killing_generator_counts_and_examples() {
        assert_eq!(
            TargetManifold::sphere(2)
                .unwrap()
                .killing_generators()
                .len(),
            3
        );
        assert_eq!(
            TargetManifold::special_orthogonal(3)
                .unwrap()
                .killing_generators()
                .len(),
            6
        );
        assert_eq!(
            TargetManifold::grassmann(1, 3)
                .unwrap()
                .killing_generators()
                .len(),
            3
        );
        let s = TargetManifold::sphere(2).unwrap();
        // the (1,2)-plane rotation generator is the first one
        let m = &s.killing_generators()[0];
        assert_eq!(linalg::matvec(m, &[0.0, 0.0, 1.0], 3), vec![0.0, 0.0, 0.0]);
        assert_eq!(linalg::matvec(m, &[1.0, 0.0, 0.0], 3), vec![0.0, 1.0, 0.0]);
        assert!((s.killing_bound() - 1.0).abs() < 1e-12);
        let g = TargetManifold::grassmann(1, 3).unwrap();
        assert!((g.killing_bound() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn killing_fields_are_tangent_and_flows_stay_on_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in zoo() {
            let d = t.ambient_dim();
            for m in t.killing_generators() {
                let skew = linalg::sym_part(m, d);
                assert_eq!(linalg::norm(&skew), 0.0);
            }
            let z = t.random_point(&mut rng);
            for f in t.killing_fields(&z).unwrap() {
                assert!(linalg::norm(&t.apply_normal(&z, &f)) <= 1e-10);
            }
            for m in t.killing_generators() {
                for s in [-1.0, -0.3, 0.5, 1.0] {
                    let tm: Vec<f64> = m.iter().map(|v| s * v).collect();
                    let zt = linalg::matvec(&linalg::expm(&tm, d), &z, d);
                    let back = t.project(&zt).unwrap();
                    assert!(dist(&back, &zt) <= 1e-10, "{:?}", t.kind());
                }
            }
        }
    }

    #[test]
    fn map_field_is_projected_on_construction() {
        let g = GridDomain::ball(2, 12).unwrap();
        let t = Arc::new(TargetManifold::sphere(2).unwrap());
        let u = MapField::from_fn(&g, t, |x, o| o.copy_from_slice(&[x[0], x[1], 2.0])).unwrap();
        assert!(u.on_manifold_residual() <= 1e-15);
        for p in g.valid_nodes() {
            assert!((linalg::norm(u.value(p)) - 1.0).abs() < 1e-15);
        }
        let bad = Field::zeros(&g, 0, ValueShape::Vector(2)).unwrap();
        assert!(MapField::new(bad, u.target().clone()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_is_idempotent_in_a_tube(seed in any::<u64>(), which in 0usize..8, eps in 0.0f64..0.2) {
            let t = &zoo()[which];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = t.random_point(&mut rng);
            let v: Vec<f64> = (0..t.ambient_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nv = linalg::norm(&v).max(1e-12);
            let zz: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + eps * b / nv).collect();
            let p = t.project(&zz).unwrap();
            let pp = t.project(&p).unwrap();
            prop_assert!(dist(&p, &pp) <= 1e-12);
            prop_assert!(t.defect(&p).unwrap() <= 1e-12);
        }
    }
}
