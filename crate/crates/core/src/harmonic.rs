//! Projected harmonic-map heat flow, Noether currents of homogeneous
//! targets, and the BMO-regularity and decay experiments built on them.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gauge::BOUNDARY_STRIP_CELLS;
use crate::grid::{
    codifferential, exterior_derivative, io, poisson_solve, Boundary, Field, GridDomain, ValueShape,
};
use crate::norms::{bmo_seminorm, morrey_values, BallFamily};
use crate::targets::{MapField, TargetKind, TargetManifold};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FlowOptions {
    /// Time step; `h²/(2m)` when absent.
    pub tau: Option<f64>,
    pub tol: f64,
    pub max_steps: usize,
    pub tau_floor: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            tau: None,
            tol: 1e-8,
            max_steps: 200_000,
            tau_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowTermination {
    Converged,
    MaxSteps,
    StepFloor,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowDiagnostics {
    pub termination: FlowTermination,
    pub steps: usize,
    pub rejected_steps: usize,
    pub tau: f64,
    /// `‖T̃(u)Δu‖_{L²}` over interior nodes, before each step and at the end.
    pub residual_history: Vec<f64>,
    /// Discrete Dirichlet energy after each accepted step (entry 0 is the
    /// start); later entries accumulate exactly evaluated decrements.
    pub energy_history: Vec<f64>,
    /// Worst `|u − project(u)|` over the run.
    pub on_manifold_residual: f64,
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub u: MapField,
    pub diagnostics: FlowDiagnostics,
}

impl FlowState {
    pub fn converged(&self) -> bool {
        self.diagnostics.termination == FlowTermination::Converged
    }

    pub fn final_residual(&self) -> f64 {
        *self
            .diagnostics
            .residual_history
            .last()
            .expect("history is never empty")
    }

    /// Writes `u.mff` and `flow.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        io::save(dir.join("u.mff"), self.u.field())?;
        std::fs::write(
            dir.join("flow.json"),
            serde_json::to_string_pretty(&self.diagnostics)?,
        )?;
        Ok(())
    }
}

/// Interior nodes with their `2m` axis neighbours.
struct Stencil {
    nodes: Vec<usize>,
    /// Compact interior index per node, `usize::MAX` elsewhere.
    slot: Vec<usize>,
    /// `(tail, head)` pairs of valid nodes one step apart.
    edges: Vec<(usize, usize)>,
    nbrs: Vec<usize>,
    m2: usize,
    inv_h2: f64,
}

impl Stencil {
    fn new(dom: &GridDomain) -> Self {
        let m = dom.dim();
        let nodes: Vec<usize> = dom.interior_nodes().collect();
        let mut nbrs = Vec::with_capacity(nodes.len() * 2 * m);
        for &p in &nodes {
            for a in 0..m {
                for s in [-1, 1] {
                    nbrs.push(
                        dom.valid_neighbor(p, a, s)
                            .expect("interior nodes have all neighbours"),
                    );
                }
            }
        }
        let mut slot = vec![usize::MAX; dom.num_nodes()];
        for (i, &p) in nodes.iter().enumerate() {
            slot[p] = i;
        }
        let mut edges = Vec::new();
        for p in dom.valid_nodes() {
            for a in 0..m {
                if let Some(q) = dom.valid_neighbor(p, a, 1) {
                    edges.push((p, q));
                }
            }
        }
        let h = dom.spacing();
        Self {
            nodes,
            slot,
            edges,
            nbrs,
            m2: 2 * m,
            inv_h2: 1.0 / (h * h),
        }
    }

    /// Change of the edge energy when interior node `i` moves by `change[i]`,
    /// summed by parts as `h^{m−2}(−h²Σ_p c_p·(Δu)_p + ½Σ_e |c_q − c_p|²)`
    /// so that no two energies are subtracted.
    /// `dots[i]` holds `c_i·(Δu)_i`.
    fn energy_change(&self, dots: &[f64], change: &[f64], d: usize, scale: f64) -> f64 {
        let h2 = 1.0 / self.inv_h2;
        let first: f64 = dots.iter().sum();
        let zero = vec![0.0; d];
        let at = |p: usize| -> &[f64] {
            match self.slot[p] {
                usize::MAX => &zero,
                i => &change[i * d..(i + 1) * d],
            }
        };
        let mut second = 0.0;
        for &(p, q) in &self.edges {
            let (cp, cq) = (at(p), at(q));
            for c in 0..d {
                second += (cq[c] - cp[c]).powi(2);
            }
        }
        scale * (-h2 * first + 0.5 * second)
    }

    /// Five/seven-point `Δu` at interior node number `i`.
    fn laplacian(&self, z: &[f64], d: usize, i: usize, out: &mut [f64]) {
        let p = self.nodes[i];
        let k = self.m2 as f64;
        for c in 0..d {
            let mut s = -k * z[p * d + c];
            for &q in &self.nbrs[i * self.m2..(i + 1) * self.m2] {
                s += z[q * d + c];
            }
            out[c] = s * self.inv_h2;
        }
    }
}

/// `½ h^{m−2} Σ_edges |u_q − u_p|²` over edges between valid nodes; the
/// energy whose gradient is the compact Laplacian.
pub fn dirichlet_energy(u: &MapField) -> f64 {
    let d = u.target().ambient_dim();
    edge_energy(u.domain(), u.field().data(), d)
}

fn edge_energy(dom: &GridDomain, z: &[f64], d: usize) -> f64 {
    let m = dom.dim();
    let mut s = 0.0;
    for p in dom.valid_nodes() {
        for a in 0..m {
            if let Some(q) = dom.valid_neighbor(p, a, 1) {
                for c in 0..d {
                    let v = z[q * d + c] - z[p * d + c];
                    s += v * v;
                }
            }
        }
    }
    0.5 * s * dom.spacing().powi(m as i32 - 2)
}

/// `project(z + τl) − z` for an on-manifold `z`.
///
/// For spheres it is evaluated in the split `l = λz + t`, `t ⊥ z`, as
/// `(τt − εz)/r` with `r = |z + τl|` and `ε = r − 1 − τλ = τ²|t|²/(1 + τλ + r)`,
/// so that near a critical point the change is accurate relative to `τ|t|`
/// rather than to `|z|`. Returns `change·l`, for spheres in the same split.
fn projected_change(
    target: &TargetManifold,
    z: &[f64],
    l: &[f64],
    tau: f64,
    out: &mut [f64],
) -> Result<f64> {
    if let TargetKind::Sphere { .. } = target.kind() {
        let lambda: f64 = z.iter().zip(l).map(|(a, b)| a * b).sum();
        let mut tt = 0.0;
        for c in 0..z.len() {
            out[c] = l[c] - lambda * z[c];
            tt += out[c] * out[c];
        }
        let s = 2.0 * tau * lambda + tau * tau * (lambda * lambda + tt);
        let r = (1.0 + s).sqrt();
        if !(r > 1e-150) || !r.is_finite() {
            return Err(Error::Degenerate(
                "flow step left the projection neighbourhood".into(),
            ));
        }
        let eps = tau * tau * tt / (1.0 + tau * lambda + r);
        for c in 0..z.len() {
            out[c] = (tau * out[c] - eps * z[c]) / r;
        }
        Ok((tau * tt - eps * lambda) / r)
    } else {
        let w: Vec<f64> = z.iter().zip(l).map(|(a, b)| a + tau * b).collect();
        let p = target.project(&w)?;
        for c in 0..z.len() {
            out[c] = p[c] - z[c];
        }
        Ok(out.iter().zip(l).map(|(a, b)| a * b).sum())
    }
}

fn project_into(target: &TargetManifold, v: &mut [f64]) -> Result<()> {
    let z = target.project(v)?;
    v.copy_from_slice(&z);
    Ok(())
}

fn tangent_sq(target: &TargetManifold, z: &[f64], v: &[f64]) -> f64 {
    if let TargetKind::Sphere { .. } = target.kind() {
        let c: f64 = z.iter().zip(v).map(|(a, b)| a * b).sum();
        z.iter().zip(v).map(|(a, b)| (b - c * a).powi(2)).sum()
    } else {
        target.apply_tangent(z, v).iter().map(|x| x * x).sum()
    }
}

/// `u ← project(u + τΔu)` on interior nodes with the boundary layer held
/// fixed. A step is kept only if the Dirichlet energy does not grow;
/// otherwise `τ` halves.
pub fn heat_flow(u0: &MapField, opts: &FlowOptions) -> Result<FlowState> {
    let dom = u0.domain().clone();
    let target = u0.target().clone();
    let d = target.ambient_dim();
    let m = dom.dim();
    let h = dom.spacing();
    let mut tau = opts.tau.unwrap_or(h * h / (2.0 * m as f64));
    if !(tau > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter(
            "heat flow needs τ > 0 and tol > 0".into(),
        ));
    }
    if !(u0.on_manifold_residual() <= crate::targets::ON_MANIFOLD_TOLERANCE) {
        return Err(Error::OffManifold(u0.on_manifold_residual()));
    }
    let st = Stencil::new(&dom);
    let n_int = st.nodes.len();
    let vol = dom.cell_volume();
    let mut z = u0.field().data().to_vec();
    let mut change = vec![0.0; n_int * d];
    let mut dots = vec![0.0; n_int];
    let mut lap = vec![0.0; n_int * d];
    let edge_scale = h.powi(m as i32 - 2);

    let mut energy = edge_energy(&dom, &z, d);
    let mut energies = vec![energy];
    let mut residuals = Vec::new();
    let mut steps = 0;
    let mut rejected = 0;
    let mut worst_proj = u0.on_manifold_residual();
    let termination = loop {
        let mut res = 0.0;
        for i in 0..n_int {
            let l = &mut lap[i * d..(i + 1) * d];
            st.laplacian(&z, d, i, l);
            let p = st.nodes[i];
            res += tangent_sq(&target, &z[p * d..(p + 1) * d], l);
        }
        let res = (res * vol).sqrt();
        residuals.push(res);
        if res <= opts.tol {
            break FlowTermination::Converged;
        }
        if steps >= opts.max_steps {
            break FlowTermination::MaxSteps;
        }
        let accepted = loop {
            for i in 0..n_int {
                let p = st.nodes[i];
                dots[i] = projected_change(
                    &target,
                    &z[p * d..(p + 1) * d],
                    &lap[i * d..(i + 1) * d],
                    tau,
                    &mut change[i * d..(i + 1) * d],
                )?;
            }
            let de = st.energy_change(&dots, &change, d, edge_scale);
            if de <= 0.0 {
                break Some(de);
            }
            rejected += 1;
            tau *= 0.5;
            if tau < opts.tau_floor {
                break None;
            }
        };
        let Some(de) = accepted else {
            break FlowTermination::StepFloor;
        };
        for i in 0..n_int {
            let p = st.nodes[i];
            let v = &mut z[p * d..(p + 1) * d];
            for c in 0..d {
                v[c] += change[i * d + c];
            }
            // keeps the stored point on the target to round-off
            project_into(&target, v)?;
        }
        energy += de;
        energies.push(energy);
        steps += 1;
    };
    let field = Field::from_raw(&dom, 0, ValueShape::Vector(d), z)?;
    let u = MapField::new(field, target)?;
    worst_proj = worst_proj.max(u.on_manifold_residual());
    Ok(FlowState {
        u,
        diagnostics: FlowDiagnostics {
            termination,
            steps,
            rejected_steps: rejected,
            tau,
            residual_history: residuals,
            energy_history: energies,
            on_manifold_residual: worst_proj,
        },
    })
}

/// `Δu` with the compact stencil on interior nodes, zero elsewhere.
pub fn compact_laplacian(u: &MapField) -> Result<Field> {
    let dom = u.domain();
    let d = u.target().ambient_dim();
    let st = Stencil::new(dom);
    let z = u.field().data();
    let mut out = Field::zeros(dom, 0, ValueShape::Vector(d))?;
    for i in 0..st.nodes.len() {
        st.laplacian(z, d, i, out.node_mut(st.nodes[i]));
    }
    Ok(out)
}

/// Warm start for the flow: each ambient component of the boundary layer of
/// `u0` extended by the discrete harmonic (compact-stencil) solve, then
/// projected onto the target. Boundary-layer values are kept.
pub fn harmonic_extension(u0: &MapField) -> Result<MapField> {
    let dom = u0.domain();
    let target = u0.target().clone();
    let d = target.ambient_dim();
    let st = Stencil::new(dom);
    let n_int = st.nodes.len();
    let k = st.m2 as f64;
    let apply = |x: &[f64], out: &mut [f64]| {
        for i in 0..n_int {
            let mut acc = k * x[i];
            for &q in &st.nbrs[i * st.m2..(i + 1) * st.m2] {
                let j = st.slot[q];
                if j != usize::MAX {
                    acc -= x[j];
                }
            }
            out[i] = acc;
        }
    };
    let diag = vec![k; n_int];
    let mut z = u0.field().data().to_vec();
    for c in 0..d {
        let b: Vec<f64> = (0..n_int)
            .map(|i| {
                st.nbrs[i * st.m2..(i + 1) * st.m2]
                    .iter()
                    .filter(|&&q| st.slot[q] == usize::MAX)
                    .map(|&q| z[q * d + c])
                    .sum()
            })
            .collect();
        let (x, _, _) =
            crate::grid::poisson::conjugate_gradient(apply, &diag, &b, 1e-13, 50 * n_int.max(1))?;
        for (i, &p) in st.nodes.iter().enumerate() {
            z[p * d + c] = x[i];
        }
    }
    for &p in &st.nodes {
        project_into(&target, &mut z[p * d..(p + 1) * d])?;
    }
    MapField::new(Field::from_raw(dom, 0, ValueShape::Vector(d), z)?, target)
}

/// `T̃(u)Δu` on interior nodes.
pub fn tension_field(u: &MapField) -> Result<Field> {
    let lap = compact_laplacian(u)?;
    let t = u.target();
    let dom = u.domain();
    let mut out = lap.clone();
    for p in dom.interior_nodes() {
        out.node_mut(p)
            .copy_from_slice(&t.apply_tangent(u.value(p), lap.node(p)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct NoetherCurrents {
    /// `X_j = ⟨M_j u, du⟩`, scalar 1-forms.
    #[serde(skip)]
    pub currents: Vec<Field>,
    /// `‖d*X_j‖_{L²}` over interior nodes.
    pub divergence: Vec<f64>,
    /// `‖⟨M_j u, T̃(u)Δu⟩‖_{L²}` over interior nodes: what `d*X_j` equals up to
    /// discretization.
    pub tension_pairing: Vec<f64>,
    /// Staggered form: edge currents `⟨M_j ū, δu⟩/h = ⟨M_j u_p, u_q⟩/h` with
    /// `d*` the adjoint of the forward difference. Equals `⟨M_j u, Δ_h u⟩`
    /// exactly, the discrete Noether identity.
    pub lattice_divergence: Vec<f64>,
    /// `divergence` restricted to nodes at least `BOUNDARY_STRIP_CELLS·h` from ∂B₁.
    pub divergence_deep: Vec<f64>,
    /// `sup |X_j|/|du|` over nodes with `|du| > 0`.
    pub pointwise_ratio: f64,
    /// `L·sup|u|` with `L = max_j ‖M_j‖_op`, the bound for `pointwise_ratio`.
    pub pointwise_bound: f64,
    /// `‖du‖²_{L²}`.
    pub du_sq: f64,
    pub tension_norm: f64,
}

impl NoetherCurrents {
    pub fn max_divergence(&self) -> f64 {
        self.divergence.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_divergence_deep(&self) -> f64 {
        self.divergence_deep.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_lattice_divergence(&self) -> f64 {
        self.lattice_divergence.iter().copied().fold(0.0, f64::max)
    }
}

pub fn noether_currents(u: &MapField) -> Result<NoetherCurrents> {
    let t = u.target();
    if !t.homogeneous() {
        return Err(Error::Unsupported(
            "Noether currents need a homogeneous target".into(),
        ));
    }
    let dom = u.domain();
    let m = dom.dim();
    let d = t.ambient_dim();
    let du = exterior_derivative(u.field())?;
    let tension = tension_field(u)?;
    let mut currents = Vec::new();
    let mut divergence = Vec::new();
    let mut deep = Vec::new();
    let in_deep = |p: usize| dom.is_interior(p) && dom.is_deep(p, BOUNDARY_STRIP_CELLS);
    let mut pairing = Vec::new();
    let mut ratio = 0.0f64;
    let st = Stencil::new(dom);
    let mut lattice = Vec::new();
    for g in t.killing_generators() {
        let mut sq = 0.0;
        for i in 0..st.nodes.len() {
            let mu = crate::linalg::matvec(g, u.value(st.nodes[i]), d);
            let s: f64 = st.nbrs[i * st.m2..(i + 1) * st.m2]
                .iter()
                .map(|&q| crate::linalg::dot(&mu, u.value(q)))
                .sum();
            sq += (s * st.inv_h2).powi(2);
        }
        lattice.push((sq * dom.cell_volume()).sqrt());
    }
    for g in t.killing_generators() {
        let mut x = Field::zeros(dom, 1, ValueShape::Scalar)?;
        let mut pair_sq = 0.0;
        for p in dom.valid_nodes() {
            let mu = crate::linalg::matvec(g, u.value(p), d);
            for a in 0..m {
                x.value_mut(p, a)[0] = crate::linalg::dot(&mu, du.value(p, a));
            }
            if dom.is_interior(p) {
                pair_sq += crate::linalg::dot(&mu, tension.node(p)).powi(2);
            }
            let dn = du.norm_at(p);
            if dn > 0.0 {
                ratio = ratio.max(x.norm_at(p) / dn);
            }
        }
        let dx = codifferential(&x)?;
        divergence.push(dx.l2_norm_interior());
        deep.push(dx.l2_norm_over(in_deep));
        pairing.push((pair_sq * dom.cell_volume()).sqrt());
        currents.push(x);
    }
    let sup_u = dom
        .valid_nodes()
        .map(|p| crate::linalg::norm(u.value(p)))
        .fold(0.0, f64::max);
    let du_norm = du.l2_norm();
    Ok(NoetherCurrents {
        currents,
        divergence,
        tension_pairing: pairing,
        lattice_divergence: lattice,
        divergence_deep: deep,
        pointwise_ratio: ratio,
        pointwise_bound: t.killing_bound() * sup_u,
        du_sq: du_norm * du_norm,
        tension_norm: tension.l2_norm_interior(),
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConservationReport {
    /// `‖Δu + Σⱼ Xⁱʲ·duʲ‖_{L²}` over interior nodes, with `Xⁱʲ = uⁱduʲ − uʲduⁱ`.
    pub residual: f64,
    /// `residual / ‖du‖²_{L²}`.
    pub relative: f64,
    /// `‖Δu + u|du|²‖_{L²}`, the same quantity before the algebraic identity.
    pub sphere_equation: f64,
    /// Staggered form: edge currents `Xⁱʲ = ūⁱδʲ − ūʲδⁱ` (midpoint `ū`, edge
    /// difference `δ`) contracted with `δʲ` and averaged onto nodes, added to
    /// the compact Laplacian. Consistent with the flow's own discretization,
    /// so it carries no boundary-strip artifact.
    pub lattice_residual: f64,
    pub lattice_relative: f64,
    /// `residual` and `relative` away from the boundary strip.
    pub residual_deep: f64,
    pub relative_deep: f64,
    pub du_sq: f64,
}

/// The conservation-law form of the sphere harmonic-map equation.
pub fn conservation_residual(u: &MapField) -> Result<ConservationReport> {
    if !matches!(u.target().kind(), TargetKind::Sphere { .. }) {
        return Err(Error::Unsupported(
            "the conservation law is implemented for spheres".into(),
        ));
    }
    let dom = u.domain();
    let m = dom.dim();
    let d = u.target().ambient_dim();
    let du = exterior_derivative(u.field())?;
    let lap = compact_laplacian(u)?;
    let (mut r_sq, mut s_sq, mut l_sq, mut deep_sq) = (0.0, 0.0, 0.0, 0.0);
    let st = Stencil::new(dom);
    for i in 0..st.nodes.len() {
        let p = st.nodes[i];
        let z = u.value(p);
        let mut acc = lap.node(p).to_vec();
        for &q in &st.nbrs[i * st.m2..(i + 1) * st.m2] {
            let w = u.value(q);
            let delta_sq: f64 = z.iter().zip(w).map(|(a, b)| (b - a).powi(2)).sum();
            // Σⱼ(ūⁱδʲ − ūʲδⁱ)δʲ = ūⁱ|δ|² since ū·δ = 0 for unit vectors
            for c in 0..d {
                acc[c] += 0.25 * st.inv_h2 * delta_sq * (z[c] + w[c]);
            }
        }
        l_sq += acc.iter().map(|v| v * v).sum::<f64>();
    }
    for p in dom.interior_nodes() {
        let z = u.value(p);
        let l = lap.node(p);
        let grad_sq = du.norm_sq_at(p);
        for i in 0..d {
            let mut contraction = 0.0;
            for j in 0..d {
                for a in 0..m {
                    let (dui, duj) = (du.value(p, a)[i], du.value(p, a)[j]);
                    contraction += (z[i] * duj - z[j] * dui) * duj;
                }
            }
            let r = (l[i] + contraction).powi(2);
            r_sq += r;
            if dom.is_deep(p, BOUNDARY_STRIP_CELLS) {
                deep_sq += r;
            }
            s_sq += (l[i] + z[i] * grad_sq).powi(2);
        }
    }
    let vol = dom.cell_volume();
    let du_norm = du.l2_norm();
    let du_sq = du_norm * du_norm;
    let residual = (r_sq * vol).sqrt();
    let lattice_residual = (l_sq * vol).sqrt();
    let rel = |r: f64| if du_sq > 0.0 { r / du_sq } else { 0.0 };
    Ok(ConservationReport {
        residual,
        relative: rel(residual),
        sphere_equation: (s_sq * vol).sqrt(),
        lattice_residual,
        lattice_relative: rel(lattice_residual),
        residual_deep: (deep_sq * vol).sqrt(),
        relative_deep: rel((deep_sq * vol).sqrt()),
        du_sq,
    })
}

/// `r^{−m}‖df‖²_{L²(B_r(c))}` for each radius.
pub fn normalized_energies(f: &Field, center: &[f64], radii: &[f64]) -> Result<Vec<f64>> {
    let df = exterior_derivative(f)?;
    let balls = radii
        .iter()
        .map(|&r| crate::norms::Ball::new(center, r))
        .collect();
    let family = BallFamily::from_balls(balls);
    let vals = morrey_values(&df, &family)?;
    Ok(vals
        .iter()
        .zip(radii)
        .map(|(v, r)| v * v / (r * r))
        .collect())
}

/// Dyadic radii `2^{−k}·r₀` down to `4h`, in increasing order.
pub fn dyadic_radii(dom: &GridDomain, r0: f64) -> Vec<f64> {
    let mut r = r0;
    let mut out = Vec::new();
    while r >= 4.0 * dom.spacing() {
        out.push(r);
        r *= 0.5;
    }
    out.reverse();
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityReport {
    pub radii: Vec<f64>,
    pub energies: Vec<f64>,
    /// `max_k E(r_k)/E(r_{k+1})`; at most `1 + slack` when monotone.
    pub worst_ratio: f64,
    pub monotone: bool,
}

/// Checks `r ↦ r^{−m}‖dh‖²_{L²(B_r)}` for growth over dyadic balls at the origin.
pub fn monotonicity_check(h: &Field, slack: f64) -> Result<MonotonicityReport> {
    let dom = h.domain();
    let radii = dyadic_radii(dom, 1.0 - dom.spacing());
    let energies = normalized_energies(h, &[0.0; 3], &radii)?;
    let worst = energies
        .windows(2)
        .map(|w| if w[1] > 0.0 { w[0] / w[1] } else { 1.0 })
        .fold(0.0, f64::max);
    Ok(MonotonicityReport {
        radii,
        energies,
        worst_ratio: worst,
        monotone: worst <= 1.0 + slack,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityRow {
    pub label: String,
    pub bmo: f64,
    pub gradient_ratio: Option<f64>,
    pub hessian_ratio: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub rows: Vec<RegularityRow>,
    pub excluded: Vec<String>,
    /// `(ε, sup gradient ratio, sup Hessian ratio)` over members with `[u]_BMO ≤ ε`.
    pub chart: Vec<(f64, Option<f64>, Option<f64>)>,
    pub sup_gradient_ratio: Option<f64>,
    pub sup_hessian_ratio: Option<f64>,
}

fn centered_second(
    z: &[f64],
    d: usize,
    dom: &GridDomain,
    p: usize,
    a: usize,
    b: usize,
    out: &mut [f64],
) -> Option<()> {
    let h2 = dom.spacing().powi(2);
    if a == b {
        let (l, r) = (dom.valid_neighbor(p, a, -1)?, dom.valid_neighbor(p, a, 1)?);
        for c in 0..d {
            out[c] = (z[l * d + c] - 2.0 * z[p * d + c] + z[r * d + c]) / h2;
        }
    } else {
        let corner =
            |sa: isize, sb: isize| dom.valid_neighbor(dom.valid_neighbor(p, a, sa)?, b, sb);
        let (pp, pm, mp, mm) = (
            corner(1, 1)?,
            corner(1, -1)?,
            corner(-1, 1)?,
            corner(-1, -1)?,
        );
        for c in 0..d {
            out[c] = (z[pp * d + c] - z[pm * d + c] - z[mp * d + c] + z[mm * d + c]) / (4.0 * h2);
        }
    }
    Some(())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegularityQuantities {
    pub bmo: f64,
    /// `‖∇u‖_{L∞(B_{1/2})}`.
    pub grad_sup_half: f64,
    /// `‖u − ū‖_{L¹(B₁)}`.
    pub l1_oscillation: f64,
    /// `‖∇²u‖_{L¹(B_{1/2})}`.
    pub hessian_l1_half: f64,
    /// `‖∇u‖²_{L²(B₁)}`.
    pub du_sq: f64,
}

pub fn regularity_quantities(u: &MapField) -> Result<RegularityQuantities> {
    let dom = u.domain();
    let m = dom.dim();
    let d = u.target().ambient_dim();
    let z = u.field().data();
    let du = exterior_derivative(u.field())?;
    let bmo = bmo_seminorm(u.field(), &BallFamily::dyadic(dom))?.value;
    let vol = dom.cell_volume();
    let mut mean = vec![0.0; d];
    let mut count = 0.0;
    for p in dom.valid_nodes() {
        for c in 0..d {
            mean[c] += z[p * d + c];
        }
        count += 1.0;
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let mut l1 = 0.0;
    let mut grad_sup = 0.0f64;
    let mut hess = 0.0;
    let mut buf = vec![0.0; d];
    for p in dom.valid_nodes() {
        l1 += (0..d)
            .map(|c| (z[p * d + c] - mean[c]).powi(2))
            .sum::<f64>()
            .sqrt();
        if dom.radius(p) <= 0.5 {
            grad_sup = grad_sup.max(du.norm_at(p));
            let mut s = 0.0;
            for a in 0..m {
                for b in 0..m {
                    centered_second(z, d, dom, p, a, b, &mut buf).ok_or_else(|| {
                        Error::InvalidParameter("B_{1/2} touches the boundary".into())
                    })?;
                    s += buf.iter().map(|v| v * v).sum::<f64>();
                }
            }
            hess += s.sqrt();
        }
    }
    let dn = du.l2_norm();
    Ok(RegularityQuantities {
        bmo,
        grad_sup_half: grad_sup,
        l1_oscillation: l1 * vol,
        hessian_l1_half: hess * vol,
        du_sq: dn * dn,
    })
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b > 1e-14).then(|| a / b)
}

/// Both Theorem-3 ratios for every converged member, and their suprema over
/// `[u]_BMO ≤ ε` for each `ε` of the grid.
pub fn regularity_experiment(
    members: &[(String, FlowState)],
    eps_grid: &[f64],
) -> Result<RegularityReport> {
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (label, state) in members {
        if !state.converged() {
            excluded.push(label.clone());
            continue;
        }
        let q = regularity_quantities(&state.u)?;
        rows.push(RegularityRow {
            label: label.clone(),
            bmo: q.bmo,
            gradient_ratio: ratio(q.grad_sup_half, q.l1_oscillation),
            hessian_ratio: ratio(q.hessian_l1_half, q.du_sq),
            converged: true,
        });
    }
    let sup = |sel: &dyn Fn(&RegularityRow) -> Option<f64>, eps: f64| {
        rows.iter()
            .filter(|r| r.bmo <= eps)
            .filter_map(sel)
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            })
    };
    let chart = eps_grid
        .iter()
        .map(|&e| {
            (
                e,
                sup(&|r| r.gradient_ratio, e),
                sup(&|r| r.hessian_ratio, e),
            )
        })
        .collect();
    Ok(RegularityReport {
        sup_gradient_ratio: sup(&|r| r.gradient_ratio, f64::INFINITY),
        sup_hessian_ratio: sup(&|r| r.hessian_ratio, f64::INFINITY),
        rows,
        excluded,
        chart,
    })
}

pub fn write_regularity_csv<W: Write>(mut w: W, report: &RegularityReport) -> Result<()> {
    w.write_all(b"label,bmo,gradient_ratio,hessian_ratio\n")?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:e}"));
    for r in &report.rows {
        writeln!(
            w,
            "{},{:e},{},{}",
            r.label,
            r.bmo,
            opt(r.gradient_ratio),
            opt(r.hessian_ratio)
        )?;
    }
    Ok(())
}

/// The regularity family: smooth sphere-valued boundary data of growing size;
/// for `k < 10` the converged maps keep `[u]_BMO` below 0.1.
pub fn regularity_member(domain: &Arc<GridDomain>, k: usize) -> Result<MapField> {
    let target = Arc::new(TargetManifold::sphere(2)?);
    let amp = 0.02 + 0.0045 * k as f64;
    let bump = if k.is_multiple_of(2) {
        0.5 * amp
    } else {
        -0.5 * amp
    };
    crate::maps::boundary_data(domain, &target, amp, bump)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub center: [f64; 3],
    pub radii: Vec<f64>,
    /// `‖du‖²_{L²(B_r)}`.
    pub u_energy: Vec<f64>,
    /// `‖dh‖²_{L²(B_r)}`.
    pub h_energy: Vec<f64>,
    /// Least-squares slope of `log ‖dh‖²(B_r)` against `log r`.
    pub h_exponent: f64,
    pub u_exponent: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub probes: Vec<ProbeRow>,
    /// `‖dv‖²_{L²}` and `‖du‖²_{L²}` for the split `u − ū = h + v`.
    pub dv_sq: f64,
    pub du_sq: f64,
    pub bmo: f64,
    /// `‖dv‖²/(‖du‖²[u]²_BMO)`, zero when the denominator vanishes.
    pub v_constant: f64,
    pub constant_map: bool,
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub const PROBE_CENTERS: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, -0.25, 0.0],
];

/// Splits `u − ū = h + v` with `Δvⁱ = −Σⱼ Xⁱʲ·duʲ`, `v = 0` on the boundary,
/// and tabulates local energies of `u` and of the harmonic part `h` at five
/// probe centres.
pub fn decay_iteration_probe(u: &MapField) -> Result<DecayReport> {
    if !matches!(u.target().kind(), TargetKind::Sphere { .. }) {
        return Err(Error::Unsupported(
            "the decay probe uses the sphere's current family".into(),
        ));
    }
    let dom = u.domain();
    let m = dom.dim();
    let d = u.target().ambient_dim();
    let du = exterior_derivative(u.field())?;
    let bmo = bmo_seminorm(u.field(), &BallFamily::dyadic(dom))?.value;
    let du_norm = du.l2_norm();
    let mut v = Field::zeros(dom, 0, ValueShape::Vector(d))?;
    for i in 0..d {
        let mut rhs = Field::zeros(dom, 0, ValueShape::Scalar)?;
        for p in dom.valid_nodes() {
            let z = u.value(p);
            let mut s = 0.0;
            for j in 0..d {
                for a in 0..m {
                    let (dui, duj) = (du.value(p, a)[i], du.value(p, a)[j]);
                    s -= (z[i] * duj - z[j] * dui) * duj;
                }
            }
            rhs.node_mut(p)[0] = s;
        }
        let (vi, _) = poisson_solve(&rhs, &Boundary::DirichletZero)?;
        for p in dom.valid_nodes() {
            v.node_mut(p)[i] = vi.node(p)[0];
        }
    }
    // the mean is constant, so dh = du − dv
    let h = u.field().sub(&v)?;
    let dv_norm = exterior_derivative(&v)?.l2_norm();
    let mut probes = Vec::new();
    for c in PROBE_CENTERS {
        let cr = (c[0] * c[0] + c[1] * c[1]).sqrt();
        let radii = dyadic_radii(dom, 0.5 * (1.0 - cr));
        let e_u: Vec<f64> = normalized_energies(u.field(), &c, &radii)?
            .iter()
            .zip(&radii)
            .map(|(e, r)| e * r.powi(m as i32))
            .collect();
        let e_h: Vec<f64> = normalized_energies(&h, &c, &radii)?
            .iter()
            .zip(&radii)
            .map(|(e, r)| e * r.powi(m as i32))
            .collect();
        if radii.is_empty() {
            continue;
        }
        let lr: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
        let fit = |e: &[f64]| {
            if e.iter().all(|v| *v > 0.0) && radii.len() >= 2 {
                slope(&lr, &e.iter().map(|v| v.ln()).collect::<Vec<_>>())
            } else {
                f64::NAN
            }
        };
        probes.push(ProbeRow {
            center: c,
            h_exponent: fit(&e_h),
            u_exponent: fit(&e_u),
            radii,
            u_energy: e_u,
            h_energy: e_h,
        });
    }
    let du_sq = du_norm * du_norm;
    let denom = du_sq * bmo * bmo;
    Ok(DecayReport {
        probes,
        dv_sq: dv_norm * dv_norm,
        du_sq,
        bmo,
        v_constant: if denom > 1e-300 {
            dv_norm * dv_norm / denom
        } else {
            0.0
        },
        constant_map: du_sq == 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::maps;

    fn sphere2() -> Arc<TargetManifold> {
        Arc::new(TargetManifold::sphere(2).unwrap())
    }

    #[test]
    fn constant_map_is_a_fixed_point() {
        let g = GridDomain::ball(2, 40).unwrap();
        let u = maps::constant(&g, &sphere2(), &[0.0, 0.0, 1.0]).unwrap();
        let s = heat_flow(&u, &FlowOptions::default()).unwrap();
        assert!(s.converged());
        assert_eq!(s.diagnostics.steps, 0);
        let n = noether_currents(&u).unwrap();
        assert_eq!(n.max_divergence(), 0.0);
        assert_eq!(conservation_residual(&u).unwrap().residual, 0.0);
        let probe = decay_iteration_probe(&u).unwrap();
        assert!(probe.constant_map);
        assert!(probe
            .probes
            .iter()
            .all(|p| p.u_energy.iter().all(|e| *e == 0.0)));
    }

    #[test]
    fn flow_lowers_energy_and_reaches_the_sphere_equation() {
        let g = GridDomain::ball(2, 24).unwrap();
        let u0 = maps::boundary_data(&g, &sphere2(), 0.6, 0.4).unwrap();
        let s = heat_flow(
            &u0,
            &FlowOptions {
                tol: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(s.converged(), "{:?}", s.diagnostics.termination);
        assert!(s
            .diagnostics
            .energy_history
            .windows(2)
            .all(|w| w[1] <= w[0]));
        assert!(s.diagnostics.on_manifold_residual < 1e-8);
        // boundary layer untouched up to the final re-projection
        for p in g.valid_nodes().filter(|&p| !g.is_interior(p)) {
            for (a, b) in s.u.value(p).iter().zip(u0.value(p)) {
                assert!((a - b).abs() <= 4.0 * f64::EPSILON);
            }
        }
        let c = conservation_residual(&s.u).unwrap();
        assert!(c.relative < 1e-2, "{c:?}");
        assert!(c.lattice_relative < c.relative, "{c:?}");
        // staggered Noether identity holds up to the flow tolerance
        let n = noether_currents(&s.u).unwrap();
        assert!(n.max_lattice_divergence() <= n.pointwise_bound * 1.5e-8);
    }

    #[test]
    fn stereographic_map_is_nearly_stationary() {
        let n = [24usize, 48];
        let r: Vec<f64> = n
            .iter()
            .map(|&n| {
                let g = GridDomain::ball(2, n).unwrap();
                let u = maps::stereographic(&g, 1.0).unwrap();
                conservation_residual(&u).unwrap().sphere_equation
            })
            .collect();
        assert!(r[0] / r[1] > 3.0, "{r:?}");
    }

    #[test]
    fn flow_commutes_with_rotations() {
        let g = GridDomain::ball(2, 16).unwrap();
        let t = sphere2();
        let u0 = maps::boundary_data(&g, &t, 0.5, 0.3).unwrap();
        let k = [0.0, -0.4, 0.9, 0.4, 0.0, -0.2, -0.9, 0.2, 0.0];
        let s = linalg::expm_skew(&k, 3);
        let rotated = MapField::new(
            u0.field().map_values(ValueShape::Vector(3), |_, v, o| {
                o.copy_from_slice(&linalg::matvec(&s, v, 3))
            }),
            t.clone(),
        )
        .unwrap();
        for steps in [1, 10, 50] {
            let opts = FlowOptions {
                max_steps: steps,
                ..Default::default()
            };
            let a = heat_flow(&u0, &opts).unwrap();
            let b = heat_flow(&rotated, &opts).unwrap();
            assert_eq!(a.diagnostics.steps, b.diagnostics.steps);
            for p in g.valid_nodes() {
                let ra = linalg::matvec(&s, a.u.value(p), 3);
                for i in 0..3 {
                    assert!((ra[i] - b.u.value(p)[i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn noether_divergence_tracks_the_tension() {
        let g = GridDomain::ball(2, 32).unwrap();
        let u = maps::boundary_data(&g, &sphere2(), 0.7, 0.5).unwrap();
        let n = noether_currents(&u).unwrap();
        assert!(n.pointwise_ratio <= n.pointwise_bound + 1e-12);
        for (dv, tp) in n.divergence.iter().zip(&n.tension_pairing) {
            assert!((dv - tp).abs() <= 0.1 * tp.max(1e-3), "{dv} vs {tp}");
            assert!(*dv <= n.tension_norm * 1.0 + 0.1 * g.spacing() * n.du_sq + 1e-12);
        }
    }

    #[test]
    fn noether_currents_for_other_targets() {
        let g = GridDomain::ball(2, 16).unwrap();
        for t in [
            TargetManifold::special_orthogonal(3).unwrap(),
            TargetManifold::grassmann(1, 3).unwrap(),
        ] {
            let t = Arc::new(t);
            let u = maps::smooth_projected(&g, &t, 0.3).unwrap();
            let n = noether_currents(&u).unwrap();
            assert_eq!(n.divergence.len(), t.killing_generators().len());
            assert!(n.pointwise_ratio <= n.pointwise_bound + 1e-12);
            assert!(conservation_residual(&u).is_err());
        }
    }

    #[test]
    fn harmonic_polynomials_have_growing_normalized_energy() {
        for m in [2, 3] {
            let g = GridDomain::ball(m, 48).unwrap();
            let fields = [
                Field::scalar_fn(&g, |x| x[0]),
                Field::scalar_fn(&g, |x| x[0] * x[0] - x[1] * x[1]),
                Field::scalar_fn(&g, |x| x[0] * x[0] * x[0] - 3.0 * x[0] * x[1] * x[1]),
            ];
            for f in &fields {
                let r = monotonicity_check(f, 0.01).unwrap();
                assert!(r.monotone, "{r:?}");
            }
        }
    }

    #[test]
    fn hessian_of_a_quadratic_is_exact() {
        let g = GridDomain::ball(2, 33).unwrap();
        let u = MapField::from_fn(&g, sphere2(), |x, o| {
            o[0] = 0.1 * x[0];
            o[1] = 0.1 * x[1];
            o[2] = 1.0;
        })
        .unwrap();
        let q = regularity_quantities(&u).unwrap();
        assert!(q.hessian_l1_half > 0.0 && q.grad_sup_half > 0.0);
        let z = Field::vector_fn(&g, 3, |x, o| {
            o[0] = x[0] * x[1];
            o[1] = 0.0;
            o[2] = 0.0;
        });
        let mut buf = [0.0; 3];
        let p = g.nearest_node(&[0.1, -0.2]);
        centered_second(z.data(), 3, &g, p, 0, 1, &mut buf).unwrap();
        assert!((buf[0] - 1.0).abs() < 1e-12);
        centered_second(z.data(), 3, &g, p, 0, 0, &mut buf).unwrap();
        assert!(buf[0].abs() < 1e-12);
    }
}
