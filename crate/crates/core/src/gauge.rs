//! Coulomb gauge for a connection form, the conjugated reflection
//! `Q = PᵀRP`, and the moving frames it yields.
//!
//! The gauge is found by minimizing a lattice energy. Each grid edge
//! `e = (p, q)` between valid nodes carries the transport
//! `U_e = exp(h·(ω_p + ω_q)/2)` along its axis. The gauged link is
//! `W_e = P_pᵀ U_e P_q`, and the energy is
//!
//! ```text
//! E(P) = h^{m−2} Σ_e |W_e − I|²  ≈  ‖PᵀdP + PᵀωP‖²_{L²}.
//! ```
//!
//! With `A_e = skew(W_e)/h`, the gradient of `E` under `P_p ↦ P_p·exp(η_p)`
//! is `2hᵐ·G_p`, where `G_p = (1/h)(Σ_{e into p} A_e − Σ_{e out of p} A_e)` is
//! the staggered codifferential `d*A`. Steps use `ζ = L⁻¹G`, with `L` the
//! Neumann graph Laplacian of the edge set. This step is exact for the
//! linearized problem, so `τ = 1` is the natural first trial.

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::connection::{reflection_field, tangent_projector_field, ConnectionForm};
use crate::error::{Error, Result};
use crate::grid::poisson::conjugate_gradient;
use crate::grid::{
    codifferential, exterior_derivative, hodge::hodge_potential, io, Field, GridDomain, ValueShape,
};
use crate::linalg;
use crate::norms::{morrey_norm, BallFamily};
use crate::targets::MapField;

/// Width, in cells, of the boundary strip left out of the "deep" residuals.
pub const BOUNDARY_STRIP_CELLS: f64 = 3.0;

/// Frames are refused when `sup|Q − Q̄|` exceeds this by default.
pub const DEFAULT_Q_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GaugeOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub initial_step: f64,
    pub backtrack: f64,
    pub min_step: f64,
}

impl Default for GaugeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 5000,
            initial_step: 1.0,
            backtrack: 0.5,
            min_step: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, Serialize)]
pub struct GaugeDiagnostics {
    pub termination: Termination,
    pub iterations: usize,
    /// Lattice energy after each accepted step (entry 0 is the initial value).
    /// Entries after the first accumulate exactly evaluated decrements.
    pub energy_history: Vec<f64>,
    /// Energy recomputed from scratch at the final iterate.
    pub final_energy: f64,
    /// `‖G‖_{L²}`: the staggered `d*A` that the descent drives to zero.
    pub coulomb_residual: f64,
    /// `max(1, ‖ω‖_{L²})`; convergence means `coulomb_residual ≤ tol·scale`.
    pub coulomb_scale: f64,
    /// `‖d*A_gauged‖_{L²}` with the collocated finite-difference `d*`.
    pub nodal_coulomb_residual: f64,
    /// The same, restricted to nodes at least three cells from the boundary.
    pub nodal_coulomb_residual_deep: f64,
    /// Worst nodal `|PᵀP − I|`.
    pub orthogonality_residual: f64,
    /// `‖d*ξ − A_gauged‖_{L²}`.
    pub hodge_residual: f64,
    /// Largest symmetric part removed from the nodal `PᵀdP + PᵀωP`.
    pub skew_defect: f64,
}

impl GaugeDiagnostics {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

#[derive(Debug, Clone)]
pub struct GaugeSolution {
    /// `SO(d)`-valued 0-form.
    pub p: Field,
    /// `PᵀdP + PᵀωP`, skew part.
    pub a_gauged: Field,
    /// Matrix-valued 2-form with `d*ξ ≈ A_gauged` and `ξ = 0` on the boundary.
    pub xi: Field,
    pub diagnostics: GaugeDiagnostics,
}

impl GaugeSolution {
    /// Writes `P.mff`, `A.mff`, `xi.mff` and `gauge.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        io::save(dir.join("P.mff"), &self.p)?;
        io::save(dir.join("A.mff"), &self.a_gauged)?;
        io::save(dir.join("xi.mff"), &self.xi)?;
        std::fs::write(
            dir.join("gauge.json"),
            serde_json::to_string_pretty(&self.diagnostics)?,
        )?;
        Ok(())
    }
}

/// Edges, transports and the graph Laplacian of the valid-node lattice.
pub struct Lattice {
    dom: Arc<GridDomain>,
    d: usize,
    /// `(tail, head)` node pairs.
    edges: Vec<(usize, usize)>,
    links: Vec<Vec<f64>>,
    /// Compact index of each valid node, `usize::MAX` elsewhere.
    slot: Vec<usize>,
    nodes: Vec<usize>,
    degree: Vec<f64>,
    /// CSR adjacency over compact indices.
    adj_start: Vec<usize>,
    adj: Vec<usize>,
}

impl Lattice {
    pub fn new(omega: &ConnectionForm) -> Self {
        let w = omega.field();
        let dom = w.domain().clone();
        let d = omega.matrix_dim();
        let h = dom.spacing();
        let m = dom.dim();
        let nodes: Vec<usize> = dom.valid_nodes().collect();
        let mut slot = vec![usize::MAX; dom.num_nodes()];
        for (i, &p) in nodes.iter().enumerate() {
            slot[p] = i;
        }
        let mut edges = Vec::new();
        let mut links = Vec::new();
        let mut k = vec![0.0; d * d];
        for &p in &nodes {
            for a in 0..m {
                if let Some(q) = dom.valid_neighbor(p, a, 1) {
                    let (wp, wq) = (w.value(p, a), w.value(q, a));
                    for i in 0..d * d {
                        k[i] = 0.5 * h * (wp[i] + wq[i]);
                    }
                    edges.push((p, q));
                    links.push(linalg::expm_skew(&k, d));
                }
            }
        }
        let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for &(p, q) in &edges {
            nbrs[slot[p]].push(slot[q]);
            nbrs[slot[q]].push(slot[p]);
        }
        let mut adj_start = vec![0];
        let mut adj = Vec::new();
        let mut degree = Vec::with_capacity(nodes.len());
        for list in &nbrs {
            adj.extend_from_slice(list);
            adj_start.push(adj.len());
            degree.push(list.len() as f64);
        }
        Self {
            dom,
            d,
            edges,
            links,
            slot,
            nodes,
            degree,
            adj_start,
            adj,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    fn gauged_link(&self, p: &Field, e: usize) -> Vec<f64> {
        let (a, b) = self.edges[e];
        let d = self.d;
        let up = linalg::matmul(&self.links[e], p.node(b), d);
        linalg::matmul_tn(p.node(a), &up, d)
    }

    /// `E(P) = h^{m−2} Σ_e |W_e − I|²`.
    pub fn energy(&self, p: &Field) -> f64 {
        let d = self.d;
        let scale = self.dom.spacing().powi(self.dom.dim() as i32 - 2);
        let mut s = 0.0;
        for e in 0..self.edges.len() {
            let w = self.gauged_link(p, e);
            for i in 0..d {
                for j in 0..d {
                    let v = w[i * d + j] - if i == j { 1.0 } else { 0.0 };
                    s += v * v;
                }
            }
        }
        scale * s
    }

    /// `G = d*A` on the lattice, one skew matrix per valid node (compact order).
    pub fn gradient(&self, p: &Field) -> Vec<Vec<f64>> {
        let d = self.d;
        let h = self.dom.spacing();
        let mut g = vec![vec![0.0; d * d]; self.nodes.len()];
        for e in 0..self.edges.len() {
            let w = self.gauged_link(p, e);
            let a = linalg::skew_part(&w, d);
            let (t, hd) = (self.slot[self.edges[e].0], self.slot[self.edges[e].1]);
            for i in 0..d * d {
                let v = a[i] / (h * h);
                g[t][i] -= v;
                g[hd][i] += v;
            }
        }
        g
    }

    fn l2(&self, g: &[Vec<f64>]) -> f64 {
        let vol = self.dom.cell_volume();
        (g.iter().flat_map(|v| v.iter()).map(|x| x * x).sum::<f64>() * vol).sqrt()
    }

    /// `L⁻¹g` componentwise on the strictly upper entries, mean-free.
    fn precondition(&self, g: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = self.d;
        let n = self.nodes.len();
        let h2 = self.dom.spacing().powi(2);
        let diag: Vec<f64> = self.degree.iter().map(|v| v.max(1.0) / h2).collect();
        let apply = |x: &[f64], out: &mut [f64]| {
            for i in 0..n {
                let mut s = self.degree[i] * x[i];
                for &j in &self.adj[self.adj_start[i]..self.adj_start[i + 1]] {
                    s -= x[j];
                }
                out[i] = s / h2;
            }
        };
        let mut z = vec![vec![0.0; d * d]; n];
        for i in 0..d {
            for j in i + 1..d {
                let mut b: Vec<f64> = g.iter().map(|v| v[i * d + j]).collect();
                let mean = b.iter().sum::<f64>() / n as f64;
                b.iter_mut().for_each(|v| *v -= mean);
                let sol = match conjugate_gradient(apply, &diag, &b, 1e-8, 20 * n.max(100)) {
                    Ok((x, _, _)) => x,
                    // fall back to a Jacobi step; the line search keeps descent safe
                    Err(_) => b.iter().zip(&diag).map(|(v, dg)| v / dg).collect(),
                };
                let mean = sol.iter().sum::<f64>() / n as f64;
                for (k, v) in sol.iter().enumerate() {
                    z[k][i * d + j] = v - mean;
                    z[k][j * d + i] = -(v - mean);
                }
            }
        }
        z
    }

    /// Exact energy change for `P_p ↦ P_p·X_p`, from `X_p − I`.
    fn energy_change(&self, p: &Field, dx: &[Vec<f64>]) -> f64 {
        let d = self.d;
        let scale = self.dom.spacing().powi(self.dom.dim() as i32 - 2);
        let mut s = 0.0;
        for e in 0..self.edges.len() {
            let w = self.gauged_link(p, e);
            let (ep, eq) = (
                &dx[self.slot[self.edges[e].0]],
                &dx[self.slot[self.edges[e].1]],
            );
            // W' − W = E_pᵀW + W E_q + E_pᵀ W E_q
            let a = linalg::matmul_tn(ep, &w, d);
            let b = linalg::matmul(&w, eq, d);
            let c = linalg::matmul(&a, eq, d);
            for i in 0..d {
                for j in 0..d {
                    let k = i * d + j;
                    let delta = a[k] + b[k] + c[k];
                    let wm = w[k] - if i == j { 1.0 } else { 0.0 };
                    s += delta * (delta + 2.0 * wm);
                }
            }
        }
        scale * s
    }
}

/// `exp(K) − I` without cancellation, by a Taylor series on `K/2ˢ` and the
/// doubling rule `F(2K) = 2F(K) + F(K)²`.
pub fn expm_minus_identity(k: &[f64], d: usize) -> Vec<f64> {
    let norm = linalg::norm(k);
    let mut s = 0;
    while norm / f64::powi(2.0, s) > 0.25 {
        s += 1;
    }
    let ks: Vec<f64> = k.iter().map(|v| v / f64::powi(2.0, s)).collect();
    let mut term = ks.clone();
    let mut f = ks.clone();
    for n in 2..20 {
        term = linalg::matmul(&term, &ks, d);
        term.iter_mut().for_each(|v| *v /= n as f64);
        let size = linalg::norm(&term);
        for (a, b) in f.iter_mut().zip(&term) {
            *a += b;
        }
        if size <= 1e-18 * linalg::norm(&f).max(f64::MIN_POSITIVE) {
            break;
        }
    }
    for _ in 0..s {
        let f2 = linalg::matmul(&f, &f, d);
        for (a, b) in f.iter_mut().zip(&f2) {
            *a = 2.0 * *a + b;
        }
    }
    f
}

fn orthogonality_residual(p: &Field, d: usize) -> f64 {
    let id = linalg::identity(d);
    p.domain()
        .valid_nodes()
        .map(|q| {
            let g = linalg::matmul_tn(p.node(q), p.node(q), d);
            g.iter()
                .zip(&id)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// One Newton–Schulz sweep `P ← P(3I − PᵀP)/2`, enough to restore
/// orthogonality after a product with a numerically orthogonal factor.
fn reorthonormalize(p: &mut Field, d: usize) {
    let dom = p.domain().clone();
    for q in dom.valid_nodes() {
        let v = p.node(q).to_vec();
        let mut g = linalg::matmul_tn(&v, &v, d);
        g.iter_mut().for_each(|x| *x *= -0.5);
        for i in 0..d {
            g[i * d + i] += 1.5;
        }
        p.node_mut(q).copy_from_slice(&linalg::matmul(&v, &g, d));
    }
}

/// `PᵀdP + PᵀωP` with the collocated difference operators, skew part, plus
/// the largest symmetric part removed.
pub fn gauged_connection(p: &Field, omega: &ConnectionForm) -> Result<(Field, f64)> {
    let d = omega.matrix_dim();
    let dp = exterior_derivative(p)?;
    let dom = p.domain().clone();
    let m = dom.dim();
    let mut a = Field::zeros(&dom, 1, ValueShape::Matrix(d))?;
    let mut defect = 0.0f64;
    for q in dom.valid_nodes() {
        let pq = p.node(q);
        for ax in 0..m {
            let t1 = linalg::matmul_tn(pq, dp.value(q, ax), d);
            let t2 = linalg::matmul(&linalg::matmul_tn(pq, omega.field().value(q, ax), d), pq, d);
            let sum: Vec<f64> = t1.iter().zip(&t2).map(|(x, y)| x + y).collect();
            let sym = linalg::sym_part(&sum, d);
            defect = defect.max(sym.iter().fold(0.0f64, |acc, v| acc.max(v.abs())));
            a.value_mut(q, ax)
                .copy_from_slice(&linalg::skew_part(&sum, d));
        }
    }
    Ok((a, defect))
}

/// Minimizes the lattice gauge energy from `P = I` and recovers `ξ`.
pub fn coulomb_gauge(omega: &ConnectionForm, opts: &GaugeOptions) -> Result<GaugeSolution> {
    if !(opts.tol > 0.0)
        || !(opts.backtrack > 0.0 && opts.backtrack < 1.0)
        || !(opts.initial_step > 0.0)
    {
        return Err(Error::InvalidParameter(format!(
            "bad gauge options {opts:?}"
        )));
    }
    let d = omega.matrix_dim();
    let dom = omega.field().domain().clone();
    let id = linalg::identity(d);
    let mut p = Field::matrix_fn(&dom, d, |_, o| o.copy_from_slice(&id));
    let lat = Lattice::new(omega);
    let scale = omega.field().l2_norm().max(1.0);

    let mut energy = lat.energy(&p);
    let mut history = vec![energy];
    let mut g = lat.gradient(&p);
    let mut gnorm = lat.l2(&g);
    let mut tau = opts.initial_step;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    while iterations < opts.max_iters {
        if gnorm <= opts.tol * scale {
            termination = Termination::Converged;
            break;
        }
        let zeta = lat.precondition(&g);
        let mut accepted = None;
        while tau >= opts.min_step {
            let dx: Vec<Vec<f64>> = zeta
                .iter()
                .map(|z| {
                    let k: Vec<f64> = z.iter().map(|v| -tau * v).collect();
                    expm_minus_identity(&k, d)
                })
                .collect();
            let de = lat.energy_change(&p, &dx);
            if de < 0.0 {
                accepted = Some((dx, de));
                break;
            }
            tau *= opts.backtrack;
        }
        let Some((dx, de)) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };
        for (i, &q) in lat.nodes.iter().enumerate() {
            let mut x = dx[i].clone();
            for k in 0..d {
                x[k * d + k] += 1.0;
            }
            let v = linalg::matmul(p.node(q), &x, d);
            p.node_mut(q).copy_from_slice(&v);
        }
        reorthonormalize(&mut p, d);
        energy += de;
        history.push(energy);
        iterations += 1;
        tau = (tau / opts.backtrack).min(opts.initial_step);
        g = lat.gradient(&p);
        gnorm = lat.l2(&g);
    }
    if termination == Termination::MaxIterations && gnorm <= opts.tol * scale {
        termination = Termination::Converged;
    }

    let (a_gauged, skew_defect) = gauged_connection(&p, omega)?;
    let div = codifferential(&a_gauged)?;
    let nodal_coulomb_residual = div.l2_norm();
    let nodal_coulomb_residual_deep = div.l2_norm_over(|n| dom.is_deep(n, BOUNDARY_STRIP_CELLS));
    let hp = hodge_potential(&a_gauged)?;
    Ok(GaugeSolution {
        diagnostics: GaugeDiagnostics {
            termination,
            iterations,
            energy_history: history,
            final_energy: lat.energy(&p),
            coulomb_residual: gnorm,
            coulomb_scale: scale,
            nodal_coulomb_residual,
            nodal_coulomb_residual_deep,
            orthogonality_residual: orthogonality_residual(&p, d),
            hodge_residual: hp.reconstruction_residual,
            skew_defect,
        },
        p,
        a_gauged,
        xi: hp.xi,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct QReport {
    /// `‖dQ‖_{L²}`.
    pub dq_norm: f64,
    /// `sup_x |Q(x) − Q̄|` with `Q̄` the average over valid nodes.
    pub sup_deviation: f64,
    /// `‖dQ − [Q, d*ξ]‖_{L²}`.
    pub structure_residual: f64,
    /// `‖dQ − [Q, A_gauged]‖_{L²}`: the same equation before the Hodge step.
    pub structure_residual_gauged: f64,
    #[serde(skip)]
    pub q: Option<Field>,
}

/// `Q = PᵀRP` and its constancy diagnostics; `R` must be a nodewise
/// symmetric orthogonal matrix field.
pub fn q_field(gauge: &GaugeSolution, r: &Field) -> Result<QReport> {
    let p = &gauge.p;
    let d = match p.shape() {
        ValueShape::Matrix(d) => d,
        _ => unreachable!(),
    };
    if r.degree() != 0 || r.shape() != p.shape() || !r.domain().same_grid(p.domain()) {
        return Err(Error::ShapeMismatch(
            "R must be a d×d matrix 0-form on the gauge grid".into(),
        ));
    }
    let dom = p.domain().clone();
    let mut q = Field::zeros(&dom, 0, ValueShape::Matrix(d))?;
    let mut mean = vec![0.0; d * d];
    let mut count = 0.0;
    for n in dom.valid_nodes() {
        let v = linalg::matmul(&linalg::matmul_tn(p.node(n), r.node(n), d), p.node(n), d);
        for (a, b) in mean.iter_mut().zip(&v) {
            *a += b;
        }
        count += 1.0;
        q.node_mut(n).copy_from_slice(&v);
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let sup_deviation = dom
        .valid_nodes()
        .map(|n| {
            q.node(n)
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    let dq = exterior_derivative(&q)?;
    let dxi = codifferential(&gauge.xi)?;
    let mut res = dq.clone();
    let mut res_a = dq.clone();
    let m = dom.dim();
    for n in dom.valid_nodes() {
        for a in 0..m {
            let c = linalg::commutator(q.node(n), dxi.value(n, a), d);
            let ca = linalg::commutator(q.node(n), gauge.a_gauged.value(n, a), d);
            for (o, v) in res.value_mut(n, a).iter_mut().zip(&c) {
                *o -= v;
            }
            for (o, v) in res_a.value_mut(n, a).iter_mut().zip(&ca) {
                *o -= v;
            }
        }
    }
    Ok(QReport {
        dq_norm: dq.l2_norm(),
        sup_deviation,
        structure_residual: res.l2_norm(),
        structure_residual_gauged: res_a.l2_norm(),
        q: Some(q),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameDiagnostics {
    pub base_node: usize,
    pub q_deviation: f64,
    /// Worst nodal `|⟨eᵢ,eⱼ⟩ − δᵢⱼ|` over both frames.
    pub orthonormality_residual: f64,
    /// `‖Π^⊥ eᵢ‖_{L²}` summed over `i`, before projection.
    pub tangency_residual: f64,
    /// Worst nodal `|Π^⊥ eᵢ|` before projection.
    pub tangency_residual_max: f64,
    /// `max_{i≠j} ‖d*(eᵢ·deⱼ)‖_{L²}` over the tangent frame.
    pub coulomb_residual: f64,
    /// The same, restricted to nodes at least three cells from the boundary.
    pub coulomb_residual_deep: f64,
    /// `max_i ‖deᵢ‖_{M^{2,m−2}}`.
    pub frame_morrey: f64,
}

#[derive(Debug, Clone)]
pub struct FramePair {
    pub tangent: Vec<Field>,
    pub normal: Vec<Field>,
    pub diagnostics: FrameDiagnostics,
}

impl FramePair {
    /// Writes `e{i}.mff`, `nu{j}.mff` and `frames.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (i, f) in self.tangent.iter().enumerate() {
            io::save(dir.join(format!("e{}.mff", i + 1)), f)?;
        }
        for (j, f) in self.normal.iter().enumerate() {
            io::save(dir.join(format!("nu{}.mff", j + 1)), f)?;
        }
        std::fs::write(
            dir.join("frames.json"),
            serde_json::to_string_pretty(&self.diagnostics)?,
        )?;
        Ok(())
    }
}

/// Orthonormal bases of `Π ℝᵈ` and its complement, from the eigenvectors of `Π`.
pub fn projector_bases(pi: &[f64], d: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (vals, vecs) = linalg::symmetric_eigen(pi, d);
    let rank = vals.iter().filter(|v| **v > 0.5).count();
    let col = |c: usize| -> Vec<f64> { vecs.column(c).iter().copied().collect() };
    (
        (d - rank..d).map(col).collect(),
        (0..d - rank).map(col).collect(),
    )
}

/// Frames `eᵢ(x) = P(x)P(x₀)ᵀEᵢ` for the subbundle `Π ℝᵈ` and
/// `νⱼ(x) = P(x)P(x₀)ᵀNⱼ` for its complement. Each is then projected
/// through `Π(x)`, resp. `I − Π(x)`, and Gram–Schmidt orthonormalized in
/// index order.
pub fn extract_frames_for_projection(
    gauge: &GaugeSolution,
    pi: &Field,
    base_node: usize,
    threshold: f64,
) -> Result<FramePair> {
    let d = match pi.shape() {
        ValueShape::Matrix(d) => d,
        _ => return Err(Error::ShapeMismatch("Π must be a matrix 0-form".into())),
    };
    let (tb, nb) = projector_bases(pi.node(base_node), d);
    extract_frames_with_basis(gauge, pi, base_node, &tb, &nb, threshold)
}

/// As [`extract_frames_for_projection`] with explicit bases at the base node.
pub fn extract_frames_with_basis(
    gauge: &GaugeSolution,
    pi: &Field,
    base_node: usize,
    tangent_basis: &[Vec<f64>],
    normal_basis: &[Vec<f64>],
    threshold: f64,
) -> Result<FramePair> {
    let p = &gauge.p;
    let dom = p.domain().clone();
    let d = match p.shape() {
        ValueShape::Matrix(d) => d,
        _ => unreachable!(),
    };
    if pi.shape() != p.shape() || !pi.domain().same_grid(&dom) {
        return Err(Error::ShapeMismatch(
            "Π must live on the gauge grid with matching size".into(),
        ));
    }
    if !dom.is_valid(base_node) {
        return Err(Error::InvalidParameter(format!(
            "base node {base_node} is not a valid node"
        )));
    }
    let id = linalg::identity(d);
    let r = Field::matrix_fn(&dom, d, |_, _| {});
    let mut r = r;
    for n in dom.valid_nodes() {
        let v: Vec<f64> = pi
            .node(n)
            .iter()
            .zip(&id)
            .map(|(a, b)| 2.0 * a - b)
            .collect();
        r.node_mut(n).copy_from_slice(&v);
    }
    let qrep = q_field(gauge, &r)?;
    if !(qrep.sup_deviation <= threshold) {
        return Err(Error::FrameRefused {
            deviation: qrep.sup_deviation,
            threshold,
        });
    }

    let p0 = p.node(base_node).to_vec();
    let n_t = tangent_basis.len();
    let all: Vec<Vec<f64>> = tangent_basis.iter().chain(normal_basis).cloned().collect();
    // P(x₀)ᵀ applied to each basis vector once
    let rotated: Vec<Vec<f64>> = all
        .iter()
        .map(|e| linalg::matvec(&linalg::transpose(&p0, d), e, d))
        .collect();
    let mut fields: Vec<Field> = (0..all.len())
        .map(|_| Field::zeros(&dom, 0, ValueShape::Vector(d)))
        .collect::<Result<_>>()?;
    let mut tang_sq = 0.0;
    let mut tang_max = 0.0f64;
    let mut ortho = 0.0f64;
    for n in dom.valid_nodes() {
        let pn = p.node(n);
        let pin = pi.node(n);
        let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(all.len());
        for (k, rv) in rotated.iter().enumerate() {
            let e = linalg::matvec(pn, rv, d);
            let proj = linalg::matvec(pin, &e, d);
            let (keep, drop): (Vec<f64>, Vec<f64>) = if k < n_t {
                (
                    proj.clone(),
                    e.iter().zip(&proj).map(|(a, b)| a - b).collect(),
                )
            } else {
                (
                    e.iter().zip(&proj).map(|(a, b)| a - b).collect(),
                    proj.clone(),
                )
            };
            if k < n_t {
                let s = linalg::dot(&drop, &drop);
                tang_sq += s;
                tang_max = tang_max.max(s.sqrt());
            }
            vecs.push(keep);
        }
        let (tv, nv) = vecs.split_at_mut(n_t);
        linalg::gram_schmidt(tv)?;
        linalg::gram_schmidt(nv)?;
        for block in [&*tv, &*nv] {
            for (i, a) in block.iter().enumerate() {
                for (j, b) in block.iter().enumerate() {
                    let target = if i == j { 1.0 } else { 0.0 };
                    ortho = ortho.max((linalg::dot(a, b) - target).abs());
                }
            }
        }
        for (k, v) in vecs.iter().enumerate() {
            fields[k].node_mut(n).copy_from_slice(v);
        }
    }
    let normal = fields.split_off(n_t);
    let tangent = fields;

    let derivs: Vec<Field> = tangent
        .iter()
        .map(exterior_derivative)
        .collect::<Result<_>>()?;
    let m = dom.dim();
    let mut coulomb = 0.0f64;
    let mut coulomb_deep = 0.0f64;
    for i in 0..n_t {
        for j in 0..n_t {
            if i == j {
                continue;
            }
            let mut c = Field::zeros(&dom, 1, ValueShape::Scalar)?;
            for n in dom.valid_nodes() {
                for a in 0..m {
                    c.value_mut(n, a)[0] = linalg::dot(tangent[i].node(n), derivs[j].value(n, a));
                }
            }
            let div = codifferential(&c)?;
            coulomb = coulomb.max(div.l2_norm());
            coulomb_deep =
                coulomb_deep.max(div.l2_norm_over(|n| dom.is_deep(n, BOUNDARY_STRIP_CELLS)));
        }
    }
    let family = BallFamily::dyadic(&dom);
    let mut frame_morrey = 0.0f64;
    for de in &derivs {
        frame_morrey = frame_morrey.max(morrey_norm(de, &family)?.value);
    }
    Ok(FramePair {
        tangent,
        normal,
        diagnostics: FrameDiagnostics {
            base_node,
            q_deviation: qrep.sup_deviation,
            orthonormality_residual: ortho,
            tangency_residual: (tang_sq * dom.cell_volume()).sqrt(),
            tangency_residual_max: tang_max,
            coulomb_residual: coulomb,
            coulomb_residual_deep: coulomb_deep,
            frame_morrey,
        },
    })
}

/// Frames of `u*T𝒩` and `u*N𝒩`, with `Π = T̃∘u`.
pub fn extract_frames(
    gauge: &GaugeSolution,
    u: &MapField,
    base_node: usize,
    threshold: f64,
) -> Result<FramePair> {
    let pi = tangent_projector_field(u)?;
    extract_frames_for_projection(gauge, &pi, base_node, threshold)
}

/// The node nearest the origin.
pub fn default_base_node(dom: &GridDomain) -> usize {
    let m = dom.dim();
    let origin = vec![0.0; m];
    let p = dom.nearest_node(&origin);
    if dom.is_valid(p) {
        p
    } else {
        dom.valid_nodes()
            .min_by(|&a, &b| dom.radius(a).total_cmp(&dom.radius(b)).then(a.cmp(&b)))
            .expect("domain has valid nodes")
    }
}

/// Everything the frame experiments need from one map.
#[derive(Debug)]
pub struct PipelineResult {
    pub omega_morrey: f64,
    pub omega_l2: f64,
    pub gauge: GaugeSolution,
    pub q: QReport,
    pub frames: Result<FramePair>,
}

/// `ω` from `A`, Coulomb gauge, `Q`, then frames at the default base node.
pub fn frame_pipeline(u: &MapField, opts: &GaugeOptions, threshold: f64) -> Result<PipelineResult> {
    let omega = crate::connection::compute_omega_from_a(u)?;
    let family = BallFamily::dyadic(u.domain());
    let omega_morrey = morrey_norm(omega.field(), &family)?.value;
    let omega_l2 = omega.field().l2_norm();
    let gauge = coulomb_gauge(&omega, opts)?;
    let q = q_field(&gauge, &reflection_field(u)?)?;
    let frames = extract_frames(&gauge, u, default_base_node(u.domain()), threshold);
    Ok(PipelineResult {
        omega_morrey,
        omega_l2,
        gauge,
        q,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps;
    use crate::targets::TargetManifold;

    fn sphere_map(n: usize, amp: f64) -> MapField {
        let g = GridDomain::ball(2, n).unwrap();
        let t = Arc::new(TargetManifold::sphere(2).unwrap());
        maps::smooth_projected(&g, &t, amp).unwrap()
    }

    #[test]
    fn expm_minus_identity_is_accurate() {
        let k = [0.0, -0.3, 0.2, 0.3, 0.0, -0.1, -0.2, 0.1, 0.0];
        let e = linalg::expm_skew(&k, 3);
        let f = expm_minus_identity(&k, 3);
        for i in 0..9 {
            let target = e[i] - if i % 4 == 0 { 1.0 } else { 0.0 };
            assert!((f[i] - target).abs() < 1e-15);
        }
        let tiny: Vec<f64> = k.iter().map(|v| v * 1e-12).collect();
        let f = expm_minus_identity(&tiny, 3);
        for i in 0..9 {
            assert!((f[i] - tiny[i]).abs() <= 1e-24 + 1e-12 * tiny[i].abs());
        }
    }

    #[test]
    fn zero_connection_needs_no_gauge() {
        let g = GridDomain::ball(2, 16).unwrap();
        let w = ConnectionForm::zero(&g, 3);
        let sol = coulomb_gauge(&w, &GaugeOptions::default()).unwrap();
        assert_eq!(sol.diagnostics.iterations, 0);
        assert!(sol.diagnostics.converged());
        assert_eq!(sol.diagnostics.final_energy, 0.0);
        assert_eq!(sol.xi.max_norm(), 0.0);
        for n in g.valid_nodes() {
            assert_eq!(sol.p.node(n), &linalg::identity(3)[..]);
        }
    }

    #[test]
    fn lattice_gradient_matches_finite_differences() {
        let u = sphere_map(12, 0.6);
        let w = crate::connection::compute_omega_from_a(&u).unwrap();
        let lat = Lattice::new(&w);
        let dom = u.domain().clone();
        let d = 3;
        // a non-trivial base point P
        let p = Field::matrix_fn(&dom, d, |x, o| {
            let k = [
                0.0,
                -x[0],
                0.3 * x[1],
                x[0],
                0.0,
                -0.2,
                -0.3 * x[1],
                0.2,
                0.0,
            ];
            o.copy_from_slice(&linalg::expm_skew(&k, 3));
        });
        let g = lat.gradient(&p);
        let eta: Vec<Vec<f64>> = lat
            .nodes
            .iter()
            .map(|&q| {
                let x = dom.coords(q);
                let a = (3.0 * x[0]).sin();
                let b = x[1] * x[0];
                vec![0.0, a, b, -a, 0.0, 0.5, -b, -0.5, 0.0]
            })
            .collect();
        let moved = |eps: f64| {
            let mut pp = p.clone();
            for (i, &q) in lat.nodes.iter().enumerate() {
                let k: Vec<f64> = eta[i].iter().map(|v| eps * v).collect();
                let v = linalg::matmul(p.node(q), &linalg::expm_skew(&k, 3), 3);
                pp.node_mut(q).copy_from_slice(&v);
            }
            lat.energy(&pp)
        };
        let eps = 1e-5;
        let fd = (moved(eps) - moved(-eps)) / (2.0 * eps);
        let hm = dom.cell_volume();
        let analytic: f64 = 2.0
            * hm
            * g.iter()
                .zip(&eta)
                .map(|(a, b)| linalg::dot(a, b))
                .sum::<f64>();
        assert!(
            (fd - analytic).abs() <= 1e-6 * analytic.abs().max(1e-3),
            "{fd} vs {analytic}"
        );
    }

    #[test]
    fn energy_change_is_exact() {
        let u = sphere_map(12, 0.6);
        let w = crate::connection::compute_omega_from_a(&u).unwrap();
        let lat = Lattice::new(&w);
        let dom = u.domain().clone();
        let p = Field::matrix_fn(&dom, 3, |_, o| o.copy_from_slice(&linalg::identity(3)));
        let g = lat.gradient(&p);
        let z = lat.precondition(&g);
        let dx: Vec<Vec<f64>> = z
            .iter()
            .map(|v| {
                let k: Vec<f64> = v.iter().map(|x| -0.5 * x).collect();
                expm_minus_identity(&k, 3)
            })
            .collect();
        let de = lat.energy_change(&p, &dx);
        let mut p2 = p.clone();
        for (i, &q) in lat.nodes.iter().enumerate() {
            let mut x = dx[i].clone();
            for k in 0..3 {
                x[k * 4] += 1.0;
            }
            p2.node_mut(q).copy_from_slice(&x);
        }
        let direct = lat.energy(&p2) - lat.energy(&p);
        assert!(de < 0.0);
        assert!((de - direct).abs() <= 1e-10 * de.abs(), "{de} vs {direct}");
    }

    #[test]
    fn gauge_converges_and_decreases_energy() {
        let u = sphere_map(24, 0.3);
        let w = crate::connection::compute_omega_from_a(&u).unwrap();
        let sol = coulomb_gauge(&w, &GaugeOptions::default()).unwrap();
        let dg = &sol.diagnostics;
        assert!(dg.converged(), "{dg:?}");
        assert!(dg.energy_history.windows(2).all(|p| p[1] < p[0]));
        assert!(dg.orthogonality_residual < 1e-10);
        assert!(sol.a_gauged.skew_residual().unwrap() < 1e-10);
        let rel = (dg.final_energy - dg.energy_history.last().unwrap()).abs() / dg.final_energy;
        assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn pure_gauge_is_trivialized() {
        let g = GridDomain::ball(2, 24).unwrap();
        let s = Field::matrix_fn(&g, 3, |x, o| {
            let k = [
                0.0,
                -0.8 * x[0],
                0.4 * x[1] * x[0],
                0.8 * x[0],
                0.0,
                -0.5 * x[1],
                -0.4 * x[1] * x[0],
                0.5 * x[1],
                0.0,
            ];
            o.copy_from_slice(&linalg::expm_skew(&k, 3));
        });
        let w = ConnectionForm::zero(&g, 3).gauge_transform(&s).unwrap();
        let before = w.field().l2_norm();
        let sol = coulomb_gauge(&w, &GaugeOptions::default()).unwrap();
        assert!(sol.diagnostics.converged());
        assert!(
            sol.a_gauged.l2_norm() < 0.02 * before,
            "{} vs {before}",
            sol.a_gauged.l2_norm()
        );
    }

    #[test]
    fn constant_map_gives_constant_frames() {
        let g = GridDomain::ball(2, 16).unwrap();
        let t = Arc::new(TargetManifold::sphere(2).unwrap());
        let u = maps::constant(&g, &t, &[0.0, 0.0, 1.0]).unwrap();
        let res = frame_pipeline(&u, &GaugeOptions::default(), DEFAULT_Q_THRESHOLD).unwrap();
        assert_eq!(res.q.sup_deviation, 0.0);
        assert_eq!(res.q.dq_norm, 0.0);
        let f = res.frames.unwrap();
        assert_eq!(f.tangent.len(), 2);
        assert_eq!(f.normal.len(), 1);
        assert_eq!(f.diagnostics.coulomb_residual, 0.0);
        let base = f.tangent[0].node(default_base_node(&g)).to_vec();
        for n in g.valid_nodes() {
            assert_eq!(f.tangent[0].node(n), &base[..]);
        }
    }

    #[test]
    fn small_maps_give_nearly_constant_q_and_good_frames() {
        let u = sphere_map(32, 0.1);
        let res = frame_pipeline(&u, &GaugeOptions::default(), DEFAULT_Q_THRESHOLD).unwrap();
        let d = &res.gauge.diagnostics;
        eprintln!("{:?}\n{:?}", d, res.q);
        assert!(d.converged());
        assert!(res.q.sup_deviation < DEFAULT_Q_THRESHOLD);
        let f = res.frames.unwrap();
        eprintln!("{:?}", f.diagnostics);
        assert!(f.diagnostics.orthonormality_residual < 1e-10);
        for n in u.domain().valid_nodes() {
            for e in &f.tangent {
                assert!(linalg::dot(e.node(n), u.value(n)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_rotation_rotates_the_frames() {
        let u = sphere_map(24, 0.08);
        let w = crate::connection::compute_omega_from_a(&u).unwrap();
        let pi = tangent_projector_field(&u).unwrap();
        let dom = u.domain().clone();
        let k = [0.0, -0.7, 0.4, 0.7, 0.0, -1.1, -0.4, 1.1, 0.0];
        let s = linalg::expm_skew(&k, 3);
        let conj = |f: &Field| {
            f.map_values(f.shape(), |_, v, o| {
                o.copy_from_slice(&linalg::matmul(&linalg::matmul_tn(&s, v, 3), &s, 3))
            })
        };
        let w2 = ConnectionForm::new(conj(w.field()), w.provenance()).unwrap();
        let pi2 = conj(&pi);
        let base = default_base_node(&dom);
        let (tb, nb) = projector_bases(pi.node(base), 3);
        let st = linalg::transpose(&s, 3);
        let rot = |b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            b.iter().map(|e| linalg::matvec(&st, e, 3)).collect()
        };
        let opts = GaugeOptions::default();
        let g1 = coulomb_gauge(&w, &opts).unwrap();
        let g2 = coulomb_gauge(&w2, &opts).unwrap();
        let f1 = extract_frames_with_basis(&g1, &pi, base, &tb, &nb, DEFAULT_Q_THRESHOLD).unwrap();
        let f2 =
            extract_frames_with_basis(&g2, &pi2, base, &rot(&tb), &rot(&nb), DEFAULT_Q_THRESHOLD)
                .unwrap();
        let mut worst = 0.0f64;
        for (a, b) in f1
            .tangent
            .iter()
            .chain(&f1.normal)
            .zip(f2.tangent.iter().chain(&f2.normal))
        {
            for n in dom.valid_nodes() {
                let ra = linalg::matvec(&st, a.node(n), 3);
                for i in 0..3 {
                    worst = worst.max((ra[i] - b.node(n)[i]).abs());
                }
            }
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn refusal_reports_the_deviation() {
        let u = sphere_map(20, 0.1);
        let res = frame_pipeline(&u, &GaugeOptions::default(), 1e-9).unwrap();
        assert!(matches!(res.frames, Err(Error::FrameRefused { .. })));
    }
}
