//! End-to-end pipelines behind the command-line subcommands and the
//! acceptance suite. Each returns plain serializable data; thresholds are
//! applied by the callers.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::Serialize;

use crate::connection::identity_suite;
use crate::error::{Error, Result};
use crate::gauge::{frame_pipeline, GaugeOptions};
use crate::grid::{exterior_derivative, Field, GridDomain};
use crate::harmonic::{self, FlowOptions, FlowState, MonotonicityReport, RegularityReport};
use crate::maps::{self, MapSpec, HEDGEHOG_CUTOFF_CELLS};
use crate::norms::{morrey_values, BallFamily};
use crate::targets::TargetManifold;
use crate::wente::{self, WenteRow};

fn sphere(n: usize) -> Result<Arc<TargetManifold>> {
    Ok(Arc::new(TargetManifold::sphere(n)?))
}

// --- hedgehog -------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct HedgehogMorrey {
    pub resolution: usize,
    pub radius: f64,
    pub cutoff: f64,
    /// `r⁻¹Σ_{B_r}|du|²hᵐ` over the annulus.
    pub raw: f64,
    /// `r⁻¹·8πρ₀`, the energy of `x/|x|` inside the cutoff ball.
    pub cutoff_correction: f64,
    pub value: f64,
    pub reference: f64,
    pub relative_error: f64,
}

/// `r⁻¹‖du‖²_{L²(B_r)}` for `u = x/|x|` in three dimensions at `r = 1 − h`,
/// with the excised inner ball added back analytically.
pub fn hedgehog_morrey(n: usize) -> Result<HedgehogMorrey> {
    let dom = maps::hedgehog_domain(n)?;
    let u = maps::hedgehog_on(&dom, &sphere(2)?)?;
    let du = exterior_derivative(u.field())?;
    let h = dom.spacing();
    let r = 1.0 - h;
    let rho = HEDGEHOG_CUTOFF_CELLS * 2.0 / (n - 1) as f64;
    let v = morrey_values(&du, &BallFamily::centered(&[r]))?[0];
    let raw = v * v;
    let correction = 8.0 * PI * rho / r;
    let value = raw + correction;
    let reference = 8.0 * PI;
    Ok(HedgehogMorrey {
        resolution: n,
        radius: r,
        cutoff: rho,
        raw,
        cutoff_correction: correction,
        value,
        reference,
        relative_error: (value - reference) / reference,
    })
}

// --- structure identities -------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct IdentityRate {
    pub name: String,
    /// Criterion sub-item (`a`–`d`) the residual belongs to, if any.
    pub group: Option<char>,
    pub coarse: f64,
    pub fine: f64,
    /// `coarse / fine`; `None` when both vanish to round-off.
    pub factor: Option<f64>,
}

impl IdentityRate {
    /// Exact identities (both residuals at round-off) count as converged.
    pub fn exact(&self) -> bool {
        self.factor.is_none()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityConvergence {
    pub coarse: usize,
    pub fine: usize,
    pub map: MapSpec,
    pub rows: Vec<IdentityRate>,
}

/// Residuals below this are treated as exact zeros.
pub const ROUND_OFF: f64 = 1e-13;

fn identity_group(name: &str) -> Option<char> {
    match name {
        "omega_a_vs_reflection" | "omega_a_vs_projector" | "omega_reflection_vs_projector" => {
            Some('a')
        }
        "parallel_t" => Some('b'),
        "projector_split" | "projector_tangential_block" | "projector_normal_block" => Some('c'),
        "curvature_scale_2" => Some('d'),
        _ => None,
    }
}

/// Runs the identity suite for one map spec at two resolutions.
pub fn identity_convergence(
    dim: usize,
    target: &Arc<TargetManifold>,
    map: MapSpec,
    coarse: usize,
    fine: usize,
) -> Result<IdentityConvergence> {
    let run = |n| -> Result<_> { identity_suite(&map.build(&GridDomain::ball(dim, n)?, target)?) };
    let (a, b) = (run(coarse)?, run(fine)?);
    let rows = a
        .iter()
        .zip(&b)
        .map(|(x, y)| IdentityRate {
            name: x.name.to_string(),
            group: identity_group(x.name),
            coarse: x.residual,
            fine: y.residual,
            factor: if x.residual <= ROUND_OFF && y.residual <= ROUND_OFF {
                None
            } else {
                Some(x.residual / y.residual)
            },
        })
        .collect();
    Ok(IdentityConvergence {
        coarse,
        fine,
        map,
        rows,
    })
}

// --- Wente ----------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct WenteExperiment {
    pub resolution: usize,
    pub linear_ratio: f64,
    pub linear_reference: f64,
    pub linear_relative_error: f64,
    pub rows: Vec<WenteRow>,
    pub max_ratio: f64,
    pub sharp_constant: f64,
}

/// The pair `(x₁, x₂)` and seeded band-limited pairs on the unit disc.
pub fn wente_experiment(n: usize, seeds: &[u64]) -> Result<WenteExperiment> {
    let dom = GridDomain::ball(2, n)?;
    let a = Field::scalar_fn(&dom, |x| x[0]);
    let b = Field::scalar_fn(&dom, |x| x[1]);
    let lin = wente::wente_solve(&a, &b)?.norms.ratio;
    let reference = wente::linear_pair_ratio();
    let rows = wente::random_suite(&dom, seeds.iter().copied())?;
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(WenteExperiment {
        resolution: n,
        linear_ratio: lin,
        linear_reference: reference,
        linear_relative_error: (lin - reference) / reference,
        rows,
        max_ratio,
        sharp_constant: wente::sharp_gradient_constant(),
    })
}

// --- Coulomb gauge and frames ----------------------------------------------

/// Amplitudes of the shrinking smooth family; `‖ω‖_{M^{2,0}}` runs from about
/// 0.1 down to 0.02 on the unit disc.
pub const FRAME_FAMILY_AMPLITUDES: [f64; 5] = [0.023, 0.018, 0.012, 0.008, 0.005];

#[derive(Debug, Clone, Serialize)]
pub struct FrameMember {
    pub resolution: usize,
    pub amplitude: f64,
    pub spacing: f64,
    pub omega_morrey: f64,
    pub omega_l2: f64,
    pub converged: bool,
    pub iterations: usize,
    pub energy_monotone: bool,
    pub coulomb_residual: f64,
    pub coulomb_scale: f64,
    pub q_sup_deviation: f64,
    pub structure_residual: f64,
    /// `nodal Coulomb residual + Hodge residual + h·‖ω‖_{L²}`.
    pub structure_budget: f64,
    pub frames_extracted: bool,
    pub orthonormality: Option<f64>,
    pub tangency: Option<f64>,
    pub frame_coulomb_deep: Option<f64>,
    pub frame_coulomb_full: Option<f64>,
    /// `max_i ‖deᵢ‖_M / ‖ω‖_M`.
    pub frame_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameFamily {
    pub dim: usize,
    pub threshold: f64,
    pub members: Vec<FrameMember>,
}

impl FrameFamily {
    pub fn at(&self, n: usize) -> impl Iterator<Item = &FrameMember> {
        self.members.iter().filter(move |m| m.resolution == n)
    }
}

/// Sphere-valued `smooth_projected` maps on the disc, one gauge and frame
/// extraction per amplitude and resolution.
pub fn frame_family(
    resolutions: &[usize],
    amplitudes: &[f64],
    opts: &GaugeOptions,
    threshold: f64,
) -> Result<FrameFamily> {
    let t = sphere(2)?;
    let mut members = Vec::new();
    for &n in resolutions {
        let g = GridDomain::ball(2, n)?;
        for &amp in amplitudes {
            let u = maps::smooth_projected(&g, &t, amp)?;
            let res = frame_pipeline(&u, opts, threshold)?;
            let d = &res.gauge.diagnostics;
            let f = res.frames.as_ref().ok().map(|f| &f.diagnostics);
            members.push(FrameMember {
                resolution: n,
                amplitude: amp,
                spacing: g.spacing(),
                omega_morrey: res.omega_morrey,
                omega_l2: res.omega_l2,
                converged: d.converged(),
                iterations: d.iterations,
                energy_monotone: d.energy_history.windows(2).all(|w| w[1] <= w[0]),
                coulomb_residual: d.coulomb_residual,
                coulomb_scale: d.coulomb_scale,
                q_sup_deviation: res.q.sup_deviation,
                structure_residual: res.q.structure_residual,
                structure_budget: d.nodal_coulomb_residual
                    + d.hodge_residual
                    + g.spacing() * res.omega_l2,
                frames_extracted: f.is_some(),
                orthonormality: f.map(|f| f.orthonormality_residual),
                tangency: f.map(|f| f.tangency_residual),
                frame_coulomb_deep: f.map(|f| f.coulomb_residual_deep),
                frame_coulomb_full: f.map(|f| f.coulomb_residual),
                frame_ratio: f.map(|f| f.frame_morrey / res.omega_morrey),
            });
        }
    }
    Ok(FrameFamily {
        dim: 2,
        threshold,
        members,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HedgehogControl {
    pub resolution: usize,
    pub gauge_converged: bool,
    pub q_sup_deviation: f64,
    pub refused: bool,
    pub message: Option<String>,
}

/// The hedgehog has no small-energy Coulomb frame; extraction must refuse.
pub fn hedgehog_control(n: usize, opts: &GaugeOptions, threshold: f64) -> Result<HedgehogControl> {
    let dom = maps::hedgehog_domain(n)?;
    let u = maps::hedgehog_on(&dom, &sphere(2)?)?;
    let res = frame_pipeline(&u, opts, threshold)?;
    let gauge_converged = res.gauge.diagnostics.converged();
    let q_sup_deviation = res.q.sup_deviation;
    let (refused, message) = match res.frames {
        Ok(_) => (false, None),
        Err(e @ Error::FrameRefused { .. }) => (true, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(HedgehogControl {
        resolution: n,
        gauge_converged,
        q_sup_deviation,
        refused,
        message,
    })
}

// --- Noether currents -----------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct NoetherExperiment {
    pub resolution: usize,
    pub spacing: f64,
    pub converged: bool,
    pub steps: usize,
    pub rejected_steps: usize,
    pub final_residual: f64,
    pub energy_monotone: bool,
    pub du_sq: f64,
    /// Staggered `max_j‖d*X_j‖`, the quantity the criterion bounds.
    pub divergence: f64,
    /// Collocated values, for comparison only.
    pub divergence_collocated: f64,
    pub divergence_collocated_deep: f64,
    pub tension_norm: f64,
    pub pointwise_ratio: f64,
    pub pointwise_bound: f64,
    /// Staggered conservation residual relative to `‖du‖²`.
    pub conservation_relative: f64,
    pub conservation_collocated: f64,
    pub conservation_collocated_deep: f64,
    pub sphere_equation: f64,
}

/// Flows `boundary_data(amplitude, bump)` into `S²` on the disc and measures
/// current divergence and the conservation law at the limit.
pub fn noether_experiment(
    n: usize,
    amplitude: f64,
    bump: f64,
    opts: &FlowOptions,
) -> Result<NoetherExperiment> {
    let g = GridDomain::ball(2, n)?;
    let u0 = maps::boundary_data(&g, &sphere(2)?, amplitude, bump)?;
    let s = harmonic::heat_flow(&u0, opts)?;
    let nc = harmonic::noether_currents(&s.u)?;
    let c = harmonic::conservation_residual(&s.u)?;
    Ok(NoetherExperiment {
        resolution: n,
        spacing: g.spacing(),
        converged: s.converged(),
        steps: s.diagnostics.steps,
        rejected_steps: s.diagnostics.rejected_steps,
        final_residual: s.final_residual(),
        energy_monotone: s
            .diagnostics
            .energy_history
            .windows(2)
            .all(|w| w[1] <= w[0]),
        du_sq: nc.du_sq,
        divergence: nc.max_lattice_divergence(),
        divergence_collocated: nc.max_divergence(),
        divergence_collocated_deep: nc.max_divergence_deep(),
        tension_norm: nc.tension_norm,
        pointwise_ratio: nc.pointwise_ratio,
        pointwise_bound: nc.pointwise_bound,
        conservation_relative: c.lattice_relative,
        conservation_collocated: c.relative,
        conservation_collocated_deep: c.relative_deep,
        sphere_equation: c.sphere_equation,
    })
}

// --- monotonicity and decay -------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityRow {
    pub dim: usize,
    pub polynomial: &'static str,
    pub report: MonotonicityReport,
}

/// Harmonic polynomials of degree one to three.
pub type Polynomial = fn(&[f64]) -> f64;

pub const HARMONIC_POLYNOMIALS: [(&str, Polynomial); 4] = [
    ("x1", |x| x[0]),
    ("x1^2-x2^2", |x| x[0] * x[0] - x[1] * x[1]),
    ("x1*x2", |x| x[0] * x[1]),
    ("x1^3-3x1*x2^2", |x| {
        x[0] * x[0] * x[0] - 3.0 * x[0] * x[1] * x[1]
    }),
];

pub fn monotonicity_suite(dims: &[usize], n: usize, slack: f64) -> Result<Vec<MonotonicityRow>> {
    let mut out = Vec::new();
    for &m in dims {
        let g = GridDomain::ball(m, n)?;
        for (name, f) in HARMONIC_POLYNOMIALS {
            let field = Field::scalar_fn(&g, f);
            out.push(MonotonicityRow {
                dim: m,
                polynomial: name,
                report: harmonic::monotonicity_check(&field, slack)?,
            });
        }
    }
    Ok(out)
}

// --- regularity -----------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RegularityRun {
    pub resolution: usize,
    pub steps: Vec<usize>,
    pub report: RegularityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityFamily {
    pub dim: usize,
    pub members: usize,
    pub runs: Vec<RegularityRun>,
    /// `|a − b|/b` between the sups at the last two resolutions.
    pub gradient_drift: Option<f64>,
    pub hessian_drift: Option<f64>,
    pub max_bmo: f64,
}

/// Flows `members` regularity-family maps at each resolution, starting from
/// the harmonic extension of their boundary values.
pub fn regularity_family(
    dim: usize,
    resolutions: &[usize],
    members: usize,
    opts: &FlowOptions,
    eps_grid: &[f64],
) -> Result<RegularityFamily> {
    let mut runs = Vec::new();
    for &n in resolutions {
        let g = GridDomain::ball(dim, n)?;
        let mut states: Vec<(String, FlowState)> = Vec::new();
        for k in 0..members {
            let u0 = harmonic::harmonic_extension(&harmonic::regularity_member(&g, k)?)?;
            states.push((format!("k{k}"), harmonic::heat_flow(&u0, opts)?));
        }
        runs.push(RegularityRun {
            resolution: n,
            steps: states.iter().map(|(_, s)| s.diagnostics.steps).collect(),
            report: harmonic::regularity_experiment(&states, eps_grid)?,
        });
    }
    let drift = |sel: fn(&RegularityReport) -> Option<f64>| -> Option<f64> {
        let [.., a, b] = runs.as_slice() else {
            return None;
        };
        let (x, y) = (sel(&a.report)?, sel(&b.report)?);
        Some((y - x).abs() / x)
    };
    let max_bmo = runs
        .iter()
        .flat_map(|r| r.report.rows.iter().map(|row| row.bmo))
        .fold(0.0, f64::max);
    Ok(RegularityFamily {
        dim,
        members,
        gradient_drift: drift(|r| r.sup_gradient_ratio),
        hessian_drift: drift(|r| r.sup_hessian_ratio),
        max_bmo,
        runs,
    })
}
