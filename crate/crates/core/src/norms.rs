//! Morrey, BMO and Lᵖ estimators over families of sub-balls.
//!
//! Ball sums use prefix sums along the last grid axis, so one ball costs
//! `O((r/h)^{m−1})` row lookups.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, GridDomain};

/// Relative slack (in index units) when deciding whether a node lies in a ball.
const MEMBERSHIP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ball {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Ball {
    pub fn new(center: &[f64], radius: f64) -> Self {
        let mut c = [0.0; 3];
        c[..center.len()].copy_from_slice(center);
        Self { center: c, radius }
    }

    /// Closed containment in the unit ball.
    pub fn inside_unit_ball(&self) -> bool {
        let c = self.center;
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() + self.radius <= 1.0 + 1e-12
    }
}

/// The `(x, r)` index set over which the sup-norms are approximated.
#[derive(Debug, Clone, Serialize)]
pub struct BallFamily {
    pub stride: usize,
    pub radii: Vec<f64>,
    pub include_origin: bool,
    #[serde(skip)]
    balls: Vec<Ball>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilySummary {
    pub stride: usize,
    pub radii: Vec<f64>,
    pub include_origin: bool,
    pub num_balls: usize,
}

impl BallFamily {
    /// Dyadic radii `2⁻ᵏ(1−h)` for `k = 0..K` with `2⁻ᴷ ≥ 4h`, centred at the
    /// valid nodes of the sublattice with stride `max(1, N/32)` and at the
    /// origin.
    pub fn dyadic(domain: &GridDomain) -> Self {
        let stride = (domain.resolution() / 32).max(1);
        Self::with_stride(domain, stride)
    }

    pub fn with_stride(domain: &GridDomain, stride: usize) -> Self {
        let h = domain.spacing();
        let mut radii = Vec::new();
        let mut scale = 1.0;
        while scale >= 4.0 * h {
            radii.push(scale * (1.0 - h));
            scale *= 0.5;
        }
        let m = domain.dim();
        let mut centers: Vec<[f64; 3]> = vec![[0.0; 3]];
        for p in domain.valid_nodes() {
            let idx = domain.multi_index(p);
            if (0..m).all(|a| idx[a].is_multiple_of(stride)) {
                centers.push(domain.coords(p));
            }
        }
        let balls = centers
            .iter()
            .flat_map(|c| {
                radii.iter().map(move |&r| Ball {
                    center: *c,
                    radius: r,
                })
            })
            .collect();
        Self {
            stride,
            radii,
            include_origin: true,
            balls,
        }
    }

    /// Balls centred at the origin only.
    pub fn centered(radii: &[f64]) -> Self {
        Self {
            stride: 0,
            radii: radii.to_vec(),
            include_origin: true,
            balls: radii.iter().map(|&r| Ball::new(&[0.0], r)).collect(),
        }
    }

    pub fn from_balls(balls: Vec<Ball>) -> Self {
        let mut radii: Vec<f64> = balls.iter().map(|b| b.radius).collect();
        radii.sort_by(f64::total_cmp);
        radii.dedup();
        Self {
            stride: 0,
            radii,
            include_origin: balls.iter().any(|b| b.center == [0.0; 3]),
            balls,
        }
    }

    pub fn balls(&self) -> &[Ball] {
        &self.balls
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    pub fn summary(&self) -> FamilySummary {
        FamilySummary {
            stride: self.stride,
            radii: self.radii.clone(),
            include_origin: self.include_origin,
            num_balls: self.balls.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Morrey,
    Bmo,
}

#[derive(Debug, Clone, Serialize)]
pub struct NormReport {
    pub kind: NormKind,
    pub value: f64,
    pub center: [f64; 3],
    pub radius: f64,
    pub family: FamilySummary,
    pub resolution: usize,
}

/// Per-node data arranged for ball queries: prefix sums along the last axis
/// of a count and of `nv` channels.
struct RowSums {
    dom: Arc<GridDomain>,
    nv: usize,
    /// `(N+1)` entries per row, `nv + 1` channels each (channel 0 counts nodes).
    prefix: Vec<f64>,
}

impl RowSums {
    fn new(dom: &Arc<GridDomain>, nv: usize, mut value: impl FnMut(usize, &mut [f64])) -> Self {
        let n = dom.resolution();
        let rows = dom.num_nodes() / n;
        let ch = nv + 1;
        let mut prefix = vec![0.0; rows * (n + 1) * ch];
        let mut buf = vec![0.0; nv];
        for row in 0..rows {
            let base = row * (n + 1) * ch;
            for k in 0..n {
                let p = row * n + k;
                let (cur, next) = (base + k * ch, base + (k + 1) * ch);
                let valid = dom.is_valid(p);
                prefix[next] = prefix[cur] + if valid { 1.0 } else { 0.0 };
                if valid {
                    value(p, &mut buf);
                }
                for c in 0..nv {
                    prefix[next + 1 + c] = prefix[cur + 1 + c] + if valid { buf[c] } else { 0.0 };
                }
            }
        }
        Self {
            dom: dom.clone(),
            nv,
            prefix,
        }
    }

    /// Returns the node count and channel sums over valid nodes in the ball.
    fn ball_sums(&self, ball: &Ball, out: &mut [f64]) -> f64 {
        let dom = &*self.dom;
        let n = dom.resolution();
        let m = dom.dim();
        let ch = self.nv + 1;
        let half = (n - 1) as f64 / 2.0;
        let to_index = |x: f64| (x + 1.0) * half;
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut count = 0.0;
        let r = ball.radius;
        let c = ball.center;
        let range = |center: f64, s: f64| -> Option<(usize, usize)> {
            let lo = (to_index(center - s) - MEMBERSHIP_SLACK).ceil().max(0.0);
            let hi = (to_index(center + s) + MEMBERSHIP_SLACK)
                .floor()
                .min((n - 1) as f64);
            if lo > hi {
                None
            } else {
                Some((lo as usize, hi as usize))
            }
        };
        let mut add_row = |row: usize, s: f64, out: &mut [f64]| {
            if let Some((lo, hi)) = range(c[m - 1], s) {
                let base = row * (n + 1) * ch;
                let (a, b) = (base + lo * ch, base + (hi + 1) * ch);
                count += self.prefix[b] - self.prefix[a];
                for k in 0..self.nv {
                    out[k] += self.prefix[b + 1 + k] - self.prefix[a + 1 + k];
                }
            }
        };
        let Some((i0, i1)) = range(c[0], r) else {
            return 0.0;
        };
        for i in i0..=i1 {
            let dx = dom.coordinate(i) - c[0];
            let rem0 = r * r - dx * dx;
            if rem0 < -1e-14 {
                continue;
            }
            if m == 2 {
                add_row(i, rem0.max(0.0).sqrt(), out);
            } else if let Some((j0, j1)) = range(c[1], rem0.max(0.0).sqrt()) {
                for j in j0..=j1 {
                    let dy = dom.coordinate(j) - c[1];
                    let rem = rem0 - dy * dy;
                    if rem < -1e-14 {
                        continue;
                    }
                    add_row(i * n + j, rem.max(0.0).sqrt(), out);
                }
            }
        }
        count
    }
}

fn require_family(family: &BallFamily) -> Result<()> {
    if family.is_empty() {
        return Err(Error::InvalidParameter("ball family is empty".into()));
    }
    Ok(())
}

/// `(r^{2−m} Σ_{B_r(x)∩B₁} |f|² hᵐ)^{1/2}` for every ball of the family.
pub fn morrey_values(f: &Field, family: &BallFamily) -> Result<Vec<f64>> {
    require_family(family)?;
    let dom = f.domain();
    let m = dom.dim() as i32;
    let vol = dom.cell_volume();
    let rows = RowSums::new(dom, 1, |p, o| o[0] = f.norm_sq_at(p));
    let mut s = [0.0];
    Ok(family
        .balls()
        .iter()
        .map(|b| {
            rows.ball_sums(b, &mut s);
            (b.radius.powi(2 - m) * s[0].max(0.0) * vol).sqrt()
        })
        .collect())
}

/// Discrete Morrey norm `‖f‖_{M^{2,m−2}(B₁)}` over the family; the pointwise
/// norm runs over all form and value components.
pub fn morrey_norm(f: &Field, family: &BallFamily) -> Result<NormReport> {
    let vals = morrey_values(f, family)?;
    Ok(report(NormKind::Morrey, &vals, f.domain(), family))
}

/// `(r^{−m} Σ_{B_r(x)} |f − f̄|² hᵐ)^{1/2}` for every ball of the family
/// contained in `B₁`; `None` for the others.
pub fn bmo_values(f: &Field, family: &BallFamily) -> Result<Vec<Option<f64>>> {
    require_family(family)?;
    if f.degree() != 0 {
        return Err(Error::DegreeOutOfRange {
            degree: f.degree(),
            dim: 0,
        });
    }
    let dom = f.domain();
    let nv = f.nval();
    let m = dom.dim() as i32;
    let vol = dom.cell_volume();
    // centre the data on its global mean to limit cancellation
    let mut mean = vec![0.0; nv];
    let mut cnt = 0.0f64;
    for p in dom.valid_nodes() {
        for (a, v) in mean.iter_mut().zip(f.node(p)) {
            *a += v;
        }
        cnt += 1.0;
    }
    mean.iter_mut().for_each(|v| *v /= cnt.max(1.0));
    let rows = RowSums::new(dom, nv + 1, |p, o| {
        let mut sq = 0.0;
        for (c, v) in f.node(p).iter().enumerate() {
            let w = v - mean[c];
            o[c] = w;
            sq += w * w;
        }
        o[nv] = sq;
    });
    let mut s = vec![0.0; nv + 1];
    Ok(family
        .balls()
        .iter()
        .map(|b| {
            if !b.inside_unit_ball() {
                return None;
            }
            let count = rows.ball_sums(b, &mut s);
            if count < 1.0 {
                return Some(0.0);
            }
            let lin: f64 = s[..nv].iter().map(|v| v * v).sum();
            let osc = (s[nv] - lin / count).max(0.0);
            Some((b.radius.powi(-m) * osc * vol).sqrt())
        })
        .collect())
}

/// Discrete BMO seminorm with the `L²` mean oscillation, over the balls of
/// the family contained in `B₁`.
pub fn bmo_seminorm(f: &Field, family: &BallFamily) -> Result<NormReport> {
    let vals: Vec<f64> = bmo_values(f, family)?
        .into_iter()
        .map(|v| v.unwrap_or(f64::NEG_INFINITY))
        .collect();
    if vals.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::InvalidParameter(
            "no ball of the family lies inside the unit ball".into(),
        ));
    }
    Ok(report(NormKind::Bmo, &vals, f.domain(), family))
}

fn report(kind: NormKind, vals: &[f64], dom: &GridDomain, family: &BallFamily) -> NormReport {
    let mut best = 0;
    for (i, v) in vals.iter().enumerate() {
        if *v > vals[best] {
            best = i;
        }
    }
    let b = family.balls()[best];
    NormReport {
        kind,
        value: vals[best].max(0.0),
        center: b.center,
        radius: b.radius,
        family: family.summary(),
        resolution: dom.resolution(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Exponent {
    One,
    Two,
    Infinity,
}

impl Exponent {
    pub fn from_f64(p: f64) -> Result<Self> {
        if p == 1.0 {
            Ok(Exponent::One)
        } else if p == 2.0 {
            Ok(Exponent::Two)
        } else if p == f64::INFINITY {
            Ok(Exponent::Infinity)
        } else {
            Err(Error::InvalidParameter(format!(
                "unsupported exponent p = {p}"
            )))
        }
    }
}

/// `‖f‖_{Lᵖ(region ∩ B₁)}` as a masked Riemann sum, or the nodal max for `p = ∞`.
pub fn lp_norm(f: &Field, p: f64, region: &Ball) -> Result<f64> {
    let e = Exponent::from_f64(p)?;
    let dom = f.domain();
    let m = dom.dim();
    let r2 = region.radius * region.radius * (1.0 + 1e-12);
    let inside = |q: usize| {
        let x = dom.coords(q);
        (0..m)
            .map(|a| (x[a] - region.center[a]).powi(2))
            .sum::<f64>()
            <= r2
    };
    let vol = dom.cell_volume();
    let mut acc = 0.0f64;
    for q in dom.valid_nodes().filter(|&q| inside(q)) {
        let v = f.norm_at(q);
        match e {
            Exponent::One => acc += v * vol,
            Exponent::Two => acc += v * v * vol,
            Exponent::Infinity => acc = acc.max(v),
        }
    }
    Ok(if e == Exponent::Two { acc.sqrt() } else { acc })
}
