use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};

/// Geometry realized by the node mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Shape {
    /// Unit ball inscribed in `[-1, 1]^m`.
    Ball,
    /// Unit ball with the closed ball of the given radius removed.
    Annulus { inner: f64 },
    /// Whole cube with periodic wrap-around; every node is interior.
    CubePeriodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeClass {
    Interior,
    BoundaryLayer,
    Exterior,
}

/// Uniform node-centred grid over `[-1, 1]^m` with a shape mask.
#[derive(Debug, Clone)]
pub struct GridDomain {
    dim: usize,
    n: usize,
    h: f64,
    shape: Shape,
    class: Vec<NodeClass>,
    strides: [usize; 3],
}

impl GridDomain {
    pub fn new(dim: usize, n: usize, shape: Shape) -> Result<Arc<Self>> {
        if !(2..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!(
                "dimension must be 2 or 3, got {dim}"
            )));
        }
        if n < 8 {
            return Err(Error::InvalidParameter(format!(
                "resolution must be at least 8, got {n}"
            )));
        }
        if let Shape::Annulus { inner } = shape {
            if !(inner > 0.0 && inner < 0.5) {
                return Err(Error::InvalidParameter(format!(
                    "annulus inner radius must lie in (0, 0.5), got {inner}"
                )));
            }
        }
        let h = exact_spacing(n);
        let mut strides = [0usize; 3];
        for a in 0..dim {
            strides[a] = n.pow((dim - 1 - a) as u32);
        }
        let total = n.pow(dim as u32);
        let nm1 = (n - 1) as i64;
        let outer = nm1 * nm1;
        let inner_layer = (nm1 - 2) * (nm1 - 2);
        let mut class = Vec::with_capacity(total);
        let mut idx = [0usize; 3];
        for _ in 0..total {
            // k = (N-1) x, so k2 = (N-1)^2 |x|^2 exactly; integer classification keeps
            // the mask symmetric.
            let k2: i64 = (0..dim)
                .map(|a| {
                    let k = 2 * idx[a] as i64 - nm1;
                    k * k
                })
                .sum::<i64>();
            let r2 = k2 as f64;
            let c = match shape {
                Shape::CubePeriodic => NodeClass::Interior,
                Shape::Ball => classify_outer(k2, outer, inner_layer),
                Shape::Annulus { inner } => {
                    let rho = inner * nm1 as f64;
                    let rho_h = rho + 2.0;
                    if r2 < rho * rho {
                        NodeClass::Exterior
                    } else {
                        match classify_outer(k2, outer, inner_layer) {
                            NodeClass::Interior if r2 <= rho_h * rho_h => NodeClass::BoundaryLayer,
                            other => other,
                        }
                    }
                }
            };
            class.push(c);
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < n {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Arc::new(Self {
            dim,
            n,
            h,
            shape,
            class,
            strides,
        }))
    }

    pub fn ball(dim: usize, n: usize) -> Result<Arc<Self>> {
        Self::new(dim, n, Shape::Ball)
    }

    pub fn periodic(dim: usize, n: usize) -> Result<Arc<Self>> {
        Self::new(dim, n, Shape::CubePeriodic)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self.shape, Shape::CubePeriodic)
    }

    pub fn num_nodes(&self) -> usize {
        self.class.len()
    }

    /// Quadrature weight `h^m` of a single node.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn class(&self, node: usize) -> NodeClass {
        self.class[node]
    }

    pub fn is_valid(&self, node: usize) -> bool {
        self.class[node] != NodeClass::Exterior
    }

    pub fn is_interior(&self, node: usize) -> bool {
        self.class[node] == NodeClass::Interior
    }

    pub fn valid_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.class.len()).filter(move |&p| self.is_valid(p))
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.class.len()).filter(move |&p| self.is_interior(p))
    }

    pub fn multi_index(&self, node: usize) -> [usize; 3] {
        let mut out = [0usize; 3];
        let mut rem = node;
        for a in 0..self.dim {
            out[a] = rem / self.strides[a];
            rem %= self.strides[a];
        }
        out
    }

    pub fn index(&self, idx: &[usize]) -> usize {
        (0..self.dim).map(|a| idx[a] * self.strides[a]).sum()
    }

    /// Coordinate of grid line `i`; computed as an exact ratio so that the
    /// grid is symmetric under `x -> -x`.
    pub fn coordinate(&self, i: usize) -> f64 {
        let nm1 = (self.n - 1) as f64;
        (2.0 * i as f64 - nm1) / nm1
    }

    /// Position of a node; unused trailing entries are zero.
    pub fn coords(&self, node: usize) -> [f64; 3] {
        let idx = self.multi_index(node);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.coordinate(idx[a]);
        }
        x
    }

    pub fn radius(&self, node: usize) -> f64 {
        let x = self.coords(node);
        (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
    }

    /// Neighbour `offset` steps along `axis`; wraps on periodic domains and
    /// returns `None` when leaving the grid.
    pub fn neighbor(&self, node: usize, axis: usize, offset: isize) -> Option<usize> {
        let i = (node / self.strides[axis]) % self.n;
        let j = i as isize + offset;
        let n = self.n as isize;
        let j = if self.is_periodic() {
            j.rem_euclid(n)
        } else if j < 0 || j >= n {
            return None;
        } else {
            j
        };
        Some((node as isize + (j - i as isize) * self.strides[axis] as isize) as usize)
    }

    /// Neighbour that exists and is not exterior.
    pub fn valid_neighbor(&self, node: usize, axis: usize, offset: isize) -> Option<usize> {
        self.neighbor(node, axis, offset)
            .filter(|&q| self.is_valid(q))
    }

    /// Node closest to a point (ties broken towards lower indices).
    pub fn nearest_node(&self, point: &[f64]) -> usize {
        let mut idx = [0usize; 3];
        for a in 0..self.dim {
            let t = (point[a] + 1.0) / self.h;
            idx[a] = (t.round().max(0.0) as usize).min(self.n - 1);
        }
        self.index(&idx)
    }

    /// Distance from a node to the curved boundary (infinite when periodic).
    pub fn distance_to_boundary(&self, node: usize) -> f64 {
        let r = self.radius(node);
        match self.shape {
            Shape::Ball => 1.0 - r,
            Shape::Annulus { inner } => (1.0 - r).min(r - inner),
            Shape::CubePeriodic => f64::INFINITY,
        }
    }

    /// Valid nodes at least `cells·h` away from the boundary, where the
    /// staircase approximation of the sphere no longer shows.
    pub fn is_deep(&self, node: usize, cells: f64) -> bool {
        self.is_valid(node) && self.distance_to_boundary(node) >= cells * self.h
    }

    pub fn same_grid(&self, other: &GridDomain) -> bool {
        self.dim == other.dim && self.n == other.n && self.shape == other.shape
    }
}

fn classify_outer(k2: i64, outer: i64, inner_layer: i64) -> NodeClass {
    if k2 < inner_layer {
        NodeClass::Interior
    } else if k2 < outer {
        NodeClass::BoundaryLayer
    } else {
        NodeClass::Exterior
    }
}

/// `2/(N−1)`, nudged by a few ulps when needed so that `h·(N−1)` rounds to
/// exactly 2.
fn exact_spacing(n: usize) -> f64 {
    let k = (n - 1) as f64;
    let h0 = 2.0 / k;
    let mut lo = h0;
    let mut hi = h0;
    for _ in 0..8 {
        if hi * k == 2.0 {
            return hi;
        }
        if lo * k == 2.0 {
            return lo;
        }
        hi = f64::from_bits(hi.to_bits() + 1);
        lo = f64::from_bits(lo.to_bits() - 1);
    }
    h0
}
