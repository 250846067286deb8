//! Stage nodes, Lagrange interpolation in barycentric form, and
//! Gauss–Legendre quadrature assembled by the Golub–Welsch eigenproblem.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Points closer than this (scaled by max(h, 1)) to a stage node are
/// evaluated through the exact node branch of the barycentric formulas.
const NODE_SNAP: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum BasisError {
    #[error("n must be at least 1, got {0}")]
    InvalidDegree(usize),
    #[error("quadrature must use at least one point")]
    InvalidQuadratureSize,
    #[error("step length must be positive, got {0}")]
    InvalidStep(f64),
    #[error("nodes must be strictly increasing (node {index} repeats or decreases)")]
    NonIncreasingNodes { index: usize },
    #[error("evaluation point {point} lies outside [0, {h}]")]
    EvalOutOfRange { point: f64, h: f64 },
    #[error("tableau needs {expected} quadrature columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, BasisError>;

/// Stage nodes on `[0, h]` with precomputed barycentric weights.
///
/// The endpoints 0 and h are always nodes, so the Lagrange basis
/// interpolates both ends of the step.
#[derive(Debug, Clone)]
pub struct StageNodes {
    h: f64,
    nodes: Vec<f64>,
    bary: Vec<f64>,
}

/// Chebyshev–Lobatto points rescaled to `[0, h]`, ascending:
/// `t_k = (h/2)(1 - cos(k pi / n))` for `k = 0..=n`.
pub fn chebyshev_lobatto_nodes(n: usize, h: f64) -> Result<StageNodes> {
    if n < 1 {
        return Err(BasisError::InvalidDegree(n));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(BasisError::InvalidStep(h));
    }
    let mut nodes = Vec::with_capacity(n + 1);
    nodes.push(0.0);
    for k in 1..n {
        let s = (0.5 * k as f64 * std::f64::consts::PI / n as f64).sin();
        nodes.push(h * s * s);
    }
    nodes.push(h);
    StageNodes::from_nodes(nodes, h)
}

impl StageNodes {
    /// Build from an explicit ascending node list on `[0, h]`.
    pub fn from_nodes(nodes: Vec<f64>, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(BasisError::InvalidStep(h));
        }
        if nodes.len() < 2 {
            return Err(BasisError::InvalidDegree(nodes.len().saturating_sub(1)));
        }
        for i in 1..nodes.len() {
            if nodes[i] <= nodes[i - 1] {
                return Err(BasisError::NonIncreasingNodes { index: i });
            }
        }
        let bary = barycentric_weights(&nodes);
        Ok(StageNodes { h, nodes, bary })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Polynomial degree n; the node count is n + 1.
    pub fn degree(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Values and derivatives of every Lagrange basis polynomial at the given
    /// points: `phi[(j, i)] = phi_i(s_j)` and `dphi[(j, i)] = dphi_i/dt (s_j)`,
    /// one row per evaluation point.
    pub fn lagrange_matrices(&self, eval_points: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let snap = NODE_SNAP * self.h.max(1.0);
        let count = self.nodes.len();
        let mut phi = DMatrix::zeros(eval_points.len(), count);
        let mut dphi = DMatrix::zeros(eval_points.len(), count);
        for (row, &x) in eval_points.iter().enumerate() {
            if x < -snap || x > self.h + snap {
                return Err(BasisError::EvalOutOfRange { point: x, h: self.h });
            }
            match self.nearest_node(x, snap) {
                Some(k) => {
                    // At a node the basis is the Kronecker delta and the
                    // derivative is a row of the differentiation matrix.
                    phi[(row, k)] = 1.0;
                    let mut diag = 0.0;
                    for i in 0..count {
                        if i != k {
                            let d = (self.bary[i] / self.bary[k]) / (self.nodes[k] - self.nodes[i]);
                            dphi[(row, i)] = d;
                            diag -= d;
                        }
                    }
                    dphi[(row, k)] = diag;
                }
                None => {
                    let u: Vec<f64> = (0..count)
                        .map(|i| self.bary[i] / (x - self.nodes[i]))
                        .collect();
                    let du: Vec<f64> = (0..count)
                        .map(|i| {
                            let d = x - self.nodes[i];
                            -self.bary[i] / (d * d)
                        })
                        .collect();
                    let s: f64 = u.iter().sum();
                    let ds: f64 = du.iter().sum();
                    for i in 0..count {
                        phi[(row, i)] = u[i] / s;
                        dphi[(row, i)] = (du[i] * s - u[i] * ds) / (s * s);
                    }
                }
            }
        }
        Ok((phi, dphi))
    }

    fn nearest_node(&self, x: f64, snap: f64) -> Option<usize> {
        self.nodes.iter().position(|&t| (x - t).abs() <= snap)
    }
}

fn barycentric_weights(nodes: &[f64]) -> Vec<f64> {
    let mut w = vec![1.0; nodes.len()];
    for i in 0..nodes.len() {
        for j in 0..nodes.len() {
            if i != j {
                w[i] /= nodes[i] - nodes[j];
            }
        }
    }
    // The formula is scale invariant; normalizing keeps the weights away
    // from overflow for fine node sets.
    let scale = w.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    w.iter_mut().for_each(|v| *v /= scale);
    w
}

/// Gauss–Legendre rule on the unit interval: points in (0, 1), weights
/// summing to one, exact for polynomials of degree 2m - 1.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Build the m-point Gauss–Legendre rule by solving the symmetric
/// tridiagonal Jacobi eigenproblem.
pub fn gauss_legendre_rule(m: usize) -> Result<QuadratureRule> {
    if m < 1 {
        return Err(BasisError::InvalidQuadratureSize);
    }
    let mut jacobi = DMatrix::zeros(m, m);
    for k in 1..m {
        let beta = k as f64 / ((4 * k * k - 1) as f64).sqrt();
        jacobi[(k, k - 1)] = beta;
        jacobi[(k - 1, k)] = beta;
    }
    let eigen = SymmetricEigen::new(jacobi);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]));
    let mut points = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for idx in order {
        // Map the [-1, 1] node and weight 2*v0^2 onto the unit interval.
        points.push(0.5 * (eigen.eigenvalues[idx] + 1.0));
        let v0 = eigen.eigenvectors[(0, idx)];
        weights.push(v0 * v0);
    }
    Ok(QuadratureRule { points, weights })
}

/// Basis values and derivatives precomputed wherever the discrete action
/// needs them: at every quadrature point and at both step endpoints.
#[derive(Debug, Clone)]
pub struct BasisTableau {
    pub h: f64,
    /// `phi[(j, i)] = phi_i(c_j h)`, rows indexed by quadrature point.
    pub phi: DMatrix<f64>,
    pub dphi: DMatrix<f64>,
    pub phi_at_0: DVector<f64>,
    pub phi_at_h: DVector<f64>,
    pub dphi_at_0: DVector<f64>,
    pub dphi_at_h: DVector<f64>,
}

impl BasisTableau {
    pub fn new(nodes: &StageNodes, quad: &QuadratureRule) -> Result<Self> {
        let h = nodes.h();
        let scaled: Vec<f64> = quad.points.iter().map(|c| c * h).collect();
        let (phi, dphi) = nodes.lagrange_matrices(&scaled)?;
        let (phi_ends, dphi_ends) = nodes.lagrange_matrices(&[0.0, h])?;
        Ok(BasisTableau {
            h,
            phi,
            dphi,
            phi_at_0: phi_ends.row(0).transpose(),
            phi_at_h: phi_ends.row(1).transpose(),
            dphi_at_0: dphi_ends.row(0).transpose(),
            dphi_at_h: dphi_ends.row(1).transpose(),
        })
    }

    /// Node count n + 1.
    pub fn stage_count(&self) -> usize {
        self.phi.ncols()
    }

    /// Quadrature point count m.
    pub fn quad_count(&self) -> usize {
        self.phi.nrows()
    }
}
