//! Lagrangian models behind one interface: the free rigid body and the 3D
//! pendulum, each in matrix form (for chart-independent diagnostics) and in
//! chart-coordinate form (for residual assembly).
//!
//! Coordinate form of the kinetic energy on the Cayley chart, with
//! `φ(ξ_a,ξ_b,ξ_c) = ξ̇_a + ξ_b ξ̇_c − ξ_c ξ̇_b` and its cyclic companions:
//!
//! ```text
//! K(ξ, ξ̇) = 2 (1 + ‖ξ‖²)⁻² (I₁ φ(ξ_a,ξ_b,ξ_c)² + I₂ φ(ξ_b,ξ_c,ξ_a)² + I₃ φ(ξ_c,ξ_a,ξ_b)²)
//! ```
//!
//! which is ½ tr(ṘᵀRJ_dRᵀṘ) expressed through the body velocity
//! `Ω = −2(1+‖ξ‖²)⁻¹(ξ̇ + ξ×ξ̇)` of the chart curve. Stage-equation residuals
//! are assembled from the analytic partials of this form; trajectories are
//! invariant under constant rescalings of the Lagrangian, so the rigid body's
//! missing ½ in the matrix form is a diagnostic-only scale.

use crate::so3::{dcay, Mat3, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("inertia entry {index} must be positive, got {value}")]
    NonPositiveInertia { index: usize, value: f64 },
    #[error("potential parameter {name} must be finite and nonnegative")]
    BadPotentialParameter { name: &'static str },
    #[error("model has no potential term")]
    NoPotential,
    #[error("velocity is not tangent to SO(3) at R: skew defect {defect:.3e}")]
    NonTangentVelocity { defect: f64 },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Nonstandard inertia `J_d` (diagonal) together with the reference-frame
/// moments of inertia `J = tr(J_d) I − J_d`.
#[derive(Debug, Clone, Copy)]
pub struct InertiaSpec {
    /// Diagonal of the nonstandard inertia J_d.
    pub jd: Vec3,
    /// Diagonal of J; `moments[i] = Σ_{j≠i} jd[j]`.
    pub moments: Vec3,
}

/// Build the inertia pair from the diagonal of J_d.
pub fn inertia_from_jd(jd: Vec3) -> Result<InertiaSpec> {
    for (index, value) in jd.iter().enumerate() {
        if !(value.is_finite() && *value > 0.0) {
            return Err(ModelError::NonPositiveInertia {
                index,
                value: *value,
            });
        }
    }
    // Pairwise sums keep the identity moments[i] = Σ_{j≠i} jd[j] exact.
    let moments = Vec3::new(jd.y + jd.z, jd.x + jd.z, jd.x + jd.y);
    Ok(InertiaSpec { jd, moments })
}

/// Gravitational potential data for the pendulum; enters the Lagrangian as
/// `+ m g e₃ᵀ R ρ`, i.e. `V(R) = −m g e₃ᵀ R ρ`.
#[derive(Debug, Clone, Copy)]
pub struct PotentialSpec {
    pub mass: f64,
    pub gravity: f64,
    /// Body-fixed center-of-mass direction ρ.
    pub com: Vec3,
    /// Spatial up axis (e₃ unless overridden).
    pub up: Vec3,
}

/// A model is an inertia, an optional potential, and the kinetic prefactor of
/// its matrix-form Lagrangian (the rigid body uses the plain trace, the
/// pendulum carries a ½).
#[derive(Debug, Clone, Copy)]
pub struct ModelSpec {
    pub inertia: InertiaSpec,
    pub kinetic_matrix_prefactor: f64,
    pub potential: Option<PotentialSpec>,
}

impl ModelSpec {
    /// Free rigid body: `L(R, Ṙ) = tr(ṘᵀRJ_dRᵀṘ)`.
    pub fn rigid_body(jd: Vec3) -> Result<Self> {
        Ok(ModelSpec {
            inertia: inertia_from_jd(jd)?,
            kinetic_matrix_prefactor: 1.0,
            potential: None,
        })
    }

    /// 3D pendulum: `L(R, Ṙ) = ½ tr(ṘᵀRJ_dRᵀṘ) + m g e₃ᵀ R ρ`.
    pub fn pendulum(jd: Vec3, mass: f64, gravity: f64, com: Vec3) -> Result<Self> {
        Self::pendulum_with_up(jd, mass, gravity, com, Vec3::z())
    }

    pub fn pendulum_with_up(
        jd: Vec3,
        mass: f64,
        gravity: f64,
        com: Vec3,
        up: Vec3,
    ) -> Result<Self> {
        if !(mass.is_finite() && mass >= 0.0) {
            return Err(ModelError::BadPotentialParameter { name: "mass" });
        }
        if !(gravity.is_finite() && gravity >= 0.0) {
            return Err(ModelError::BadPotentialParameter { name: "gravity" });
        }
        if !com.iter().all(|x| x.is_finite()) {
            return Err(ModelError::BadPotentialParameter { name: "rho" });
        }
        if !up.iter().all(|x| x.is_finite()) {
            return Err(ModelError::BadPotentialParameter { name: "up" });
        }
        Ok(ModelSpec {
            inertia: inertia_from_jd(jd)?,
            kinetic_matrix_prefactor: 0.5,
            potential: Some(PotentialSpec {
                mass,
                gravity,
                com,
                up,
            }),
        })
    }

    pub fn moments(&self) -> Vec3 {
        self.inertia.moments
    }

    pub fn has_potential(&self) -> bool {
        self.potential.is_some()
    }

    /// The Lagrangian evaluated in matrix form on `(R, Ṙ)`.
    ///
    /// Fails when `RᵀṘ` is not skew, i.e. when `Ṙ` is not tangent at `R`.
    pub fn lagrangian_matrix(&self, r: &Mat3, rdot: &Mat3) -> Result<f64> {
        let body = r.transpose() * rdot;
        let defect = (body + body.transpose()).norm();
        if defect > 1e-10 * (1.0 + body.norm()) {
            return Err(ModelError::NonTangentVelocity { defect });
        }
        let jd_mat = Mat3::from_diagonal(&self.inertia.jd);
        let kinetic = self.kinetic_matrix_prefactor
            * (rdot.transpose() * r * jd_mat * r.transpose() * rdot).trace();
        let potential = match &self.potential {
            Some(p) => p.mass * p.gravity * p.up.dot(&(r * p.com)),
            None => 0.0,
        };
        Ok(kinetic + potential)
    }

    /// Kinetic energy of the chart curve at stage coordinates `(ξ, ξ̇)`.
    pub fn kinetic_coords(&self, xi: Vec3, xidot: Vec3) -> f64 {
        let denom = 1.0 + xi.norm_squared();
        let phi = xidot + xi.cross(&xidot);
        let weighted = self.inertia.moments.component_mul(&phi);
        2.0 / (denom * denom) * phi.dot(&weighted)
    }

    /// Potential term of the chart curve: `m g e₃ᵀ (base · Cay(ξ̂)) ρ`, the
    /// sign with which it enters `L = K + m g e₃ᵀRρ`.
    pub fn potential_coords(&self, base: &Mat3, xi: Vec3) -> Result<f64> {
        let p = self.potential.as_ref().ok_or(ModelError::NoPotential)?;
        Ok(p.mass * p.gravity * p.up.dot(&(base * crate::so3::cay(xi) * p.com)))
    }
}

/// What the stepper needs from a model: the chart-coordinate Lagrangian and
/// its analytic partials. The stepper never inspects model internals.
pub trait ChartLagrangian {
    /// Full Lagrangian `K(ξ, ξ̇) + m g e₃ᵀ R(ξ) ρ` (potential absent for the
    /// free rigid body).
    fn lagrangian_coords(&self, base: &Mat3, xi: Vec3, xidot: Vec3) -> f64;

    /// `(∂L/∂ξ, ∂L/∂ξ̇)` at the given chart point.
    fn coordinate_gradients(&self, base: &Mat3, xi: Vec3, xidot: Vec3) -> (Vec3, Vec3);
}

impl ChartLagrangian for ModelSpec {
    fn lagrangian_coords(&self, base: &Mat3, xi: Vec3, xidot: Vec3) -> f64 {
        let kinetic = self.kinetic_coords(xi, xidot);
        match &self.potential {
            Some(_) => kinetic + self.potential_coords(base, xi).expect("potential present"),
            None => kinetic,
        }
    }

    fn coordinate_gradients(&self, base: &Mat3, xi: Vec3, xidot: Vec3) -> (Vec3, Vec3) {
        let denom = 1.0 + xi.norm_squared();
        let phi = xidot + xi.cross(&xidot);
        let weighted = self.inertia.moments.component_mul(&phi);
        let scale = 4.0 / (denom * denom);

        // ∂φ/∂ξ̇ = I + hat(ξ), so ∂K/∂ξ̇ = scale · (I − hat(ξ)) (I∘φ).
        let d_xidot = scale * (weighted - xi.cross(&weighted));
        // Prefactor derivative plus ∂φ/∂ξ = −hat(ξ̇).
        let mut d_xi =
            -2.0 * scale / denom * phi.dot(&weighted) * xi + scale * xidot.cross(&weighted);

        if let Some(p) = &self.potential {
            let mg = p.mass * p.gravity;
            let base_up = base.transpose() * p.up;
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = 1.0;
                d_xi[k] += mg * base_up.dot(&(dcay(xi, e) * p.com));
            }
        }
        (d_xi, d_xidot)
    }
}

/// Body angular velocity `vee(RᵀṘ)` of the chart curve `t ↦ base · Cay(ξ̂(t))`.
pub fn body_velocity(xi: Vec3, xidot: Vec3) -> Vec3 {
    let r = crate::so3::cay(xi);
    let omega_hat = r.transpose() * dcay(xi, xidot);
    let skew = 0.5 * (omega_hat - omega_hat.transpose());
    Vec3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)])
}

/// Stage velocity whose chart curve leaves the origin with body velocity
/// `omega`: `dcay(0, y) = −2 hat(y)` gives `ξ̇ = −Ω/2`.
pub fn chart_velocity_for(omega: Vec3) -> Vec3 {
    -0.5 * omega
}
