//! Variational integrators on SO(3) that reach high order by enriching a
//! polynomial stage basis instead of shrinking the time step.
//!
//! One step extremizes a discrete action built from a Cayley-transform natural
//! chart, Chebyshev–Lobatto stage nodes, and Gauss–Legendre quadrature. The
//! crate ships the chart algebra ([`so3`]), the stage basis and quadrature
//! ([`basis`]), the rigid-body and 3D-pendulum models ([`models`]), the
//! one-step map and its Newton solver ([`stepper`]), conserved-quantity and
//! convergence diagnostics with an independent splitting reference
//! ([`diagnostics`]), and the experiment command line ([`cli`]).

pub mod basis;
pub mod cli;
pub mod diagnostics;
pub mod models;
pub mod so3;
pub mod stepper;
