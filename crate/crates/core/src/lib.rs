//! Anytime-feasible solvers for monotone variational inequalities.
//!
//! A problem `VI(F, C)` asks for `x* ∈ C` with `(x − x*)ᵀF(x*) ≥ 0` for all
//! `x ∈ C`, where `C = {x : g(x) ≤ 0, Hx = c_h}`. The crate integrates three
//! continuous-time flows whose equilibria are the solutions:
//!
//! * the projected monotone flow, `ẋ = Proj_{T_C(x)}(−F(x))`, which keeps
//!   feasible trajectories feasible;
//! * the safe monotone flow, which projects onto the α-restricted tangent set
//!   and is well defined (and attracting to `C`) outside the feasible set;
//! * the recursive safe monotone flow, which replaces the per-step QP with a
//!   fast multiplier dynamics.
//!
//! The [`analysis`] module evaluates the Lyapunov functions and contraction
//! rates that certify these flows along computed trajectories.

pub mod analysis;
pub mod flows;
pub mod io;
pub mod linalg;
pub mod problems;
pub mod qp;
pub mod vi;

pub use flows::{FlowError, FlowKind, FlowParams, FlowState, Trajectory};
pub use qp::{ProjectionResult, QpError, QpSettings, QpSpec};
pub use vi::{ActiveSets, ConstraintSet, KktTriple, OperatorF, ViError, ViProblem};
