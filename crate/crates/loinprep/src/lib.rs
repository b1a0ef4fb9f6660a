//! `loinprep` is a software-only toolkit for preparing slices from a deformable
//! fish loin with a team of robot arms. It bundles four independently usable
//! capabilities plus the shared infrastructure they sit on:
//!
//! * [`rl`] — goal-conditioned reinforcement learning that reshapes a loin with
//!   short straight pushes, driven by boundary-token transformer policies and
//!   trained inside the bundled 2-D soft-body simulator ([`sim`]).
//! * [`cutting`] — a cutting-motion planner that keeps a curved knife edge
//!   tangent to the board while slicing, plus tactile contact detection
//!   ([`tactile`]) and on-line trajectory correction.
//! * [`servo`] — 4-DoF image-based visual servoing that picks finished slices
//!   with chopstick-style fingers, exercised against a small synthetic renderer.
//! * [`pipeline`] — an end-to-end orchestration of shape → cut → pick with a
//!   deterministic report format.
//!
//! Everything is deterministic under a fixed seed: RNGs are ChaCha-seeded,
//! reports carry simulated (not wall-clock) timings, and the tiny neural-network
//! stack ([`nn`]) accumulates gradients in a fixed order.
//!
//! Geometry conventions: right-handed frames, meters, poses as rotation matrix
//! plus translation ([`geom::Pose`]), image masks indexed `(row = y, col = x)`
//! at 2 mm/px unless configured otherwise.

pub mod contour;
pub mod cutting;
pub mod geom;
pub mod nn;
pub mod pipeline;
pub mod rl;
pub mod servo;
pub mod sim;
pub mod tactile;
