//! Desk-scale laboratory for pediatric segmentation strategies.
//!
//! The pipeline runs end to end on synthetic phantoms: cohorts are generated
//! ([`phantom`]), summarized ([`fingerprint`]) and turned into training plans
//! ([`plan`]); a small 3D U-Net ([`nnet`]) is trained directly or adapted by
//! fine-tuning / rehearsal ([`train`]) with optional contraction augmentation
//! ([`augment`]); models are scored with Dice and Mann-Whitney tests
//! ([`eval`]). [`orchestrator`] wires strategy codes such as `PaSaAdTo` into
//! runs and [`statsbench`] checks the directional trends across seeds.

pub mod augment;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod nnet;
pub mod orchestrator;
pub mod phantom;
pub mod plan;
pub mod psv;
pub mod statsbench;
pub mod train;
pub mod volumes;

pub use error::{PsatError, Result};
