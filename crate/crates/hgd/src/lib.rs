//! Structure-preserving unpaired image-to-image translation with a
//! key-value memory bank and pixel/structure/global-level contrastive
//! discrimination, plus a synthetic phantom harness and fidelity metrics.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod networks;
pub mod nn;
pub mod npy;
pub mod tape;
pub mod trainer;

pub use error::{HgdError, Result};
