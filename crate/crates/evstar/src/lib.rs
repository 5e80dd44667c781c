//! Star tracking with an event camera.
//!
//! The crate turns an asynchronous event stream of a rotating star field into
//! a full attitude trajectory:
//!
//! 1. **Event images** ([`frames`]): partition the stream into fixed windows
//!    and collapse each window onto the pixel grid.
//! 2. **Absolute rotations** ([`star_id`]): select high-activity images, match
//!    their point sets against a star catalog and solve Wahba's problem.
//! 3. **Relative rotations** ([`registration`]): trimmed ICP on backprojected
//!    unit rays between temporally nearby images, which also yields star
//!    tracks as a by-product.
//! 4. **Rotation averaging** ([`averaging`]): fuse both measurement types on
//!    a window-adjacency graph with a dummy anchor node.
//! 5. **Bundle adjustment** ([`bundle`]): jointly refine attitudes and unit
//!    star directions over the tracks (rotation-only, stars at infinity).
//!
//! A deterministic event simulator ([`sim`]) with analytic ground truth, the
//! virtual-telescope calibration math ([`calibration`]), evaluation metrics
//! ([`eval`]) and an end-to-end pipeline driver ([`pipeline`]) round out the
//! toolkit.
//!
//! All rotations are `camera ← inertial`: for a catalog direction `X` the
//! camera-frame ray is `R·X` and its pixel is the dehomogenized `K·R·X`.
//! Image coordinates are x rightward, y downward, origin at the top-left
//! pixel center.

pub mod averaging;
pub mod bundle;
pub mod calibration;
pub mod catalog;
pub mod eval;
pub mod frames;
pub mod geometry;
pub mod linalg;
pub mod pipeline;
pub mod registration;
pub mod sim;
pub mod star_id;

pub use geometry::{Intrinsics, Rotation, UnitVector3};
