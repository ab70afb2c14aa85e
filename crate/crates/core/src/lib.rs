pub mod augment;
pub mod color;
pub mod error;
mod fsutil;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod segmentation;
pub mod synthetic;
pub mod tps;

pub use error::{Error, Result};
pub use imaging::{BorderPolicy, CoordGrid, FlowField, Image, Mask};
