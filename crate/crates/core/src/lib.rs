//! Joint motion-deblurring and brain tumor segmentation for multimodal 3D MRI.

pub mod autodiff;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod motion;
pub mod net;
pub mod real;
pub mod report;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use real::{Precision, Real};
