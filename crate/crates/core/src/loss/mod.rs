//! Cost terms and their gradients with respect to the predicted image.
//!
//! Every image-space term is normalized by `N·P` (batch size times elements
//! per image) so the default λ weights do not depend on image size.

mod edge;
mod joint;
mod l2;
mod ssim;
mod tv;
mod window;

pub use edge::{edge_weight_map, sobel_magnitude, WeightMap, DEFAULT_EDGE_BETA};
pub use joint::{joint_loss, weight_decay, LossKind, LossReport, LossWeights};
pub use l2::l2_loss;
pub use ssim::{ssim_loss, ssim_map, SsimConfig, SsimMode};
pub use tv::{tv_loss, DEFAULT_TV_EPS};
pub use window::reflect_index;
