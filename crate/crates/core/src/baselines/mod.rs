//! Classical reconstructions: FDK filtered backprojection and Landweber
//! iteration with total-variation regularization.

mod fdk;
mod landweber;
mod tv;

pub use fdk::{fdk_raw, fdk_reconstruct, ramp_filter_row, ramp_filter_row_padded, FdkConfig};
pub use landweber::{estimate_opnorm, landweber_tv, LandweberConfig, LandweberOutput};
pub use tv::{tv_grad, tv_value, tv_value_grad};
