//! Sensitivity control, the Gaussian mechanism and privacy accounting.

mod accountant;
mod clip;
mod noise;

pub use accountant::{
    calibrate_sigma, compose_and_convert, default_orders, epsilon_for, rdp_step, AccountantState,
    CALIBRATION_REL_TOL, SIGMA_MAX,
};
pub use clip::{clip_in_place, clip_per_sample, ClipConfig};
pub use noise::{gaussian_perturb, NoiseConfig};
