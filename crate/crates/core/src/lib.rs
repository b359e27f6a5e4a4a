//! Core data types and classical algorithms for turbulent-video work:
//! frame clips and metrics, dense optical flow with warping, the forward
//! tilt-and-blur degradation simulator, the dynamics analyzer, and motion
//! segmentation enhancement.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the two instantiations used throughout.

pub mod dei;
pub mod filters;
pub mod flow;
pub mod media;
pub mod motion_enhance;
pub mod scalar;
pub mod synth;
pub mod turbsim;

pub use scalar::Scalar;

pub type FrameF32 = media::Frame<f32>;
pub type FrameF64 = media::Frame<f64>;
pub type ClipF32 = media::FrameClip<f32>;
pub type ClipF64 = media::FrameClip<f64>;
pub type FlowF32 = flow::FlowField<f32>;
pub type FlowF64 = flow::FlowField<f64>;
pub type TiltF32 = flow::TiltField<f32>;
pub type TiltF64 = flow::TiltField<f64>;
