//! Dense mapping backend for keyframe-based sparse SLAM.
//!
//! Each keyframe's depth is represented by a short latent code decoded
//! together with the keyframe's image, sparse depth and reprojection-error
//! maps. Codes in a sliding window of covisible keyframes are refined with
//! photometric, reprojection and depth-consistency factors; refined depth
//! maps can be fused into a TSDF volume and meshed.

pub mod config;
pub mod depth_codec;
pub mod factors;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod io;
pub mod noise_sim;
pub mod optimizer;
pub mod pipeline;
pub mod synth;
