//! Consistent multi-scale zoom stacks from parallel diffusion processes.
//!
//! A [`ZoomStack`] holds `N` same-size layers at magnifications `p^i`.
//! [`joint_sample`] runs one denoising chain per level and, after every
//! step, merges their clean-image estimates back into a single stack with
//! Laplacian-pyramid blending, so that renders at every zoom level agree
//! on their overlap by construction.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grounding;
pub mod image;
pub mod protocol;
pub mod pyramid;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod stackfile;
pub mod synthetic;
pub mod verify;
pub mod video;
pub mod zoom;

pub use denoiser::{DenoiseQuery, Denoiser, EchoDenoiser, GaussianDenoiser, OracleDenoiser};
pub use diffusion::{
    cfg_combine, ddpm_update, make_schedule, predict_clean, NoiseSchedule, ScheduleKind,
};
pub use error::{Error, Result};
pub use grounding::{
    apply_grounding, grounding_grad, grounding_loss, AdamState, GroundingConfig,
};
pub use image::Image;
pub use protocol::{Endpoint, RemoteDenoiser};
pub use pyramid::{
    blend_layer, blend_stack, build_laplacian, naive_blend, recompose, LaplacianPyramid,
    ObservationSet,
};
pub use sampler::{
    joint_sample, sample_chain, sample_iterative, BlendMode, NoiseStrategy, SamplerConfig,
    SamplingTrace,
};
pub use scene::{parse_scene_spec, SceneSpec};
pub use video::{export_sequence, render_frame};
pub use zoom::{
    center_mask, downscale, downscale_once, CenterMask, DownscaleMode, NoiseMode, NoiseStack,
    ZoomSchedule, ZoomStack,
};
