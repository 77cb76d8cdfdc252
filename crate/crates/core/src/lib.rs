//! Text- and shape-guided object inpainting with a mask-conditioned
//! diffusion model.

pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod imageio;
pub mod losses;
pub mod maskops;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod shapesdata;
pub mod tensor;
pub mod trainer;

pub use denoiser::{
    Condition, ConditionKind, Denoiser, DenoiserConfig, DenoiserOutput, Vocabulary,
};
pub use error::{Error, Result};
pub use evalkit::{EvalReport, FidResult};
pub use maskops::{InstanceMask, LadderConfig, PrecisionMask};
pub use sampler::{SampleRequest, SampleResult, SamplerConfig, SamplerKind};
pub use schedule::{ImageTensor, NoiseSchedule, ScheduleConfig};
pub use shapesdata::{Dataset, DatasetSpec};
pub use tensor::{Float, Tensor};
pub use trainer::{TrainConfig, TrainState};
