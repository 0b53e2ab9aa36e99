pub mod error;
pub mod field;
pub mod points;
pub mod rng;
pub mod stats;
pub mod vp_sde;
pub mod score_net;
pub mod losses;
pub mod time_sampler;
pub mod elbo;
pub mod generative;
pub mod dt_elbo;
pub mod sampler;
pub mod svg;
pub mod data;
pub mod train;
pub mod checks;
pub mod cli;
