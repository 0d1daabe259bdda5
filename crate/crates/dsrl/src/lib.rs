pub mod archive;
pub mod config;
pub mod eval;
pub mod model;
pub mod nn;
pub mod encoders;
pub mod interaction;
pub mod losses;
pub mod mask_oracle;
pub mod replay;
pub mod sac;
pub mod trainer;
pub mod worldsim;
