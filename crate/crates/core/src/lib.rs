pub mod mode_state;
pub mod optics;
pub mod source_detect;
pub mod experiment;
pub mod analysis;
pub mod cli;
