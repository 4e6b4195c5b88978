pub mod batch;
pub mod calib;
pub mod control;
pub mod fixtures;
pub mod optimize;
pub mod pipeline;
pub mod risk;
pub mod sim;
