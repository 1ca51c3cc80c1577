pub mod autodiff;
pub mod cli;
pub mod data;
pub mod model;
pub mod relax;
pub mod train;
