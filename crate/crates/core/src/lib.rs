pub mod autodiff;
pub mod cli;
pub mod controller;
pub mod data;
pub mod error;
pub mod policy;
pub mod segment;
pub mod sim;
pub mod waypoint;

pub use error::{Error, Result};
