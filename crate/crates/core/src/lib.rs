//! Factory/network co-simulation: production dynamics, radio and slotted
//! network models, and the decision stacks that consume them (predictive
//! edge offloading, production-aware slicing, REM-based localization and
//! cross-region traffic monitoring).

pub mod config;
pub mod error;
pub mod factory;
pub mod flatfile;
pub mod locate;
pub mod monitor;
pub mod net;
pub mod offload;
pub mod output;
pub mod predict;
pub mod radio;
pub mod runner;
pub mod sim;
pub mod slicing;

pub use error::{Error, Result};
