pub mod adaptive;
pub mod error;
pub mod flow;
pub mod models;
pub mod multicomponent;
pub mod oracles;
pub mod sav;
pub mod spectral;

pub use error::{Result, SavError};
