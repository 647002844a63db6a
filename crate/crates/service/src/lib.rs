pub mod api;
pub mod clinical;
pub mod error;
pub mod persistence;
pub mod report;

pub use error::{Result, ServiceError};
