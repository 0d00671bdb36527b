pub mod attention;
pub mod block;
pub mod init;
pub mod ops;
pub mod params;

pub use params::{ParamId, ParamStore};
