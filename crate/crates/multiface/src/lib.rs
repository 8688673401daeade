pub mod checkpoint;
pub mod cli;
pub mod formats;
pub mod report;
pub mod store;
