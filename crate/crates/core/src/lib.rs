pub mod api;
pub mod cli;
pub mod extraction;
pub mod gateway;
pub mod job;
pub mod model;
pub mod prompt;
pub mod store;
pub mod verification;
