pub mod corpus;
pub mod fixtures;
pub mod interaction;
pub mod learning;
pub mod metrics;
pub mod policy;
pub mod sql;
pub mod theory;
