pub mod datasets;
pub mod intervals;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod probfile;
pub mod seed;
pub mod shift;
