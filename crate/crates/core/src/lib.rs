pub mod numerics;
pub mod rng;
pub mod data;
pub mod backbone;
pub mod adapters;
pub mod federation;
pub mod persistence;
pub mod experiment;
