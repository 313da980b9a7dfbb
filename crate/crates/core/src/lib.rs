pub mod config;
pub mod delaunay;
pub mod encoder;
pub mod geometry;
pub mod graph;
pub mod hungarian;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pose;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wire;
