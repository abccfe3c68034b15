pub mod config;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod motion;
pub mod pipeline;
pub mod propagation;
pub mod segmentation;
pub mod stats;
pub mod synth;
pub mod triangulation;
