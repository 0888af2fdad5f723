pub mod data;
pub mod decomposition;
pub mod graph;
pub mod interp;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod training;
pub mod viz;
