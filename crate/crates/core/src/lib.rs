pub mod dataset;
pub mod eval;
pub mod grid;
pub mod knn;
pub mod layers;
pub mod midi_io;
pub mod models;
pub mod numerics;
pub mod selfcheck;
pub mod synthdata;
