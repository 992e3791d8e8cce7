//! Level-set percolation of the Gaussian free field on weighted graphs, with the
//! potential theory, loop soups and random interlacements it is built on.

pub mod dst;
pub mod error;
pub mod gff;
pub mod graph;
pub mod interlacements;
pub mod linalg;
pub mod loopsoup;
pub mod percolation;
pub mod potential;
pub mod replica;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
