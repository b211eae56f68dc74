//! Random alternating-shear dynamics on the 2-torus and numerical checks of
//! negative-regularity mixing.

pub mod cli_io;
pub mod cocycle_stats;
pub mod experiments;
pub mod rng;
pub mod spectral_fields;
pub mod symbol_calculus;
pub mod torus_maps;
