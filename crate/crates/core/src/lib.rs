//! Generation of arbitrarily large 3-D polycrystalline grain structures by
//! tiling a fixed-window diffusion inpainting sampler, with a Potts kinetic
//! Monte Carlo simulator as reference data source.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod ddpm;
pub mod generate;
pub mod kmc;
pub mod mesh;
pub mod planner;
pub mod segment;
pub mod stats;
pub mod voxel;
