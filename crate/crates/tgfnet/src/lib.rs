//! TGFNet: a text-guided optical-SAR fusion network for visual question
//! answering, built on a small reverse-mode autodiff tape, together with
//! the synthetic benchmark task used to exercise it.

pub mod amef;
pub mod cfar;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod synthvqa;
pub mod tensor;
pub mod trainer;
