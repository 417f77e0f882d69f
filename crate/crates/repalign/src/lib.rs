//! Training harness, evaluation drivers, file formats, and CLI around the
//! core library: run configs, the shapes dataset and IDX ingestion,
//! checkpointing, the training loop, alignment/probing/Frechet evals, and
//! pixmap output.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod evals;
pub mod features;
pub mod images;
pub mod trainer;
