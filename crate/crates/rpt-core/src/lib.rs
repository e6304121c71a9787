//! Self-contained CPU engine for regional-prior window-attention
//! super-resolution: a dense-tensor autodiff tape, the RPA layer and network,
//! training with prior-token learning-rate amplification, bicubic data
//! pipelines, and the finite-difference verification suite.
//!
//! The crate is `no_std` + `alloc`; file IO, threading, and the CLI live in
//! the companion `rpt-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod data;
pub mod elem;
pub mod error;
pub mod fd;
pub mod model;
pub mod ops;
pub mod params;
pub mod pnm;
pub mod rng;
pub mod rpa;
pub mod rten;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod window;

pub use elem::{Dtype, Elem};
pub use error::{Error, Result};
pub use model::{count_flops, count_macs, ModelConfig, RptSrModel};
pub use ops::{AttnDims, PadMode};
pub use rpa::Variant;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
