//! Forward/backward kernels behind the tape. Pure functions on tensors; the
//! tape records which kernel produced which node and replays the matching
//! backward rule in reverse order.

pub mod attn;
pub mod conv;
pub mod layout;
pub mod linalg;
pub mod norm;

pub use attn::AttnDims;
pub use conv::PadMode;
