//! Rank-aware forward passes for scoring many candidates against one request.
//!
//! Context features are shared by every candidate of a request and live at rank 2
//! (`[K × D]`); target features vary per candidate and live at rank 3
//! (`[N × M × D]`). Each layer module provides a vanilla path that broadcasts the
//! context to every candidate and a rank-aware path that computes context-only terms
//! once per request. Every kernel charges its multiply-accumulates to a
//! [`FlopCounter`], and [`cost`] holds the matching closed forms.

pub mod attention;
pub mod bench;
pub mod cost;
pub mod cross;
pub mod error;
pub mod fc;
pub mod fm;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{FlopCounter, Rank2Tensor, Rank3Tensor};
