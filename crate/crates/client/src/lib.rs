//! Wire types of the tonescope HTTP API and, with the `http` feature, a
//! blocking client for it.

pub mod api;
#[cfg(feature = "http")]
mod client;

#[cfg(feature = "http")]
pub use client::{Client, ClientError};
