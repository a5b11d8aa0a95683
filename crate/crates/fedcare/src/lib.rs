//! HTTP services and wire transport for fedcare.

pub mod client;
pub mod cloud_api;
pub mod edge_api;
pub mod wire;

pub use client::HttpTransport;
pub use wire::Wire;
