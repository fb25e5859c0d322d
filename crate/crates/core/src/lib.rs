//! Plant-data integration middleware.
//!
//! Layers, bottom up: [`gateway`] (simulated DCS sources), [`rtdb`] (the
//! in-memory historian with trend files), [`appmods`] (computed variables
//! and reports), joined by the [`session`] protocols. [`topology`] maps the
//! logical components onto nodes and [`harness`] boots, drives and measures
//! the result.

pub mod appmods;
pub mod gateway;
pub mod harness;
pub mod rtdb;
pub mod session;
pub mod topology;
