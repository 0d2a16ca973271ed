// SPDX-License-Identifier: Apache-2.0

//! File formats, configuration and the end-to-end pipeline behind the `tdnc`
//! command.

pub mod config;
pub mod idx;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod vcd;
