// SPDX-License-Identifier: Apache-2.0

pub mod auth;
pub mod catalog;
pub mod clock;
pub mod dms;
pub mod engine;
pub mod error;
pub mod jobs;
pub mod orchestrator;
pub mod registration;
pub mod repository;
pub mod store;
pub mod tale;
