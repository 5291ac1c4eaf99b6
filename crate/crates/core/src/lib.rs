//! Training-free detection of synthetic video through evidence discovery,
//! adversarial debate between two hypothesis agents, explanatory-cost
//! adjudication and a final arbiter.
//!
//! The usual entry point is [`harness::Pipeline`], built from a
//! [`config::RunConfig`], a [`backend::ChatProvider`] and a frozen
//! [`knowledge::KbIndex`].

pub mod adjudication;
pub mod arbiter;
pub mod backend;
pub mod config;
pub mod debate;
pub mod domain;
pub mod evidence;
pub mod harness;
pub mod knowledge;
pub mod schema;
pub mod templates;
pub mod testkit;
