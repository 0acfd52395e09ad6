//! Std side of the selection toolkit: the gradient datastore, corpus and
//! config files, and the end-to-end pipeline behind the `less` CLI.

pub mod config;
pub mod corpus;
pub mod datastore;
pub mod pipeline;
pub mod report;
