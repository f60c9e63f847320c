pub mod cli;
pub mod clustering;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod graphs;
pub mod matching;
pub mod numgrad;
pub mod objective;
pub mod pipeline;
