pub mod config;
pub mod eval;
pub mod grammar;
pub mod grpo;
pub mod http;
pub mod imagekit;
pub mod mat;
pub mod reward;
pub mod rollout;
pub mod sandbox;
pub mod search;
