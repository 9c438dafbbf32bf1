//! Reinforcement learning for conversational search at desk scale.
//!
//! A policy alternates thinking, search-tool calls and answering over a
//! multi-turn dialogue. Trajectories are scored with answer F1 plus an
//! intent reward on the issued queries and optimized with PPO.

pub mod client;
pub mod corpus;
pub mod dialogue;
pub mod env;
pub mod policy;
pub mod ppo;
pub mod reward;
pub mod text;
pub mod train;
pub mod trajectory;
