//! Core library for a bird's-eye-view driving world model.
//!
//! The pipeline tokenizes driving scenes three ways — a vector-quantized
//! codec for rasterized maps, a hierarchical positional tokenizer for
//! agent states, and learnable slot/frame embeddings — then trains an
//! autoregressive transformer over the flattened scene-token sequence.
//! Rollouts replay the model under different ground-truth substitution
//! rules (scene generation, traffic simulation, closed-loop simulation,
//! motion planning, conditional generation) and are scored with
//! trajectory and map metrics.

pub mod agent_token;
pub mod assign;
pub mod codec;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod rollout;
pub mod scene;
pub mod synth;
pub mod world;

pub use scene::{AgentState, Point, Polyline, Pose2D, Scenario, SceneFrame};
