//! Decoder-only transformer, LoRA adapters, the assistant prefix model and
//! checkpoint persistence.

pub mod checkpoint;
mod config;
mod lora;
mod params;
mod source;

pub use checkpoint::{load_assistant, load_checkpoint, load_model, save_assistant, save_model, Checkpoint};
pub use config::ModelConfig;
pub use lora::{build_assistant, AssistantModel, LayerAdapters, LoraAdapter, ADAPTED};
pub use params::{AdapterVars, LayerParams, LayerVars, ModelParams, ModelVars};
pub use source::{answer_token_logprobs, sequence_logprob, LogitSource};
