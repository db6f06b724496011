//! Comparison systems: an encoder-only classifier and a zero-shot
//! instruction-model client.

pub mod encoder;
pub mod llm;

pub use encoder::{train_encoder, EncoderClassifier, EncoderConfig, Label, LabelSpace};
pub use llm::{
    build_prompt, evaluate_lenient, llm_zero_shot, run_zero_shot, LlmAnswer, LlmClient, LlmRequest, PromptStyle,
    ResponseCache, RetryPolicy, StubClient, ZeroShotConfig,
};
