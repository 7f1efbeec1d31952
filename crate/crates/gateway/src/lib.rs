//! Elicits verbalized class probabilities from a chat-completion endpoint.

pub mod client;
pub mod parser;
pub mod templates;

pub use client::{ClassifyOutput, Gateway, GatewayConfig, GatewayError, Instance, RetryPolicy, RunStats, TwoStageVariant};
pub use parser::{parse_response, ParsedResponse, SampleReduction};
pub use templates::{PromptTemplate, TemplateName};
#[cfg(feature = "stub")]
pub mod stub;
