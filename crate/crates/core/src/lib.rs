//! Knowledge-enriched transformer for emotion detection in textual
//! conversations: a self-contained f64 training stack with a reverse-mode
//! autodiff engine, commonsense knowledge retrieval with affective graph
//! attention, hierarchical self-attention over conversation context, and a
//! train/evaluate pipeline.

pub mod attention;
pub mod data;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
