//! Encoder, heads, reference attention and the autodiff tape they run on.

pub mod attention;
pub mod checkpoint;
pub mod encoder;
pub mod heads;
mod params;
pub mod tape;

pub use attention::{attention_backward, attention_weights, scaled_dot_attention, softmax_rows, AttentionInput};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use encoder::{Embedding, EncoderKind, EncoderSpec, EncoderTrace, ImageEncoder, TinyEncoder};
pub use heads::{softmax, ClassScores, ClassifierHead, ProjectionHead};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
