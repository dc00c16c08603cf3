//! Deterministic stand-ins for the pretrained text encoder, autoencoder
//! and image embedder.

pub mod codec;
pub mod embed;
pub mod text;

pub use codec::{decode_video, encode_video, PixelVideo};
pub use embed::{cosine, embed_frame, FRAME_EMBED_DIM};
pub use text::{encode_text, unconditional, PromptEmbedding, MAX_TOKENS};
