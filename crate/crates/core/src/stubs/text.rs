use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Context length of every prompt embedding.
pub const MAX_TOKENS: usize = 16;
/// Rows of the hashed token table.
pub const VOCAB_ROWS: u64 = 4096;
/// Width used by the metrics; also the default `text_dim`.
pub const DEFAULT_TEXT_DIM: usize = 64;

const TABLE_SEED: u64 = 0x7465_7874_5f65_6d62;
const PAD_ROW: u64 = u64::MAX;

/// Token vectors conditioning the denoiser, `MAX_TOKENS × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<f64>,
    pub dim: usize,
    pub source_text: String,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_unconditional(&self) -> bool {
        self.source_text.is_empty()
    }

    /// `[1, MAX_TOKENS, dim]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[1, self.len(), self.dim], &self.tokens).expect("prompt shape")
    }

    /// Mean token vector, L2-normalized.
    pub fn pooled(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.len() {
            mean.iter_mut().zip(self.token(i)).for_each(|(m, v)| *m += v);
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        mean.iter().map(|v| v / norm).collect()
    }
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Lowercased words, split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn table_row(row: u64, dim: usize) -> Vec<f64> {
    RngState::new(TABLE_SEED).split(row).normal_vec(dim, 1.0)
}

fn position(pos: usize, dim: usize) -> impl Iterator<Item = f64> {
    let half = (dim / 2).max(1);
    (0..dim).map(move |i| {
        let freq = (-(10_000f64.ln()) * (i % half) as f64 / half as f64).exp();
        let angle = pos as f64 * freq;
        if i < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Deterministic stand-in for a pretrained text encoder.
///
/// Each word is hashed into a fixed Gaussian table row, a sinusoidal
/// position code is added, and the sequence is truncated or padded to
/// [`MAX_TOKENS`] with a reserved pad row. Text with no words maps to the
/// unconditional embedding (all pad rows).
pub fn encode_text(text: &str, dim: usize) -> PromptEmbedding {
    let words = tokenize(text);
    let pad = table_row(PAD_ROW, dim);
    let mut tokens = Vec::with_capacity(MAX_TOKENS * dim);
    for pos in 0..MAX_TOKENS {
        let base = match words.get(pos) {
            Some(w) => table_row(fnv1a64(w.as_bytes()) % VOCAB_ROWS, dim),
            None => pad.clone(),
        };
        tokens.extend(base.iter().zip(position(pos, dim)).map(|(b, p)| b + p));
    }
    PromptEmbedding {
        tokens,
        dim,
        source_text: if words.is_empty() { String::new() } else { text.to_string() },
    }
}

/// Embedding of the empty prompt.
pub fn unconditional(dim: usize) -> PromptEmbedding {
    encode_text("", dim)
}
