//! Frame consistency and textual alignment over the stub embedders,
//! reported on a ×100 scale.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::stubs::text::{tokenize, DEFAULT_TEXT_DIM};
use crate::stubs::{cosine, embed_frame, encode_text, PixelVideo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frame_consistency: f64,
    pub textual_alignment: f64,
}

/// Embeddings of every frame of clip 0.
pub fn frame_embeddings(video: &PixelVideo) -> Result<Vec<Vec<f64>>> {
    (0..video.frames())
        .map(|f| embed_frame(&video.frame(0, f), video.height(), video.width()))
        .collect()
}

/// `100 ·` mean cosine over unordered pairs `i < j`.
pub fn frame_consistency_of(embeddings: &[Vec<f64>]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(invalid(format!("frame consistency needs at least 2 frames, got {n}")));
    }
    let mut pairs: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| cosine(&embeddings[i], &embeddings[j]))
        .collect();
    // A fixed summation order makes the score bitwise independent of frame order.
    pairs.sort_by(f64::total_cmp);
    Ok(100.0 * pairs.iter().sum::<f64>() / pairs.len() as f64)
}

pub fn frame_consistency(video: &PixelVideo) -> Result<f64> {
    frame_consistency_of(&frame_embeddings(video)?)
}

/// `100 ·` mean cosine between each frame embedding and `text`.
pub fn textual_alignment_of(embeddings: &[Vec<f64>], text: &[f64]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(invalid("textual alignment needs at least one frame"));
    }
    if let Some(bad) = embeddings.iter().find(|e| e.len() != text.len()) {
        return Err(shape_err(
            "textual_alignment",
            format!("frame embedding has {} dims, prompt has {}", bad.len(), text.len()),
        ));
    }
    let total: f64 = embeddings.iter().map(|e| cosine(e, text)).sum();
    Ok(100.0 * total / embeddings.len() as f64)
}

/// Alignment against the pooled prompt embedding.
pub fn textual_alignment(video: &PixelVideo, prompt: &str) -> Result<f64> {
    if tokenize(prompt).is_empty() {
        return Err(invalid("textual alignment needs a nonempty prompt"));
    }
    textual_alignment_of(&frame_embeddings(video)?, &encode_text(prompt, DEFAULT_TEXT_DIM).pooled())
}

pub fn evaluate(video: &PixelVideo, prompt: &str) -> Result<MetricReport> {
    Ok(MetricReport {
        frame_consistency: frame_consistency(video)?,
        textual_alignment: textual_alignment(video, prompt)?,
    })
}
