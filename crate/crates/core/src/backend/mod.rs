//! Promptable-segmentation backends.
//!
//! A backend answers one [`SegmentationRequest`] (one positive point plus all
//! negatives of a frame) with candidate masks and confidence scores. The
//! in-process [`OracleBackend`] returns ground-truth region components; the
//! [`WireClient`] talks to an external model server over newline-delimited
//! JSON.

mod oracle;
pub mod rle;
pub mod wire;

pub use oracle::OracleBackend;
pub use rle::Rle;
pub use wire::WireClient;

use crate::grid::Mask;
use crate::prompt::{Polarity, PromptSet};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("prompt set has no positive prompts")]
    EmptyPrompts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptPoint {
    pub u: i64,
    pub v: i64,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationRequest {
    pub request_id: String,
    pub image_ref: String,
    /// Image `(width, height)`.
    pub size: (usize, usize),
    pub points: Vec<PromptPoint>,
}

impl SegmentationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.points.iter().any(|p| p.positive) {
            return Err(BackendError::Protocol(format!("request {} has no positive point", self.request_id)));
        }
        let (w, h) = self.size;
        for p in &self.points {
            if p.u < 0 || p.v < 0 || p.u as usize >= w || p.v as usize >= h {
                return Err(BackendError::Protocol(format!("point ({}, {}) outside {}x{} image", p.u, p.v, w, h)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub masks: Vec<Mask>,
    pub scores: Vec<f64>,
}

impl SegmentationResult {
    /// Checks mask sizes, score range and list lengths.
    pub fn validate(&self, size: (usize, usize)) -> Result<(), BackendError> {
        if self.masks.len() != self.scores.len() {
            return Err(BackendError::Protocol(format!("{} masks but {} scores", self.masks.len(), self.scores.len())));
        }
        for m in &self.masks {
            if m.size() != size {
                return Err(BackendError::Protocol(format!(
                    "mask size {:?} does not match image {:?}",
                    m.size(),
                    size
                )));
            }
        }
        if let Some(s) = self.scores.iter().find(|s| !(s.is_finite() && (0.0..=1.0).contains(*s))) {
            return Err(BackendError::Protocol(format!("score {s} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Anything that can answer segmentation requests. Implementations must be
/// safe to call concurrently; they may serialize internally.
pub trait SegmentationBackend: Send + Sync {
    fn segment(&self, req: &SegmentationRequest) -> Result<SegmentationResult, BackendError>;
}

impl<B: SegmentationBackend + ?Sized> SegmentationBackend for Box<B> {
    fn segment(&self, req: &SegmentationRequest) -> Result<SegmentationResult, BackendError> {
        (**self).segment(req)
    }
}

/// One request per positive prompt, each carrying every negative prompt.
/// Returns the requests paired with the index of their positive prompt in
/// `prompts.prompts`.
pub fn one_query_per_positive(
    prompts: &PromptSet,
    image_ref: &str,
    size: (usize, usize),
) -> Result<Vec<(usize, SegmentationRequest)>, BackendError> {
    let reqs = one_query_per_prompt(prompts, image_ref, size, Polarity::Positive);
    if reqs.is_empty() {
        return Err(BackendError::EmptyPrompts);
    }
    Ok(reqs)
}

/// One request per prompt of polarity `own`: that prompt is the request's
/// positive point and every prompt of the other polarity is a negative point.
/// With `own = Negative` this asks the backend for explicit obstacle regions.
pub fn one_query_per_prompt(
    prompts: &PromptSet,
    image_ref: &str,
    size: (usize, usize),
    own: Polarity,
) -> Vec<(usize, SegmentationRequest)> {
    let others: Vec<PromptPoint> = prompts
        .prompts
        .iter()
        .filter(|p| p.polarity != own)
        .map(|p| PromptPoint { u: p.u as i64, v: p.v as i64, positive: false })
        .collect();
    prompts
        .prompts
        .iter()
        .enumerate()
        .filter(|(_, p)| p.polarity == own)
        .map(|(i, p)| {
            let mut points = vec![PromptPoint { u: p.u as i64, v: p.v as i64, positive: true }];
            points.extend_from_slice(&others);
            (
                i,
                SegmentationRequest {
                    request_id: format!("{}:{}", prompts.image_id, i),
                    image_ref: image_ref.to_string(),
                    size,
                    points,
                },
            )
        })
        .collect()
}
