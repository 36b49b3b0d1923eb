use std::collections::HashMap;
use std::sync::Arc;

use super::{BackendError, SegmentationBackend, SegmentationRequest, SegmentationResult};
use crate::grid::{flood_fill, Grid};

/// Deterministic stand-in segmenter over ground-truth region maps.
///
/// For each positive point it returns the 4-connected component of equal
/// region id containing that point with score 1.0, unless a negative point
/// falls in the same component.
#[derive(Clone, Default)]
pub struct OracleBackend {
    regions: HashMap<String, Arc<Grid<u32>>>,
}

impl OracleBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, regions: Grid<u32>) {
        self.regions.insert(image_ref.into(), Arc::new(regions));
    }

    pub fn regions(&self, image_ref: &str) -> Option<&Grid<u32>> {
        self.regions.get(image_ref).map(|r| r.as_ref())
    }
}

impl SegmentationBackend for OracleBackend {
    fn segment(&self, req: &SegmentationRequest) -> Result<SegmentationResult, BackendError> {
        req.validate()?;
        let regions = self
            .regions
            .get(&req.image_ref)
            .ok_or_else(|| BackendError::Protocol(format!("unknown image {}", req.image_ref)))?;
        if regions.size() != req.size {
            return Err(BackendError::Protocol(format!(
                "request size {:?} does not match image {:?}",
                req.size,
                regions.size()
            )));
        }
        let mut result = SegmentationResult { masks: Vec::new(), scores: Vec::new() };
        for p in req.points.iter().filter(|p| p.positive) {
            let comp = flood_fill(regions, p.u as usize, p.v as usize, |a, b| a == b);
            let hits_negative = req.points.iter().any(|n| !n.positive && *comp.get(n.u as usize, n.v as usize));
            if !hits_negative {
                result.masks.push(comp);
                result.scores.push(1.0);
            }
        }
        Ok(result)
    }
}
