//! Mask selection and fusion of footprint, seed and mask evidence into the
//! per-pixel pseudo label.
//!
//! Priority: footprint > NEG seed > accepted mask > ignore.

use serde::{Deserialize, Serialize};

use crate::backend::SegmentationResult;
use crate::footprint::FootprintMask;
use crate::grid::{connected_components, Grid, Mask};
use crate::prior::{SeedImage, SeedPixel};
use crate::prompt::PromptSet;

pub const NON_TRAVERSABLE: u8 = 0;
pub const TRAVERSABLE: u8 = 1;
pub const IGNORE: u8 = 255;

/// Per-pixel class map over {0, 1, 255}.
pub type LabelImage = Grid<u8>;

pub fn is_valid_label_image(labels: &LabelImage) -> bool {
    labels.iter().all(|&x| x == NON_TRAVERSABLE || x == TRAVERSABLE || x == IGNORE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    pub score_min: f64,
    pub neg_frac_max: f64,
    pub area_frac_max: f64,
    /// Dilation radius of NEG seed pixels (pixels).
    pub r_neg: usize,
    pub min_component: usize,
    /// Also query the backend once per negative prompt and label the
    /// returned masks non-traversable (below NEG seeds in priority).
    pub negative_queries: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            score_min: 0.8,
            neg_frac_max: 0.1,
            area_frac_max: 0.5,
            r_neg: 3,
            min_component: 64,
            negative_queries: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcceptedMask {
    /// Index of the originating prompt in `PromptSet::prompts`.
    pub prompt_index: usize,
    /// Index of the mask within that prompt's result.
    pub mask_index: usize,
    pub mask: Mask,
}

/// Keeps masks that score at least `score_min`, contain their own prompt,
/// contain at most `neg_frac_max` of the opposite-polarity prompts and
/// cover at most `area_frac_max` of the image.
pub fn select_masks(
    results: &[(usize, SegmentationResult)],
    prompts: &PromptSet,
    params: &FusionParams,
) -> Vec<AcceptedMask> {
    let mut accepted = Vec::new();
    for (prompt_index, result) in results {
        let own = prompts.prompts[*prompt_index];
        let opposite: Vec<_> = prompts.prompts.iter().filter(|p| p.polarity != own.polarity).collect();
        for (mask_index, (mask, &score)) in result.masks.iter().zip(&result.scores).enumerate() {
            if score < params.score_min {
                continue;
            }
            if !mask.contains(own.u as i64, own.v as i64) || !*mask.get(own.u as usize, own.v as usize) {
                continue;
            }
            let inside = opposite
                .iter()
                .filter(|p| mask.contains(p.u as i64, p.v as i64) && *mask.get(p.u as usize, p.v as usize))
                .count();
            let frac = if opposite.is_empty() { 0.0 } else { inside as f64 / opposite.len() as f64 };
            if frac > params.neg_frac_max {
                continue;
            }
            if mask.count() as f64 > params.area_frac_max * mask.len() as f64 {
                continue;
            }
            accepted.push(AcceptedMask { prompt_index: *prompt_index, mask_index, mask: mask.clone() });
        }
    }
    accepted
}

/// Fuses evidence into a label image. `negative_masks` are masks retrieved
/// from negative prompts (empty unless negative queries are enabled).
///
/// Starts all-ignore, sets accepted masks to 1, negative masks to 0, dilated
/// NEG seeds to 0 and finally visible footprint pixels to 1. Occluded
/// footprint pixels get no footprint override.
pub fn fuse_labels(
    accepted: &[&Mask],
    negative_masks: &[&Mask],
    footprint: &FootprintMask,
    seeds: &SeedImage,
    r_neg: usize,
) -> LabelImage {
    let (w, h) = footprint.mask.size();
    assert_eq!(seeds.labels.size(), (w, h), "seed image size mismatch");
    let mut labels = LabelImage::filled(w, h, IGNORE);
    for m in accepted {
        assert_eq!(m.size(), (w, h), "mask size mismatch");
        for (l, &b) in labels.as_mut_slice().iter_mut().zip(m.as_slice()) {
            if b {
                *l = TRAVERSABLE;
            }
        }
    }
    for m in negative_masks {
        for (l, &b) in labels.as_mut_slice().iter_mut().zip(m.as_slice()) {
            if b {
                *l = NON_TRAVERSABLE;
            }
        }
    }
    let neg = seeds.mask(SeedPixel::Neg).dilate(r_neg);
    for (l, &b) in labels.as_mut_slice().iter_mut().zip(neg.as_slice()) {
        if b {
            *l = NON_TRAVERSABLE;
        }
    }
    apply_footprint(&mut labels, footprint);
    labels
}

/// Forces visible footprint pixels to traversable.
pub fn apply_footprint(labels: &mut LabelImage, footprint: &FootprintMask) {
    for (l, &b) in labels.as_mut_slice().iter_mut().zip(footprint.mask.as_slice()) {
        if b {
            *l = TRAVERSABLE;
        }
    }
}

/// Sets 4-connected class-0 and class-1 components smaller than
/// `min_component` pixels to ignore. Idempotent.
pub fn cleanup(labels: &LabelImage, min_component: usize) -> LabelImage {
    let (comp, sizes) = connected_components(labels);
    let mut out = labels.clone();
    for (l, &c) in out.as_mut_slice().iter_mut().zip(comp.as_slice()) {
        if *l != IGNORE && sizes[c as usize] < min_component {
            *l = IGNORE;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::flood_fill;
    use crate::prompt::{Polarity, Prompt, PromptSource};
    use proptest::prelude::*;

    fn prompt(u: u32, v: u32, polarity: Polarity) -> Prompt {
        Prompt { u, v, polarity, source: PromptSource::GeomSeed }
    }

    fn rect(w: usize, h: usize, u0: usize, u1: usize, v0: usize, v1: usize) -> Mask {
        Mask::from_fn(w, h, |u, v| (u0..u1).contains(&u) && (v0..v1).contains(&v))
    }

    fn setup() -> PromptSet {
        PromptSet {
            image_id: "f".into(),
            prompts: vec![prompt(2, 2, Polarity::Positive), prompt(8, 8, Polarity::Negative)],
        }
    }

    fn one(mask: Mask, score: f64) -> Vec<(usize, SegmentationResult)> {
        vec![(0, SegmentationResult { masks: vec![mask], scores: vec![score] })]
    }

    #[test]
    fn selection_rules() {
        let prompts = setup();
        let params = FusionParams::default();
        // missing own prompt
        assert!(select_masks(&one(rect(10, 10, 4, 6, 0, 3), 1.0), &prompts, &params).is_empty());
        // covers the negative
        assert!(select_masks(&one(rect(10, 10, 0, 10, 0, 10), 1.0), &prompts, &params).is_empty());
        // good mask
        let acc = select_masks(&one(rect(10, 10, 0, 5, 0, 5), 0.95), &prompts, &params);
        assert_eq!(acc.len(), 1);
        assert_eq!((acc[0].prompt_index, acc[0].mask_index), (0, 0));
        // low score
        assert!(select_masks(&one(rect(10, 10, 0, 5, 0, 5), 0.5), &prompts, &params).is_empty());
        // too large
        let big = FusionParams { area_frac_max: 0.2, ..FusionParams::default() };
        assert!(select_masks(&one(rect(10, 10, 0, 5, 0, 5), 1.0), &prompts, &big).is_empty());
    }

    #[test]
    fn fusion_priorities() {
        let (w, h) = (10, 10);
        let mut fp = FootprintMask::empty(w, h);
        fp.mask = rect(w, h, 0, 2, 8, 10);
        fp.occluded = rect(w, h, 2, 3, 8, 10);
        let seeds = SeedImage::empty(w, h);
        let out = fuse_labels(&[], &[], &fp, &seeds, 3);
        for (u, v, &l) in out.enumerate() {
            assert_eq!(l, if *fp.mask.get(u, v) { 1 } else { 255 });
        }

        let mut seeds = SeedImage::empty(w, h);
        seeds.labels.set(6, 2, SeedPixel::Neg);
        seeds.depth.set(6, 2, 4.0);
        let m = rect(w, h, 0, 10, 0, 10);
        let out = fuse_labels(&[&m], &[], &fp, &seeds, 1);
        assert_eq!(*out.get(6, 2), 0);
        assert_eq!(*out.get(7, 2), 0);
        assert_eq!(*out.get(8, 2), 1);
        assert_eq!(*out.get(0, 9), 1);
        assert!(is_valid_label_image(&out));
    }

    #[test]
    fn cleanup_removes_isolated_pixel() {
        let mut l = LabelImage::filled(20, 20, IGNORE);
        l.set(5, 5, TRAVERSABLE);
        assert_eq!(*cleanup(&l, 50).get(5, 5), IGNORE);
        assert_eq!(*cleanup(&l, 1).get(5, 5), TRAVERSABLE);
    }

    fn brute_component_size(l: &LabelImage, u: usize, v: usize) -> usize {
        flood_fill(l, u, v, |a, b| a == b).count()
    }

    proptest! {
        #[test]
        fn cleanup_matches_flood_fill_and_is_idempotent(
            bits in proptest::collection::vec(0u8..3, 144), min in 0usize..8
        ) {
            let l = LabelImage::from_fn(12, 12, |u, v| [0, 1, 255][bits[v * 12 + u] as usize]);
            let c = cleanup(&l, min);
            for (u, v, &x) in l.enumerate() {
                let expect = if x != IGNORE && brute_component_size(&l, u, v) < min { IGNORE } else { x };
                prop_assert_eq!(*c.get(u, v), expect);
            }
            prop_assert_eq!(cleanup(&c, min), c);
        }

        #[test]
        fn footprint_supremacy_and_domain(
            fbits in proptest::collection::vec(any::<bool>(), 64),
            sbits in proptest::collection::vec(0u8..3, 64),
            mbits in proptest::collection::vec(any::<bool>(), 64),
            r in 0usize..3,
        ) {
            let mut fp = FootprintMask::empty(8, 8);
            fp.mask = Mask::from_fn(8, 8, |u, v| fbits[v * 8 + u]);
            let mut seeds = SeedImage::empty(8, 8);
            for (i, &s) in sbits.iter().enumerate() {
                let px = SeedPixel::from_u8(s).unwrap();
                seeds.labels.as_mut_slice()[i] = px;
                seeds.depth.as_mut_slice()[i] = if px == SeedPixel::None { 0.0 } else { 1.0 };
            }
            let m = Mask::from_fn(8, 8, |u, v| mbits[v * 8 + u]);
            let base = fuse_labels(&[], &[], &fp, &seeds, r);
            let out = fuse_labels(&[&m], &[], &fp, &seeds, r);
            let neg = seeds.mask(SeedPixel::Neg).dilate(r);
            prop_assert!(is_valid_label_image(&out));
            for i in 0..64 {
                if fp.mask.as_slice()[i] {
                    prop_assert_eq!(out.as_slice()[i], TRAVERSABLE);
                } else if neg.as_slice()[i] {
                    prop_assert_eq!(out.as_slice()[i], NON_TRAVERSABLE);
                }
                // adding a mask never removes a 1
                if base.as_slice()[i] == TRAVERSABLE {
                    prop_assert_eq!(out.as_slice()[i], TRAVERSABLE);
                }
            }
        }
    }
}
