//! Positive/negative point prompts from footprint and LiDAR seed evidence.
//!
//! Sampling is greedy farthest-point sampling, so the whole stage is a
//! deterministic function of its inputs.

use serde::{Deserialize, Serialize};

use crate::footprint::{union_mask, FootprintMask};
use crate::grid::Mask;
use crate::prior::{SeedImage, SeedPixel};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no positive prompts survived refinement")]
    EmptyPrompts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Footprint,
    GeomSeed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub u: u32,
    pub v: u32,
    pub polarity: Polarity,
    pub source: PromptSource,
}

impl Prompt {
    fn dist2(&self, other: &Prompt) -> i64 {
        let du = self.u as i64 - other.u as i64;
        let dv = self.v as i64 - other.v as i64;
        du * du + dv * dv
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub image_id: String,
    pub prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn positives(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.iter().filter(|p| p.polarity == Polarity::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.iter().filter(|p| p.polarity == Polarity::Negative)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptParams {
    pub k_pos: usize,
    pub k_neg: usize,
    /// Minimum spacing between sampled prompts of one polarity (pixels).
    pub min_dist: f64,
    pub border_margin: usize,
    pub dedupe_radius: f64,
    /// Radius of the footprint dilation that negatives must stay out of.
    pub footprint_dilation: usize,
}

impl Default for PromptParams {
    fn default() -> Self {
        Self { k_pos: 8, k_neg: 8, min_dist: 24.0, border_margin: 8, dedupe_radius: 8.0, footprint_dilation: 15 }
    }
}

/// Greedy farthest-point sampling over `cands`, started at the candidate
/// nearest to the centroid. Ties go to the earliest candidate. Stops after
/// `k` picks or when nothing is at least `min_dist` from every pick.
pub fn farthest_point_sampling(cands: &[(usize, usize)], k: usize, min_dist: f64) -> Vec<usize> {
    if cands.is_empty() || k == 0 {
        return Vec::new();
    }
    let n = cands.len() as f64;
    let (su, sv) = cands.iter().fold((0.0, 0.0), |(a, b), &(u, v)| (a + u as f64, b + v as f64));
    let (mu, mv) = (su / n, sv / n);
    let d2 = |(u, v): (usize, usize), (x, y): (f64, f64)| {
        let (du, dv) = (u as f64 - x, v as f64 - y);
        du * du + dv * dv
    };
    let mut first = 0;
    for (i, &c) in cands.iter().enumerate() {
        if d2(c, (mu, mv)) < d2(cands[first], (mu, mv)) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = cands.iter().map(|&c| d2(c, (cands[first].0 as f64, cands[first].1 as f64))).collect();
    let min2 = min_dist * min_dist;
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..nearest.len() {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        if nearest[best] < min2 {
            break;
        }
        chosen.push(best);
        let b = (cands[best].0 as f64, cands[best].1 as f64);
        for (i, &c) in cands.iter().enumerate() {
            nearest[i] = nearest[i].min(d2(c, b));
        }
    }
    chosen
}

/// Positive prompts over visible footprint pixels and POS seed pixels.
pub fn sample_positive_prompts(footprint: &FootprintMask, seeds: &SeedImage, k: usize, min_dist: f64) -> Vec<Prompt> {
    let cands: Vec<(usize, usize)> = footprint
        .mask
        .enumerate()
        .filter(|&(u, v, &f)| f || *seeds.labels.get(u, v) == SeedPixel::Pos)
        .map(|(u, v, _)| (u, v))
        .collect();
    farthest_point_sampling(&cands, k, min_dist)
        .into_iter()
        .map(|i| {
            let (u, v) = cands[i];
            Prompt {
                u: u as u32,
                v: v as u32,
                polarity: Polarity::Positive,
                source: if *footprint.mask.get(u, v) { PromptSource::Footprint } else { PromptSource::GeomSeed },
            }
        })
        .collect()
}

/// Negative prompts over NEG seed pixels outside `exclusion`.
pub fn sample_negative_prompts(seeds: &SeedImage, exclusion: &Mask, k: usize, min_dist: f64) -> Vec<Prompt> {
    let cands: Vec<(usize, usize)> = seeds
        .labels
        .enumerate()
        .filter(|&(u, v, &l)| l == SeedPixel::Neg && !*exclusion.get(u, v))
        .map(|(u, v, _)| (u, v))
        .collect();
    farthest_point_sampling(&cands, k, min_dist)
        .into_iter()
        .map(|i| Prompt {
            u: cands[i].0 as u32,
            v: cands[i].1 as u32,
            polarity: Polarity::Negative,
            source: PromptSource::GeomSeed,
        })
        .collect()
}

fn sort_prompts(prompts: &mut [Prompt]) {
    prompts.sort_by_key(|p| (p.v, p.u, p.polarity));
}

/// Drops prompts within `border_margin` of the image edge, drops both
/// members of every cross-polarity pair closer than `dedupe_radius`, thins
/// same-polarity duplicates (first kept) and sorts by `(v, u, polarity)`.
pub fn refine_candidates(
    pos: &[Prompt],
    neg: &[Prompt],
    width: usize,
    height: usize,
    border_margin: usize,
    dedupe_radius: f64,
    image_id: &str,
) -> Result<PromptSet, PromptError> {
    let m = border_margin as u32;
    let (w, h) = (width as u32, height as u32);
    let inside = |p: &&Prompt| p.u >= m && p.v >= m && p.u + m < w && p.v + m < h;
    let pos: Vec<Prompt> = pos.iter().filter(inside).copied().collect();
    let neg: Vec<Prompt> = neg.iter().filter(inside).copied().collect();

    let r2 = dedupe_radius * dedupe_radius;
    let close = |a: &Prompt, b: &Prompt| (a.dist2(b) as f64) < r2;
    let mut drop_pos = vec![false; pos.len()];
    let mut drop_neg = vec![false; neg.len()];
    for (i, p) in pos.iter().enumerate() {
        for (j, n) in neg.iter().enumerate() {
            if close(p, n) {
                drop_pos[i] = true;
                drop_neg[j] = true;
            }
        }
    }
    let thin = |list: &[Prompt], dropped: &[bool]| {
        let mut kept: Vec<Prompt> = Vec::new();
        for (p, &d) in list.iter().zip(dropped) {
            if !d && kept.iter().all(|q| !close(p, q)) {
                kept.push(*p);
            }
        }
        kept
    };
    let mut prompts = thin(&pos, &drop_pos);
    prompts.extend(thin(&neg, &drop_neg));
    finish(prompts, image_id)
}

fn finish(mut prompts: Vec<Prompt>, image_id: &str) -> Result<PromptSet, PromptError> {
    sort_prompts(&mut prompts);
    if !prompts.iter().any(|p| p.polarity == Polarity::Positive) {
        return Err(PromptError::EmptyPrompts);
    }
    Ok(PromptSet { image_id: image_id.to_string(), prompts })
}

/// Zone negatives must avoid: the footprint (visible and occluded) dilated
/// by `radius` pixels.
pub fn exclusion_zone(footprint: &FootprintMask, radius: usize) -> Mask {
    union_mask(footprint).dilate(radius)
}

/// Full prompt stage. With `refine == false` the border and dedupe rules
/// are skipped and prompts are only sorted.
pub fn build_prompts(
    footprint: &FootprintMask,
    seeds: &SeedImage,
    params: &PromptParams,
    image_id: &str,
    refine: bool,
) -> Result<PromptSet, PromptError> {
    let pos = sample_positive_prompts(footprint, seeds, params.k_pos, params.min_dist);
    let excl = exclusion_zone(footprint, params.footprint_dilation);
    let neg = sample_negative_prompts(seeds, &excl, params.k_neg, params.min_dist);
    let (w, h) = footprint.mask.size();
    if refine {
        refine_candidates(&pos, &neg, w, h, params.border_margin, params.dedupe_radius, image_id)
    } else {
        let mut all = pos;
        all.extend(neg);
        finish(all, image_id)
    }
}
