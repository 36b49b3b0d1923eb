//! Composite loss: pseudo-label cross-entropy on all heads plus sparse
//! supervision from LiDAR seeds.

use serde::{Deserialize, Serialize};

use travkit_core::fusion::{LabelImage, IGNORE, TRAVERSABLE};
use travkit_core::grid::Grid;
use travkit_core::prior::SeedPixel;

use crate::model::{ModelOutputs, ShapeError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of each auxiliary stream head.
    pub lambda_aux: f64,
    /// Weight of the seed term; zero removes it.
    pub w_sparse: f64,
    /// Also apply the seed term to the auxiliary heads.
    pub sparse_on_aux: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_aux: 0.4, w_sparse: 0.5, sparse_on_aux: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda_aux >= 0.0 && self.lambda_aux.is_finite()) {
            return Err("lambda_aux must be a nonnegative number".into());
        }
        if !(self.w_sparse >= 0.0 && self.w_sparse.is_finite()) {
            return Err("w_sparse must be a nonnegative number".into());
        }
        Ok(())
    }
}

/// Absent components are `None`: a stream that did not run, or the seed
/// term at zero weight. A present component with nothing to supervise is 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    #[serde(rename = "L_fused")]
    pub fused: f64,
    #[serde(rename = "L_rgb", skip_serializing_if = "Option::is_none")]
    pub rgb: Option<f64>,
    #[serde(rename = "L_geo", skip_serializing_if = "Option::is_none")]
    pub geo: Option<f64>,
    #[serde(rename = "L_sparse", skip_serializing_if = "Option::is_none")]
    pub sparse: Option<f64>,
}

impl LossComponents {
    /// Named components in reporting order.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("L_fused", self.fused)];
        out.extend(self.rgb.map(|v| ("L_rgb", v)));
        out.extend(self.geo.map(|v| ("L_geo", v)));
        out.extend(self.sparse.map(|v| ("L_sparse", v)));
        out
    }

    pub fn combine(&self, w: &LossWeights) -> f64 {
        self.fused
            + w.lambda_aux * (self.rgb.unwrap_or(0.0) + self.geo.unwrap_or(0.0))
            + w.w_sparse * self.sparse.unwrap_or(0.0)
    }
}

/// Binary cross-entropy of `sigmoid(x)` against `y`, stable for large |x|.
pub fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logits of one sample.
#[derive(Clone, Copy, Debug)]
pub struct HeadLogits<'a> {
    pub fused: &'a [f64],
    pub rgb: Option<&'a [f64]>,
    pub geo: Option<&'a [f64]>,
}

/// Targets of one sample, row-major like the logits.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub pseudo: &'a [u8],
    pub seeds: &'a [SeedPixel],
}

/// Gradient of the total with respect to each head's logits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadGrads {
    pub fused: Vec<f64>,
    pub rgb: Option<Vec<f64>>,
    pub geo: Option<Vec<f64>>,
}

fn seed_target(s: SeedPixel) -> Option<f64> {
    match s {
        SeedPixel::Pos => Some(1.0),
        SeedPixel::Neg => Some(0.0),
        SeedPixel::None => None,
    }
}

fn label_target(l: u8) -> Option<f64> {
    (l != IGNORE).then_some(if l == TRAVERSABLE { 1.0 } else { 0.0 })
}

/// Sum of BCE over supported pixels and its per-logit gradient (unscaled).
fn bce_sum(logits: &[f64], target: impl Fn(usize) -> Option<f64>, grad: Option<&mut [f64]>, scale: f64) -> f64 {
    let mut s = 0.0;
    let mut grad = grad;
    for (i, &x) in logits.iter().enumerate() {
        if let Some(y) = target(i) {
            s += bce_with_logits(x, y);
            if let Some(g) = grad.as_deref_mut() {
                g[i] += scale * (sigmoid(x) - y);
            }
        }
    }
    s
}

/// Loss pooled over a batch: every mean runs over all supported pixels of
/// all samples together.
pub fn batch_loss(
    batch: &[(HeadLogits, Targets)],
    w: &LossWeights,
    want_grads: bool,
) -> (LossComponents, Vec<HeadGrads>) {
    let n_label: usize = batch.iter().map(|(_, t)| t.pseudo.iter().filter(|&&l| l != IGNORE).count()).sum();
    let n_seed: usize = batch.iter().map(|(_, t)| t.seeds.iter().filter(|&&s| s != SeedPixel::None).count()).sum();
    let has_rgb = batch.iter().all(|(h, _)| h.rgb.is_some());
    let has_geo = batch.iter().all(|(h, _)| h.geo.is_some());
    let sparse_on = w.w_sparse > 0.0;
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let (il, is) = (inv(n_label), inv(n_seed));
    let (mut lf, mut lr, mut lg, mut ls) = (0.0, 0.0, 0.0, 0.0);
    let mut grads = Vec::with_capacity(if want_grads { batch.len() } else { 0 });
    for (h, t) in batch {
        let n = h.fused.len();
        let mut gf = want_grads.then(|| vec![0.0; n]);
        let mut gr = (want_grads && has_rgb).then(|| vec![0.0; n]);
        let mut gg = (want_grads && has_geo).then(|| vec![0.0; n]);
        let lt = |i: usize| label_target(t.pseudo[i]);
        let st = |i: usize| seed_target(t.seeds[i]);
        lf += bce_sum(h.fused, lt, gf.as_deref_mut(), il);
        if sparse_on {
            ls += bce_sum(h.fused, st, gf.as_deref_mut(), w.w_sparse * is);
        }
        for (logits, acc, g) in [(h.rgb, &mut lr, &mut gr), (h.geo, &mut lg, &mut gg)] {
            let Some(x) = logits else { continue };
            *acc += bce_sum(x, lt, g.as_deref_mut(), w.lambda_aux * il);
            if sparse_on && w.sparse_on_aux {
                ls += bce_sum(x, st, g.as_deref_mut(), w.w_sparse * is);
            }
        }
        if want_grads {
            grads.push(HeadGrads { fused: gf.unwrap_or_default(), rgb: gr, geo: gg });
        }
    }
    let mut c = LossComponents {
        total: 0.0,
        fused: lf * il,
        rgb: has_rgb.then_some(lr * il),
        geo: has_geo.then_some(lg * il),
        sparse: sparse_on.then_some(ls * is),
    };
    c.total = c.combine(w);
    (c, grads)
}

/// Loss of one sample's outputs. Both streams are taken as present.
pub fn loss(
    outputs: &ModelOutputs,
    pseudo: &LabelImage,
    seeds: &Grid<SeedPixel>,
    w: &LossWeights,
) -> Result<LossComponents, ShapeError> {
    let size = (outputs.width, outputs.height);
    for (what, got) in [("pseudo labels", pseudo.size()), ("seed image", seeds.size())] {
        if got != size {
            return Err(ShapeError::Mismatch {
                what,
                expected: format!("{}×{}", size.0, size.1),
                got: format!("{}×{}", got.0, got.1),
            });
        }
    }
    let heads =
        HeadLogits { fused: &outputs.fused_logits, rgb: Some(&outputs.rgb_logits), geo: Some(&outputs.geo_logits) };
    let t = Targets { pseudo: pseudo.as_slice(), seeds: seeds.as_slice() };
    Ok(batch_loss(&[(heads, t)], w, false).0)
}
