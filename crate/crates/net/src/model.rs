//! Dual-stream encoder-decoder. Each stream has its own encoder and an
//! auxiliary decoder; a fusion decoder reads the concatenated skip features
//! of both encoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo::GeoNorm;
use crate::graph::{Conv, Graph, ParamStore, Tensor, Var};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("{what}: expected {expected}, got {got}")]
    Mismatch { what: &'static str, expected: String, got: String },
    #[error("input {h}×{w} is not divisible by {factor}")]
    NotDivisible { h: usize, w: usize, factor: usize },
    #[error("checkpoint parameter {0}")]
    Parameter(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub base_width: usize,
    /// Number of 2× downsampling stages.
    pub depth: usize,
    pub fusion: Fusion,
    pub geo: GeoNorm,
    /// Integer factor between dataset images and network input.
    pub input_downsample: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { base_width: 32, depth: 4, fusion: Fusion::Concat, geo: GeoNorm::default(), input_downsample: 2 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.base_width == 0 {
            return Err("net.base_width must be positive".into());
        }
        if self.input_downsample == 0 {
            return Err("net.input_downsample must be positive".into());
        }
        self.geo.validate().map_err(|e| format!("net.geo: {e}"))
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Which streams run. A disabled stream contributes zero features to the
/// fusion decoder and has no auxiliary output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    pub rgb: bool,
    pub geo: bool,
}

impl Default for Streams {
    fn default() -> Self {
        Self { rgb: true, geo: true }
    }
}

pub const RGB_CHANNELS: usize = 3;
pub const GEO_CHANNELS: usize = 4;

#[derive(Clone, Debug)]
struct Encoder {
    levels: Vec<[Conv; 2]>,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// `levels[l]` runs after upsampling to level `l`.
    levels: Vec<[Conv; 2]>,
    head: Conv,
}

fn encoder(ps: &mut ParamStore, name: &str, cin: usize, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Encoder {
    let levels = (0..=cfg.depth)
        .map(|l| {
            let prev = if l == 0 { cin } else { cfg.width(l - 1) };
            let c = cfg.width(l);
            [
                ps.add_conv(&format!("{name}.enc{l}.conv0"), prev, c, 3, rng),
                ps.add_conv(&format!("{name}.enc{l}.conv1"), c, c, 3, rng),
            ]
        })
        .collect();
    Encoder { levels }
}

/// `mult` is the number of encoders feeding the skips.
fn decoder(ps: &mut ParamStore, name: &str, mult: usize, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Decoder {
    let mut levels = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let from = if l + 1 == cfg.depth { mult * cfg.width(cfg.depth) } else { cfg.width(l + 1) };
        let c = cfg.width(l);
        levels.push([
            ps.add_conv(&format!("{name}.dec{l}.conv0"), from + mult * c, c, 3, rng),
            ps.add_conv(&format!("{name}.dec{l}.conv1"), c, c, 3, rng),
        ]);
    }
    let head_in = if cfg.depth == 0 { mult * cfg.width(0) } else { cfg.width(0) };
    let head = ps.add_conv(&format!("{name}.head"), head_in, 1, 1, rng);
    Decoder { levels, head }
}

#[derive(Clone, Debug)]
pub struct TravNet {
    pub config: NetConfig,
    pub params: ParamStore,
    rgb_enc: Encoder,
    geo_enc: Encoder,
    rgb_dec: Decoder,
    geo_dec: Decoder,
    fused_dec: Decoder,
}

/// Graph variables of the three heads.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub fused: Var,
    pub rgb: Option<Var>,
    pub geo: Option<Var>,
}

/// Pre-sigmoid traversability scores, each `H×W` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs {
    pub width: usize,
    pub height: usize,
    pub fused_logits: Vec<f64>,
    pub rgb_logits: Vec<f64>,
    pub geo_logits: Vec<f64>,
}

impl TravNet {
    /// Parameters initialized deterministically from `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::default();
        let rgb_enc = encoder(&mut ps, "rgb", RGB_CHANNELS, &config, &mut rng);
        let geo_enc = encoder(&mut ps, "geo", GEO_CHANNELS, &config, &mut rng);
        let rgb_dec = decoder(&mut ps, "rgb", 1, &config, &mut rng);
        let geo_dec = decoder(&mut ps, "geo", 1, &config, &mut rng);
        let fused_dec = decoder(&mut ps, "fused", 2, &config, &mut rng);
        Self { config, params: ps, rgb_enc, geo_enc, rgb_dec, geo_dec, fused_dec }
    }

    /// Rebuilds the network around loaded parameter arrays, which must match
    /// the configured architecture name for name and shape.
    pub fn with_params(config: NetConfig, arrays: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self, ShapeError> {
        let mut net = Self::new(config, 0);
        if arrays.len() != net.params.len() {
            return Err(ShapeError::Parameter(format!(
                "count {} does not match the architecture ({})",
                arrays.len(),
                net.params.len()
            )));
        }
        for (name, shape, values) in arrays {
            let id = net
                .params
                .id(&name)
                .ok_or_else(|| ShapeError::Parameter(format!("{name} is not in the architecture")))?;
            if net.params.shape(id) != shape.as_slice() || values.len() != net.params.value(id).len() {
                return Err(ShapeError::Parameter(format!("{name} has shape {shape:?}")));
            }
            net.params.value_mut(id).copy_from_slice(&values);
        }
        Ok(net)
    }

    pub fn downsampling(&self) -> usize {
        1 << self.config.depth
    }

    pub fn check_inputs(&self, rgb: &Tensor, geo: &Tensor) -> Result<(), ShapeError> {
        if rgb.c != RGB_CHANNELS {
            return Err(ShapeError::Mismatch {
                what: "rgb channels",
                expected: RGB_CHANNELS.to_string(),
                got: rgb.c.to_string(),
            });
        }
        if geo.c != GEO_CHANNELS {
            return Err(ShapeError::Mismatch {
                what: "geometric channels",
                expected: GEO_CHANNELS.to_string(),
                got: geo.c.to_string(),
            });
        }
        if (rgb.h, rgb.w) != (geo.h, geo.w) {
            return Err(ShapeError::Mismatch {
                what: "input size",
                expected: format!("{}×{}", rgb.h, rgb.w),
                got: format!("{}×{}", geo.h, geo.w),
            });
        }
        let f = self.downsampling();
        if !rgb.h.is_multiple_of(f) || !rgb.w.is_multiple_of(f) || rgb.h == 0 || rgb.w == 0 {
            return Err(ShapeError::NotDivisible { h: rgb.h, w: rgb.w, factor: f });
        }
        Ok(())
    }

    fn encode(g: &mut Graph, enc: &Encoder, x: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(enc.levels.len());
        let mut h = x;
        for (l, [c0, c1]) in enc.levels.iter().enumerate() {
            if l > 0 {
                h = g.max_pool2(h);
            }
            h = g.conv_relu(h, *c0);
            h = g.conv_relu(h, *c1);
            feats.push(h);
        }
        feats
    }

    fn decode(g: &mut Graph, dec: &Decoder, feats: &[Var]) -> Var {
        let mut h = *feats.last().expect("encoder has a bottleneck");
        for l in (0..dec.levels.len()).rev() {
            let up = g.upsample2(h);
            let cat = g.concat(up, feats[l]);
            h = g.conv_relu(cat, dec.levels[l][0]);
            h = g.conv_relu(h, dec.levels[l][1]);
        }
        g.conv(h, dec.head)
    }

    fn zero_features(&self, g: &mut Graph, h: usize, w: usize) -> Vec<Var> {
        (0..=self.config.depth).map(|l| g.input(Tensor::zeros(self.config.width(l), h >> l, w >> l))).collect()
    }

    /// Records a forward pass on `g`. Inputs must pass [`Self::check_inputs`].
    pub fn forward_graph(&self, g: &mut Graph, rgb: &Tensor, geo: &Tensor, streams: Streams) -> Heads {
        let (h, w) = (rgb.h, rgb.w);
        let (rgb_feats, rgb_out) = if streams.rgb {
            let x = g.input(rgb.clone());
            let f = Self::encode(g, &self.rgb_enc, x);
            let o = Self::decode(g, &self.rgb_dec, &f);
            (f, Some(o))
        } else {
            (self.zero_features(g, h, w), None)
        };
        let (geo_feats, geo_out) = if streams.geo {
            let x = g.input(geo.clone());
            let f = Self::encode(g, &self.geo_enc, x);
            let o = Self::decode(g, &self.geo_dec, &f);
            (f, Some(o))
        } else {
            (self.zero_features(g, h, w), None)
        };
        let cat: Vec<Var> = match self.config.fusion {
            Fusion::Concat => rgb_feats.iter().zip(&geo_feats).map(|(&a, &b)| g.concat(a, b)).collect(),
        };
        let fused = Self::decode(g, &self.fused_dec, &cat);
        Heads { fused, rgb: rgb_out, geo: geo_out }
    }

    pub fn forward(&self, rgb: &Tensor, geo: &Tensor, streams: Streams) -> Result<ModelOutputs, ShapeError> {
        self.check_inputs(rgb, geo)?;
        let mut g = Graph::new(&self.params);
        let heads = self.forward_graph(&mut g, rgb, geo, streams);
        let n = rgb.h * rgb.w;
        let take = |v: Option<Var>| v.map_or_else(|| vec![0.0; n], |v| g.value(v).data.clone());
        Ok(ModelOutputs {
            width: rgb.w,
            height: rgb.h,
            fused_logits: g.value(heads.fused).data.clone(),
            rgb_logits: take(heads.rgb),
            geo_logits: take(heads.geo),
        })
    }
}
