//! Side-by-side overlay strip for one frame.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{ImageBuffer, Rgb};
use log::warn;

use travkit_core::dataset::{read_labels, Dataset};
use travkit_core::fusion::{IGNORE, TRAVERSABLE};
use travkit_core::grid::Grid;
use travkit_core::label::Provenance;
use travkit_core::prompt::{Polarity, Prompt};

const GREEN: [u8; 3] = [40, 220, 60];
const RED: [u8; 3] = [230, 40, 40];
const YELLOW: [u8; 3] = [240, 200, 30];
const GRAY: [u8; 3] = [128, 128, 128];
/// Gap between panels.
const GAP: usize = 4;

fn blend(px: [u8; 3], over: [u8; 3], alpha: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (px[c] as f64 * (1.0 - alpha) + over[c] as f64 * alpha).round() as u8;
    }
    out
}

/// Tints the image wherever `color` returns a value.
fn tint(rgb: &Grid<[u8; 3]>, mut color: impl FnMut(usize, usize) -> Option<[u8; 3]>) -> Grid<[u8; 3]> {
    Grid::from_fn(rgb.width(), rgb.height(), |u, v| match color(u, v) {
        Some(c) => blend(*rgb.get(u, v), c, 0.55),
        None => *rgb.get(u, v),
    })
}

fn class_color(l: u8) -> [u8; 3] {
    match l {
        TRAVERSABLE => GREEN,
        IGNORE => GRAY,
        _ => RED,
    }
}

/// Footprint layer as written by `label`: 255 visible, 128 occluded.
pub fn footprint_panel(rgb: &Grid<[u8; 3]>, fp: &Grid<u8>) -> Grid<[u8; 3]> {
    tint(rgb, |u, v| match *fp.get(u, v) {
        255 => Some(GREEN),
        128 => Some(YELLOW),
        _ => None,
    })
}

/// Seed layer: 1 positive, 2 negative. Seeds are sparse, so each one is
/// drawn as a solid pixel.
pub fn seeds_panel(rgb: &Grid<[u8; 3]>, seeds: &Grid<u8>) -> Grid<[u8; 3]> {
    let dim = rgb.map(|&p| blend(p, [0, 0, 0], 0.4));
    Grid::from_fn(rgb.width(), rgb.height(), |u, v| match *seeds.get(u, v) {
        1 => GREEN,
        2 => RED,
        _ => *dim.get(u, v),
    })
}

pub fn prompts_panel(rgb: &Grid<[u8; 3]>, prompts: &[Prompt]) -> Grid<[u8; 3]> {
    let mut g = rgb.map(|&p| blend(p, [0, 0, 0], 0.4));
    for p in prompts {
        let c = match p.polarity {
            Polarity::Positive => GREEN,
            Polarity::Negative => RED,
        };
        for d in -3i64..=3 {
            for (du, dv) in [(d, 0), (0, d)] {
                let (u, v) = (p.u as i64 + du, p.v as i64 + dv);
                if g.contains(u, v) {
                    g.set(u as usize, v as usize, c);
                }
            }
        }
    }
    g
}

pub fn labels_panel(rgb: &Grid<[u8; 3]>, labels: &Grid<u8>) -> Grid<[u8; 3]> {
    tint(rgb, |u, v| Some(class_color(*labels.get(u, v))))
}

/// Panels left to right with a black gap between them.
pub fn strip(panels: &[Grid<[u8; 3]>]) -> Grid<[u8; 3]> {
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width()).sum::<usize>() + GAP * panels.len().saturating_sub(1);
    let mut out = Grid::filled(w, h, [0u8; 3]);
    let mut x0 = 0;
    for p in panels {
        for (u, v, px) in p.enumerate() {
            out.set(x0 + u, v, *px);
        }
        x0 += p.width() + GAP;
    }
    out
}

fn read_gray(path: &Path) -> Result<Grid<u8>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.into_luma8();
    Ok(Grid::from_vec(img.width() as usize, img.height() as usize, img.into_raw()))
}

pub struct VizArgs {
    pub id: String,
    pub dataset: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub out: PathBuf,
}

/// Returns the names of the panels drawn.
pub fn cmd_viz(args: &VizArgs) -> Result<Vec<&'static str>> {
    let ds = Dataset::open(&args.dataset)?;
    let rgb = ds.rgb(&args.id)?;
    let size = rgb.size();
    let find = |rel: String| args.artifacts.iter().map(|d| d.join(&rel)).find(|p| p.is_file());
    let mut names = vec!["image"];
    let mut panels = vec![rgb.clone()];
    let mut layer = |name: &'static str, rel: String, draw: &dyn Fn(&Path) -> Result<Grid<[u8; 3]>>| -> Result<()> {
        match find(rel.clone()) {
            Some(p) => {
                let panel = draw(&p)?;
                if panel.size() != size {
                    bail!("{}: size {:?} differs from the image {:?}", p.display(), panel.size(), size);
                }
                names.push(name);
                panels.push(panel);
            }
            None => warn!("no {name} layer ({rel}) in the artifact directories; omitted"),
        }
        Ok(())
    };
    let id = &args.id;
    let sized = |g: Grid<u8>, p: &Path| -> Result<Grid<u8>> {
        if g.size() != size {
            bail!("{}: size {:?} differs from the image {:?}", p.display(), g.size(), size);
        }
        Ok(g)
    };
    layer("footprint", format!("footprint/{id}.png"), &|p| Ok(footprint_panel(&rgb, &sized(read_gray(p)?, p)?)))?;
    layer("seeds", format!("seeds/{id}.png"), &|p| Ok(seeds_panel(&rgb, &sized(read_gray(p)?, p)?)))?;
    layer("prompts", format!("provenance/{id}.json"), &|p| {
        let text = std::fs::read_to_string(p)?;
        let prov: Provenance = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        Ok(prompts_panel(&rgb, &prov.prompts))
    })?;
    layer("label", format!("labels/{id}.png"), &|p| Ok(labels_panel(&rgb, &sized(read_labels(p)?, p)?)))?;
    layer("prediction", format!("predictions/{id}.png"), &|p| Ok(labels_panel(&rgb, &sized(read_labels(p)?, p)?)))?;
    let s = strip(&panels);
    let flat: Vec<u8> = s.iter().flatten().copied().collect();
    let img: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(s.width() as u32, s.height() as u32, flat).expect("buffer size matches");
    if let Some(dir) = args.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(names)
}
