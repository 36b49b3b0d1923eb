//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   images/<id>.png     8-bit RGB
//!   clouds/<id>.bin     little-endian f32 x, y, z, intensity (LiDAR frame)
//!   poses.tum           base poses; <id> is the zero-padded pose index
//!   calib.yaml
//!   labels/<id>.png     optional, 8-bit {0, 1, 255}
//!   gt/<id>.png         optional, same encoding
//!   regions/<id>.png    optional, 16-bit region ids for the oracle backend
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::fusion::{is_valid_label_image, LabelImage};
use crate::geometry::{isometry_from_rows, isometry_to_rows, CameraIntrinsics, Extrinsics, Trajectory};
use crate::grid::Grid;
use crate::label::Calibration;
use crate::synth::SynthScene;

pub const ID_WIDTH: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{}: frame {id} has no {what}", root.display())]
    MissingPart { root: PathBuf, id: String, what: &'static str },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn format(path: &Path, msg: impl ToString) -> DatasetError {
    DatasetError::Format { path: path.to_path_buf(), msg: msg.to_string() }
}

pub fn frame_id(index: usize) -> String {
    format!("{index:0width$}", width = ID_WIDTH)
}

/// `calib.yaml` contents. Transforms are 4×4 row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "T_cam_lidar")]
    pub t_cam_lidar: [[f64; 4]; 4],
    #[serde(rename = "T_base_cam")]
    pub t_base_cam: [[f64; 4]; 4],
}

fn rows(m: [f64; 16]) -> [[f64; 4]; 4] {
    [[m[0], m[1], m[2], m[3]], [m[4], m[5], m[6], m[7]], [m[8], m[9], m[10], m[11]], [m[12], m[13], m[14], m[15]]]
}

fn flat(m: &[[f64; 4]; 4]) -> [f64; 16] {
    let mut out = [0.0; 16];
    for (r, row) in m.iter().enumerate() {
        out[r * 4..r * 4 + 4].copy_from_slice(row);
    }
    out
}

impl CalibFile {
    pub fn from_calibration(c: &Calibration) -> Self {
        let k = c.intrinsics;
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            t_cam_lidar: rows(isometry_to_rows(&c.extrinsics.cam_from_lidar)),
            t_base_cam: rows(isometry_to_rows(&c.extrinsics.base_from_cam)),
        }
    }

    pub fn to_calibration(&self) -> Result<Calibration, String> {
        let intrinsics = CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        };
        intrinsics.validate().map_err(|e| e.to_string())?;
        let cam_from_lidar = isometry_from_rows(&flat(&self.t_cam_lidar)).map_err(|e| format!("T_cam_lidar: {e}"))?;
        let base_from_cam = isometry_from_rows(&flat(&self.t_base_cam)).map_err(|e| format!("T_base_cam: {e}"))?;
        Ok(Calibration { intrinsics, extrinsics: Extrinsics { cam_from_lidar, base_from_cam } })
    }
}

pub fn read_calibration(path: &Path) -> Result<Calibration, DatasetError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let file: CalibFile = serde_yaml::from_str(&text).map_err(|e| format(path, e))?;
    file.to_calibration().map_err(|e| format(path, e))
}

pub fn write_calibration(path: &Path, c: &Calibration) -> Result<(), DatasetError> {
    let text = serde_yaml::to_string(&CalibFile::from_calibration(c)).map_err(|e| format(path, e))?;
    fs::write(path, text).map_err(io(path))
}

pub fn read_rgb(path: &Path) -> Result<Grid<[u8; 3]>, DatasetError> {
    let img = image::open(path).map_err(|e| format(path, e))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_vec(w, h, img.pixels().map(|p| p.0).collect()))
}

pub fn write_rgb(path: &Path, rgb: &Grid<[u8; 3]>) -> Result<(), DatasetError> {
    let data: Vec<u8> = rgb.iter().flatten().copied().collect();
    let img: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(rgb.width() as u32, rgb.height() as u32, data).expect("buffer size matches");
    img.save(path).map_err(|e| format(path, e))
}

fn read_gray8(path: &Path) -> Result<Grid<u8>, DatasetError> {
    let img = image::open(path).map_err(|e| format(path, e))?;
    if img.color() != image::ColorType::L8 {
        return Err(format(path, format!("expected 8-bit grayscale, got {:?}", img.color())));
    }
    let img = img.into_luma8();
    Ok(Grid::from_vec(img.width() as usize, img.height() as usize, img.into_raw()))
}

fn write_gray8(path: &Path, g: &Grid<u8>) -> Result<(), DatasetError> {
    let img: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(g.width() as u32, g.height() as u32, g.as_slice().to_vec()).expect("buffer size matches");
    img.save(path).map_err(|e| format(path, e))
}

/// Reads a label PNG and checks every value is 0, 1 or 255.
pub fn read_labels(path: &Path) -> Result<LabelImage, DatasetError> {
    let g = read_gray8(path)?;
    if !is_valid_label_image(&g) {
        return Err(format(path, "label values must be 0, 1 or 255"));
    }
    Ok(g)
}

pub fn write_labels(path: &Path, labels: &LabelImage) -> Result<(), DatasetError> {
    write_gray8(path, labels)
}

/// Region ids stored as 16-bit grayscale.
pub fn read_regions(path: &Path) -> Result<Grid<u32>, DatasetError> {
    let img = image::open(path).map_err(|e| format(path, e))?.into_luma16();
    Ok(Grid::from_vec(img.width() as usize, img.height() as usize, img.pixels().map(|p| p.0[0] as u32).collect()))
}

pub fn write_regions(path: &Path, regions: &Grid<u32>) -> Result<(), DatasetError> {
    let data = regions
        .iter()
        .map(|&r| u16::try_from(r).map_err(|_| format(path, format!("region id {r} exceeds 16 bits"))))
        .collect::<Result<Vec<u16>, _>>()?;
    let img: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(regions.width() as u32, regions.height() as u32, data).expect("buffer size matches");
    img.save(path).map_err(|e| format(path, e))
}

pub fn read_cloud(path: &Path) -> Result<Vec<[f32; 4]>, DatasetError> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() % 16 != 0 {
        return Err(format(path, format!("{} bytes is not a whole number of points", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| std::array::from_fn(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap())))
        .collect())
}

pub fn write_cloud(path: &Path, cloud: &[[f32; 4]]) -> Result<(), DatasetError> {
    let bytes: Vec<u8> = cloud.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io(path))
}

pub fn cloud_points(cloud: &[[f32; 4]]) -> Vec<Point3<f64>> {
    cloud.iter().map(|p| Point3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect()
}

/// An opened, validated dataset root.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub calibration: Calibration,
    pub trajectory: Trajectory,
    /// Sorted frame ids.
    pub frames: Vec<String>,
}

impl Dataset {
    /// Checks the layout: calibration and poses parse, every image has a
    /// cloud, every id names a pose.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let root = root.into();
        let calibration = read_calibration(&root.join("calib.yaml"))?;
        let poses = root.join("poses.tum");
        let text = fs::read_to_string(&poses).map_err(io(&poses))?;
        let trajectory = Trajectory::from_tum(&text).map_err(|e| format(&poses, e))?;
        let images = root.join("images");
        let mut frames = Vec::new();
        for entry in fs::read_dir(&images).map_err(io(&images))? {
            let path = entry.map_err(io(&images))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            frames.push(id.to_string());
        }
        frames.sort();
        let ds = Self { root, calibration, trajectory, frames };
        for id in &ds.frames {
            if !ds.cloud_path(id).is_file() {
                return Err(DatasetError::MissingPart { root: ds.root.clone(), id: id.clone(), what: "cloud" });
            }
            ds.pose_index(id)?;
        }
        Ok(ds)
    }

    pub fn pose_index(&self, id: &str) -> Result<usize, DatasetError> {
        let bad = |msg: String| format(&self.root.join("images").join(format!("{id}.png")), msg);
        let index: usize = id.parse().map_err(|_| bad(format!("frame id {id:?} is not a decimal index")))?;
        if index >= self.trajectory.poses().len() {
            return Err(bad(format!("frame id {id} is past the last pose ({} poses)", self.trajectory.poses().len())));
        }
        Ok(index)
    }

    pub fn image_time(&self, id: &str) -> Result<f64, DatasetError> {
        Ok(self.trajectory.poses()[self.pose_index(id)?].t)
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn cloud_path(&self, id: &str) -> PathBuf {
        self.root.join("clouds").join(format!("{id}.bin"))
    }

    pub fn labels_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join(format!("{id}.png"))
    }

    pub fn gt_path(&self, id: &str) -> PathBuf {
        self.root.join("gt").join(format!("{id}.png"))
    }

    pub fn regions_path(&self, id: &str) -> PathBuf {
        self.root.join("regions").join(format!("{id}.png"))
    }

    pub fn rgb(&self, id: &str) -> Result<Grid<[u8; 3]>, DatasetError> {
        read_rgb(&self.image_path(id))
    }

    pub fn cloud(&self, id: &str) -> Result<Vec<[f32; 4]>, DatasetError> {
        read_cloud(&self.cloud_path(id))
    }
}

/// Writes a generated scene in the dataset layout, with `gt/` and `regions/`.
pub fn write_scene(root: &Path, scene: &SynthScene) -> Result<(), DatasetError> {
    for sub in ["images", "clouds", "gt", "regions"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(io(&d))?;
    }
    let calib = Calibration { intrinsics: scene.intrinsics, extrinsics: scene.extrinsics.clone() };
    write_calibration(&root.join("calib.yaml"), &calib)?;
    let poses = root.join("poses.tum");
    fs::write(&poses, scene.trajectory.to_tum()).map_err(io(&poses))?;
    for f in &scene.frames {
        let id = &f.frame_id;
        write_rgb(&root.join("images").join(format!("{id}.png")), &f.rgb)?;
        write_cloud(&root.join("clouds").join(format!("{id}.bin")), &f.cloud)?;
        write_labels(&root.join("gt").join(format!("{id}.png")), &f.gt)?;
        write_regions(&root.join("regions").join(format!("{id}.png")), &f.gt_regions)?;
    }
    Ok(())
}
