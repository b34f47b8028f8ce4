//! Scene directories: `view_{i}.png` (8-bit straight-alpha RGBA) plus
//! `cameras.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{Image, PosedView};

pub const CAMERAS_FILE: &str = "cameras.json";

/// One `cameras.json` entry; the extrinsic is row-major 4x4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub index: usize,
    pub extrinsic: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

impl CameraEntry {
    pub fn from_view(index: usize, v: &PosedView) -> Self {
        let c = &v.camera;
        let mut extrinsic = [0.0; 16];
        for i in 0..4 {
            extrinsic[i * 4..i * 4 + 4].copy_from_slice(&c.extrinsic[i]);
        }
        Self {
            index,
            extrinsic,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            elevation_deg: v.elevation_deg,
            azimuth_deg: v.azimuth_deg,
        }
    }

    pub fn camera(&self) -> Camera {
        let mut extrinsic = [[0.0; 4]; 4];
        for (i, row) in extrinsic.iter_mut().enumerate() {
            row.copy_from_slice(&self.extrinsic[i * 4..i * 4 + 4]);
        }
        Camera {
            extrinsic,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }
}

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let enc = ::image::codecs::png::PngEncoder::new(&mut out);
    ::image::ImageEncoder::write_image(
        enc,
        &image.to_u8(),
        image.width as u32,
        image.height as u32,
        ::image::ExtendedColorType::Rgba8,
    )?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Png)?.to_rgba8();
    Image::from_u8(img.width() as usize, img.height() as usize, img.as_raw())
}

pub fn save_png(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

pub fn load_png(path: &Path) -> Result<Image> {
    decode_png(&fs::read(path)?)
}

pub fn view_file(index: usize) -> String {
    format!("view_{index}.png")
}

/// Writes one scene directory, creating it if needed.
pub fn write_scene(dir: &Path, views: &[PosedView]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        save_png(&dir.join(view_file(i)), &v.image)?;
        entries.push(CameraEntry::from_view(i, v));
    }
    let json = serde_json::to_vec_pretty(&entries)?;
    write_atomic(&dir.join(CAMERAS_FILE), &json)
}

pub fn read_scene(dir: &Path) -> Result<Vec<PosedView>> {
    let entries: Vec<CameraEntry> = serde_json::from_slice(&fs::read(dir.join(CAMERAS_FILE))?)?;
    let mut views = Vec::with_capacity(entries.len());
    for (i, e) in entries.into_iter().enumerate() {
        if e.index != i {
            return Err(Error::Format(format!("camera entries must be dense from 0; entry {i} has index {}", e.index)));
        }
        let image = load_png(&dir.join(view_file(i)))?;
        let camera = e.camera();
        camera.validate()?;
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::Format(format!("view {i} image size differs from its camera")));
        }
        views.push(PosedView {
            image,
            camera,
            elevation_deg: e.elevation_deg,
            azimuth_deg: e.azimuth_deg,
        });
    }
    Ok(views)
}

/// Scene subdirectories of a dataset root, sorted by name.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let p = entry?.path();
        if p.join(CAMERAS_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}
