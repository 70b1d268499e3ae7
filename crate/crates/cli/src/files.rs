//! On-disk conventions shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use splatfix::ply::import_ply_3dgs;
use splatfix::scene::{load_cameras, load_scene};
use splatfix::{AttributeImage, Error, GaussianScene, Result, ViewSet};

pub fn view_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("view_{i}.pfm"))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `view_<i>.pfm` and a PNG preview for each image.
pub fn write_images(dir: &Path, images: &[AttributeImage]) -> Result<()> {
    create_dir(dir)?;
    for (i, img) in images.iter().enumerate() {
        let pfm = view_file(dir, i);
        img.write_pfm(&pfm)?;
        if img.channels() == 3 || img.channels() == 1 {
            img.write_png(pfm.with_extension("png"))?;
        }
    }
    Ok(())
}

pub fn read_images(dir: &Path, count: usize) -> Result<Vec<AttributeImage>> {
    (0..count).map(|i| AttributeImage::read_pfm(view_file(dir, i))).collect()
}

/// Every `view_<i>.pfm` in `dir`, in index order, stopping at the first gap.
pub fn read_all_images(dir: &Path) -> Result<Vec<AttributeImage>> {
    let mut out = Vec::new();
    while view_file(dir, out.len()).is_file() {
        out.push(AttributeImage::read_pfm(view_file(dir, out.len()))?);
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("no view_0.pfm in {}", dir.display())));
    }
    Ok(out)
}

pub fn load_any_scene(path: &Path) -> Result<GaussianScene> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => import_ply_3dgs(path),
        _ => load_scene(path),
    }
}

/// Camera file plus, when given, its image directory.
pub fn load_views(cameras: &Path, images: Option<&Path>) -> Result<ViewSet> {
    let set = load_cameras(cameras)?;
    match images {
        Some(dir) => {
            let imgs = read_images(dir, set.len())?;
            set.with_images(imgs)
        }
        None => Ok(set),
    }
}
