use std::path::Path;

use image::imageops::FilterType;

use super::Sample;
use crate::error::{Error, Result};
use crate::image::Image;

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Load `root/<class_name>/<image files>` into samples resized to `size x size` RGB.
///
/// Class ids follow the sorted class-folder names so ids are stable across
/// machines; `class_names` fixes the id mapping when loading a second split.
pub fn load_image_folder(
    root: &Path,
    size: usize,
    class_names: Option<&[String]>,
    id_base: u64,
) -> Result<(Vec<String>, Vec<Sample>)> {
    let mut dirs: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    dirs.sort();
    let names: Vec<String> = match class_names {
        Some(names) => {
            if let Some(extra) = dirs.iter().find(|d| !names.contains(d)) {
                return Err(Error::Config(format!(
                    "class folder {extra:?} under {} is not a training class",
                    root.display()
                )));
            }
            names.to_vec()
        }
        None => dirs.clone(),
    };
    if names.is_empty() {
        return Err(Error::Empty("image folder"));
    }

    let mut samples = Vec::new();
    for dir in &dirs {
        let class_id = names.iter().position(|n| n == dir).expect("checked above");
        let class_dir = root.join(dir);
        let mut files: Vec<_> = std::fs::read_dir(&class_dir)
            .map_err(|e| Error::io(&class_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for path in files {
            let img = load_rgb(&path, size)?;
            samples.push(Sample {
                id: id_base + samples.len() as u64,
                class_id,
                image: img,
                provenance: super::Provenance::Natural,
                file: Some(path),
            });
        }
    }
    Ok((names, samples))
}

/// Every image directly under `dir`, sorted by file name; used for hold-out style sets.
pub fn load_style_folder(dir: &Path, size: usize) -> Result<Vec<Image>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    files.iter().map(|p| load_rgb(p, size)).collect()
}

pub(crate) fn load_rgb(path: &Path, size: usize) -> Result<Image> {
    let dynimg = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = dynimg
        .resize_exact(size as u32, size as u32, FilterType::Triangle)
        .to_rgb8();
    let n = size * size;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    Image::new(3, size, size, data)
}
