//! Patches stored as individual PNG files named `<tag>_<index>.png`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Patch;
use crate::raster::{patch_image, RgbImage};

/// `<tag>_<index>.png` with a zero-padded index, so that name order is
/// grid order.
pub fn patch_file_name(tag: &str, index: usize) -> String {
    format!("{tag}_{index:03}.png")
}

/// Source tag of a patch file name: the stem up to a trailing `_<digits>`,
/// or the whole stem.
pub fn tag_of_file_name(name: &str) -> String {
    let stem = name.strip_suffix(".png").unwrap_or(name);
    match stem.rsplit_once('_') {
        Some((tag, idx)) if !tag.is_empty() && !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) => {
            tag.to_owned()
        }
        _ => stem.to_owned(),
    }
}

/// Patches from named square images. Images are ordered by name and
/// numbered from 0 in that order; tags come from the names.
pub fn patches_from_named_images(mut items: Vec<(String, RgbImage)>) -> Result<Vec<Patch>> {
    items.sort_by(|a, b| a.0.cmp(&b.0));
    items
        .into_iter()
        .enumerate()
        .map(|(id, (name, img))| {
            if img.width() != img.height() {
                return Err(Error::shape(format!(
                    "{name}: patches must be square, got {}x{}",
                    img.width(),
                    img.height()
                )));
            }
            Patch::new(id, img.width(), img.data().to_vec(), Some(tag_of_file_name(&name)))
        })
        .collect()
}

/// Every `*.png` of a directory, via [`patches_from_named_images`].
pub fn load_patch_dir(dir: &Path) -> Result<Vec<Patch>> {
    let mut items = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if path.is_file() && name.ends_with(".png") {
            items.push((name, RgbImage::load_png(&path)?));
        }
    }
    if items.is_empty() {
        return Err(Error::Empty(format!("no .png patches in {}", dir.display())));
    }
    patches_from_named_images(items)
}

/// Writes patches as `<tag>_<index>.png`, index = node id; untagged patches
/// use `fallback_tag`.
pub fn save_patch_dir(patches: &[Patch], dir: &Path, fallback_tag: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in patches {
        let tag = p.source_tag().unwrap_or(fallback_tag);
        patch_image(p).save_png(&dir.join(patch_file_name(tag, p.node_id())))?;
    }
    Ok(())
}
