use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};

/// One co-registered bitemporal pair with its change mask (1 = changed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    /// `[H, W, 3]`.
    pub image_t1: Array3<u8>,
    pub image_t2: Array3<u8>,
    /// `[H, W]`, values in {0, 1}.
    pub mask: Array2<u8>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image_t1: Array3<u8>, image_t2: Array3<u8>, mask: Array2<u8>) -> Result<Self> {
        let id = id.into();
        let (h, w) = mask.dim();
        if image_t1.dim() != (h, w, 3) || image_t2.dim() != (h, w, 3) {
            return Err(Error::Dataset(format!(
                "{id}: images {:?}/{:?} do not match mask {h}x{w}",
                image_t1.dim(),
                image_t2.dim()
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Dataset(format!("{id}: mask values must be 0 or 1")));
        }
        Ok(Self { id, image_t1, image_t2, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn changed_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    /// Crop `[y, y+h) × [x, x+w)` of all three arrays.
    pub fn crop(&self, id: String, y: usize, x: usize, h: usize, w: usize) -> Self {
        Self {
            id,
            image_t1: self.image_t1.slice(s![y..y + h, x..x + w, ..]).to_owned(),
            image_t2: self.image_t2.slice(s![y..y + h, x..x + w, ..]).to_owned(),
            mask: self.mask.slice(s![y..y + h, x..x + w]).to_owned(),
        }
    }

    /// Applies the same geometric transform to both images and the mask.
    pub fn augmented(&self, aug: Augment) -> Self {
        let flip_h = |a: &Array3<u8>| a.slice(s![.., ..;-1, ..]).to_owned();
        let flip_v = |a: &Array3<u8>| a.slice(s![..;-1, .., ..]).to_owned();
        let rot = |a: &Array3<u8>| a.view().permuted_axes([1, 0, 2]).slice(s![.., ..;-1, ..]).to_owned();
        let (t1, t2, m) = match aug {
            Augment::None => return self.clone(),
            Augment::FlipHorizontal => (
                flip_h(&self.image_t1),
                flip_h(&self.image_t2),
                self.mask.slice(s![.., ..;-1]).to_owned(),
            ),
            Augment::FlipVertical => (
                flip_v(&self.image_t1),
                flip_v(&self.image_t2),
                self.mask.slice(s![..;-1, ..]).to_owned(),
            ),
            Augment::Rotate90 if self.height() == self.width() => (
                rot(&self.image_t1),
                rot(&self.image_t2),
                self.mask.t().slice(s![.., ..;-1]).to_owned(),
            ),
            Augment::Rotate90 => return self.clone(),
        };
        Self {
            id: self.id.clone(),
            image_t1: t1.as_standard_layout().into_owned(),
            image_t2: t2.as_standard_layout().into_owned(),
            mask: m.as_standard_layout().into_owned(),
        }
    }
}

/// Training-time geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    None,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
}

impl Augment {
    pub const ALL: [Augment; 4] = [Augment::None, Augment::FlipHorizontal, Augment::FlipVertical, Augment::Rotate90];
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

pub fn load_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path).map_err(img_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).expect("rgb buffer is h*w*3"))
}

/// Grayscale mask binarized at `> 127`.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(img_err(path))?.to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), raw).expect("gray buffer is h*w"))
}

pub fn save_rgb(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf = image.as_standard_layout().iter().copied().collect();
    let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("rgb buffer is h*w*3");
    img.save(path).map_err(img_err(path))
}

/// Writes a {0,1} mask as 0/255 grayscale.
pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = mask.as_standard_layout().iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, buf).expect("gray buffer is h*w");
    img.save(path).map_err(img_err(path))
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Reads `A/`, `B/` and `label/` PNGs with identical file names, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<SampleRecord>> {
    let dirs: [PathBuf; 3] = [root.join("A"), root.join("B"), root.join("label")];
    let ids = png_stems(&dirs[0])?;
    for d in &dirs[1..] {
        let other = png_stems(d)?;
        if other != ids {
            return Err(Error::Dataset(format!(
                "{} and {} do not contain the same file names",
                dirs[0].display(),
                d.display()
            )));
        }
    }
    if ids.is_empty() {
        return Err(Error::Dataset(format!("no PNG files under {}", dirs[0].display())));
    }
    ids.into_iter()
        .map(|id| {
            let file = format!("{id}.png");
            SampleRecord::new(
                id.clone(),
                load_rgb(&dirs[0].join(&file))?,
                load_rgb(&dirs[1].join(&file))?,
                load_mask(&dirs[2].join(&file))?,
            )
        })
        .collect()
}

pub fn save_dataset(records: &[SampleRecord], root: &Path) -> Result<()> {
    for sub in ["A", "B", "label"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    for r in records {
        let file = format!("{}.png", r.id);
        save_rgb(&root.join("A").join(&file), &r.image_t1)?;
        save_rgb(&root.join("B").join(&file), &r.image_t2)?;
        save_mask(&root.join("label").join(&file), &r.mask)?;
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> SampleRecord {
        let t1 = Array3::from_shape_fn((4, 4, 3), |(i, j, c)| (i * 16 + j * 4 + c) as u8);
        let t2 = t1.mapv(|v| v.wrapping_add(1));
        let mask = Array2::from_shape_fn((4, 4), |(i, j)| u8::from(i == j));
        SampleRecord::new("r", t1, t2, mask).unwrap()
    }

    #[test]
    fn rejects_inconsistent_arrays() {
        let r = record();
        assert!(SampleRecord::new("x", r.image_t1.clone(), r.image_t2.clone(), Array2::zeros((3, 4))).is_err());
        assert!(SampleRecord::new("x", r.image_t1.clone(), r.image_t2.clone(), Array2::from_elem((4, 4), 255)).is_err());
    }

    #[test]
    fn augmentations_keep_pixels_aligned() {
        let r = record();
        for aug in Augment::ALL {
            let a = r.augmented(aug);
            // the mask diagonal must carry the same t1 pixels as before, as a set
            let mut before: Vec<_> = (0..4).map(|i| r.image_t1[[i, i, 0]]).collect();
            let mut after: Vec<_> = a
                .mask
                .indexed_iter()
                .filter(|(_, &m)| m == 1)
                .map(|((i, j), _)| a.image_t1[[i, j, 0]])
                .collect();
            before.sort();
            after.sort();
            assert_eq!(before, after, "{aug:?}");
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = record();
        save_dataset(std::slice::from_ref(&r), dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn mismatched_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&[record()], dir.path()).unwrap();
        std::fs::rename(dir.path().join("B/r.png"), dir.path().join("B/s.png")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    }
}
