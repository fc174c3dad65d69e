use ndarray::{s, Array2, Array3};

use super::SampleRecord;
use crate::error::{Error, Result};

/// Grid crops of `size × size` every `stride` pixels; partial tiles at the
/// right and bottom edges are dropped. Tile ids are `<id>_<row>_<col>`.
pub fn tile(record: &SampleRecord, size: usize, stride: usize) -> Result<Vec<SampleRecord>> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument("tile size and stride must be positive".into()));
    }
    let (h, w) = (record.height(), record.width());
    let positions = |extent: usize| -> Vec<usize> {
        if extent < size {
            Vec::new()
        } else {
            (0..=(extent - size) / stride).map(|i| i * stride).collect()
        }
    };
    let (ys, xs) = (positions(h), positions(w));
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for (r, &y) in ys.iter().enumerate() {
        for (c, &x) in xs.iter().enumerate() {
            out.push(record.crop(format!("{}_{r}_{c}", record.id), y, x, size, size));
        }
    }
    Ok(out)
}

/// Reassembles non-overlapping tiles laid out `rows × cols` (row-major).
pub fn untile(tiles: &[SampleRecord], rows: usize, cols: usize, id: &str) -> Result<SampleRecord> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} tiles cannot fill a {rows}x{cols} grid",
            tiles.len()
        )));
    }
    let size = tiles[0].height();
    let (h, w) = (rows * size, cols * size);
    let mut t1 = Array3::zeros((h, w, 3));
    let mut t2 = Array3::zeros((h, w, 3));
    let mut mask = Array2::zeros((h, w));
    for (i, t) in tiles.iter().enumerate() {
        let (y, x) = ((i / cols) * size, (i % cols) * size);
        t1.slice_mut(s![y..y + size, x..x + size, ..]).assign(&t.image_t1);
        t2.slice_mut(s![y..y + size, x..x + size, ..]).assign(&t.image_t2);
        mask.slice_mut(s![y..y + size, x..x + size]).assign(&t.mask);
    }
    SampleRecord::new(id, t1, t2, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(h: usize, w: usize) -> SampleRecord {
        let t1 = Array3::from_shape_fn((h, w, 3), |(i, j, c)| ((i * 7 + j * 3 + c) % 251) as u8);
        let t2 = Array3::from_shape_fn((h, w, 3), |(i, j, c)| ((i + j * 11 + c * 5) % 253) as u8);
        let mask = Array2::from_shape_fn((h, w), |(i, j)| u8::from((i / 5 + j / 3) % 2 == 0));
        SampleRecord::new("scene", t1, t2, mask).unwrap()
    }

    #[test]
    fn counts_and_remainders() {
        assert_eq!(tile(&record(512, 512), 256, 256).unwrap().len(), 4);
        let tiles = tile(&record(300, 300), 256, 256).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].id, "scene_0_0");
        assert!(tile(&record(100, 300), 256, 256).unwrap().is_empty());
        assert_eq!(tile(&record(512, 256), 256, 128).unwrap().len(), 3);
    }

    #[test]
    fn round_trip_is_exact() {
        let r = record(512, 512);
        let tiles = tile(&r, 256, 256).unwrap();
        assert_eq!(tiles[1].id, "scene_0_1");
        let back = untile(&tiles, 2, 2, "scene").unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn crop_window_is_shared() {
        let r = record(300, 280);
        for t in tile(&r, 128, 128).unwrap() {
            let (row, col): (usize, usize) = {
                let mut parts = t.id.rsplitn(3, '_');
                let c = parts.next().unwrap().parse().unwrap();
                let rr = parts.next().unwrap().parse().unwrap();
                (rr, c)
            };
            let (y, x) = (row * 128, col * 128);
            assert_eq!(t.image_t1[[5, 7, 1]], r.image_t1[[y + 5, x + 7, 1]]);
            assert_eq!(t.image_t2[[5, 7, 1]], r.image_t2[[y + 5, x + 7, 1]]);
            assert_eq!(t.mask[[5, 7]], r.mask[[y + 5, x + 7]]);
        }
    }
}
