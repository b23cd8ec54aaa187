use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{read_image, Image};

/// Loads up to `max_items` images from `dir` in a seed-determined order, each
/// center-cropped to a square and resized to `size x size`.
///
/// Files that fail to decode are skipped with a warning. Decoding runs in
/// parallel but the returned order depends only on `seed` and the file names.
pub fn load_dataset(
    dir: impl AsRef<Path>,
    max_items: usize,
    seed: u64,
    size: usize,
) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && !p
                    .file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with('.'))
        })
        .collect();
    paths.sort();
    paths.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let decoded: Vec<Option<Image>> = paths
        .par_iter()
        .map(
            |p| match read_image(p).and_then(|img| img.square_resized(size)) {
                Ok(img) => Some(img),
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    None
                }
            },
        )
        .collect();
    let images: Vec<Image> = decoded.into_iter().flatten().take(max_items).collect();
    if images.is_empty() {
        return Err(Error::invalid(format!(
            "no usable images in {}",
            dir.display()
        )));
    }
    Ok(images)
}

/// Splits off the last tenth as the held-out set (at least one image when
/// there are two or more).
pub fn split_holdout(images: &[Image]) -> (&[Image], &[Image]) {
    let n = images.len();
    let hold = if n >= 2 { (n / 10).max(1) } else { 0 };
    images.split_at(n - hold)
}

/// Writes `images` as `00000.png`, `00001.png`, ... under `dir`.
pub fn write_corpus(images: &[Image], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .par_iter()
        .enumerate()
        .try_for_each(|(i, img)| img.save_png(dir.join(format!("{i:05}.png"))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_png16;
    use crate::synthetic::scenes;

    #[test]
    fn seeded_order_and_limit() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = scenes(10, 16, 3);
        write_corpus(&imgs, dir.path()).unwrap();
        let a = load_dataset(dir.path(), 5, 7, 16).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, load_dataset(dir.path(), 5, 7, 16).unwrap());
        let all = load_dataset(dir.path(), 100, 7, 16).unwrap();
        assert_eq!(all.len(), 10);
        assert_eq!(&all[..5], &a[..]);
        let other = load_dataset(dir.path(), 100, 8, 16).unwrap();
        assert_ne!(all, other);
    }

    #[test]
    fn unreadable_files_skipped_and_empty_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("junk.png"), b"not an image").unwrap();
        assert!(load_dataset(dir.path(), 10, 0, 8).is_err());
        write_corpus(&scenes(2, 8, 0), dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path(), 10, 0, 8).unwrap().len(), 2);
    }

    #[test]
    fn sixteen_bit_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(12, 20, 1.0);
        save_png16(&img, dir.path().join("hi.png")).unwrap();
        let loaded = load_dataset(dir.path(), 1, 0, 8).unwrap();
        let max = loaded[0].data.iter().cloned().fold(0.0f32, f32::max);
        assert!(max <= 1.0 && max > 0.999, "{max}");
    }

    #[test]
    fn holdout_is_last_tenth() {
        let imgs = scenes(25, 8, 1);
        let (train, hold) = split_holdout(&imgs);
        assert_eq!((train.len(), hold.len()), (23, 2));
        assert_eq!(hold[1], imgs[24]);
        assert_eq!(split_holdout(&imgs[..1]).1.len(), 0);
        assert_eq!(split_holdout(&imgs[..5]).1.len(), 1);
    }
}
