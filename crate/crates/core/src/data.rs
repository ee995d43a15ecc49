//! Paired low-light / ground-truth ingestion with co-located random crops.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageTensor;
use crate::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub low: ImageTensor,
    pub gt: ImageTensor,
}

/// File pairs found under a dataset root.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub pairs: Vec<(PathBuf, PathBuf)>,
    /// True when the root had no `low`/`gt` split and each image is its own target.
    pub unpaired: bool,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

impl PairedDataset {
    /// Scans `root/low` and `root/gt` for files with matching names, or, when
    /// those folders are absent, every image directly under `root`.
    pub fn scan(root: &Path) -> Result<Self> {
        let (low_dir, gt_dir) = (root.join("low"), root.join("gt"));
        if low_dir.is_dir() || gt_dir.is_dir() {
            let low = list_images(&low_dir)?;
            let gt = list_images(&gt_dir)?;
            if let Some(name) = low.keys().find(|n| !gt.contains_key(*n)) {
                return Err(Error::Ingestion(format!("{name} has no counterpart in {}", gt_dir.display())));
            }
            if let Some(name) = gt.keys().find(|n| !low.contains_key(*n)) {
                return Err(Error::Ingestion(format!("{name} has no counterpart in {}", low_dir.display())));
            }
            let pairs: Vec<_> = low.into_iter().map(|(n, l)| (l, gt[&n].clone())).collect();
            if pairs.is_empty() {
                return Err(Error::Ingestion(format!("no image pairs under {}", root.display())));
            }
            return Ok(Self { pairs, unpaired: false });
        }
        let images = list_images(root)?;
        if images.is_empty() {
            return Err(Error::Ingestion(format!("no images under {}", root.display())));
        }
        Ok(Self {
            pairs: images.into_values().map(|p| (p.clone(), p)).collect(),
            unpaired: true,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Decodes one pair at its original size; the two images must agree.
    pub fn load_pair(&self, index: usize) -> Result<(ImageTensor, ImageTensor)> {
        let (l, g) = &self.pairs[index];
        let low = read_unpadded(l)?;
        let gt = if self.unpaired { low.clone() } else { read_unpadded(g)? };
        if (low.h, low.w) != (gt.h, gt.w) {
            return Err(Error::Ingestion(format!(
                "{}: low is {}x{} but gt is {}x{}",
                l.file_name().unwrap_or_default().to_string_lossy(),
                low.h,
                low.w,
                gt.h,
                gt.w
            )));
        }
        Ok((low, gt))
    }
}

fn read_unpadded(path: &Path) -> Result<ImageTensor> {
    Ok(crate::image::load_image(path)?.crop_to_original())
}

/// Identical random window from both images; images smaller than the patch
/// are edge-padded first.
pub fn random_crop(low: &ImageTensor, gt: &ImageTensor, patch: usize, rng: &mut impl Rng) -> Result<PairedSample> {
    let low = low.pad_to(patch, patch);
    let gt = gt.pad_to(patch, patch);
    let y = rng.gen_range(0..=low.h - patch);
    let x = rng.gen_range(0..=low.w - patch);
    Ok(PairedSample {
        low: low.crop(y, x, patch, patch)?,
        gt: gt.crop(y, x, patch, patch)?,
    })
}

/// Endless, seed-deterministic stream of co-located crops.
pub struct PairIterator {
    dataset: Arc<PairedDataset>,
    cache: Vec<Option<(ImageTensor, ImageTensor)>>,
    patch: usize,
    rng: ChaCha8Rng,
}

impl PairIterator {
    fn next_sample(&mut self) -> Result<PairedSample> {
        let i = self.rng.gen_range(0..self.dataset.len());
        if self.cache[i].is_none() {
            self.cache[i] = Some(self.dataset.load_pair(i)?);
        }
        let (low, gt) = self.cache[i].as_ref().unwrap();
        random_crop(low, gt, self.patch, &mut self.rng)
    }
}

impl Iterator for PairIterator {
    type Item = Result<PairedSample>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_sample())
    }
}

pub fn iterate_pairs(root: &Path, patch: usize, seed: u64) -> Result<PairIterator> {
    if patch == 0 {
        return Err(Error::Argument("patch size must be positive".into()));
    }
    let dataset = Arc::new(PairedDataset::scan(root)?);
    Ok(PairIterator {
        cache: vec![None; dataset.len()],
        dataset,
        patch,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

/// Runs `iter` on a producer thread feeding a bounded queue. Samples arrive
/// in the same order as from the iterator itself.
pub fn prefetch(iter: PairIterator, capacity: usize) -> Receiver<Result<PairedSample>> {
    let (tx, rx) = sync_channel(capacity.max(1));
    std::thread::spawn(move || {
        for item in iter {
            let stop = item.is_err();
            if tx.send(item).is_err() || stop {
                break;
            }
        }
    });
    rx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, h: u32, w: u32, seed: u8) {
        let img = image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x as u8).wrapping_mul(seed), (y as u8).wrapping_add(seed), seed])
        });
        img.save(path).unwrap();
    }

    fn paired_root() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("low")).unwrap();
        std::fs::create_dir(dir.path().join("gt")).unwrap();
        for (i, name) in ["a.png", "b.png"].iter().enumerate() {
            write(&dir.path().join("low").join(name), 40, 50, 3 + i as u8);
            write(&dir.path().join("gt").join(name), 40, 50, 90 + i as u8);
        }
        dir
    }

    #[test]
    fn crops_are_colocated_and_deterministic() {
        let dir = paired_root();
        let a: Vec<_> = iterate_pairs(dir.path(), 16, 7).unwrap().take(5).map(|s| s.unwrap()).collect();
        let b: Vec<_> = iterate_pairs(dir.path(), 16, 7).unwrap().take(5).map(|s| s.unwrap()).collect();
        assert_eq!(a, b);
        // Both crops come from the same window: the synthetic images encode x in
        // channel 0 (scaled by the seed) and y in channel 1 (offset by the seed).
        for s in &a {
            let (l, g) = (&s.low, &s.gt);
            let low_y = (l.at(1, 0, 0) * 255.0).round() as i32;
            let gt_y = (g.at(1, 0, 0) * 255.0).round() as i32;
            let low_seed = (l.at(2, 0, 0) * 255.0).round() as i32;
            let gt_seed = (g.at(2, 0, 0) * 255.0).round() as i32;
            assert_eq!(low_y - low_seed, gt_y - gt_seed);
        }
    }

    #[test]
    fn full_size_patch_and_small_images() {
        let dir = paired_root();
        let mut it = iterate_pairs(dir.path(), 40, 1).unwrap();
        let s = it.next().unwrap().unwrap();
        assert_eq!((s.low.h, s.low.w), (40, 40));

        // 64-pixel patch from 40x50 images: pad by edge replication, then crop
        let s = iterate_pairs(dir.path(), 64, 1).unwrap().next().unwrap().unwrap();
        assert_eq!((s.low.h, s.low.w), (64, 64));
        let (low, _) = PairedDataset::scan(dir.path()).unwrap().load_pair(0).unwrap();
        let padded = low.pad_to(64, 64);
        let both = [
            padded.crop(0, 0, 64, 64).unwrap(),
            PairedDataset::scan(dir.path()).unwrap().load_pair(1).unwrap().0.pad_to(64, 64),
        ];
        assert!(both.iter().any(|b| b.data == s.low.data));
    }

    #[test]
    fn missing_counterpart_is_named() {
        let dir = paired_root();
        write(&dir.path().join("low").join("orphan.png"), 8, 8, 1);
        let err = iterate_pairs(dir.path(), 8, 0).err().unwrap();
        assert!(matches!(&err, Error::Ingestion(m) if m.contains("orphan.png")));
    }

    #[test]
    fn unpaired_folder_uses_image_as_target() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("x.png"), 20, 20, 5);
        let ds = PairedDataset::scan(dir.path()).unwrap();
        assert!(ds.unpaired);
        let s = iterate_pairs(dir.path(), 8, 3).unwrap().next().unwrap().unwrap();
        assert_eq!(s.low, s.gt);
    }

    #[test]
    fn prefetch_preserves_order() {
        let dir = paired_root();
        let direct: Vec<_> = iterate_pairs(dir.path(), 16, 2).unwrap().take(6).map(|s| s.unwrap()).collect();
        let rx = prefetch(iterate_pairs(dir.path(), 16, 2).unwrap(), 2);
        let queued: Vec<_> = rx.iter().take(6).map(|s| s.unwrap()).collect();
        assert_eq!(direct, queued);
    }
}
