//! Dataset indexing in the MVTec directory layout and image loading into
//! normalized tensors.
//!
//! Expected tree: `<root>/<class>/train/good/*`, `<root>/<class>/test/
//! <defect>/*`, `<root>/<class>/ground_truth/<defect>/<stem>_mask.*`.

use std::path::{Path, PathBuf};

use anomamba_core::{bilinear_resize, Tensor};

use crate::error::{io_err, Error, Result};
use crate::imagefmt;

/// Channel statistics matching the pretrained encoder lineage.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Mask pixels above this (on the 0..255 scale) count as anomalous.
pub const MASK_THRESHOLD: f32 = 127.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestSample {
    pub path: PathBuf,
    /// Directory name under `test/`; "good" marks normal samples.
    pub defect: String,
    pub mask: Option<PathBuf>,
}

impl TestSample {
    pub fn is_defect(&self) -> bool {
        self.defect != "good"
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub class_name: String,
    pub train: Vec<PathBuf>,
    pub test: Vec<TestSample>,
}

fn data_err(m: impl Into<String>) -> Error {
    Error::Dataset(m.into())
}

fn sorted_entries(dir: &Path, dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        if path.is_dir() == dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Class directories under the dataset root, sorted.
pub fn list_classes(root: &Path) -> Result<Vec<String>> {
    let classes: Vec<String> = sorted_entries(root, true)?
        .into_iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    if classes.is_empty() {
        return Err(data_err(format!("no class directories under {}", root.display())));
    }
    Ok(classes)
}

pub fn index_dataset(root: &Path, class: &str) -> Result<DatasetIndex> {
    let class_dir = root.join(class);
    let train = sorted_entries(&class_dir.join("train").join("good"), false)?;
    if train.is_empty() {
        return Err(data_err(format!("{class}: train/good split is empty")));
    }
    let mut test = Vec::new();
    for defect_dir in sorted_entries(&class_dir.join("test"), true)? {
        let defect = defect_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| data_err("unnamed defect directory".to_string()))?;
        let mask_dir = class_dir.join("ground_truth").join(&defect);
        for path in sorted_entries(&defect_dir, false)? {
            let mask = if defect == "good" {
                None
            } else {
                Some(find_mask(&mask_dir, &path)?)
            };
            test.push(TestSample { path, defect: defect.clone(), mask });
        }
    }
    if test.is_empty() {
        return Err(data_err(format!("{class}: test split is empty")));
    }
    Ok(DatasetIndex { class_name: class.to_string(), train, test })
}

fn find_mask(mask_dir: &Path, image: &Path) -> Result<PathBuf> {
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| data_err(format!("{}: no file stem", image.display())))?;
    let want = format!("{stem}_mask");
    for candidate in sorted_entries(mask_dir, false).unwrap_or_default() {
        if candidate.file_stem().map(|s| s.to_string_lossy() == want.as_str()).unwrap_or(false) {
            return Ok(candidate);
        }
    }
    Err(data_err(format!(
        "defective image {} has no mask {}/{want}.*",
        image.display(),
        mask_dir.display()
    )))
}

/// Decodes to (3, size, size), scales to [0, 1], resizes bilinearly, and
/// normalizes with the fixed channel statistics.
pub fn load_image_tensor(path: &Path, size: usize) -> Result<Tensor> {
    let img = imagefmt::load_image(path)?;
    let rgb = img.to_rgb();
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            data[c * h * w + i] = rgb[i * 3 + c] as f32 / 255.0;
        }
    }
    let mut t = Tensor::new(&[1, 3, h, w], data)?;
    if (h, w) != (size, size) {
        t = bilinear_resize(&t, size, size)?;
    }
    let out = t.data_mut();
    for c in 0..3 {
        for i in 0..size * size {
            let v = &mut out[c * size * size + i];
            *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    Ok(Tensor::new(&[3, size, size], t.data().to_vec())?)
}

/// Decodes a mask to (size, size) with values in {0, 1}. Nearest-neighbor
/// resampling keeps it binary.
pub fn load_mask_tensor(path: &Path, size: usize) -> Result<Tensor> {
    let img = imagefmt::load_image(path)?;
    let gray = img.to_gray();
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0f32; size * size];
    for y in 0..size {
        // pixel-center mapping, consistent with the bilinear convention
        let sy = (((y as f32 + 0.5) * h as f32 / size as f32) as usize).min(h - 1);
        for x in 0..size {
            let sx = (((x as f32 + 0.5) * w as f32 / size as f32) as usize).min(w - 1);
            data[y * size + x] =
                if gray[sy * w + sx] as f32 > MASK_THRESHOLD { 1.0 } else { 0.0 };
        }
    }
    Ok(Tensor::new(&[size, size], data)?)
}

/// Stacks per-sample (3, S, S) tensors into one (B, 3, S, S) batch.
pub fn stack_batch(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| data_err("empty batch".to_string()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.numel());
    for s in samples {
        if s.shape() != shape.as_slice() {
            return Err(data_err("batch samples have mixed shapes".to_string()));
        }
        data.extend_from_slice(s.data());
    }
    let mut out_shape = vec![samples.len()];
    out_shape.extend_from_slice(&shape);
    Ok(Tensor::new(&out_shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture_tree(root: &Path) {
        let class = root.join("widget");
        let dirs = [
            class.join("train").join("good"),
            class.join("test").join("good"),
            class.join("test").join("scratch"),
            class.join("ground_truth").join("scratch"),
        ];
        for d in &dirs {
            std::fs::create_dir_all(d).unwrap();
        }
        let px = |v: u8| vec![v; 4 * 4 * 3];
        imagefmt::save_ppm(&dirs[0].join("000.ppm"), 4, 4, &px(100)).unwrap();
        imagefmt::save_ppm(&dirs[0].join("001.ppm"), 4, 4, &px(110)).unwrap();
        imagefmt::save_ppm(&dirs[1].join("000.ppm"), 4, 4, &px(100)).unwrap();
        imagefmt::save_ppm(&dirs[2].join("000.ppm"), 4, 4, &px(30)).unwrap();
        imagefmt::save_ppm(&dirs[2].join("001.ppm"), 4, 4, &px(40)).unwrap();
        let mask = vec![0, 255, 0, 255, 0, 255, 0, 255, 0, 255, 0, 255, 0, 255, 0, 255];
        imagefmt::save_pgm(&dirs[3].join("000_mask.pgm"), 4, 4, &mask).unwrap();
        imagefmt::save_pgm(&dirs[3].join("001_mask.pgm"), 4, 4, &mask).unwrap();
    }

    #[test]
    fn fixture_tree_indexes_with_pairing_and_order() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture_tree(tmp.path());
        let idx = index_dataset(tmp.path(), "widget").unwrap();
        assert_eq!(idx.train.len(), 2);
        assert_eq!(idx.test.len(), 3);
        assert_eq!(idx.test[0].defect, "good");
        assert!(idx.test[0].mask.is_none());
        assert!(idx.test[1].is_defect());
        assert!(idx.test[1].mask.as_ref().unwrap().ends_with("000_mask.pgm"));
        assert_eq!(index_dataset(tmp.path(), "widget").unwrap(), idx);
        assert_eq!(list_classes(tmp.path()).unwrap(), vec!["widget".to_string()]);
    }

    #[test]
    fn missing_mask_names_the_offending_file() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture_tree(tmp.path());
        std::fs::remove_file(
            tmp.path().join("widget/ground_truth/scratch/001_mask.pgm"),
        )
        .unwrap();
        let err = index_dataset(tmp.path(), "widget").unwrap_err().to_string();
        assert!(err.contains("001"), "{err}");
        assert!(err.contains("no mask"), "{err}");
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture_tree(tmp.path());
        for f in ["000.ppm", "001.ppm"] {
            std::fs::remove_file(tmp.path().join("widget/train/good").join(f)).unwrap();
        }
        assert!(index_dataset(tmp.path(), "widget").unwrap_err().to_string().contains("empty"));
    }

    #[test]
    fn white_image_normalizes_to_constant_channels() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("white.ppm");
        imagefmt::save_ppm(&p, 2, 2, &[255u8; 12]).unwrap();
        let t = load_image_tensor(&p, 2).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        for c in 0..3 {
            let expect = (1.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            for i in 0..4 {
                let got = t.data()[c * 4 + i];
                assert!((got - expect).abs() < 1e-6, "channel {c}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn masks_threshold_and_stay_binary_under_resize() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("mask.pgm");
        imagefmt::save_pgm(&p, 2, 2, &[0, 255, 128, 127]).unwrap();
        let t = load_mask_tensor(&p, 2).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 1.0, 0.0]);
        let up = load_mask_tensor(&p, 6).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // top-left quadrant of the upscale comes from source pixel (0,0)
        assert_eq!(up.data()[0], 0.0);
        assert_eq!(up.data()[5], 1.0);
    }

    #[test]
    fn stack_batch_concatenates_in_order() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let s = stack_batch(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
