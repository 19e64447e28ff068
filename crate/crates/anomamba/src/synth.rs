//! Procedural striped-texture dataset in the MVTec directory layout, for
//! end-to-end runs without real data. Defects are squares and disks filled
//! with off-texture noise, with matching binary masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Result};
use crate::imagefmt;

#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub size: usize,
    pub train: usize,
    pub test_good: usize,
    pub test_defect: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { size: 64, train: 8, test_good: 5, test_defect: 5, seed: 0 }
    }
}

const STRIPE_PERIOD: f32 = 16.0;

fn texture(rng: &mut ChaCha8Rng, size: usize) -> Vec<u8> {
    let phase: f32 = rng.gen_range(0.0..STRIPE_PERIOD);
    let mut img = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let s = (core::f32::consts::TAU * (x as f32 + phase) / STRIPE_PERIOD).sin();
            let jitter: f32 = rng.gen_range(-4.0..4.0);
            let v = 128.0 + 70.0 * s + jitter;
            let px = (y * size + x) * 3;
            img[px] = v.clamp(0.0, 255.0) as u8;
            img[px + 1] = (v * 0.92).clamp(0.0, 255.0) as u8;
            img[px + 2] = (v * 0.84).clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Paints one square or disk of dark or bright per-pixel noise; returns the
/// region as a binary mask.
fn paint_defect(rng: &mut ChaCha8Rng, size: usize, img: &mut [u8]) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    let band: (f32, f32) =
        if rng.gen_bool(0.5) { (20.0, 110.0) } else { (145.0, 235.0) };
    let square = rng.gen_bool(0.5);
    if square {
        let side = rng.gen_range(size / 6..size / 3);
        let x0 = rng.gen_range(0..size - side);
        let y0 = rng.gen_range(0..size - side);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                stamp(img, &mut mask, size, x, y, band, rng);
            }
        }
    } else {
        let r = rng.gen_range(size / 8..size / 5) as i64;
        let cx = rng.gen_range(r..size as i64 - r);
        let cy = rng.gen_range(r..size as i64 - r);
        for y in (cy - r)..=(cy + r) {
            for x in (cx - r)..=(cx + r) {
                if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r {
                    stamp(img, &mut mask, size, x as usize, y as usize, band, rng);
                }
            }
        }
    }
    mask
}

fn stamp(
    img: &mut [u8],
    mask: &mut [u8],
    size: usize,
    x: usize,
    y: usize,
    band: (f32, f32),
    rng: &mut ChaCha8Rng,
) {
    let px = (y * size + x) * 3;
    let v: f32 = rng.gen_range(band.0..band.1);
    img[px] = v as u8;
    img[px + 1] = (v * 0.95) as u8;
    img[px + 2] = (v * 0.9) as u8;
    mask[y * size + x] = 255;
}

/// Writes the full class tree under `root/<class>`.
pub fn generate(root: &Path, class: &str, spec: &SynthSpec) -> Result<()> {
    let class_dir = root.join(class);
    let train_dir = class_dir.join("train").join("good");
    let good_dir = class_dir.join("test").join("good");
    let defect_dir = class_dir.join("test").join("defect");
    let mask_dir = class_dir.join("ground_truth").join("defect");
    for d in [&train_dir, &good_dir, &defect_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in 0..spec.train {
        let img = texture(&mut rng, spec.size);
        imagefmt::save_ppm(&train_dir.join(format!("{i:03}.ppm")), spec.size, spec.size, &img)?;
    }
    for i in 0..spec.test_good {
        let img = texture(&mut rng, spec.size);
        imagefmt::save_ppm(&good_dir.join(format!("{i:03}.ppm")), spec.size, spec.size, &img)?;
    }
    for i in 0..spec.test_defect {
        let mut img = texture(&mut rng, spec.size);
        let mut mask = paint_defect(&mut rng, spec.size, &mut img);
        if rng.gen_bool(0.4) {
            let extra = paint_defect(&mut rng, spec.size, &mut img);
            for (m, e) in mask.iter_mut().zip(&extra) {
                *m = (*m).max(*e);
            }
        }
        imagefmt::save_ppm(&defect_dir.join(format!("{i:03}.ppm")), spec.size, spec.size, &img)?;
        imagefmt::save_pgm(
            &mask_dir.join(format!("{i:03}_mask.pgm")),
            spec.size,
            spec.size,
            &mask,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset;

    #[test]
    fn generated_tree_indexes_cleanly() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        generate(tmp.path(), "stripes", &spec).unwrap();
        let idx = dataset::index_dataset(tmp.path(), "stripes").unwrap();
        assert_eq!(idx.train.len(), spec.train);
        assert_eq!(idx.test.len(), spec.test_good + spec.test_defect);
        let defects: Vec<_> = idx.test.iter().filter(|s| s.is_defect()).collect();
        assert_eq!(defects.len(), spec.test_defect);
        for d in defects {
            let mask = dataset::load_mask_tensor(d.mask.as_ref().unwrap(), spec.size).unwrap();
            let on = mask.data().iter().filter(|&&v| v == 1.0).count();
            assert!(on > 0, "defect mask must be non-empty");
            assert!(on < spec.size * spec.size / 2, "defect must not cover the image");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let spec = SynthSpec { train: 2, test_good: 1, test_defect: 2, ..Default::default() };
        generate(t1.path(), "s", &spec).unwrap();
        generate(t2.path(), "s", &spec).unwrap();
        for rel in
            ["s/train/good/001.ppm", "s/test/defect/001.ppm", "s/ground_truth/defect/001_mask.pgm"]
        {
            let a = std::fs::read(t1.path().join(rel)).unwrap();
            let b = std::fs::read(t2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
    }

    #[test]
    fn defect_pixels_differ_from_texture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let size = 64;
        let mut img = texture(&mut rng, size);
        let clean = img.clone();
        let mask = paint_defect(&mut rng, size, &mut img);
        let mut changed = 0usize;
        let mut inside = 0usize;
        for (i, &m) in mask.iter().enumerate() {
            if m == 255 {
                inside += 1;
                let d = (img[i * 3] as i32 - clean[i * 3] as i32).abs();
                if d > 20 {
                    changed += 1;
                }
            }
        }
        assert!(inside > 40);
        // flat fill must stand out from the stripe texture on most pixels
        assert!(changed * 10 >= inside * 6, "{changed}/{inside}");
    }
}
