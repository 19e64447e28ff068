//! Reconstruction loss, per-pixel anomaly maps, and image-level scores.

use alloc::vec;
use alloc::vec::Vec;

use crate::blocks::FeaturePyramid;
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::mathf;
use crate::ops;
use crate::tensor::Tensor;

/// Sum over levels of the per-level mean squared error between decoder
/// outputs and their targets.
pub fn multiscale_mse_loss(g: &mut Graph, decoded: &[Var], targets: &[Tensor]) -> Result<Var> {
    if decoded.is_empty() || decoded.len() != targets.len() {
        return Err(shape_err(
            "multiscale loss",
            alloc::format!("{} decoded levels, {} targets", decoded.len(), targets.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&d, t) in decoded.iter().zip(targets) {
        let tv = g.input(t);
        let l = g.mse(d, tv)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(total.unwrap())
}

/// Statistic reducing a smoothed pixel map to one image score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreStat {
    Max,
    /// Mean of the k largest pixels; k is clamped to the map size.
    TopKMean(usize),
}

pub struct AnomalyResult {
    /// Smoothed fused map, (H, W).
    pub pixel_map: Tensor,
    pub image_score: f32,
    /// Per-level cosine-distance maps before upsampling, (h_l, w_l).
    pub per_level_maps: Vec<Tensor>,
    /// Positions where either feature vector had zero norm.
    pub degenerate_positions: usize,
}

/// Per-position cosine distance along channels, (B, C, H, W) x2 -> (B, H, W).
/// A zero-norm vector on either side yields distance 1; per-sample counts of
/// such positions are returned alongside the map.
pub fn cosine_distance_map(enc: &Tensor, dec: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = enc.dims4("cosine map")?;
    if dec.shape() != enc.shape() {
        return Err(shape_err(
            "cosine map",
            alloc::format!("shapes {:?} vs {:?}", enc.shape(), dec.shape()),
        ));
    }
    let es = enc.data();
    let ds = dec.data();
    let plane = h * w;
    let mut out = vec![0.0f32; b * plane];
    let mut degenerate = vec![0usize; b];
    for bi in 0..b {
        for p in 0..plane {
            let base = bi * c * plane + p;
            let mut dot = 0.0f64;
            let mut ne = 0.0f64;
            let mut nd = 0.0f64;
            for ci in 0..c {
                let e = es[base + ci * plane] as f64;
                let d = ds[base + ci * plane] as f64;
                dot += e * d;
                ne += e * e;
                nd += d * d;
            }
            let dist = if ne == 0.0 || nd == 0.0 {
                degenerate[bi] += 1;
                1.0
            } else {
                let sim = (dot / (mathf::sqrt(ne) * mathf::sqrt(nd))).clamp(-1.0, 1.0);
                1.0 - sim
            };
            out[bi * plane + p] = dist as f32;
        }
    }
    Ok((Tensor::new(&[b, h, w], out)?, degenerate))
}

/// Normalized 1D Gaussian taps for radius round(4 * sigma).
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = libm::roundf(4.0 * sigma) as i64;
    let radius = radius.max(1) as usize;
    let mut taps = Vec::with_capacity(2 * radius + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0f32;
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        let t = mathf::expf(-d * d * inv);
        sum += t;
        taps.push(t);
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

fn reflect(i: i64, n: i64) -> usize {
    // mirrored at edges with edge samples repeated
    let mut i = i;
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur of one (H, W) map with mirrored boundaries.
/// Sigma <= 0 returns the input unchanged.
pub fn gaussian_smooth(map: &Tensor, sigma: f32) -> Result<Tensor> {
    let (h, w) = map.dims2("gaussian smooth")?;
    if sigma <= 0.0 {
        return Ok(map.clone());
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as i64;
    let xs = map.data();
    let mut rows = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ti, t) in taps.iter().enumerate() {
                let sx = reflect(x as i64 + ti as i64 - radius, w as i64);
                acc += t * xs[y * w + sx];
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ti, t) in taps.iter().enumerate() {
                let sy = reflect(y as i64 + ti as i64 - radius, h as i64);
                acc += t * rows[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Tensor::new(&[h, w], out)
}

pub fn image_score(map: &[f32], stat: ScoreStat) -> f32 {
    match stat {
        ScoreStat::Max => map.iter().fold(0.0f32, |m, &v| if v > m { v } else { m }),
        ScoreStat::TopKMean(k) => {
            let k = k.clamp(1, map.len());
            let mut sorted: Vec<f32> = map.to_vec();
            sorted.sort_unstable_by(|a, b| b.total_cmp(a));
            sorted[..k].iter().sum::<f32>() / k as f32
        }
    }
}

/// Fused anomaly maps for a batch: per-level cosine distance, bilinear
/// upsampling to (out_h, out_w), mean across levels, Gaussian smoothing,
/// one score per image.
pub fn anomaly_maps(
    enc: &FeaturePyramid,
    dec: &FeaturePyramid,
    out_h: usize,
    out_w: usize,
    smoothing_sigma: f32,
    stat: ScoreStat,
) -> Result<Vec<AnomalyResult>> {
    if enc.levels.len() != dec.levels.len() {
        return Err(shape_err(
            "anomaly maps",
            alloc::format!("{} encoder levels, {} decoder levels", enc.levels.len(), dec.levels.len()),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid("anomaly map size", "zero output extent".into()));
    }
    let batch = enc.batch();
    let plane = out_h * out_w;
    let mut fused = vec![0.0f32; batch * plane];
    let mut per_level: Vec<Vec<Tensor>> = (0..batch).map(|_| Vec::new()).collect();
    let mut degenerate = vec![0usize; batch];
    for (e, d) in enc.levels.iter().zip(&dec.levels) {
        if e.shape() != d.shape() {
            return Err(shape_err(
                "anomaly maps",
                alloc::format!("level shapes {:?} vs {:?}", e.shape(), d.shape()),
            ));
        }
        let (dist, level_degenerate) = cosine_distance_map(e, d)?;
        let (b, h, w) = {
            let s = dist.shape();
            (s[0], s[1], s[2])
        };
        for (total, n) in degenerate.iter_mut().zip(&level_degenerate) {
            *total += n;
        }
        let as_nchw = Tensor::new(&[b, 1, h, w], dist.data().to_vec())?;
        let up = ops::bilinear_resize(&as_nchw, out_h, out_w)?;
        for bi in 0..batch {
            for p in 0..plane {
                fused[bi * plane + p] += up.data()[bi * plane + p];
            }
            per_level[bi].push(Tensor::new(
                &[h, w],
                dist.data()[bi * h * w..(bi + 1) * h * w].to_vec(),
            )?);
        }
    }
    let level_count = enc.levels.len() as f32;
    let total_degenerate: usize = degenerate.iter().sum();
    if total_degenerate > 0 {
        log::warn!("{total_degenerate} zero-norm feature positions scored as distance 1");
    }
    let mut results = Vec::with_capacity(batch);
    for (bi, maps) in per_level.into_iter().enumerate() {
        let mut mine: Vec<f32> = fused[bi * plane..(bi + 1) * plane].to_vec();
        for v in &mut mine {
            *v /= level_count;
        }
        let raw = Tensor::new(&[out_h, out_w], mine)?;
        let smoothed = gaussian_smooth(&raw, smoothing_sigma)?;
        let score = image_score(smoothed.data(), stat);
        results.push(AnomalyResult {
            pixel_map: smoothed,
            image_score: score,
            per_level_maps: maps,
            degenerate_positions: degenerate[bi],
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::PyramidRole;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.1..1.0f32)).collect()).unwrap()
    }

    #[test]
    fn loss_zero_for_perfect_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let mut g = Graph::new();
        let d = g.input(&t);
        let loss = multiscale_mse_loss(&mut g, &[d], &[t]).unwrap();
        assert_eq!(g.value(loss).as_scalar().unwrap(), 0.0);
    }

    #[test]
    fn loss_constant_offset_is_levels_times_delta_squared() {
        let delta = 0.25f32;
        let t0 = Tensor::zeros(&[1, 2, 4, 4]);
        let t1 = Tensor::zeros(&[1, 4, 2, 2]);
        let mut g = Graph::new();
        let d0 = g.input(&Tensor::full(&[1, 2, 4, 4], delta));
        let d1 = g.input(&Tensor::full(&[1, 4, 2, 2], delta));
        let loss = multiscale_mse_loss(&mut g, &[d0, d1], &[t0, t1]).unwrap();
        let want = 2.0 * delta * delta;
        assert!((g.value(loss).as_scalar().unwrap() - want).abs() < 1e-7);
    }

    #[test]
    fn loss_rejects_level_count_mismatch() {
        let t = Tensor::zeros(&[1, 1, 2, 2]);
        let mut g = Graph::new();
        let d = g.input(&t);
        assert!(multiscale_mse_loss(&mut g, &[d], &[t.clone(), t]).is_err());
    }

    #[test]
    fn identical_features_give_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l0 = rand_tensor(&mut rng, &[2, 4, 4, 4]);
        let l1 = rand_tensor(&mut rng, &[2, 8, 2, 2]);
        let enc = FeaturePyramid::new(alloc::vec![l0, l1], PyramidRole::Encoder).unwrap();
        let dec = enc.clone_as(PyramidRole::Decoder);
        let res = anomaly_maps(&enc, &dec, 8, 8, 4.0, ScoreStat::Max).unwrap();
        for r in &res {
            assert!(r.pixel_map.data().iter().all(|&v| v.abs() < 1e-6));
            assert!(r.image_score.abs() < 1e-6);
            assert_eq!(r.degenerate_positions, 0);
        }
    }

    #[test]
    fn antiparallel_position_scores_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = rand_tensor(&mut rng, &[1, 3, 2, 2]);
        let mut d = e.clone();
        // flip the vector at position (0, 1)
        for c in 0..3 {
            let idx = c * 4 + 1;
            d.data_mut()[idx] = -e.data()[idx];
        }
        let (map, degenerate) = cosine_distance_map(&e, &d).unwrap();
        assert_eq!(degenerate, alloc::vec![0]);
        let m = map.data();
        assert!((m[1] - 2.0).abs() < 1e-6, "antiparallel distance {}", m[1]);
        for &i in &[0usize, 2, 3] {
            assert!(m[i].abs() < 1e-6, "clean position {i} scored {}", m[i]);
        }
    }

    #[test]
    fn zero_norm_vector_scores_one_and_is_counted() {
        let e = Tensor::new(&[1, 2, 1, 2], alloc::vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let d = Tensor::new(&[1, 2, 1, 2], alloc::vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        // position 1 of e is the zero vector
        let (map, degenerate) = cosine_distance_map(&e, &d).unwrap();
        assert_eq!(degenerate, alloc::vec![1]);
        assert_eq!(map.data()[1], 1.0);
    }

    #[test]
    fn fused_map_matches_two_level_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e0 = rand_tensor(&mut rng, &[1, 3, 4, 4]);
        let e1 = rand_tensor(&mut rng, &[1, 6, 2, 2]);
        let d0 = rand_tensor(&mut rng, &[1, 3, 4, 4]);
        let d1 = rand_tensor(&mut rng, &[1, 6, 2, 2]);
        let enc =
            FeaturePyramid::new(alloc::vec![e0.clone(), e1.clone()], PyramidRole::Encoder).unwrap();
        let dec =
            FeaturePyramid::new(alloc::vec![d0.clone(), d1.clone()], PyramidRole::Decoder).unwrap();
        let res = anomaly_maps(&enc, &dec, 8, 8, 0.0, ScoreStat::Max).unwrap();
        // hand-composed: upsample each level's map, average
        let up = |e: &Tensor, d: &Tensor| {
            let (m, _) = cosine_distance_map(e, d).unwrap();
            let s = m.shape().to_vec();
            let nchw = Tensor::new(&[1, 1, s[1], s[2]], m.data().to_vec()).unwrap();
            ops::bilinear_resize(&nchw, 8, 8).unwrap()
        };
        let a = up(&e0, &d0);
        let b = up(&e1, &d1);
        for i in 0..64 {
            let want = (a.data()[i] + b.data()[i]) / 2.0;
            let got = res[0].pixel_map.data()[i];
            assert!((got - want).abs() < 1e-6, "pixel {i}: {got} vs {want}");
        }
    }

    #[test]
    fn smoothing_matches_direct_2d_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 12;
        let w = 10;
        let map = Tensor::new(&[h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0f32)).collect())
            .unwrap();
        let sigma = 1.5f32;
        let got = gaussian_smooth(&map, sigma).unwrap();
        // direct 2D convolution with the outer-product kernel
        let taps = gaussian_kernel(sigma);
        let r = (taps.len() / 2) as i64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ti, tv) in taps.iter().enumerate() {
                    for (tj, tu) in taps.iter().enumerate() {
                        let sy = reflect(y as i64 + ti as i64 - r, h as i64);
                        let sx = reflect(x as i64 + tj as i64 - r, w as i64);
                        acc += (*tv as f64) * (*tu as f64) * map.data()[sy * w + sx] as f64;
                    }
                }
                let diff = (got.data()[y * w + x] as f64 - acc).abs();
                assert!(diff < 1e-5, "({y}, {x}): {diff}");
            }
        }
    }

    #[test]
    fn interior_spike_smooths_to_center_coefficient_squared() {
        let sigma = 4.0f32;
        let taps = gaussian_kernel(sigma);
        let radius = taps.len() / 2;
        let n = 4 * radius + 1;
        let mut map = Tensor::zeros(&[n, n]);
        let center = 2 * radius;
        map.data_mut()[center * n + center] = 1.0;
        let sm = gaussian_smooth(&map, sigma).unwrap();
        let got = sm.data()[center * n + center];
        let want = taps[radius] * taps[radius];
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(got < 1.0);
        assert!(sm.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn constant_map_is_invariant_under_smoothing() {
        let map = Tensor::full(&[9, 9], 0.4);
        let sm = gaussian_smooth(&map, 4.0).unwrap();
        for &v in sm.data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn image_score_statistics() {
        assert_eq!(image_score(&[0.0, 0.0], ScoreStat::Max), 0.0);
        assert_eq!(image_score(&[0.1, 0.9, 0.3], ScoreStat::Max), 0.9);
        let top2 = image_score(&[4.0, 1.0, 3.0, 0.5], ScoreStat::TopKMean(2));
        assert!((top2 - 3.5).abs() < 1e-7);
        // k larger than the map clamps to the full mean
        let all = image_score(&[2.0, 4.0], ScoreStat::TopKMean(10));
        assert!((all - 3.0).abs() < 1e-7);
    }
}
