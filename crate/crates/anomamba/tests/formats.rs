//! Codec checks against a reference implementation: files we write must
//! decode identically elsewhere, and files written elsewhere (with real
//! deflate compression and heavier filters) must decode identically here.

use anomamba::imagefmt::{self, Image, Pixels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen()).collect()
}

/// Half smooth gradient, half noise: compresses well enough for dynamic
/// huffman blocks while still exercising literal-heavy regions.
fn mixed_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n)
        .map(|i| if i % 2 == 0 { (i / 7 % 256) as u8 } else { rng.gen() })
        .collect()
}

#[test]
fn our_png_decodes_in_reference_decoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tmp = tempfile::tempdir().unwrap();
    for (w, h, gray) in [(31usize, 17usize, true), (64, 64, false), (1, 1, true), (5, 200, false)]
    {
        let img = if gray {
            Image { width: w, height: h, pixels: Pixels::Gray(noise_bytes(&mut rng, w * h)) }
        } else {
            Image { width: w, height: h, pixels: Pixels::Rgb(noise_bytes(&mut rng, w * h * 3)) }
        };
        let path = tmp.path().join(format!("{w}x{h}.png"));
        imagefmt::save_png(&path, &img).unwrap();
        let reference = image::open(&path).unwrap();
        match &img.pixels {
            Pixels::Gray(d) => assert_eq!(reference.to_luma8().into_raw(), *d),
            Pixels::Rgb(d) => assert_eq!(reference.to_rgb8().into_raw(), *d),
        }
    }
}

#[test]
fn reference_png_decodes_here_all_color_types() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tmp = tempfile::tempdir().unwrap();
    let (w, h) = (43u32, 29u32);
    let n = (w * h) as usize;

    let gray = image::GrayImage::from_raw(w, h, mixed_bytes(&mut rng, n)).unwrap();
    let p = tmp.path().join("gray.png");
    gray.save(&p).unwrap();
    let ours = imagefmt::load_image(&p).unwrap();
    assert_eq!((ours.width, ours.height), (w as usize, h as usize));
    assert_eq!(ours.to_gray(), gray.into_raw());

    let rgb = image::RgbImage::from_raw(w, h, mixed_bytes(&mut rng, n * 3)).unwrap();
    let p = tmp.path().join("rgb.png");
    rgb.save(&p).unwrap();
    let ours = imagefmt::load_image(&p).unwrap();
    assert_eq!(ours.to_rgb(), rgb.into_raw());

    // alpha variants decode with alpha dropped
    let ga = image::GrayAlphaImage::from_raw(w, h, mixed_bytes(&mut rng, n * 2)).unwrap();
    let p = tmp.path().join("gray_alpha.png");
    ga.save(&p).unwrap();
    let ours = imagefmt::load_image(&p).unwrap();
    let expect: Vec<u8> = ga.into_raw().chunks_exact(2).map(|c| c[0]).collect();
    assert_eq!(ours.to_gray(), expect);

    let rgba = image::RgbaImage::from_raw(w, h, mixed_bytes(&mut rng, n * 4)).unwrap();
    let p = tmp.path().join("rgba.png");
    rgba.save(&p).unwrap();
    let ours = imagefmt::load_image(&p).unwrap();
    let expect: Vec<u8> =
        rgba.into_raw().chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect();
    assert_eq!(ours.to_rgb(), expect);
}

#[test]
fn reference_png_decodes_here_large_smooth_image() {
    // smooth gradients make the reference encoder pick non-trivial
    // filters and long match distances
    let (w, h) = (200u32, 150u32);
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) / 2 % 256) as u8])
    });
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("smooth.png");
    img.save(&p).unwrap();
    let ours = imagefmt::load_image(&p).unwrap();
    assert_eq!((ours.width, ours.height), (200, 150));
    assert_eq!(ours.to_rgb(), img.into_raw());
}

#[test]
fn pnm_interchange_with_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tmp = tempfile::tempdir().unwrap();
    let (w, h) = (19usize, 23usize);

    // ours -> reference
    let data = noise_bytes(&mut rng, w * h);
    let p = tmp.path().join("ours.pgm");
    imagefmt::save_pgm(&p, w, h, &data).unwrap();
    let reference = image::open(&p).unwrap().to_luma8();
    assert_eq!(reference.into_raw(), data);

    // reference -> ours
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, noise_bytes(&mut rng, w * h * 3))
        .unwrap();
    let p = tmp.path().join("ref.ppm");
    rgb.save_with_format(&p, image::ImageFormat::Pnm).unwrap();
    let ours = imagefmt::load_image(&p).unwrap();
    assert_eq!(ours.to_rgb(), rgb.into_raw());
}
