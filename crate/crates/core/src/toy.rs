//! Synthetic desk-scale dataset: noisy light-skin-toned backgrounds with a
//! single darker filled ellipse per image; the mask is the exact ellipse.
//! Frame sizes cycle through a few aspect ratios so original-size
//! resampling is exercised end to end.

use std::path::Path;

use image::RgbImage;

use crate::data::Sample;
use crate::error::Result;
use crate::postprocess::{write_mask_png, BinaryMask};
use crate::rng::{streams, Rng};

/// Frame sizes (height, width) cycled per sample index.
const FRAME_SIZES: [(u32, u32); 3] = [(96, 128), (120, 160), (144, 192)];
const BACKGROUND: [f32; 3] = [205.0, 175.0, 160.0];
const LESION: [f32; 3] = [95.0, 70.0, 65.0];
/// Target ellipse area as a fraction of the frame.
const AREA_LO: f32 = 0.08;
const AREA_HI: f32 = 0.20;

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Generate `n` samples in memory, deterministically from the seed.
pub fn generate_toy(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = Rng::for_stream(seed, streams::TOY);
    (0..n)
        .map(|i| {
            let (h, w) = FRAME_SIZES[i % FRAME_SIZES.len()];
            make_sample(format!("toy_{i:03}"), h, w, &mut rng)
        })
        .collect()
}

fn make_sample(id: String, h: u32, w: u32, rng: &mut Rng) -> Sample {
    let (hf, wf) = (h as f32, w as f32);
    // Ellipse geometry: area fraction and aspect ratio fix the semi-axes;
    // the rotated extents keep the whole ellipse inside the frame.
    let frac = rng.range_f32(AREA_LO, AREA_HI);
    let aspect = rng.range_f32(0.5, 0.9);
    let a = (frac * hf * wf / (std::f32::consts::PI * aspect)).sqrt();
    let b = aspect * a;
    let theta = rng.range_f32(0.0, std::f32::consts::PI);
    let (sin_t, cos_t) = theta.sin_cos();
    let ext_x = ((a * cos_t).powi(2) + (b * sin_t).powi(2)).sqrt();
    let ext_y = ((a * sin_t).powi(2) + (b * cos_t).powi(2)).sqrt();
    let cx = rng.range_f32(ext_x + 2.0, wf - 1.0 - ext_x - 2.0);
    let cy = rng.range_f32(ext_y + 2.0, hf - 1.0 - ext_y - 2.0);

    let inside = |x: f32, y: f32| {
        let (dx, dy) = (x - cx, y - cy);
        let u = (dx * cos_t + dy * sin_t) / a;
        let v = (-dx * sin_t + dy * cos_t) / b;
        u * u + v * v <= 1.0
    };

    let mut img = RgbImage::new(w, h);
    let mut mask_data = vec![0u8; (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let fg = inside(x as f32, y as f32);
            let (base, noise_amp) = if fg { (LESION, 10.0) } else { (BACKGROUND, 18.0) };
            let px = [
                clamp_u8(base[0] + rng.range_f32(-noise_amp, noise_amp)),
                clamp_u8(base[1] + rng.range_f32(-noise_amp, noise_amp)),
                clamp_u8(base[2] + rng.range_f32(-noise_amp, noise_amp)),
            ];
            img.put_pixel(x, y, image::Rgb(px));
            mask_data[(y * w + x) as usize] = fg as u8;
        }
    }
    let mask = BinaryMask::new(h as usize, w as usize, mask_data).expect("generated mask is valid");
    Sample::new(id, img, Some(mask)).expect("generated sample is consistent")
}

/// Write `n` generated pairs into `dir` as `toy_XXX.png` images with
/// `toy_XXX_segmentation.png` masks ({0,255} gray PNGs). Returns the ids.
pub fn write_toy_dataset(dir: &Path, n: usize, seed: u64) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let samples = generate_toy(n, seed);
    let mut ids = Vec::with_capacity(n);
    for s in &samples {
        let img_path = dir.join(format!("{}.png", s.id));
        s.image
            .save(&img_path)
            .map_err(|e| crate::error::Error::Ingestion(format!("writing {}: {e}", img_path.display())))?;
        let mask = s.mask.as_ref().expect("toy samples always carry masks");
        write_mask_png(mask, &dir.join(format!("{}_segmentation.png", s.id)))?;
        ids.push(s.id.clone());
    }
    Ok(ids)
}
