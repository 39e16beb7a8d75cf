//! Dataset ingestion, network-size resizing, train/validation splitting,
//! cross-validation folds, and paired geometric augmentation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::BinaryMask;
use crate::resize::resize_bilinear_plane;
use crate::rng::{streams, Rng};
use crate::tensor::{Shape, Tensor};

/// Network input height and width.
pub const NET_SIZE: (usize, usize) = (192, 256);

/// One dataset entry: an RGB image plus, when available, its reference
/// mask at the same size.
#[derive(Clone)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: Option<BinaryMask>,
}

impl Sample {
    pub fn new(id: String, image: RgbImage, mask: Option<BinaryMask>) -> Result<Sample> {
        if let Some(m) = &mask {
            let (w, h) = image.dimensions();
            if (m.height(), m.width()) != (h as usize, w as usize) {
                return Err(Error::Ingestion(format!(
                    "sample {id}: mask is {}x{} but image is {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
        }
        Ok(Sample { id, image, mask })
    }

    /// (height, width) of the source image.
    pub fn original_size(&self) -> (usize, usize) {
        let (w, h) = self.image.dimensions();
        (h as usize, w as usize)
    }
}

fn decode_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion(format!("cannot decode {}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

fn decode_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion(format!("cannot decode {}: {e}", path.display())))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data: Vec<u8> = gray.pixels().map(|p| (p.0[0] >= 128) as u8).collect();
    BinaryMask::new(h as usize, w as usize, data)
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];
const MASK_SUFFIX: &str = "_segmentation";

/// Load every sample in `dir`, sorted by id.
///
/// With a `manifest.csv` present (lines `image_path,mask_path,id`, paths
/// relative to the directory, mask path optionally empty), the manifest
/// drives the pairing. Otherwise images are `<id>.<jpg|jpeg|png>` and masks
/// `<id>_segmentation.png`; a mask without its image is an error.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = dir.join("manifest.csv");
    if manifest.is_file() {
        return load_from_manifest(dir, &manifest);
    }
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut masks: BTreeMap<String, PathBuf> = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Ingestion(format!("cannot read dataset directory {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        if let Some(id) = stem.strip_suffix(MASK_SUFFIX) {
            masks.insert(id.to_string(), path);
        } else {
            images.insert(stem.to_string(), path);
        }
    }
    for id in masks.keys() {
        if !images.contains_key(id) {
            return Err(Error::Ingestion(format!(
                "mask {id}{MASK_SUFFIX} has no matching image in {}",
                dir.display()
            )));
        }
    }
    let mut samples = Vec::with_capacity(images.len());
    for (id, img_path) in images {
        let image = decode_image(&img_path)?;
        let mask = match masks.get(&id) {
            Some(p) => Some(decode_mask(p)?),
            None => None,
        };
        samples.push(Sample::new(id, image, mask)?);
    }
    Ok(samples)
}

fn load_from_manifest(dir: &Path, manifest: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(manifest)?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line == "image_path,mask_path,id") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Ingestion(format!(
                "{}: line {} has {} fields, expected image_path,mask_path,id",
                manifest.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let image = decode_image(&dir.join(fields[0]))?;
        let mask = if fields[1].is_empty() {
            None
        } else {
            Some(decode_mask(&dir.join(fields[1]))?)
        };
        samples.push(Sample::new(fields[2].to_string(), image, mask)?);
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

/// A sample resized for the network: image as a (1,3,h,w) tensor in [0,1],
/// mask at network size, original size retained for later resampling.
pub struct NetSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Option<BinaryMask>,
    pub original_size: (usize, usize),
}

/// Resize a sample to `size` = (h, w): image bilinearly then scaled by
/// 1/255, mask by nearest neighbor (stays binary).
pub fn resize_for_net(s: &Sample, size: (usize, usize)) -> Result<NetSample> {
    let (dh, dw) = size;
    let (sh, sw) = s.original_size();
    let raw = s.image.as_raw();
    let mut chw = vec![0.0f32; dh * dw * 3];
    let mut plane = vec![0.0f32; sh * sw];
    for ch in 0..3 {
        for (i, v) in plane.iter_mut().enumerate() {
            *v = raw[i * 3 + ch] as f32 / 255.0;
        }
        let resized = resize_bilinear_plane(&plane, sh, sw, dh, dw);
        chw[ch * dh * dw..(ch + 1) * dh * dw].copy_from_slice(&resized);
    }
    let image = Tensor::from_vec(Shape::new(1, 3, dh, dw), chw)?;
    let mask = match &s.mask {
        Some(m) => Some(crate::postprocess::resample_to_original(m, (dh, dw))?),
        None => None,
    };
    Ok(NetSample {
        id: s.id.clone(),
        image,
        mask,
        original_size: (sh, sw),
    })
}

/// Disjoint, exhaustive train/validation id assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

fn shuffled_ids(ids: &[String], rng: &mut Rng) -> Vec<String> {
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    rng.shuffle(&mut sorted);
    sorted
}

/// Seeded 80/20 split: validation gets ⌊N/5⌋ ids, training the rest.
pub fn split_80_20(ids: &[String], seed: u64) -> Result<SplitPlan> {
    if ids.len() < 2 {
        return Err(Error::Contract(format!(
            "split_80_20 requires at least 2 ids, got {}",
            ids.len()
        )));
    }
    let mut rng = Rng::for_stream(seed, streams::SPLIT);
    let shuffled = shuffled_ids(ids, &mut rng);
    let val_n = shuffled.len() / 5;
    Ok(SplitPlan {
        validation: shuffled[..val_n].to_vec(),
        train: shuffled[val_n..].to_vec(),
    })
}

/// Seeded k-fold assignment: fold i is the validation set of plan i, the
/// remaining ids form its training set. The first N mod k folds take the
/// extra id.
pub fn kfold(ids: &[String], k: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if k < 1 {
        return Err(Error::Contract("kfold requires k >= 1".into()));
    }
    if ids.len() < k {
        return Err(Error::Contract(format!(
            "kfold requires at least k={k} ids, got {}",
            ids.len()
        )));
    }
    let mut rng = Rng::for_stream(seed, streams::FOLD);
    let shuffled = shuffled_ids(ids, &mut rng);
    let n = shuffled.len();
    let (base, extra) = (n / k, n % k);
    let mut plans = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        let validation = shuffled[start..start + size].to_vec();
        let mut train = Vec::with_capacity(n - size);
        train.extend_from_slice(&shuffled[..start]);
        train.extend_from_slice(&shuffled[start + size..]);
        plans.push(SplitPlan { train, validation });
        start += size;
    }
    Ok(plans)
}

/// Augmentation ranges. Angles are degrees; zoom > 1 enlarges content.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_p: f32,
    pub vflip_p: f32,
    pub rotation_deg: f32,
    pub zoom_lo: f32,
    pub zoom_hi: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotation_deg: 20.0,
            zoom_lo: 0.8,
            zoom_hi: 1.25,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_p) || !(0.0..=1.0).contains(&self.vflip_p) {
            return Err(Error::Config("flip probabilities must lie in [0,1]".into()));
        }
        if self.zoom_lo <= 0.0 || self.zoom_hi <= 0.0 || self.zoom_lo > self.zoom_hi {
            return Err(Error::Config("zoom bounds must be positive with lo <= hi".into()));
        }
        if self.rotation_deg < 0.0 {
            return Err(Error::Config("rotation range must be non-negative".into()));
        }
        Ok(())
    }
}

/// One concrete draw from an [`AugmentConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f32,
    pub zoom: f32,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        hflip: false,
        vflip: false,
        rotation_deg: 0.0,
        zoom: 1.0,
    };

    /// Draw parameters, always consuming exactly four values so the stream
    /// position is independent of the outcome.
    pub fn draw(cfg: &AugmentConfig, rng: &mut Rng) -> AugmentParams {
        let hflip = rng.u01() < cfg.hflip_p;
        let vflip = rng.u01() < cfg.vflip_p;
        let rotation_deg = rng.range_f32(-cfg.rotation_deg, cfg.rotation_deg);
        let zoom = rng.range_f32(cfg.zoom_lo, cfg.zoom_hi);
        AugmentParams {
            hflip,
            vflip,
            rotation_deg,
            zoom,
        }
    }
}

/// Apply the same flip/rotate/zoom transform to an image tensor (1,3,h,w)
/// and its mask. The image is sampled bilinearly with zero fill outside the
/// frame; the mask nearest-neighbor with background fill.
pub fn augment_with(image: &Tensor, mask: &BinaryMask, params: &AugmentParams) -> Result<(Tensor, BinaryMask)> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Contract(format!(
            "augment expects a (1,3,h,w) image tensor, got {s}"
        )));
    }
    if (mask.height(), mask.width()) != (s.h, s.w) {
        return Err(Error::Shape(format!(
            "augment: mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            s.h,
            s.w
        )));
    }
    let (h, w) = (s.h, s.w);
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let theta = params.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let inv_zoom = 1.0 / params.zoom;
    // Inverse mapping. dst -> src: unflip, rotate back, then unscale.
    let src_coords = |yd: usize, xd: usize| -> (f32, f32) {
        let mut u = xd as f32 - cx;
        let mut v = yd as f32 - cy;
        if params.hflip {
            u = -u;
        }
        if params.vflip {
            v = -v;
        }
        let us = (u * cos + v * sin) * inv_zoom;
        let vs = (-u * sin + v * cos) * inv_zoom;
        (vs + cy, us + cx)
    };

    let xd = image.data();
    let mut out = vec![0.0f32; 3 * h * w];
    let mut mask_out = vec![0u8; h * w];
    for yd in 0..h {
        for xdst in 0..w {
            let (sy, sx) = src_coords(yd, xdst);
            // Bilinear taps contribute only where they land inside.
            let y0 = sy.floor();
            let x0 = sx.floor();
            let (fy, fx) = (sy - y0, sx - x0);
            let taps = [
                (y0 as i64, x0 as i64, (1.0 - fy) * (1.0 - fx)),
                (y0 as i64, x0 as i64 + 1, (1.0 - fy) * fx),
                (y0 as i64 + 1, x0 as i64, fy * (1.0 - fx)),
                (y0 as i64 + 1, x0 as i64 + 1, fy * fx),
            ];
            for ch in 0..3 {
                let mut acc = 0.0f32;
                for &(ty, tx, tw) in &taps {
                    if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                        acc += tw * xd[(ch * h + ty as usize) * w + tx as usize];
                    }
                }
                out[(ch * h + yd) * w + xdst] = acc;
            }
            let (ry, rx) = (sy.round() as i64, sx.round() as i64);
            if ry >= 0 && rx >= 0 && (ry as usize) < h && (rx as usize) < w {
                mask_out[yd * w + xdst] = mask.data()[ry as usize * w + rx as usize];
            }
        }
    }
    drop(xd);
    Ok((
        Tensor::from_vec(s, out)?,
        BinaryMask::new(h, w, mask_out)?,
    ))
}

/// Draw parameters from `cfg` and apply them.
pub fn augment(
    image: &Tensor,
    mask: &BinaryMask,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(Tensor, BinaryMask)> {
    let params = AugmentParams::draw(cfg, rng);
    augment_with(image, mask, &params)
}
