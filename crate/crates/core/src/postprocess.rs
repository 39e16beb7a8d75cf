//! Mask refinement: probability thresholding, largest-component selection,
//! hole filling, and nearest-neighbor resampling back to the source size.
//!
//! Foreground uses 8-connectivity, holes (background) 4-connectivity, the
//! standard dual pairing.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::{Error, Result};
use crate::resize::nearest_index;
use crate::tensor::Tensor;

/// A single-image {0,1} mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<BinaryMask> {
        if h < 1 || w < 1 {
            return Err(Error::Contract(format!("mask dims must be >= 1, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> BinaryMask {
        BinaryMask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Mask as a (1,1,h,w) float tensor with values {0.0, 1.0}.
    pub fn to_tensor(&self) -> Tensor {
        let vals: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        Tensor::from_vec(crate::tensor::Shape::new(1, 1, self.h, self.w), vals)
            .expect("mask dims validated at construction")
    }
}

/// Binarize a single-image probability map at 0.5 (boundary counts as
/// foreground). Input shape must be (1, 1, h, w).
pub fn threshold(p: &Tensor) -> Result<BinaryMask> {
    let s = p.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::Contract(format!(
            "threshold expects a single-image single-channel map, got {s}"
        )));
    }
    let data: Vec<u8> = p.data().iter().map(|&v| (v >= 0.5) as u8).collect();
    Ok(BinaryMask {
        h: s.h,
        w: s.w,
        data,
    })
}

/// Keep only the largest 8-connected foreground component. Ties go to the
/// component with the smallest row-major pixel index; an empty mask stays
/// empty.
pub fn largest_component(m: &BinaryMask) -> BinaryMask {
    let (h, w) = (m.h, m.w);
    let mut visited = vec![false; h * w];
    let mut best: Option<(usize, usize, Vec<usize>)> = None; // (size, seed, pixels)
    let mut queue = VecDeque::new();
    for seed in 0..h * w {
        if m.data[seed] == 0 || visited[seed] {
            continue;
        }
        // Row-major scan: the seed is this component's minimal index.
        let mut pixels = Vec::new();
        visited[seed] = true;
        queue.push_back(seed);
        while let Some(idx) = queue.pop_front() {
            pixels.push(idx);
            let (y, x) = (idx / w, idx % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if m.data[nidx] == 1 && !visited[nidx] {
                        visited[nidx] = true;
                        queue.push_back(nidx);
                    }
                }
            }
        }
        let better = match &best {
            None => true,
            Some((size, min_seed, _)) => {
                pixels.len() > *size || (pixels.len() == *size && seed < *min_seed)
            }
        };
        if better {
            best = Some((pixels.len(), seed, pixels));
        }
    }
    let mut out = BinaryMask::zeros(h, w);
    if let Some((_, _, pixels)) = best {
        for idx in pixels {
            out.data[idx] = 1;
        }
    }
    out
}

/// Turn background pixels with no 4-connected path to the image border into
/// foreground. Border-connected background is left alone, so bays that open
/// to the border are preserved.
pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
    let (h, w) = (m.h, m.w);
    let mut reach = vec![false; h * w];
    let mut queue = VecDeque::new();
    let push = |idx: usize, reach: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        if m.data[idx] == 0 && !reach[idx] {
            reach[idx] = true;
            queue.push_back(idx);
        }
    };
    for x in 0..w {
        push(x, &mut reach, &mut queue);
        push((h - 1) * w + x, &mut reach, &mut queue);
    }
    for y in 0..h {
        push(y * w, &mut reach, &mut queue);
        push(y * w + w - 1, &mut reach, &mut queue);
    }
    while let Some(idx) = queue.pop_front() {
        let (y, x) = (idx / w, idx % w);
        for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            push(ny as usize * w + nx as usize, &mut reach, &mut queue);
        }
    }
    let data: Vec<u8> = m
        .data
        .iter()
        .zip(&reach)
        .map(|(&v, &r)| if v == 1 || !r { 1 } else { 0 })
        .collect();
    BinaryMask { h, w, data }
}

/// Nearest-neighbor resize to (h, w).
pub fn resample_to_original(m: &BinaryMask, size: (usize, usize)) -> Result<BinaryMask> {
    let (oh, ow) = size;
    if oh < 1 || ow < 1 {
        return Err(Error::Contract(format!("target size must be >= 1x1, got {oh}x{ow}")));
    }
    if (oh, ow) == (m.h, m.w) {
        return Ok(m.clone());
    }
    let mut data = vec![0u8; oh * ow];
    for y in 0..oh {
        let sy = nearest_index(y, m.h, oh);
        for x in 0..ow {
            let sx = nearest_index(x, m.w, ow);
            data[y * ow + x] = m.data[sy * m.w + sx];
        }
    }
    Ok(BinaryMask { h: oh, w: ow, data })
}

/// Full refinement chain: threshold at 0.5, keep the largest component,
/// fill its holes, then resample to the original image size.
pub fn postprocess_pipeline(p: &Tensor, original_size: (usize, usize)) -> Result<BinaryMask> {
    let t = threshold(p)?;
    let lc = largest_component(&t);
    let filled = fill_holes(&lc);
    resample_to_original(&filled, original_size)
}

/// Write a mask as an 8-bit grayscale PNG with values {0, 255}.
pub fn write_mask_png(m: &BinaryMask, path: &Path) -> Result<()> {
    let buf: Vec<u8> = m.data.iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(m.w as u32, m.h as u32, buf)
        .expect("buffer length matches mask dims");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("writing {}: {e}", path.display()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Shape;

    fn mask(h: usize, w: usize, rows: &[&str]) -> BinaryMask {
        let data: Vec<u8> = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| (b == b'#') as u8))
            .collect();
        BinaryMask::new(h, w, data).unwrap()
    }

    fn random_mask(rng: &mut Rng, h: usize, w: usize, p_fg: f32) -> BinaryMask {
        let data: Vec<u8> = (0..h * w).map(|_| (rng.u01() < p_fg) as u8).collect();
        BinaryMask::new(h, w, data).unwrap()
    }

    /// Union-find component labeling: an oracle independent of the BFS path.
    fn largest_component_ref(m: &BinaryMask) -> BinaryMask {
        let (h, w) = (m.height(), m.width());
        let mut parent: Vec<usize> = (0..h * w).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        fn union(parent: &mut Vec<usize>, a: usize, b: usize) {
            let (ra, rb) = (find(parent, a), find(parent, b));
            // Keep the smaller index as root so roots are canonical minima.
            if ra < rb {
                parent[rb] = ra;
            } else {
                parent[ra] = rb;
            }
        }
        for y in 0..h {
            for x in 0..w {
                if m.data()[y * w + x] == 0 {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if (dy == 0 && dx == 0) || ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64
                        {
                            continue;
                        }
                        let nidx = ny as usize * w + nx as usize;
                        if m.data()[nidx] == 1 {
                            union(&mut parent, y * w + x, nidx);
                        }
                    }
                }
            }
        }
        let mut sizes = std::collections::HashMap::new();
        for i in 0..h * w {
            if m.data()[i] == 1 {
                *sizes.entry(find(&mut parent, i)).or_insert(0usize) += 1;
            }
        }
        // Ties resolved toward the smallest root, which is the component's
        // minimal row-major index by the union rule above.
        let best = sizes
            .iter()
            .max_by(|(ra, sa), (rb, sb)| sa.cmp(sb).then(rb.cmp(ra)))
            .map(|(&r, _)| r);
        let mut data = vec![0u8; h * w];
        if let Some(root) = best {
            for i in 0..h * w {
                if m.data()[i] == 1 && find(&mut parent, i) == root {
                    data[i] = 1;
                }
            }
        }
        BinaryMask::new(h, w, data).unwrap()
    }

    /// Hole filling by labeling every 4-connected background component and
    /// keeping only those that touch the border.
    fn fill_holes_ref(m: &BinaryMask) -> BinaryMask {
        let (h, w) = (m.height(), m.width());
        let mut label = vec![usize::MAX; h * w];
        let mut touches_border = Vec::new();
        let mut next = 0;
        for seed in 0..h * w {
            if m.data()[seed] == 1 || label[seed] != usize::MAX {
                continue;
            }
            let id = next;
            next += 1;
            touches_border.push(false);
            let mut stack = vec![seed];
            label[seed] = id;
            while let Some(idx) = stack.pop() {
                let (y, x) = (idx / w, idx % w);
                if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                    touches_border[id] = true;
                }
                for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if m.data()[nidx] == 0 && label[nidx] == usize::MAX {
                        label[nidx] = id;
                        stack.push(nidx);
                    }
                }
            }
        }
        let data: Vec<u8> = (0..h * w)
            .map(|i| {
                if m.data()[i] == 1 || !touches_border[label[i]] {
                    1
                } else {
                    0
                }
            })
            .collect();
        BinaryMask::new(h, w, data).unwrap()
    }

    #[test]
    fn mask_construction_validates() {
        assert!(BinaryMask::new(0, 3, vec![]).is_err());
        assert!(BinaryMask::new(1, 3, vec![0, 1]).is_err());
        assert!(BinaryMask::new(1, 3, vec![0, 1, 2]).is_err());
        assert!(BinaryMask::new(1, 3, vec![0, 1, 1]).is_ok());
    }

    #[test]
    fn threshold_boundary_and_values() {
        let p = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.4, 0.5, 0.2, 0.7]).unwrap();
        let m = threshold(&p).unwrap();
        assert_eq!(m.data(), &[0, 1, 0, 1]);
        let low = Tensor::full(Shape::new(1, 1, 2, 2), 0.4);
        assert_eq!(threshold(&low).unwrap().count_foreground(), 0);
    }

    #[test]
    fn threshold_rejects_batched_input() {
        let p = Tensor::zeros(Shape::new(2, 1, 2, 2));
        assert!(matches!(threshold(&p), Err(Error::Contract(_))));
    }

    #[test]
    fn largest_component_keeps_bigger_blob() {
        let m = mask(
            5,
            7,
            &["##.....", "##.....", ".......", ".....##", "#....##"],
        );
        let out = largest_component(&m);
        let want = mask(
            5,
            7,
            &["##.....", "##.....", ".......", ".......", "......."],
        );
        assert_eq!(out, want);
    }

    #[test]
    fn largest_component_single_blob_unchanged_and_empty_stays_empty() {
        let m = mask(3, 3, &[".#.", "###", ".#."]);
        assert_eq!(largest_component(&m), m);
        let e = BinaryMask::zeros(4, 4);
        assert_eq!(largest_component(&e), e);
    }

    #[test]
    fn largest_component_tie_takes_smallest_index() {
        let m = mask(3, 5, &["#...#", ".....", "....."]);
        let out = largest_component(&m);
        assert_eq!(out, mask(3, 5, &["#....", ".....", "....."]));
    }

    #[test]
    fn largest_component_diagonal_counts_as_connected() {
        let m = mask(3, 3, &["#..", ".#.", "..#"]);
        assert_eq!(largest_component(&m), m);
    }

    #[test]
    fn fill_holes_donut_and_solid() {
        let donut = mask(5, 5, &["#####", "#...#", "#.#.#", "#...#", "#####"]);
        let solid = mask(5, 5, &["#####", "#####", "#####", "#####", "#####"]);
        assert_eq!(fill_holes(&donut), solid);
        assert_eq!(fill_holes(&solid), solid);
    }

    #[test]
    fn fill_holes_keeps_border_open_bay() {
        let bay = mask(4, 4, &["##.#", "#..#", "#..#", "####"]);
        assert_eq!(fill_holes(&bay), bay);
    }

    #[test]
    fn components_match_union_find_oracle_on_random_masks() {
        let mut rng = Rng::seed(51);
        for round in 0..200 {
            let m = random_mask(&mut rng, 16, 16, 0.35);
            assert_eq!(largest_component(&m), largest_component_ref(&m), "round {round}");
        }
    }

    #[test]
    fn holes_match_border_labeling_oracle_on_random_masks() {
        let mut rng = Rng::seed(52);
        for round in 0..200 {
            let m = random_mask(&mut rng, 16, 16, 0.45);
            assert_eq!(fill_holes(&m), fill_holes_ref(&m), "round {round}");
        }
    }

    #[test]
    fn refinement_steps_are_idempotent_and_monotone() {
        let mut rng = Rng::seed(53);
        for _ in 0..50 {
            let m = random_mask(&mut rng, 16, 16, 0.4);
            let lc = largest_component(&m);
            assert_eq!(largest_component(&lc), lc);
            let fh = fill_holes(&m);
            assert_eq!(fill_holes(&fh), fh);
            // largest_component never adds pixels; fill_holes never removes.
            for i in 0..256 {
                assert!(lc.data()[i] <= m.data()[i]);
                assert!(fh.data()[i] >= m.data()[i]);
            }
        }
    }

    #[test]
    fn resample_identity_upscale_and_constant() {
        let m = mask(2, 2, &["#.", ".."]);
        assert_eq!(resample_to_original(&m, (2, 2)).unwrap(), m);
        let up = resample_to_original(&m, (4, 4)).unwrap();
        assert_eq!(up, mask(4, 4, &["##..", "##..", "....", "...."]));
        let c = mask(3, 3, &["###", "###", "###"]);
        let rc = resample_to_original(&c, (7, 5)).unwrap();
        assert_eq!(rc.count_foreground(), 35);
    }

    #[test]
    fn pipeline_composes_all_stages() {
        // Larger blob carries a hole; a smaller distant blob must vanish.
        let mut vals = vec![0.1f32; 8 * 8];
        for y in 1..5 {
            for x in 1..5 {
                vals[y * 8 + x] = 0.9;
            }
        }
        vals[2 * 8 + 2] = 0.1; // hole
        vals[6 * 8 + 6] = 0.9; // lone pixel
        let p = Tensor::from_vec(Shape::new(1, 1, 8, 8), vals).unwrap();
        let out = postprocess_pipeline(&p, (8, 8)).unwrap();
        let mut want = BinaryMask::zeros(8, 8);
        let mut data = vec![0u8; 64];
        for y in 1..5 {
            for x in 1..5 {
                data[y * 8 + x] = 1;
            }
        }
        want.data = data;
        assert_eq!(out, want);
    }

    #[test]
    fn pipeline_uniform_maps() {
        let hi = Tensor::full(Shape::new(1, 1, 4, 4), 0.6);
        let out = postprocess_pipeline(&hi, (6, 6)).unwrap();
        assert_eq!(out.count_foreground(), 36);
        let lo = Tensor::full(Shape::new(1, 1, 4, 4), 0.4);
        let out = postprocess_pipeline(&lo, (6, 6)).unwrap();
        assert_eq!(out.count_foreground(), 0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = mask(3, 4, &["#..#", ".##.", "#..#"]);
        write_mask_png(&m, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (4, 3));
        let back: Vec<u8> = img.pixels().map(|p| (p.0[0] >= 128) as u8).collect();
        assert_eq!(back, m.data());
    }
}
