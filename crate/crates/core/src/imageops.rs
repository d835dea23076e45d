//! Mask morphology, fast-marching inpainting, luminance adjustment, and
//! depth-aware compositing.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::raster::FrameSet;

/// Binary pixel mask with the same dimensions as the frame it annotates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[self.idx(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Pixels whose segmentation label satisfies `pred`.
    pub fn from_seg(frame: &FrameSet, pred: impl Fn(u8) -> bool) -> Self {
        let mut m = Mask::new(frame.width, frame.height);
        if let Some(seg) = &frame.seg {
            for (i, &s) in seg.iter().enumerate() {
                m.data[i] = s != 0 && pred(s);
            }
        }
        m
    }

    pub fn union(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.width, other.width);
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
        out
    }

    /// Translates the mask by whole pixels; content shifted outside is lost,
    /// vacated pixels are clear.
    pub fn shifted(&self, dx: i32, dy: i32) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let nx = x as i64 + dx as i64;
                let ny = y as i64 + dy as i64;
                if nx >= 0 && ny >= 0 && nx < self.width as i64 && ny < self.height as i64 {
                    out.set(nx as u32, ny as u32, true);
                }
            }
        }
        out
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Iterated binary dilation with the full 3x3 kernel. A single set pixel
/// grows into a (2k+1) square after k iterations (clipped at borders).
pub fn dilate_mask(m: &Mask, iterations: u32) -> Mask {
    let (w, h) = (m.width as usize, m.height as usize);
    let mut cur = m.data.clone();
    let mut tmp = vec![false; cur.len()];
    for _ in 0..iterations {
        // Full 3x3 kernel separates into a horizontal then a vertical pass.
        for y in 0..h {
            let row = y * w;
            for x in 0..w {
                let lo = x.saturating_sub(1);
                let hi = (x + 1).min(w - 1);
                tmp[row + x] = cur[row + lo] || cur[row + x] || cur[row + hi];
            }
        }
        for x in 0..w {
            for y in 0..h {
                let lo = y.saturating_sub(1);
                let hi = (y + 1).min(h - 1);
                cur[y * w + x] = tmp[lo * w + x] || tmp[y * w + x] || tmp[hi * w + x];
            }
        }
    }
    Mask {
        width: m.width,
        height: m.height,
        data: cur,
    }
}

#[derive(Debug, Clone)]
pub struct InpaintResult {
    pub frame: FrameSet,
    /// Set when every pixel was a hole and the defined fallback (mid-gray
    /// 128) was used.
    pub all_hole_fallback: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum FmmFlag {
    Known,
    Band,
    Inside,
}

/// Telea fast-marching inpainting: hole pixels are filled in increasing
/// distance-from-boundary order, each as a normalized weighted average of
/// known pixels within `radius`, with direction, distance, and level-set
/// weights. Non-hole pixels are never modified. Ties in distance resolve in
/// row-major order, so output is deterministic.
pub fn inpaint_fast_marching(frame: &FrameSet, holes: &Mask, radius: u32) -> Result<InpaintResult> {
    if radius < 1 {
        return Err(Error::Config(format!("inpaint radius must be >= 1, got {radius}")));
    }
    if holes.width != frame.width || holes.height != frame.height {
        return Err(Error::DimensionMismatch {
            expected: frame.pixel_count(),
            got: (holes.width * holes.height) as usize,
        });
    }
    let (w, h) = (frame.width as i64, frame.height as i64);
    let n = frame.pixel_count();
    let mut out = frame.clone();

    if holes.data.iter().all(|&b| !b) {
        return Ok(InpaintResult {
            frame: out,
            all_hole_fallback: false,
        });
    }
    if holes.data.iter().all(|&b| b) {
        out.rgb.fill(128);
        return Ok(InpaintResult {
            frame: out,
            all_hole_fallback: true,
        });
    }

    let mut flag = vec![FmmFlag::Known; n];
    let mut t = vec![0.0f64; n];
    for i in 0..n {
        if holes.data[i] {
            flag[i] = FmmFlag::Inside;
            t[i] = f64::MAX;
        }
    }

    let at = |x: i64, y: i64| (y * w + x) as usize;
    let neighbors4 = |x: i64, y: i64| {
        [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
            .into_iter()
            .filter(move |&(nx, ny)| nx >= 0 && ny >= 0 && nx < w && ny < h)
    };

    // Eikonal update |grad T| = 1 from known neighbors.
    let solve_t = |t: &[f64], flag: &[FmmFlag], x: i64, y: i64| -> f64 {
        let axis_min = |a: (i64, i64), b: (i64, i64)| -> f64 {
            let mut m = f64::MAX;
            for (px, py) in [a, b] {
                if px >= 0 && py >= 0 && px < w && py < h {
                    let i = at(px, py);
                    if flag[i] == FmmFlag::Known {
                        m = m.min(t[i]);
                    }
                }
            }
            m
        };
        let a = axis_min((x - 1, y), (x + 1, y));
        let b = axis_min((x, y - 1), (x, y + 1));
        if a == f64::MAX && b == f64::MAX {
            return f64::MAX;
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if hi == f64::MAX || hi - lo >= 1.0 {
            lo + 1.0
        } else {
            let d = 2.0 - (lo - hi) * (lo - hi);
            0.5 * (lo + hi + d.sqrt())
        }
    };

    // Min-heap keyed on (T, row-major index); T >= 0 so the bit pattern
    // orders correctly.
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    for y in 0..h {
        for x in 0..w {
            let i = at(x, y);
            if flag[i] != FmmFlag::Inside {
                continue;
            }
            if neighbors4(x, y).any(|(nx, ny)| flag[at(nx, ny)] == FmmFlag::Known) {
                flag[i] = FmmFlag::Band;
                t[i] = solve_t(&t, &flag, x, y);
                heap.push(Reverse((t[i].to_bits(), i)));
            }
        }
    }

    let grad_t = |t: &[f64], flag: &[FmmFlag], x: i64, y: i64| -> (f64, f64) {
        let val = |px: i64, py: i64| -> Option<f64> {
            if px >= 0 && py >= 0 && px < w && py < h {
                let i = at(px, py);
                if flag[i] != FmmFlag::Inside && t[i] != f64::MAX {
                    return Some(t[i]);
                }
            }
            None
        };
        let here = t[at(x, y)];
        let d = |m: Option<f64>, p: Option<f64>| match (m, p) {
            (Some(a), Some(b)) => (b - a) * 0.5,
            (Some(a), None) => here - a,
            (None, Some(b)) => b - here,
            (None, None) => 0.0,
        };
        (
            d(val(x - 1, y), val(x + 1, y)),
            d(val(x, y - 1), val(x, y + 1)),
        )
    };

    let r = radius as i64;
    while let Some(Reverse((tbits, i))) = heap.pop() {
        if flag[i] == FmmFlag::Known || f64::from_bits(tbits) > t[i] {
            continue; // stale heap entry
        }
        let (x, y) = (i as i64 % w, i as i64 / w);

        // Telea weighted average over known pixels in the neighborhood.
        let (gx, gy) = grad_t(&t, &flag, x, y);
        let gn = (gx * gx + gy * gy).sqrt();
        let (nx_, ny_) = if gn > 1e-12 { (gx / gn, gy / gn) } else { (0.0, 0.0) };
        let mut acc = [0.0f64; 3];
        let mut wsum = 0.0f64;
        for qy in (y - r).max(0)..=(y + r).min(h - 1) {
            for qx in (x - r).max(0)..=(x + r).min(w - 1) {
                let qi = at(qx, qy);
                // Known includes pixels already inpainted by the advancing
                // front, as in the original formulation.
                if flag[qi] != FmmFlag::Known {
                    continue;
                }
                let (dx, dy) = ((x - qx) as f64, (y - qy) as f64);
                let d2 = dx * dx + dy * dy;
                if d2 > (r * r) as f64 || d2 == 0.0 {
                    continue;
                }
                let dist = d2.sqrt();
                let dir = ((dx * nx_ + dy * ny_) / dist).abs().max(1e-6);
                let dst = 1.0 / d2;
                let lev = 1.0 / (1.0 + (t[i] - t[qi]).abs());
                let wgt = dir * dst * lev;
                let ri = qi * 3;
                acc[0] += wgt * out.rgb[ri] as f64;
                acc[1] += wgt * out.rgb[ri + 1] as f64;
                acc[2] += wgt * out.rgb[ri + 2] as f64;
                wsum += wgt;
            }
        }
        let ri = i * 3;
        if wsum > 0.0 {
            for c in 0..3 {
                out.rgb[ri + c] = (acc[c] / wsum).round().clamp(0.0, 255.0) as u8;
            }
        } else {
            out.rgb[ri..ri + 3].copy_from_slice(&[128, 128, 128]);
        }
        flag[i] = FmmFlag::Known;

        for (qx, qy) in neighbors4(x, y) {
            let qi = at(qx, qy);
            if flag[qi] == FmmFlag::Known {
                continue;
            }
            let new_t = solve_t(&t, &flag, qx, qy);
            if new_t < t[qi] {
                t[qi] = new_t;
                flag[qi] = FmmFlag::Band;
                heap.push(Reverse((new_t.to_bits(), qi)));
            } else if flag[qi] == FmmFlag::Inside {
                flag[qi] = FmmFlag::Band;
                heap.push(Reverse((t[qi].to_bits(), qi)));
            }
        }
    }

    Ok(InpaintResult {
        frame: out,
        all_hole_fallback: false,
    })
}

/// Composites `layer` onto `base`. With `use_depth`, a layer pixel wins
/// where its depth is strictly nearer; without, wherever its segmentation
/// label is nonzero (the real-robot mode, which accepts drawing the robot
/// over nearer scene objects).
pub fn composite_overlay(base: &FrameSet, layer: &FrameSet, use_depth: bool) -> Result<FrameSet> {
    if base.width != layer.width || base.height != layer.height {
        return Err(Error::DimensionMismatch {
            expected: base.pixel_count(),
            got: layer.pixel_count(),
        });
    }
    if use_depth && (base.depth.is_none() || layer.depth.is_none()) {
        return Err(Error::MissingDepth);
    }
    if !use_depth && layer.seg.is_none() {
        return Err(Error::Config("no-depth compositing needs a layer segmentation".into()));
    }
    let mut out = base.clone();
    for y in 0..base.height {
        for x in 0..base.width {
            let wins = if use_depth {
                layer.depth_at(x, y) < base.depth_at(x, y)
            } else {
                layer.seg_at(x, y) != 0
            };
            if !wins {
                continue;
            }
            out.set_rgb(x, y, layer.rgb_at(x, y));
            let i = out.idx(x, y);
            if let Some(d) = out.depth.as_mut() {
                d[i] = layer.depth_at(x, y);
            }
            if let Some(s) = out.seg.as_mut() {
                s[i] = layer.seg_at(x, y);
            }
        }
    }
    Ok(out)
}

/// Adds `offset` to every channel of the pixels under `mask`, clamping to
/// [0, 255].
pub fn adjust_luminance(frame: &FrameSet, mask: &Mask, offset: i32) -> FrameSet {
    let mut out = frame.clone();
    if offset == 0 {
        return out;
    }
    for (i, &m) in mask.data.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..3 {
            let v = out.rgb[i * 3 + c] as i32 + offset;
            out.rgb[i * 3 + c] = v.clamp(0, 255) as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_pixel_mask(w: u32, h: u32, x: u32, y: u32) -> Mask {
        let mut m = Mask::new(w, h);
        m.set(x, y, true);
        m
    }

    #[test]
    fn dilate_empty_stays_empty() {
        let m = Mask::new(30, 30);
        assert_eq!(dilate_mask(&m, 20).count(), 0);
    }

    #[test]
    fn dilate_single_pixel_default_iterations() {
        // Arm default: 20 iterations -> 41x41 solid square.
        let m = single_pixel_mask(100, 100, 50, 50);
        let d = dilate_mask(&m, 20);
        assert_eq!(d.count(), 41 * 41);
        for y in 0..100 {
            for x in 0..100 {
                let inside = (30..=70).contains(&x) && (30..=70).contains(&y);
                assert_eq!(d.get(x, y), inside, "at ({x},{y})");
            }
        }
        // Gripper default: 10 iterations -> 21x21.
        let d = dilate_mask(&m, 10);
        assert_eq!(d.count(), 21 * 21);
    }

    #[test]
    fn dilate_clips_at_borders() {
        let m = single_pixel_mask(10, 10, 0, 0);
        let d = dilate_mask(&m, 3);
        assert_eq!(d.count(), 16); // 4x4 corner
    }

    proptest! {
        #[test]
        fn dilation_monotone_and_extensive(
            seed in prop::collection::vec(any::<bool>(), 16 * 16),
            k in 0u32..6,
        ) {
            let m = Mask { width: 16, height: 16, data: seed };
            let dk = dilate_mask(&m, k);
            let dk1 = dilate_mask(&m, k + 1);
            prop_assert!(m.is_subset_of(&dk));
            prop_assert!(dk.is_subset_of(&dk1));
        }

        #[test]
        fn inpaint_never_touches_non_holes(
            seed in prop::collection::vec(any::<bool>(), 12 * 12),
            fill in any::<u8>(),
        ) {
            let holes = Mask { width: 12, height: 12, data: seed };
            let mut frame = FrameSet::new_rgb(12, 12, [fill, 30, 200]);
            // Scribble a gradient so the content is nonuniform.
            for y in 0..12u32 {
                for x in 0..12u32 {
                    frame.set_rgb(x, y, [(x * 20) as u8, (y * 20) as u8, fill]);
                }
            }
            let res = inpaint_fast_marching(&frame, &holes, 3).unwrap();
            for y in 0..12u32 {
                for x in 0..12u32 {
                    if !holes.get(x, y) {
                        prop_assert_eq!(res.frame.rgb_at(x, y), frame.rgb_at(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn inpaint_no_holes_identity() {
        let frame = FrameSet::new_rgb(20, 20, [13, 77, 200]);
        let res = inpaint_fast_marching(&frame, &Mask::new(20, 20), 3).unwrap();
        assert_eq!(res.frame.rgb, frame.rgb);
        assert!(!res.all_hole_fallback);
    }

    #[test]
    fn inpaint_constant_color_within_one() {
        let frame = FrameSet::new_rgb(40, 40, [90, 140, 20]);
        let mut holes = Mask::new(40, 40);
        for y in 15..25 {
            for x in 15..25 {
                holes.set(x, y, true);
            }
        }
        let res = inpaint_fast_marching(&frame, &holes, 3).unwrap();
        for y in 0..40u32 {
            for x in 0..40u32 {
                let c = res.frame.rgb_at(x, y);
                for (got, want) in c.iter().zip([90u8, 140, 20]) {
                    assert!(
                        (*got as i32 - want as i32).abs() <= 1,
                        "({x},{y}): {c:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn inpaint_two_tone_boundary_is_monotone_between_tones() {
        // Left black, right white, hole straddling the boundary.
        let mut frame = FrameSet::new_rgb(84, 84, [0, 0, 0]);
        for y in 0..84u32 {
            for x in 42..84u32 {
                frame.set_rgb(x, y, [255, 255, 255]);
            }
        }
        let mut holes = Mask::new(84, 84);
        for y in 30..54u32 {
            for x in 34..50u32 {
                holes.set(x, y, true);
            }
        }
        let res = inpaint_fast_marching(&frame, &holes, 3).unwrap();
        for y in 30..54u32 {
            let mut prev = -6i32;
            for x in 34..50u32 {
                let v = res.frame.rgb_at(x, y)[0] as i32;
                assert!(v >= prev - 5, "row {y}: non-monotone at x={x}: {prev} -> {v}");
                prev = prev.max(v);
            }
        }
    }

    #[test]
    fn inpaint_all_holes_uses_fallback() {
        let frame = FrameSet::new_rgb(8, 8, [200, 10, 10]);
        let holes = Mask {
            width: 8,
            height: 8,
            data: vec![true; 64],
        };
        let res = inpaint_fast_marching(&frame, &holes, 3).unwrap();
        assert!(res.all_hole_fallback);
        assert!(res.frame.rgb.iter().all(|&b| b == 128));
    }

    #[test]
    fn inpaint_rejects_bad_radius_and_dims() {
        let frame = FrameSet::new_rgb(8, 8, [0, 0, 0]);
        assert!(inpaint_fast_marching(&frame, &Mask::new(8, 8), 0).is_err());
        assert!(inpaint_fast_marching(&frame, &Mask::new(9, 8), 3).is_err());
    }

    fn layered(base_depth: f32, layer_depth: f32) -> (FrameSet, FrameSet) {
        let mut base = FrameSet::new_full(6, 6, [10, 10, 10]);
        base.depth.as_mut().unwrap().fill(base_depth);
        base.seg.as_mut().unwrap().fill(1);
        let mut layer = FrameSet::new_full(6, 6, [0, 0, 0]);
        for y in 0..6u32 {
            for x in 0..3u32 {
                layer.set_rgb(x, y, [200, 0, 0]);
                let i = layer.idx(x, y);
                layer.depth.as_mut().unwrap()[i] = layer_depth;
                layer.seg.as_mut().unwrap()[i] = 9;
            }
        }
        (base, layer)
    }

    #[test]
    fn composite_layer_behind_is_identity_on_rgb() {
        let (base, layer) = layered(1.0, 2.0);
        let out = composite_overlay(&base, &layer, true).unwrap();
        assert_eq!(out.rgb, base.rgb);
    }

    #[test]
    fn composite_layer_in_front_pastes() {
        let (base, layer) = layered(2.0, 1.0);
        let out = composite_overlay(&base, &layer, true).unwrap();
        assert_eq!(out.rgb_at(0, 0), [200, 0, 0]);
        assert_eq!(out.rgb_at(5, 0), [10, 10, 10]);
        assert_eq!(out.seg_at(0, 0), 9);
        assert_eq!(out.depth_at(0, 0), 1.0);
    }

    #[test]
    fn composite_no_depth_draws_robot_on_top() {
        // Scene object nearer than the robot, but real mode ignores depth.
        let (base, layer) = layered(0.5, 1.5);
        let out = composite_overlay(&base, &layer, false).unwrap();
        assert_eq!(out.rgb_at(0, 0), [200, 0, 0]);
        assert_eq!(out.rgb_at(5, 5), [10, 10, 10]);
    }

    #[test]
    fn composite_all_background_layer_is_identity() {
        let base = FrameSet::new_full(6, 6, [50, 60, 70]);
        let layer = FrameSet::new_full(6, 6, [0, 0, 0]);
        let out = composite_overlay(&base, &layer, false).unwrap();
        assert_eq!(out.rgb, base.rgb);
        let out = composite_overlay(&base, &layer, true).unwrap();
        assert_eq!(out.rgb, base.rgb);
    }

    #[test]
    fn composite_errors() {
        let base = FrameSet::new_full(6, 6, [0, 0, 0]);
        let small = FrameSet::new_full(4, 6, [0, 0, 0]);
        assert!(composite_overlay(&base, &small, false).is_err());
        let no_depth = FrameSet::new_rgb(6, 6, [0, 0, 0]);
        assert!(matches!(
            composite_overlay(&base, &no_depth, true),
            Err(Error::MissingDepth)
        ));
    }

    #[test]
    fn luminance_examples() {
        let mut frame = FrameSet::new_rgb(4, 4, [100, 100, 100]);
        frame.set_rgb(0, 0, [250, 250, 250]);
        let mut mask = Mask::new(4, 4);
        mask.set(0, 0, true);
        mask.set(1, 1, true);

        let same = adjust_luminance(&frame, &mask, 0);
        assert_eq!(same.rgb, frame.rgb);

        let up = adjust_luminance(&frame, &mask, 50);
        assert_eq!(up.rgb_at(0, 0), [255, 255, 255]); // clamped
        assert_eq!(up.rgb_at(1, 1), [150, 150, 150]);
        assert_eq!(up.rgb_at(2, 2), [100, 100, 100]); // outside mask

        // +50 then -50 is identity while no channel clamps.
        let mid = FrameSet::new_rgb(4, 4, [60, 128, 205]);
        let mut all = Mask::new(4, 4);
        all.data.fill(true);
        let round = adjust_luminance(&adjust_luminance(&mid, &all, 50), &all, -50);
        assert_eq!(round.rgb, mid.rgb);
    }
}
