//! Depth-based reprojection of a frame from one camera pose into another,
//! with disocclusion hole marking.
//!
//! Forward splatting with a one-pixel footprint and destination z-buffering
//! (nearest wins), followed by a single 3x3 closing pass that fills one-pixel
//! splat gaps from their nearest-depth neighbor. Remaining unfilled pixels
//! come back as the hole mask for the inpainting stage. Pixels with the
//! infinite-depth sentinel warp to nothing.

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::imageops::{dilate_mask, Mask};
use crate::raster::FrameSet;

#[derive(Debug, Clone)]
pub struct ReprojectResult {
    pub frame: FrameSet,
    /// Destination pixels no source pixel reached (after closing).
    pub holes: Mask,
    /// Pixels filled by the closing pass rather than a direct splat; their
    /// depth is copied from a neighbor, not z-buffered.
    pub closing_filled: Mask,
}

/// Forward-warps `frame` (with depth) from `from_cam` into `to_cam`.
pub fn reproject_frame(
    frame: &FrameSet,
    from_cam: &CameraModel,
    to_cam: &CameraModel,
) -> Result<ReprojectResult> {
    from_cam.validate()?;
    to_cam.validate()?;
    if frame.width != from_cam.width || frame.height != from_cam.height {
        return Err(Error::DimensionMismatch {
            expected: (from_cam.width * from_cam.height) as usize,
            got: frame.pixel_count(),
        });
    }
    let depth = frame.depth.as_ref().ok_or(Error::MissingDepth)?;

    let (dw, dh) = (to_cam.width, to_cam.height);
    let mut out = FrameSet::new_full(dw, dh, [0, 0, 0]);
    let mut filled = Mask::new(dw, dh);

    // Row-major source order; destination conflicts resolve by strictly
    // nearer depth, so the result is gather-equivalent and deterministic.
    for sy in 0..frame.height {
        for sx in 0..frame.width {
            let d = depth[frame.idx(sx, sy)];
            if !d.is_finite() {
                continue;
            }
            let world = from_cam.backproject_pixel(sx as f64, sy as f64, d as f64)?;
            let Some(hit) = to_cam.project_point(&world) else {
                continue;
            };
            let (u, v) = (hit.u.round(), hit.v.round());
            if u < 0.0 || v < 0.0 || u >= dw as f64 || v >= dh as f64 {
                continue;
            }
            let (du, dv) = (u as u32, v as u32);
            let di = out.idx(du, dv);
            let dst_depth = out.depth.as_ref().expect("allocated")[di];
            if (hit.depth as f32) < dst_depth {
                out.depth.as_mut().expect("allocated")[di] = hit.depth as f32;
                out.set_rgb(du, dv, frame.rgb_at(sx, sy));
                out.seg.as_mut().expect("allocated")[di] = frame.seg_at(sx, sy);
                filled.set(du, dv, true);
            }
        }
    }

    // Closing pass: a pixel survives erode(dilate(filled)) iff its whole
    // 3x3 neighborhood is within one pixel of a splat; fill such gap pixels
    // from their nearest-depth filled neighbor.
    let closed = erode3(&dilate_mask(&filled, 1));
    let mut closing_filled = Mask::new(dw, dh);
    let snapshot = out.clone();
    for y in 0..dh {
        for x in 0..dw {
            if filled.get(x, y) || !closed.get(x, y) {
                continue;
            }
            let mut best: Option<(f32, u32, u32)> = None;
            for ny in y.saturating_sub(1)..=(y + 1).min(dh - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(dw - 1) {
                    if !filled.get(nx, ny) {
                        continue;
                    }
                    let nd = snapshot.depth_at(nx, ny);
                    if best.map_or(true, |(bd, _, _)| nd < bd) {
                        best = Some((nd, nx, ny));
                    }
                }
            }
            if let Some((nd, nx, ny)) = best {
                let di = out.idx(x, y);
                out.set_rgb(x, y, snapshot.rgb_at(nx, ny));
                out.depth.as_mut().expect("allocated")[di] = nd;
                out.seg.as_mut().expect("allocated")[di] = snapshot.seg_at(nx, ny);
                closing_filled.set(x, y, true);
            }
        }
    }

    let mut holes = Mask::new(dw, dh);
    for i in 0..holes.data.len() {
        holes.data[i] = !(filled.data[i] || closing_filled.data[i]);
    }
    Ok(ReprojectResult {
        frame: out,
        holes,
        closing_filled,
    })
}

fn erode3(m: &Mask) -> Mask {
    let mut out = Mask::new(m.width, m.height);
    for y in 0..m.height {
        for x in 0..m.width {
            let mut all = true;
            'scan: for ny in y.saturating_sub(1)..=(y + 1).min(m.height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(m.width - 1) {
                    if !m.get(nx, ny) {
                        all = false;
                        break 'scan;
                    }
                }
            }
            out.set(x, y, all);
        }
    }
    out
}
