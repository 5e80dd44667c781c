//! Event images and their reduction to discrete point sets.
//!
//! The recording is uniformly partitioned into non-overlapping windows of
//! fixed integration time; an event at `t` belongs to window `i` iff
//! `t ∈ [t_start_i, t_end_i)`. Each image counts distinct event-bearing
//! timestamps per pixel. A 3×3 mean filter (zero padding, constant
//! normalization by 9) feeds both the active-pixel-count frame selection and
//! point extraction.

use std::io::Write;

use crate::geometry::{backproject, Intrinsics, UnitVector3};

/// 1-based frame index, matching the attitude file convention.
pub type FrameId = usize;

/// Per-pixel distinct-timestamp counts over one time window.
#[derive(Debug, Clone)]
pub struct EventImage {
    pub frame: FrameId,
    pub width: u32,
    pub height: u32,
    /// Row-major counts, `counts[y * width + x]`.
    pub counts: Vec<u16>,
    pub t_start_us: i64,
    pub t_end_us: i64,
}

impl EventImage {
    pub fn count_at(&self, x: u32, y: u32) -> u16 {
        self.counts[(y * self.width + x) as usize]
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Midpoint of the window in seconds; the frame's nominal timestamp.
    pub fn mid_time_s(&self) -> f64 {
        (self.t_start_us + self.t_end_us) as f64 / 2.0 * 1e-6
    }
}

/// Real-valued image produced by the mean filter.
#[derive(Debug, Clone)]
pub struct FilteredImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl FilteredImage {
    pub fn value_at(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }
}

/// Discrete point set extracted from one filtered image, with backprojected
/// rays cached per point.
#[derive(Debug, Clone)]
pub struct PointSet {
    pub frame: FrameId,
    pub points: Vec<[f64; 2]>,
    pub rays: Vec<UnitVector3>,
    /// Summed filtered intensity of the component behind each point;
    /// proxies star brightness for hypothesis ordering.
    pub weights: Vec<f64>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// How point sets are formed from above-threshold pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointsMode {
    /// One point per above-threshold pixel.
    Pixels,
    /// One intensity-weighted centroid per 8-connected component (default).
    Centroids,
}

/// Partition `[t_start, t_end)` into `floor(duration / integration)` windows
/// and build one event image per window.
///
/// Events must be time-sorted. If the integration time does not divide the
/// duration evenly the trailing partial window is dropped with a warning.
/// An empty stream yields all-zero images.
pub fn build_event_images(
    events: &[crate::sim::Event],
    t_start_us: i64,
    t_end_us: i64,
    integration_ms: f64,
    width: u32,
    height: u32,
) -> Vec<EventImage> {
    let window_us = (integration_ms * 1e3).round() as i64;
    assert!(window_us > 0, "integration time must be positive");
    let duration = t_end_us - t_start_us;
    assert!(duration > 0, "recording duration must be positive");
    let m = (duration / window_us) as usize;
    if duration % window_us != 0 {
        log::warn!(
            "integration time {integration_ms} ms does not divide the {duration} us recording; \
             dropping the trailing partial window"
        );
    }

    let mut images: Vec<EventImage> = (0..m)
        .map(|i| EventImage {
            frame: i + 1,
            width,
            height,
            counts: vec![0u16; (width * height) as usize],
            t_start_us: t_start_us + i as i64 * window_us,
            t_end_us: t_start_us + (i as i64 + 1) * window_us,
        })
        .collect();

    // Distinct (pixel, timestamp) pairs per window: two events at the same
    // pixel and the same microsecond count once.
    let mut window_keys: Vec<Vec<(u16, u16, i64)>> = vec![Vec::new(); m];
    for e in events {
        if e.t_us < t_start_us {
            continue;
        }
        let offset = e.t_us - t_start_us;
        let w = (offset / window_us) as usize;
        if w >= m {
            continue;
        }
        window_keys[w].push((e.x, e.y, e.t_us));
    }
    for (img, keys) in images.iter_mut().zip(window_keys.iter_mut()) {
        keys.sort_unstable();
        keys.dedup();
        for &(x, y, _) in keys.iter() {
            let idx = (y as u32 * width + x as u32) as usize;
            img.counts[idx] = img.counts[idx].saturating_add(1);
        }
    }
    images
}

/// 3×3 averaging filter with zero padding; every output pixel is the
/// neighborhood sum divided by 9 regardless of valid support.
pub fn mean_filter(image: &EventImage) -> FilteredImage {
    let (w, h) = (image.width as usize, image.height as usize);
    // Horizontal pass then vertical pass of 3-wide box sums.
    let mut horiz = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = image.counts[y * w + x] as f64;
            if x > 0 {
                s += image.counts[y * w + x - 1] as f64;
            }
            if x + 1 < w {
                s += image.counts[y * w + x + 1] as f64;
            }
            horiz[y * w + x] = s;
        }
    }
    let mut values = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = horiz[y * w + x];
            if y > 0 {
                s += horiz[(y - 1) * w + x];
            }
            if y + 1 < h {
                s += horiz[(y + 1) * w + x];
            }
            values[y * w + x] = s / 9.0;
        }
    }
    FilteredImage {
        width: image.width,
        height: image.height,
        values,
    }
}

/// Active pixel count: pixels of the filtered image at or above `epsilon1`.
pub fn apc(filtered: &FilteredImage, epsilon1: f64) -> usize {
    filtered.values.iter().filter(|&&v| v >= epsilon1).count()
}

/// Frames whose mean-filtered APC reaches `epsilon2`, ascending.
pub fn select_frames(images: &[EventImage], epsilon1: f64, epsilon2: usize) -> Vec<FrameId> {
    let selected: Vec<FrameId> = images
        .iter()
        .filter(|img| apc(&mean_filter(img), epsilon1) >= epsilon2)
        .map(|img| img.frame)
        .collect();
    if selected.is_empty() {
        log::warn!("frame selection is empty: no image reached APC >= {epsilon2}");
    }
    selected
}

/// Extract one point per 8-connected component of `{filtered >= epsilon1}`
/// (intensity-weighted centroid), with rays cached via backprojection.
pub fn extract_points(filtered: &FilteredImage, epsilon1: f64, k: &Intrinsics, frame: FrameId) -> PointSet {
    extract_points_with_mode(filtered, epsilon1, k, frame, PointsMode::Centroids)
}

pub fn extract_points_with_mode(
    filtered: &FilteredImage,
    epsilon1: f64,
    k: &Intrinsics,
    frame: FrameId,
    mode: PointsMode,
) -> PointSet {
    let (w, h) = (filtered.width as usize, filtered.height as usize);
    let above = |x: usize, y: usize| filtered.values[y * w + x] >= epsilon1;

    let mut points = Vec::new();
    let mut weights = Vec::new();
    match mode {
        PointsMode::Pixels => {
            for y in 0..h {
                for x in 0..w {
                    if above(x, y) {
                        points.push([x as f64, y as f64]);
                        weights.push(filtered.values[y * w + x]);
                    }
                }
            }
        }
        PointsMode::Centroids => {
            let mut visited = vec![false; w * h];
            let mut stack = Vec::new();
            for y0 in 0..h {
                for x0 in 0..w {
                    if visited[y0 * w + x0] || !above(x0, y0) {
                        continue;
                    }
                    // Flood-fill one 8-connected component.
                    let (mut sx, mut sy, mut sw) = (0.0f64, 0.0f64, 0.0f64);
                    visited[y0 * w + x0] = true;
                    stack.push((x0, y0));
                    while let Some((x, y)) = stack.pop() {
                        let v = filtered.values[y * w + x];
                        sx += v * x as f64;
                        sy += v * y as f64;
                        sw += v;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                    continue;
                                }
                                let (nx, ny) = (nx as usize, ny as usize);
                                if !visited[ny * w + nx] && above(nx, ny) {
                                    visited[ny * w + nx] = true;
                                    stack.push((nx, ny));
                                }
                            }
                        }
                    }
                    points.push([sx / sw, sy / sw]);
                    weights.push(sw);
                }
            }
        }
    }
    let rays = points.iter().map(|&p| backproject(p, k)).collect();
    PointSet {
        frame,
        points,
        rays,
        weights,
    }
}

/// Debug dump: 8-bit PGM with counts clamped to 255.
pub fn write_pgm<W: Write>(mut w: W, image: &EventImage) -> std::io::Result<()> {
    writeln!(w, "P5")?;
    writeln!(w, "{} {}", image.width, image.height)?;
    writeln!(w, "255")?;
    let bytes: Vec<u8> = image.counts.iter().map(|&c| c.min(255) as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Point-set dump: `frame,x,y` rows.
pub fn write_point_sets<W: Write>(mut w: W, sets: &[PointSet]) -> std::io::Result<()> {
    writeln!(w, "frame,x,y")?;
    for set in sets {
        for p in &set.points {
            writeln!(w, "{},{},{}", set.frame, p[0], p[1])?;
        }
    }
    Ok(())
}
