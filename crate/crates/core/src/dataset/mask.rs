use crate::dataset::{Grid, RawMask, ALIGNED_SIZE, SILHOUETTE_MARGIN, SILHOUETTE_WIDTH};
use crate::error::{invalid, shape_err, Result};

/// Default effective-mask threshold: foreground must cover at least 15% of the frame.
pub const EFFECTIVE_RATIO: f64 = 0.15;
/// Default minimum number of effective masks for a sequence to be kept.
pub const MIN_EFFECTIVE_MASKS: usize = 8;

pub fn foreground_ratio(mask: &RawMask) -> Result<f64> {
    let area = mask.height() * mask.width();
    if area == 0 {
        return Err(invalid!("zero-area mask"));
    }
    Ok(mask.foreground_count() as f64 / area as f64)
}

/// Inclusive at the boundary: a ratio equal to `threshold` counts as effective.
pub fn is_effective(mask: &RawMask, threshold: f64) -> Result<bool> {
    validate_threshold(threshold)?;
    // Compare on integer counts so that e.g. 1500/10000 vs 0.15 is not at the mercy of rounding.
    let area = (mask.height() * mask.width()) as f64;
    if area == 0.0 {
        return Err(invalid!("zero-area mask"));
    }
    let needed = (threshold * area - 1e-9 * area).ceil().max(0.0) as usize;
    Ok(mask.foreground_count() >= needed)
}

pub fn validate_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid!("foreground ratio threshold must lie in (0, 1), got {threshold}"));
    }
    Ok(())
}

/// Per-destination-index source weights for area (box) resampling along one axis.
/// Each destination cell averages the source interval it covers.
pub(crate) fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src {
                let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((j, (overlap / scale) as f32));
                }
                j += 1;
            }
            taps
        })
        .collect()
}

/// Area resampling of a row-major plane.
pub(crate) fn area_resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let rows = area_weights(sh, dh);
    let cols = area_weights(sw, dw);
    let mut tmp = vec![0f32; sh * dw];
    for y in 0..sh {
        let line = &src[y * sw..(y + 1) * sw];
        for (x, taps) in cols.iter().enumerate() {
            tmp[y * dw + x] = taps.iter().map(|&(j, w)| line[j] * w).sum();
        }
    }
    let mut out = vec![0f32; dh * dw];
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..dw {
            out[y * dw + x] = taps.iter().map(|&(j, w)| tmp[j * dw + x] * w).sum();
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, f32::MAX);
    }
    out
}

/// Area resampling restricted to [0,1]-valued masks (clamps accumulated rounding).
pub fn area_resize_mask(src: &Grid, dh: usize, dw: usize) -> Grid {
    let mut data = area_resize(&src.data, src.height, src.width, dh, dw);
    for v in &mut data {
        *v = v.min(1.0);
    }
    Grid {
        height: dh,
        width: dw,
        data,
    }
}

/// Height-normalizes the silhouette to the aligned square and centers it horizontally.
///
/// The foreground bounding box is area-resampled to 64 rows with its aspect ratio kept, then
/// shifted by an integer column offset so that the column-mass center of what remains
/// visible inside the 64-column canvas lies within half a pixel of column 32.
pub fn align_silhouette(mask: &RawMask) -> Result<Grid> {
    let (mut top, mut bottom, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) == 1 {
                top = top.min(y);
                bottom = bottom.max(y);
                left = left.min(x);
                right = right.max(x);
            }
        }
    }
    if top == usize::MAX {
        return Err(invalid!("cannot align an empty mask"));
    }
    let box_h = bottom - top + 1;
    let box_w = right - left + 1;
    let mut boxed = Vec::with_capacity(box_h * box_w);
    for y in top..=bottom {
        for x in left..=right {
            boxed.push(mask.get(y, x) as f32);
        }
    }
    let size = ALIGNED_SIZE;
    let scaled_w = ((box_w as f64 * size as f64 / box_h as f64).round() as usize).max(1);
    let scaled = area_resize(&boxed, box_h, box_w, size, scaled_w);

    let mut column_mass = vec![0f64; scaled_w];
    for y in 0..size {
        for (x, m) in column_mass.iter_mut().enumerate() {
            *m += scaled[y * scaled_w + x].min(1.0) as f64;
        }
    }
    let offset = centering_offset(&column_mass, size);

    let mut out = Grid::zeros(size, size);
    for y in 0..size {
        for x in 0..scaled_w {
            let cx = x as isize + offset;
            if (0..size as isize).contains(&cx) {
                out.data[y * size + cx as usize] = scaled[y * scaled_w + x].min(1.0);
            }
        }
    }
    Ok(out)
}

/// Integer shift placing the visible column-mass center closest to the canvas middle.
///
/// Moving the silhouette right by one column raises the visible center by at most one
/// column (content entering at column 0 or leaving at the last column only lowers it), so
/// the visible center crosses the middle with a step of at most one: some offset is within
/// half a column.
fn centering_offset(column_mass: &[f64], canvas: usize) -> isize {
    let target = (canvas / 2) as f64;
    let total: f64 = column_mass.iter().sum();
    let natural = column_mass
        .iter()
        .enumerate()
        .map(|(x, m)| x as f64 * m)
        .sum::<f64>()
        / total;
    let natural_offset = (target - natural).round() as isize;
    let visible_center = |offset: isize| -> Option<f64> {
        let (mut mass, mut moment) = (0.0, 0.0);
        for (x, &m) in column_mass.iter().enumerate() {
            let cx = x as isize + offset;
            if m > 0.0 && (0..canvas as isize).contains(&cx) {
                mass += m;
                moment += m * cx as f64;
            }
        }
        (mass > 0.0).then(|| moment / mass)
    };
    if let Some(c) = visible_center(natural_offset) {
        if (c - target).abs() <= 0.5 {
            return natural_offset;
        }
    }
    let lo = -(column_mass.len() as isize) + 1;
    let hi = canvas as isize - 1;
    let mut best = (f64::INFINITY, natural_offset);
    for offset in lo..=hi {
        if let Some(c) = visible_center(offset) {
            let err = (c - target).abs();
            let closer = err < best.0 - 1e-12
                || ((err - best.0).abs() <= 1e-12
                    && (offset - natural_offset).abs() < (best.1 - natural_offset).abs());
            if closer {
                best = (err, offset);
            }
        }
    }
    best.1
}

/// Drops the 10 leftmost and 10 rightmost columns of an aligned 64×64 silhouette.
pub fn crop_silhouette(aligned: &Grid) -> Result<Grid> {
    if aligned.height != ALIGNED_SIZE || aligned.width != ALIGNED_SIZE {
        return Err(shape_err!(
            "crop_silhouette expects {ALIGNED_SIZE}x{ALIGNED_SIZE}, got {}x{}",
            aligned.height,
            aligned.width
        ));
    }
    let mut data = Vec::with_capacity(ALIGNED_SIZE * SILHOUETTE_WIDTH);
    for y in 0..ALIGNED_SIZE {
        let row = &aligned.data[y * ALIGNED_SIZE..(y + 1) * ALIGNED_SIZE];
        data.extend_from_slice(&row[SILHOUETTE_MARGIN..SILHOUETTE_MARGIN + SILHOUETTE_WIDTH]);
    }
    Grid::new(ALIGNED_SIZE, SILHOUETTE_WIDTH, data)
}

/// align + crop: the gait network input for one mask.
pub fn gait_silhouette(mask: &RawMask) -> Result<Grid> {
    crop_silhouette(&align_silhouette(mask)?)
}
