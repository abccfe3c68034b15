//! Order statistics shared by the robust estimators.
//!
//! All medians are *lower* medians: for an even number of elements the
//! element at rank `(n - 1) / 2` is returned, so results never depend on
//! averaging two candidates.

/// Lower median of `values`, reordering the slice in place.
pub fn median_in_place(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mid = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    Some(*m)
}

/// Lower median of an `f32` slice, reordering in place.
pub fn median_in_place_f32(values: &mut [f32]) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    let mid = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f32::total_cmp);
    Some(*m)
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut buf = values.to_vec();
    median_in_place(&mut buf)
}

/// Median and median absolute deviation, `MAD = median(|v - median(v)|)`.
pub fn median_mad(values: &[f64]) -> Option<(f64, f64)> {
    let mut buf = values.to_vec();
    let med = median_in_place(&mut buf)?;
    for v in buf.iter_mut() {
        *v = (*v - med).abs();
    }
    let mad = median_in_place(&mut buf)?;
    Some((med, mad))
}

/// `median(v) + k * MAD(v)`.
pub fn robust_threshold(values: &[f64], k: f64) -> Option<f64> {
    median_mad(values).map(|(med, mad)| med + k * mad)
}
