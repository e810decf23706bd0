use crate::error::{CqError, Result};

/// Phase label of end-diastole-side frames.
pub const ED: u8 = 1;
/// Phase label of end-systole-side frames.
pub const ES: u8 = 0;

/// Centre of the longest cyclic run of frames attaining `target` exactly;
/// earlier runs win ties, even-length runs resolve to the lower middle.
fn plateau_centre(values: &[f64], target: f64) -> usize {
    let t = values.len();
    let hit = |i: usize| values[i % t] == target;
    let mut best = (0usize, 0usize);
    for start in 0..t {
        if !hit(start) || (hit(start + t - 1) && (0..t).any(|i| !hit(i))) {
            continue;
        }
        let len = (0..t).take_while(|&k| hit(start + k)).count();
        if len > best.1 {
            best = (start, len);
        }
    }
    if best.1 == 0 {
        // Every frame attains the target; callers reject this case.
        return 0;
    }
    (best.0 + (best.1 - 1) / 2) % t
}

/// Frame indices of end-diastole (largest cavity) and end-systole (smallest).
pub fn extreme_frames(areas: &[f64]) -> Result<(usize, usize)> {
    if areas.len() < 2 {
        return Err(CqError::degenerate("phase", format!("need at least 2 frames, got {}", areas.len())));
    }
    if let Some(a) = areas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(CqError::invalid("phase", format!("cavity area {a} is not a finite non-negative value")));
    }
    let max = areas.iter().copied().fold(f64::MIN, f64::max);
    let min = areas.iter().copied().fold(f64::MAX, f64::min);
    if max == min {
        return Err(CqError::degenerate("phase", "cavity area is constant, so the phase is undefined"));
    }
    Ok((plateau_centre(areas, max), plateau_centre(areas, min)))
}

/// Labels the frames after end-diastole up to and including end-systole as
/// systolic (0) and the rest, end-diastole included, as diastolic (1).
pub fn derive_phase_labels(areas: &[f64]) -> Result<Vec<u8>> {
    let (ed, es) = extreme_frames(areas)?;
    Ok(labels_from_extremes(areas.len(), ed, es))
}

pub fn labels_from_extremes(frames: usize, ed: usize, es: usize) -> Vec<u8> {
    let mut labels = vec![ED; frames];
    let mut i = ed;
    while i != es {
        i = (i + 1) % frames;
        labels[i] = ES;
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateaus_resolve_to_their_centre_even_across_the_wrap() {
        assert_eq!(extreme_frames(&[5.0, 5.0, 5.0, 1.0, 2.0]).unwrap(), (1, 3));
        assert_eq!(extreme_frames(&[9.0, 1.0, 1.0, 4.0, 9.0, 9.0]).unwrap(), (5, 1));
    }
}
