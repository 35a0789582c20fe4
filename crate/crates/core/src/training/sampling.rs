use rand::seq::index::sample;
use rand::Rng;

use crate::config::{FrameMode, MAX_SEQUENCE, MIN_SEQUENCE};
use crate::error::{Error, Result};

/// Frames drawn in [`FrameMode::Fixed16`].
pub const FIXED_DRAW: usize = 16;

/// Number of frames one draw produces for a sequence of `len` frames. In
/// variable mode the length is uniform on `[3, min(32, len)]`.
pub fn draw_length<R: Rng + ?Sized>(mode: FrameMode, len: usize, rng: &mut R) -> Result<usize> {
    match mode {
        FrameMode::Fixed16 => {
            if len < FIXED_DRAW {
                return Err(Error::Invalid(format!(
                    "cannot draw {FIXED_DRAW} frames from a {len}-frame sequence"
                )));
            }
            Ok(FIXED_DRAW)
        }
        FrameMode::Variable => {
            if len < MIN_SEQUENCE {
                return Err(Error::Invalid(format!(
                    "cannot draw {MIN_SEQUENCE} frames from a {len}-frame sequence"
                )));
            }
            Ok(rng.random_range(MIN_SEQUENCE..=MAX_SEQUENCE.min(len)))
        }
        FrameMode::All => Ok(len),
        FrameMode::Single => Ok(MIN_SEQUENCE),
    }
}

/// `count` distinct frame indices drawn uniformly from `0..len`, sorted.
pub fn ordered_subset<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count > len {
        return Err(Error::Invalid(format!("cannot draw {count} frames from a {len}-frame sequence")));
    }
    let mut idx = sample(rng, len, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Frame indices for one example. Fixed, variable and all modes are
/// strictly increasing; single mode repeats one random frame.
pub fn sample_frames<R: Rng + ?Sized>(len: usize, mode: FrameMode, rng: &mut R) -> Result<Vec<usize>> {
    let n = draw_length(mode, len, rng)?;
    frames_with_length(len, n, mode, rng)
}

/// Like [`sample_frames`] with the length already drawn (so a batch can
/// share it).
pub fn frames_with_length<R: Rng + ?Sized>(len: usize, n: usize, mode: FrameMode, rng: &mut R) -> Result<Vec<usize>> {
    match mode {
        FrameMode::All => Ok((0..len).collect()),
        FrameMode::Single => {
            if len == 0 {
                return Err(Error::Invalid("empty sequence".into()));
            }
            Ok(vec![rng.random_range(0..len); n])
        }
        _ => ordered_subset(len, n, rng),
    }
}
