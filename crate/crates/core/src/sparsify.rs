//! Sparsifiers that turn dense depth into realistic sparse patterns, and the
//! sparse / complementary split fed to the network.
//!
//! * uniform: LiDAR-like, `n` valid positions drawn uniformly.
//! * stereo: `n` positions drawn from high-gradient (edge / texture) pixels.
//! * orb: every FAST-9 corner (after 3x3 non-maximum suppression) with valid depth.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth_io::{to_grayscale, DepthMap, GrayImage, RgbImage};
use crate::error::{Error, Result};
pub use crate::mask::SparsityMask;

pub mod fast;

/// Magnitude percentile above which a pixel is a stereo candidate.
pub const STEREO_PERCENTILE: f64 = 0.70;
/// FAST intensity threshold on `[0, 1]` intensities.
pub const DEFAULT_ORB_THRESHOLD: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsifierKind {
    Uniform,
    Stereo,
    Orb,
}

impl std::str::FromStr for SparsifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "stereo" => Ok(Self::Stereo),
            "orb" => Ok(Self::Orb),
            other => Err(Error::InvalidConfig(format!("unknown sparsifier {other:?}"))),
        }
    }
}

/// Runs the selected sparsifier. `n` is ignored by the ORB sparsifier.
pub fn sparsify(
    kind: SparsifierKind,
    rgb: &RgbImage,
    depth: &DepthMap,
    n: usize,
    seed: u64,
    orb_threshold: f64,
) -> Result<SparsityMask> {
    match kind {
        SparsifierKind::Uniform => uniform_sparsifier(depth, n, seed),
        SparsifierKind::Stereo => stereo_sparsifier(rgb, depth, n, seed),
        SparsifierKind::Orb => orb_sparsifier(rgb, depth, orb_threshold),
    }
}

fn valid_indices(depth: &DepthMap) -> Vec<usize> {
    depth
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .map(|(i, _)| i)
        .collect()
}

fn mask_from_indices(width: usize, height: usize, indices: &[usize]) -> SparsityMask {
    let mut bits = vec![false; width * height];
    for &i in indices {
        bits[i] = true;
    }
    SparsityMask::new(width, height, bits).expect("bit count matches dimensions")
}

/// Samples exactly `n` valid positions uniformly without replacement.
pub fn uniform_sparsifier(depth: &DepthMap, n: usize, seed: u64) -> Result<SparsityMask> {
    let mut valid = valid_indices(depth);
    if n > valid.len() {
        return Err(Error::NotEnoughValidDepth {
            requested: n,
            available: valid.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = valid.partial_shuffle(&mut rng, n);
    Ok(mask_from_indices(depth.width(), depth.height(), chosen))
}

/// Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(gray: &GrayImage) -> Vec<f64> {
    let (w, h) = (gray.width as isize, gray.height as isize);
    let at = |x: isize, y: isize| gray.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    let mut out = Vec::with_capacity(gray.data.len());
    for y in 0..h {
        for x in 0..w {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Samples `n` valid positions, preferring pixels on edges or texture.
///
/// Candidates are valid pixels whose Sobel magnitude strictly exceeds the
/// 70th percentile (nearest rank) of magnitudes over valid pixels. When
/// there are fewer than `n` candidates all of them are taken and the rest
/// is drawn uniformly from the remaining valid pixels.
pub fn stereo_sparsifier(
    rgb: &RgbImage,
    depth: &DepthMap,
    n: usize,
    seed: u64,
) -> Result<SparsityMask> {
    if rgb.width() != depth.width() || rgb.height() != depth.height() {
        return Err(Error::ShapeMismatch(format!(
            "rgb {}x{} vs depth {}x{}",
            rgb.width(),
            rgb.height(),
            depth.width(),
            depth.height()
        )));
    }
    let valid = valid_indices(depth);
    if n > valid.len() {
        return Err(Error::NotEnoughValidDepth {
            requested: n,
            available: valid.len(),
        });
    }
    if n == 0 {
        return Ok(SparsityMask::filled(depth.width(), depth.height(), false));
    }
    let magnitude = sobel_magnitude(&to_grayscale(rgb));
    let mut sorted: Vec<f64> = valid.iter().map(|&i| magnitude[i]).collect();
    sorted.sort_by(f64::total_cmp);
    let rank = ((STEREO_PERCENTILE * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let cutoff = sorted[rank - 1];

    let (mut candidates, mut others): (Vec<usize>, Vec<usize>) =
        valid.into_iter().partition(|&i| magnitude[i] > cutoff);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = if candidates.len() >= n {
        candidates.partial_shuffle(&mut rng, n).0.to_vec()
    } else {
        let fill = n - candidates.len();
        let extra = others.partial_shuffle(&mut rng, fill).0.to_vec();
        candidates.extend(extra);
        candidates
    };
    chosen.sort_unstable();
    Ok(mask_from_indices(depth.width(), depth.height(), &chosen))
}

/// Keeps depth only at FAST-9 corners of the image.
pub fn orb_sparsifier(rgb: &RgbImage, depth: &DepthMap, threshold: f64) -> Result<SparsityMask> {
    if rgb.width() != depth.width() || rgb.height() != depth.height() {
        return Err(Error::ShapeMismatch(format!(
            "rgb {}x{} vs depth {}x{}",
            rgb.width(),
            rgb.height(),
            depth.width(),
            depth.height()
        )));
    }
    let corners = fast::detect(&to_grayscale(rgb), threshold);
    let mut mask = SparsityMask::filled(depth.width(), depth.height(), false);
    for c in corners {
        if depth.get(c.x, c.y) > 0.0 {
            mask.set(c.x, c.y, true);
        }
    }
    Ok(mask)
}

/// Sparse depth, sparse RGB and complementary RGB derived from one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitInput {
    pub sparse_depth: DepthMap,
    pub sparse_rgb: RgbImage,
    pub comp_rgb: RgbImage,
    pub mask: SparsityMask,
    pub comp_mask: SparsityMask,
}

fn check_split_shapes(rgb: &RgbImage, depth: &DepthMap, mask: &SparsityMask) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    if rgb.width() != w || rgb.height() != h || mask.width() != w || mask.height() != h {
        return Err(Error::ShapeMismatch(format!(
            "rgb {}x{}, depth {}x{}, mask {}x{}",
            rgb.width(),
            rgb.height(),
            w,
            h,
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

fn build_split(
    rgb: &RgbImage,
    depth: &DepthMap,
    mask: SparsityMask,
    comp_mask: SparsityMask,
) -> SplitInput {
    let (w, h) = (depth.width(), depth.height());
    let sparse_depth = DepthMap::new(
        w,
        h,
        depth
            .data()
            .iter()
            .zip(mask.bits())
            .map(|(&d, &m)| if m { d } else { 0.0 })
            .collect(),
    )
    .expect("masked copy of a valid depth map");
    let gate = |m: &SparsityMask| {
        let mut out = rgb.clone();
        for (px, &keep) in out.pixels_mut().iter_mut().zip(m.bits()) {
            if !keep {
                *px = [0.0; 3];
            }
        }
        out
    };
    SplitInput {
        sparse_rgb: gate(&mask),
        comp_rgb: gate(&comp_mask),
        sparse_depth,
        mask,
        comp_mask,
    }
}

/// Splits a frame by `mask`. The sparse mask is restricted to valid depth and
/// the complementary mask is `validity(depth) AND NOT mask`.
pub fn split_input(rgb: &RgbImage, depth: &DepthMap, mask: &SparsityMask) -> Result<SplitInput> {
    check_split_shapes(rgb, depth, mask)?;
    let validity = depth.validity();
    let not_mask = validity.and_not(mask)?;
    let sparse = validity.and_not(&not_mask)?;
    Ok(build_split(rgb, depth, sparse, not_mask))
}

/// Split used at inference time, when no dense groundtruth exists: every
/// pixel outside `mask` belongs to the complementary image.
pub fn split_for_inference(
    rgb: &RgbImage,
    sparse_depth: &DepthMap,
    mask: &SparsityMask,
) -> Result<SplitInput> {
    check_split_shapes(rgb, sparse_depth, mask)?;
    let all = SparsityMask::filled(mask.width(), mask.height(), true);
    let missing = all.and_not(&sparse_depth.validity())?;
    let sparse = mask.and_not(&missing)?;
    let comp = all.and_not(mask)?;
    Ok(build_split(rgb, sparse_depth, sparse, comp))
}
