//! FAST-9 corner detection with 3x3 non-maximum suppression.
//!
//! A pixel is a corner when at least 9 contiguous pixels on the radius-3
//! Bresenham circle are all brighter than `center + t` or all darker than
//! `center - t`. The score used for suppression is
//! `max(sum(|p - c|) - t over the bright set, sum(|p - c|) - t over the dark set)`.

use crate::depth_io::GrayImage;

/// Circle offsets `(dx, dy)` clockwise from twelve o'clock.
pub const CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

pub const ARC_LENGTH: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

fn longest_circular_run(flags: &[bool; 16]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for i in 0..32 {
        if flags[i % 16] {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best.min(16)
}

/// Score of a corner candidate, or `None` when the segment test fails.
pub fn corner_score(gray: &GrayImage, x: usize, y: usize, threshold: f64) -> Option<f64> {
    if x < 3 || y < 3 || x + 3 >= gray.width || y + 3 >= gray.height {
        return None;
    }
    let c = gray.get(x, y);
    let mut bright = [false; 16];
    let mut dark = [false; 16];
    let (mut bright_sum, mut dark_sum) = (0.0, 0.0);
    for (i, (dx, dy)) in CIRCLE.iter().enumerate() {
        let p = gray.get((x as isize + dx) as usize, (y as isize + dy) as usize);
        if p > c + threshold {
            bright[i] = true;
            bright_sum += p - c;
        } else if p < c - threshold {
            dark[i] = true;
            dark_sum += c - p;
        }
    }
    let bright_ok = longest_circular_run(&bright) >= ARC_LENGTH;
    let dark_ok = longest_circular_run(&dark) >= ARC_LENGTH;
    match (bright_ok, dark_ok) {
        (false, false) => None,
        (true, false) => Some(bright_sum - threshold),
        (false, true) => Some(dark_sum - threshold),
        (true, true) => Some((bright_sum - threshold).max(dark_sum - threshold)),
    }
}

/// Corners surviving 3x3 non-maximum suppression; a corner is dropped only
/// when an 8-neighbour corner has a strictly larger score, so ties survive.
pub fn detect(gray: &GrayImage, threshold: f64) -> Vec<Corner> {
    let (w, h) = (gray.width, gray.height);
    if w < 7 || h < 7 {
        return Vec::new();
    }
    let mut scores = vec![None; w * h];
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            scores[y * w + x] = corner_score(gray, x, y, threshold);
        }
    }
    let mut corners = Vec::new();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let Some(score) = scores[y * w + x] else {
                continue;
            };
            let mut is_max = true;
            'nbhd: for ny in y - 1..=y + 1 {
                for nx in x - 1..=x + 1 {
                    if (nx, ny) == (x, y) {
                        continue;
                    }
                    if let Some(s) = scores[ny * w + nx] {
                        if s > score {
                            is_max = false;
                            break 'nbhd;
                        }
                    }
                }
            }
            if is_max {
                corners.push(Corner { x, y, score });
            }
        }
    }
    corners
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> GrayImage {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.push(f(x, y));
            }
        }
        GrayImage {
            width: w,
            height: h,
            data,
        }
    }

    #[test]
    fn circle_has_radius_three() {
        for (dx, dy) in CIRCLE {
            let r2 = dx * dx + dy * dy;
            assert!((9..=10).contains(&r2) || r2 == 8, "({dx},{dy})");
        }
    }

    #[test]
    fn isolated_bright_pixel_is_the_only_corner() {
        let g = image(11, 11, |x, y| if (x, y) == (5, 5) { 1.0 } else { 0.0 });
        let c = detect(&g, 0.08);
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].x, c[0].y), (5, 5));
        // 16 circle pixels each darker by 1.0
        assert!((c[0].score - (16.0 - 0.08)).abs() < 1e-12);
    }

    #[test]
    fn flat_and_tiny_images_have_no_corners() {
        assert!(detect(&image(20, 20, |_, _| 0.3), 0.08).is_empty());
        assert!(detect(&image(6, 6, |x, _| x as f64 / 6.0), 0.0).is_empty());
    }

    #[test]
    fn wrapped_arc_counts() {
        let mut f = [false; 16];
        for i in [12, 13, 14, 15, 0, 1, 2, 3, 4] {
            f[i] = true;
        }
        assert_eq!(longest_circular_run(&f), 9);
        assert_eq!(longest_circular_run(&[true; 16]), 16);
    }
}
