//! Trajectory-similarity measures: DTW, discrete Fréchet distance,
//! partial curve mapping, area between curves, and curve-length
//! difference. All are 0 for identical curves and nonnegative.

use crate::error::{Error, Result};
use crate::vec2::Vec2;
use serde::{Deserialize, Serialize};

/// The five similarity values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub dtw: f64,
    pub frechet: f64,
    pub pcm: f64,
    pub area: f64,
    pub curve_length: f64,
}

/// Compute the full similarity suite between two curves.
pub fn trajectory_similarity(a: &[Vec2], b: &[Vec2]) -> Result<Similarity> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("similarity needs curves of >= 2 points"));
    }
    Ok(Similarity {
        dtw: dtw(a, b),
        frechet: frechet(a, b),
        pcm: pcm(a, b),
        area: area_between(a, b),
        curve_length: (arc_length(a) - arc_length(b)).abs(),
    })
}

/// Dynamic time warping with unit step pattern and Euclidean ground
/// distance (sum of matched distances along the optimal alignment).
pub fn dtw(a: &[Vec2], b: &[Vec2]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let d = a[i - 1].dist(b[j - 1]);
            cur[j] = d + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Discrete Fréchet distance (symmetric).
pub fn frechet(a: &[Vec2], b: &[Vec2]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut ca = vec![vec![-1.0f64; m]; n];
    ca[0][0] = a[0].dist(b[0]);
    for i in 0..n {
        for j in 0..m {
            if i == 0 && j == 0 {
                continue;
            }
            let d = a[i].dist(b[j]);
            let reach = if i == 0 {
                ca[0][j - 1]
            } else if j == 0 {
                ca[i - 1][0]
            } else {
                ca[i - 1][j].min(ca[i - 1][j - 1]).min(ca[i][j - 1])
            };
            ca[i][j] = reach.max(d);
        }
    }
    ca[n - 1][m - 1]
}

fn point_to_polyline(p: Vec2, line: &[Vec2]) -> f64 {
    let mut best = f64::INFINITY;
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ab = b - a;
        let len_sq = ab.norm_sq();
        let t = if len_sq < 1e-18 {
            0.0
        } else {
            ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0)
        };
        best = best.min(p.dist(a + ab * t));
    }
    best
}

/// Partial curve mapping distance: each curve's vertices are mapped onto
/// the other polyline; the score is the larger of the two mean mapping
/// distances. Zero iff every vertex of each curve lies on the other.
pub fn pcm(a: &[Vec2], b: &[Vec2]) -> f64 {
    let map = |xs: &[Vec2], line: &[Vec2]| {
        xs.iter().map(|p| point_to_polyline(*p, line)).sum::<f64>() / xs.len() as f64
    };
    map(a, b).max(map(b, a))
}

/// Area between the curves: both are resampled to a common parameter
/// count and the absolute quadrilateral areas between corresponding
/// segments are summed (shoelace per quad).
pub fn area_between(a: &[Vec2], b: &[Vec2]) -> f64 {
    let n = a.len().max(b.len()).max(2);
    let ra = resample(a, n);
    let rb = resample(b, n);
    let mut total = 0.0;
    for i in 0..n - 1 {
        let quad = [ra[i], ra[i + 1], rb[i + 1], rb[i]];
        total += shoelace(&quad).abs();
    }
    total
}

fn shoelace(pts: &[Vec2]) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += pts[i].cross(pts[j]);
    }
    acc / 2.0
}

pub fn arc_length(curve: &[Vec2]) -> f64 {
    curve.windows(2).map(|w| w[1].dist(w[0])).sum()
}

/// Resample a polyline to `n` points uniformly spaced in arc length.
fn resample(curve: &[Vec2], n: usize) -> Vec<Vec2> {
    let total = arc_length(curve);
    if total < 1e-15 {
        return vec![curve[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for i in 0..n {
        let target = total * i as f64 / (n - 1) as f64;
        while seg < curve.len() - 2 {
            let seg_len = curve[seg + 1].dist(curve[seg]);
            if seg_start + seg_len >= target {
                break;
            }
            seg_start += seg_len;
            seg += 1;
        }
        let seg_len = curve[seg + 1].dist(curve[seg]);
        let t = if seg_len < 1e-15 {
            0.0
        } else {
            ((target - seg_start) / seg_len).clamp(0.0, 1.0)
        };
        out.push(curve[seg] + (curve[seg + 1] - curve[seg]) * t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_curve(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec2> {
        let mut p = Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let mut step = Vec2::from_angle(rng.random_range(-3.0..3.0)) * rng.random_range(0.5..2.0);
        let mut out = vec![p];
        for _ in 1..n {
            step = step.rotated(rng.random_range(-0.3..0.3));
            p += step;
            out.push(p);
        }
        out
    }

    #[test]
    fn identical_curves_give_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        for _ in 0..20 {
            let c = random_curve(&mut rng, 8);
            let s = trajectory_similarity(&c, &c).unwrap();
            assert_eq!(s.dtw, 0.0);
            assert_eq!(s.frechet, 0.0);
            assert_eq!(s.pcm, 0.0);
            assert!(s.area.abs() < 1e-12);
            assert_eq!(s.curve_length, 0.0);
        }
    }

    #[test]
    fn perturbed_curves_give_positive_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        for _ in 0..20 {
            let c = random_curve(&mut rng, 8);
            let d: Vec<Vec2> = c
                .iter()
                .map(|p| {
                    *p + Vec2::new(rng.random_range(0.1..0.5), rng.random_range(0.1..0.5))
                })
                .collect();
            let s = trajectory_similarity(&c, &d).unwrap();
            assert!(s.dtw > 0.0);
            assert!(s.frechet > 0.0);
            assert!(s.pcm > 0.0);
            assert!(s.area > 0.0);
        }
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        for _ in 0..30 {
            let a = random_curve(&mut rng, 7);
            let b = random_curve(&mut rng, 9);
            assert_eq!(frechet(&a, &b), frechet(&b, &a));
        }
    }

    #[test]
    fn frechet_constant_offset() {
        let a: Vec<Vec2> = (0..5).map(|i| Vec2::new(i as f64, 0.0)).collect();
        let b: Vec<Vec2> = a.iter().map(|p| *p + Vec2::new(0.0, 2.0)).collect();
        assert!((frechet(&a, &b) - 2.0).abs() < 1e-12);
    }

    /// Exhaustive alignment oracle: enumerate every monotone alignment of
    /// the two sequences and take the cheapest total distance.
    fn dtw_bruteforce(a: &[Vec2], b: &[Vec2]) -> f64 {
        fn go(a: &[Vec2], b: &[Vec2], i: usize, j: usize) -> f64 {
            let d = a[i].dist(b[j]);
            if i == a.len() - 1 && j == b.len() - 1 {
                return d;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.len() {
                best = best.min(go(a, b, i + 1, j));
            }
            if j + 1 < b.len() {
                best = best.min(go(a, b, i, j + 1));
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                best = best.min(go(a, b, i + 1, j + 1));
            }
            d + best
        }
        go(a, b, 0, 0)
    }

    #[test]
    fn dtw_matches_exhaustive_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        // Hand example: 5 points vs 5 points plus random small instances.
        let a = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(2.0, 1.0),
            Vec2::new(3.0, 0.5),
            Vec2::new(4.0, 0.0),
        ];
        let b = vec![
            Vec2::new(0.0, 0.5),
            Vec2::new(1.5, 0.2),
            Vec2::new(2.5, 0.8),
            Vec2::new(3.5, 0.1),
            Vec2::new(4.0, -0.2),
        ];
        assert!((dtw(&a, &b) - dtw_bruteforce(&a, &b)).abs() < 1e-12);
        for _ in 0..25 {
            let a = random_curve(&mut rng, 6);
            let b = random_curve(&mut rng, 5);
            assert!((dtw(&a, &b) - dtw_bruteforce(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn curve_length_difference() {
        let a: Vec<Vec2> = (0..5).map(|i| Vec2::new(i as f64, 0.0)).collect();
        let b: Vec<Vec2> = (0..5).map(|i| Vec2::new(1.5 * i as f64, 0.0)).collect();
        let s = trajectory_similarity(&a, &b).unwrap();
        assert!((s.curve_length - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(trajectory_similarity(&[Vec2::ZERO], &[Vec2::ZERO, Vec2::ZERO]).is_err());
    }
}
