//! Exact Euclidean nearest-feature transform over a class mask.
//!
//! Two separable passes: a per-column scan for the nearest feature row, then a
//! per-row lower envelope of parabolas `(u - u')² + g(u')²`. Squared distances
//! are integers and are compared exactly; ties are resolved towards the
//! feature with the smaller `v`, then the smaller `u`.

use super::AlignmentError;
use crate::semantic_io::SemanticMask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NearestPixelIndex {
    width: u32,
    height: u32,
    class_id: u32,
    nearest: Vec<(u32, u32)>,
}

impl NearestPixelIndex {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    /// Nearest class pixel to the grid cell `(u, v)`.
    #[inline]
    pub fn nearest(&self, u: u32, v: u32) -> (u32, u32) {
        self.nearest[v as usize * self.width as usize + u as usize]
    }

    /// Whether the grid cell itself carries the indexed class.
    #[inline]
    pub fn is_class(&self, u: u32, v: u32) -> bool {
        self.nearest(u, v) == (u, v)
    }

    pub fn squared_distance(&self, u: u32, v: u32) -> u64 {
        let (nu, nv) = self.nearest(u, v);
        let du = nu as i64 - u as i64;
        let dv = nv as i64 - v as i64;
        (du * du + dv * dv) as u64
    }

    /// Grid cell of continuous coordinates: rounded, then clamped to the grid.
    #[inline]
    pub fn cell_of(&self, u: f64, v: f64) -> (u32, u32) {
        let clamp = |x: f64, n: u32| x.round().clamp(0.0, (n - 1) as f64) as u32;
        (clamp(u, self.width), clamp(v, self.height))
    }
}

const NONE: i32 = -1;

/// Builds the nearest-pixel grid for `class_id`.
pub fn build_nearest_pixel_index(mask: &SemanticMask, class_id: u32) -> Result<NearestPixelIndex, AlignmentError> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    if !mask.classes.iter().any(|&c| c as u32 == class_id) {
        return Err(AlignmentError::ClassAbsent { class_id });
    }

    // Pass 1, column-major: nearest feature row within each column.
    let mut col_row = vec![NONE; w * h];
    let mut above = vec![NONE; h];
    for u in 0..w {
        let mut last = NONE;
        for v in 0..h {
            if mask.classes[v * w + u] as u32 == class_id {
                last = v as i32;
            }
            above[v] = last;
        }
        let mut next = NONE;
        for v in (0..h).rev() {
            if mask.classes[v * w + u] as u32 == class_id {
                next = v as i32;
            }
            let a = above[v];
            let row = match (a, next) {
                (NONE, b) => b,
                (a, NONE) => a,
                // equal gaps resolve upwards (smaller v)
                (a, b) => {
                    if v as i32 - a <= b - v as i32 {
                        a
                    } else {
                        b
                    }
                }
            };
            col_row[u * h + v] = row;
        }
    }

    // Pass 2, per row: lower envelope of parabolas.
    let mut nearest = vec![(0u32, 0u32); w * h];
    let mut sites: Vec<usize> = Vec::with_capacity(w);
    let mut starts: Vec<f64> = Vec::with_capacity(w + 1);
    let mut f = vec![0i64; w];
    for v in 0..h {
        sites.clear();
        starts.clear();
        for u in 0..w {
            let r = col_row[u * h + v];
            f[u] = if r == NONE { i64::MAX } else { (r as i64 - v as i64).pow(2) };
        }
        let intersect = |p: usize, q: usize, f: &[i64]| -> f64 {
            let (pi, qi) = (p as i64, q as i64);
            ((f[q] + qi * qi) - (f[p] + pi * pi)) as f64 / (2 * (qi - pi)) as f64
        };
        for q in 0..w {
            if f[q] == i64::MAX {
                continue;
            }
            if sites.is_empty() {
                sites.push(q);
                starts.push(f64::NEG_INFINITY);
                continue;
            }
            loop {
                let k = sites.len() - 1;
                let s = intersect(sites[k], q, &f);
                // strictly dominated parabolas are dropped; parabolas that only
                // touch the envelope at one point stay, they may win a tie there
                // starts[0] is -inf, so the first site is never popped
                if s < starts[k] {
                    sites.pop();
                    starts.pop();
                } else {
                    sites.push(q);
                    starts.push(s);
                    break;
                }
            }
        }

        let mut j = 0usize;
        for u in 0..w {
            let uf = u as f64;
            while j + 1 < sites.len() && starts[j + 1] <= uf {
                j += 1;
            }
            let value = |site: usize| -> i64 {
                let d = site as i64 - u as i64;
                f[site] + d * d
            };
            let feature = |site: usize| -> (u32, u32) { (site as u32, col_row[site * h + v] as u32) };
            let mut best_site = sites[j];
            let mut best_val = value(best_site);
            let consider = |site: usize, best_site: &mut usize, best_val: &mut i64| {
                let val = value(site);
                let (fu, fv) = feature(site);
                let (bu, bv) = feature(*best_site);
                if val < *best_val || (val == *best_val && (fv, fu) < (bv, bu)) {
                    *best_site = site;
                    *best_val = val;
                }
            };
            // neighbours whose interval touches u can tie with sites[j]
            let mut back = j;
            while back > 0 && starts[back] >= uf {
                back -= 1;
                consider(sites[back], &mut best_site, &mut best_val);
            }
            if j + 1 < sites.len() {
                consider(sites[j + 1], &mut best_site, &mut best_val);
            }
            nearest[v * w + u] = feature(best_site);
        }
    }

    Ok(NearestPixelIndex { width: mask.width, height: mask.height, class_id, nearest })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(N²) reference with the same tie rule.
    fn brute(mask: &SemanticMask, class_id: u32) -> Vec<(u32, u32)> {
        let feats: Vec<(u32, u32)> = (0..mask.height)
            .flat_map(|v| (0..mask.width).map(move |u| (u, v)))
            .filter(|&(u, v)| mask.get(u, v) as u32 == class_id)
            .collect();
        let mut out = Vec::new();
        for v in 0..mask.height {
            for u in 0..mask.width {
                let best = feats
                    .iter()
                    .min_by_key(|&&(fu, fv)| {
                        let d = (fu as i64 - u as i64).pow(2) + (fv as i64 - v as i64).pow(2);
                        (d, fv, fu)
                    })
                    .unwrap();
                out.push(*best);
            }
        }
        out
    }

    fn lcg_mask(w: u32, h: u32, density: u32, mut seed: u64) -> SemanticMask {
        let mut m = SemanticMask::filled(w, h, 0);
        for v in 0..h {
            for u in 0..w {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if ((seed >> 33) % 1000) < density as u64 {
                    m.set(u, v, 1);
                }
            }
        }
        m
    }

    #[test]
    fn single_pixel_maps_everything_to_it() {
        let mut m = SemanticMask::filled(3, 3, 0);
        m.set(1, 1, 5);
        let idx = build_nearest_pixel_index(&m, 5).unwrap();
        for v in 0..3 {
            for u in 0..3 {
                assert_eq!(idx.nearest(u, v), (1, 1));
            }
        }
        assert!(idx.is_class(1, 1));
        assert_eq!(idx.squared_distance(1, 1), 0);
    }

    #[test]
    fn class_absent_is_an_error() {
        let m = SemanticMask::filled(4, 4, 0);
        assert!(matches!(build_nearest_pixel_index(&m, 1), Err(AlignmentError::ClassAbsent { class_id: 1 })));
    }

    #[test]
    fn ties_prefer_smaller_v_then_u() {
        // (0,0) and (2,0) are equidistant from (1,0): smaller u wins
        let mut m = SemanticMask::filled(3, 3, 0);
        m.set(0, 0, 1);
        m.set(2, 0, 1);
        m.set(1, 2, 1);
        let idx = build_nearest_pixel_index(&m, 1).unwrap();
        assert_eq!(idx.nearest(1, 0), (0, 0));
        // (1,1) is at distance 1 from (1,2) only
        assert_eq!(idx.nearest(1, 1), (1, 2));
        // (0,1): (0,0) at 1, (1,2) at 2 -> (0,0)
        assert_eq!(idx.nearest(0, 1), (0, 0));
    }

    #[test]
    fn matches_brute_force_including_ties() {
        for (i, &(w, h, d)) in [(1, 1, 999), (7, 5, 100), (16, 16, 20), (33, 17, 5), (40, 40, 1), (5, 31, 300)]
            .iter()
            .enumerate()
        {
            let mut m = lcg_mask(w, h, d, 17 + i as u64);
            if m.count_class(1) == 0 {
                m.set(w / 2, h / 2, 1);
            }
            let idx = build_nearest_pixel_index(&m, 1).unwrap();
            assert_eq!(idx.nearest, brute(&m, 1), "mask {w}x{h} density {d}");
        }
    }

    #[test]
    fn cell_rounding_clamps() {
        let m = SemanticMask::filled(4, 3, 1);
        let idx = build_nearest_pixel_index(&m, 1).unwrap();
        assert_eq!(idx.cell_of(3.7, 2.9), (3, 2));
        assert_eq!(idx.cell_of(-0.4, 0.49), (0, 0));
        assert_eq!(idx.cell_of(1.5, 1.2), (2, 1));
    }
}
