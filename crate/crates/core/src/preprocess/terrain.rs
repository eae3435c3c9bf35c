//! Slope from elevation using Horn's 3x3 weighted differences.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mirror index into `0..n` without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Horn gradient `(dz/dx, dz/dy)` at `(row, col)` with reflected borders.
///
/// ```text
///   NW  N  NE
///   W   *  E
///   SW  S  SE
/// ```
/// `dz/dx = ((NE + 2E + SE) - (NW + 2W + SW)) / (8 cell)`,
/// `dz/dy = ((SW + 2S + SE) - (NW + 2N + NE)) / (8 cell)`.
pub fn horn_gradient<T: Scalar>(
    z: &[T],
    width: usize,
    height: usize,
    row: usize,
    col: usize,
    cell_size: T,
) -> (T, T) {
    let at = |dr: isize, dc: isize| {
        let r = reflect(row as isize + dr, height);
        let c = reflect(col as isize + dc, width);
        z[r * width + c]
    };
    let two = T::of(2.0);
    let east = at(-1, 1) + two * at(0, 1) + at(1, 1);
    let west = at(-1, -1) + two * at(0, -1) + at(1, -1);
    let south = at(1, -1) + two * at(1, 0) + at(1, 1);
    let north = at(-1, -1) + two * at(-1, 0) + at(-1, 1);
    let denom = T::of(8.0) * cell_size;
    ((east - west) / denom, (south - north) / denom)
}

/// Slope in degrees for every cell; a cell is valid only when it and all of its
/// (reflected) 3x3 neighbours are valid.
pub fn horn_slope_degrees<T: Scalar>(
    z: &[T],
    valid: &[bool],
    width: usize,
    height: usize,
    cell_size: T,
) -> Result<(Vec<T>, Vec<bool>)> {
    if width < 3 || height < 3 {
        return Err(Error::invalid(format!(
            "slope needs at least a 3x3 grid, got {width}x{height}"
        )));
    }
    if !(cell_size > T::zero()) {
        return Err(Error::invalid("cell size must be positive"));
    }
    if z.len() != width * height || valid.len() != z.len() {
        return Err(Error::shape("elevation grid does not match its dimensions"));
    }
    let mut slope = vec![T::zero(); z.len()];
    let mut out_valid = vec![false; z.len()];
    for row in 0..height {
        for col in 0..width {
            let ok = (-1..=1).all(|dr| {
                (-1..=1).all(|dc| {
                    let r = reflect(row as isize + dr, height);
                    let c = reflect(col as isize + dc, width);
                    valid[r * width + c]
                })
            });
            if !ok {
                continue;
            }
            let (gx, gy) = horn_gradient(z, width, height, row, col, cell_size);
            slope[row * width + col] = (gx * gx + gy * gy).sqrt().atan().to_degrees();
            out_valid[row * width + col] = true;
        }
    }
    Ok((slope, out_valid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(w: usize, h: usize, gx: f64, gy: f64, cell: f64) -> Vec<f64> {
        (0..h)
            .flat_map(|r| (0..w).map(move |c| gx * c as f64 * cell + gy * r as f64 * cell))
            .collect()
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn constant_dem_is_flat() {
        let z = vec![17.0f64; 25];
        let (s, v) = horn_slope_degrees(&z, &[true; 25], 5, 5, 2.0).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
        assert!(v.iter().all(|&x| x));
    }

    #[test]
    fn unit_gradient_gives_45_degrees() {
        let (w, h, cell) = (6, 5, 5.0);
        let z = plane(w, h, 1.0, 0.0, cell);
        let (s, _) = horn_slope_degrees(&z, &vec![true; w * h], w, h, cell).unwrap();
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                assert!((s[r * w + c] - 45.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_four_plane() {
        let (w, h, cell) = (5, 5, 2.5);
        let z = plane(w, h, 3.0, 4.0, cell);
        let (s, _) = horn_slope_degrees(&z, &vec![true; w * h], w, h, cell).unwrap();
        let expected = 5.0f64.atan().to_degrees();
        assert!((expected - 78.690_067_525_979_79).abs() < 1e-9);
        assert!((s[2 * w + 2] - expected).abs() < 1e-12);
    }

    #[test]
    fn masked_neighbour_propagates() {
        let mut valid = vec![true; 25];
        valid[12] = false;
        let (_, v) = horn_slope_degrees(&[0.0f32; 25], &valid, 5, 5, 1.0).unwrap();
        let invalid: Vec<usize> = (0..25).filter(|&i| !v[i]).collect();
        assert_eq!(invalid, vec![6, 7, 8, 11, 12, 13, 16, 17, 18]);
    }

    #[test]
    fn degenerate_grid_rejected() {
        assert!(horn_slope_degrees(&[0.0f64; 4], &[true; 4], 2, 2, 1.0).is_err());
        assert!(horn_slope_degrees(&[0.0f64; 9], &[true; 9], 3, 3, 0.0).is_err());
    }

    #[test]
    fn transpose_consistency() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (w, h) = (7, 5);
        let z: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..100.0)).collect();
        let zt: Vec<f64> = (0..w)
            .flat_map(|c| (0..h).map(|r| z[r * w + c]).collect::<Vec<_>>())
            .collect();
        let (s, _) = horn_slope_degrees(&z, &vec![true; w * h], w, h, 3.0).unwrap();
        let (st, _) = horn_slope_degrees(&zt, &vec![true; w * h], h, w, 3.0).unwrap();
        for r in 0..h {
            for c in 0..w {
                assert!((s[r * w + c] - st[c * h + r]).abs() < 1e-10);
            }
        }
    }
}
