use super::ModelError;

/// Tiling of an `grid_h × grid_w` field into `ph × pw` patches. Points and
/// tokens are both numbered row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub grid_h: usize,
    pub grid_w: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PatchGeom {
    pub fn new(grid: (usize, usize), patch: (usize, usize)) -> Result<Self, ModelError> {
        let ((h, w), (ph, pw)) = (grid, patch);
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(ModelError::Config(format!("grid {h}x{w} is not divisible into {ph}x{pw} patches")));
        }
        Ok(PatchGeom {
            grid_h: h,
            grid_w: w,
            ph,
            pw,
        })
    }

    /// Geometry whose token grid has `tokens` entries, as square as the grid allows.
    pub fn for_tokens(grid: (usize, usize), tokens: usize) -> Result<Self, ModelError> {
        let (h, w) = grid;
        let (mh, mw) = factor_pairs(tokens)
            .into_iter()
            .filter(|&(a, b)| a > 0 && b > 0 && h % a == 0 && w % b == 0)
            .min_by_key(|&(a, b)| (a.abs_diff(b), a))
            .ok_or_else(|| ModelError::Config(format!("{tokens} patches cannot tile a {h}x{w} grid")))?;
        PatchGeom::new(grid, (h / mh, w / mw))
    }

    pub fn points(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (self.grid_h / self.ph, self.grid_w / self.pw)
    }

    pub fn tokens(&self) -> usize {
        let (a, b) = self.token_grid();
        a * b
    }

    pub fn patch_size(&self) -> usize {
        self.ph * self.pw
    }

    /// Token containing grid point `i`.
    pub fn token_of(&self, i: usize) -> usize {
        let (r, c) = (i / self.grid_w, i % self.grid_w);
        (r / self.ph) * (self.grid_w / self.pw) + c / self.pw
    }
}

fn factor_pairs(n: usize) -> Vec<(usize, usize)> {
    (1..=n).filter(|a| n % a == 0).map(|a| (a, n / a)).collect()
}

/// Most-square factorization `rows × cols` of `n` with `rows ≤ cols`.
pub fn square_factor(n: usize) -> (usize, usize) {
    factor_pairs(n)
        .into_iter()
        .filter(|&(a, b)| a <= b)
        .max_by_key(|&(a, _)| a)
        .unwrap_or((1, n))
}

/// Traversal order of an `h × w` grid for scan direction `d`:
/// 0 row-major, 1 its reverse, 2 row-major with each row reversed, 3 the
/// reverse of 2.
pub fn direction_order(grid: (usize, usize), d: usize) -> Vec<usize> {
    let (h, w) = grid;
    let d2 = || (0..h).flat_map(move |r| (0..w).rev().map(move |c| r * w + c));
    match d % 4 {
        0 => (0..h * w).collect(),
        1 => (0..h * w).rev().collect(),
        2 => d2().collect(),
        _ => {
            let mut v: Vec<usize> = d2().collect();
            v.reverse();
            v
        }
    }
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_orders() {
        assert_eq!(direction_order((2, 2), 0), [0, 1, 2, 3]);
        assert_eq!(direction_order((2, 2), 1), [3, 2, 1, 0]);
        assert_eq!(direction_order((2, 2), 2), [1, 0, 3, 2]);
        assert_eq!(direction_order((2, 2), 3), [2, 3, 0, 1]);
    }

    #[test]
    fn orders_are_bijections() {
        for grid in [(1, 1), (3, 5), (4, 4), (7, 2)] {
            let d0 = direction_order(grid, 0);
            let mut d1 = direction_order(grid, 1);
            d1.reverse();
            assert_eq!(d0, d1);
            for d in 0..4 {
                let mut o = direction_order(grid, d);
                let inv = invert_permutation(&o);
                assert!(o.iter().enumerate().all(|(i, &j)| inv[j] == i));
                o.sort_unstable();
                assert_eq!(o, (0..grid.0 * grid.1).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn patch_geometry() {
        let g = PatchGeom::for_tokens((32, 32), 64).unwrap();
        assert_eq!((g.ph, g.pw, g.token_grid()), (4, 4, (8, 8)));
        let g = PatchGeom::for_tokens((4, 6), 6).unwrap();
        assert_eq!(g.token_grid(), (2, 3));
        assert!(PatchGeom::new((5, 4), (2, 2)).is_err());
        assert!(PatchGeom::for_tokens((5, 5), 4).is_err());
        let g = PatchGeom::new((4, 4), (2, 2)).unwrap();
        assert_eq!((0..16).map(|i| g.token_of(i)).collect::<Vec<_>>(), [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        assert_eq!(square_factor(12), (3, 4));
        assert_eq!(square_factor(7), (1, 7));
    }
}
