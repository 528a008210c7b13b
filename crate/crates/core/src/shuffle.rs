//! Patch grids and the seeded patch shuffle used to build the conflict
//! pathway input.
//!
//! Shuffling permutes whole patch rows. Coordinates inside a patch are never
//! touched, so every permutation-invariant statistic of the grid survives
//! bit-for-bit.

use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// `N` patch embeddings of dimension `D`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PatchGrid {
    dim: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::range("patches", "grid needs at least one patch"))?;
        if dim == 0 {
            return Err(Error::range("dim", "patch dimension must be positive"));
        }
        let mut data = Vec::with_capacity(dim * rows.len());
        for row in &rows {
            check_len(dim, row.len())?;
            data.extend_from_slice(row);
        }
        Self::from_flat(data, rows.len(), dim)
    }

    pub fn from_flat(data: Vec<f64>, rows: usize, dim: usize) -> Result<Self> {
        if rows == 0 {
            return Err(Error::range("patches", "grid needs at least one patch"));
        }
        if dim == 0 {
            return Err(Error::range("dim", "patch dimension must be positive"));
        }
        check_len(rows * dim, data.len())?;
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(PatchGrid { dim, data })
    }

    /// Decodes a flat little-endian `f64` buffer of `rows * dim` values.
    pub fn from_le_bytes(bytes: &[u8], rows: usize, dim: usize) -> Result<Self> {
        check_len(rows * dim * 8, bytes.len())?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_flat(data, rows, dim)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn read_binary(path: &Path, rows: usize, dim: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_le_bytes(&bytes, rows, dim)
    }

    /// Number of patches.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// True when rows are in non-decreasing lexicographic order.
    pub fn is_row_sorted(&self) -> bool {
        let rows: Vec<&[f64]> = self.rows().collect();
        rows.windows(2)
            .all(|w| cmp_rows(w[0], w[1]) != std::cmp::Ordering::Greater)
    }
}

fn cmp_rows(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

impl TryFrom<Vec<Vec<f64>>> for PatchGrid {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        PatchGrid::from_rows(rows)
    }
}

impl From<PatchGrid> for Vec<Vec<f64>> {
    fn from(g: PatchGrid) -> Self {
        g.to_rows()
    }
}

/// A bijection on `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(Error::range("permutation", format!("{mapping:?} is not a bijection")));
            }
            seen[m] = true;
        }
        Ok(Permutation(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &m)| i == m)
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// Unbiased draw from `0..bound` by rejecting the low `2^64 mod bound`
/// values of the generator.
pub(crate) fn uniform_below(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let x = rng.next_u64();
        if x >= threshold {
            return x % bound;
        }
    }
}

/// Shuffles `items` in place: ChaCha8 seeded with `seed_from_u64(seed)`,
/// then descending Fisher-Yates where position `i` swaps with
/// `uniform_below(i + 1)`.
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = uniform_below(&mut rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Deterministic uniform permutation of `0..n` for `seed`, identical on
/// every platform.
pub fn permutation_from_seed(n: usize, seed: u64) -> Result<Permutation> {
    if n == 0 {
        return Err(Error::range("n", "permutation needs at least one element"));
    }
    let mut mapping: Vec<usize> = (0..n).collect();
    seeded_shuffle(&mut mapping, seed);
    Ok(Permutation(mapping))
}

/// Output row `i` is input row `perm[i]`.
pub fn shuffle_patches(grid: &PatchGrid, perm: &Permutation) -> Result<PatchGrid> {
    check_len(grid.len(), perm.len())?;
    let mut data = Vec::with_capacity(grid.data.len());
    for &src in perm.as_slice() {
        data.extend_from_slice(grid.row(src));
    }
    Ok(PatchGrid { dim: grid.dim, data })
}

/// Row-shuffled copy of `grid` under `permutation_from_seed(len, seed)`.
pub fn shuffle_with_seed(grid: &PatchGrid, seed: u64) -> PatchGrid {
    let perm = permutation_from_seed(grid.len(), seed).expect("grid is non-empty");
    shuffle_patches(grid, &perm).expect("lengths agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rows: &[&[f64]]) -> PatchGrid {
        PatchGrid::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn sorted_rows(g: &PatchGrid) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = g.rows().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
        rows.sort();
        rows
    }

    #[test]
    fn single_element_permutation() {
        for seed in [0, 1, u64::MAX] {
            assert_eq!(permutation_from_seed(1, seed).unwrap().as_slice(), &[0]);
        }
        assert_eq!(permutation_from_seed(0, 3).unwrap_err().field(), Some("n"));
    }

    #[test]
    fn permutation_is_deterministic_bijection() {
        assert_eq!(
            permutation_from_seed(5, 42).unwrap(),
            permutation_from_seed(5, 42).unwrap()
        );
        let p = permutation_from_seed(4, 7).unwrap();
        let mut sorted = p.as_slice().to_vec();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn permutation_golden_values() {
        // Frozen output of the documented ChaCha8 + Fisher-Yates procedure.
        assert_eq!(permutation_from_seed(8, 42).unwrap().as_slice(), GOLDEN_8_42);
        assert_eq!(permutation_from_seed(5, 0).unwrap().as_slice(), GOLDEN_5_0);
    }

    const GOLDEN_8_42: &[usize] = &[5, 3, 2, 6, 7, 4, 0, 1];
    const GOLDEN_5_0: &[usize] = &[4, 0, 1, 3, 2];

    #[test]
    fn shuffle_applies_mapping() {
        let g = grid(&[&[0.0, 0.5], &[1.0, 1.5], &[2.0, 2.5]]);
        let out = shuffle_patches(&g, &Permutation::new(vec![2, 0, 1]).unwrap()).unwrap();
        assert_eq!(out, grid(&[&[2.0, 2.5], &[0.0, 0.5], &[1.0, 1.5]]));
        let same = shuffle_patches(&g, &Permutation::identity(3)).unwrap();
        assert_eq!(same.to_le_bytes(), g.to_le_bytes());
        assert!(matches!(
            shuffle_patches(&g, &Permutation::identity(2)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn grid_validation() {
        assert!(PatchGrid::from_rows(vec![]).is_err());
        assert!(PatchGrid::from_rows(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(PatchGrid::from_rows(vec![vec![f64::INFINITY]]).is_err());
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![1, 2]).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let g = grid(&[&[0.1, -2.0], &[3.5, 1e-300]]);
        let back = PatchGrid::from_le_bytes(&g.to_le_bytes(), 2, 2).unwrap();
        assert_eq!(back, g);
        assert!(PatchGrid::from_le_bytes(&g.to_le_bytes(), 3, 2).is_err());
    }

    #[test]
    fn non_identity_shuffle_moves_a_patch() {
        let g = grid(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        assert!(g.is_row_sorted());
        let perm = Permutation::new(vec![1, 0, 2, 3]).unwrap();
        let out = shuffle_patches(&g, &perm).unwrap();
        assert!((0..4).any(|i| out.row(i) != g.row(i)));
        assert!(!out.is_row_sorted());
    }

    fn arb_grid() -> impl Strategy<Value = PatchGrid> {
        (1usize..=64, 1usize..=32).prop_flat_map(|(n, d)| {
            prop::collection::vec(-1e3..1e3f64, n * d).prop_map(move |data| PatchGrid::from_flat(data, n, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn shuffle_preserves_patch_multiset(g in arb_grid(), seed in any::<u64>()) {
            let out = shuffle_with_seed(&g, seed);
            prop_assert_eq!(sorted_rows(&out), sorted_rows(&g));
            let out2 = shuffle_with_seed(&g, seed);
            prop_assert_eq!(out, out2);
        }
    }
}
