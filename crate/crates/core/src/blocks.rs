//! Block-structured vectors and the per-block geometry (norms, cosines,
//! projections, local Bregman divergences) shared by penalties and solvers.

use crate::error::{Error, Result};

/// Norms at or below this value are treated as exact zeros by `cosine` and
/// `project_span`.
pub const ZERO_NORM: f64 = f64::MIN_POSITIVE;

/// Slack allowed on `‖u‖ ≤ 1` for a subgradient of the Euclidean norm.
pub const SUBGRADIENT_SLACK: f64 = 1e-10;

/// `m` blocks of `b` reals stored block-contiguous (row `i` is block `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    m: usize,
    b: usize,
    data: Vec<f64>,
}

impl BlockVector {
    pub fn zeros(m: usize, b: usize) -> Self {
        assert!(m >= 1 && b >= 1, "block vector needs m >= 1 and b >= 1");
        Self {
            m,
            b,
            data: vec![0.0; m * b],
        }
    }

    pub fn from_vec(m: usize, b: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || b == 0 {
            return Err(Error::InvalidParameter(format!(
                "block vector needs m >= 1 and b >= 1 (got m={m}, b={b})"
            )));
        }
        if data.len() != m * b {
            return Err(Error::dims(m * b, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "block vector entries must be finite".into(),
            ));
        }
        Ok(Self { m, b, data })
    }

    /// Builds a vector from a list of equally sized blocks.
    pub fn from_blocks<B: AsRef<[f64]>>(blocks: &[B]) -> Result<Self> {
        let b = blocks.first().map(|blk| blk.as_ref().len()).unwrap_or(0);
        if blocks.iter().any(|blk| blk.as_ref().len() != b) {
            return Err(Error::InvalidParameter("blocks have unequal sizes".into()));
        }
        let data = blocks
            .iter()
            .flat_map(|blk| blk.as_ref().iter().copied())
            .collect();
        Self::from_vec(blocks.len(), b, data)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.b..(i + 1) * self.b]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.b..(i + 1) * self.b]
    }

    pub fn blocks(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.b)
    }

    pub fn blocks_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.data.chunks_exact_mut(self.b)
    }

    pub fn block_norm(&self, i: usize) -> f64 {
        norm(self.block(i))
    }

    pub fn block_norms(&self) -> Vec<f64> {
        self.blocks().map(norm).collect()
    }

    pub fn l12_norm(&self) -> f64 {
        l12_norm(self)
    }

    pub fn max_block_norm(&self) -> f64 {
        self.blocks().map(norm).fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &BlockVector) -> bool {
        self.m == other.m && self.b == other.b
    }

    pub(crate) fn check_shape(&self, other: &BlockVector) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dims(
                format!("{}x{} blocks", self.m, self.b),
                format!("{}x{} blocks", other.m, other.b),
            ))
        }
    }
}

/// Sorted, duplicate-free set of block indices in `[0, m)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    mask: Vec<bool>,
    len: usize,
}

impl SupportSet {
    pub fn empty(m: usize) -> Self {
        Self {
            mask: vec![false; m],
            len: 0,
        }
    }

    pub fn full(m: usize) -> Self {
        Self {
            mask: vec![true; m],
            len: m,
        }
    }

    /// Indices may come in any order; duplicates are rejected.
    pub fn from_indices(m: usize, indices: &[usize]) -> Result<Self> {
        let mut set = Self::empty(m);
        for &i in indices {
            if i >= m {
                return Err(Error::InvalidParameter(format!(
                    "support index {i} out of range [0, {m})"
                )));
            }
            if set.mask[i] {
                return Err(Error::InvalidParameter(format!(
                    "duplicate support index {i}"
                )));
            }
            set.mask[i] = true;
            set.len += 1;
        }
        Ok(set)
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        let len = mask.iter().filter(|&&v| v).count();
        Self { mask, len }
    }

    /// Number of blocks `m` of the ambient vector.
    pub fn universe(&self) -> usize {
        self.mask.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask.get(i).copied().unwrap_or(false)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i))
    }

    pub fn is_subset_of(&self, other: &SupportSet) -> bool {
        self.mask.len() == other.mask.len()
            && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `Σᵢ ‖zᵢ‖`.
pub fn l12_norm(z: &BlockVector) -> f64 {
    z.blocks().map(norm).sum()
}

/// Cosine of the angle between `z` and `zhat`, clamped to `[-1, 1]`.
pub fn cosine(z: &[f64], zhat: &[f64]) -> Result<f64> {
    check_len(z, zhat)?;
    let nz = norm(z);
    let nh = norm(zhat);
    if nz <= ZERO_NORM || nh <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok((dot(z, zhat) / (nz * nh)).clamp(-1.0, 1.0))
}

/// Orthogonal projection of `z` onto `span(zhat)`.
pub fn project_span(z: &[f64], zhat: &[f64]) -> Result<Vec<f64>> {
    check_len(z, zhat)?;
    let nh = norm(zhat);
    if nh <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    let coef = dot(z, zhat) / (nh * nh);
    Ok(zhat.iter().map(|v| coef * v).collect())
}

/// `‖z‖ − ⟨u, z⟩` for a subgradient `u` of the Euclidean norm (`‖u‖ ≤ 1`).
pub fn bregman_local(z: &[f64], zhat_unit: &[f64]) -> Result<f64> {
    check_len(z, zhat_unit)?;
    let nu = norm(zhat_unit);
    if nu > 1.0 + SUBGRADIENT_SLACK {
        return Err(Error::InvalidSubgradient { norm: nu });
    }
    // Rounding may push the value a few ulps below zero.
    Ok((norm(z) - dot(zhat_unit, z)).max(0.0))
}

/// Sum of the local divergences over all blocks.
pub fn bregman_global(z: &BlockVector, zhat_units: &BlockVector) -> Result<f64> {
    z.check_shape(zhat_units)?;
    z.blocks()
        .zip(zhat_units.blocks())
        .map(|(zi, ui)| bregman_local(zi, ui))
        .sum()
}

/// `{ i : ‖zᵢ‖ > tol }`.
pub fn support_of(z: &BlockVector, tol: f64) -> SupportSet {
    SupportSet::from_mask(z.blocks().map(|blk| norm(blk) > tol).collect())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn l12_norm_examples() {
        let z = BlockVector::from_blocks(&[[3.0, 4.0], [0.0, 0.0]]).unwrap();
        assert_eq!(z.l12_norm(), 5.0);
        assert_eq!(BlockVector::zeros(5, 2).l12_norm(), 0.0);
        let z = BlockVector::from_blocks(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(close(z.l12_norm(), 2.0 + 2f64.sqrt(), 1e-12));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(BlockVector::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(BlockVector::from_vec(0, 2, vec![]).is_err());
        assert!(BlockVector::from_vec(1, 1, vec![f64::NAN]).is_err());
        assert!(BlockVector::from_blocks(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[2.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[0.0, 3.0], &[2.0, 0.0]).unwrap(), 0.0);
        assert!(close(
            cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
            0.5f64.sqrt(),
            1e-12
        ));
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector)
        ));
        assert!(matches!(
            cosine(&[1.0, 0.0], &[0.0, 0.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn project_span_examples() {
        assert_eq!(project_span(&[3.0, 4.0], &[1.0, 0.0]).unwrap(), vec![3.0, 0.0]);
        assert_eq!(project_span(&[0.0, 4.0], &[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let p = project_span(&[2.0, 2.0], &[5.0, 5.0]).unwrap();
        assert!(close(p[0], 2.0, 1e-12) && close(p[1], 2.0, 1e-12));
        assert!(matches!(
            project_span(&[1.0, 1.0], &[0.0, 0.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn bregman_local_examples() {
        assert_eq!(bregman_local(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(bregman_local(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(bregman_local(&[-1.0, 0.0], &[1.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(
            bregman_local(&[1.0, 0.0], &[1.0, 0.1]),
            Err(Error::InvalidSubgradient { .. })
        ));
    }

    #[test]
    fn bregman_global_examples() {
        let units = BlockVector::from_blocks(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let aligned = BlockVector::from_blocks(&[[3.0, 0.0], [0.0, 0.5]]).unwrap();
        assert_eq!(bregman_global(&aligned, &units).unwrap(), 0.0);
        assert_eq!(
            bregman_global(&BlockVector::zeros(2, 2), &units).unwrap(),
            0.0
        );
        // local values 1 and 2
        let z = BlockVector::from_blocks(&[[0.0, 1.0], [0.0, -1.0]]).unwrap();
        assert_eq!(bregman_global(&z, &units).unwrap(), 3.0);
        let bad = BlockVector::from_blocks(&[[2.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(bregman_global(&z, &bad).is_err());
    }

    #[test]
    fn support_examples() {
        assert!(support_of(&BlockVector::zeros(4, 2), 0.0).is_empty());
        let z = BlockVector::from_blocks(&[[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]]).unwrap();
        assert_eq!(support_of(&z, 0.0).indices().collect::<Vec<_>>(), vec![0, 2]);
        let z = BlockVector::from_blocks(&[[1e-9], [5.0]]).unwrap();
        assert_eq!(support_of(&z, 1e-6).indices().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn support_set_construction() {
        let s = SupportSet::from_indices(5, &[3, 1]).unwrap();
        assert_eq!(s.indices().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(s.len(), 2);
        assert!(SupportSet::from_indices(5, &[1, 1]).is_err());
        assert!(SupportSet::from_indices(5, &[5]).is_err());
        assert!(s.is_subset_of(&SupportSet::full(5)));
        assert!(!SupportSet::full(5).is_subset_of(&s));
    }

    fn vec_strategy(b: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, b)
    }

    fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..7).prop_flat_map(|b| (vec_strategy(b), vec_strategy(b)))
    }

    fn scale(v: &[f64], s: f64) -> Vec<f64> {
        v.iter().map(|x| x * s).collect()
    }

    proptest! {
        #[test]
        fn bregman_is_nonnegative((z, u) in pair_strategy()) {
            let nu = norm(&u);
            prop_assume!(nu > 1e-6);
            // any point of the unit ball is a valid subgradient
            let u = scale(&u, 1.0 / nu.max(1.0));
            prop_assert!(bregman_local(&z, &u).unwrap() >= 0.0);
        }

        #[test]
        fn bregman_zero_iff_positively_collinear(
            (dir, other) in pair_strategy(),
            alpha in 0.0f64..20.0,
        ) {
            let nd = norm(&dir);
            prop_assume!(nd > 1e-3);
            let unit = scale(&dir, 1.0 / nd);
            let z = scale(&unit, alpha);
            prop_assert!(bregman_local(&z, &unit).unwrap() <= 1e-12 * (1.0 + alpha));
            // away from the ray the divergence is strictly positive
            let c = cosine(&other, &unit);
            if let Ok(c) = c {
                if c < 1.0 - 1e-6 {
                    prop_assert!(bregman_local(&other, &unit).unwrap() > 0.0);
                }
            }
        }

        #[test]
        fn bregman_with_interior_subgradient_vanishes_only_at_zero(
            (z, u) in pair_strategy(),
            radius in 0.0f64..0.9,
        ) {
            let nu = norm(&u);
            prop_assume!(nu > 1e-6);
            let u = scale(&u, radius / nu);
            let d = bregman_local(&z, &u).unwrap();
            prop_assert!(d >= (1.0 - radius) * norm(&z) - 1e-12);
            prop_assert_eq!(bregman_local(&vec![0.0; u.len()], &u).unwrap(), 0.0);
        }

        #[test]
        fn projection_is_idempotent_contraction((z, zhat) in pair_strategy()) {
            prop_assume!(norm(&zhat) > 1e-6);
            let p = project_span(&z, &zhat).unwrap();
            let pp = project_span(&p, &zhat).unwrap();
            for (a, b) in p.iter().zip(&pp) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
            prop_assert!(norm(&p) <= norm(&z) * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn cosine_is_scale_invariant(
            (z, zhat) in pair_strategy(),
            a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            s in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
        ) {
            prop_assume!(norm(&z) > 1e-6 && norm(&zhat) > 1e-6);
            let c = cosine(&z, &zhat).unwrap();
            let cs = cosine(&scale(&z, a), &scale(&zhat, s)).unwrap();
            prop_assert!((cs - a.signum() * s.signum() * c).abs() <= 1e-12);
        }

        #[test]
        fn l12_is_a_norm(
            (m, b) in (1usize..6, 1usize..7),
            seed in prop::collection::vec(-10.0f64..10.0, 72),
            c in -4.0f64..4.0,
        ) {
            let x = BlockVector::from_vec(m, b, seed[..m * b].to_vec()).unwrap();
            let y = BlockVector::from_vec(m, b, seed[36..36 + m * b].to_vec()).unwrap();
            let sum: Vec<f64> = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p + q).collect();
            let sum = BlockVector::from_vec(m, b, sum).unwrap();
            prop_assert!(sum.l12_norm() <= x.l12_norm() + y.l12_norm() + 1e-12);
            let scaled = BlockVector::from_vec(m, b, scale(x.as_slice(), c)).unwrap();
            prop_assert!((scaled.l12_norm() - c.abs() * x.l12_norm()).abs() <= 1e-10);
        }
    }
}
