use super::hilbert::hilbert_index;
use super::{farthest_point_sample, knn, sub, Point3, PointCloud};
use crate::error::Result;

/// Local neighborhoods around serialized key points.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// Key points in serialization order.
    pub key_points: Vec<Point3>,
    /// `key_points.len() × k` offsets `neighbor − key`, patch-major.
    pub patches: Vec<Point3>,
    pub k: usize,
    /// `serialization_order[i]` is the position, in the unserialized key
    /// list, of the i-th serialized key.
    pub serialization_order: Vec<usize>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.key_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_points.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[Point3] {
        &self.patches[i * self.k..(i + 1) * self.k]
    }

    /// FPS for `m` keys, Hilbert serialization, then `k`-NN patches.
    pub fn from_cloud(
        p: &PointCloud,
        m: usize,
        k: usize,
        hilbert_order: u32,
        seed: u64,
    ) -> Result<Self> {
        let picked = farthest_point_sample(p, m, seed)?;
        let keys: Vec<Point3> = picked.iter().map(|&i| p.get(i)).collect();
        let order = serialize_keypoints(&keys, hilbert_order)?;
        let serialized: Vec<Point3> = order.iter().map(|&i| keys[i]).collect();
        let mut set = build_patches(p, &serialized, k)?;
        set.serialization_order = order;
        Ok(set)
    }
}

/// Cell of `c ∈ [-1, 1]` on a `2^order` grid; values outside are clamped.
fn quantize(c: f64, order: u32) -> u32 {
    let side = (1u64 << order) as f64;
    let cell = ((c + 1.0) * 0.5 * side).floor();
    cell.clamp(0.0, side - 1.0) as u32
}

/// Permutation sorting `keys` by Hilbert index over `[-1, 1]³`, stable in
/// the original order.
pub fn serialize_keypoints(keys: &[Point3], order: u32) -> Result<Vec<usize>> {
    let codes = keys
        .iter()
        .map(|k| {
            hilbert_index(
                [
                    quantize(k[0], order),
                    quantize(k[1], order),
                    quantize(k[2], order),
                ],
                order,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut perm: Vec<usize> = (0..keys.len()).collect();
    perm.sort_by_key(|&i| codes[i]);
    Ok(perm)
}

/// For each key (in the given order), its `k` nearest cloud points as
/// offsets from the key.
pub fn build_patches(p: &PointCloud, keys: &[Point3], k: usize) -> Result<PatchSet> {
    let mut patches = Vec::with_capacity(keys.len() * k);
    for &key in keys {
        for i in knn(p, key, k)? {
            patches.push(sub(p.get(i), key));
        }
    }
    Ok(PatchSet {
        key_points: keys.to_vec(),
        patches,
        k,
        serialization_order: (0..keys.len()).collect(),
    })
}
