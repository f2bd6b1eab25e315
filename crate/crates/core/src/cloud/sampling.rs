use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{dist2, Point3, PointCloud};
use crate::error::{invalid, Result};

/// Greedy farthest point sampling with the first index drawn from `seed`.
pub fn farthest_point_sample(p: &PointCloud, m: usize, seed: u64) -> Result<Vec<usize>> {
    check_count(p, m, "farthest_point_sample")?;
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..p.len());
    farthest_point_sample_from(p, m, start)
}

/// Greedy farthest point sampling from a fixed first index.
///
/// Each step takes the unselected point farthest from the selected set,
/// breaking ties toward the lowest index.
pub fn farthest_point_sample_from(p: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    check_count(p, m, "farthest_point_sample")?;
    if start >= p.len() {
        return Err(invalid(format!(
            "start index {start} outside cloud of {}",
            p.len()
        )));
    }
    let pts = p.points();
    let mut nearest = vec![f64::INFINITY; pts.len()];
    let mut taken = vec![false; pts.len()];
    let mut picked = Vec::with_capacity(m);
    let mut current = start;
    loop {
        picked.push(current);
        taken[current] = true;
        if picked.len() == m {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, (q, near)) in pts.iter().zip(nearest.iter_mut()).enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(*q, c);
            if d < *near {
                *near = d;
            }
            if *near > best_d {
                best_d = *near;
                best = i;
            }
        }
        current = best;
    }
    Ok(picked)
}

/// Indices of the `k` points nearest to `query`, ascending by distance,
/// ties broken toward the lowest index.
pub fn knn(p: &PointCloud, query: Point3, k: usize) -> Result<Vec<usize>> {
    check_count(p, k, "knn")?;
    let mut keyed: Vec<(f64, usize)> = p
        .points()
        .iter()
        .enumerate()
        .map(|(i, &q)| (dist2(q, query), i))
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, order);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(order);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

fn check_count(p: &PointCloud, m: usize, op: &str) -> Result<()> {
    if m == 0 || m > p.len() {
        return Err(invalid(format!(
            "{op}: requested {m} of {} points",
            p.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::norm;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(pts: &[Point3]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cloud(
            &(0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect::<Vec<_>>(),
        )
    }

    // Written independently of the production loop: recomputes the
    // min-distance to the whole selected set from scratch each round.
    fn fps_oracle(p: &PointCloud, m: usize, start: usize) -> Vec<usize> {
        let mut sel = vec![start];
        while sel.len() < m {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for i in 0..p.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&s| {
                        let a = p.get(i);
                        let b = p.get(s);
                        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    #[test]
    fn fps_single_point() {
        let p = cloud(&[[1.0, 2.0, 3.0]]);
        assert_eq!(farthest_point_sample(&p, 1, 9).unwrap(), vec![0]);
    }

    #[test]
    fn fps_forced_start() {
        let p = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample_from(&p, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_rejects_too_many() {
        let p = cloud(&[[0.0; 3], [1.0; 3]]);
        assert!(farthest_point_sample(&p, 3, 0).is_err());
        assert!(farthest_point_sample(&p, 0, 0).is_err());
    }

    #[test]
    fn fps_matches_oracle_on_random_clouds() {
        for seed in 0..10 {
            let p = random_cloud(64, seed);
            let got = farthest_point_sample(&p, 8, seed).unwrap();
            assert_eq!(got, fps_oracle(&p, 8, got[0]));
        }
    }

    #[test]
    fn fps_handles_duplicates_without_repeating_indices() {
        let p = cloud(&[[0.0; 3], [0.0; 3], [0.0; 3]]);
        let mut got = farthest_point_sample_from(&p, 3, 1).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn knn_examples() {
        let p = cloud(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ]);
        assert_eq!(knn(&p, [2.0, 0.0, 0.0], 1).unwrap(), vec![2]);
        assert_eq!(knn(&p, [0.0, 0.0, 0.0], 2).unwrap(), vec![0, 1]);
        // equidistant neighbors: lowest index first
        assert_eq!(knn(&p, [1.5, 0.0, 0.0], 2).unwrap(), vec![1, 2]);
        assert!(knn(&p, [0.0; 3], 5).is_err());
    }

    #[test]
    fn knn_matches_full_sort() {
        let p = random_cloud(256, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let q = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let mut all: Vec<(f64, usize)> = (0..p.len())
                .map(|i| (norm(crate::cloud::sub(p.get(i), q)), i))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..16].iter().map(|x| x.1).collect();
            assert_eq!(knn(&p, q, 16).unwrap(), want);
        }
    }

    fn min_pairwise(p: &PointCloud, idx: &[usize]) -> f64 {
        let mut best = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                best = best.min(dist2(p.get(i), p.get(j)));
            }
        }
        best
    }

    proptest! {
        #[test]
        fn fps_min_spacing_is_non_increasing(seed in 0u64..1000, n in 8usize..40) {
            let p = random_cloud(n, seed);
            let full = farthest_point_sample(&p, n, seed).unwrap();
            let mut last = f64::INFINITY;
            for m in 2..=n {
                let s = min_pairwise(&p, &full[..m]);
                prop_assert!(s <= last);
                last = s;
            }
        }

        #[test]
        fn fps_is_deterministic(seed in 0u64..1000) {
            let p = random_cloud(50, seed ^ 0xabc);
            prop_assert_eq!(
                farthest_point_sample(&p, 10, seed).unwrap(),
                farthest_point_sample(&p, 10, seed).unwrap()
            );
        }
    }
}
