//! Greedy collision re-assignment.

use ndarray::{Array1, ArrayView1, ArrayView2};

use super::kmeans::sq_dist;
use super::{row_lookup, AssignmentTable, Codebook, FusedEmbeddingMatrix, SemanticId};
use crate::error::{Error, Result};

/// The `n` nearest rows of `centroids` to `x`, closest first, ties by index.
fn nearest_n(x: ArrayView1<f64>, centroids: ArrayView2<f64>, n: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = centroids
        .outer_iter()
        .enumerate()
        .map(|(j, c)| (sq_dist(x, c), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(n);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Resolves SID collisions greedily.
///
/// Colliding groups are visited in ascending SID order. Inside a group the
/// item closest to the group's reconstructed codeword keeps the SID (ties to
/// the lowest item id); every other item, in ascending id order, moves to the
/// unoccupied pair with the smallest reconstruction error among its `top_n`
/// nearest level-1 codes crossed with the `top_n` level-2 codes nearest its
/// current residual. An item with no free candidate stays where it is.
pub fn greedy_reassign(
    table: &AssignmentTable,
    emb: &FusedEmbeddingMatrix,
    cb: &Codebook,
    top_n: usize,
) -> Result<AssignmentTable> {
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    let rows = row_lookup(emb);
    let mut out = table.clone();
    let colliding: Vec<SemanticId> = table
        .groups()
        .filter(|(_, g)| g.len() > 1)
        .map(|(s, _)| s)
        .collect();

    for sid in colliding {
        let group = out.items_at(sid).to_vec();
        if group.len() < 2 {
            continue;
        }
        let code = cb.reconstruct(sid);
        let row_of = |item: u64| {
            rows.get(&item)
                .copied()
                .ok_or_else(|| Error::invalid(format!("item {item} has no embedding row")))
        };
        let mut keeper = (f64::INFINITY, u64::MAX);
        for &item in &group {
            let d = sq_dist(emb.vectors.row(row_of(item)?), code.view());
            if d < keeper.0 || (d == keeper.0 && item < keeper.1) {
                keeper = (d, item);
            }
        }
        for &item in group.iter().filter(|&&i| i != keeper.1) {
            let x = emb.vectors.row(row_of(item)?);
            let l1 = nearest_n(x, cb.level1.view(), top_n);
            let residual: Array1<f64> = &x - &cb.level1.row(sid.c1 as usize);
            let l2 = nearest_n(residual.view(), cb.level2.view(), top_n);
            let mut best: Option<(f64, SemanticId)> = None;
            for &a in &l1 {
                let ra = &x - &cb.level1.row(a);
                for &b in &l2 {
                    let cand = SemanticId::new(a, b);
                    if out.is_occupied(cand) {
                        continue;
                    }
                    let d = sq_dist(ra.view(), cb.level2.row(b));
                    let better = match best {
                        None => true,
                        Some((bd, bs)) => d < bd || (d == bd && cand < bs),
                    };
                    if better {
                        best = Some((d, cand));
                    }
                }
            }
            if let Some((_, cand)) = best {
                out.set(item, cand);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{PortableRng, Stream};
    use crate::tokenizer::{assign, collision_report, residual_kmeans_fit};
    use ndarray::{array, Array2};

    #[test]
    fn resolves_a_single_conflict() {
        // Two items share (3,3); (3,2) is free and close by.
        let mut l1 = Array2::zeros((4, 2));
        let mut l2 = Array2::zeros((4, 2));
        for i in 0..4 {
            l1[[i, 0]] = i as f64;
            l2[[i, 1]] = 0.1 * i as f64;
        }
        let cb = Codebook { level1: l1, level2: l2 };
        let emb = FusedEmbeddingMatrix {
            vectors: array![[3.0, 0.3], [3.0, 0.26], [0.0, 0.0]],
            item_ids: vec![10, 11, 12],
        };
        let t = AssignmentTable::from_pairs([
            (10, SemanticId::new(3, 3)),
            (11, SemanticId::new(3, 3)),
            (12, SemanticId::new(0, 0)),
        ]);
        let before = collision_report(&t, 3);
        let after_t = greedy_reassign(&t, &emb, &cb, 50).unwrap();
        let after = collision_report(&after_t, 3);
        assert_eq!(after.unique_pairs, before.unique_pairs + 1);
        assert_eq!(after.conflicts + 2, before.conflicts);
        // item 10 sits exactly on the codeword and keeps it
        assert_eq!(after_t.get(10), Some(SemanticId::new(3, 3)));
        assert_eq!(after_t.get(11), Some(SemanticId::new(3, 2)));
    }

    #[test]
    fn fully_occupied_neighbourhood_keeps_collision() {
        let cb = Codebook {
            level1: array![[0.0]],
            level2: array![[0.0]],
        };
        let emb = FusedEmbeddingMatrix {
            vectors: array![[0.0], [0.1]],
            item_ids: vec![1, 2],
        };
        let t = AssignmentTable::from_pairs([(1, SemanticId::new(0, 0)), (2, SemanticId::new(0, 0))]);
        let out = greedy_reassign(&t, &emb, &cb, 5).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn never_increases_conflicts_on_random_instances() {
        for seed in 0..20 {
            let mut r = PortableRng::new(seed, Stream::Test);
            let v = Array2::from_shape_fn((120, 4), |_| r.normal());
            let emb = FusedEmbeddingMatrix::from_external((0..120).collect(), v).unwrap();
            let (cb, _) = residual_kmeans_fit(&emb, 6, 5, seed).unwrap();
            let t = assign(&emb, &cb).unwrap();
            let out = greedy_reassign(&t, &emb, &cb, 3).unwrap();
            assert_eq!(out.len(), t.len());
            let (a, b) = (collision_report(&t, 120), collision_report(&out, 120));
            assert!(b.conflict_rate <= a.conflict_rate);
            assert!(b.unique_pairs >= a.unique_pairs);
        }
    }

    #[test]
    fn zero_top_n_is_rejected() {
        let cb = Codebook {
            level1: array![[0.0]],
            level2: array![[0.0]],
        };
        let emb = FusedEmbeddingMatrix {
            vectors: array![[0.0]],
            item_ids: vec![1],
        };
        assert!(greedy_reassign(&AssignmentTable::default(), &emb, &cb, 0).is_err());
    }
}
