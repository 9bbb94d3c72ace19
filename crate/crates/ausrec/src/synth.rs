//! Synthetic datasets with planted preference structure, used by smoke and
//! acceptance tests.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::sparse::{Dataset, SparseMatrix};
use crate::Result;

/// Builds a dataset whose users and items split into `blocks` aligned
/// groups: each user interacts with items of their own block (plus a little
/// cross-block noise) and befriends users of their own block.
///
/// A recommender that learns anything at all should rank unseen same-block
/// items far above the random baseline.
pub fn planted_blocks(
    users: usize,
    items: usize,
    blocks: usize,
    interactions_per_user: usize,
    friends_per_user: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    assert!(blocks >= 1 && users >= blocks && items >= blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_block = |u: usize| u * blocks / users;
    let block_items = |b: usize| {
        let lo = b * items / blocks;
        let hi = (b + 1) * items / blocks;
        lo..hi
    };
    let block_users = |b: usize| {
        let lo = b * users / blocks;
        let hi = (b + 1) * users / blocks;
        lo..hi
    };

    let mut r_pairs = Vec::new();
    for u in 0..users {
        let own = block_items(user_block(u));
        for _ in 0..interactions_per_user {
            let v = if rng.random::<f64>() < noise {
                rng.random_range(0..items)
            } else {
                rng.random_range(own.clone())
            };
            r_pairs.push((u, v));
        }
    }

    let mut s_pairs = Vec::new();
    for u in 0..users {
        let own = block_users(user_block(u));
        for _ in 0..friends_per_user {
            let f = rng.random_range(own.clone());
            if f != u {
                s_pairs.push((u, f));
                s_pairs.push((f, u));
            }
        }
    }

    Dataset::new(
        users,
        items,
        SparseMatrix::from_pairs(users, items, &r_pairs)?,
        SparseMatrix::from_pairs(users, users, &s_pairs)?,
    )
}
