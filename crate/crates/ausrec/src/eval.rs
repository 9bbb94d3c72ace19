//! Top-K ranking evaluation over the test split: Recall@K and NDCG@K with
//! binary relevance.
//!
//! Scoring runs against a frozen embedding snapshot and parallelizes over
//! users; aggregation order is fixed, so results are deterministic for any
//! thread count.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::encoder::PropagatedEmbeddings;
use crate::{Error, Result};

/// Per-user rankings (top `k_max` items) and relevant sets for every user
/// with at least one test item.
#[derive(Debug, Clone)]
pub struct RankingResult {
    k_max: usize,
    /// `(user, top items best-first, relevant test items)`.
    per_user: Vec<(usize, Vec<usize>, Vec<usize>)>,
}

impl RankingResult {
    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn users_evaluated(&self) -> usize {
        self.per_user.len()
    }

    pub fn top_items(&self, user: usize) -> Option<&[usize]> {
        self.per_user
            .iter()
            .find(|(u, _, _)| *u == user)
            .map(|(_, top, _)| top.as_slice())
    }
}

/// Ranks all items for every user with test items. Each user's training
/// items are excluded from their candidate list; ties break toward the
/// smaller item index.
pub fn rank_all(
    p: &PropagatedEmbeddings,
    train_items: &HashMap<usize, Vec<usize>>,
    test_items: &HashMap<usize, Vec<usize>>,
    k_max: usize,
) -> Result<RankingResult> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let n = p.num_items();
    let mut users: Vec<usize> = test_items
        .iter()
        .filter(|(_, items)| !items.is_empty())
        .map(|(&u, _)| u)
        .collect();
    users.sort_unstable();

    let per_user: Vec<(usize, Vec<usize>, Vec<usize>)> = users
        .par_iter()
        .map(|&u| {
            let mut scores: Vec<f64> = (0..n)
                .map(|v| p.score_user_item(u, v).expect("indices in range"))
                .collect();
            if let Some(mask) = train_items.get(&u) {
                for &v in mask {
                    scores[v] = f64::NEG_INFINITY;
                }
            }
            let mut order: Vec<usize> = (0..n).collect();
            let k = k_max.min(n);
            order.select_nth_unstable_by(k.saturating_sub(1), |&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            order.truncate(k);
            order.sort_unstable_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            let mut relevant = test_items[&u].clone();
            relevant.sort_unstable();
            (u, order, relevant)
        })
        .collect();

    Ok(RankingResult { k_max, per_user })
}

/// Mean over evaluated users of `|top-K ∩ relevant| / |relevant|`.
pub fn recall_at_k(r: &RankingResult, k: usize) -> Result<f64> {
    check_k(r, k)?;
    if r.per_user.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = r
        .per_user
        .iter()
        .map(|(_, top, relevant)| {
            let hits = top
                .iter()
                .take(k)
                .filter(|v| relevant.binary_search(v).is_ok())
                .count();
            hits as f64 / relevant.len() as f64
        })
        .sum();
    Ok(total / r.per_user.len() as f64)
}

/// Mean over evaluated users of `DCG@K / IDCG@K` with binary relevance:
/// a hit at 1-based position `p` contributes `1 / log2(p + 1)`.
pub fn ndcg_at_k(r: &RankingResult, k: usize) -> Result<f64> {
    check_k(r, k)?;
    if r.per_user.is_empty() {
        return Ok(0.0);
    }
    let discount = |pos: usize| 1.0 / ((pos as f64) + 1.0).log2();
    let total: f64 = r
        .per_user
        .iter()
        .map(|(_, top, relevant)| {
            let dcg: f64 = top
                .iter()
                .take(k)
                .enumerate()
                .filter(|(_, v)| relevant.binary_search(v).is_ok())
                .map(|(i, _)| discount(i + 1))
                .sum();
            let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
            dcg / ideal
        })
        .sum();
    Ok(total / r.per_user.len() as f64)
}

fn check_k(r: &RankingResult, k: usize) -> Result<()> {
    if k == 0 || k > r.k_max {
        return Err(Error::InvalidArgument(format!(
            "K = {k} outside 1..={}",
            r.k_max
        )));
    }
    Ok(())
}
