use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::embedders::{embed_all, Embedder};
use super::metrics::{mrr, rank_of};
use crate::data::{cosine, tf_vector, BehaviorSequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalConfig {
    pub n_candidates: usize,
    /// Negatives must have TF cosine with the query above this.
    pub hard_threshold: f64,
    /// Length of the query and candidate windows.
    pub window_len: usize,
    /// Behaviors skipped between a user's query and target windows.
    pub gap: usize,
    pub max_instances: Option<usize>,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            n_candidates: 20,
            hard_threshold: 0.8,
            window_len: 64,
            gap: 16,
            max_instances: None,
            seed: 0,
        }
    }
}

/// A query window, its user's later window hidden among other users'
/// windows, and where it sits.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalInstance {
    pub user_id: u64,
    pub query: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub candidate_users: Vec<u64>,
    pub positive: usize,
    /// Negatives taken by top similarity because too few cleared the threshold.
    pub fallback: usize,
}

/// One instance per eligible user (length ≥ `2·window_len + gap`): query is
/// the first window, the positive is the window after the gap, negatives
/// are other users' target windows chosen as hard negatives by TF cosine.
pub fn build_retrieval_task(
    users: &[BehaviorSequence],
    vocab_size: usize,
    cfg: &RetrievalConfig,
) -> Result<Vec<RetrievalInstance>> {
    if cfg.n_candidates < 2 {
        return Err(Error::config(
            "n_candidates",
            "need the positive and at least one negative",
        ));
    }
    if cfg.window_len == 0 {
        return Err(Error::config("window_len", "must be at least 1"));
    }
    let l = cfg.window_len;
    let need = 2 * l + cfg.gap;
    let eligible: Vec<&BehaviorSequence> = users.iter().filter(|u| u.ids.len() >= need).collect();
    if eligible.len() < cfg.n_candidates {
        return Err(Error::Task(format!(
            "{} users have at least {need} behaviors; a pool of {} candidates needs that many",
            eligible.len(),
            cfg.n_candidates
        )));
    }
    let queries: Vec<&[u32]> = eligible.iter().map(|u| &u.ids[..l]).collect();
    let targets: Vec<&[u32]> = eligible.iter().map(|u| &u.ids[l + cfg.gap..need]).collect();
    let query_tf = queries
        .iter()
        .map(|q| tf_vector(q, vocab_size))
        .collect::<Result<Vec<_>>>()?;
    let target_tf = targets
        .iter()
        .map(|t| tf_vector(t, vocab_size))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(&mut rng);
    if let Some(max) = cfg.max_instances {
        order.truncate(max);
    }
    order.sort_unstable();

    let n_neg = cfg.n_candidates - 1;
    let mut instances = Vec::with_capacity(order.len());
    let mut fallback_instances = 0;
    for i in order {
        let mut sims: Vec<(usize, f64)> = (0..eligible.len())
            .filter(|&j| j != i)
            .map(|j| (j, cosine(&query_tf[i], &target_tf[j])))
            .collect();
        let hard: Vec<usize> = sims
            .iter()
            .filter(|&&(_, s)| s > cfg.hard_threshold)
            .map(|&(j, _)| j)
            .collect();
        let (mut negatives, fallback) = if hard.len() >= n_neg {
            (hard.choose_multiple(&mut rng, n_neg).copied().collect::<Vec<_>>(), 0)
        } else {
            // most similar first; index order breaks ties
            sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let picked: Vec<usize> = sims[..n_neg].iter().map(|&(j, _)| j).collect();
            (picked, n_neg - hard.len())
        };
        if fallback > 0 {
            fallback_instances += 1;
            log::debug!("user {}: {fallback} negatives below threshold", eligible[i].user_id);
        }
        negatives.shuffle(&mut rng);
        let positive = rng.gen_range(0..cfg.n_candidates);
        let mut order: Vec<usize> = negatives;
        order.insert(positive, i);
        instances.push(RetrievalInstance {
            user_id: eligible[i].user_id,
            query: queries[i].to_vec(),
            candidates: order.iter().map(|&j| targets[j].to_vec()).collect(),
            candidate_users: order.iter().map(|&j| eligible[j].user_id).collect(),
            positive,
            fallback,
        });
    }
    if fallback_instances > 0 {
        log::info!(
            "retrieval: {fallback_instances}/{} instances filled with top-similarity negatives",
            instances.len()
        );
    }
    Ok(instances)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub embedder: String,
    pub mrr: f64,
    pub ranks: Vec<usize>,
    pub fallback_instances: usize,
}

/// Ranks candidates by cosine with the query embedding and reports MRR.
pub fn run_retrieval(
    instances: &[RetrievalInstance],
    embedder: &dyn Embedder,
    workers: usize,
) -> Result<RetrievalReport> {
    // embed each distinct window once
    let mut index: HashMap<&[u32], usize> = HashMap::new();
    let mut unique: Vec<&[u32]> = Vec::new();
    for inst in instances {
        for w in std::iter::once(&inst.query).chain(&inst.candidates) {
            index.entry(w.as_slice()).or_insert_with(|| {
                unique.push(w.as_slice());
                unique.len() - 1
            });
        }
    }
    let vectors = embed_all(embedder, &unique, workers)?;
    let ranks: Vec<usize> = instances
        .iter()
        .map(|inst| {
            let q = &vectors[index[inst.query.as_slice()]];
            let scores: Vec<f64> = inst
                .candidates
                .iter()
                .map(|c| cosine(q, &vectors[index[c.as_slice()]]))
                .collect();
            rank_of(&scores, inst.positive)
        })
        .collect();
    Ok(RetrievalReport {
        embedder: embedder.name(),
        mrr: mrr(&ranks)?,
        ranks,
        fallback_instances: instances.iter().filter(|i| i.fallback > 0).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::TfEmbedder;

    const V: usize = 40;

    fn users(n: usize, len: usize) -> Vec<BehaviorSequence> {
        (0..n as u64)
            .map(|u| BehaviorSequence {
                user_id: u,
                // each user draws from its own three behaviors
                ids: (0..len as u64)
                    .map(|t| (2 + 3 * u + (t * (u + 1)) % 3) as u32)
                    .collect(),
            })
            .collect()
    }

    fn cfg() -> RetrievalConfig {
        RetrievalConfig {
            n_candidates: 5,
            window_len: 8,
            gap: 2,
            ..RetrievalConfig::default()
        }
    }

    #[test]
    fn instances_are_well_formed() {
        let us = users(12, 18);
        let inst = build_retrieval_task(&us, V, &cfg()).unwrap();
        assert_eq!(inst.len(), 12);
        for i in &inst {
            assert_eq!(i.candidates.len(), 5);
            assert_eq!(i.candidate_users[i.positive], i.user_id);
            let others = i.candidate_users.iter().filter(|&&u| u == i.user_id).count();
            assert_eq!(others, 1);
            let u = &us[i.user_id as usize];
            assert_eq!(i.query, u.ids[..8]);
            assert_eq!(i.candidates[i.positive], u.ids[10..18]);
        }
    }

    #[test]
    fn too_few_users_is_an_error() {
        assert!(matches!(
            build_retrieval_task(&users(4, 18), V, &cfg()),
            Err(Error::Task(_))
        ));
        assert!(matches!(
            build_retrieval_task(&users(12, 17), V, &cfg()),
            Err(Error::Task(_))
        ));
    }

    #[test]
    fn positive_equal_to_query_ranks_first() {
        let us = users(12, 18);
        let mut inst = build_retrieval_task(
            &us,
            V,
            &RetrievalConfig {
                hard_threshold: 0.0,
                ..cfg()
            },
        )
        .unwrap();
        for i in &mut inst {
            i.candidates[i.positive] = i.query.clone();
        }
        let r = run_retrieval(&inst, &TfEmbedder { vocab_size: V }, 1).unwrap();
        assert!(r.ranks.iter().all(|&k| k == 1));
        assert_eq!(r.mrr, 1.0);
    }

    #[test]
    fn build_is_deterministic() {
        let us = users(12, 18);
        assert_eq!(
            build_retrieval_task(&us, V, &cfg()).unwrap(),
            build_retrieval_task(&us, V, &cfg()).unwrap()
        );
    }
}
