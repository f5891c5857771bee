use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

/// How impressions are divided into train and eval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitPolicy {
    /// Impressions with `event_time > cut` go to eval.
    TimeCut { cut: i64 },
    /// Cut placed at the `1 - eval_fraction` quantile of impression times.
    TimeFraction { eval_fraction: f64 },
    /// A seeded random subset of users goes to eval.
    UserDisjoint { eval_fraction: f64, seed: u64 },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::TimeFraction { eval_fraction: 0.2 }
    }
}

/// Splits the impressions of `corpus`; items and histories are shared by both sides.
pub fn split(corpus: &Corpus, policy: &SplitPolicy) -> Result<(Corpus, Corpus)> {
    let imps = corpus.impressions();
    let in_eval: Vec<bool> = match policy {
        SplitPolicy::TimeCut { cut } => imps.iter().map(|i| i.event_time > *cut).collect(),
        SplitPolicy::TimeFraction { eval_fraction } => {
            check_fraction(*eval_fraction)?;
            if imps.is_empty() {
                return Err(Error::Config("cannot split an empty impression set".into()));
            }
            let mut times: Vec<i64> = imps.iter().map(|i| i.event_time).collect();
            times.sort_unstable();
            let keep = ((1.0 - eval_fraction) * times.len() as f64).round() as usize;
            let cut = times[keep.clamp(1, times.len()) - 1];
            imps.iter().map(|i| i.event_time > cut).collect()
        }
        SplitPolicy::UserDisjoint { eval_fraction, seed } => {
            check_fraction(*eval_fraction)?;
            let mut users: Vec<u64> = imps
                .iter()
                .map(|i| i.user_id)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            users.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let n_eval = (eval_fraction * users.len() as f64).round() as usize;
            let eval_users: BTreeSet<u64> = users[..n_eval].iter().copied().collect();
            imps.iter().map(|i| eval_users.contains(&i.user_id)).collect()
        }
    };

    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (imp, e) in imps.iter().zip(&in_eval) {
        if *e {
            eval.push(imp.clone());
        } else {
            train.push(imp.clone());
        }
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Config(format!(
            "split leaves an empty side (train {}, eval {})",
            train.len(),
            eval.len()
        )));
    }
    Ok((corpus.with_impressions(train)?, corpus.with_impressions(eval)?))
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("eval_fraction {f} must be in (0, 1)")))
    }
}
