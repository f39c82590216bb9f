#![allow(dead_code)]

use neil_core::corpus::{generate_corpus, Corpus, CorpusItem, GenConfig};
use neil_core::learning::expand_gold;
use std::sync::Arc;

use neil_core::policy::{argmax, train, Policy, QuestionContext, TrainConfig};
use neil_core::sql::{SqlQuery, Table};

pub fn small_corpus(seed: u64) -> Corpus {
    let cfg = GenConfig { num_tables: 20, num_items: 400, ..GenConfig::default() };
    generate_corpus(&cfg, seed).unwrap()
}

/// A moderately trained policy: fit on `items` with a short budget so that
/// some decisions stay uncertain or wrong.
pub fn weak_policy(corpus: &Corpus, items: &[CorpusItem], epochs: usize) -> Policy {
    let tables = corpus.table_index();
    let (data, _) = expand_gold(items, &tables).unwrap();
    let cfg = TrainConfig { max_epochs: epochs, ..TrainConfig::default() };
    train(&Policy::zeros(), &data, &cfg, None).unwrap().policy
}

/// Perceptron passes with step `step` over the gold path until greedy
/// decoding reproduces it.
pub fn hand_set(gold: &SqlQuery, table: &Table, tokens: Arc<[String]>, step: f64) -> Policy {
    let ctx = QuestionContext::new(&tokens, table);
    let traj = gold.to_trajectory(tokens.clone(), table.id.as_str().into());
    let mut p = Policy::zeros();
    for _ in 0..50 {
        let mut clean = true;
        for (s, a) in traj.states.iter().zip(&traj.actions) {
            let feats = ctx.featurize(s).unwrap();
            let scores: Vec<f64> = feats.iter().map(|(_, f)| p.score(f)).collect();
            let best = argmax(&scores).unwrap();
            if &feats[best].0 != a {
                clean = false;
                let gold_f = &feats.iter().find(|(x, _)| x == a).unwrap().1;
                for &(i, v) in &gold_f.entries {
                    p.weights[i as usize] += step * v;
                }
                for &(i, v) in &feats[best].1.entries {
                    p.weights[i as usize] -= step * v;
                }
            }
        }
        if clean {
            break;
        }
    }
    p
}
