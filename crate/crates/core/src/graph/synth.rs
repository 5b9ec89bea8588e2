use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GraphError, Result, Split, Tag};
use crate::seed;

/// Token vocabulary for synthetic node texts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    /// Distinct topic keywords owned by each class.
    pub keywords_per_class: usize,
    /// Size of the shared noise vocabulary.
    pub noise_words: usize,
    pub tokens_per_node: usize,
    /// Probability that a token is a topic keyword rather than noise.
    pub keyword_rate: f64,
    /// Probability that a topic keyword is drawn from a random other class.
    pub keyword_confusion: f64,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            keywords_per_class: 20,
            noise_words: 300,
            tokens_per_node: 16,
            keyword_rate: 0.3,
            keyword_confusion: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub nodes_per_class: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub vocab: VocabSpec,
    /// Keep a seeded random subset of at most this many edges.
    pub edge_cap: Option<usize>,
    pub seed: u64,
}

pub fn class_keyword(class: usize, j: usize) -> String {
    format!("topic{class}term{j}")
}

fn noise_word(j: usize) -> String {
    format!("word{j}")
}

/// Stochastic block model over contiguous class blocks. Each node's text is a
/// bag of class keywords and shared noise tokens; the split is stratified
/// 60/20/20 per class.
pub fn synth_tag(spec: &SynthSpec) -> Result<Tag> {
    let (p_in, p_out) = (spec.p_in, spec.p_out);
    if !(0.0 <= p_out && p_out < p_in && p_in <= 1.0) {
        return Err(GraphError::Probabilities { p_in, p_out });
    }
    let v = &spec.vocab;
    if spec.classes == 0 || spec.nodes_per_class == 0 || v.keywords_per_class == 0 || v.noise_words == 0 {
        return Err(GraphError::Invalid("synthetic graph needs classes, nodes and vocabulary".into()));
    }
    if !(0.0..=1.0).contains(&v.keyword_rate) || !(0.0..=1.0).contains(&v.keyword_confusion) {
        return Err(GraphError::Invalid("vocabulary rates must lie in [0, 1]".into()));
    }
    let n = spec.classes * spec.nodes_per_class;
    let class_of = |i: usize| i / spec.nodes_per_class;

    let mut text_rng = seed::rng(spec.seed, "synth/text");
    let texts: Vec<String> = (0..n)
        .map(|i| {
            (0..v.tokens_per_node)
                .map(|_| {
                    if text_rng.random::<f64>() < v.keyword_rate {
                        let mut c = class_of(i);
                        if spec.classes > 1 && text_rng.random::<f64>() < v.keyword_confusion {
                            let shift = text_rng.random_range(1..spec.classes);
                            c = (c + shift) % spec.classes;
                        }
                        class_keyword(c, text_rng.random_range(0..v.keywords_per_class))
                    } else {
                        noise_word(text_rng.random_range(0..v.noise_words))
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();

    let mut edge_rng = seed::rng(spec.seed, "synth/edges");
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if class_of(i) == class_of(j) { p_in } else { p_out };
            if edge_rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    if let Some(cap) = spec.edge_cap {
        if edges.len() > cap {
            edges.shuffle(&mut seed::rng(spec.seed, "synth/edge_cap"));
            edges.truncate(cap);
            edges.sort_unstable();
        }
    }

    let mut split_rng = seed::rng(spec.seed, "synth/split");
    let mut splits = vec![None; n];
    for c in 0..spec.classes {
        let mut members: Vec<usize> = (c * spec.nodes_per_class..(c + 1) * spec.nodes_per_class).collect();
        members.shuffle(&mut split_rng);
        let n_train = members.len() * 3 / 5;
        let n_valid = members.len() / 5;
        for (k, &node) in members.iter().enumerate() {
            splits[node] = Some(if k < n_train {
                Split::Train
            } else if k < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            });
        }
    }
    let labels = (0..n).map(|i| Some(class_of(i))).collect();
    Tag::new(texts, &edges, labels, spec.classes, splits)
}
