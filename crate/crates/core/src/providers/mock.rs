use rand::seq::IndexedRandom;
use rand::Rng;

use super::embed::tokenize;
use super::{AnnotationRequest, Annotator, ProviderError, Result};
use crate::graph::class_keyword;
use crate::seed;

/// Offline annotator for synthetic graphs. The completion names the true
/// class and lists some of its keywords, followed by distractor tokens drawn
/// from the target's own text. Output depends only on the target texts,
/// their labels and the seed.
#[derive(Clone, Debug)]
pub struct MockAnnotator {
    pub seed: u64,
    /// Size of each class's keyword vocabulary in the synthetic generator.
    pub keywords_per_class: usize,
    /// Class keywords mentioned per labeled node.
    pub keywords: usize,
    /// Tokens copied from the text as distractors.
    pub distractors: usize,
}

impl MockAnnotator {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            keywords_per_class: 20,
            keywords: 6,
            distractors: 3,
        }
    }

    fn describe(&self, text: &str, label: Option<usize>) -> String {
        let mut rng = seed::rng(self.seed, &format!("mock/{label:?}/{text}"));
        let own_prefix = label.map(|c| format!("topic{c}term"));
        let pool: Vec<String> = tokenize(text)
            .filter(|t| own_prefix.as_ref().is_none_or(|p| !t.starts_with(p.as_str())))
            .collect();
        let distractors: Vec<&str> = (0..self.distractors)
            .filter_map(|_| pool.choose(&mut rng).map(String::as_str))
            .collect();
        let mut out = match label {
            Some(c) => {
                let terms: Vec<String> = (0..self.keywords)
                    .map(|_| class_keyword(c, rng.random_range(0..self.keywords_per_class.max(1))))
                    .collect();
                format!("Category: topic{c}. Key terms: {}.", terms.join(" "))
            }
            None => "Category: unclear.".to_string(),
        };
        if !distractors.is_empty() {
            out.push_str(&format!(" Also mentions: {}.", distractors.join(" ")));
        }
        out
    }
}

impl Annotator for MockAnnotator {
    fn provider_id(&self) -> String {
        format!("mock-{}", self.seed)
    }

    fn complete(&self, request: &AnnotationRequest<'_>) -> Result<String> {
        if request.texts.len() != request.labels.len() || request.texts.is_empty() {
            return Err(ProviderError::Config("mock needs one label per target node".into()));
        }
        let parts: Vec<String> = request
            .texts
            .iter()
            .zip(&request.labels)
            .map(|(t, l)| self.describe(t, *l))
            .collect();
        Ok(if parts.len() == 1 {
            parts.into_iter().next().unwrap_or_default()
        } else {
            format!("The two papers are related. {}", parts.join(" "))
        })
    }
}
