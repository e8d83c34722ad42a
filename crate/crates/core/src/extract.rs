//! Answer extraction: turning a next-token distribution into a chosen label.
//!
//! Strategies implement [`AnswerExtractor`] and are looked up by name in an
//! [`ExtractorRegistry`]; runs select one by name (default `filtered_top_k`).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::client::TokenCandidate;

pub const DEFAULT_EXTRACTOR: &str = "filtered_top_k";

/// Lowercase after trimming surrounding whitespace.
pub fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

pub trait AnswerExtractor: Send + Sync {
    fn name(&self) -> &'static str;

    /// `candidates` arrive most probable first. Returns one of `valid_labels`
    /// (verbatim) or `None` when no candidate qualifies.
    fn extract(&self, candidates: &[TokenCandidate], valid_labels: &[String]) -> Option<String>;
}

/// Keeps only candidates whose normalized token equals a normalized label and
/// answers with the most probable survivor. Only the candidates handed in are
/// ever considered; the caller decides k.
#[derive(Debug, Default, Clone, Copy)]
pub struct FilteredTopK;

impl AnswerExtractor for FilteredTopK {
    fn name(&self) -> &'static str {
        DEFAULT_EXTRACTOR
    }

    fn extract(&self, candidates: &[TokenCandidate], valid_labels: &[String]) -> Option<String> {
        let labels: Vec<(String, &String)> = valid_labels.iter().map(|l| (normalize(l), l)).collect();
        let mut best: Option<(f64, &String)> = None;
        for c in candidates {
            let norm = normalize(&c.token);
            let Some((_, label)) = labels.iter().find(|(n, _)| *n == norm) else { continue };
            // Strictly greater: on equal probability the earlier candidate stays.
            if best.is_none_or(|(p, _)| c.prob > p) {
                best = Some((c.prob, label));
            }
        }
        best.map(|(_, l)| l.clone())
    }
}

#[derive(Clone)]
pub struct ExtractorRegistry {
    entries: BTreeMap<&'static str, Arc<dyn AnswerExtractor>>,
}

impl ExtractorRegistry {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn register(&mut self, extractor: Arc<dyn AnswerExtractor>) {
        self.entries.insert(extractor.name(), extractor);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn AnswerExtractor>> {
        self.entries.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(FilteredTopK));
        r
    }
}

impl std::fmt::Debug for ExtractorRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels() -> Vec<String> {
        ["A", "B", "C", "D"].map(String::from).to_vec()
    }

    fn cands(pairs: &[(&str, f64)]) -> Vec<TokenCandidate> {
        pairs.iter().map(|(t, p)| TokenCandidate::new(*t, *p)).collect()
    }

    /// Independent check: walk candidates in probability order and stop at the
    /// first whose normalized form matches a normalized label.
    fn oracle(candidates: &[TokenCandidate], labels: &[String]) -> Option<String> {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| candidates[b].prob.partial_cmp(&candidates[a].prob).unwrap().then(a.cmp(&b)));
        for i in order {
            let tok = candidates[i].token.trim().to_lowercase();
            for l in labels {
                if l.trim().to_lowercase() == tok {
                    return Some(l.clone());
                }
            }
        }
        None
    }

    #[test]
    fn modal_token_already_valid() {
        let c = cands(&[("A", 0.9), ("B", 0.05), ("The", 0.03), ("C", 0.01), ("D", 0.01)]);
        assert_eq!(FilteredTopK.extract(&c, &labels()).as_deref(), Some("A"));
    }

    #[test]
    fn skips_invalid_modal_token() {
        let c = cands(&[("The", 0.5), (" b", 0.2), ("C", 0.15), ("?", 0.1), ("d", 0.05)]);
        assert_eq!(FilteredTopK.extract(&c, &labels()).as_deref(), Some("B"));
        assert_eq!(oracle(&c, &labels()).as_deref(), Some("B"));
    }

    #[test]
    fn no_valid_token() {
        let c = cands(&[("The", 0.6), ("correct", 0.2), ("answer", 0.1), ("is", 0.06), (":", 0.04)]);
        assert_eq!(FilteredTopK.extract(&c, &labels()), None);
    }

    #[test]
    fn no_prefix_matching() {
        let c = cands(&[("A.", 0.7), (" a)", 0.2), ("Answer", 0.1)]);
        assert_eq!(FilteredTopK.extract(&c, &labels()), None);
    }

    #[test]
    fn tie_goes_to_endpoint_order() {
        let c = cands(&[(" C", 0.4), ("A", 0.4), ("B", 0.2)]);
        assert_eq!(FilteredTopK.extract(&c, &labels()).as_deref(), Some("C"));
    }

    #[test]
    fn registry_default() {
        let r = ExtractorRegistry::default();
        assert_eq!(r.names().collect::<Vec<_>>(), [DEFAULT_EXTRACTOR]);
    }

    fn token() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("A".to_string()),
            Just(" b".to_string()),
            Just("C ".to_string()),
            Just("\td".to_string()),
            Just("The".to_string()),
            Just("answer".to_string()),
            Just(" ".to_string()),
            "[a-zA-Z ]{0,3}",
        ]
    }

    fn sorted_candidates() -> impl Strategy<Value = Vec<TokenCandidate>> {
        proptest::collection::vec((token(), 0.0f64..1.0), 0..6).prop_map(|mut v| {
            v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            v.into_iter().map(|(t, p)| TokenCandidate::new(t, p)).collect()
        })
    }

    proptest! {
        #[test]
        fn agrees_with_oracle(c in sorted_candidates()) {
            prop_assert_eq!(FilteredTopK.extract(&c, &labels()), oracle(&c, &labels()));
        }

        #[test]
        fn result_is_always_a_valid_label(c in sorted_candidates()) {
            if let Some(l) = FilteredTopK.extract(&c, &labels()) {
                prop_assert!(labels().contains(&l));
            }
        }

        #[test]
        fn invariant_under_positive_rescaling(c in sorted_candidates(), scale in 0.001f64..1000.0) {
            let scaled: Vec<_> = c.iter().map(|t| TokenCandidate::new(t.token.clone(), t.prob * scale)).collect();
            prop_assert_eq!(FilteredTopK.extract(&c, &labels()), FilteredTopK.extract(&scaled, &labels()));
        }
    }
}
