//! Few-shot example samplers, registered by the name used in `fewshot_config.sampler`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::dataset::Record;

use super::{FewShotConfig, TaskError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shortfall {
    pub requested: usize,
    pub available: usize,
}

/// Indices into the pool, in selection order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FewShotSelection {
    pub indices: Vec<usize>,
    pub shortfall: Option<Shortfall>,
}

impl FewShotSelection {
    pub fn records<'a>(&self, pool: &'a [Record]) -> Vec<&'a Record> {
        self.indices.iter().map(|&i| &pool[i]).collect()
    }
}

pub trait FewShotSampler: Send + Sync {
    fn name(&self) -> &'static str;

    fn select(&self, pool: &[Record], test_record: &Record, cfg: &FewShotConfig) -> Result<FewShotSelection, TaskError>;
}

/// Takes the first `num_fewshot` pool records in stored order, optionally
/// restricted to records sharing the test record's `filter_column` value.
#[derive(Debug, Default, Clone, Copy)]
pub struct FirstN;

impl FewShotSampler for FirstN {
    fn name(&self) -> &'static str {
        "first_n"
    }

    fn select(&self, pool: &[Record], test_record: &Record, cfg: &FewShotConfig) -> Result<FewShotSelection, TaskError> {
        let wanted = cfg.num_fewshot;
        if wanted == 0 {
            return Ok(FewShotSelection::default());
        }
        let key = match &cfg.filter_column {
            Some(col) => Some((
                col,
                test_record.get(col).ok_or_else(|| TaskError::MissingFilterColumn {
                    record_id: test_record.id.clone(),
                    field: col.clone(),
                })?,
            )),
            None => None,
        };

        let mut indices = Vec::with_capacity(wanted);
        for (i, r) in pool.iter().enumerate() {
            if indices.len() == wanted {
                break;
            }
            if let Some((col, want)) = key {
                let v = r.get(col).ok_or_else(|| TaskError::MissingFilterColumn {
                    record_id: r.id.clone(),
                    field: col.clone(),
                })?;
                if v != want {
                    continue;
                }
            }
            indices.push(i);
        }
        let shortfall = (indices.len() < wanted).then_some(Shortfall { requested: wanted, available: indices.len() });
        Ok(FewShotSelection { indices, shortfall })
    }
}

#[derive(Clone)]
pub struct SamplerRegistry {
    samplers: BTreeMap<&'static str, Arc<dyn FewShotSampler>>,
}

impl SamplerRegistry {
    pub fn empty() -> Self {
        Self { samplers: BTreeMap::new() }
    }

    pub fn register(&mut self, sampler: Arc<dyn FewShotSampler>) {
        self.samplers.insert(sampler.name(), sampler);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn FewShotSampler>> {
        self.samplers.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.samplers.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.samplers.keys().copied()
    }
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(FirstN));
        r
    }
}

impl std::fmt::Debug for SamplerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.samplers.keys()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Value;
    use proptest::prelude::*;

    fn rec(id: usize, subject: &str) -> Record {
        Record::new(format!("d{id}"), [("subject".to_string(), Value::from(subject))])
    }

    fn cfg(n: usize, col: Option<&str>) -> FewShotConfig {
        FewShotConfig { sampler: "first_n".into(), filter_column: col.map(str::to_string), num_fewshot: n }
    }

    #[test]
    fn first_five_matching_subjects() {
        let pool: Vec<_> = "mhmmhmmm".chars().enumerate().map(|(i, c)| rec(i, &c.to_string())).collect();
        let sel = FirstN.select(&pool, &rec(99, "m"), &cfg(5, Some("subject"))).unwrap();
        assert_eq!(sel.indices, [0, 2, 3, 5, 6]);
        assert_eq!(sel.shortfall, None);
    }

    #[test]
    fn zero_shot_is_empty() {
        let pool = vec![rec(0, "m")];
        let sel = FirstN.select(&pool, &rec(9, "m"), &cfg(0, Some("subject"))).unwrap();
        assert!(sel.indices.is_empty());
    }

    #[test]
    fn shortfall_is_reported() {
        let pool: Vec<_> = "hmhhm".chars().enumerate().map(|(i, c)| rec(i, &c.to_string())).collect();
        let sel = FirstN.select(&pool, &rec(9, "m"), &cfg(5, Some("subject"))).unwrap();
        assert_eq!(sel.indices, [1, 4]);
        assert_eq!(sel.shortfall, Some(Shortfall { requested: 5, available: 2 }));
    }

    #[test]
    fn missing_filter_column() {
        let pool = vec![rec(0, "m"), Record::new("bare", [])];
        let test = rec(9, "h");
        assert!(matches!(
            FirstN.select(&pool, &test, &cfg(2, Some("subject"))),
            Err(TaskError::MissingFilterColumn { record_id, .. }) if record_id == "bare"
        ));
        assert!(matches!(
            FirstN.select(&pool, &Record::new("t", []), &cfg(2, Some("subject"))),
            Err(TaskError::MissingFilterColumn { record_id, .. }) if record_id == "t"
        ));
    }

    #[test]
    fn registry_resolves_first_n() {
        let reg = SamplerRegistry::default();
        assert_eq!(reg.get("first_n").unwrap().name(), "first_n");
        assert!(reg.get("random").is_none());
    }

    proptest! {
        #[test]
        fn selection_is_ordered_subsequence(subjects in proptest::collection::vec(0u8..3, 0..40), n in 0usize..8, want in 0u8..3) {
            let pool: Vec<_> = subjects.iter().enumerate().map(|(i, s)| rec(i, &s.to_string())).collect();
            let sel = FirstN.select(&pool, &rec(999, &want.to_string()), &cfg(n, Some("subject"))).unwrap();
            prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(sel.indices.len() <= n);
            for &i in &sel.indices {
                prop_assert_eq!(subjects[i], want);
            }
            let matching = subjects.iter().filter(|&&s| s == want).count();
            prop_assert_eq!(sel.indices.len(), n.min(matching));
            prop_assert_eq!(sel.shortfall.is_some(), matching < n);
        }
    }
}
