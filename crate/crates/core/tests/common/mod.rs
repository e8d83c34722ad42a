#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::Duration;

use proctor_core::client::EndpointConfig;
use proctor_core::dataset::{Dataset, Record};
use proctor_core::taskdef::{parse_task_config, TaskConfig};
use proctor_mock::fixture::ScriptedTask;
use proctor_mock::MockServer;

pub fn endpoint(server: &MockServer) -> EndpointConfig {
    let mut ep = EndpointConfig::new(server.base_url(), "mock-model");
    ep.backoff_base = Duration::from_millis(1);
    ep
}

/// The scripted task as an in-memory task config plus dataset.
pub fn task_and_data(t: &ScriptedTask) -> (TaskConfig, BTreeMap<String, Dataset>) {
    let cfg = parse_task_config(&t.yaml()).unwrap();
    let records: Vec<Record> = t
        .records_jsonl()
        .lines()
        .enumerate()
        .map(|(i, l)| Record::from_json_line(l, "test", i + 1).unwrap())
        .collect();
    let ds = Dataset { name: t.name.clone(), subset: None, splits: BTreeMap::from([("test".to_string(), records)]) };
    (cfg, BTreeMap::from([(t.name.clone(), ds)]))
}
