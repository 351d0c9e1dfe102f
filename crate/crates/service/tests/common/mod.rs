#![allow(dead_code)]

use csmt_core::phr::{generate_hd_cohorts, generate_logistic_records, salted_records, PhrStore};
use csmt_service::server::ServerHandle;
use csmt_service::service::ServiceConfig;

pub const TRUE_BETA: [f64; 5] = [-0.3, 1.2, -0.8, 0.5, 0.0];

pub struct Cohorts {
    pub healthy: Vec<String>,
    pub hd: Vec<String>,
    pub logistic: Vec<(String, Vec<f64>)>,
}

/// PHR holding the 50 + 50 CAG cohorts and 200 logistic records.
pub fn phr(seed: u64) -> (PhrStore, Cohorts) {
    let c = generate_hd_cohorts(seed);
    let mut rows: Vec<(String, Vec<f64>)> = c.healthy.iter().chain(&c.hd).map(|r| (r.user_id.clone(), vec![f64::from(r.cag)])).collect();
    let logistic = generate_logistic_records(seed, 200, &TRUE_BETA, "lg");
    rows.extend(logistic.iter().cloned());
    let mut phr = PhrStore::new();
    for rec in salted_records(rows.iter().map(|(id, d)| (id.as_str(), d.clone()))) {
        phr.register_record(rec).unwrap();
    }
    let cohorts = Cohorts {
        healthy: c.healthy.iter().map(|r| r.user_id.clone()).collect(),
        hd: c.hd.iter().map(|r| r.user_id.clone()).collect(),
        logistic,
    };
    (phr, cohorts)
}

pub fn start(phr: PhrStore) -> ServerHandle {
    let config = ServiceConfig { workers: 4, ..ServiceConfig::default() };
    ServerHandle::start(config, phr, "127.0.0.1:0".parse().unwrap()).unwrap()
}
