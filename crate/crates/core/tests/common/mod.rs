#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeSet;

use csmt_core::codec::{TransformSalt, UserSalt};
use csmt_core::phr::PhrStore;
use csmt_core::proofsys::{backend_seed, DEFAULT_LAMBDA};
use csmt_core::prover::{CohortSpec, Cro, TreeSpec};
use csmt_core::stats::PipelineParams;
use csmt_core::study::{build_trees, BuiltTree, TreePlan, DEFAULT_ROTATIONS};
use csmt_core::transforms::{AggregatorSpec, TransformSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub phr: PhrStore,
    pub cro: Cro,
    pub tree: BuiltTree,
    pub tree_id: String,
    pub included: BTreeSet<String>,
    pub excluded: BTreeSet<String>,
}

/// `n` PHR users with scalar data; roughly half included in one tree.
pub fn fixture(seed: u64, n: usize, height: u16, scale: u8) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phr = PhrStore::new();
    let mut users = Vec::new();
    for i in 0..n {
        let id = format!("s{seed}-u{i:03}");
        let datum = vec![rng.random_range(0..60) as f64];
        phr.phr_register(&id, datum, UserSalt::random(&mut rng), TransformSalt::random(&mut rng)).unwrap();
        users.push(id);
    }
    let included: BTreeSet<String> = users.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
    let excluded = users.iter().filter(|u| !included.contains(*u)).cloned().collect();
    let tree_id = format!("study-{seed}/t");
    let plan = TreePlan {
        spec: TreeSpec {
            tree_id: tree_id.clone(),
            transform: TransformSpec::bincount("bins", vec![0.0, 12.0, 24.0, 36.0, 48.0, 60.0], scale).unwrap(),
            aggregator: AggregatorSpec::sum("sum"),
            height,
        },
        cohort: CohortSpec { all_users: users, included: included.clone() },
    };
    let cro = Cro::new();
    let seed_bytes = backend_seed(DEFAULT_LAMBDA, b"fixture").unwrap();
    let tree = build_trees(&cro, &mut phr, &[plan], DEFAULT_LAMBDA, &seed_bytes, DEFAULT_ROTATIONS).unwrap().remove(0);
    Fixture { phr, cro, tree, tree_id, included, excluded }
}

pub fn params(height: u16) -> PipelineParams {
    PipelineParams {
        height,
        lambda: DEFAULT_LAMBDA,
        seed: backend_seed(DEFAULT_LAMBDA, b"pipeline-tests").unwrap(),
        max_rotations: DEFAULT_ROTATIONS,
    }
}

#[allow(unused_imports)]
pub use oracle::*;
