//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use csmt_core::codec::{hash_nonce, Digest256, TransformSalt, UserSalt};
use csmt_core::phr::{generate_hd_cohorts, generate_logistic_records, salted_records, PhrStore};
use csmt_core::proofsys::{backend_seed, DEFAULT_LAMBDA};
use csmt_core::prover::{CohortSpec, Cro, CsmtProofSet, TreeSpec};
use csmt_core::stats::{hd_ks_edges, StatisticResult};
use csmt_core::study::{audit_bundle, build_trees, BuiltTree, TreePlan};
use csmt_core::transforms::{AggregatorSpec, TransformSpec};
use csmt_core::verifier::{ver_inc, verify_data_exclusivity, AuditBundle, AuditResult, InclusionVerdict, Stage, SPURIOUS_LEAF};
use csmt_service::api::{JobRequest, PipelineOutcome};
use csmt_service::service::{Service, ServiceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCALES: [u8; 4] = [8, 10, 12, 14];
const HEIGHTS: [u16; 3] = [8, 12, 16];
const NONCE: &[u8] = b"acceptance-nonce";
const ROTATIONS: usize = 256;
const TRUE_BETA: [f64; 5] = [-0.3, 1.2, -0.8, 0.5, 0.0];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn criterion(n: u8, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (pass, detail) = match outcome {
        Ok(v) => (v.pass, v.detail),
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        }
    };
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let limit_text = limit.map_or("no limit".to_string(), |l| format!("limit {}s", l.as_secs()));
    let timing = if in_time { String::new() } else { " TIME LIMIT EXCEEDED".to_string() };
    let ok = pass && in_time;
    println!("{} criterion {n} ({name}): {detail} [{:.2}s, {limit_text}]{timing}", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    ok
}

fn seed_bytes() -> Vec<u8> {
    backend_seed(DEFAULT_LAMBDA, b"acceptance").unwrap()
}

fn register(phr: &mut PhrStore, rng: &mut ChaCha8Rng, id: &str, datum: Vec<f64>) {
    phr.phr_register(id, datum, UserSalt::random(rng), TransformSalt::random(rng)).unwrap();
}

fn build_one(phr: &mut PhrStore, spec: TreeSpec, all: Vec<String>, included: BTreeSet<String>) -> (Cro, BuiltTree) {
    let cro = Cro::new();
    let plan = TreePlan { spec, cohort: CohortSpec { all_users: all, included } };
    let built = build_trees(&cro, phr, &[plan], DEFAULT_LAMBDA, &seed_bytes(), ROTATIONS).unwrap().remove(0);
    (cro, built)
}

fn bin_of(x: f64, edges: &[f64]) -> usize {
    edges.windows(2).position(|w| w[0] <= x && x < w[1]).expect("in range")
}

// 1. root equals the flat sum over occupied leaves
fn c1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let edges = hd_ks_edges();
    let mut ok = 0;
    for trial in 0..200 {
        let height = HEIGHTS[trial % 3];
        let scale = SCALES[rng.random_range(0..4)];
        let n = rng.random_range(1..=64usize);
        let bincount = trial % 2 == 0;
        let mut phr = PhrStore::new();
        let mut data = BTreeMap::new();
        for i in 0..n {
            let id = format!("u{i:02}");
            let datum = if bincount {
                vec![f64::from(rng.random_range(0..132u32))]
            } else {
                // multiples of 1/16 are exact at every scale
                vec![f64::from(rng.random_range(-800..800i32)) / 16.0, f64::from(rng.random_range(0..400i32)) / 16.0]
            };
            register(&mut phr, &mut rng, &id, datum.clone());
            data.insert(id, datum);
        }
        let included: BTreeSet<String> = data.keys().filter(|_| rng.random_bool(0.7)).cloned().collect();
        let transform = if bincount {
            TransformSpec::bincount("bins", edges.clone(), scale).unwrap()
        } else {
            TransformSpec::identity("id", 2, scale).unwrap()
        };
        let spec = TreeSpec { tree_id: format!("c1-{trial}"), transform, aggregator: AggregatorSpec::sum("sum"), height };
        let (cro, built) = build_one(&mut phr, spec, data.keys().cloned().collect(), included.clone());

        let expected: Vec<i64> = if bincount {
            let mut counts = vec![0i64; edges.len() - 1];
            for u in &included {
                counts[bin_of(data[u][0], &edges)] += 1;
            }
            counts.into_iter().map(|c| c << scale).collect()
        } else {
            (0..2).map(|d| included.iter().map(|u| (data[u][d] * f64::from(1u32 << scale)) as i64).sum()).collect()
        };
        let tree = cro.tree(&format!("c1-{trial}")).unwrap();
        let mut flat = vec![0i64; expected.len()];
        for (_, leaf) in tree.occupied() {
            for (f, p) in flat.iter_mut().zip(&leaf.payload) {
                *f += p.raw;
            }
        }
        let root: Vec<i64> = built.outcome.root.payload().iter().map(|f| f.raw).collect();
        if root == expected && flat == expected && tree.leaf_count() == included.len() {
            ok += 1;
        }
    }
    verdict(ok == 200, format!("{ok}/200 randomized cohorts match the flat sum exactly"))
}

fn proof_check(cro: &Cro, tree_id: &str, user: &str, set: &CsmtProofSet) -> InclusionVerdict {
    let p = cro.publication(tree_id).unwrap();
    let (h_raw, h_tau, h_leaf) = cro.user_digests(tree_id, user).unwrap();
    ver_inc(&h_raw, &h_tau, &h_leaf, set, &p.root, &hash_nonce(NONCE), &p.vk_ltr, &p.vk_mrp, &p.params.default_leaf).verdict
}

// 2. inclusion and exclusion completeness
fn c2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut total, mut ok) = (0usize, 0usize);
    for study in 0..50 {
        let height = HEIGHTS[study % 3];
        let n = rng.random_range(8..=64usize);
        let mut phr = PhrStore::new();
        let users: Vec<String> = (0..n).map(|i| format!("u{i:02}")).collect();
        for u in &users {
            let x = f64::from(rng.random_range(0..132u32));
            register(&mut phr, &mut rng, u, vec![x]);
        }
        let included: BTreeSet<String> = users.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
        let tree_id = format!("c2-{study}");
        let spec = TreeSpec {
            tree_id: tree_id.clone(),
            transform: TransformSpec::bincount("bins", hd_ks_edges(), 12).unwrap(),
            aggregator: AggregatorSpec::sum("sum"),
            height,
        };
        let (cro, _) = build_one(&mut phr, spec, users.clone(), included.clone());
        let default_leaf = cro.publication(&tree_id).unwrap().params.default_leaf;
        for u in &users {
            total += 1;
            let set = cro.proof_set_for(&tree_id, u, NONCE).unwrap();
            let v = proof_check(&cro, &tree_id, u, &set);
            let side = if set.path.bit_at_level(0) == 1 { "RightInput" } else { "LeftInput" };
            let good = if included.contains(u) {
                v == InclusionVerdict::Included
            } else {
                v == InclusionVerdict::Excluded && set.mrp_hops[0].get(side) == Some(default_leaf)
            };
            ok += usize::from(good);
        }
    }
    verdict(ok == total, format!("{ok}/{total} proof sets over 50 studies verify as expected"))
}

fn flip(d: &mut Digest256) {
    d.0[11] ^= 0x04;
}

// 3. single-site tamper soundness at K = 10
fn c3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut phr = PhrStore::new();
    let users: Vec<String> = (0..24).map(|i| format!("u{i:02}")).collect();
    for u in &users {
        let x = f64::from(rng.random_range(0..132u32));
        register(&mut phr, &mut rng, u, vec![x]);
    }
    let included: BTreeSet<String> = users.iter().step_by(2).cloned().collect();
    let spec = TreeSpec {
        tree_id: "c3".into(),
        transform: TransformSpec::bincount("bins", hd_ks_edges(), 12).unwrap(),
        aggregator: AggregatorSpec::sum("sum"),
        height: 10,
    };
    let (cro, _) = build_one(&mut phr, spec, users.clone(), included);
    let p = cro.publication("c3").unwrap();
    let (mut total, mut ok) = (0usize, 0usize);
    for u in [&users[0], &users[2], &users[1], &users[3]] {
        let honest = cro.proof_set_for("c3", u, NONCE).unwrap();
        if !proof_check(&cro, "c3", u, &honest).is_verified() {
            return verdict(false, format!("honest proof set of {u} rejected"));
        }
        let mut cases: Vec<(CsmtProofSet, Digest256, Stage)> = Vec::new();
        for i in 0..honest.ltr.publics.fields().len() {
            let mut s = honest.clone();
            flip(&mut s.ltr.publics.fields_mut()[i].value);
            cases.push((s, p.root, Stage::Ltr));
        }
        for k in 0..honest.mrp_hops.len() {
            for i in 0..honest.mrp_hops[k].publics.fields().len() {
                let mut s = honest.clone();
                flip(&mut s.mrp_hops[k].publics.fields_mut()[i].value);
                cases.push((s, p.root, Stage::Hop(k)));
            }
        }
        let mut s = honest.clone();
        flip(&mut s.root_digest);
        cases.push((s, p.root, Stage::Root));
        let mut published = p.root;
        flip(&mut published);
        cases.push((honest.clone(), published, Stage::Root));

        let (h_raw, h_tau, h_leaf) = cro.user_digests("c3", u).unwrap();
        for (set, root, stage) in cases {
            total += 1;
            let v = ver_inc(&h_raw, &h_tau, &h_leaf, &set, &root, &hash_nonce(NONCE), &p.vk_ltr, &p.vk_mrp, &p.params.default_leaf);
            if matches!(v.verdict, InclusionVerdict::Failed { stage: s, .. } if s == stage) {
                ok += 1;
            }
        }
    }
    verdict(ok == total, format!("{ok}/{total} single-site mutations rejected at the mutated stage"))
}

struct AuditWorld {
    phr: PhrStore,
    users: Vec<String>,
    included: BTreeSet<String>,
}

fn audit_world(rng: &mut ChaCha8Rng) -> AuditWorld {
    let n = rng.random_range(12..=24usize);
    let mut phr = PhrStore::new();
    let users: Vec<String> = (0..n).map(|i| format!("u{i:02}")).collect();
    for u in &users {
        let x = f64::from(rng.random_range(0..132u32));
        register(&mut phr, rng, u, vec![x]);
    }
    let mut included: BTreeSet<String> = users.iter().filter(|_| rng.random_bool(0.6)).cloned().collect();
    included.insert(users[0].clone());
    AuditWorld { phr, users, included }
}

fn audit_spec(tree_id: &str) -> TreeSpec {
    TreeSpec {
        tree_id: tree_id.into(),
        transform: TransformSpec::bincount("bins", hd_ks_edges(), 12).unwrap(),
        aggregator: AggregatorSpec::sum("sum"),
        height: 16,
    }
}

/// The attacker's PHR view with salts as rotated during its build, restricted
/// to the users the honest PHR actually holds.
fn without(view: &PhrStore, honest: &PhrStore) -> PhrStore {
    let mut out = PhrStore::new();
    for id in honest.user_ids() {
        out.register_record(view.record(&id).unwrap().clone()).unwrap();
    }
    out
}

fn spurious(r: &AuditResult) -> bool {
    matches!(r, AuditResult::SpuriousLeaf { .. }) && r.message().starts_with(SPURIOUS_LEAF)
}

// 4. exclusivity audit
fn c4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut honest_ok, mut detected) = (0usize, 0usize);
    let mut kinds = [0usize; 3];
    for trial in 0..200 {
        let mut w = audit_world(&mut rng);
        let w = &mut w;
        let tree_id = format!("c4-{trial}");
        let (cro, _) = build_one(&mut w.phr, audit_spec(&tree_id), w.users.clone(), w.included.clone());
        let honest = audit_bundle(&cro, &w.phr, &tree_id, &w.included, NONCE).unwrap();
        honest_ok += usize::from(verify_data_exclusivity(&honest).passed());

        let kind = trial % 3;
        let attacked: AuditBundle = match kind {
            // a leaf from a record outside the declared cohort, hidden from the bundle
            0 => {
                let mut view = w.phr.clone();
                let ghost = if trial % 2 == 0 {
                    let x = f64::from(rng.random_range(0..132u32));
                    register(&mut view, &mut rng, "ghost", vec![x]);
                    "ghost".to_string()
                } else {
                    // registered, but never declared as included
                    match w.users.iter().find(|u| !w.included.contains(*u)) {
                        Some(u) => u.clone(),
                        None => {
                            register(&mut view, &mut rng, "ghost", vec![5.0]);
                            "ghost".to_string()
                        }
                    }
                };
                let mut inc = w.included.clone();
                inc.insert(ghost);
                let all = view.user_ids();
                let (cro2, _) = build_one(&mut view, audit_spec(&tree_id), all, inc);
                audit_bundle(&cro2, &without(&view, &w.phr), &tree_id, &w.included, NONCE).unwrap()
            }
            // one included user's proof set silently dropped
            1 => {
                let mut b = honest.clone();
                let victim = w.included.iter().nth(rng.random_range(0..w.included.len())).unwrap().clone();
                let set = b.proof_sets.remove(&victim).unwrap();
                let (h_raw, h_tau) = (set.ltr.get("Input1").unwrap(), set.ltr.get("Input2").unwrap());
                b.included_hashes.retain(|t| (t.h_raw, t.h_tau) != (h_raw, h_tau));
                b.nondefault_leaves.remove(&set.ltr.get("Output").unwrap());
                b
            }
            // an LTR tuple the PHR never registered
            _ => {
                let mut view = w.phr.clone();
                let x = f64::from(rng.random_range(0..132u32));
                register(&mut view, &mut rng, "ghost", vec![x]);
                let mut inc = w.included.clone();
                inc.insert("ghost".into());
                let all = view.user_ids();
                let (cro2, _) = build_one(&mut view, audit_spec(&tree_id), all, inc);
                let mut b = audit_bundle(&cro2, &without(&view, &w.phr), &tree_id, &w.included, NONCE).unwrap();
                let set = cro2.proof_set_for(&tree_id, "ghost", NONCE).unwrap();
                b.nondefault_leaves.insert(set.ltr.get("Output").unwrap());
                if trial % 2 == 0 {
                    // borrow another user's PHR path for the forged tuple
                    let (h_raw, h_tau, _) = cro2.user_digests(&tree_id, "ghost").unwrap();
                    let mut forged = b.included_hashes[0].clone();
                    forged.h_raw = h_raw;
                    forged.h_tau = h_tau;
                    b.included_hashes.push(forged);
                }
                b.proof_sets.insert("ghost".into(), set);
                b
            }
        };
        let r = verify_data_exclusivity(&attacked);
        if spurious(&r) {
            detected += 1;
            kinds[kind] += 1;
        }
    }
    verdict(
        honest_ok == 200 && detected == 200,
        format!(
            "honest {honest_ok}/200 pass; attacks detected {detected}/200 (injection {}, omission {}, foreign tuple {})",
            kinds[0], kinds[1], kinds[2]
        ),
    )
}

fn service_with(rows: &[(String, Vec<f64>)]) -> Service {
    let mut phr = PhrStore::new();
    for rec in salted_records(rows.iter().map(|(id, d)| (id.as_str(), d.clone()))) {
        phr.register_record(rec).unwrap();
    }
    Service::new(ServiceConfig::default(), phr)
}

fn run(svc: &Service, req: JobRequest) -> StatisticResult {
    let out: PipelineOutcome = serde_json::from_value(svc.execute(&req).unwrap()).unwrap();
    out.result
}

type Rows = Vec<(String, Vec<f64>)>;

fn hd_rows(seed: u64) -> (Rows, Vec<String>, Vec<String>) {
    let c = generate_hd_cohorts(seed);
    let rows = c.healthy.iter().chain(&c.hd).map(|r| (r.user_id.clone(), vec![f64::from(r.cag)])).collect();
    (rows, c.healthy.iter().map(|r| r.user_id.clone()).collect(), c.hd.iter().map(|r| r.user_id.clone()).collect())
}

fn logistic() -> (Rows, Vec<f64>, Vec<f64>) {
    let rows = generate_logistic_records(505, 200, &TRUE_BETA, "lg");
    let data: Vec<Vec<f64>> = rows.iter().map(|(_, d)| d.clone()).collect();
    (rows, oracle::fit_logistic(&data, &[0, 1, 2, 3]), oracle::fit_logistic(&data, &[0, 1]))
}

fn ks_req(study: &str, a: &[String], b: &[String], scale: u8) -> JobRequest {
    JobRequest::PipelineKs {
        study_id: study.into(),
        cohort_a: a.to_vec(),
        cohort_b: b.to_vec(),
        edges: Some(hd_ks_edges()),
        scale: Some(scale),
        height: Some(16),
    }
}

// 5. decoded statistics agree to 3 decimals across scales
fn c5() -> Verdict {
    let (hd, a, b) = hd_rows(55);
    let (lg, full, reduced) = logistic();
    let users: Vec<String> = lg.iter().map(|(id, _)| id.clone()).collect();
    let svc = service_with(&[hd, lg].concat());
    let mut table: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in SCALES {
        table.entry("KS").or_default().push(run(&svc, ks_req(&format!("ks{s}"), &a, &b, s)).decoded);
        let lrt = JobRequest::PipelineLrt {
            study_id: format!("lrt{s}"),
            users: users.clone(),
            beta_full: full.clone(),
            beta_reduced: reduced.clone(),
            scale: Some(s),
            height: Some(16),
        };
        table.entry("LRT").or_default().push(run(&svc, lrt).decoded);
        let acc = JobRequest::PipelineAcc {
            study_id: format!("acc{s}"),
            users: users.clone(),
            beta: full.clone(),
            scale: Some(s),
            height: Some(16),
        };
        table.entry("ACC").or_default().push(run(&svc, acc).decoded);
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for (kind, values) in &table {
        let rounded: BTreeSet<String> = values.iter().map(|v| format!("{v:.3}")).collect();
        let stable = rounded.len() == 1;
        pass &= stable;
        let shown: Vec<String> = SCALES.iter().zip(values).map(|(s, v)| format!("s{s}={v:.6}")).collect();
        parts.push(format!("{kind} {} [{}]", if stable { "stable" } else { "UNSTABLE" }, shown.join(" ")));
    }
    verdict(pass, parts.join("; "))
}

// 6. KS magnitude on HD-like cohorts
fn c6() -> Verdict {
    let (hd, a, b) = hd_rows(66);
    let svc = service_with(&hd);
    let r = run(&svc, ks_req("hd", &a, &b, 12));
    verdict(r.decoded >= 0.99, format!("decoded KS = {} on 50 + 50 cohorts", r.decoded))
}

// 7. plaintext-oracle agreement
fn c7() -> Verdict {
    let (lg, full, reduced) = logistic();
    let data: Vec<Vec<f64>> = lg.iter().map(|(_, d)| d.clone()).collect();
    let users: Vec<String> = lg.iter().map(|(id, _)| id.clone()).collect();
    let n = data.len();
    let lrt_oracle = -2.0 * (oracle::plaintext_loglik(&reduced, &data) - oracle::plaintext_loglik(&full, &data));
    let (correct, _) = oracle::plaintext_accuracy(&full, &data);
    let svc = service_with(&lg);
    let mut pass = true;
    let mut parts = vec![format!("plaintext LRT {lrt_oracle:.6}, accuracy {correct}/{n}")];
    for s in SCALES {
        let lrt = run(
            &svc,
            JobRequest::PipelineLrt {
                study_id: format!("lrt{s}"),
                users: users.clone(),
                beta_full: full.clone(),
                beta_reduced: reduced.clone(),
                scale: Some(s),
                height: Some(16),
            },
        );
        let tol = 2f64.powi(6 - i32::from(s)) * n as f64;
        let lrt_ok = (lrt.decoded - lrt_oracle).abs() <= tol;
        let acc = run(
            &svc,
            JobRequest::PipelineAcc {
                study_id: format!("acc{s}"),
                users: users.clone(),
                beta: full.clone(),
                scale: Some(s),
                height: Some(16),
            },
        );
        let counts_ok = acc.root_values[0].payload()[0].as_whole() == Some(n as i64)
            && acc.root_values[1].payload()[0].as_whole() == Some(correct as i64);
        let acc_ok = counts_ok && acc.zeta.raw == ((correct as i64) << s) / n as i64;
        pass &= lrt_ok && acc_ok;
        parts.push(format!(
            "s{s}: LRT {:.6} (|err| {:.2e} <= {tol}) {}, ACC {}/{n} -> {} {}",
            lrt.decoded,
            (lrt.decoded - lrt_oracle).abs(),
            if lrt_ok { "ok" } else { "BAD" },
            acc.root_values[1].payload()[0].as_whole().unwrap_or(-1),
            acc.decoded,
            if acc_ok { "ok" } else { "BAD" },
        ));
    }
    verdict(pass, parts.join("; "))
}

const BIN: &str = env!("CARGO_BIN_EXE_csmt");

fn csmt(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("CSMT_SERVER").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

// 8. offline verification reproduces online verdicts byte for byte
fn c8() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let phr_file = d.join("phr.json");
    let (hd, a, b) = hd_rows(88);
    let mut phr = PhrStore::new();
    for rec in salted_records(hd.iter().map(|(id, v)| (id.as_str(), v.clone()))) {
        phr.register_record(rec).unwrap();
    }
    phr.save(&phr_file).unwrap();
    std::fs::write(d.join("a.txt"), a.join("\n")).unwrap();
    std::fs::write(d.join("b.txt"), b.join("\n")).unwrap();

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let bind = format!("127.0.0.1:{port}");
    let url = format!("http://{bind}");
    let mut server = Command::new(BIN).args(["serve", "--bind", &bind, "--phr", p(&phr_file)]).stderr(Stdio::null()).spawn().unwrap();
    let start = Instant::now();
    while reqwest::blocking::get(format!("{url}/bulletin")).is_err() && start.elapsed() < Duration::from_secs(20) {
        std::thread::sleep(Duration::from_millis(50));
    }
    let bundle = d.join("bundle");
    let sessions = d.join("sessions");
    let online = || -> Vec<Output> {
        vec![
            csmt(&[
                "--server",
                &url,
                "pipeline",
                "ks",
                "--study",
                "hd",
                "--cohort-a",
                p(&d.join("a.txt")),
                "--cohort-b",
                p(&d.join("b.txt")),
                "--out",
                p(&bundle),
            ]),
            csmt(&["--server", &url, "verify", "include", "--tree", "hd/A", "--user", &a[0], "--save-session", p(&d.join("inc.json"))]),
            csmt(&["--server", &url, "verify", "exclude", "--tree", "hd/A", "--user", &b[0], "--save-session", p(&d.join("exc.json"))]),
            csmt(&["--server", &url, "verify", "stat", "--study", "hd", "--user", &b[1], "--save-sessions", p(&sessions)]),
        ]
    };
    let on = online();
    let _ = server.kill();
    let _ = server.wait();
    let still_up = reqwest::blocking::get(format!("{url}/bulletin")).is_ok();

    let off = [
        csmt(&["verify", "include", "--bundle", p(&bundle), "--session", p(&d.join("inc.json"))]),
        csmt(&["verify", "exclude", "--bundle", p(&bundle), "--session", p(&d.join("exc.json"))]),
        csmt(&["verify", "stat", "--bundle", p(&bundle), "--sessions", p(&sessions), "--user", &b[1]]),
    ];
    let mut pass = !still_up && on.iter().all(|o| o.status.success());
    let names = ["include", "exclude", "stat"];
    let mut parts = Vec::new();
    for ((name, online), offline) in names.iter().zip(&on[1..]).zip(&off) {
        let same = online.stdout == offline.stdout && online.status.code() == offline.status.code();
        pass &= same && offline.status.success();
        parts.push(format!(
            "{name}: online exit {:?}, offline exit {:?}, {} bytes {}",
            online.status.code(),
            offline.status.code(),
            offline.stdout.len(),
            if same { "identical" } else { "DIFFER" }
        ));
    }
    verdict(pass, parts.join("; "))
}

fn main() {
    // panics are reported on the criterion line
    std::panic::set_hook(Box::new(|_| {}));
    // cargo passes harness flags such as --list; there are no sub-tests to list
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let s = Duration::from_secs;
    let results = [
        criterion(1, "root-aggregation equivalence", Some(s(10)), c1),
        criterion(2, "inclusion/exclusion completeness", Some(s(30)), c2),
        criterion(3, "tamper soundness", Some(s(60)), c3),
        criterion(4, "data-exclusivity audit", Some(s(60)), c4),
        criterion(5, "scale stability", None, c5),
        criterion(6, "KS magnitude on HD-like cohorts", Some(s(10)), c6),
        criterion(7, "plaintext-oracle agreement", Some(s(10)), c7),
        criterion(8, "offline verifiability", None, c8),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
