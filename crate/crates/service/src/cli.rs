//! `csmt` command line. Exit codes: 0 verified, 1 verification failed,
//! 2 operational or usage error.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use csmt_core::phr::{generate_hd_cohorts, generate_logistic_records, phr_verify_membership, write_cag_csv, PhrStore};
use csmt_core::prover::{fresh_nonce, LtrResponse, MrpProof};
use csmt_core::verifier::{verify_data_exclusivity, AuditBundle, InclusionSession, InclusionVerdict, Stage, DEFAULT_RETRIES};
use serde::Serialize;

use crate::api::{JobRequest, PipelineOutcome, RecordUpload, StudyConfig, StudyOutcome};
use crate::bundle::{pretty, ArtifactBundle};
use crate::client::ServiceClient;
use crate::service::{Service, ServiceConfig, DEFAULT_WORKERS};
use crate::workflow;

#[derive(Parser, Debug)]
#[command(name = "csmt", version, about = "Computational sparse Merkle tree prover service and verifiers")]
pub struct Cli {
    /// Service base URL for commands that talk to the CRO.
    #[arg(long, env = "CSMT_SERVER", global = true)]
    pub server: Option<String>,
    #[arg(long, env = "CSMT_API_TOKEN", global = true, hide_env_values = true)]
    pub token: Option<String>,
    /// Fixed-point scale.
    #[arg(long, env = "ZKP_SCALER", global = true)]
    pub scale: Option<u8>,
    /// Tree height K.
    #[arg(long, env = "TREE_HEIGHT", global = true)]
    pub height: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    #[command(subcommand)]
    Phr(PhrCmd),
    #[command(subcommand)]
    Study(StudyCmd),
    #[command(subcommand)]
    Prove(ProveCmd),
    #[command(subcommand)]
    Verify(VerifyCmd),
    #[command(subcommand)]
    Audit(AuditCmd),
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    #[command(subcommand)]
    Gen(GenCmd),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
pub enum PhrCmd {
    /// Register records from a CSV (`user_id,<values..>`) with fresh salts.
    Register {
        #[arg(long)]
        csv: PathBuf,
        /// Local PHR file to create or extend.
        #[arg(long, required_unless_present = "remote")]
        phr: Option<PathBuf>,
        /// Register on the service instead of a local file.
        #[arg(long)]
        remote: bool,
    },
    /// Print a PHR membership path for a user.
    Prove {
        #[arg(long)]
        phr: PathBuf,
        #[arg(long)]
        user: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum StudyCmd {
    /// Build and publish the trees described by a study config.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum ProveCmd {
    Ltr {
        #[arg(long)]
        tree: String,
        #[arg(long)]
        user: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Mrp {
        #[arg(long)]
        tree: String,
        #[arg(long)]
        user: String,
        /// Hex nonce; fresh when absent.
        #[arg(long)]
        nonce: Option<String>,
        /// LTR response from `prove ltr`; requested anew when absent.
        #[arg(long)]
        ltr: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct InclusionArgs {
    #[arg(long)]
    pub tree: Option<String>,
    #[arg(long)]
    pub user: Option<String>,
    /// Write the online session for later offline checks.
    #[arg(long)]
    pub save_session: Option<PathBuf>,
    /// Offline: downloaded study bundle directory.
    #[arg(long, requires = "session")]
    pub bundle: Option<PathBuf>,
    /// Offline: session recorded by an online run.
    #[arg(long, requires = "bundle")]
    pub session: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RETRIES)]
    pub retries: usize,
}

#[derive(Subcommand, Debug)]
pub enum VerifyCmd {
    /// Check that a user's record is included in a tree.
    Include(InclusionArgs),
    /// Check that a user's record is excluded from a tree.
    Exclude(InclusionArgs),
    /// Check a published statistic, sampling one user's inclusion.
    Stat {
        #[arg(long)]
        study: Option<String>,
        #[arg(long)]
        user: Option<String>,
        #[arg(long, requires = "sessions")]
        bundle: Option<PathBuf>,
        #[arg(long, requires = "bundle")]
        sessions: Option<PathBuf>,
        #[arg(long)]
        save_sessions: Option<PathBuf>,
        #[arg(long)]
        save_bundle: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RETRIES)]
        retries: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum AuditCmd {
    /// Audit that no leaf outside the declared cohort entered the tree.
    Exclusivity {
        #[arg(long, required_unless_present = "bundle")]
        tree: Option<String>,
        #[arg(long)]
        nonce: Option<String>,
        /// Offline: a saved audit bundle.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        save: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct PipelineCommon {
    #[arg(long)]
    pub study: String,
    /// Run in-process against this PHR file instead of the service.
    #[arg(long)]
    pub phr: Option<PathBuf>,
    /// Write the study bundle here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum PipelineCmd {
    Ks {
        #[command(flatten)]
        common: PipelineCommon,
        /// File of user ids, one per line (or CSV, first column).
        #[arg(long)]
        cohort_a: PathBuf,
        #[arg(long)]
        cohort_b: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        edges: Option<Vec<f64>>,
    },
    Lrt {
        #[command(flatten)]
        common: PipelineCommon,
        #[arg(long)]
        users: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        beta_full: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        beta_reduced: Vec<f64>,
    },
    Acc {
        #[command(flatten)]
        common: PipelineCommon,
        #[arg(long)]
        users: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        beta: Vec<f64>,
    },
}

#[derive(Subcommand, Debug)]
pub enum GenCmd {
    /// Synthetic healthy and HD CAG cohorts: cag.csv, healthy.txt, hd.txt.
    HdCohorts {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Synthetic logistic-regression records as CSV.
    Logistic {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Intercept then one coefficient per feature.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        beta: Vec<f64>,
        #[arg(long, default_value = "lg")]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = "CSMT_BIND", default_value = "127.0.0.1:5012")]
    pub bind: SocketAddr,
    #[arg(long)]
    pub phr: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WORKERS)]
    pub workers: usize,
    #[arg(long)]
    pub lambda: Option<u32>,
}

enum Verdict {
    Verified,
    Failed,
}

impl From<bool> for Verdict {
    fn from(ok: bool) -> Self {
        if ok {
            Verdict::Verified
        } else {
            Verdict::Failed
        }
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    match run(cli) {
        Ok(Verdict::Verified) => ExitCode::SUCCESS,
        Ok(Verdict::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn client(cli: &Cli) -> anyhow::Result<ServiceClient> {
    let url = cli.server.as_deref().ok_or_else(|| anyhow!("no service URL; pass --server or set CSMT_SERVER"))?;
    Ok(ServiceClient::new(url, cli.token.clone())?)
}

fn service_config(cli: &Cli) -> ServiceConfig {
    let mut config = ServiceConfig { api_token: cli.token.clone(), ..ServiceConfig::default() };
    if let Some(s) = cli.scale {
        config.scale = s;
    }
    if let Some(h) = cli.height {
        config.height = h;
    }
    config
}

fn emit<T: Serialize>(v: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let text = pretty(v);
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// User ids from a file: one per line, or the first CSV column with an
/// optional `user_id` header.
pub fn read_user_ids(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split(',').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#') && *l != "user_id")
        .map(str::to_string)
        .collect())
}

/// Records from a CSV with a header row: `user_id` then numeric columns.
pub fn read_records_csv(path: &Path) -> anyhow::Result<Vec<RecordUpload>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let mut fields = row.iter();
        let user_id = fields.next().ok_or_else(|| anyhow!("empty CSV row"))?.to_string();
        let datum = fields
            .map(|f| f.trim().parse::<f64>().with_context(|| format!("bad value `{f}` for `{user_id}`")))
            .collect::<anyhow::Result<Vec<f64>>>()?;
        out.push(RecordUpload { user_id, datum });
    }
    Ok(out)
}

fn load_phr(path: &Path) -> anyhow::Result<PhrStore> {
    PhrStore::load(path).with_context(|| format!("loading PHR {}", path.display()))
}

fn nonce_arg(nonce: &Option<String>) -> anyhow::Result<Vec<u8>> {
    match nonce {
        Some(h) => Ok(hex::decode(h).context("nonce must be hex")?),
        None => Ok(fresh_nonce()),
    }
}

fn run(cli: Cli) -> anyhow::Result<Verdict> {
    match &cli.command {
        Command::Gen(cmd) => gen(cmd),
        Command::Phr(cmd) => phr(&cli, cmd),
        Command::Study(StudyCmd::Build { config, out }) => {
            let study: StudyConfig = read_json(config)?;
            let c = client(&cli)?;
            let outcome: StudyOutcome = c.run(&JobRequest::StudyBuild { study })?;
            if let Some(dir) = out {
                c.artifacts(&outcome.study_id)?.write_dir(dir)?;
            }
            emit(&outcome.bulletin, None)?;
            Ok(Verdict::Verified)
        }
        Command::Prove(cmd) => prove(&cli, cmd),
        Command::Verify(cmd) => verify(&cli, cmd),
        Command::Audit(AuditCmd::Exclusivity { tree, nonce, bundle, save }) => {
            let (result, audit) = match bundle {
                Some(path) => {
                    let audit: AuditBundle = read_json(path)?;
                    (verify_data_exclusivity(&audit), audit)
                }
                None => {
                    let tree = tree.as_deref().expect("clap requires --tree");
                    workflow::audit_online(&client(&cli)?, tree, &nonce_arg(nonce)?)?
                }
            };
            if let Some(path) = save {
                fs::write(path, pretty(&audit))?;
            }
            println!("{}", result.message());
            Ok(result.passed().into())
        }
        Command::Pipeline(cmd) => pipeline(&cli, cmd),
        Command::Serve(args) => serve(&cli, args),
    }
}

fn gen(cmd: &GenCmd) -> anyhow::Result<Verdict> {
    match cmd {
        GenCmd::HdCohorts { seed, out_dir } => {
            fs::create_dir_all(out_dir)?;
            let c = generate_hd_cohorts(*seed);
            let all: Vec<_> = c.healthy.iter().chain(&c.hd).cloned().collect();
            write_cag_csv(fs::File::create(out_dir.join("cag.csv"))?, &all)?;
            let ids = |rows: &[csmt_core::phr::CagRecord]| rows.iter().map(|r| format!("{}\n", r.user_id)).collect::<String>();
            fs::write(out_dir.join("healthy.txt"), ids(&c.healthy))?;
            fs::write(out_dir.join("hd.txt"), ids(&c.hd))?;
            println!("wrote {} records to {}", all.len(), out_dir.display());
        }
        GenCmd::Logistic { seed, n, beta, prefix, out } => {
            let rows = generate_logistic_records(*seed, *n, beta, prefix);
            let mut w = csv::Writer::from_path(out)?;
            let m = beta.len() - 1;
            let mut header = vec!["user_id".to_string()];
            header.extend((1..=m).map(|i| format!("x{i}")));
            header.push("y".into());
            w.write_record(&header)?;
            for (id, datum) in &rows {
                let mut rec = vec![id.clone()];
                rec.extend(datum.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            println!("wrote {} records to {}", rows.len(), out.display());
        }
    }
    Ok(Verdict::Verified)
}

fn phr(cli: &Cli, cmd: &PhrCmd) -> anyhow::Result<Verdict> {
    match cmd {
        PhrCmd::Register { csv, phr, remote } => {
            let records = read_records_csv(csv)?;
            if *remote {
                let entries = client(cli)?.register(&records)?;
                println!("registered {} records on the service", entries.len());
            } else {
                let path = phr.as_ref().expect("clap requires --phr");
                let mut store = if path.exists() { load_phr(path)? } else { PhrStore::new() };
                let rows = records.iter().map(|r| (r.user_id.as_str(), r.datum.clone()));
                for rec in csmt_core::phr::salted_records(rows) {
                    store.register_record(rec)?;
                }
                store.save(path)?;
                println!("registered {} records; PHR root {}", records.len(), store.root());
            }
            Ok(Verdict::Verified)
        }
        PhrCmd::Prove { phr, user } => {
            let store = load_phr(phr)?;
            let entry = store.entry(user).ok_or_else(|| anyhow!("unknown PHR user `{user}`"))?;
            let path = store.phr_prove_membership(&entry.h_raw, &entry.h_tau)?;
            let root = store.root();
            let ok = phr_verify_membership(&root, &path);
            emit(&serde_json::json!({ "user_id": user, "root": root, "path": path }), None)?;
            Ok(ok.into())
        }
    }
}

fn ltr_for(c: &ServiceClient, tree: &str, user: &str) -> anyhow::Result<LtrResponse> {
    let h_raw = c.raw_digest(user)?;
    let h_tau = c.delivery(tree, user)?.h_tau;
    Ok(c.run(&JobRequest::Ltr { tree_id: tree.into(), h_raw, h_tau })?)
}

fn prove(cli: &Cli, cmd: &ProveCmd) -> anyhow::Result<Verdict> {
    let c = client(cli)?;
    match cmd {
        ProveCmd::Ltr { tree, user, out } => emit(&ltr_for(&c, tree, user)?, out.as_deref())?,
        ProveCmd::Mrp { tree, user, nonce, ltr, out } => {
            let ltr = match ltr {
                Some(p) => read_json(p)?,
                None => ltr_for(&c, tree, user)?,
            };
            let mrp: MrpProof = c.run(&JobRequest::Mrp {
                tree_id: tree.clone(),
                h_leaf: ltr.h_leaf,
                index: ltr.index,
                nonce: hex::encode(nonce_arg(nonce)?),
            })?;
            emit(&mrp, out.as_deref())?;
        }
    }
    Ok(Verdict::Verified)
}

fn verify(cli: &Cli, cmd: &VerifyCmd) -> anyhow::Result<Verdict> {
    match cmd {
        VerifyCmd::Include(args) => inclusion(cli, args, InclusionVerdict::Included),
        VerifyCmd::Exclude(args) => inclusion(cli, args, InclusionVerdict::Excluded),
        VerifyCmd::Stat { study, user, bundle, sessions, save_sessions, save_bundle, retries } => {
            let report = match (bundle, sessions) {
                (Some(bundle_dir), Some(session_dir)) => {
                    let bundle = ArtifactBundle::read_dir(bundle_dir)?;
                    let mut recorded = BTreeMap::new();
                    for p in bundle.publications()? {
                        let s: InclusionSession = read_json(&session_dir.join(workflow::session_file_name(&p.tree_id)))?;
                        recorded.insert(p.tree_id.clone(), s);
                    }
                    let user = match user {
                        Some(u) => u.clone(),
                        None => recorded.values().next().map(|s| s.user_id.clone()).ok_or_else(|| anyhow!("no sessions"))?,
                    };
                    workflow::stat_offline(&bundle, &user, &recorded)?
                }
                _ => {
                    let study = study.as_deref().ok_or_else(|| anyhow!("--study is required online"))?;
                    let user = user.as_deref().ok_or_else(|| anyhow!("--user is required online"))?;
                    let (report, recorded, bundle) = workflow::stat_online(&client(cli)?, study, user, *retries)?;
                    if let Some(dir) = save_sessions {
                        fs::create_dir_all(dir)?;
                        for (tree, s) in &recorded {
                            fs::write(dir.join(workflow::session_file_name(tree)), pretty(s))?;
                        }
                    }
                    if let Some(dir) = save_bundle {
                        bundle.write_dir(dir)?;
                    }
                    report
                }
            };
            println!("{}", report.to_json());
            Ok(report.passed.into())
        }
    }
}

fn inclusion(cli: &Cli, args: &InclusionArgs, expected: InclusionVerdict) -> anyhow::Result<Verdict> {
    let report = match (&args.bundle, &args.session) {
        (Some(bundle), Some(session)) => {
            let session: InclusionSession = read_json(session)?;
            workflow::include_offline(&ArtifactBundle::read_dir(bundle)?, &session)?
        }
        _ => {
            let tree = args.tree.as_deref().ok_or_else(|| anyhow!("--tree is required online"))?;
            let user = args.user.as_deref().ok_or_else(|| anyhow!("--user is required online"))?;
            let (report, session) = workflow::include_online(&client(cli)?, tree, user, args.retries);
            if let (Some(path), Some(s)) = (&args.save_session, &session) {
                fs::write(path, pretty(s))?;
            }
            report
        }
    };
    println!("{}", report.to_json());
    if let InclusionVerdict::Failed { stage: stage @ (Stage::Transport | Stage::Lookup), reason } = &report.verdict {
        bail!("{stage} failed: {reason}");
    }
    Ok((report.verdict == expected).into())
}

fn pipeline(cli: &Cli, cmd: &PipelineCmd) -> anyhow::Result<Verdict> {
    let (common, request) = match cmd {
        PipelineCmd::Ks { common, cohort_a, cohort_b, edges } => (
            common,
            JobRequest::PipelineKs {
                study_id: common.study.clone(),
                cohort_a: read_user_ids(cohort_a)?,
                cohort_b: read_user_ids(cohort_b)?,
                edges: edges.clone(),
                scale: cli.scale,
                height: cli.height,
            },
        ),
        PipelineCmd::Lrt { common, users, beta_full, beta_reduced } => (
            common,
            JobRequest::PipelineLrt {
                study_id: common.study.clone(),
                users: read_user_ids(users)?,
                beta_full: beta_full.clone(),
                beta_reduced: beta_reduced.clone(),
                scale: cli.scale,
                height: cli.height,
            },
        ),
        PipelineCmd::Acc { common, users, beta } => (
            common,
            JobRequest::PipelineAcc {
                study_id: common.study.clone(),
                users: read_user_ids(users)?,
                beta: beta.clone(),
                scale: cli.scale,
                height: cli.height,
            },
        ),
    };
    let (outcome, bundle): (PipelineOutcome, ArtifactBundle) = match &common.phr {
        Some(path) => {
            let svc = Service::new(service_config(cli), load_phr(path)?);
            let outcome = serde_json::from_value(svc.execute(&request)?)?;
            (outcome, svc.artifacts(&common.study)?)
        }
        None => {
            let c = client(cli)?;
            let outcome = c.run(&request)?;
            (outcome, c.artifacts(&common.study)?)
        }
    };
    if let Some(dir) = &common.out {
        bundle.write_dir(dir)?;
    }
    let r = &outcome.result;
    emit(
        &serde_json::json!({
            "study_id": outcome.study_id,
            "kind": r.kind,
            "scale": r.scale,
            "zeta_raw": r.zeta.raw,
            "decoded": r.decoded,
            "decoded_3dp": format!("{:.3}", r.decoded),
            "roots": r.root_digests,
        }),
        None,
    )?;
    Ok(Verdict::Verified)
}

fn serve(cli: &Cli, args: &ServeArgs) -> anyhow::Result<Verdict> {
    let mut config = service_config(cli);
    config.workers = args.workers;
    if let Some(l) = args.lambda {
        config.lambda = l;
    }
    if csmt_core::proofsys::backend_seed(config.lambda, b"check").is_err() {
        bail!("unsupported security parameter {}", config.lambda);
    }
    let phr = match &args.phr {
        Some(p) => load_phr(p)?,
        None => PhrStore::new(),
    };
    let svc = Arc::new(Service::new(config, phr));
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.bind).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        crate::server::serve(svc, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(Verdict::Verified)
}
