//! Verification flows shared by the CLI and tests. Online variants talk to a
//! running service; offline variants use only a downloaded bundle and the
//! sessions recorded online.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context};
use csmt_core::prover::TreePublication;
use csmt_core::stats::{stat_verify, StatVerifyReport};
use csmt_core::verifier::{
    cosmetic_verifier, verify_data_exclusivity, verify_session, AuditBundle, AuditResult, InclusionReport, InclusionSession,
};

use crate::api::JobRequest;
use crate::bundle::ArtifactBundle;
use crate::client::ServiceClient;

pub fn include_online(client: &ServiceClient, tree_id: &str, user_id: &str, retries: usize) -> (InclusionReport, Option<InclusionSession>) {
    let out = cosmetic_verifier(user_id, tree_id, client, retries);
    (out.report, out.session)
}

pub fn include_offline(bundle: &ArtifactBundle, session: &InclusionSession) -> anyhow::Result<InclusionReport> {
    let publication = bundle.publication(&session.tree_id)?;
    Ok(verify_session(session, &publication))
}

/// Online statistic check for `user_id`. Returns the report, the sessions
/// recorded per tree, and the downloaded bundle.
pub fn stat_online(
    client: &ServiceClient,
    study_id: &str,
    user_id: &str,
    retries: usize,
) -> anyhow::Result<(StatVerifyReport, BTreeMap<String, InclusionSession>, ArtifactBundle)> {
    let bundle = client.artifacts(study_id)?;
    let record = client
        .bulletin()?
        .into_iter()
        .find(|r| r.study_id == study_id)
        .ok_or_else(|| anyhow!("study `{study_id}` is not on the bulletin"))?;
    let published: Vec<TreePublication> = record.roots.iter().map(|(t, _)| client.tree_publication(t)).collect::<Result<_, _>>()?;
    let (result, vk_post) = bundle.statistic()?;
    let mut sessions = BTreeMap::new();
    let mut inclusion = |p: &TreePublication| {
        let (report, session) = include_online(client, &p.tree_id, user_id, retries);
        if let Some(s) = session {
            sessions.insert(p.tree_id.clone(), s);
        }
        report
    };
    let report = stat_verify(&result, &published, &vk_post, user_id, &mut inclusion);
    Ok((report, sessions, bundle))
}

pub fn stat_offline(
    bundle: &ArtifactBundle,
    user_id: &str,
    sessions: &BTreeMap<String, InclusionSession>,
) -> anyhow::Result<StatVerifyReport> {
    let published = bundle.publications()?;
    let (result, vk_post) = bundle.statistic()?;
    for p in &published {
        if !sessions.contains_key(&p.tree_id) {
            bail!("no recorded session for tree `{}`", p.tree_id);
        }
    }
    let mut inclusion = |p: &TreePublication| verify_session(&sessions[&p.tree_id], p);
    Ok(stat_verify(&result, &published, &vk_post, user_id, &mut inclusion))
}

/// Ask the CRO for an exclusivity bundle under `nonce` and audit it locally.
pub fn audit_online(client: &ServiceClient, tree_id: &str, nonce: &[u8]) -> anyhow::Result<(AuditResult, AuditBundle)> {
    let bundle: AuditBundle = client.run(&JobRequest::Audit { tree_id: tree_id.into(), nonce: hex::encode(nonce) }).context("audit job")?;
    if bundle.nonce != nonce {
        bail!("audit bundle answers a different nonce");
    }
    if bundle.publication != client.tree_publication(tree_id)? {
        bail!("audit bundle does not carry the published tree");
    }
    Ok((verify_data_exclusivity(&bundle), bundle))
}

pub fn session_file_name(tree_id: &str) -> String {
    format!("{}.session.json", tree_id.replace('/', "__"))
}
