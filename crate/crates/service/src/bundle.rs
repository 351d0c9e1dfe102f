//! Study artifact bundles: the public files a verifier needs, keyed by
//! relative path.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use csmt_core::proofsys::{ProofArtifact, VerifyingKey};
use csmt_core::prover::TreePublication;
use csmt_core::stats::StatisticResult;
use csmt_core::study::BulletinRecord;
use serde::{Deserialize, Serialize};

pub const BULLETIN_FILE: &str = "bulletin.json";
pub const SETTINGS_FILE: &str = "settings.json";
pub const STATISTIC_FILE: &str = "statistic.json";
pub const VK_POST_FILE: &str = "vk_post.json";
pub const POST_PROOF_FILE: &str = "post_proof.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactBundle {
    pub study_id: String,
    pub files: BTreeMap<String, String>,
}

pub fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes")
}

fn tree_name<'a>(study_id: &str, tree_id: &'a str) -> &'a str {
    tree_id.strip_prefix(study_id).and_then(|s| s.strip_prefix('/')).unwrap_or(tree_id)
}

impl ArtifactBundle {
    pub fn new(study_id: &str) -> Self {
        ArtifactBundle { study_id: study_id.to_string(), files: BTreeMap::new() }
    }

    pub fn add_tree(&mut self, publication: &TreePublication) {
        let dir = format!("trees/{}", tree_name(&self.study_id, &publication.tree_id));
        self.files.insert(format!("{dir}/publication.json"), pretty(publication));
        self.files.insert(format!("{dir}/vk_ltr.json"), pretty(&publication.vk_ltr));
        self.files.insert(format!("{dir}/vk_mrp.json"), pretty(&publication.vk_mrp));
    }

    pub fn add_statistic(&mut self, result: &StatisticResult, vk_post: &VerifyingKey) {
        self.files.insert(STATISTIC_FILE.into(), pretty(result));
        self.files.insert(VK_POST_FILE.into(), pretty(vk_post));
        self.files.insert(POST_PROOF_FILE.into(), result.post_proof.to_file_string());
    }

    fn file(&self, name: &str) -> anyhow::Result<&str> {
        self.files.get(name).map(String::as_str).ok_or_else(|| anyhow!("bundle lacks `{name}`"))
    }

    pub fn bulletin(&self) -> anyhow::Result<BulletinRecord> {
        Ok(serde_json::from_str(self.file(BULLETIN_FILE)?)?)
    }

    /// Publications in bulletin order; each must match its root on the
    /// bulletin and its separate key files.
    pub fn publications(&self) -> anyhow::Result<Vec<TreePublication>> {
        let bulletin = self.bulletin()?;
        let mut out = Vec::new();
        for (tree_id, root) in &bulletin.roots {
            let dir = format!("trees/{}", tree_name(&self.study_id, tree_id));
            let p: TreePublication = serde_json::from_str(self.file(&format!("{dir}/publication.json"))?)?;
            let vk_ltr: VerifyingKey = serde_json::from_str(self.file(&format!("{dir}/vk_ltr.json"))?)?;
            let vk_mrp: VerifyingKey = serde_json::from_str(self.file(&format!("{dir}/vk_mrp.json"))?)?;
            if &p.tree_id != tree_id || &p.root != root || p.vk_ltr != vk_ltr || p.vk_mrp != vk_mrp {
                bail!("publication for `{tree_id}` disagrees with the bulletin");
            }
            out.push(p);
        }
        Ok(out)
    }

    pub fn publication(&self, tree_id: &str) -> anyhow::Result<TreePublication> {
        self.publications()?
            .into_iter()
            .find(|p| p.tree_id == tree_id)
            .ok_or_else(|| anyhow!("tree `{tree_id}` is not part of study `{}`", self.study_id))
    }

    /// Statistic with its post-aggregation key; the standalone proof file
    /// must agree with the one embedded in the statistic.
    pub fn statistic(&self) -> anyhow::Result<(StatisticResult, VerifyingKey)> {
        let result: StatisticResult = serde_json::from_str(self.file(STATISTIC_FILE)?)?;
        let vk: VerifyingKey = serde_json::from_str(self.file(VK_POST_FILE)?)?;
        let proof = ProofArtifact::from_file_string(self.file(POST_PROOF_FILE)?)?;
        if proof != result.post_proof {
            bail!("post proof file disagrees with the statistic");
        }
        Ok((result, vk))
    }

    pub fn write_dir(&self, dir: &Path) -> anyhow::Result<()> {
        for (name, content) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
        }
        fs::write(dir.join("study_id"), &self.study_id)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> anyhow::Result<Self> {
        let study_id = fs::read_to_string(dir.join("study_id")).with_context(|| format!("{} is not a study bundle", dir.display()))?;
        let mut bundle = ArtifactBundle::new(study_id.trim());
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.extension().is_some_and(|e| e == "json") {
                    let rel = path.strip_prefix(dir)?.to_string_lossy().replace('\\', "/");
                    bundle.files.insert(rel, fs::read_to_string(&path)?);
                }
            }
        }
        Ok(bundle)
    }
}
