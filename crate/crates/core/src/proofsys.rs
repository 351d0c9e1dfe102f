//! Setup / Prove / Verify over a re-execution transcript backend.
//!
//! `prove` re-runs the circuit on the private witness and refuses to issue an
//! artifact unless the claimed public digests are exactly what the circuit
//! computes. The artifact carries only the named publics and a binding tag
//! `hash(vk ‖ publics)`. This is not a succinct argument: holders of a
//! verifying key can produce a valid tag for any publics, so soundness rests
//! on the prover running this code honestly.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    hash_bit, hash_fields, hash_nonce, hash_raw_record, hash_transform_salt, CodecError, Digest256, Field, TransformSalt, UserSalt,
};
use crate::transforms::{aggregate_pair, apply_salted_transform, AggregatorSpec, NodeValue, TransformError, TransformSpec};

pub const BACKEND_NAME: &str = "transcript-sha256";
pub const ARTIFACT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_LAMBDA: u32 = 128;

pub const INPUT1: &str = "Input1";
pub const INPUT2: &str = "Input2";
pub const OUTPUT: &str = "Output";
pub const LEFT_INPUT: &str = "LeftInput";
pub const RIGHT_INPUT: &str = "RightInput";
pub const PARENT: &str = "Parent";
pub const BIT: &str = "Bit";
pub const NONCE: &str = "Nonce";

#[derive(Debug, Error)]
pub enum ProofError {
    #[error("unknown circuit: {0}")]
    UnknownCircuit(String),
    #[error("witness does not produce the claimed public `{0}`")]
    WitnessMismatch(String),
    #[error("circuit evaluation failed: {0}")]
    Circuit(String),
    #[error("witness kind does not fit a {0} circuit")]
    KeyKind(CircuitKind),
    #[error("security parameter {lambda} needs a {expected}-byte seed, got {actual}")]
    Seed { lambda: u32, expected: usize, actual: usize },
    #[error("security parameter must be a positive multiple of 8, got {0}")]
    Lambda(u32),
    #[error("artifact file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CircuitKind {
    Ltr,
    Mrp,
    Post,
}

impl fmt::Display for CircuitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CircuitKind::Ltr => "LTR",
            CircuitKind::Mrp => "MRP",
            CircuitKind::Post => "POST",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CircuitId {
    pub kind: CircuitKind,
    pub spec_id: String,
    pub params_digest: Digest256,
    pub scale: u8,
}

impl CircuitId {
    pub fn to_bytes(&self) -> Vec<u8> {
        let kind = self.kind.to_string();
        crate::codec::canonical_serialize(&[
            Field::Bytes(kind.as_bytes()),
            Field::Bytes(self.spec_id.as_bytes()),
            Field::Bytes(self.params_digest.as_bytes()),
            Field::Bytes(&[self.scale]),
        ])
        .expect("circuit id fits")
    }
}

impl fmt::Display for CircuitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}@{}", self.kind, self.spec_id, self.scale)
    }
}

/// Ordered named public digests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Publics(Vec<PublicField>);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicField {
    pub name: String,
    pub value: Digest256,
}

impl Publics {
    pub fn new(fields: impl IntoIterator<Item = (impl Into<String>, Digest256)>) -> Self {
        Publics(fields.into_iter().map(|(n, v)| PublicField { name: n.into(), value: v }).collect())
    }

    pub fn get(&self, name: &str) -> Option<Digest256> {
        self.0.iter().find(|f| f.name == name).map(|f| f.value)
    }

    pub fn fields(&self) -> &[PublicField] {
        &self.0
    }

    pub fn fields_mut(&mut self) -> &mut [PublicField] {
        &mut self.0
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut fields = Vec::with_capacity(self.0.len() * 2);
        for f in &self.0 {
            fields.push(Field::Bytes(f.name.as_bytes()));
            fields.push(Field::Bytes(f.value.as_bytes()));
        }
        crate::codec::canonical_serialize(&fields).expect("publics fit")
    }
}

/// Private inputs for one circuit execution.
#[derive(Clone, Debug)]
pub enum Witness {
    Ltr { datum: Vec<f64>, user_salt: UserSalt, transform_salt: TransformSalt },
    Mrp { left: NodeValue, right: NodeValue, bit: u8, nonce: Vec<u8> },
    Post { inputs: Vec<NodeValue> },
}

pub trait Circuit: Send + Sync + fmt::Debug {
    fn id(&self) -> CircuitId;
    /// Run the circuit and return the public digests it exposes.
    fn execute(&self, witness: &Witness) -> Result<Publics, ProofError>;
}

/// Salted leaf transform circuit: (δ, μ, τ) ↦ {H(δ,μ), H(τ), H(leaf)}.
#[derive(Clone, Debug)]
pub struct LtrCircuit {
    spec: TransformSpec,
}

impl LtrCircuit {
    pub fn new(spec: TransformSpec) -> Self {
        LtrCircuit { spec }
    }
}

impl Circuit for LtrCircuit {
    fn id(&self) -> CircuitId {
        CircuitId {
            kind: CircuitKind::Ltr,
            spec_id: self.spec.id.clone(),
            params_digest: self.spec.params_digest(),
            scale: self.spec.scale,
        }
    }

    fn execute(&self, witness: &Witness) -> Result<Publics, ProofError> {
        let Witness::Ltr { datum, user_salt, transform_salt } = witness else {
            return Err(ProofError::KeyKind(CircuitKind::Ltr));
        };
        let leaf = apply_salted_transform(&self.spec, datum, user_salt, transform_salt)?;
        Ok(Publics::new([
            (INPUT1, hash_raw_record(datum, user_salt)),
            (INPUT2, hash_transform_salt(transform_salt)),
            (OUTPUT, leaf.digest()),
        ]))
    }
}

/// One aggregation hop: (left, right, bit, η) ↦ digests of each plus the parent.
#[derive(Clone, Debug)]
pub struct MrpCircuit {
    aggregator: AggregatorSpec,
    width: usize,
    scale: u8,
}

impl MrpCircuit {
    pub fn new(aggregator: AggregatorSpec, width: usize, scale: u8) -> Self {
        MrpCircuit { aggregator, width, scale }
    }

    pub fn for_transform(aggregator: AggregatorSpec, transform: &TransformSpec) -> Self {
        Self::new(aggregator, transform.output_dim(), transform.scale)
    }
}

impl Circuit for MrpCircuit {
    fn id(&self) -> CircuitId {
        let agg = self.aggregator.params_digest();
        let width = (self.width as u64).to_le_bytes();
        CircuitId {
            kind: CircuitKind::Mrp,
            spec_id: self.aggregator.id.clone(),
            params_digest: hash_fields(&[Field::Bytes(agg.as_bytes()), Field::Bytes(&width)]),
            scale: self.scale,
        }
    }

    fn execute(&self, witness: &Witness) -> Result<Publics, ProofError> {
        let Witness::Mrp { left, right, bit, nonce } = witness else {
            return Err(ProofError::KeyKind(CircuitKind::Mrp));
        };
        for (name, node) in [(LEFT_INPUT, left), (RIGHT_INPUT, right)] {
            let shape_ok = node.payload().len() == self.width && node.payload().iter().all(|f| f.scale == self.scale);
            if !shape_ok || !node.is_consistent() {
                return Err(ProofError::WitnessMismatch(name.into()));
            }
        }
        if *bit > 1 {
            return Err(ProofError::WitnessMismatch(BIT.into()));
        }
        let parent = aggregate_pair(&self.aggregator, left, right)?;
        Ok(Publics::new([
            (LEFT_INPUT, left.digest()),
            (RIGHT_INPUT, right.digest()),
            (PARENT, parent.digest()),
            (BIT, hash_bit(*bit)),
            (NONCE, hash_nonce(nonce)),
        ]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerifyingKey {
    pub circuit: CircuitId,
    pub lambda: u32,
    pub binding_key: Digest256,
}

impl VerifyingKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        let lambda = self.lambda.to_le_bytes();
        let circuit = self.circuit.to_bytes();
        crate::codec::canonical_serialize(&[Field::Bytes(&circuit), Field::Bytes(&lambda), Field::Bytes(self.binding_key.as_bytes())])
            .expect("vk fits")
    }

    pub fn fingerprint(&self) -> Digest256 {
        crate::codec::hash_node(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), ProofError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| ProofError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProofError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ProofError::Format(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct ProvingKey {
    circuit: Arc<dyn Circuit>,
    id: CircuitId,
    lambda: u32,
    seed_digest: Digest256,
}

impl ProvingKey {
    pub fn circuit_id(&self) -> &CircuitId {
        &self.id
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        let circuit = self.id.to_bytes();
        VerifyingKey {
            circuit: self.id.clone(),
            lambda: self.lambda,
            binding_key: hash_fields(&[Field::Bytes(b"vk"), Field::Bytes(&circuit), Field::Bytes(self.seed_digest.as_bytes())]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub pk: ProvingKey,
    pub vk: VerifyingKey,
}

/// Derive a backend seed of λ/8 bytes from a deployment label.
pub fn backend_seed(lambda: u32, label: &[u8]) -> Result<Vec<u8>, ProofError> {
    check_lambda(lambda)?;
    let mut out = Vec::with_capacity(lambda as usize / 8);
    let mut counter = 0u32;
    while out.len() < lambda as usize / 8 {
        let block = hash_fields(&[Field::Bytes(b"seed"), Field::Bytes(label), Field::Bytes(&counter.to_le_bytes())]);
        out.extend_from_slice(block.as_bytes());
        counter += 1;
    }
    out.truncate(lambda as usize / 8);
    Ok(out)
}

fn check_lambda(lambda: u32) -> Result<(), ProofError> {
    if lambda == 0 || !lambda.is_multiple_of(8) {
        return Err(ProofError::Lambda(lambda));
    }
    Ok(())
}

pub fn setup(circuit: Arc<dyn Circuit>, lambda: u32, seed: &[u8]) -> Result<KeyPair, ProofError> {
    check_lambda(lambda)?;
    let expected = lambda as usize / 8;
    if seed.len() != expected {
        return Err(ProofError::Seed { lambda, expected, actual: seed.len() });
    }
    let id = circuit.id();
    let circuit_bytes = id.to_bytes();
    let seed_digest =
        hash_fields(&[Field::Bytes(b"setup"), Field::Bytes(&circuit_bytes), Field::Bytes(&lambda.to_le_bytes()), Field::Bytes(seed)]);
    let pk = ProvingKey { circuit, id, lambda, seed_digest };
    let vk = pk.verifying_key();
    Ok(KeyPair { pk, vk })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofArtifact {
    pub circuit: CircuitId,
    pub publics: Publics,
    pub binding: Digest256,
}

fn binding_tag(vk: &VerifyingKey, publics: &Publics) -> Digest256 {
    let mut bytes = vk.to_bytes();
    bytes.extend_from_slice(&publics.canonical_bytes());
    crate::codec::hash_node(&bytes)
}

impl ProofArtifact {
    pub fn get(&self, name: &str) -> Option<Digest256> {
        self.publics.get(name)
    }

    pub fn to_file_string(&self) -> String {
        let file = ArtifactFile { format_version: ARTIFACT_FORMAT_VERSION, backend: BACKEND_NAME.into(), artifact: self.clone() };
        serde_json::to_string_pretty(&file).expect("artifact serializes")
    }

    pub fn from_file_string(text: &str) -> Result<Self, ProofError> {
        let file: ArtifactFile = serde_json::from_str(text).map_err(|e| ProofError::Format(e.to_string()))?;
        if file.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(ProofError::Format(format!("unsupported version {}", file.format_version)));
        }
        if file.backend != BACKEND_NAME {
            return Err(ProofError::Format(format!("unsupported backend `{}`", file.backend)));
        }
        Ok(file.artifact)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProofError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProofError> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ArtifactFile {
    format_version: u32,
    backend: String,
    #[serde(flatten)]
    artifact: ProofArtifact,
}

pub fn prove(pk: &ProvingKey, witness: &Witness, claimed: &Publics) -> Result<ProofArtifact, ProofError> {
    let computed = pk.circuit.execute(witness)?;
    if computed.fields().len() != claimed.fields().len() {
        return Err(ProofError::WitnessMismatch("<field count>".into()));
    }
    for (c, p) in computed.fields().iter().zip(claimed.fields()) {
        if c.name != p.name || c.value != p.value {
            return Err(ProofError::WitnessMismatch(p.name.clone()));
        }
    }
    let vk = pk.verifying_key();
    Ok(ProofArtifact { circuit: pk.id.clone(), binding: binding_tag(&vk, &computed), publics: computed })
}

/// Execute the circuit and prove whatever publics it yields.
pub fn prove_computed(pk: &ProvingKey, witness: &Witness) -> Result<ProofArtifact, ProofError> {
    let publics = pk.circuit.execute(witness)?;
    prove(pk, witness, &publics)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    BadBinding,
    FieldMismatch,
    UnknownCircuit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub flag: bool,
    pub failure_reason: Option<FailureReason>,
}

impl VerificationOutcome {
    pub const PASS: VerificationOutcome = VerificationOutcome { flag: true, failure_reason: None };

    pub fn fail(reason: FailureReason) -> Self {
        VerificationOutcome { flag: false, failure_reason: Some(reason) }
    }
}

pub fn verify(vk: &VerifyingKey, artifact: &ProofArtifact) -> VerificationOutcome {
    if artifact.circuit != vk.circuit {
        return VerificationOutcome::fail(FailureReason::UnknownCircuit);
    }
    if binding_tag(vk, &artifact.publics) != artifact.binding {
        return VerificationOutcome::fail(FailureReason::BadBinding);
    }
    VerificationOutcome::PASS
}
