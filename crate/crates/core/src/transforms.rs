//! Salted leaf transforms and pairwise level aggregators.
//!
//! A leaf transform maps a participant datum to a fixed-point payload and
//! appends the participant's transform salt as a tag. Aggregators combine
//! two node payloads into their parent; the tag never takes part in the
//! arithmetic.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_fixed, hash_fields, CodecError, Digest256, Field, FixedPoint, TransformSalt, UserSalt, SALT_LEN};

/// Clamp applied to the logistic function before taking logarithms.
pub const LOGISTIC_EPSILON: f64 = 1.0 / (1u64 << 30) as f64;

/// Scales accepted by default.
pub const SUPPORTED_SCALES: [u8; 4] = [8, 10, 12, 14];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("value {value} outside bin range [{lo}, {hi})")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("invalid parameters for `{id}`: {reason}")]
    InvalidParams { id: String, reason: String },
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(f64),
    #[error("duplicate registry id `{0}`")]
    Duplicate(String),
    #[error("unknown transform or aggregator `{0}`")]
    Unknown(String),
    #[error("aggregation overflow")]
    AggregationOverflow,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TransformKind {
    /// Quantize the datum as-is.
    Identity,
    /// One-hot bin membership over half-open intervals `[edges[j], edges[j+1])`.
    Bincount { edges: Vec<f64> },
    /// Per-record Bernoulli log-likelihood of a logistic model. The datum is
    /// `[x_1, .., x_m, y]`; coefficients are `[b_0, b_1, .., b_m]`.
    LogLikelihood { coefficients: Vec<f64> },
    /// 1 when the logistic model's predicted class equals the label.
    ClassAssess { coefficients: Vec<f64> },
    /// Constant 1 per record, used for cohort-size trees.
    Count,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: TransformKind,
    pub input_dim: usize,
    pub scale: u8,
}

impl TransformSpec {
    pub fn new(id: impl Into<String>, kind: TransformKind, input_dim: usize, scale: u8) -> Result<Self, TransformError> {
        let spec = TransformSpec { id: id.into(), kind, input_dim, scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity(id: impl Into<String>, dim: usize, scale: u8) -> Result<Self, TransformError> {
        Self::new(id, TransformKind::Identity, dim, scale)
    }

    pub fn bincount(id: impl Into<String>, edges: Vec<f64>, scale: u8) -> Result<Self, TransformError> {
        Self::new(id, TransformKind::Bincount { edges }, 1, scale)
    }

    pub fn loglik(id: impl Into<String>, coefficients: Vec<f64>, scale: u8) -> Result<Self, TransformError> {
        let d = coefficients.len();
        Self::new(id, TransformKind::LogLikelihood { coefficients }, d, scale)
    }

    pub fn classassess(id: impl Into<String>, coefficients: Vec<f64>, scale: u8) -> Result<Self, TransformError> {
        let d = coefficients.len();
        Self::new(id, TransformKind::ClassAssess { coefficients }, d, scale)
    }

    pub fn count(id: impl Into<String>, input_dim: usize, scale: u8) -> Result<Self, TransformError> {
        Self::new(id, TransformKind::Count, input_dim, scale)
    }

    fn invalid(&self, reason: impl Into<String>) -> TransformError {
        TransformError::InvalidParams { id: self.id.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        if self.scale > crate::codec::MAX_SCALE {
            return Err(CodecError::InvalidScale(self.scale).into());
        }
        match &self.kind {
            TransformKind::Bincount { edges } => {
                if edges.len() < 2 {
                    return Err(self.invalid("need at least two bin edges"));
                }
                if edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less)) {
                    return Err(self.invalid("bin edges must be strictly ascending"));
                }
                if self.input_dim != 1 {
                    return Err(self.invalid("bincount takes a scalar datum"));
                }
            }
            TransformKind::LogLikelihood { coefficients } | TransformKind::ClassAssess { coefficients } => {
                if coefficients.is_empty() || coefficients.iter().any(|c| !c.is_finite()) {
                    return Err(self.invalid("coefficients must be finite and include an intercept"));
                }
                if self.input_dim != coefficients.len() {
                    return Err(self.invalid("datum is features plus label, one per coefficient"));
                }
            }
            TransformKind::Identity | TransformKind::Count => {}
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            TransformKind::Identity => self.input_dim,
            TransformKind::Bincount { edges } => edges.len() - 1,
            TransformKind::LogLikelihood { .. } | TransformKind::ClassAssess { .. } | TransformKind::Count => 1,
        }
    }

    /// Parameter vector θ, in declaration order.
    pub fn params(&self) -> Vec<f64> {
        match &self.kind {
            TransformKind::Bincount { edges } => edges.clone(),
            TransformKind::LogLikelihood { coefficients } | TransformKind::ClassAssess { coefficients } => coefficients.clone(),
            TransformKind::Identity | TransformKind::Count => Vec::new(),
        }
    }

    fn kind_tag(&self) -> &'static str {
        match self.kind {
            TransformKind::Identity => "identity",
            TransformKind::Bincount { .. } => "bincount",
            TransformKind::LogLikelihood { .. } => "loglik",
            TransformKind::ClassAssess { .. } => "classassess",
            TransformKind::Count => "count",
        }
    }

    /// Digest binding the transform family, its parameters and its shape.
    pub fn params_digest(&self) -> Digest256 {
        params_digest(self.kind_tag(), &self.params(), &[self.input_dim as u64, self.output_dim() as u64])
    }

    /// The unsalted transform evaluated in double precision.
    pub fn evaluate(&self, datum: &[f64]) -> Result<Vec<f64>, TransformError> {
        if datum.len() != self.input_dim {
            return Err(TransformError::Shape(format!("transform `{}` expects {} inputs, got {}", self.id, self.input_dim, datum.len())));
        }
        match &self.kind {
            TransformKind::Identity => Ok(datum.to_vec()),
            TransformKind::Bincount { edges } => bincount_transform(datum[0], edges),
            TransformKind::LogLikelihood { coefficients } => {
                let (x, y) = datum.split_at(datum.len() - 1);
                Ok(vec![loglik_transform(x, check_label(y[0])?, coefficients)?])
            }
            TransformKind::ClassAssess { coefficients } => {
                let (x, y) = datum.split_at(datum.len() - 1);
                Ok(vec![classassess_transform(x, check_label(y[0])?, coefficients)? as f64])
            }
            TransformKind::Count => Ok(vec![1.0]),
        }
    }
}

fn params_digest(tag: &str, params: &[f64], shape: &[u64]) -> Digest256 {
    let param_bytes: Vec<[u8; 8]> = params.iter().map(|p| p.to_le_bytes()).collect();
    let shape_bytes: Vec<[u8; 8]> = shape.iter().map(|s| s.to_le_bytes()).collect();
    let mut fields = vec![Field::Bytes(tag.as_bytes())];
    fields.extend(shape_bytes.iter().map(|b| Field::Bytes(b)));
    fields.extend(param_bytes.iter().map(|b| Field::Bytes(b)));
    hash_fields(&fields)
}

fn check_label(y: f64) -> Result<u8, TransformError> {
    if y == 0.0 {
        Ok(0)
    } else if y == 1.0 {
        Ok(1)
    } else {
        Err(TransformError::InvalidLabel(y))
    }
}

/// Output of the salted leaf transform: payload plus the τ tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafValue {
    pub payload: Vec<FixedPoint>,
    #[serde(with = "hex_bytes")]
    pub tau_tag: Vec<u8>,
}

impl LeafValue {
    pub fn digest(&self) -> Digest256 {
        NodeValue::from_leaf(self).digest()
    }
}

/// Aggregated payload at a tree node together with its digest.
///
/// Leaf-level nodes keep the τ tag so their digest is the leaf digest;
/// interior nodes carry no tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeValue {
    payload: Vec<FixedPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex_bytes")]
    tag: Option<Vec<u8>>,
    digest: Digest256,
}

impl NodeValue {
    pub fn internal(payload: Vec<FixedPoint>) -> Self {
        let digest = node_digest(&payload, None);
        NodeValue { payload, tag: None, digest }
    }

    pub fn from_leaf(leaf: &LeafValue) -> Self {
        let digest = node_digest(&leaf.payload, Some(&leaf.tau_tag));
        NodeValue { payload: leaf.payload.clone(), tag: Some(leaf.tau_tag.clone()), digest }
    }

    pub fn payload(&self) -> &[FixedPoint] {
        &self.payload
    }

    pub fn tag(&self) -> Option<&[u8]> {
        self.tag.as_deref()
    }

    pub fn digest(&self) -> Digest256 {
        self.digest
    }

    /// Recompute the digest from the payload; false if a deserialized value
    /// carries a digest that does not match its content.
    pub fn is_consistent(&self) -> bool {
        node_digest(&self.payload, self.tag.as_deref()) == self.digest
    }
}

fn node_digest(payload: &[FixedPoint], tag: Option<&[u8]>) -> Digest256 {
    let mut fields: Vec<Field> = payload.iter().map(|&f| Field::Fixed(f)).collect();
    if let Some(tag) = tag {
        fields.push(Field::Bytes(tag));
    }
    hash_fields(&fields)
}

pub fn apply_salted_transform(
    spec: &TransformSpec,
    datum: &[f64],
    _user_salt: &UserSalt,
    transform_salt: &TransformSalt,
) -> Result<LeafValue, TransformError> {
    // the user salt binds ownership through H(δ,μ); none of the built-in
    // transforms read it
    let values = spec.evaluate(datum)?;
    let payload = values.into_iter().map(|v| encode_fixed(v, spec.scale)).collect::<Result<Vec<_>, _>>()?;
    Ok(LeafValue { payload, tau_tag: transform_salt.as_bytes().to_vec() })
}

pub fn default_element(spec: &TransformSpec) -> LeafValue {
    LeafValue { payload: vec![FixedPoint::zero(spec.scale); spec.output_dim()], tau_tag: vec![0u8; SALT_LEN] }
}

pub fn bincount_transform(value: f64, edges: &[f64]) -> Result<Vec<f64>, TransformError> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less)) {
        return Err(TransformError::InvalidParams {
            id: "bincount".into(),
            reason: "bin edges must be strictly ascending with at least two entries".into(),
        });
    }
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    if !(value >= lo && value < hi) {
        return Err(TransformError::OutOfRange { value, lo, hi });
    }
    // first edge strictly greater than value closes the bin
    let slot = edges.partition_point(|&e| e <= value) - 1;
    let mut out = vec![0.0; edges.len() - 1];
    out[slot] = 1.0;
    Ok(out)
}

fn linear_predictor(x: &[f64], coefficients: &[f64]) -> Result<f64, TransformError> {
    if x.len() + 1 != coefficients.len() {
        return Err(TransformError::Shape(format!("{} features need {} coefficients, got {}", x.len(), x.len() + 1, coefficients.len())));
    }
    Ok(coefficients[0] + x.iter().zip(&coefficients[1..]).map(|(a, b)| a * b).sum::<f64>())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn loglik_transform(x: &[f64], y: u8, coefficients: &[f64]) -> Result<f64, TransformError> {
    let z = linear_predictor(x, coefficients)?;
    let p = sigmoid(z).clamp(LOGISTIC_EPSILON, 1.0 - LOGISTIC_EPSILON);
    Ok(if y == 1 { p.ln() } else { (1.0 - p).ln() })
}

/// Predicted class is 1 when σ(z) ≥ 0.5, i.e. z ≥ 0.
pub fn classassess_transform(x: &[f64], y: u8, coefficients: &[f64]) -> Result<u8, TransformError> {
    let z = linear_predictor(x, coefficients)?;
    let predicted = u8::from(sigmoid(z) >= 0.5);
    Ok(u8::from(predicted == y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    pub id: String,
    pub kind: AggregatorKind,
    #[serde(default)]
    pub params: Vec<f64>,
    pub default_absorbing: bool,
}

impl AggregatorSpec {
    pub fn sum(id: impl Into<String>) -> Self {
        AggregatorSpec { id: id.into(), kind: AggregatorKind::Sum, params: Vec::new(), default_absorbing: true }
    }

    pub const ARITY: usize = 2;

    pub fn params_digest(&self) -> Digest256 {
        let tag = match self.kind {
            AggregatorKind::Sum => "sum",
        };
        params_digest(tag, &self.params, &[Self::ARITY as u64])
    }

    fn validate(&self) -> Result<(), TransformError> {
        if !self.default_absorbing {
            return Err(TransformError::InvalidParams {
                id: self.id.clone(),
                reason: "aggregators must absorb the zero default element".into(),
            });
        }
        Ok(())
    }
}

pub fn aggregate_pair(spec: &AggregatorSpec, left: &NodeValue, right: &NodeValue) -> Result<NodeValue, TransformError> {
    let (l, r) = (left.payload(), right.payload());
    if l.len() != r.len() {
        return Err(TransformError::Shape(format!("payload lengths {} and {} differ", l.len(), r.len())));
    }
    match spec.kind {
        AggregatorKind::Sum => {
            let payload = l
                .iter()
                .zip(r)
                .map(|(a, b)| {
                    if a.scale != b.scale {
                        return Err(TransformError::Shape(format!("scales {} and {} differ", a.scale, b.scale)));
                    }
                    a.checked_add(*b).ok_or(TransformError::AggregationOverflow)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(NodeValue::internal(payload))
        }
    }
}

/// Append-only set of transforms and aggregators.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Registry {
    #[serde(default)]
    transforms: BTreeMap<String, TransformSpec>,
    #[serde(default)]
    aggregators: BTreeMap<String, AggregatorSpec>,
}

#[derive(Deserialize)]
struct RegistryFile {
    #[serde(default)]
    transforms: Vec<TransformSpec>,
    #[serde(default)]
    aggregators: Vec<AggregatorSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the built-in `sum` aggregator.
    pub fn with_builtins() -> Self {
        let mut r = Self::default();
        r.register_aggregator(AggregatorSpec::sum("sum")).expect("fresh registry");
        r
    }

    /// Load `{ "transforms": [...], "aggregators": [...] }` JSON.
    pub fn from_json(text: &str) -> Result<Self, TransformError> {
        let file: RegistryFile =
            serde_json::from_str(text).map_err(|e| TransformError::InvalidParams { id: "<config>".into(), reason: e.to_string() })?;
        let mut r = Self::default();
        for t in file.transforms {
            r.register_transform(t)?;
        }
        for a in file.aggregators {
            r.register_aggregator(a)?;
        }
        Ok(r)
    }

    pub fn register_transform(&mut self, spec: TransformSpec) -> Result<(), TransformError> {
        spec.validate()?;
        if self.transforms.contains_key(&spec.id) {
            return Err(TransformError::Duplicate(spec.id));
        }
        self.transforms.insert(spec.id.clone(), spec);
        Ok(())
    }

    pub fn register_aggregator(&mut self, spec: AggregatorSpec) -> Result<(), TransformError> {
        spec.validate()?;
        if self.aggregators.contains_key(&spec.id) {
            return Err(TransformError::Duplicate(spec.id));
        }
        self.aggregators.insert(spec.id.clone(), spec);
        Ok(())
    }

    pub fn transform(&self, id: &str) -> Result<&TransformSpec, TransformError> {
        self.transforms.get(id).ok_or_else(|| TransformError::Unknown(id.to_string()))
    }

    pub fn aggregator(&self, id: &str) -> Result<&AggregatorSpec, TransformError> {
        self.aggregators.get(id).ok_or_else(|| TransformError::Unknown(id.to_string()))
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

mod opt_hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_str(&hex::encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?.map(|s| hex::decode(s).map_err(serde::de::Error::custom)).transpose()
    }
}
