//! Spherical class prototypes, marginal-flow selection, and background
//! similarity filtering.
//!
//! Every known class gets a prototype: the centroid of its training
//! embeddings and a decision-boundary radius. A training flow is *marginal*
//! when it sits inside its class sphere but within `epsilon` of the boundary
//! — these are the flows the GAN later imitates to simulate unknowns.
//!
//! Marginal flows caused by third-party-library reuse look like several
//! classes at once and would teach the GAN to imitate *known* traffic.
//! The background filter removes a marginal flow when its destination
//! tuple, SNI, or certificate digest appears in more than one class of the
//! training set.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{BackgroundMeta, FlowRecord};

/// Euclidean distance between two embeddings.
pub fn euclidean(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Per-class spherical prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_id: String,
    pub centroid: Array1<f64>,
    /// Decision-boundary radius; zero until a radius policy is applied.
    pub radius: f64,
    pub member_count: usize,
}

/// How the boundary radius is derived from member distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadiusPolicy {
    /// Maximum member distance: every member satisfies the boundary
    /// constraint exactly.
    Max,
    /// Linear-interpolated quantile of member distances (between order
    /// statistics at rank `(n-1) * q`); blunts outlier inflation.
    Quantile(f64),
}

impl Default for RadiusPolicy {
    fn default() -> Self {
        RadiusPolicy::Quantile(0.95)
    }
}

/// How the margin width is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EpsilonRule {
    /// `epsilon = fraction * radius`, per class; transfers across embedding
    /// scales.
    RelativeToRadius(f64),
    /// One absolute width for all classes.
    Absolute(f64),
}

impl Default for EpsilonRule {
    fn default() -> Self {
        EpsilonRule::RelativeToRadius(0.1)
    }
}

impl EpsilonRule {
    fn validate(&self) -> Result<()> {
        let v = match self {
            EpsilonRule::RelativeToRadius(f) => *f,
            EpsilonRule::Absolute(v) => *v,
        };
        if v <= 0.0 {
            return Err(Error::Config(format!("epsilon must be positive, got {v}")));
        }
        Ok(())
    }

    fn resolve(&self, radius: f64) -> f64 {
        match self {
            EpsilonRule::RelativeToRadius(f) => f * radius,
            EpsilonRule::Absolute(v) => *v,
        }
    }
}

/// A flow joined with its embedding; the working record of this stage.
#[derive(Debug, Clone)]
pub struct EmbeddedFlow {
    pub flow_id: String,
    pub class_id: String,
    pub embedding: Array1<f64>,
    pub background: BackgroundMeta,
}

/// One marginal flow with its boundary geometry and filter outcome.
#[derive(Debug, Clone)]
pub struct MarginalEntry {
    pub flow_id: String,
    pub class_id: String,
    pub embedding: Array1<f64>,
    pub distance: f64,
    /// Radius of the flow's class sphere.
    pub delta: f64,
    pub background: BackgroundMeta,
    pub kept: bool,
    pub removal_reason: Option<String>,
}

/// The selected marginal flows, margin widths used, and any warnings.
#[derive(Debug, Clone, Default)]
pub struct MarginalFlowSet {
    pub entries: Vec<MarginalEntry>,
    pub epsilon_by_class: BTreeMap<String, f64>,
    /// Flows examined during selection.
    pub total_flows: usize,
    pub warnings: Vec<String>,
}

impl MarginalFlowSet {
    /// Entries selected as marginal (before/regardless of filtering).
    pub fn selected_count(&self) -> usize {
        self.entries.len()
    }

    /// Entries still kept after filtering.
    pub fn kept_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kept).count()
    }

    pub fn kept(&self) -> impl Iterator<Item = &MarginalEntry> {
        self.entries.iter().filter(|e| e.kept)
    }

    /// Kept embeddings, in entry order.
    pub fn kept_embeddings(&self) -> Vec<Array1<f64>> {
        self.kept().map(|e| e.embedding.clone()).collect()
    }

    /// Export as line-delimited JSON records
    /// `{flow_id, class, distance, delta, kept, removal_reason}`.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            flow_id: &'a str,
            class: &'a str,
            distance: f64,
            delta: f64,
            kept: bool,
            removal_reason: Option<&'a str>,
        }
        let mut out = BufWriter::new(File::create(path.as_ref())?);
        for e in &self.entries {
            let line = Line {
                flow_id: &e.flow_id,
                class: &e.class_id,
                distance: e.distance,
                delta: e.delta,
                kept: e.kept,
                removal_reason: e.removal_reason.as_deref(),
            };
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Group embedded flows by class, sorted by class id.
pub fn group_by_class(flows: &[EmbeddedFlow]) -> BTreeMap<String, Vec<&EmbeddedFlow>> {
    let mut grouped: BTreeMap<String, Vec<&EmbeddedFlow>> = BTreeMap::new();
    for f in flows {
        grouped.entry(f.class_id.clone()).or_default().push(f);
    }
    grouped
}

/// Arithmetic-mean centroid of one class.
pub fn compute_centroid(embeddings: &[Array1<f64>]) -> Result<Array1<f64>> {
    if embeddings.is_empty() {
        return Err(Error::InvalidInput(
            "cannot compute a centroid of an empty class".to_string(),
        ));
    }
    let dim = embeddings[0].len();
    let mut sum = Array1::<f64>::zeros(dim);
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::ShapeMismatch {
                what: "class embeddings".to_string(),
                expected: format!("dim {dim}"),
                got: format!("dim {}", e.len()),
            });
        }
        sum += e;
    }
    Ok(sum / embeddings.len() as f64)
}

/// Centroids (radius zero) for every class, in class-id order.
pub fn compute_centroids(
    grouped: &BTreeMap<String, Vec<Array1<f64>>>,
) -> Result<Vec<ClassPrototype>> {
    grouped
        .iter()
        .map(|(class, embs)| {
            Ok(ClassPrototype {
                class_id: class.clone(),
                centroid: compute_centroid(embs)?,
                radius: 0.0,
                member_count: embs.len(),
            })
        })
        .collect()
}

/// Boundary radius of one class under a policy.
pub fn compute_radius(
    embeddings: &[Array1<f64>],
    centroid: &Array1<f64>,
    policy: RadiusPolicy,
) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::InvalidInput(
            "cannot compute a radius over an empty class".to_string(),
        ));
    }
    let mut distances: Vec<f64> = embeddings.iter().map(|e| euclidean(e, centroid)).collect();
    match policy {
        RadiusPolicy::Max => Ok(distances.iter().cloned().fold(0.0, f64::max)),
        RadiusPolicy::Quantile(q) => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!(
                    "quantile must be in (0, 1], got {q}"
                )));
            }
            distances.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let n = distances.len();
            let h = q * (n - 1) as f64;
            let lo = h.floor() as usize;
            let frac = h - lo as f64;
            let val = if lo + 1 < n {
                distances[lo] + frac * (distances[lo + 1] - distances[lo])
            } else {
                distances[lo]
            };
            Ok(val)
        }
    }
}

/// Centroid plus radius for every class.
pub fn build_prototypes(
    grouped: &BTreeMap<String, Vec<Array1<f64>>>,
    policy: RadiusPolicy,
) -> Result<Vec<ClassPrototype>> {
    let mut prototypes = compute_centroids(grouped)?;
    for p in &mut prototypes {
        p.radius = compute_radius(&grouped[&p.class_id], &p.centroid, policy)?;
    }
    Ok(prototypes)
}

/// Select the flows within `epsilon` of their own class boundary.
///
/// A flow is marginal exactly when `distance <= delta` and
/// `delta - distance < epsilon` against its class prototype. Flows outside
/// the sphere (possible under a quantile radius) are not marginal. Emits a
/// warning when the selection is not small relative to the corpus
/// (more than 30%).
pub fn select_marginal(
    prototypes: &[ClassPrototype],
    flows: &[EmbeddedFlow],
    epsilon: EpsilonRule,
) -> Result<MarginalFlowSet> {
    epsilon.validate()?;
    let by_class: BTreeMap<&str, &ClassPrototype> = prototypes
        .iter()
        .map(|p| (p.class_id.as_str(), p))
        .collect();

    let mut set = MarginalFlowSet {
        total_flows: flows.len(),
        ..Default::default()
    };
    for p in prototypes {
        set.epsilon_by_class
            .insert(p.class_id.clone(), epsilon.resolve(p.radius));
    }
    for f in flows {
        let proto = by_class.get(f.class_id.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!("no prototype for class {:?}", f.class_id))
        })?;
        let eps = set.epsilon_by_class[&f.class_id];
        let distance = euclidean(&f.embedding, &proto.centroid);
        if distance <= proto.radius && proto.radius - distance < eps {
            set.entries.push(MarginalEntry {
                flow_id: f.flow_id.clone(),
                class_id: f.class_id.clone(),
                embedding: f.embedding.clone(),
                distance,
                delta: proto.radius,
                background: f.background.clone(),
                kept: true,
                removal_reason: None,
            });
        }
    }
    if set.entries.len() * 10 > flows.len() * 3 {
        set.warnings.push(format!(
            "marginal set is not small: {} of {} flows selected (> 30%)",
            set.entries.len(),
            flows.len()
        ));
    }
    Ok(set)
}

/// Class sets per background key, built from the full training set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackgroundIndex {
    dst: BTreeMap<String, BTreeSet<String>>,
    sni: BTreeMap<String, BTreeSet<String>>,
    cert: BTreeMap<String, BTreeSet<String>>,
}

impl BackgroundIndex {
    pub fn dst_classes(&self, key: &str) -> Option<&BTreeSet<String>> {
        self.dst.get(key)
    }

    pub fn sni_classes(&self, key: &str) -> Option<&BTreeSet<String>> {
        self.sni.get(key)
    }

    pub fn cert_classes(&self, key: &str) -> Option<&BTreeSet<String>> {
        self.cert.get(key)
    }

    /// When this background is homogeneous (any key in multiple classes),
    /// the reason it should be filtered.
    pub fn shared_reason(&self, meta: &BackgroundMeta) -> Option<String> {
        let tuple = meta.dst_tuple();
        if let Some(classes) = self.dst.get(&tuple) {
            if classes.len() >= 2 {
                return Some(format!("dst tuple {tuple} appears in {} classes", classes.len()));
            }
        }
        if let Some(sni) = &meta.sni {
            if let Some(classes) = self.sni.get(sni) {
                if classes.len() >= 2 {
                    return Some(format!("sni {sni} appears in {} classes", classes.len()));
                }
            }
        }
        if let Some(cert) = &meta.cert_digest {
            if let Some(classes) = self.cert.get(cert) {
                if classes.len() >= 2 {
                    return Some(format!(
                        "cert digest {cert} appears in {} classes",
                        classes.len()
                    ));
                }
            }
        }
        None
    }
}

/// Index every labeled training flow's background keys by class. Flows
/// without an SNI or certificate contribute nothing to those maps.
pub fn build_background_index(flows: &[FlowRecord]) -> BackgroundIndex {
    let mut index = BackgroundIndex::default();
    for f in flows {
        if f.label.is_empty() {
            continue;
        }
        index
            .dst
            .entry(f.background.dst_tuple())
            .or_default()
            .insert(f.label.clone());
        if let Some(sni) = &f.background.sni {
            index.sni.entry(sni.clone()).or_default().insert(f.label.clone());
        }
        if let Some(cert) = &f.background.cert_digest {
            index
                .cert
                .entry(cert.clone())
                .or_default()
                .insert(f.label.clone());
        }
    }
    index
}

/// Remove marginal flows whose background appears in multiple classes.
///
/// Filtering only ever removes entries (marks them not kept); a flow whose
/// destination tuple, SNI, and certificate are all single-class is always
/// retained.
pub fn background_filter(mut marginal: MarginalFlowSet, index: &BackgroundIndex) -> MarginalFlowSet {
    for entry in &mut marginal.entries {
        if !entry.kept {
            continue;
        }
        if let Some(reason) = index.shared_reason(&entry.background) {
            entry.kept = false;
            entry.removal_reason = Some(reason);
        }
    }
    marginal
}
