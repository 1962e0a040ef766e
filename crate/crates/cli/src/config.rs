//! The pipeline configuration document: one JSON object with a section per
//! stage. Every field is optional; missing fields take the defaults below,
//! which run the whole toy pipeline in a few minutes on one core.

use std::fmt;

use gfm_core::model::{bounds, Aggregation, ModelConfig};
use gfm_core::optim::OptimizerConfig;
use gfm_core::telemetry::SamplerConfig;
use gfm_runtime::hpo::{Dimension, SearchSpace};
use gfm_runtime::timing::PhaseClock;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub store: StoreConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub hpo: HpoSection,
    pub telemetry: SamplerConfig,
    pub selection: SelectionSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Structures produced by `generate` and by `preprocess --in synthetic`.
    pub count: usize,
    pub n_atoms_range: (usize, usize),
    /// `(Z, weight)` pairs.
    pub elements: Vec<(u8, f64)>,
    pub box_length: f64,
    pub cutoff_radius: f64,
    pub seed: u64,
    pub source_tag: String,
    /// eV/angstrom.
    pub filter_threshold: f64,
    pub realign: bool,
    pub split: [f64; 3],
    pub subfiles: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = gfm_core::preprocess::SyntheticConfig::default();
        Self {
            count: 200,
            n_atoms_range: (4, 10),
            elements: g.element_distribution,
            box_length: g.box_length,
            cutoff_radius: g.cutoff_radius,
            seed: 0,
            source_tag: g.source_tag,
            filter_threshold: gfm_core::preprocess::DEFAULT_FORCE_THRESHOLD,
            realign: true,
            split: gfm_core::preprocess::DEFAULT_RATIOS,
            subfiles: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub replication: usize,
    /// Records per ownership chunk; `null` gives each rank one contiguous block.
    pub chunk: Option<usize>,
    pub fetch_timeout_s: f64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { replication: 1, chunk: None, fetch_timeout_s: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Launcher {
    /// One thread per rank in this process.
    #[default]
    Thread,
    /// One child process per rank, joined through a rendezvous file.
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub ranks: usize,
    pub launcher: Launcher,
    pub epochs: usize,
    /// `null` disables early stopping.
    pub patience: Option<usize>,
    pub shuffle_seed: u64,
    pub wall_clock_limit_s: Option<f64>,
    pub clock: PhaseClock,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            ranks: 1,
            launcher: Launcher::Thread,
            epochs: 30,
            patience: Some(10),
            shuffle_seed: 0,
            wall_clock_limit_s: None,
            clock: PhaseClock::Wall,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoSection {
    pub workers: usize,
    pub fidelity: usize,
    pub max_trials: usize,
    pub budget_s: Option<f64>,
    pub seed: u64,
    pub n_candidates: usize,
    pub warmup: usize,
    /// Ranks per trial.
    pub ranks: usize,
    pub space: SearchSpace,
}

/// The narrow corner of the search space the default toy pipeline searches.
pub fn toy_space() -> SearchSpace {
    SearchSpace {
        mpnn_kind: Aggregation::ALL.to_vec(),
        mpnn_layers: Dimension::Range { lo: 1, hi: 2, log: false },
        mpnn_width: Dimension::Range { lo: 100, hi: 160, log: true },
        fc_layers: Dimension::Choices(vec![2, 3]),
        fc_width: Dimension::Range { lo: 300, hi: 400, log: true },
        batch_size: Dimension::Choices(vec![16, 32]),
        base: ModelConfig::default(),
    }
}

impl Default for HpoSection {
    fn default() -> Self {
        Self {
            workers: 2,
            fidelity: gfm_runtime::hpo::DEFAULT_FIDELITY,
            max_trials: 8,
            budget_s: None,
            seed: 0,
            n_candidates: gfm_runtime::hpo::DEFAULT_CANDIDATES,
            warmup: gfm_runtime::hpo::DEFAULT_WARMUP,
            ranks: 1,
            space: toy_space(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub tau1: f64,
    pub tau2: f64,
    pub k2: usize,
    /// Full-training schedule for the selected members.
    pub epochs: usize,
    pub patience: Option<usize>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self { tau1: 0.10, tau2: 0.125, k2: 11, epochs: 30, patience: Some(10) }
    }
}

/// One problem found in a document, located by JSON pointer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub pointer: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "{p}: {}", self.message)
    }
}

fn issue(pointer: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue { pointer: pointer.into(), message: message.into() }
}

/// Below these pointers values are checked whole; search dimensions are
/// tagged enums whose keys vary by variant.
const OPAQUE: &[&str] = &["/hpo/space/"];

fn escape(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

/// Walks `doc` beside the default document. Keys the defaults lack are
/// unknown; each leaf is type-checked by substituting it alone into the
/// defaults and deserializing the whole config.
/// Returns the document with every unknown or ill-typed entry dropped, so the
/// value checks can still run on what remains.
fn check_shape(doc: &Value, defaults: &Value, root: &Value, pointer: &str, issues: &mut Vec<ConfigIssue>) -> Option<Value> {
    let opaque = OPAQUE.iter().any(|p| pointer.starts_with(p));
    if let (Value::Object(d), Value::Object(def), false) = (doc, defaults, opaque) {
        let mut kept = serde_json::Map::new();
        for (k, v) in d {
            let p = format!("{pointer}/{}", escape(k));
            match def.get(k) {
                Some(dv) => {
                    if let Some(v) = check_shape(v, dv, root, &p, issues) {
                        kept.insert(k.clone(), v);
                    }
                }
                None => issues.push(issue(p, "unknown key")),
            }
        }
        return Some(Value::Object(kept));
    }
    let mut candidate = root.clone();
    if let Some(slot) = candidate.pointer_mut(pointer) {
        *slot = doc.clone();
    }
    match serde_json::from_value::<PipelineConfig>(candidate) {
        Ok(_) => Some(doc.clone()),
        Err(e) => {
            issues.push(issue(pointer, e.to_string()));
            None
        }
    }
}

fn range_issue(
    issues: &mut Vec<ConfigIssue>,
    pointer: &str,
    value: usize,
    (lo, hi): (usize, usize),
    admissible: &str,
) {
    if value < lo || value > hi {
        issues.push(issue(pointer, format!("{value} is outside the admissible set {admissible}")));
    }
}

fn positive(issues: &mut Vec<ConfigIssue>, pointer: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        issues.push(issue(pointer, format!("must be a positive finite number, got {v}")));
    }
}

fn at_least_one(issues: &mut Vec<ConfigIssue>, pointer: &str, v: usize) {
    if v == 0 {
        issues.push(issue(pointer, "must be at least 1"));
    }
}

impl PipelineConfig {
    /// Value checks on an already well-typed config; every problem is listed.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let m = &self.model;
        range_issue(&mut out, "/model/mpnn_layers", m.mpnn_layers, bounds::MPNN_LAYERS, "{1..6}");
        range_issue(&mut out, "/model/mpnn_width", m.mpnn_width, bounds::MPNN_WIDTH, "{100..2000}");
        range_issue(&mut out, "/model/fc_layers", m.fc_layers, bounds::FC_LAYERS, "{2,3}");
        range_issue(&mut out, "/model/fc_width", m.fc_width, bounds::FC_WIDTH, "{300..1000}");
        range_issue(&mut out, "/model/batch_size", m.batch_size, bounds::BATCH_SIZE, "{16..128}");
        positive(&mut out, "/model/learning_rate", m.learning_rate);
        positive(&mut out, "/model/alpha_energy", m.alpha_energy);
        positive(&mut out, "/model/alpha_forces", m.alpha_forces);

        let d = &self.data;
        at_least_one(&mut out, "/data/count", d.count);
        let (lo, hi) = d.n_atoms_range;
        if lo == 0 || lo > hi {
            out.push(issue("/data/n_atoms_range", format!("need 1 <= lo <= hi, got [{lo}, {hi}]")));
        }
        if d.elements.is_empty() || d.elements.iter().all(|&(_, w)| !(w > 0.0)) {
            out.push(issue("/data/elements", "needs at least one element with positive weight"));
        }
        for (i, &(z, w)) in d.elements.iter().enumerate() {
            if z == 0 || z as usize > gfm_core::elements::MAX_Z {
                out.push(issue(format!("/data/elements/{i}/0"), format!("element {z} outside 1..=118")));
            }
            if !(w >= 0.0 && w.is_finite()) {
                out.push(issue(format!("/data/elements/{i}/1"), format!("weight must be finite and >= 0, got {w}")));
            }
        }
        positive(&mut out, "/data/box_length", d.box_length);
        positive(&mut out, "/data/cutoff_radius", d.cutoff_radius);
        positive(&mut out, "/data/filter_threshold", d.filter_threshold);
        if d.split.iter().any(|&r| !(r > 0.0)) || (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            out.push(issue("/data/split", format!("ratios must be positive and sum to 1, got {:?}", d.split)));
        }
        if d.subfiles == 0 {
            out.push(issue("/data/subfiles", "must be at least 1"));
        }

        at_least_one(&mut out, "/store/replication", self.store.replication);
        if self.store.chunk == Some(0) {
            out.push(issue("/store/chunk", "must be at least 1 or null"));
        }
        positive(&mut out, "/store/fetch_timeout_s", self.store.fetch_timeout_s);

        let t = &self.train;
        at_least_one(&mut out, "/train/ranks", t.ranks);
        if t.ranks % self.store.replication.max(1) != 0 {
            out.push(issue(
                "/train/ranks",
                format!("{} ranks cannot form {} replica groups", t.ranks, self.store.replication),
            ));
        }
        if let Some(w) = t.wall_clock_limit_s {
            if !(w >= 0.0) {
                out.push(issue("/train/wall_clock_limit_s", format!("must be >= 0, got {w}")));
            }
        }

        let h = &self.hpo;
        at_least_one(&mut out, "/hpo/workers", h.workers);
        at_least_one(&mut out, "/hpo/n_candidates", h.n_candidates);
        at_least_one(&mut out, "/hpo/ranks", h.ranks);
        if let Some(b) = h.budget_s {
            if !(b >= 0.0) {
                out.push(issue("/hpo/budget_s", format!("must be >= 0, got {b}")));
            }
        }
        out.extend(space_issues(&h.space, "/hpo/space"));

        positive(&mut out, "/telemetry/interval_s", self.telemetry.interval_s);
        let p = &self.telemetry.power;
        if !(p.idle_watts >= 0.0 && p.idle_watts <= p.peak_watts && p.peak_watts.is_finite()) {
            out.push(issue("/telemetry/power", format!("need 0 <= idle_watts <= peak_watts, got {p:?}")));
        }

        let s = &self.selection;
        if !(s.tau1 > 0.0 && s.tau1 < s.tau2 && s.tau2.is_finite()) {
            out.push(issue("/selection/tau1", format!("need 0 < tau1 < tau2, got tau1={} tau2={}", s.tau1, s.tau2)));
        }
        at_least_one(&mut out, "/selection/epochs", s.epochs);
        out
    }
}

/// Structural checks plus the admissible hyperparameter sets.
pub fn space_issues(space: &SearchSpace, pointer: &str) -> Vec<ConfigIssue> {
    let mut out = Vec::new();
    if let Err(e) = space.validate() {
        out.push(issue(pointer, e.to_string()));
        return out;
    }
    let dims: [(&str, &Dimension, (usize, usize), &str); 5] = [
        ("mpnn_layers", &space.mpnn_layers, bounds::MPNN_LAYERS, "{1..6}"),
        ("mpnn_width", &space.mpnn_width, bounds::MPNN_WIDTH, "{100..2000}"),
        ("fc_layers", &space.fc_layers, bounds::FC_LAYERS, "{2,3}"),
        ("fc_width", &space.fc_width, bounds::FC_WIDTH, "{300..1000}"),
        ("batch_size", &space.batch_size, bounds::BATCH_SIZE, "{16..128}"),
    ];
    for (name, dim, (lo, hi), admissible) in dims {
        if dim.min() < lo || dim.max() > hi {
            out.push(issue(
                format!("{pointer}/{name}"),
                format!("values {}..={} leave the admissible set {admissible}", dim.min(), dim.max()),
            ));
        }
    }
    out
}

/// Parses and checks a document. Whitespace-only text is the empty document.
/// On success the config holds every effective value, defaults included.
pub fn validate_config(text: &str) -> Result<PipelineConfig, Vec<ConfigIssue>> {
    let doc: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| vec![issue("", format!("not valid JSON: {e}"))])?
    };
    validate_value(&doc)
}

pub fn validate_value(doc: &Value) -> Result<PipelineConfig, Vec<ConfigIssue>> {
    if !doc.is_object() {
        return Err(vec![issue("", "the document must be a JSON object")]);
    }
    let defaults = serde_json::to_value(PipelineConfig::default()).expect("defaults serialize");
    let mut issues = Vec::new();
    let kept = check_shape(doc, &defaults, &defaults, "", &mut issues).expect("the root is an object");
    let cfg: PipelineConfig = match serde_json::from_value(kept) {
        Ok(cfg) => cfg,
        Err(e) => {
            issues.push(issue("", e.to_string()));
            return Err(issues);
        }
    };
    issues.extend(cfg.issues());
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(issues)
    }
}

/// The normalized echo of a config: every field, pretty-printed.
pub fn normalized(cfg: &PipelineConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert_eq!(PipelineConfig::default().issues(), vec![]);
        assert_eq!(validate_config("").unwrap(), PipelineConfig::default());
        assert_eq!(validate_config("{}").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn escaped_keys() {
        let e = validate_config(r#"{"data": {"a/b": 1}}"#).unwrap_err();
        assert_eq!(e[0].pointer, "/data/a~1b");
    }

    #[test]
    fn non_object_document() {
        assert_eq!(validate_config("[1]").unwrap_err()[0].pointer, "");
        assert!(validate_config("{").unwrap_err()[0].message.starts_with("not valid JSON"));
    }
}
