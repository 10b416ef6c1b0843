//! Run configuration: one JSON document holding every knob a run depends
//! on, validated up front so later stages never improvise defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use leakscope::cohort::CohortRule;
use leakscope::eval::DEFAULT_KEYWORDS;
use leakscope::protocol::PrefixSchedule;
use leakscope::synth::SynthSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// OpenAI-compatible base URL; unused under the mock oracle.
    pub base_url: Option<String>,
    pub model: String,
    pub concurrency: usize,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Base retry backoff in milliseconds.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: None,
            model: "mock-oracle".to_string(),
            concurrency: 4,
            max_retries: 3,
            timeout_secs: 60,
            temperature: 0.0,
            max_tokens: 512,
            backoff_ms: 250,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestConfig {
    /// Directory with one subdirectory per user holding export files.
    pub exports_dir: PathBuf,
    /// Survey CSV keyed by user_id.
    pub survey: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Corpus file consumed by filter/audit/cohort/infer; stages fall back
    /// to `<out_dir>/corpus.jsonl` when unset.
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub endpoint: EndpointConfig,
    /// Answer from the deterministic mock instead of any network endpoint.
    pub mock_oracle: bool,
    /// Prefix percentages, ascending, ending at 100.
    pub schedule: Vec<u32>,
    pub cohort: CohortRule,
    /// Attributes targeted by `infer`.
    pub attributes: Vec<String>,
    /// Stream kinds targeted by `infer`.
    pub kinds: Vec<String>,
    pub keywords: Vec<String>,
    pub seed: u64,
    /// External NER service URL; the bundled gazetteer flagger when unset.
    pub entity_flagger_url: Option<String>,
    /// Custom gazetteer table (kind<TAB>surface per line); bundled when unset.
    pub gazetteer_path: Option<PathBuf>,
    pub english_threshold: f64,
    pub histogram_bin_width: f64,
    pub leak_grid_steps: usize,
    /// Rationales sampled per ground-truth class by `evaluate`.
    pub sample_per_class: usize,
    pub synth: SynthSpec,
    pub ingest: Option<IngestConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            out_dir: PathBuf::from("runs/out"),
            endpoint: EndpointConfig::default(),
            mock_oracle: true,
            schedule: PrefixSchedule::default().percentages().to_vec(),
            cohort: CohortRule::default(),
            attributes: vec!["Age".into(), "Gender".into(), "Country".into()],
            kinds: vec!["ChatAssistant".into()],
            keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            seed: 42,
            entity_flagger_url: None,
            gazetteer_path: None,
            english_threshold: leakscope::filter::DEFAULT_ENGLISH_THRESHOLD,
            histogram_bin_width: 5.0,
            leak_grid_steps: leakscope::audit::DEFAULT_LEAK_STEPS,
            sample_per_class: 200,
            synth: SynthSpec::default(),
            ingest: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text =
            std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    /// Field-level validation; returns every problem, not just the first.
    pub fn validate(&self, check_paths: bool) -> Vec<String> {
        let mut problems = Vec::new();
        if self.endpoint.concurrency < 1 {
            problems.push("endpoint.concurrency: must be >= 1".to_string());
        }
        if let Err(e) = PrefixSchedule::new(self.schedule.clone()) {
            problems.push(format!("schedule: {e}"));
        }
        if !(0.0..=1.0).contains(&self.english_threshold) {
            problems.push(format!(
                "english_threshold: {} outside [0, 1]",
                self.english_threshold
            ));
        }
        if self.histogram_bin_width <= 0.0 {
            problems.push("histogram_bin_width: must be positive".to_string());
        }
        if self.leak_grid_steps == 0 {
            problems.push("leak_grid_steps: must be >= 1".to_string());
        }
        if self.sample_per_class == 0 {
            problems.push("sample_per_class: must be >= 1".to_string());
        }
        for attr in &self.attributes {
            if attr.parse::<leakscope::corpus::Attribute>().is_err() {
                problems.push(format!("attributes: unknown attribute {attr:?}"));
            }
        }
        for kind in &self.kinds {
            if kind.parse::<leakscope::corpus::DataStreamKind>().is_err() {
                problems.push(format!("kinds: unknown stream kind {kind:?}"));
            }
        }
        if !self.mock_oracle && self.endpoint.base_url.is_none() {
            problems.push("endpoint.base_url: required when mock_oracle is false".to_string());
        }
        if check_paths {
            if let Some(corpus) = &self.corpus {
                if !corpus.exists() {
                    problems.push(format!("corpus: {} does not exist", corpus.display()));
                }
            }
            if let Some(path) = &self.gazetteer_path {
                if !path.exists() {
                    problems.push(format!("gazetteer_path: {} does not exist", path.display()));
                }
            }
            if let Some(ingest) = &self.ingest {
                if !ingest.exports_dir.exists() {
                    problems.push(format!(
                        "ingest.exports_dir: {} does not exist",
                        ingest.exports_dir.display()
                    ));
                }
                if !ingest.survey.exists() {
                    problems.push(format!(
                        "ingest.survey: {} does not exist",
                        ingest.survey.display()
                    ));
                }
            }
        }
        problems
    }

    pub fn parsed_attributes(&self) -> Vec<leakscope::corpus::Attribute> {
        self.attributes
            .iter()
            .map(|a| a.parse().expect("validated attribute"))
            .collect()
    }

    pub fn parsed_kinds(&self) -> Vec<leakscope::corpus::DataStreamKind> {
        self.kinds
            .iter()
            .map(|k| k.parse().expect("validated kind"))
            .collect()
    }
}
