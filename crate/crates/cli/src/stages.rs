//! Pipeline stages. Each stage reads its inputs from the run directory (or
//! the configured corpus), writes its outputs there, and appends one entry
//! with input/output content hashes to the run ledger. Stage ordering is
//! enforced by checking for the previous stage's outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use leakscope::audit::{
    category_distribution, discovery_point, discovery_summary, leak_curve, DiscoveryPoint,
};
use leakscope::cohort::build_cohort;
use leakscope::corpus::{
    read_corpus, write_corpus, Attribute, DataStreamKind, DemographicProfile, UserRecord,
};
use leakscope::eval::{
    classes_for, context_stats, group_traces, keyword_counts, majority_baseline, platform_table,
    platform_table_to_csv, score_traces, stratified_sample, ContextConvention, GroupKey,
};
use leakscope::filter::{
    run_filter, Category, EnglishGate, EntityFlagger, FlagRecord, GazetteerFlagger,
    HttpEntityFlagger, VerdictKind,
};
use leakscope::gateway::{
    CachedEndpoint, DiskCache, GenSettings, HttpEndpoint, LlmEndpoint, MockOracle, RequestLedger,
};
use leakscope::ingest::{assemble_users, parse_chat_export, parse_search_log, StreamFile};
use leakscope::protocol::{run_matrix, InferenceTrace, PrefixSchedule, TraceStore};
use leakscope::svg;
use leakscope::synth::generate;

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    StageOrder(String),
    OracleExhausted(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::StageOrder(m) => write!(f, "stage order error: {m}"),
            CliError::OracleExhausted(m) => write!(f, "oracle exhausted: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::StageOrder(_) => 3,
            CliError::OracleExhausted(_) => 4,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

// --- Run ledger ---------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct LedgerEntry {
    stage: String,
    timestamp: u64,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn hash_file(path: &Path) -> Option<FileHash> {
    let bytes = fs::read(path).ok()?;
    Some(FileHash {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn ledger_append(out_dir: &Path, stage: &str, inputs: &[PathBuf], outputs: &[PathBuf]) {
    let entry = LedgerEntry {
        stage: stage.to_string(),
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        inputs: inputs.iter().filter_map(|p| hash_file(p)).collect(),
        outputs: outputs.iter().filter_map(|p| hash_file(p)).collect(),
    };
    if let Ok(line) = serde_json::to_string(&entry) {
        let path = out_dir.join("run_ledger.jsonl");
        let _ = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| std::io::Write::write_all(&mut f, format!("{line}\n").as_bytes()));
    }
}

// --- Shared helpers ------------------------------------------------------------

fn corpus_path(config: &RunConfig) -> PathBuf {
    config
        .corpus
        .clone()
        .unwrap_or_else(|| config.out_dir.join("corpus.jsonl"))
}

fn load_corpus(config: &RunConfig) -> Result<(Vec<UserRecord>, PathBuf), CliError> {
    let path = corpus_path(config);
    if !path.exists() {
        if config.corpus.is_some() {
            return Err(CliError::Config(format!(
                "corpus {} does not exist",
                path.display()
            )));
        }
        return Err(CliError::StageOrder(format!(
            "no corpus at {}; run `synth` or `ingest` first, or set corpus in the config",
            path.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(runtime)?;
    let records = read_corpus(&text).map_err(CliError::Config)?;
    Ok((records, path))
}

pub fn gen_settings(config: &RunConfig) -> GenSettings {
    GenSettings {
        temperature: config.endpoint.temperature,
        max_tokens: config.endpoint.max_tokens,
        max_retries: config.endpoint.max_retries,
        timeout_secs: config.endpoint.timeout_secs,
        backoff_ms: config.endpoint.backoff_ms,
    }
}

/// Build the configured endpoint behind the shared disk cache and request
/// ledger. The boxed inner endpoint is the mock or the HTTP client.
pub fn make_endpoint(config: &RunConfig) -> Result<CachedEndpoint<Box<dyn LlmEndpoint>>, CliError> {
    let inner: Box<dyn LlmEndpoint> = if config.mock_oracle {
        Box::new(MockOracle::new())
    } else {
        let base = config.endpoint.base_url.as_ref().ok_or_else(|| {
            CliError::Config("endpoint.base_url required when mock_oracle is false".to_string())
        })?;
        let mut endpoint = HttpEndpoint::new(base.clone(), config.endpoint.model.clone());
        if let Ok(key) = std::env::var("LEAKSCOPE_API_KEY") {
            endpoint = endpoint.with_api_key(key);
        }
        Box::new(endpoint)
    };
    let cache = DiskCache::new(config.out_dir.join("cache")).map_err(runtime)?;
    let ledger = RequestLedger::open(config.out_dir.join("requests.jsonl")).map_err(runtime)?;
    Ok(CachedEndpoint::new(inner, cache).with_ledger(ledger))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text).map_err(runtime)
}

fn require(path: &Path, produced_by: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::StageOrder(format!(
            "{} is missing; run `{produced_by}` first",
            path.display()
        )))
    }
}

// --- synth ----------------------------------------------------------------------

pub fn stage_synth(config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&config.out_dir).map_err(runtime)?;
    let (records, manifest) =
        generate(&config.synth).map_err(|e| CliError::Config(e.to_string()))?;
    let corpus = config.out_dir.join("corpus.jsonl");
    let mut buf = Vec::new();
    write_corpus(&mut buf, &records).map_err(runtime)?;
    fs::write(&corpus, buf).map_err(runtime)?;
    let manifest_path = config.out_dir.join("synth_manifest.json");
    write_json(&manifest_path, &manifest)?;
    ledger_append(
        &config.out_dir,
        "synth",
        &[],
        &[corpus.clone(), manifest_path],
    );
    println!(
        "synth: wrote {} users to {}",
        records.len(),
        corpus.display()
    );
    Ok(())
}

// --- ingest ----------------------------------------------------------------------

fn parse_cell<T>(row_index: usize, field: &str, value: &str) -> Result<T, CliError>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| {
        CliError::Config(format!("survey row {}: {field}: {e}", row_index + 2))
    })
}

fn parse_survey(path: &Path) -> Result<BTreeMap<String, DemographicProfile>, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Config(format!("survey {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Config(e.to_string()))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    if column("user_id").is_none() {
        return Err(CliError::Config(
            "survey: missing user_id column".to_string(),
        ));
    }

    let mut survey = BTreeMap::new();
    for (row_index, row) in reader.records().enumerate() {
        let row =
            row.map_err(|e| CliError::Config(format!("survey row {}: {e}", row_index + 2)))?;
        let get = |name: &str| -> Option<&str> {
            column(name)
                .and_then(|i| row.get(i))
                .map(str::trim)
                .filter(|v| !v.is_empty())
        };
        let required = |name: &str| -> Result<&str, CliError> {
            get(name).ok_or_else(|| {
                CliError::Config(format!("survey row {}: missing {name}", row_index + 2))
            })
        };

        let user_id = required("user_id")?.to_string();
        let profile = DemographicProfile {
            age_bracket: parse_cell(row_index, "age_bracket", required("age_bracket")?)?,
            gender: parse_cell(row_index, "gender", required("gender")?)?,
            country: required("country")?.to_string(),
            religion: get("religion")
                .map(|v| parse_cell(row_index, "religion", v))
                .transpose()?,
            education: get("education")
                .map(|v| parse_cell(row_index, "education", v))
                .transpose()?,
            income: get("income")
                .map(|v| parse_cell(row_index, "income", v))
                .transpose()?,
            voting: get("voting")
                .map(|v| parse_cell(row_index, "voting", v))
                .transpose()?,
        };
        survey.insert(user_id, profile);
    }
    Ok(survey)
}

const EXPORT_FILES: [(&str, DataStreamKind); 4] = [
    ("conversations.json", DataStreamKind::ChatAssistant),
    ("web_search.json", DataStreamKind::WebSearch),
    ("video_search.json", DataStreamKind::VideoSearch),
    ("video_watch.json", DataStreamKind::VideoWatch),
];

pub fn stage_ingest(config: &RunConfig) -> Result<(), CliError> {
    let ingest = config.ingest.as_ref().ok_or_else(|| {
        CliError::Config("ingest requires an `ingest` section in the config".to_string())
    })?;
    fs::create_dir_all(&config.out_dir).map_err(runtime)?;
    let survey = parse_survey(&ingest.survey)?;

    let mut streams = Vec::new();
    let entries = fs::read_dir(&ingest.exports_dir).map_err(|e| {
        CliError::Config(format!("exports_dir {}: {e}", ingest.exports_dir.display()))
    })?;
    let mut user_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    user_dirs.sort();
    for dir in &user_dirs {
        let user_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        for (file, kind) in EXPORT_FILES {
            let path = dir.join(file);
            if !path.exists() {
                continue;
            }
            let bytes = fs::read(&path).map_err(runtime)?;
            let stream = match kind {
                DataStreamKind::ChatAssistant => parse_chat_export(&bytes),
                other => parse_search_log(&bytes, other),
            }
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            streams.push(StreamFile {
                user_id: user_id.clone(),
                kind,
                stream,
            });
        }
    }

    let assembled =
        assemble_users(streams, &survey).map_err(|e| CliError::Config(e.to_string()))?;
    let corpus = config.out_dir.join("corpus.jsonl");
    let mut buf = Vec::new();
    write_corpus(&mut buf, &assembled.records).map_err(runtime)?;
    fs::write(&corpus, buf).map_err(runtime)?;
    let report_path = config.out_dir.join("ingest_report.txt");
    fs::write(&report_path, assembled.report.join("\n") + "\n").map_err(runtime)?;
    ledger_append(
        &config.out_dir,
        "ingest",
        std::slice::from_ref(&ingest.survey),
        &[corpus.clone(), report_path],
    );
    println!(
        "ingest: wrote {} users to {} ({} report lines)",
        assembled.records.len(),
        corpus.display(),
        assembled.report.len()
    );
    Ok(())
}

// --- filter ----------------------------------------------------------------------

#[derive(Serialize)]
struct FilterReport {
    users: usize,
    messages: usize,
    unsafe_messages: usize,
    unresolved: usize,
    oracle_errors: usize,
    unknown_categories: usize,
}

fn flags_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("flags.jsonl")
}

pub fn load_flags(config: &RunConfig) -> Result<Vec<FlagRecord>, CliError> {
    let path = flags_path(config);
    require(&path, "filter")?;
    let text = fs::read_to_string(&path).map_err(runtime)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Runtime(format!("flags: {e}"))))
        .collect()
}

/// Rewrites the corpus with per-message verdict/category/entity annotations.
fn annotate_corpus(
    corpus_text: &str,
    flags: &BTreeMap<String, &FlagRecord>,
) -> Result<String, CliError> {
    let mut out = String::new();
    for line in corpus_text.lines().filter(|l| !l.trim().is_empty()) {
        let mut value: serde_json::Value = serde_json::from_str(line).map_err(runtime)?;
        let user_id = value["user_id"].as_str().unwrap_or_default().to_string();
        if let Some(record) = flags.get(&user_id) {
            if let Some(messages) = value["streams"]["ChatAssistant"].as_array_mut() {
                for (index, message) in messages.iter_mut().enumerate() {
                    if let Some(v) = record.verdicts.iter().find(|v| v.message_index == index) {
                        message["verdict"] = serde_json::json!(v.verdict);
                    }
                    if let Some(c) = record.categories.iter().find(|c| c.message_index == index) {
                        message["category"] = serde_json::json!(c.category.name());
                    }
                    let entities: Vec<_> = record
                        .entity_flags
                        .iter()
                        .filter(|f| f.message_index == index)
                        .map(|f| {
                            serde_json::json!({"kind": f.entity_kind.name(), "surface": f.surface})
                        })
                        .collect();
                    if !entities.is_empty() {
                        message["entities"] = serde_json::json!(entities);
                    }
                }
            }
        }
        out.push_str(&serde_json::to_string(&value).map_err(runtime)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn stage_filter(config: &RunConfig) -> Result<(), CliError> {
    let (records, corpus) = load_corpus(config)?;
    let endpoint = make_endpoint(config)?;
    let settings = gen_settings(config);
    let flagger: Box<dyn EntityFlagger> = match (&config.entity_flagger_url, &config.gazetteer_path) {
        (Some(url), _) => Box::new(HttpEntityFlagger::new(url.clone())),
        (None, Some(path)) => {
            let table = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("gazetteer {}: {e}", path.display())))?;
            Box::new(
                GazetteerFlagger::parse(&table)
                    .map_err(|e| CliError::Config(format!("gazetteer {}: {e}", path.display())))?,
            )
        }
        (None, None) => Box::new(GazetteerFlagger::bundled()),
    };
    let gate = EnglishGate::bundled(config.english_threshold);

    let mut report = FilterReport {
        users: records.len(),
        messages: 0,
        unsafe_messages: 0,
        unresolved: 0,
        oracle_errors: 0,
        unknown_categories: 0,
    };
    let mut lines = Vec::new();
    let mut flag_records = Vec::new();
    for record in &records {
        let stream = record.chat_stream().ok_or_else(|| {
            CliError::Config(format!(
                "user {} has no ChatAssistant stream",
                record.user_id
            ))
        })?;
        let flag_record = run_filter(
            &record.user_id,
            DataStreamKind::ChatAssistant,
            stream,
            flagger.as_ref(),
            &gate,
            &endpoint,
            &settings,
            config.endpoint.concurrency,
        )
        .map_err(runtime)?;
        report.messages += stream.len();
        report.unsafe_messages += flag_record.unsafe_indices().len();
        report.unresolved += flag_record
            .verdicts
            .iter()
            .filter(|v| v.verdict == VerdictKind::Unresolved)
            .count();
        report.oracle_errors += flag_record
            .verdicts
            .iter()
            .filter(|v| v.raw.starts_with("oracle error:"))
            .count();
        report.unknown_categories += flag_record.unknown_categories.len();
        lines.push(serde_json::to_string(&flag_record).map_err(runtime)?);
        flag_records.push(flag_record);
    }

    if report.messages > 0 && report.oracle_errors == report.messages {
        return Err(CliError::OracleExhausted(format!(
            "all {} safety classifications failed after retries",
            report.messages
        )));
    }

    let flags = flags_path(config);
    fs::write(&flags, lines.join("\n") + "\n").map_err(runtime)?;

    let corpus_text = fs::read_to_string(&corpus).map_err(runtime)?;
    let by_user: BTreeMap<String, &FlagRecord> = flag_records
        .iter()
        .map(|r| (r.user_id.clone(), r))
        .collect();
    let annotated = annotate_corpus(&corpus_text, &by_user)?;
    let annotated_path = config.out_dir.join("corpus.annotated.jsonl");
    fs::write(&annotated_path, annotated).map_err(runtime)?;

    let report_path = config.out_dir.join("filter_report.json");
    write_json(&report_path, &report)?;
    ledger_append(
        &config.out_dir,
        "filter",
        &[corpus],
        &[flags, annotated_path, report_path],
    );
    println!(
        "filter: {} users, {} messages, {} unsafe, {} unresolved, {} unknown categories",
        report.users,
        report.messages,
        report.unsafe_messages,
        report.unresolved,
        report.unknown_categories
    );
    Ok(())
}

// --- audit -----------------------------------------------------------------------

pub fn stage_audit(config: &RunConfig) -> Result<(), CliError> {
    let (records, corpus) = load_corpus(config)?;
    let flag_records = load_flags(config)?;
    let by_user: BTreeMap<&str, &FlagRecord> = flag_records
        .iter()
        .map(|r| (r.user_id.as_str(), r))
        .collect();

    let audit_dir = config.out_dir.join("audit");
    fs::create_dir_all(&audit_dir).map_err(runtime)?;

    let mut points: Vec<DiscoveryPoint> = Vec::new();
    let mut per_user_flags: Vec<(Vec<usize>, usize)> = Vec::new();
    let mut labels: Vec<(Category, Option<String>)> = Vec::new();
    let mut discovery_csv = String::from("user_id,discovery_point\n");
    for record in &records {
        let stream_len = record.chat_stream().map(|s| s.len()).unwrap_or(0);
        if stream_len == 0 {
            continue;
        }
        let flags = by_user
            .get(record.user_id.as_str())
            .map(|r| r.unsafe_indices())
            .unwrap_or_default();
        let point = discovery_point(&record.user_id, &flags, stream_len).map_err(runtime)?;
        let _ = writeln!(
            discovery_csv,
            "{},{}",
            record.user_id,
            point
                .value
                .map(|v| format!("{v}"))
                .unwrap_or_else(|| "absent".to_string())
        );
        points.push(point);
        per_user_flags.push((flags, stream_len));
        if let Some(r) = by_user.get(record.user_id.as_str()) {
            for label in &r.categories {
                labels.push((label.category, Some(record.profile.country.clone())));
            }
        }
    }
    fs::write(audit_dir.join("discovery.csv"), discovery_csv).map_err(runtime)?;

    let mut outputs = vec![audit_dir.join("discovery.csv")];

    match discovery_summary(&points, config.histogram_bin_width) {
        Ok(summary) => {
            write_json(&audit_dir.join("discovery_summary.json"), &summary)?;
            let bars: Vec<(String, f64)> = summary
                .histogram
                .iter()
                .map(|(edge, count)| (format!("{edge}"), *count as f64))
                .collect();
            fs::write(
                audit_dir.join("discovery_hist.svg"),
                svg::bar_chart("discovery point distribution (%)", &bars),
            )
            .map_err(runtime)?;
            outputs.push(audit_dir.join("discovery_summary.json"));
            outputs.push(audit_dir.join("discovery_hist.svg"));
            println!(
                "audit: discovery mean {:.1}% median {:.1}% ({} users absent)",
                summary.mean, summary.median, summary.absent
            );
        }
        Err(e) => println!("audit: no discovery summary ({e})"),
    }

    if !labels.is_empty() {
        let all: Vec<(Category, Option<String>)> = labels.iter().map(|(c, _)| (*c, None)).collect();
        let mut table = category_distribution(&all).map_err(runtime)?;
        if let Ok(by_country) = category_distribution(&labels) {
            table.extend(by_country);
        }
        let groups: Vec<&String> = table.keys().collect();
        let mut csv_text = String::from("category");
        for g in &groups {
            let _ = write!(csv_text, ",{g}");
        }
        csv_text.push('\n');
        for category in Category::ALL {
            let _ = write!(csv_text, "\"{}\"", category.name());
            for g in &groups {
                let _ = write!(csv_text, ",{:.2}", table[*g][&category]);
            }
            csv_text.push('\n');
        }
        fs::write(audit_dir.join("category_distribution.csv"), csv_text).map_err(runtime)?;
        outputs.push(audit_dir.join("category_distribution.csv"));
    }

    if !per_user_flags.is_empty() {
        let curve = leak_curve(&per_user_flags, config.leak_grid_steps).map_err(runtime)?;
        let mut csv_text = String::from("fraction,mean_cumulative_flags\n");
        for (fraction, mean) in &curve.points {
            let _ = writeln!(csv_text, "{fraction},{mean}");
        }
        fs::write(audit_dir.join("leak_curve.csv"), csv_text).map_err(runtime)?;
        write_json(&audit_dir.join("leak_fit.json"), &curve.fit)?;
        fs::write(
            audit_dir.join("leak_curve.svg"),
            svg::line_chart(
                "mean cumulative flagged messages",
                "fraction of history read",
                "flagged messages",
                &curve.points,
            ),
        )
        .map_err(runtime)?;
        outputs.extend([
            audit_dir.join("leak_curve.csv"),
            audit_dir.join("leak_fit.json"),
            audit_dir.join("leak_curve.svg"),
        ]);
        println!(
            "audit: leak fit slope {:.3} intercept {:.3} r² {:.4}",
            curve.fit.slope, curve.fit.intercept, curve.fit.r_squared
        );
    }

    // Entity-pass evidence: counts per entity kind.
    let mut entity_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for record in &flag_records {
        for flag in &record.entity_flags {
            *entity_counts.entry(flag.entity_kind.name()).or_insert(0) += 1;
        }
    }
    let mut csv_text = String::from("entity_kind,count\n");
    for (kind, count) in &entity_counts {
        let _ = writeln!(csv_text, "{kind},{count}");
    }
    fs::write(audit_dir.join("entity_counts.csv"), csv_text).map_err(runtime)?;
    outputs.push(audit_dir.join("entity_counts.csv"));

    ledger_append(
        &config.out_dir,
        "audit",
        &[corpus, flags_path(config)],
        &outputs,
    );
    Ok(())
}

// --- cohort ----------------------------------------------------------------------

fn cohort_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("cohort.csv")
}

pub fn stage_cohort(config: &RunConfig) -> Result<(), CliError> {
    let (records, corpus) = load_corpus(config)?;
    let flag_records = load_flags(config)?;
    let verdicts: BTreeMap<String, _> = flag_records
        .into_iter()
        .filter(|r| r.kind == DataStreamKind::ChatAssistant)
        .map(|r| (r.user_id.clone(), r.verdicts))
        .collect();

    let cohort = build_cohort(&records, &verdicts, &config.cohort)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut csv_text = String::from("user_id,included,reasons,chat_length\n");
    for entry in &cohort.entries {
        let reasons: Vec<&str> = entry.reasons.iter().map(|r| r.name()).collect();
        let _ = writeln!(
            csv_text,
            "{},{},{},{}",
            entry.user_id,
            entry.included,
            reasons.join(";"),
            entry.chat_length
        );
    }
    let path = cohort_path(config);
    fs::write(&path, csv_text).map_err(runtime)?;
    ledger_append(
        &config.out_dir,
        "cohort",
        &[corpus, flags_path(config)],
        &[path],
    );
    println!(
        "cohort: {} included, {} excluded (length floor {})",
        cohort.included_ids().len(),
        cohort.excluded_ids().len(),
        cohort.threshold
    );
    Ok(())
}

fn load_included_ids(config: &RunConfig) -> Result<BTreeSet<String>, CliError> {
    let path = cohort_path(config);
    require(&path, "cohort")?;
    let text = fs::read_to_string(&path).map_err(runtime)?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|line| {
            let mut parts = line.split(',');
            let user = parts.next()?;
            let included = parts.next()? == "true";
            included.then(|| user.to_string())
        })
        .collect())
}

// --- infer -----------------------------------------------------------------------

#[derive(Serialize)]
struct InferStats {
    traces_written: usize,
    traces_resumed: usize,
    skipped: usize,
    endpoint_calls: u64,
    cache_hits: u64,
    oracle_error_steps: usize,
}

fn traces_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("traces.jsonl")
}

pub fn stage_infer(config: &RunConfig, resume: bool) -> Result<(), CliError> {
    let (records, corpus) = load_corpus(config)?;
    let included = load_included_ids(config)?;
    let cohort_records: Vec<UserRecord> = records
        .into_iter()
        .filter(|r| included.contains(&r.user_id))
        .collect();

    let schedule = PrefixSchedule::new(config.schedule.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let aliases = leakscope::gateway::CountryAliases::bundled();
    let endpoint = make_endpoint(config)?;
    let settings = gen_settings(config);

    let store = TraceStore::new(traces_path(config));
    let completed = if resume {
        store.completed_keys().map_err(runtime)?
    } else {
        if store.path().exists() {
            fs::remove_file(store.path()).map_err(runtime)?;
        }
        BTreeSet::new()
    };
    let resumed = completed.len();

    let outcome = run_matrix(
        &cohort_records,
        &config.parsed_attributes(),
        &config.parsed_kinds(),
        &endpoint,
        &settings,
        &schedule,
        &aliases,
        config.endpoint.concurrency,
        &completed,
    );
    for (key, error) in &outcome.errors {
        eprintln!(
            "infer: trace {}/{}/{} failed: {error}",
            key.user_id, key.attribute, key.kind
        );
    }

    let mut traces = outcome.traces;
    traces
        .sort_by(|a, b| (&a.user_id, a.attribute, a.kind).cmp(&(&b.user_id, b.attribute, b.kind)));
    store.append_all(&traces).map_err(runtime)?;

    let oracle_error_steps = traces
        .iter()
        .flat_map(|t| &t.steps)
        .filter(|s| s.rationale.starts_with("oracle error:"))
        .count();
    let total_steps: usize = traces.iter().map(|t| t.steps.len()).sum();
    if total_steps > 0 && oracle_error_steps == total_steps {
        return Err(CliError::OracleExhausted(format!(
            "all {total_steps} inference steps failed after retries"
        )));
    }

    let stats = InferStats {
        traces_written: traces.len(),
        traces_resumed: resumed,
        skipped: outcome.skipped.len(),
        endpoint_calls: endpoint.calls(),
        cache_hits: endpoint.cache_hits(),
        oracle_error_steps,
    };
    write_json(&config.out_dir.join("infer_stats.json"), &stats)?;
    write_json(&config.out_dir.join("infer_skipped.json"), &outcome.skipped)?;
    ledger_append(
        &config.out_dir,
        "infer",
        &[corpus, cohort_path(config)],
        &[traces_path(config), config.out_dir.join("infer_stats.json")],
    );
    println!(
        "infer: {} traces written ({} resumed, {} skipped), {} endpoint calls, {} cache hits",
        stats.traces_written,
        stats.traces_resumed,
        stats.skipped,
        stats.endpoint_calls,
        stats.cache_hits
    );
    Ok(())
}

// --- evaluate --------------------------------------------------------------------

#[derive(Serialize)]
struct AttributeKindMetrics {
    attribute: Attribute,
    kind: DataStreamKind,
    traces: usize,
    weighted_f1: f64,
    majority_baseline: f64,
    per_class: Vec<leakscope::eval::ClassMetrics>,
}

pub fn stage_evaluate(config: &RunConfig) -> Result<(), CliError> {
    let store = TraceStore::new(traces_path(config));
    require(store.path(), "infer")?;
    let traces = store.read_all().map_err(runtime)?;
    if traces.is_empty() {
        return Err(CliError::Runtime("traces.jsonl is empty".to_string()));
    }
    let eval_dir = config.out_dir.join("eval");
    fs::create_dir_all(&eval_dir).map_err(runtime)?;
    let schedule = PrefixSchedule::new(config.schedule.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut by_attr_kind: BTreeMap<(Attribute, DataStreamKind), Vec<&InferenceTrace>> =
        BTreeMap::new();
    for trace in &traces {
        by_attr_kind
            .entry((trace.attribute, trace.kind))
            .or_default()
            .push(trace);
    }

    let mut metrics = Vec::new();
    let mut f1_table = BTreeMap::new();
    let mut outputs = Vec::new();
    for ((attribute, kind), group) in &by_attr_kind {
        let matrix = score_traces(*attribute, group).map_err(runtime)?;
        let supports: Vec<usize> = matrix
            .per_class
            .iter()
            .map(|m| m.support)
            .filter(|&s| s > 0)
            .collect();
        let baseline = majority_baseline(&supports).unwrap_or(0.0);
        f1_table.insert((*attribute, *kind), matrix.weighted_f1);

        let stem = format!("confusion_{}_{kind}", attribute.to_string().to_lowercase());
        let csv_path = eval_dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, matrix.to_csv()).map_err(runtime)?;
        let svg_path = eval_dir.join(format!("{stem}.svg"));
        fs::write(
            &svg_path,
            svg::confusion_heatmap(&format!("{attribute} on {kind}"), &matrix),
        )
        .map_err(runtime)?;
        outputs.extend([csv_path, svg_path]);

        metrics.push(AttributeKindMetrics {
            attribute: *attribute,
            kind: *kind,
            traces: group.len(),
            weighted_f1: matrix.weighted_f1,
            majority_baseline: baseline,
            per_class: matrix.per_class.clone(),
        });
        println!(
            "evaluate: {attribute} on {kind}: weighted F1 {:.4} (majority baseline {:.4}, n={})",
            matrix.weighted_f1,
            baseline,
            group.len()
        );
    }
    write_json(&eval_dir.join("metrics.json"), &metrics)?;
    outputs.push(eval_dir.join("metrics.json"));

    // Context statistics per attribute, class, and kind, both conventions.
    let all_refs: Vec<&InferenceTrace> = traces.iter().collect();
    let mut context_csv = String::from("group_by,group,convention,n,not_reached,mean,median\n");
    for (axis, name) in [
        (GroupKey::Attribute, "attribute"),
        (GroupKey::Class, "class"),
        (GroupKey::Kind, "kind"),
    ] {
        for (group, members) in group_traces(&all_refs, axis) {
            for convention in [
                ContextConvention::NotReachedAsFull,
                ContextConvention::ExcludeNotReached,
            ] {
                if let Ok(stats) = context_stats(&members, &schedule, convention) {
                    let _ = writeln!(
                        context_csv,
                        "{name},{group},{},{},{},{:.4},{:.1}",
                        convention.name(),
                        stats.n,
                        stats.not_reached,
                        stats.mean,
                        stats.median
                    );
                }
            }
        }
    }
    fs::write(eval_dir.join("context_stats.csv"), context_csv).map_err(runtime)?;
    outputs.push(eval_dir.join("context_stats.csv"));
    let mut context_json = Vec::new();
    for (axis, name) in [
        (GroupKey::Attribute, "attribute"),
        (GroupKey::Class, "class"),
        (GroupKey::Kind, "kind"),
    ] {
        for (group, members) in group_traces(&all_refs, axis) {
            for convention in [
                ContextConvention::NotReachedAsFull,
                ContextConvention::ExcludeNotReached,
            ] {
                if let Ok(stats) = context_stats(&members, &schedule, convention) {
                    context_json.push(serde_json::json!({
                        "group_by": name, "group": group, "stats": stats
                    }));
                }
            }
        }
    }
    write_json(&eval_dir.join("context_stats.json"), &context_json)?;
    outputs.push(eval_dir.join("context_stats.json"));

    for ((attribute, kind), group) in &by_attr_kind {
        if let Ok(stats) = context_stats(group, &schedule, ContextConvention::NotReachedAsFull) {
            let bars: Vec<(String, f64)> = stats
                .histogram
                .iter()
                .map(|(k, count)| (k.to_string(), *count as f64))
                .collect();
            let path = eval_dir.join(format!(
                "context_hist_{}_{kind}.svg",
                attribute.to_string().to_lowercase()
            ));
            fs::write(
                &path,
                svg::bar_chart(&format!("context needed: {attribute} on {kind} (%)"), &bars),
            )
            .map_err(runtime)?;
            outputs.push(path);
        }
    }

    let table = platform_table(&f1_table);
    fs::write(
        eval_dir.join("platform_table.csv"),
        platform_table_to_csv(&table),
    )
    .map_err(runtime)?;
    write_json(&eval_dir.join("platform_table.json"), &table)?;
    outputs.push(eval_dir.join("platform_table.csv"));
    outputs.push(eval_dir.join("platform_table.json"));

    let counts = keyword_counts(&all_refs, &config.keywords);
    let mut keyword_csv = String::from("attribute,keyword,truth,prediction,count\n");
    for c in &counts {
        let _ = writeln!(
            keyword_csv,
            "{},\"{}\",{},{},{}",
            c.attribute, c.keyword, c.truth, c.prediction, c.count
        );
    }
    fs::write(eval_dir.join("keyword_counts.csv"), keyword_csv).map_err(runtime)?;
    outputs.push(eval_dir.join("keyword_counts.csv"));

    // Stratified rationale sample per attribute.
    let mut sample_csv =
        String::from("attribute,user_id,kind,truth,final_label,context_needed,rationale\n");
    for attribute in by_attr_kind
        .keys()
        .map(|(a, _)| *a)
        .collect::<BTreeSet<_>>()
    {
        let members: Vec<&InferenceTrace> =
            traces.iter().filter(|t| t.attribute == attribute).collect();
        let keys = stratified_sample(&members, config.sample_per_class, config.seed);
        for key in keys {
            if let Some(t) = members.iter().find(|t| {
                t.user_id == key.user_id && t.attribute == key.attribute && t.kind == key.kind
            }) {
                let _ = writeln!(
                    sample_csv,
                    "{},{},{},{},{},{},\"{}\"",
                    t.attribute,
                    t.user_id,
                    t.kind,
                    t.truth,
                    t.outcome.final_label.as_deref().unwrap_or("(unparsed)"),
                    t.outcome
                        .context_needed
                        .map(|k| k.to_string())
                        .unwrap_or_else(|| "not_reached".to_string()),
                    t.outcome.rationale_at_stopping.replace('"', "\"\"")
                );
            }
        }
    }
    fs::write(eval_dir.join("rationale_sample.csv"), sample_csv).map_err(runtime)?;
    outputs.push(eval_dir.join("rationale_sample.csv"));

    // Classes present per attribute, for the record.
    let mut class_lists = BTreeMap::new();
    for ((attribute, _), group) in &by_attr_kind {
        let truths: Vec<String> = group.iter().map(|t| t.truth.clone()).collect();
        class_lists.insert(attribute.to_string(), classes_for(*attribute, &truths));
    }
    write_json(&eval_dir.join("classes.json"), &class_lists)?;
    outputs.push(eval_dir.join("classes.json"));

    ledger_append(
        &config.out_dir,
        "evaluate",
        &[traces_path(config)],
        &outputs,
    );
    Ok(())
}

// --- report ----------------------------------------------------------------------

pub fn stage_report(config: &RunConfig) -> Result<(), CliError> {
    let eval_metrics = config.out_dir.join("eval").join("metrics.json");
    require(&eval_metrics, "evaluate")?;
    let report_dir = config.out_dir.join("report");
    fs::create_dir_all(&report_dir).map_err(runtime)?;

    let mut html = String::from(
        "<!doctype html><html><head><meta charset=\"utf-8\"><title>leakscope run report</title>\
         <style>body{font-family:sans-serif;max-width:60em;margin:2em auto}table{border-collapse:collapse}\
         td,th{border:1px solid #999;padding:0.3em 0.6em}img{max-width:100%}</style></head><body>\n\
         <h1>leakscope run report</h1>\n",
    );

    let metrics: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(&eval_metrics).map_err(runtime)?)
            .map_err(runtime)?;
    html.push_str("<h2>Inference performance</h2>\n<table><tr><th>attribute</th><th>stream</th><th>traces</th><th>weighted F1</th><th>majority baseline</th></tr>\n");
    for m in &metrics {
        let _ = writeln!(
            html,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{:.4}</td><td>{:.4}</td></tr>",
            m["attribute"].as_str().unwrap_or("?"),
            m["kind"].as_str().unwrap_or("?"),
            m["traces"],
            m["weighted_f1"].as_f64().unwrap_or(0.0),
            m["majority_baseline"].as_f64().unwrap_or(0.0),
        );
    }
    html.push_str("</table>\n");

    let summary_path = config.out_dir.join("audit").join("discovery_summary.json");
    if let Ok(text) = fs::read_to_string(&summary_path) {
        if let Ok(summary) = serde_json::from_str::<serde_json::Value>(&text) {
            let _ = write!(
                html,
                "<h2>Disclosure audit</h2>\n<p>Discovery point: mean {:.1}%, median {:.1}% ({} users without flags).</p>\n",
                summary["mean"].as_f64().unwrap_or(0.0),
                summary["median"].as_f64().unwrap_or(0.0),
                summary["absent"]
            );
        }
    }
    let fit_path = config.out_dir.join("audit").join("leak_fit.json");
    if let Ok(text) = fs::read_to_string(&fit_path) {
        if let Ok(fit) = serde_json::from_str::<serde_json::Value>(&text) {
            let _ = writeln!(
                html,
                "<p>Leak-curve linear fit: slope {:.3}, r&sup2; {:.4}.</p>",
                fit["slope"].as_f64().unwrap_or(0.0),
                fit["r_squared"].as_f64().unwrap_or(0.0)
            );
        }
    }

    // Copy every emitted table and chart next to the index page so the
    // report directory is self-contained.
    html.push_str("<h2>Artifacts</h2>\n<ul>\n");
    for dir in ["audit", "eval"] {
        let path = config.out_dir.join(dir);
        if let Ok(entries) = fs::read_dir(&path) {
            let mut files: Vec<PathBuf> =
                entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            files.sort();
            for file in files {
                if let Some(name) = file.file_name().and_then(|n| n.to_str()) {
                    let copied = format!("{dir}_{name}");
                    fs::copy(&file, report_dir.join(&copied)).map_err(runtime)?;
                    let _ = writeln!(html, "<li><a href=\"{copied}\">{dir}/{name}</a></li>");
                }
            }
        }
    }
    for name in ["cohort.csv", "run_ledger.jsonl"] {
        let source = config.out_dir.join(name);
        if source.exists() {
            fs::copy(&source, report_dir.join(name)).map_err(runtime)?;
            let _ = writeln!(html, "<li><a href=\"{name}\">{name}</a></li>");
        }
    }
    html.push_str("</ul>\n</body></html>\n");

    let index = report_dir.join("index.html");
    fs::write(&index, html).map_err(runtime)?;
    ledger_append(
        &config.out_dir,
        "report",
        &[eval_metrics],
        std::slice::from_ref(&index),
    );
    println!("report: {}", index.display());
    Ok(())
}
