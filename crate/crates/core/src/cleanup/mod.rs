//! Weak-annotation cleanup for scene-graph sentence/region links.
//!
//! Three stages run in order, followed by leakage exclusion:
//!
//! 1. keep only the most specific regions of each sentence, chosen by a
//!    [`RegionFilter`] and then stripped of ancestors;
//! 2. empty the region set of sentences that only report negative findings;
//! 3. add report sentences that never made it into the scene graph as
//!    zero-box records.
//!
//! Counts in [`CleanupReport`] are sentence/region pairs unless the field
//! name says records.

pub mod llm;
pub mod regions;

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::ingest::{create, open, read_jsonl, write_jsonl};
use crate::metrics::SCHEMA_VERSION;

pub use regions::{RegionHierarchy, REGIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    NegativeOnly,
    #[default]
    Unknown,
}

/// Where a polarity value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolaritySource {
    Attribute,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub name: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl RegionBox {
    pub fn new(name: impl Into<String>, bbox: BoundingBox) -> Self {
        Self {
            name: name.into(),
            bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphRecord {
    pub study_id: String,
    pub image_id: String,
    pub sentence: String,
    #[serde(default)]
    pub candidate_regions: Vec<RegionBox>,
    #[serde(default)]
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity_source: Option<PolaritySource>,
    /// Source line, for error messages. Not serialized.
    #[serde(skip)]
    pub line: Option<usize>,
}

impl SceneGraphRecord {
    pub fn new(study_id: impl Into<String>, image_id: impl Into<String>, sentence: impl Into<String>) -> Self {
        Self {
            study_id: study_id.into(),
            image_id: image_id.into(),
            sentence: sentence.into(),
            candidate_regions: Vec::new(),
            polarity: Polarity::Unknown,
            polarity_source: None,
            line: None,
        }
    }

    pub fn with_region(mut self, name: &str, bbox: BoundingBox) -> Self {
        self.candidate_regions.push(RegionBox::new(name, bbox));
        self
    }

    /// Sets polarity from a source attribute.
    pub fn with_polarity(mut self, polarity: Polarity) -> Self {
        self.polarity = polarity;
        self.polarity_source = Some(PolaritySource::Attribute);
        self
    }

    pub fn n_pairs(&self) -> usize {
        self.candidate_regions.len()
    }

    pub fn region_names(&self) -> Vec<String> {
        self.candidate_regions.iter().map(|r| r.name.clone()).collect()
    }

    /// Region names outside the hierarchy's vocabulary.
    pub fn unknown_regions<'a>(&'a self, hierarchy: &RegionHierarchy) -> Vec<&'a str> {
        self.candidate_regions
            .iter()
            .map(|r| r.name.as_str())
            .filter(|n| !hierarchy.contains(n))
            .collect()
    }

    fn provenance(&self) -> String {
        match self.line {
            Some(line) => format!("study {} (line {line})", self.study_id),
            None => format!("study {}", self.study_id),
        }
    }
}

/// Picks the regions a sentence actually refers to.
pub trait RegionFilter: Sync {
    fn select(&self, sentence: &str, candidates: &[String]) -> Result<Vec<String>>;

    fn name(&self) -> &'static str;

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Keeps every candidate, leaving ancestor removal to do the work.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedFilter;

impl RegionFilter for RuleBasedFilter {
    fn select(&self, _sentence: &str, candidates: &[String]) -> Result<Vec<String>> {
        Ok(candidates.to_vec())
    }

    fn name(&self) -> &'static str {
        "rules"
    }
}

fn validate_selection(selection: &[String], candidates: &[String]) -> Result<()> {
    if selection.is_empty() {
        return Err(Error::Llm("empty selection".into()));
    }
    if let Some(bad) = selection.iter().find(|s| !candidates.contains(s)) {
        return Err(Error::Llm(format!("selected region '{bad}' is not a candidate")));
    }
    Ok(())
}

/// Stage 1 with an explicit fallback policy. Returns the record and whether
/// the rule-based fallback was used.
fn select_regions(
    record: &SceneGraphRecord,
    hierarchy: &RegionHierarchy,
    filter: &dyn RegionFilter,
    allow_fallback: bool,
) -> Result<(SceneGraphRecord, bool)> {
    if record.candidate_regions.len() <= 1 {
        return Ok((record.clone(), false));
    }
    let candidates = record.region_names();
    let chosen = filter
        .select(&record.sentence, &candidates)
        .and_then(|s| validate_selection(&s, &candidates).map(|_| s));
    let (selection, fell_back) = match chosen {
        Ok(s) => (s, false),
        Err(e) if allow_fallback => {
            warn!(
                "{}: {} filter failed ({e}); using rules",
                record.provenance(),
                filter.name()
            );
            (candidates.clone(), true)
        }
        Err(e) => return Err(Error::Llm(format!("{}: {e}", record.provenance()))),
    };
    let picked: Vec<&str> = selection.iter().map(String::as_str).collect();
    let keep = hierarchy.most_specific(&picked);
    let mut out = record.clone();
    out.candidate_regions.retain(|r| keep.contains(&r.name.as_str()));
    Ok((out, fell_back))
}

/// Keeps the most specific regions chosen by `filter`; any failure of the
/// filter falls back to ancestor removal over all candidates.
pub fn filter_specific_regions(
    record: &SceneGraphRecord,
    hierarchy: &RegionHierarchy,
    filter: &dyn RegionFilter,
) -> SceneGraphRecord {
    select_regions(record, hierarchy, filter, true)
        .expect("fallback cannot fail")
        .0
}

const NEGATION_PREFIXES: [&str; 5] = ["no evidence of", "negative for", "free of", "without", "no"];
const NEGATION_ANYWHERE: [&str; 3] = ["no evidence of", "negative for", "free of"];
const EXISTENTIAL_LEADS: [&str; 6] = [
    "there is",
    "there are",
    "there was",
    "there were",
    "has been",
    "have been",
];
const CONTRAST_WORDS: [&str; 7] = ["but", "however", "although", "though", "whereas", "yet", "except"];

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn starts_with_phrase(tokens: &[String], phrase: &str) -> bool {
    let words: Vec<&str> = phrase.split(' ').collect();
    tokens.len() >= words.len() && tokens.iter().zip(&words).all(|(t, w)| t == w)
}

fn contains_phrase(tokens: &[String], phrase: &str) -> bool {
    (0..tokens.len()).any(|i| starts_with_phrase(&tokens[i..], phrase))
}

fn clause_is_negative(tokens: &[String]) -> bool {
    let mut rest = tokens;
    if let Some(lead) = EXISTENTIAL_LEADS.iter().find(|l| starts_with_phrase(rest, l)) {
        rest = &rest[lead.split(' ').count()..];
    }
    NEGATION_PREFIXES.iter().any(|p| starts_with_phrase(rest, p))
        || NEGATION_ANYWHERE.iter().any(|p| contains_phrase(tokens, p))
}

/// True when every clause of the sentence is a negated finding.
///
/// Clauses are split on `.`, `;` and contrastive conjunctions, so a single
/// positive clause makes the sentence mixed.
pub fn is_negative_only(sentence: &str) -> bool {
    let mut clauses: Vec<Vec<String>> = Vec::new();
    for part in sentence.split(['.', ';', '!', '?']) {
        let mut current = Vec::new();
        for tok in tokenize(part) {
            if CONTRAST_WORDS.contains(&tok.as_str()) {
                clauses.push(std::mem::take(&mut current));
            } else {
                current.push(tok);
            }
        }
        clauses.push(current);
    }
    clauses.retain(|c| !c.is_empty());
    !clauses.is_empty() && clauses.iter().all(|c| clause_is_negative(c))
}

/// Resolves polarity: the source attribute if set, else the text heuristic.
pub fn derive_polarity(record: &SceneGraphRecord) -> (Polarity, Option<PolaritySource>) {
    match record.polarity {
        Polarity::Unknown if is_negative_only(&record.sentence) => {
            (Polarity::NegativeOnly, Some(PolaritySource::Heuristic))
        }
        p => (p, record.polarity_source),
    }
}

/// Stage 2: negative-only sentences keep the record but lose their regions.
pub fn drop_negative_sentences(record: &SceneGraphRecord) -> SceneGraphRecord {
    let mut out = record.clone();
    if out.candidate_regions.is_empty() {
        return out;
    }
    let (polarity, source) = derive_polarity(record);
    out.polarity = polarity;
    out.polarity_source = source;
    if polarity == Polarity::NegativeOnly {
        out.candidate_regions.clear();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSentence {
    pub study_id: String,
    pub image_id: String,
    pub sentence: String,
}

impl ReportSentence {
    pub fn new(study_id: impl Into<String>, image_id: impl Into<String>, sentence: impl Into<String>) -> Self {
        Self {
            study_id: study_id.into(),
            image_id: image_id.into(),
            sentence: sentence.into(),
        }
    }
}

fn sentence_key(study_id: &str, sentence: &str) -> (String, String) {
    let norm = sentence.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    (study_id.to_string(), norm)
}

/// Stage 3: report sentences absent from the scene graph become zero-box
/// records. Duplicates within a study are emitted once.
pub fn add_ungrounded_sentences(sentences: &[ReportSentence], existing: &[SceneGraphRecord]) -> Vec<SceneGraphRecord> {
    let mut seen: HashSet<(String, String)> = existing
        .iter()
        .map(|r| sentence_key(&r.study_id, &r.sentence))
        .collect();
    sentences
        .iter()
        .filter(|s| !s.sentence.trim().is_empty())
        .filter(|s| seen.insert(sentence_key(&s.study_id, &s.sentence)))
        .map(|s| SceneGraphRecord::new(&s.study_id, &s.image_id, &s.sentence))
        .collect()
}

pub fn exclude_leakage(records: Vec<SceneGraphRecord>, blocklist: &BTreeSet<String>) -> Vec<SceneGraphRecord> {
    if blocklist.is_empty() {
        return records;
    }
    records
        .into_iter()
        .filter(|r| !blocklist.contains(&r.study_id))
        .collect()
}

/// Parses newline-delimited study ids; blank lines and `#` comments are ignored.
pub fn parse_blocklist<R: BufRead>(reader: R) -> std::io::Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for line in reader.lines() {
        let line = line?;
        let id = line.trim();
        if !id.is_empty() && !id.starts_with('#') {
            out.insert(id.to_string());
        }
    }
    Ok(out)
}

pub fn load_blocklist(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    parse_blocklist(open(path)?).map_err(|e| Error::io(path, e))
}

pub fn load_hierarchy(path: impl AsRef<Path>) -> Result<RegionHierarchy> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RegionHierarchy::from_json(&text).map_err(|e| Error::Hierarchy(format!("{}: {e}", path.display())))
}

pub fn read_scene_graph<R: BufRead>(reader: R, source: &str) -> Result<Vec<SceneGraphRecord>> {
    Ok(read_jsonl::<SceneGraphRecord, _>(reader, source)?
        .into_iter()
        .map(|(line, mut r)| {
            r.line = Some(line);
            r
        })
        .collect())
}

pub fn load_scene_graph(path: impl AsRef<Path>) -> Result<Vec<SceneGraphRecord>> {
    let path = path.as_ref();
    read_scene_graph(open(path)?, &path.display().to_string())
}

pub fn write_scene_graph<W: Write>(records: &[SceneGraphRecord], writer: W) -> Result<()> {
    write_jsonl(records, writer)
}

pub fn save_scene_graph(records: &[SceneGraphRecord], path: impl AsRef<Path>) -> Result<()> {
    write_scene_graph(records, create(path.as_ref())?)
}

pub fn load_report_sentences(path: impl AsRef<Path>) -> Result<Vec<ReportSentence>> {
    let path = path.as_ref();
    Ok(read_jsonl(open(path)?, &path.display().to_string())?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    /// Worker threads for stage 1, which bounds in-flight filter calls.
    pub jobs: usize,
    /// When false, a filter failure aborts the run instead of using rules.
    pub allow_fallback: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            jobs: 4,
            allow_fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanupReport {
    pub schema_version: String,
    pub filter: String,
    pub deterministic: bool,
    pub n_input_records: usize,
    pub n_input_pairs: usize,
    pub n_after_stage1: usize,
    pub n_after_stage2: usize,
    pub n_negative_records: usize,
    /// Records added by stage 3. They carry no pairs.
    pub n_added_stage3: usize,
    /// Records removed by the blocklist.
    pub n_excluded_leakage: usize,
    pub n_excluded_pairs: usize,
    pub n_final_pairs: usize,
    pub n_output_records: usize,
    pub n_fallbacks: usize,
    pub n_unknown_regions: usize,
    /// `100 * (1 - n_final_pairs / n_input_pairs)`, 0 for empty input.
    pub reduction_pct: f64,
}

fn count_pairs(records: &[SceneGraphRecord]) -> usize {
    records.iter().map(SceneGraphRecord::n_pairs).sum()
}

/// Runs stage 1 over all records on `jobs` threads, preserving input order.
fn run_stage1(
    records: &[SceneGraphRecord],
    hierarchy: &RegionHierarchy,
    filter: &dyn RegionFilter,
    config: &PipelineConfig,
) -> Result<(Vec<SceneGraphRecord>, usize)> {
    let jobs = config.jobs.max(1).min(records.len().max(1));
    let next = AtomicUsize::new(0);
    let mut results: Vec<(usize, Result<(SceneGraphRecord, bool)>)> = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..jobs)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(rec) = records.get(i) else { break };
                        done.push((i, select_regions(rec, hierarchy, filter, config.allow_fallback)));
                    }
                    done
                })
            })
            .collect();
        workers
            .into_iter()
            .flat_map(|w| w.join().expect("stage 1 worker panicked"))
            .collect()
    });
    results.sort_by_key(|(i, _)| *i);
    let mut out = Vec::with_capacity(records.len());
    let mut fallbacks = 0;
    for (_, r) in results {
        let (rec, fell_back) = r?;
        fallbacks += usize::from(fell_back);
        out.push(rec);
    }
    Ok((out, fallbacks))
}

pub fn run_pipeline(
    input: &[SceneGraphRecord],
    extra_sentences: &[ReportSentence],
    hierarchy: &RegionHierarchy,
    filter: &dyn RegionFilter,
    blocklist: &BTreeSet<String>,
    config: &PipelineConfig,
) -> Result<(Vec<SceneGraphRecord>, CleanupReport)> {
    let n_input_pairs = count_pairs(input);
    let n_unknown_regions = input.iter().map(|r| r.unknown_regions(hierarchy).len()).sum();
    if n_unknown_regions > 0 {
        warn!("{n_unknown_regions} region names are outside the hierarchy");
    }

    let (stage1, n_fallbacks) = run_stage1(input, hierarchy, filter, config)?;
    let n_after_stage1 = count_pairs(&stage1);

    let mut records: Vec<SceneGraphRecord> = stage1.iter().map(drop_negative_sentences).collect();
    let n_after_stage2 = count_pairs(&records);
    let n_negative_records = stage1
        .iter()
        .zip(&records)
        .filter(|(a, b)| a.n_pairs() > 0 && b.n_pairs() == 0)
        .count();

    let added = add_ungrounded_sentences(extra_sentences, &records);
    let n_added_stage3 = added.len();
    records.extend(added);

    let before = records.len();
    let records = exclude_leakage(records, blocklist);
    let n_excluded_leakage = before - records.len();
    let n_final_pairs = count_pairs(&records);

    let reduction_pct = if n_input_pairs == 0 {
        0.0
    } else {
        100.0 * (1.0 - n_final_pairs as f64 / n_input_pairs as f64)
    };
    let report = CleanupReport {
        schema_version: SCHEMA_VERSION.to_string(),
        filter: filter.name().to_string(),
        deterministic: filter.is_deterministic(),
        n_input_records: input.len(),
        n_input_pairs,
        n_after_stage1,
        n_after_stage2,
        n_negative_records,
        n_added_stage3,
        n_excluded_leakage,
        n_excluded_pairs: n_after_stage2 - n_final_pairs,
        n_final_pairs,
        n_output_records: records.len(),
        n_fallbacks,
        n_unknown_regions,
        reduction_pct,
    };
    Ok((records, report))
}
