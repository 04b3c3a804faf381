//! Corpus ingestion and preprocessing.
//!
//! A corpus is an ordered, immutable list of text records with a provenance
//! string recording the file it came from and every transform applied since.
//! Two input formats are supported: plain text (one record per line) and
//! JSON-record lines with either a `"text"` key or an `"informal"`/`"formal"`
//! pair. All transforms are deterministic: the same input file and transform
//! chain produce byte-identical corpora.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Tokenizer;

/// Default template for the `paired` transform: the informal statement and
/// its formal counterpart rendered as one record with explicit pairing cues.
pub const DEFAULT_PAIRED_TEMPLATE: &str =
    "Informal Statement {informal} Formal Statement {formal}";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("record at line {line} has no recognized field (expected \"text\" or \"informal\"+\"formal\")")]
    MissingField { line: usize },
    #[error("record {index} is missing the {field} field required by the pairing transform")]
    RecordMissingField { index: usize, field: &'static str },
    #[error("paired template is missing the {{{slot}}} slot")]
    TemplateMissingSlot { slot: &'static str },
    #[error("token budget must be positive")]
    InvalidBudget,
    #[error("token budget {budget} is smaller than the first record ({first_len} tokens)")]
    BudgetTooSmall { budget: u64, first_len: u64 },
    #[error("concat requires at least one part")]
    EmptyConcat,
    #[error("partition requires at least one subset")]
    InvalidPartition,
}

/// Input file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// One record per line, LF-delimited UTF-8; blank lines are skipped.
    Lines,
    /// One JSON object per line with `"text"` or `"informal"`+`"formal"`.
    JsonRecords,
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusFormat::Lines => write!(f, "lines"),
            CorpusFormat::JsonRecords => write!(f, "json-records"),
        }
    }
}

/// Pairing transform mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// One record per input, rendered through the template.
    Paired,
    /// Two records per input: the informal statement, then the formal one.
    Split,
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairingMode::Paired => write!(f, "paired"),
            PairingMode::Split => write!(f, "split"),
        }
    }
}

/// One text record. At least one of `raw_text` / (`informal`, `formal`) is
/// non-empty; `source_index` is the record's position in its source file and
/// is strictly increasing within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub raw_text: String,
    pub informal: Option<String>,
    pub formal: Option<String>,
    pub source_index: usize,
}

impl CorpusRecord {
    pub fn from_text(text: impl Into<String>, source_index: usize) -> Self {
        CorpusRecord {
            raw_text: text.into(),
            informal: None,
            formal: None,
            source_index,
        }
    }

    pub fn from_pair(
        informal: impl Into<String>,
        formal: impl Into<String>,
        source_index: usize,
    ) -> Self {
        CorpusRecord {
            raw_text: String::new(),
            informal: Some(informal.into()),
            formal: Some(formal.into()),
            source_index,
        }
    }

    /// The text this record contributes when tokenized. A record that has not
    /// been through a pairing transform exposes its informal and formal parts
    /// juxtaposed on separate lines.
    pub fn text_joined(&self) -> String {
        if !self.raw_text.is_empty() {
            return self.raw_text.clone();
        }
        match (&self.informal, &self.formal) {
            (Some(i), Some(f)) => format!("{i}\n{f}"),
            (Some(i), None) => i.clone(),
            (None, Some(f)) => f.clone(),
            (None, None) => String::new(),
        }
    }
}

/// An ordered collection of records with an id and a provenance chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    id: String,
    records: Vec<CorpusRecord>,
    provenance: String,
}

impl Corpus {
    pub fn new(id: impl Into<String>, records: Vec<CorpusRecord>, provenance: impl Into<String>) -> Self {
        Corpus {
            id: id.into(),
            records,
            provenance: provenance.into(),
        }
    }

    /// Build a corpus directly from texts (mainly for tests and generators).
    pub fn from_texts<I, S>(id: &str, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let records = texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| CorpusRecord::from_text(t, i))
            .collect();
        Corpus::new(id, records, format!("synthetic({id})"))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Relabel the corpus (provenance is preserved).
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Record texts as seen by the tokenizer.
    pub fn texts(&self) -> impl Iterator<Item = String> + '_ {
        self.records.iter().map(|r| r.text_joined())
    }

    /// Load a corpus from a file. The id defaults to the file stem.
    pub fn load(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus, CorpusError> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let records = match format {
            CorpusFormat::Lines => parse_lines(&content)?,
            CorpusFormat::JsonRecords => parse_json_records(&content)?,
        };
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".to_string());
        Ok(Corpus::new(id, records, path.display().to_string()))
    }

    /// Write the corpus to a file, as JSON records when any record carries
    /// informal/formal fields and as plain lines otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<CorpusFormat, CorpusError> {
        let path = path.as_ref();
        let has_fields = self
            .records
            .iter()
            .any(|r| r.informal.is_some() || r.formal.is_some());
        let mut out = Vec::new();
        let format = if has_fields {
            for r in &self.records {
                let mut obj = serde_json::Map::new();
                if !r.raw_text.is_empty() {
                    obj.insert("text".into(), serde_json::Value::String(r.raw_text.clone()));
                }
                if let Some(i) = &r.informal {
                    obj.insert("informal".into(), serde_json::Value::String(i.clone()));
                }
                if let Some(f) = &r.formal {
                    obj.insert("formal".into(), serde_json::Value::String(f.clone()));
                }
                serde_json::to_writer(&mut out, &serde_json::Value::Object(obj))
                    .expect("serializing corpus record cannot fail");
                out.push(b'\n');
            }
            CorpusFormat::JsonRecords
        } else {
            for r in &self.records {
                out.extend_from_slice(r.raw_text.as_bytes());
                out.push(b'\n');
            }
            CorpusFormat::Lines
        };
        let mut file = fs::File::create(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        file.write_all(&out).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(format)
    }

    /// Apply the pairing transform. In `paired` mode every record is rendered
    /// through the template (one output per input); in `split` mode each
    /// record produces two outputs, informal first.
    pub fn transform_pairing(
        &self,
        mode: PairingMode,
        template: &str,
    ) -> Result<Corpus, CorpusError> {
        if mode == PairingMode::Paired {
            if !template.contains("{informal}") {
                return Err(CorpusError::TemplateMissingSlot { slot: "informal" });
            }
            if !template.contains("{formal}") {
                return Err(CorpusError::TemplateMissingSlot { slot: "formal" });
            }
        }
        let mut records = Vec::with_capacity(match mode {
            PairingMode::Paired => self.records.len(),
            PairingMode::Split => self.records.len() * 2,
        });
        for (index, rec) in self.records.iter().enumerate() {
            let informal = rec
                .informal
                .as_deref()
                .filter(|s| !s.is_empty())
                .ok_or(CorpusError::RecordMissingField {
                    index,
                    field: "informal",
                })?;
            let formal = rec
                .formal
                .as_deref()
                .filter(|s| !s.is_empty())
                .ok_or(CorpusError::RecordMissingField {
                    index,
                    field: "formal",
                })?;
            match mode {
                PairingMode::Paired => {
                    let text = template
                        .replace("{informal}", informal)
                        .replace("{formal}", formal);
                    records.push(CorpusRecord {
                        raw_text: text,
                        informal: Some(informal.to_string()),
                        formal: Some(formal.to_string()),
                        source_index: records.len(),
                    });
                }
                PairingMode::Split => {
                    records.push(CorpusRecord::from_text(informal, records.len()));
                    records.push(CorpusRecord::from_text(formal, records.len() + 1));
                }
            }
        }
        Ok(Corpus::new(
            self.id.clone(),
            records,
            format!("{} | pairing({mode})", self.provenance),
        ))
    }

    /// Longest prefix of records whose total token count fits the budget.
    pub fn subset_by_token_budget(
        &self,
        tokenizer: &Tokenizer,
        budget: u64,
    ) -> Result<Corpus, CorpusError> {
        if budget == 0 {
            return Err(CorpusError::InvalidBudget);
        }
        let mut total = 0u64;
        let mut keep = 0usize;
        for rec in &self.records {
            let len = tokenizer.encoded_len(&rec.text_joined());
            if total + len > budget {
                break;
            }
            total += len;
            keep += 1;
        }
        if keep == 0 {
            if let Some(first) = self.records.first() {
                return Err(CorpusError::BudgetTooSmall {
                    budget,
                    first_len: tokenizer.encoded_len(&first.text_joined()),
                });
            }
        }
        Ok(Corpus::new(
            self.id.clone(),
            self.records[..keep].to_vec(),
            format!("{} | token_budget({budget})", self.provenance),
        ))
    }

    /// Concatenate corpora in order. The result's id joins the part ids and
    /// its provenance lists all parts.
    pub fn concat(parts: &[Corpus]) -> Result<Corpus, CorpusError> {
        if parts.is_empty() {
            return Err(CorpusError::EmptyConcat);
        }
        let mut records = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for part in parts {
            for rec in &part.records {
                let mut rec = rec.clone();
                rec.source_index = records.len();
                records.push(rec);
            }
        }
        let ids: Vec<&str> = parts.iter().map(|p| p.id.as_str()).collect();
        Ok(Corpus::new(
            ids.join("+"),
            records,
            format!("concat({})", ids.join(",")),
        ))
    }

    /// Split into `k` disjoint subsets by record index modulo `k`. Subset `j`
    /// holds records whose index is congruent to `j`.
    pub fn partition(&self, k: usize) -> Result<Vec<Corpus>, CorpusError> {
        if k == 0 {
            return Err(CorpusError::InvalidPartition);
        }
        let mut parts: Vec<Vec<CorpusRecord>> = vec![Vec::new(); k];
        for (i, rec) in self.records.iter().enumerate() {
            let mut rec = rec.clone();
            let bucket = i % k;
            rec.source_index = parts[bucket].len();
            parts[bucket].push(rec);
        }
        Ok(parts
            .into_iter()
            .enumerate()
            .map(|(j, records)| {
                Corpus::new(
                    format!("{}#p{}of{}", self.id, j, k),
                    records,
                    format!("{} | partition({j} mod {k})", self.provenance),
                )
            })
            .collect())
    }
}

/// Parse plain-line corpus content: one record per non-blank line. The
/// record's `source_index` is the 0-based line number in the input.
pub fn parse_lines(input: &str) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut records = Vec::new();
    for (line_no, line) in input.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        records.push(CorpusRecord::from_text(line, line_no));
    }
    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(records)
}

/// Parse JSON-record corpus content: one JSON object per non-blank line with
/// a `"text"` key or an `"informal"`+`"formal"` pair. Unknown keys are
/// ignored; a record with neither recognized field is an error.
pub fn parse_json_records(input: &str) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut records = Vec::new();
    for (line_no, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                line: line_no + 1,
                reason: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::Malformed {
            line: line_no + 1,
            reason: "expected a JSON object".to_string(),
        })?;
        let get_str = |key: &str| -> Result<Option<String>, CorpusError> {
            match obj.get(key) {
                None => Ok(None),
                Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
                Some(_) => Err(CorpusError::Malformed {
                    line: line_no + 1,
                    reason: format!("field \"{key}\" must be a string"),
                }),
            }
        };
        let text = get_str("text")?;
        let informal = get_str("informal")?;
        let formal = get_str("formal")?;
        let has_text = text.as_deref().is_some_and(|t| !t.is_empty());
        let has_pair = informal.as_deref().is_some_and(|s| !s.is_empty())
            && formal.as_deref().is_some_and(|s| !s.is_empty());
        if !has_text && !has_pair {
            return Err(CorpusError::MissingField { line: line_no + 1 });
        }
        records.push(CorpusRecord {
            raw_text: text.unwrap_or_default(),
            informal,
            formal,
            source_index: line_no,
        });
    }
    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn pair_corpus(pairs: &[(&str, &str)]) -> Corpus {
        let records = pairs
            .iter()
            .enumerate()
            .map(|(i, (inf, form))| CorpusRecord::from_pair(*inf, *form, i))
            .collect();
        Corpus::new("pairs", records, "test")
    }

    #[test]
    fn load_json_records_with_both_fields() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{{\"informal\":\"a\",\"formal\":\"b\"}}").unwrap();
        writeln!(f, "{{\"informal\":\"c\",\"formal\":\"d\"}}").unwrap();
        let c = Corpus::load(f.path(), CorpusFormat::JsonRecords).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.records()[0].informal.as_deref(), Some("a"));
        assert_eq!(c.records()[0].formal.as_deref(), Some("b"));
        assert_eq!(c.records()[1].informal.as_deref(), Some("c"));
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        for format in [CorpusFormat::Lines, CorpusFormat::JsonRecords] {
            match Corpus::load(f.path(), format) {
                Err(CorpusError::EmptyCorpus) => {}
                other => panic!("expected EmptyCorpus, got {other:?}"),
            }
        }
    }

    #[test]
    fn unrecognized_schema_reports_line() {
        let err = parse_json_records("{\"body\":\"x\"}").unwrap_err();
        match err {
            CorpusError::MissingField { line } => assert_eq!(line, 1),
            other => panic!("expected MissingField, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = parse_json_records("{\"text\":\"ok\"}\nnot json").unwrap_err();
        match err {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        match Corpus::load("/nonexistent/corpus.txt", CorpusFormat::Lines) {
            Err(CorpusError::Io { .. }) => {}
            other => panic!("expected Io, got {other:?}"),
        }
    }

    #[test]
    fn paired_mode_instantiates_template() {
        let c = pair_corpus(&[("a", "b")]);
        let out = c
            .transform_pairing(PairingMode::Paired, DEFAULT_PAIRED_TEMPLATE)
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(
            out.records()[0].raw_text,
            "Informal Statement a Formal Statement b"
        );
    }

    #[test]
    fn split_mode_emits_informal_then_formal() {
        let c = pair_corpus(&[("a", "b")]);
        let out = c
            .transform_pairing(PairingMode::Split, DEFAULT_PAIRED_TEMPLATE)
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.records()[0].raw_text, "a");
        assert_eq!(out.records()[1].raw_text, "b");
    }

    #[test]
    fn pairing_on_empty_corpus_is_identity() {
        let c = Corpus::new("e", vec![], "test");
        for mode in [PairingMode::Paired, PairingMode::Split] {
            let out = c.transform_pairing(mode, DEFAULT_PAIRED_TEMPLATE).unwrap();
            assert!(out.is_empty());
        }
    }

    #[test]
    fn pairing_requires_both_fields() {
        let c = Corpus::new(
            "x",
            vec![CorpusRecord::from_text("just text", 0)],
            "test",
        );
        match c.transform_pairing(PairingMode::Paired, DEFAULT_PAIRED_TEMPLATE) {
            Err(CorpusError::RecordMissingField { index: 0, .. }) => {}
            other => panic!("expected RecordMissingField, got {other:?}"),
        }
    }

    #[test]
    fn paired_template_must_have_both_slots() {
        let c = pair_corpus(&[("a", "b")]);
        match c.transform_pairing(PairingMode::Paired, "only {informal}") {
            Err(CorpusError::TemplateMissingSlot { slot: "formal" }) => {}
            other => panic!("expected TemplateMissingSlot, got {other:?}"),
        }
    }

    #[test]
    fn budget_keeps_longest_prefix() {
        // 10 records of exactly 1000 tokens each (999 bytes + BOS).
        let texts: Vec<String> = (0..10).map(|_| "x".repeat(999)).collect();
        let c = Corpus::from_texts("big", texts);
        let t = Tokenizer::new();
        let out = c.subset_by_token_budget(&t, 4096).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(t.count_tokens(&out), 4000);
    }

    #[test]
    fn budget_larger_than_corpus_is_identity() {
        let c = Corpus::from_texts("small", ["a", "bb", "ccc"]);
        let t = Tokenizer::new();
        let out = c.subset_by_token_budget(&t, 1_000_000).unwrap();
        assert_eq!(out.records(), c.records());
    }

    #[test]
    fn budget_below_first_record_is_error() {
        let c = Corpus::from_texts("one", ["hello world"]);
        let t = Tokenizer::new();
        match c.subset_by_token_budget(&t, 3) {
            Err(CorpusError::BudgetTooSmall { budget: 3, first_len: 12 }) => {}
            other => panic!("expected BudgetTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn concat_preserves_order_and_counts() {
        let a = Corpus::from_texts("a", ["1", "2", "3"]);
        let b = Corpus::from_texts("b", ["4", "5"]);
        let ab = Corpus::concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.len(), 5);
        assert_eq!(ab.records()[0].raw_text, "1");
        let ba = Corpus::concat(&[b, a]).unwrap();
        assert_ne!(
            ab.records().iter().map(|r| &r.raw_text).collect::<Vec<_>>(),
            ba.records().iter().map(|r| &r.raw_text).collect::<Vec<_>>()
        );
        let t = Tokenizer::new();
        assert_eq!(t.count_tokens(&ab), t.count_tokens(&ba));
    }

    #[test]
    fn concat_single_part_is_identity() {
        let a = Corpus::from_texts("a", ["1", "2"]);
        let out = Corpus::concat(std::slice::from_ref(&a)).unwrap();
        assert_eq!(out.records(), a.records());
    }

    #[test]
    fn concat_of_nothing_is_error() {
        match Corpus::concat(&[]) {
            Err(CorpusError::EmptyConcat) => {}
            other => panic!("expected EmptyConcat, got {other:?}"),
        }
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let c = Corpus::from_texts("c", (0..10).map(|i| format!("r{i}")));
        let parts = c.partition(3).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 10);
        assert_eq!(parts[0].records()[0].raw_text, "r0");
        assert_eq!(parts[1].records()[0].raw_text, "r1");
        assert_eq!(parts[2].records()[1].raw_text, "r5");
    }

    #[test]
    fn transforms_are_deterministic() {
        let c = pair_corpus(&[("a", "b"), ("c", "d")]);
        let once = c
            .transform_pairing(PairingMode::Split, DEFAULT_PAIRED_TEMPLATE)
            .unwrap();
        let twice = c
            .transform_pairing(PairingMode::Split, DEFAULT_PAIRED_TEMPLATE)
            .unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn provenance_chains_transforms() {
        let c = pair_corpus(&[("a", "b")]);
        let t = Tokenizer::new();
        let out = c
            .transform_pairing(PairingMode::Paired, DEFAULT_PAIRED_TEMPLATE)
            .unwrap()
            .subset_by_token_budget(&t, 1000)
            .unwrap();
        assert_eq!(out.provenance(), "test | pairing(paired) | token_budget(1000)");
    }

    #[test]
    fn save_load_roundtrip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let plain = Corpus::from_texts("p", ["one", "two"]);
        let path = dir.path().join("plain.txt");
        assert_eq!(plain.save(&path).unwrap(), CorpusFormat::Lines);
        let loaded = Corpus::load(&path, CorpusFormat::Lines).unwrap();
        assert_eq!(
            loaded.records().iter().map(|r| &r.raw_text).collect::<Vec<_>>(),
            plain.records().iter().map(|r| &r.raw_text).collect::<Vec<_>>()
        );

        let pairs = pair_corpus(&[("i1", "f1"), ("i2", "f2")]);
        let jpath = dir.path().join("pairs.jsonl");
        assert_eq!(pairs.save(&jpath).unwrap(), CorpusFormat::JsonRecords);
        let loaded = Corpus::load(&jpath, CorpusFormat::JsonRecords).unwrap();
        assert_eq!(loaded.records()[1].informal.as_deref(), Some("i2"));
        assert_eq!(loaded.records()[1].formal.as_deref(), Some("f2"));
    }

    proptest::proptest! {
        #[test]
        fn prop_split_doubles_and_paired_preserves(n in 0usize..16) {
            let pairs: Vec<(String, String)> = (0..n)
                .map(|i| (format!("inf{i}"), format!("form{i}")))
                .collect();
            let refs: Vec<(&str, &str)> =
                pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let c = pair_corpus(&refs);
            let split = c.transform_pairing(PairingMode::Split, DEFAULT_PAIRED_TEMPLATE).unwrap();
            let paired = c.transform_pairing(PairingMode::Paired, DEFAULT_PAIRED_TEMPLATE).unwrap();
            proptest::prop_assert_eq!(split.len(), 2 * n);
            proptest::prop_assert_eq!(paired.len(), n);
        }

        #[test]
        fn prop_budget_is_tight(lens in proptest::collection::vec(1usize..40, 1..20), budget in 1u64..400) {
            let texts: Vec<String> = lens.iter().map(|&l| "y".repeat(l)).collect();
            let c = Corpus::from_texts("c", texts);
            let t = Tokenizer::new();
            match c.subset_by_token_budget(&t, budget) {
                Ok(out) => {
                    let used = t.count_tokens(&out);
                    proptest::prop_assert!(used <= budget);
                    // Adding the next record must exceed the budget.
                    if out.len() < c.len() {
                        let next = t.encoded_len(&c.records()[out.len()].text_joined());
                        proptest::prop_assert!(used + next > budget);
                    }
                }
                Err(CorpusError::BudgetTooSmall { .. }) => {
                    let first = t.encoded_len(&c.records()[0].text_joined());
                    proptest::prop_assert!(first > budget);
                }
                Err(e) => return Err(proptest::test_runner::TestCaseError::fail(format!("{e}"))),
            }
        }
    }
}
