//! Interaction ingestion, k-core filtering, dense vocabularies and
//! leave-one-out splits.
//!
//! Sequences are left-padded: padding (item id 0) precedes real items so the
//! last column of a padded row is always the most recent interaction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: i64,
}

#[derive(Clone, Debug, Default)]
pub struct LoadedInteractions {
    pub records: Vec<InteractionRecord>,
    /// 1-based line numbers that failed to parse.
    pub malformed_lines: Vec<usize>,
}

/// Malformed-line share above which loading fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

/// Reads `user \t item \t timestamp` lines. Blank lines are skipped.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<LoadedInteractions> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file), path)
}

pub fn parse_interactions(reader: impl BufRead, path: &Path) -> Result<LoadedInteractions> {
    let mut out = LoadedInteractions::default();
    let mut total = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(line) {
            Some(r) => out.records.push(r),
            None => out.malformed_lines.push(idx + 1),
        }
    }
    if total == 0 {
        tracing::warn!(path = %path.display(), "interaction file is empty");
    }
    if !out.malformed_lines.is_empty() {
        tracing::warn!(
            path = %path.display(),
            malformed = out.malformed_lines.len(),
            "skipped malformed interaction lines"
        );
        if out.malformed_lines.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
            return Err(Error::TooManyMalformed {
                path: path.to_path_buf(),
                malformed: out.malformed_lines.len(),
                total,
                lines: out.malformed_lines,
            });
        }
    }
    Ok(out)
}

fn parse_line(line: &str) -> Option<InteractionRecord> {
    let mut parts = line.split('\t');
    let user = parts.next()?.trim();
    let item = parts.next()?.trim();
    let ts = parts.next()?.trim().parse::<i64>().ok()?;
    if parts.next().is_some() || user.is_empty() || item.is_empty() {
        return None;
    }
    Some(InteractionRecord {
        user_key: user.to_owned(),
        item_key: item.to_owned(),
        timestamp: ts,
    })
}

/// Repeatedly drops users and items with fewer than `min_core` interactions
/// until nothing changes. Record order is preserved.
pub fn five_core_filter(records: Vec<InteractionRecord>, min_core: usize) -> Vec<InteractionRecord> {
    let mut records = records;
    loop {
        let mut per_user: HashMap<&str, usize> = HashMap::new();
        let mut per_item: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *per_user.entry(&r.user_key).or_default() += 1;
            *per_item.entry(&r.item_key).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| per_user[r.user_key.as_str()] >= min_core && per_item[r.item_key.as_str()] >= min_core)
            .collect();
        if keep.iter().all(|&k| k) {
            return records;
        }
        let mut it = keep.into_iter();
        records.retain(|_| it.next().unwrap_or(false));
    }
}

/// Bijection between raw keys and dense ids `1..=len`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    keys: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_sorted_keys(keys: Vec<String>) -> Self {
        let lookup = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i as u32 + 1))
            .collect();
        Self { keys, lookup }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn id(&self, key: &str) -> Option<u32> {
        self.lookup.get(key).copied()
    }

    pub fn key(&self, id: u32) -> Option<&str> {
        if id == PAD {
            return None;
        }
        self.keys.get(id as usize - 1).map(String::as_str)
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    fn rebuild(&mut self) {
        *self = Self::from_sorted_keys(std::mem::take(&mut self.keys));
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: u32,
    pub items: Vec<u32>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    /// Sorted by `user_id`; `sequences[i].user_id == i + 1`.
    pub sequences: Vec<InteractionSequence>,
    pub users: Vocab,
    pub items: Vocab,
}

/// Assigns dense ids in lexicographic key order (so ids do not depend on
/// file order) and orders each user's items by timestamp, ties kept in
/// input order.
pub fn build_sequences(records: &[InteractionRecord]) -> SequenceData {
    let user_keys: Vec<String> = records
        .iter()
        .map(|r| r.user_key.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let item_keys: Vec<String> = records
        .iter()
        .map(|r| r.item_key.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let users = Vocab::from_sorted_keys(user_keys);
    let items = Vocab::from_sorted_keys(item_keys);

    let mut per_user: BTreeMap<u32, Vec<(i64, u32)>> = BTreeMap::new();
    for r in records {
        let u = users.id(&r.user_key).expect("user in vocab");
        let i = items.id(&r.item_key).expect("item in vocab");
        per_user.entry(u).or_default().push((r.timestamp, i));
    }
    let sequences = per_user
        .into_iter()
        .map(|(user_id, mut evs)| {
            evs.sort_by_key(|&(ts, _)| ts);
            InteractionSequence {
                user_id,
                items: evs.into_iter().map(|(_, i)| i).collect(),
            }
        })
        .collect();
    SequenceData {
        sequences,
        users,
        items,
    }
}

/// Leave-one-out view of one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LooSplit<'a> {
    pub train_prefix: &'a [u32],
    pub valid_input: &'a [u32],
    pub valid_target: u32,
    pub test_input: &'a [u32],
    pub test_target: u32,
}

/// `None` for sequences shorter than 3, which stay in training only.
pub fn leave_one_out(items: &[u32]) -> Option<LooSplit<'_>> {
    let n = items.len();
    if n < 3 {
        return None;
    }
    Some(LooSplit {
        train_prefix: &items[..n - 2],
        valid_input: &items[..n - 2],
        valid_target: items[n - 2],
        test_input: &items[..n - 1],
        test_target: items[n - 1],
    })
}

/// The part of a sequence used for training: everything before the
/// validation target, or the whole sequence when it is too short to split.
pub fn train_prefix(items: &[u32]) -> &[u32] {
    match leave_one_out(items) {
        Some(s) => s.train_prefix,
        None => items,
    }
}

/// Keeps the most recent `max_len` items.
pub fn truncate(items: &[u32], max_len: usize) -> &[u32] {
    &items[items.len().saturating_sub(max_len)..]
}

/// Left-pads (or truncates) to exactly `max_len`; the mask marks real items.
pub fn truncate_pad(items: &[u32], max_len: usize) -> (Vec<u32>, Vec<bool>) {
    assert!(max_len >= 1, "max_len must be positive");
    let kept = truncate(items, max_len);
    let pad = max_len - kept.len();
    let mut ids = vec![PAD; pad];
    ids.extend_from_slice(kept);
    let mut mask = vec![false; pad];
    mask.extend(std::iter::repeat_n(true, kept.len()));
    (ids, mask)
}

/// Fixed-width batch of left-padded inputs and their next-item targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub max_len: usize,
    pub item_ids: Vec<Vec<u32>>,
    pub attn_mask: Vec<Vec<bool>>,
    pub targets: Vec<u32>,
}

impl PaddedBatch {
    pub fn new(inputs: &[&[u32]], targets: &[u32], max_len: usize) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if let Some(pos) = targets.iter().position(|&t| t == PAD) {
            return Err(Error::InvalidArgument(format!("target {pos} is the padding id")));
        }
        let (item_ids, attn_mask) = inputs.iter().map(|s| truncate_pad(s, max_len)).unzip();
        Ok(Self {
            max_len,
            item_ids,
            attn_mask,
            targets: targets.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    /// Real (unpadded) items of row `r`.
    pub fn real_items(&self, r: usize) -> &[u32] {
        let start = self.attn_mask[r].iter().position(|&m| m).unwrap_or(self.max_len);
        &self.item_ids[r][start..]
    }
}

/// Textual attributes of one item. Absent and empty fields are equivalent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemText {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ItemText {
    fn normalized(self) -> Self {
        let clean = |s: Option<String>| s.map(|s| s.trim().to_owned()).filter(|s| !s.is_empty());
        Self {
            title: clean(self.title),
            category: clean(self.category),
            brand: clean(self.brand),
            description: clean(self.description),
        }
    }
}

#[derive(Deserialize)]
struct RawCatalogLine {
    item: serde_json::Value,
    #[serde(flatten)]
    text: ItemText,
}

#[derive(Serialize, Deserialize)]
struct NormCatalogLine {
    item_id: u32,
    item_key: String,
    #[serde(flatten)]
    text: ItemText,
}

/// Item attributes indexed by dense id; every vocabulary item has an entry.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemCatalog {
    entries: Vec<ItemText>,
}

impl ItemCatalog {
    pub fn empty(num_items: usize) -> Self {
        Self {
            entries: vec![ItemText::default(); num_items + 1],
        }
    }

    pub fn from_entries(entries: Vec<ItemText>) -> Self {
        let mut all = vec![ItemText::default()];
        all.extend(entries.into_iter().map(ItemText::normalized));
        Self { entries: all }
    }

    pub fn num_items(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    pub fn get(&self, item: u32) -> Option<&ItemText> {
        if item == PAD {
            return None;
        }
        self.entries.get(item as usize)
    }

    pub fn set(&mut self, item: u32, text: ItemText) {
        self.entries[item as usize] = text.normalized();
    }
}

/// Reads one JSON object per line with keys item/title/category/brand/
/// description. Items outside `items` are ignored; vocabulary items without
/// a line get empty attributes.
pub fn load_catalog(path: impl AsRef<Path>, items: &Vocab) -> Result<ItemCatalog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut catalog = ItemCatalog::empty(items.len());
    let mut missing: HashSet<u32> = (1..=items.len() as u32).collect();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawCatalogLine = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        let key = match raw.item {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        if let Some(id) = items.id(&key) {
            catalog.set(id, raw.text);
            missing.remove(&id);
        }
    }
    if !missing.is_empty() {
        tracing::warn!(missing = missing.len(), "items without catalog entries");
    }
    Ok(catalog)
}

/// A preprocessed dataset as written by `preprocess`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub users: Vocab,
    pub items: Vocab,
    pub catalog: ItemCatalog,
    pub max_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub raw_records: usize,
    pub malformed_lines: usize,
    pub filtered_records: usize,
    pub users: usize,
    pub items: usize,
    pub avg_length: f64,
    pub min_length: usize,
    pub max_length: usize,
    pub density: f64,
    pub eval_users: usize,
    pub truncated_users: usize,
    pub min_core: usize,
    pub max_len: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    users: Vec<String>,
    items: Vec<String>,
    max_len: usize,
}

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    user_id: u32,
    items: Vec<u32>,
}

pub const SEQUENCES_FILE: &str = "sequences.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CATALOG_FILE: &str = "catalog.norm.jsonl";
pub const STATS_FILE: &str = "stats.json";

impl Dataset {
    pub fn from_sequences(data: SequenceData, catalog: ItemCatalog, max_len: usize) -> Self {
        Self {
            sequences: data.sequences,
            users: data.users,
            items: data.items,
            catalog,
            max_len,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn sequence(&self, user_id: u32) -> &InteractionSequence {
        &self.sequences[user_id as usize - 1]
    }

    pub fn stats(&self, raw_records: usize, malformed: usize, min_core: usize) -> DatasetStats {
        let lens: Vec<usize> = self.sequences.iter().map(InteractionSequence::len).collect();
        let total: usize = lens.iter().sum();
        let users = self.num_users();
        let items = self.num_items();
        DatasetStats {
            raw_records,
            malformed_lines: malformed,
            filtered_records: total,
            users,
            items,
            avg_length: if users == 0 { 0.0 } else { total as f64 / users as f64 },
            min_length: lens.iter().copied().min().unwrap_or(0),
            max_length: lens.iter().copied().max().unwrap_or(0),
            density: if users * items == 0 {
                0.0
            } else {
                total as f64 / (users * items) as f64
            },
            eval_users: lens.iter().filter(|&&l| l >= 3).count(),
            truncated_users: lens.iter().filter(|&&l| l > self.max_len + 1).count(),
            min_core,
            max_len: self.max_len,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let path = dir.join(SEQUENCES_FILE);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for s in &self.sequences {
            let line = serde_json::to_string(&SequenceLine {
                user_id: s.user_id,
                items: s.items.clone(),
            })
            .expect("serialize sequence");
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join(VOCAB_FILE);
        let vocab = VocabFile {
            users: self.users.keys().to_vec(),
            items: self.items.keys().to_vec(),
            max_len: self.max_len,
        };
        fs::write(&path, serde_json::to_string_pretty(&vocab).expect("serialize vocab"))
            .map_err(|e| Error::io(&path, e))?;

        let path = dir.join(CATALOG_FILE);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for id in 1..=self.num_items() as u32 {
            let line = NormCatalogLine {
                item_id: id,
                item_key: self.items.key(id).unwrap_or_default().to_owned(),
                text: self.catalog.get(id).cloned().unwrap_or_default(),
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("serialize catalog"))
                .map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(VOCAB_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let vocab: VocabFile =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut users = Vocab {
            keys: vocab.users,
            lookup: HashMap::new(),
        };
        users.rebuild();
        let mut items = Vocab {
            keys: vocab.items,
            lookup: HashMap::new(),
        };
        items.rebuild();

        let path = dir.join(SEQUENCES_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut sequences = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: SequenceLine = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), idx + 1)))?;
            if s.items.iter().any(|&i| i == PAD || i as usize > items.len()) {
                return Err(Error::Parse(format!("{}:{}: item id out of range", path.display(), idx + 1)));
            }
            sequences.push(InteractionSequence {
                user_id: s.user_id,
                items: s.items,
            });
        }
        for (i, s) in sequences.iter().enumerate() {
            if s.user_id as usize != i + 1 {
                return Err(Error::Parse(format!(
                    "{}: user ids must be dense and ordered (line {})",
                    path.display(),
                    i + 1
                )));
            }
        }

        let path = dir.join(CATALOG_FILE);
        let mut catalog = ItemCatalog::empty(items.len());
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let l: NormCatalogLine = serde_json::from_str(&line)
                    .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), idx + 1)))?;
                if l.item_id >= 1 && l.item_id as usize <= items.len() {
                    catalog.set(l.item_id, l.text);
                }
            }
        }
        Ok(Self {
            sequences,
            users,
            items,
            catalog,
            max_len: vocab.max_len,
        })
    }
}

pub fn write_stats(dir: impl AsRef<Path>, stats: &DatasetStats) -> Result<()> {
    let path = dir.as_ref().join(STATS_FILE);
    fs::write(&path, serde_json::to_string_pretty(stats).expect("serialize stats"))
        .map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug)]
pub struct PreprocessOutput {
    pub dataset: Dataset,
    pub stats: DatasetStats,
}

/// Load → filter → build sequences → attach catalog.
pub fn preprocess(
    interactions: impl AsRef<Path>,
    catalog: Option<&Path>,
    min_core: usize,
    max_len: usize,
) -> Result<PreprocessOutput> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let loaded = load_interactions(interactions)?;
    let raw = loaded.records.len();
    let filtered = five_core_filter(loaded.records, min_core);
    let data = build_sequences(&filtered);
    let cat = match catalog {
        Some(p) => load_catalog(p, &data.items)?,
        None => ItemCatalog::empty(data.items.len()),
    };
    let dataset = Dataset::from_sequences(data, cat, max_len);
    let stats = dataset.stats(raw, loaded.malformed_lines.len(), min_core);
    Ok(PreprocessOutput { dataset, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: &str, i: &str, t: i64) -> InteractionRecord {
        InteractionRecord {
            user_key: u.into(),
            item_key: i.into(),
            timestamp: t,
        }
    }

    fn parse(text: &str) -> Result<LoadedInteractions> {
        parse_interactions(text.as_bytes(), Path::new("mem"))
    }

    #[test]
    fn loads_well_formed_lines() {
        let got = parse("u1\ti1\t10\nu1\ti2\t11\nu2\ti1\t5\n").unwrap();
        assert_eq!(got.records.len(), 3);
        assert!(got.malformed_lines.is_empty());
        assert_eq!(got.records[2], rec("u2", "i1", 5));
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let got = parse("").unwrap();
        assert!(got.records.is_empty());
    }

    #[test]
    fn one_malformed_line_in_a_thousand_is_tolerated() {
        let mut text = String::new();
        for i in 0..1000 {
            if i == 417 {
                text.push_str("broken line without tabs\n");
            } else {
                text.push_str(&format!("u{}\ti{}\t{}\n", i % 13, i % 17, i));
            }
        }
        let expected_bad = text
            .lines()
            .filter(|l| l.split('\t').count() != 3)
            .count();
        let got = parse(&text).unwrap();
        assert_eq!(expected_bad, 1);
        assert_eq!(got.records.len(), 999);
        assert_eq!(got.malformed_lines, vec![418]);
    }

    #[test]
    fn too_many_malformed_lines_is_fatal() {
        let text = "a\tb\t1\nbad\na\tc\tnotanumber\n";
        match parse(text) {
            Err(Error::TooManyMalformed { lines, .. }) => assert_eq!(lines, vec![2, 3]),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn removes_user_with_four_interactions() {
        let mut recs = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                recs.push(rec(&format!("u{u}"), &format!("i{i}"), i));
            }
        }
        for i in 0..4 {
            recs.push(rec("short", &format!("i{i}"), i));
        }
        let out = five_core_filter(recs, 5);
        assert!(out.iter().all(|r| r.user_key != "short"));
        assert_eq!(out.len(), 25);
    }

    #[test]
    fn dense_input_is_a_fixpoint() {
        let mut recs = Vec::new();
        for u in 0..6 {
            for i in 0..6 {
                recs.push(rec(&format!("u{u}"), &format!("i{i}"), (u * 6 + i) as i64));
            }
        }
        assert_eq!(five_core_filter(recs.clone(), 5), recs);
    }

    /// Exhaustive reference: recount and drop one offender at a time.
    fn slow_core(mut recs: Vec<InteractionRecord>, k: usize) -> Vec<InteractionRecord> {
        loop {
            let count = |f: &dyn Fn(&InteractionRecord) -> &str, key: &str| {
                recs.iter().filter(|r| f(r) == key).count()
            };
            let bad = recs.iter().position(|r| {
                count(&|x| &x.user_key, &r.user_key) < k || count(&|x| &x.item_key, &r.item_key) < k
            });
            match bad {
                Some(p) => {
                    recs.remove(p);
                }
                None => return recs,
            }
        }
    }

    #[test]
    fn cascade_removes_user_and_dependent_item() {
        // Six users. Item x has exactly 5 hits (u0..u3 and u5), so it only
        // survives while u5 does.
        let mut recs = Vec::new();
        for u in 0..5 {
            for (t, i) in ["a", "b", "c", "d", "e"].iter().enumerate() {
                recs.push(rec(&format!("u{u}"), i, t as i64));
            }
        }
        for u in 0..4 {
            recs.push(rec(&format!("u{u}"), "x", 9));
        }
        // u5 has 4 interactions -> removed, which drops x to 4 -> removed.
        for (t, i) in ["a", "b", "c", "x"].iter().enumerate() {
            recs.push(rec("u5", i, t as i64));
        }
        let out = five_core_filter(recs.clone(), 5);
        assert!(out.iter().all(|r| r.user_key != "u5" && r.item_key != "x"));
        assert_eq!(out, slow_core(recs, 5));
        assert_eq!(out.len(), 25);
    }

    #[test]
    fn builds_dense_ids_and_sorts_by_time() {
        let recs = vec![
            rec("bob", "z", 3),
            rec("amy", "y", 2),
            rec("bob", "x", 1),
            rec("amy", "z", 2),
            rec("amy", "x", 1),
        ];
        let d = build_sequences(&recs);
        assert_eq!(d.users.len(), 2);
        assert_eq!(d.items.len(), 3);
        assert_eq!(d.users.id("amy"), Some(1));
        // amy: x@1, then y and z tie at 2 in file order (y first)
        let (x, y, z) = (d.items.id("x").unwrap(), d.items.id("y").unwrap(), d.items.id("z").unwrap());
        assert_eq!(d.sequences[0].items, vec![x, y, z]);
        assert_eq!(d.sequences[1].items, vec![x, z]);
    }

    #[test]
    fn leave_one_out_examples() {
        let s = [1, 2, 3, 4, 5];
        let split = leave_one_out(&s).unwrap();
        assert_eq!(split.test_input, &[1, 2, 3, 4]);
        assert_eq!(split.test_target, 5);
        assert_eq!(split.valid_input, &[1, 2, 3]);
        assert_eq!(split.valid_target, 4);
        let s = [1, 2, 3];
        let split = leave_one_out(&s).unwrap();
        assert_eq!((split.valid_input, split.valid_target), (&[1][..], 2));
        assert_eq!((split.test_input, split.test_target), (&[1, 2][..], 3));
        assert!(leave_one_out(&[1, 2]).is_none());
    }

    #[test]
    fn truncate_pad_examples() {
        let long: Vec<u32> = (1..=25).collect();
        let (ids, mask) = truncate_pad(&long, 20);
        assert_eq!(ids, (6..=25).collect::<Vec<_>>());
        assert!(mask.iter().all(|&m| m));

        let (ids, mask) = truncate_pad(&[1, 2, 3, 4, 5], 20);
        assert_eq!(ids.len(), 20);
        assert_eq!(&ids[..15], &[0; 15]);
        assert_eq!(&ids[15..], &[1, 2, 3, 4, 5]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 5);

        let exact: Vec<u32> = (1..=20).collect();
        assert_eq!(truncate_pad(&exact, 20), (exact.clone(), vec![true; 20]));
    }

    #[test]
    fn padded_batch_rejects_padding_target() {
        assert!(PaddedBatch::new(&[&[1, 2]], &[0], 4).is_err());
        let b = PaddedBatch::new(&[&[1, 2], &[3]], &[3, 4], 4).unwrap();
        assert_eq!(b.real_items(0), &[1, 2]);
        assert_eq!(b.real_items(1), &[3]);
    }
}
