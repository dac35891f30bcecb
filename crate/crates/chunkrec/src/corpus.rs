//! Interaction-log ingestion, 5-core filtering, leave-one-out splits, and
//! deterministic synthetic corpora.

use crate::error::{Error, Result};
use crate::util::gaussian;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// One raw interaction record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    /// Seconds; ordering within a user is by this field, ties by input order.
    pub timestamp: u64,
}

/// Dense string-id <-> integer-index mapping, first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct IdMap {
    pub names: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Interactions surviving 5-core filtering, with dense indices assigned.
#[derive(Debug, Clone)]
pub struct FilteredCorpus {
    pub users: IdMap,
    pub items: IdMap,
    /// `(user_index, item_index, timestamp)` in input-file order.
    pub interactions: Vec<(u32, u32, u64)>,
}

/// A user's item history in ascending-timestamp order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_index: u32,
    pub items: Vec<u32>,
}

/// Per-user leave-one-out split: last item tests, second-last validates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitUser {
    pub user_index: u32,
    /// Full training prefix; truncation to the 20 most recent items happens
    /// when histories are flattened for the model.
    pub train_items: Vec<u32>,
    pub valid_target: u32,
    pub test_target: u32,
}

#[derive(Debug, Clone, Default)]
pub struct SplitCorpus {
    pub users: Vec<SplitUser>,
    /// Sequences shorter than 3 items that could not supply both targets.
    pub excluded: usize,
}

/// Parse a TSV interactions file: `user_id <TAB> item_id <TAB> timestamp`.
pub fn ingest_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, item, ts) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), Some(t), None) => (u, i, t),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "expected 3 tab-separated fields".into(),
                })
            }
        };
        let timestamp: u64 = ts.trim().parse().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("timestamp: {e}"),
        })?;
        out.push(Interaction {
            user_id: user.to_string(),
            item_id: item.to_string(),
            timestamp,
        });
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in interactions {
        writeln!(w, "{}\t{}\t{}", r.user_id, r.item_id, r.timestamp)?;
    }
    Ok(())
}

/// Iteratively drop users and items with fewer than 5 interactions until a
/// fixpoint, then assign dense indices in first-appearance order.
pub fn five_core_filter(interactions: &[Interaction]) -> Result<FilteredCorpus> {
    if interactions.is_empty() {
        return Err(Error::Corpus("no interactions to filter".into()));
    }
    let mut keep: Vec<bool> = vec![true; interactions.len()];
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for (r, &k) in interactions.iter().zip(&keep) {
            if k {
                *user_count.entry(r.user_id.as_str()).or_default() += 1;
                *item_count.entry(r.item_id.as_str()).or_default() += 1;
            }
        }
        let mut changed = false;
        for (r, k) in interactions.iter().zip(keep.iter_mut()) {
            if *k && (user_count[r.user_id.as_str()] < 5 || item_count[r.item_id.as_str()] < 5) {
                *k = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut filtered = Vec::new();
    for (r, &k) in interactions.iter().zip(&keep) {
        if k {
            let u = users.intern(&r.user_id);
            let i = items.intern(&r.item_id);
            filtered.push((u, i, r.timestamp));
        }
    }
    if filtered.is_empty() {
        return Err(Error::Corpus("5-core filtering eliminated the corpus".into()));
    }
    Ok(FilteredCorpus { users, items, interactions: filtered })
}

/// Group filtered interactions per user and sort by timestamp ascending,
/// input order breaking ties.
pub fn build_sequences(corpus: &FilteredCorpus) -> Vec<UserSequence> {
    let mut per_user: Vec<Vec<(u64, u32)>> = vec![Vec::new(); corpus.users.len()];
    for &(u, i, ts) in &corpus.interactions {
        per_user[u as usize].push((ts, i));
    }
    per_user
        .into_iter()
        .enumerate()
        .map(|(u, mut rows)| {
            rows.sort_by_key(|&(ts, _)| ts); // stable: ties keep input order
            UserSequence {
                user_index: u as u32,
                items: rows.into_iter().map(|(_, i)| i).collect(),
            }
        })
        .collect()
}

/// Per user: train on `items[..len-2]`, validate on `items[len-2]`, test on
/// `items[len-1]`. Sequences shorter than 3 are excluded and counted.
pub fn leave_one_out_split(sequences: &[UserSequence]) -> SplitCorpus {
    let mut split = SplitCorpus::default();
    for seq in sequences {
        let n = seq.items.len();
        if n < 3 {
            split.excluded += 1;
            continue;
        }
        split.users.push(SplitUser {
            user_index: seq.user_index,
            train_items: seq.items[..n - 2].to_vec(),
            valid_target: seq.items[n - 2],
            test_target: seq.items[n - 1],
        });
    }
    split
}

/// Parameters for the planted-pattern synthetic corpus.
///
/// Items are placed in `super_clusters * sub_clusters` well-separated leaf
/// clusters (super offsets dominate sub offsets, which dominate noise).
/// Transitions are deterministic at the leaf-cluster level: an item in leaf
/// `t` is always followed by its slot-mate in leaf `(t+1) mod C`, so both the
/// next item and its semantic IDs are predictable from the history.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    pub super_clusters: usize,
    /// Sub-clusters per super-cluster; 1 gives a flat clustering.
    pub sub_clusters: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub sequences: Vec<UserSequence>,
    pub embeddings: Vec<Vec<f32>>,
    /// Leaf-cluster index of each item.
    pub planted: Vec<usize>,
}

impl SynthCorpus {
    /// Leaf clusters count.
    pub fn clusters(&self) -> usize {
        self.spec.super_clusters * self.spec.sub_clusters
    }

    /// Materialize as raw interactions (`u<idx>` / `i<idx>` string ids,
    /// timestamps = position).
    pub fn to_interactions(&self) -> Vec<Interaction> {
        let mut out = Vec::new();
        for seq in &self.sequences {
            for (pos, &item) in seq.items.iter().enumerate() {
                out.push(Interaction {
                    user_id: format!("u{}", seq.user_index),
                    item_id: format!("i{item}"),
                    timestamp: pos as u64,
                });
            }
        }
        out
    }
}

/// Deterministic next item: same slot, next leaf cluster.
fn synth_next_item(item: usize, items: usize, clusters: usize) -> usize {
    let t = item % clusters;
    let w = item / clusters;
    let cand = w * clusters + (t + 1) % clusters;
    if cand < items {
        cand
    } else {
        (t + 1) % clusters
    }
}

/// Build a seed-reproducible planted-pattern corpus.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    let clusters = spec.super_clusters * spec.sub_clusters;
    if clusters == 0 || spec.users == 0 || spec.dim == 0 {
        return Err(Error::Config("synth spec fields must be positive".into()));
    }
    if spec.items < clusters {
        return Err(Error::Config(format!(
            "item count {} is smaller than cluster count {clusters}",
            spec.items
        )));
    }
    if spec.seq_len < 5 {
        return Err(Error::Config("seq_len must be at least 5 to survive 5-core".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Cluster center directions: super offsets dominate, sub offsets are
    // shared across supers so level-2 residuals cluster by sub index.
    let mut super_dirs = Vec::with_capacity(spec.super_clusters);
    for _ in 0..spec.super_clusters {
        let v: Vec<f64> = (0..spec.dim).map(|_| gaussian(&mut rng) * 100.0).collect();
        super_dirs.push(v);
    }
    let mut sub_dirs = Vec::with_capacity(spec.sub_clusters);
    for _ in 0..spec.sub_clusters {
        let v: Vec<f64> = (0..spec.dim)
            .map(|_| if spec.sub_clusters > 1 { gaussian(&mut rng) * 10.0 } else { 0.0 })
            .collect();
        sub_dirs.push(v);
    }

    let mut embeddings = Vec::with_capacity(spec.items);
    let mut planted = Vec::with_capacity(spec.items);
    for item in 0..spec.items {
        let t = item % clusters;
        let (a, b) = (t / spec.sub_clusters, t % spec.sub_clusters);
        let v: Vec<f32> = (0..spec.dim)
            .map(|d| (super_dirs[a][d] + sub_dirs[b][d] + gaussian(&mut rng) * 0.5) as f32)
            .collect();
        embeddings.push(v);
        planted.push(t);
    }

    let mut sequences = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let mut item = rng.gen_range(0..spec.items);
        let mut items = Vec::with_capacity(spec.seq_len);
        for _ in 0..spec.seq_len {
            items.push(item as u32);
            item = synth_next_item(item, spec.items, clusters);
        }
        sequences.push(UserSequence { user_index: u as u32, items });
    }

    Ok(SynthCorpus { spec: *spec, sequences, embeddings, planted })
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

const EMB_BINARY_MAGIC: &[u8; 4] = b"EMB\0";

/// Write item embeddings as text: `EMB <count> <dim>` header then one
/// `item_id <TAB> f1 f2 ...` line per item.
pub fn write_embeddings_text(path: &Path, ids: &[String], vectors: &[Vec<f32>]) -> Result<()> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "EMB {} {}", vectors.len(), dim)?;
    for (id, v) in ids.iter().zip(vectors) {
        let floats: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{}\t{}", id, floats.join(" "))?;
    }
    Ok(())
}

/// Binary variant: 16-byte header (magic, count, dim, reserved), then
/// row-major little-endian f32. Rows are keyed by dense index.
pub fn write_embeddings_binary(path: &Path, vectors: &[Vec<f32>]) -> Result<()> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(EMB_BINARY_MAGIC)?;
    w.write_all(&(vectors.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for v in vectors {
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read either embeddings format. Binary rows get their dense index rendered
/// as the id string.
pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    let n_read = file.read(&mut magic)?;
    if n_read == 4 && &magic == EMB_BINARY_MAGIC {
        let mut header = [0u8; 12];
        file.read_exact(&mut header)?;
        let count = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        if payload.len() != count * dim * 4 {
            return Err(Error::Format(format!(
                "binary embeddings payload is {} bytes, expected {}",
                payload.len(),
                count * dim * 4
            )));
        }
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count);
        for r in 0..count {
            let mut v = Vec::with_capacity(dim);
            for c in 0..dim {
                let off = (r * dim + c) * 4;
                v.push(f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()));
            }
            ids.push(r.to_string());
            vectors.push(v);
        }
        return Ok((ids, vectors));
    }

    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty embeddings file".into() })?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "EMB" {
        return Err(Error::Parse { line: 1, msg: "expected `EMB <count> <dim>` header".into() });
    }
    let count: usize = parts[1]
        .parse()
        .map_err(|e| Error::Parse { line: 1, msg: format!("count: {e}") })?;
    let dim: usize = parts[2]
        .parse()
        .map_err(|e| Error::Parse { line: 1, msg: format!("dim: {e}") })?;
    let mut ids = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (id, floats) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected `item_id<TAB>floats`".into(),
        })?;
        let v = floats
            .split_whitespace()
            .map(|x| x.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: lineno, msg: format!("float: {e}") })?;
        if v.len() != dim {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("row has {} floats, header says {dim}", v.len()),
            });
        }
        ids.push(id.to_string());
        vectors.push(v);
    }
    if ids.len() != count {
        return Err(Error::Format(format!(
            "embeddings file has {} rows, header says {count}",
            ids.len()
        )));
    }
    Ok((ids, vectors))
}

/// Arrange raw embedding rows by dense item index using the item id-map.
/// Every mapped item must have exactly one embedding of a common dimension.
pub fn resolve_embeddings(
    ids: &[String],
    vectors: &[Vec<f32>],
    items: &IdMap,
) -> Result<Vec<Vec<f32>>> {
    let mut resolved: Vec<Option<Vec<f32>>> = vec![None; items.len()];
    for (id, v) in ids.iter().zip(vectors) {
        let idx = match items.get(id) {
            Some(i) => i as usize,
            // Binary rows carry dense indices.
            None => match id.parse::<usize>() {
                Ok(i) if i < items.len() => i,
                _ => continue, // embedding for an item filtered out of the corpus
            },
        };
        if resolved[idx].is_some() {
            return Err(Error::Corpus(format!("duplicate embedding for item `{id}`")));
        }
        resolved[idx] = Some(v.clone());
    }
    let mut out = Vec::with_capacity(items.len());
    let mut dim = None;
    for (i, v) in resolved.into_iter().enumerate() {
        let v = v.ok_or_else(|| {
            Error::Corpus(format!("item `{}` has no embedding", items.names[i]))
        })?;
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::Shape(format!(
                    "embedding dim mismatch: {} vs {d}",
                    v.len()
                )))
            }
            _ => {}
        }
        out.push(v);
    }
    Ok(out)
}

/// Write an id-map file: `string_id <TAB> integer_index`.
pub fn write_id_map(path: &Path, map: &IdMap) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (i, name) in map.names.iter().enumerate() {
        writeln!(w, "{name}\t{i}")?;
    }
    Ok(())
}

pub fn read_id_map(path: &Path) -> Result<IdMap> {
    let file = std::fs::File::open(path)?;
    let mut map = IdMap::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (name, idx) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected `string_id<TAB>index`".into(),
        })?;
        let idx: u32 = idx
            .parse()
            .map_err(|e| Error::Parse { line: lineno, msg: format!("index: {e}") })?;
        let assigned = map.intern(name);
        if assigned != idx {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("index {idx} out of order (expected {assigned})"),
            });
        }
    }
    Ok(map)
}

/// Write the split corpus: `user_index \t train items \t valid \t test`.
pub fn write_splits(path: &Path, split: &SplitCorpus) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for u in &split.users {
        let items: Vec<String> = u.train_items.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{}\t{}\t{}\t{}", u.user_index, items.join(" "), u.valid_target, u.test_target)?;
    }
    Ok(())
}

pub fn read_splits(path: &Path) -> Result<SplitCorpus> {
    let file = std::fs::File::open(path)?;
    let mut split = SplitCorpus::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse { line: lineno, msg: "expected 4 fields".into() });
        }
        let parse_u32 = |s: &str| -> Result<u32> {
            s.parse().map_err(|e| Error::Parse { line: lineno, msg: format!("{e}") })
        };
        let train_items = fields[1]
            .split_whitespace()
            .map(parse_u32)
            .collect::<Result<Vec<_>>>()?;
        split.users.push(SplitUser {
            user_index: parse_u32(fields[0])?,
            train_items,
            valid_target: parse_u32(fields[2])?,
            test_target: parse_u32(fields[3])?,
        });
    }
    Ok(split)
}
