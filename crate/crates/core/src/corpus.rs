//! Interaction ingestion, frequency filtering, and leave-last-out splits.
//!
//! External ids are remapped to dense internal indices in ascending
//! external-id order, so the mapping does not depend on line order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{EbrError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user_id: i64,
    pub item_id: i64,
    pub timestamp: i64,
    pub weight: Option<f64>,
}

/// Per-user chronological item sequences over dense indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    num_items: usize,
    sequences: Vec<Vec<u32>>,
    timestamps: Vec<Vec<i64>>,
    user_ids: Vec<i64>,
    item_ids: Vec<i64>,
    user_index: HashMap<i64, u32>,
    item_index: HashMap<i64, u32>,
}

impl Dataset {
    /// Builds a dataset from raw interactions. Each user's events are sorted
    /// by timestamp with ties kept in input order.
    pub fn from_interactions(interactions: &[Interaction]) -> Result<Self> {
        if interactions.is_empty() {
            return Err(EbrError::EmptyDataset);
        }
        for (n, it) in interactions.iter().enumerate() {
            if it.timestamp < 0 {
                return Err(EbrError::Input(format!(
                    "interaction {n} has negative timestamp {}",
                    it.timestamp
                )));
            }
        }
        let mut user_ids: Vec<i64> = interactions.iter().map(|i| i.user_id).collect();
        user_ids.sort_unstable();
        user_ids.dedup();
        let mut item_ids: Vec<i64> = interactions.iter().map(|i| i.item_id).collect();
        item_ids.sort_unstable();
        item_ids.dedup();
        let user_index = index_of(&user_ids);
        let item_index = index_of(&item_ids);

        let mut events: Vec<Vec<(i64, u32)>> = vec![Vec::new(); user_ids.len()];
        for it in interactions {
            events[user_index[&it.user_id] as usize].push((it.timestamp, item_index[&it.item_id]));
        }
        let mut sequences = Vec::with_capacity(events.len());
        let mut timestamps = Vec::with_capacity(events.len());
        for mut ev in events {
            ev.sort_by_key(|&(t, _)| t);
            timestamps.push(ev.iter().map(|&(t, _)| t).collect());
            sequences.push(ev.into_iter().map(|(_, i)| i).collect());
        }
        Ok(Self {
            num_items: item_ids.len(),
            sequences,
            timestamps,
            user_ids,
            item_ids,
            user_index,
            item_index,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn sequence(&self, user: usize) -> &[u32] {
        &self.sequences[user]
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn timestamps(&self, user: usize) -> &[i64] {
        &self.timestamps[user]
    }

    pub fn external_user(&self, user: usize) -> i64 {
        self.user_ids[user]
    }

    pub fn external_item(&self, item: usize) -> i64 {
        self.item_ids[item]
    }

    pub fn internal_user(&self, external: i64) -> Option<u32> {
        self.user_index.get(&external).copied()
    }

    pub fn internal_item(&self, external: i64) -> Option<u32> {
        self.item_index.get(&external).copied()
    }

    /// Reconstructs the interaction list (weights are not retained).
    pub fn interactions(&self) -> Vec<Interaction> {
        let mut out = Vec::with_capacity(self.num_interactions());
        for (u, seq) in self.sequences.iter().enumerate() {
            for (&i, &t) in seq.iter().zip(&self.timestamps[u]) {
                out.push(Interaction {
                    user_id: self.user_ids[u],
                    item_id: self.item_ids[i as usize],
                    timestamp: t,
                    weight: None,
                });
            }
        }
        out
    }

    /// Item occurrence counts over all sequences.
    pub fn item_frequencies(&self) -> Vec<u64> {
        let mut freq = vec![0u64; self.num_items];
        for seq in &self.sequences {
            for &i in seq {
                freq[i as usize] += 1;
            }
        }
        freq
    }

    /// Same users and items, with sequences replaced. Used to build the
    /// training view of a split.
    fn with_sequences(&self, sequences: Vec<Vec<u32>>, timestamps: Vec<Vec<i64>>) -> Self {
        Self {
            num_items: self.num_items,
            sequences,
            timestamps,
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
            user_index: self.user_index.clone(),
            item_index: self.item_index.clone(),
        }
    }

    /// Writes the versioned binary cache.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(self.num_users() as u64).to_le_bytes())?;
        w.write_all(&(self.num_items as u64).to_le_bytes())?;
        w.write_all(&(self.num_interactions() as u64).to_le_bytes())?;
        for &id in &self.user_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        for &id in &self.item_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        let mut buf = Vec::new();
        for (seq, ts) in self.sequences.iter().zip(&self.timestamps) {
            buf.clear();
            write_varint(&mut buf, seq.len() as u64);
            let mut prev = 0i64;
            for &i in seq {
                write_varint(&mut buf, zigzag(i as i64 - prev));
                prev = i as i64;
            }
            let mut prev = 0i64;
            for &t in ts {
                write_varint(&mut buf, zigzag(t - prev));
                prev = t;
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(DATASET_MAGIC.len())? != DATASET_MAGIC {
            return Err(EbrError::Format("dataset cache: bad magic".into()));
        }
        let num_users = cur.u64()? as usize;
        let num_items = cur.u64()? as usize;
        let num_interactions = cur.u64()? as usize;
        let user_ids = (0..num_users).map(|_| cur.u64().map(|v| v as i64)).collect::<Result<Vec<_>>>()?;
        let item_ids = (0..num_items).map(|_| cur.u64().map(|v| v as i64)).collect::<Result<Vec<_>>>()?;
        let mut sequences = Vec::with_capacity(num_users);
        let mut timestamps = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            let len = cur.varint()? as usize;
            let mut seq = Vec::with_capacity(len);
            let mut prev = 0i64;
            for _ in 0..len {
                prev += unzigzag(cur.varint()?);
                if prev < 0 || prev as usize >= num_items {
                    return Err(EbrError::Format(format!("dataset cache: item index {prev} out of range")));
                }
                seq.push(prev as u32);
            }
            let mut ts = Vec::with_capacity(len);
            let mut prev = 0i64;
            for _ in 0..len {
                prev += unzigzag(cur.varint()?);
                ts.push(prev);
            }
            sequences.push(seq);
            timestamps.push(ts);
        }
        if cur.pos != bytes.len() {
            return Err(EbrError::Format("dataset cache: trailing bytes".into()));
        }
        let ds = Self {
            num_items,
            sequences,
            timestamps,
            user_index: index_of(&user_ids),
            item_index: index_of(&item_ids),
            user_ids,
            item_ids,
        };
        if ds.num_interactions() != num_interactions {
            return Err(EbrError::Format("dataset cache: interaction count mismatch".into()));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(File::create(path)?);
        self.write_cache(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_cache(BufReader::new(File::open(path)?))
    }
}

const DATASET_MAGIC: &[u8] = b"EBRDS1";

fn index_of(ids: &[i64]) -> HashMap<i64, u32> {
    ids.iter().enumerate().map(|(n, &id)| (id, n as u32)).collect()
}

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

fn write_varint(buf: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        buf.push((v as u8) | 0x80);
        v >>= 7;
    }
    buf.push(v as u8);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(EbrError::Format("dataset cache: truncated".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn varint(&mut self) -> Result<u64> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.take(1)?[0];
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(EbrError::Format("dataset cache: varint overflow".into()))
    }
}

/// Parses a `UserID::MovieID::Rating::Timestamp` ratings file. Every rating
/// is kept as a positive interaction.
pub fn parse_movielens(path: &Path) -> Result<Dataset> {
    parse_movielens_reader(BufReader::new(File::open(path)?))
}

pub fn parse_movielens_reader<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut interactions = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        interactions.push(parse_movielens_line(line).map_err(|message| EbrError::Parse {
            line: n + 1,
            message,
        })?);
    }
    Dataset::from_interactions(&interactions)
}

pub fn parse_movielens_line(line: &str) -> std::result::Result<Interaction, String> {
    let fields: Vec<&str> = line.split("::").collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 '::'-separated fields, found {}", fields.len()));
    }
    let int = |s: &str, what: &str| s.trim().parse::<i64>().map_err(|_| format!("invalid {what} {s:?}"));
    let weight = fields[2]
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("invalid rating {:?}", fields[2]))?;
    let timestamp = int(fields[3], "timestamp")?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    Ok(Interaction {
        user_id: int(fields[0], "user id")?,
        item_id: int(fields[1], "item id")?,
        timestamp,
        weight: Some(weight),
    })
}

/// Column mapping for delimited event logs.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EventLogSchema {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    pub user: String,
    pub item: String,
    pub timestamp: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub scenario: Option<String>,
}

fn default_delimiter() -> char {
    ','
}

/// Conjunction of `column == value` tests, e.g. `click=1,tab=1`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PositiveFilter {
    pub clauses: Vec<(String, String)>,
}

impl PositiveFilter {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut clauses = Vec::new();
        for part in spec.split([',', '&']).map(str::trim).filter(|p| !p.is_empty()) {
            let (col, val) = part
                .split_once('=')
                .ok_or_else(|| EbrError::Config(format!("filter clause {part:?} is not column=value")))?;
            clauses.push((col.trim().to_string(), val.trim().to_string()));
        }
        Ok(Self { clauses })
    }
}

pub fn parse_event_log(path: &Path, schema: &EventLogSchema, filter: &PositiveFilter) -> Result<Dataset> {
    parse_event_log_reader(File::open(path)?, schema, filter)
}

pub fn parse_event_log_reader<R: Read>(reader: R, schema: &EventLogSchema, filter: &PositiveFilter) -> Result<Dataset> {
    if !schema.delimiter.is_ascii() {
        return Err(EbrError::Schema("delimiter must be a single ASCII character".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| EbrError::Schema(format!("missing declared column {name:?}")))
    };
    let (uc, ic, tc) = (col(&schema.user)?, col(&schema.item)?, col(&schema.timestamp)?);
    for c in schema.label.iter().chain(&schema.scenario) {
        col(c)?;
    }
    let clauses = filter
        .clauses
        .iter()
        .map(|(c, v)| Ok((col(c)?, v.clone())))
        .collect::<Result<Vec<_>>>()?;

    let mut interactions = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if !clauses.iter().all(|(c, v)| rec.get(*c).map(str::trim) == Some(v.as_str())) {
            continue;
        }
        let int = |c: usize, what: &str| {
            let raw = rec.get(c).unwrap_or("").trim();
            raw.parse::<i64>().map_err(|_| EbrError::Parse {
                line,
                message: format!("non-integer {what} {raw:?}"),
            })
        };
        let timestamp = int(tc, "timestamp")?;
        if timestamp < 0 {
            return Err(EbrError::Parse { line, message: format!("negative timestamp {timestamp}") });
        }
        interactions.push(Interaction {
            user_id: int(uc, "user id")?,
            item_id: int(ic, "item id")?,
            timestamp,
            weight: None,
        });
    }
    Dataset::from_interactions(&interactions)
}

/// Iteratively drops items with fewer than `min_item_freq` occurrences and
/// users with fewer than `min_user_freq` interactions until both hold, then
/// reindexes densely.
pub fn filter_by_frequency(d: &Dataset, min_item_freq: usize, min_user_freq: usize) -> Result<Dataset> {
    let mut item_alive = vec![true; d.num_items()];
    let mut user_alive = vec![true; d.num_users()];
    loop {
        let mut item_freq = vec![0usize; d.num_items()];
        let mut user_freq = vec![0usize; d.num_users()];
        for (u, seq) in d.sequences().iter().enumerate() {
            if !user_alive[u] {
                continue;
            }
            for &i in seq {
                if item_alive[i as usize] {
                    item_freq[i as usize] += 1;
                    user_freq[u] += 1;
                }
            }
        }
        let mut changed = false;
        for (u, alive) in user_alive.iter_mut().enumerate() {
            if *alive && user_freq[u] < min_user_freq.max(1) {
                *alive = false;
                changed = true;
            }
        }
        for (i, alive) in item_alive.iter_mut().enumerate() {
            if *alive && item_freq[i] < min_item_freq.max(1) {
                *alive = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut kept = Vec::new();
    for (u, seq) in d.sequences().iter().enumerate() {
        if !user_alive[u] {
            continue;
        }
        for (&i, &t) in seq.iter().zip(d.timestamps(u)) {
            if item_alive[i as usize] {
                kept.push(Interaction {
                    user_id: d.external_user(u),
                    item_id: d.external_item(i as usize),
                    timestamp: t,
                    weight: None,
                });
            }
        }
    }
    Dataset::from_interactions(&kept)
}

/// Leave-last-out partition: the last item of each user with at least three
/// interactions is the test target, the penultimate the validation target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Dataset,
    pub valid_target: Vec<Option<u32>>,
    pub test_target: Vec<Option<u32>>,
    pub eligible_users: Vec<u32>,
}

impl Split {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    /// Model input when scoring the validation target.
    pub fn valid_history(&self, user: usize) -> &[u32] {
        self.train.sequence(user)
    }

    /// Model input when scoring the test target: training items plus the
    /// validation item.
    pub fn test_history(&self, user: usize) -> Vec<u32> {
        let mut h = self.train.sequence(user).to_vec();
        h.extend(self.valid_target[user]);
        h
    }
}

pub fn leave_last_out_split(d: &Dataset) -> Result<Split> {
    if d.num_users() == 0 {
        return Err(EbrError::EmptyDataset);
    }
    let n = d.num_users();
    let mut sequences = Vec::with_capacity(n);
    let mut timestamps = Vec::with_capacity(n);
    let mut valid_target = vec![None; n];
    let mut test_target = vec![None; n];
    let mut eligible_users = Vec::new();
    for u in 0..n {
        let seq = d.sequence(u);
        let ts = d.timestamps(u);
        if seq.len() >= 3 {
            let cut = seq.len() - 2;
            sequences.push(seq[..cut].to_vec());
            timestamps.push(ts[..cut].to_vec());
            valid_target[u] = Some(seq[cut]);
            test_target[u] = Some(seq[cut + 1]);
            eligible_users.push(u as u32);
        } else {
            sequences.push(seq.to_vec());
            timestamps.push(ts.to_vec());
        }
    }
    Ok(Split {
        train: d.with_sequences(sequences, timestamps),
        valid_target,
        test_target,
        eligible_users,
    })
}
