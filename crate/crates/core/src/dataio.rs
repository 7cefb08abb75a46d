//! Interaction log ingestion, filtering, train/test split, vocabularies and
//! mini-batching of next-item instances.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const SECONDS_PER_DAY: u64 = 86_400;

/// User ids treated as anonymous.
const ANONYMOUS_USERS: [&str; 4] = ["na", "null", "none", "anonymous"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub session_id: String,
    pub timestamp: u64,
}

impl Interaction {
    pub fn new(user: &str, item: &str, session: &str, timestamp: u64) -> Self {
        Interaction {
            user_id: user.to_string(),
            item_id: item.to_string(),
            session_id: session.to_string(),
            timestamp,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LogFormat {
    pub delimiter: char,
}

impl Default for LogFormat {
    fn default() -> Self {
        LogFormat { delimiter: ',' }
    }
}

fn looks_like_header(fields: &[&str]) -> bool {
    let want = ["user", "item", "session", "time"];
    fields.len() == 4
        && fields
            .iter()
            .zip(want)
            .all(|(f, w)| f.trim().to_ascii_lowercase().contains(w))
}

/// Reads `user,item,session,timestamp` rows. A first line naming those
/// columns is skipped; blank lines are ignored.
pub fn parse_log(path: &Path, format: LogFormat) -> Result<Vec<Interaction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(BufReader::new(file), format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_reader(reader: impl BufRead, format: LogFormat) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<log>", e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter).collect();
        if lineno == 1 && looks_like_header(&fields) {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let fields: Vec<&str> = fields.iter().map(|f| f.trim()).collect();
        if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
            let name = ["user", "item", "session", "timestamp"][pos];
            return Err(Error::Parse {
                line: lineno,
                msg: format!("empty {name} field"),
            });
        }
        let timestamp = fields[3].parse::<u64>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("timestamp {:?} is not a non-negative integer", fields[3]),
        })?;
        out.push(Interaction::new(fields[0], fields[1], fields[2], timestamp));
    }
    Ok(out)
}

pub fn write_log(path: &Path, rows: &[Interaction], format: LogFormat) -> Result<()> {
    let d = format.delimiter;
    let mut s = format!("user{d}item{d}session{d}timestamp\n");
    for r in rows {
        s.push_str(&format!(
            "{}{d}{}{d}{}{d}{}\n",
            r.user_id, r.item_id, r.session_id, r.timestamp
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub min_item_freq: usize,
    pub min_user_ops: usize,
    pub min_session_len: usize,
    pub test_window_days: u64,
}

impl PreprocessConfig {
    pub fn diginetica() -> Self {
        PreprocessConfig {
            min_item_freq: 5,
            min_user_ops: 1,
            min_session_len: 2,
            test_window_days: 7,
        }
    }

    pub fn tmall() -> Self {
        PreprocessConfig {
            min_item_freq: 10,
            min_user_ops: 20,
            min_session_len: 2,
            test_window_days: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_item_freq == 0 || self.min_user_ops == 0 || self.test_window_days == 0 {
            return Err(Error::Config("preprocess counts must be >= 1".into()));
        }
        if self.min_session_len < 2 {
            return Err(Error::Config("min_session_len must be >= 2".into()));
        }
        Ok(())
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::diginetica()
    }
}

/// Bijection between external string ids and dense indices `0..len`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut v = Vocab::new();
        for id in ids {
            if v.index.contains_key(&id) {
                return Err(Error::Data(format!("duplicate vocabulary entry {id}")));
            }
            v.insert(&id);
        }
        Ok(v)
    }

    pub fn insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub user: usize,
    pub items: Vec<usize>,
    /// Timestamp of the last interaction.
    pub time: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    pub items: Vocab,
    pub users: Vocab,
    /// External ids of the train sessions, aligned with `train`.
    pub sessions: Vocab,
    /// External ids of the test sessions, aligned with `test`.
    pub test_session_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub items: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub users: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "items={}", self.items)?;
        writeln!(f, "train_sessions={}", self.train_sessions)?;
        writeln!(f, "test_sessions={}", self.test_sessions)?;
        writeln!(f, "users={}", self.users)
    }
}

struct RawSession<'a> {
    id: &'a str,
    user: &'a str,
    items: Vec<&'a str>,
    time: u64,
}

fn is_anonymous(user: &str) -> bool {
    let u = user.trim();
    u.is_empty() || ANONYMOUS_USERS.contains(&u.to_ascii_lowercase().as_str())
}

/// One pass of the filter cascade.
fn cascade(raw: &[Interaction], cfg: &PreprocessConfig) -> Result<Dataset> {
    let rows: Vec<&Interaction> = raw.iter().filter(|r| !is_anonymous(&r.user_id)).collect();

    let mut user_ops: HashMap<&str, usize> = HashMap::new();
    for r in &rows {
        *user_ops.entry(&r.user_id).or_default() += 1;
    }
    let rows: Vec<&Interaction> = rows
        .into_iter()
        .filter(|r| user_ops[r.user_id.as_str()] >= cfg.min_user_ops)
        .collect();

    let mut item_freq: HashMap<&str, usize> = HashMap::new();
    for r in &rows {
        *item_freq.entry(&r.item_id).or_default() += 1;
    }
    let rows: Vec<&Interaction> = rows
        .into_iter()
        .filter(|r| item_freq[r.item_id.as_str()] >= cfg.min_item_freq)
        .collect();

    // group by session in order of first appearance; stable sort keeps input
    // order among equal timestamps
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<&Interaction>> = HashMap::new();
    for r in rows {
        grouped
            .entry(&r.session_id)
            .or_insert_with(|| {
                order.push(&r.session_id);
                Vec::new()
            })
            .push(r);
    }
    let mut sessions: Vec<RawSession> = Vec::new();
    for id in order {
        let mut rs = grouped.remove(id).unwrap();
        rs.sort_by_key(|r| r.timestamp);
        if rs.len() < cfg.min_session_len {
            continue;
        }
        sessions.push(RawSession {
            id,
            user: &rs[0].user_id,
            items: rs.iter().map(|r| r.item_id.as_str()).collect(),
            time: rs.last().unwrap().timestamp,
        });
    }

    let latest = sessions
        .iter()
        .map(|s| s.time)
        .max()
        .ok_or_else(|| Error::Data("no sessions survive filtering".into()))?;
    let cutoff = latest.saturating_sub(cfg.test_window_days * SECONDS_PER_DAY);
    let (test_raw, train_raw): (Vec<RawSession>, Vec<RawSession>) =
        sessions.into_iter().partition(|s| s.time > cutoff);

    let mut items = Vocab::new();
    let mut users = Vocab::new();
    let mut session_ids = Vocab::new();
    let mut train = Vec::with_capacity(train_raw.len());
    for s in &train_raw {
        train.push(Session {
            user: users.insert(s.user),
            items: s.items.iter().map(|i| items.insert(i)).collect(),
            time: s.time,
        });
        session_ids.insert(s.id);
    }

    let mut test = Vec::new();
    let mut test_session_ids = Vec::new();
    for s in &test_raw {
        let Some(user) = users.get(s.user) else { continue };
        let Some(its) = s.items.iter().map(|i| items.get(i)).collect::<Option<Vec<_>>>() else {
            continue;
        };
        test.push(Session {
            user,
            items: its,
            time: s.time,
        });
        test_session_ids.push(s.id.to_string());
    }

    if train.is_empty() {
        return Err(Error::Data("train split is empty after filtering".into()));
    }
    if test.is_empty() {
        return Err(Error::Data("test split is empty after filtering".into()));
    }
    Ok(Dataset {
        train,
        test,
        items,
        users,
        sessions: session_ids,
        test_session_ids,
    })
}

/// Applies, in order: anonymous-user removal, minimum user activity, minimum
/// item frequency, minimum session length, a time-based split (sessions
/// ending within the last `test_window_days` form the test set) and removal
/// of test sessions mentioning users or items unseen in training.
///
/// Dropping sessions lowers counts seen by earlier filters, so the cascade is
/// re-run on its own serialized output until nothing changes. The result is
/// therefore a fixed point: preprocessing it again yields the same dataset.
pub fn preprocess(raw: &[Interaction], cfg: &PreprocessConfig) -> Result<Dataset> {
    cfg.validate()?;
    if raw.is_empty() {
        return Err(Error::Data("no interactions to preprocess".into()));
    }
    let mut ds = cascade(raw, cfg)?;
    // each non-final round removes at least one interaction
    for _ in 0..raw.len() {
        let rows = ds.to_interactions();
        let next = cascade(&rows, cfg)?;
        if next == ds {
            return Ok(ds);
        }
        ds = next;
    }
    Ok(ds)
}

impl Dataset {
    /// Dataset with generated ids (`v0..`, `u0..`, `s0..`, `t0..`) for
    /// sessions given as dense indices.
    pub fn from_indexed(train: Vec<Session>, test: Vec<Session>, n_items: usize, n_users: usize) -> Result<Self> {
        let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let ds = Dataset {
            items: Vocab::from_ids(ids("v", n_items))?,
            users: Vocab::from_ids(ids("u", n_users))?,
            sessions: Vocab::from_ids(ids("s", train.len()))?,
            test_session_ids: ids("t", test.len()),
            train,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            items: self.items.len(),
            train_sessions: self.train.len(),
            test_sessions: self.test.len(),
            users: self.users.len(),
        }
    }

    /// Serializes back to interactions (train sessions first). Every item of
    /// a session carries the session's end time; order within a session is
    /// kept by the stable tie-break.
    pub fn to_interactions(&self) -> Vec<Interaction> {
        let mut out = Vec::new();
        let train_ids = self.sessions.ids().iter();
        let sessions = self
            .train
            .iter()
            .zip(train_ids)
            .chain(self.test.iter().zip(&self.test_session_ids));
        for (s, sid) in sessions {
            for &i in &s.items {
                out.push(Interaction::new(self.users.id(s.user), self.items.id(i), sid, s.time));
            }
        }
        out
    }

    /// Short digest of the item, user and session vocabularies.
    pub fn vocab_hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, v) in [("items", &self.items), ("users", &self.users), ("sessions", &self.sessions)] {
            h.update(tag.as_bytes());
            for id in v.ids() {
                h.update(id.as_bytes());
                h.update([0u8]);
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_lines(&dir.join("items.vocab"), self.items.ids())?;
        write_lines(&dir.join("users.vocab"), self.users.ids())?;
        write_lines(&dir.join("sessions.vocab"), self.sessions.ids())?;
        write_lines(&dir.join("test_sessions.vocab"), &self.test_session_ids)?;
        write_sessions(&dir.join("train.txt"), &dir.join("train.times"), &self.train)?;
        write_sessions(&dir.join("test.txt"), &dir.join("test.times"), &self.test)?;
        fs::write(dir.join("stats.txt"), self.stats().to_string()).map_err(|e| Error::io(dir, e))?;
        fs::write(dir.join("vocab.hash"), format!("{}\n", self.vocab_hash()))
            .map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let items = Vocab::from_ids(read_lines(&dir.join("items.vocab"))?)?;
        let users = Vocab::from_ids(read_lines(&dir.join("users.vocab"))?)?;
        let sessions = Vocab::from_ids(read_lines(&dir.join("sessions.vocab"))?)?;
        let test_session_ids = read_lines(&dir.join("test_sessions.vocab"))?;
        let train = read_sessions(&dir.join("train.txt"), &dir.join("train.times"))?;
        let test = read_sessions(&dir.join("test.txt"), &dir.join("test.times"))?;
        let ds = Dataset {
            train,
            test,
            items,
            users,
            sessions,
            test_session_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks index ranges, session lengths and split alignment.
    pub fn validate(&self) -> Result<()> {
        if self.train.len() != self.sessions.len() {
            return Err(Error::Data(format!(
                "{} train sessions but {} session ids",
                self.train.len(),
                self.sessions.len()
            )));
        }
        if self.test.len() != self.test_session_ids.len() {
            return Err(Error::Data("test session ids misaligned".into()));
        }
        for s in self.train.iter().chain(&self.test) {
            if s.items.len() < 2 {
                return Err(Error::Data("session shorter than 2 items".into()));
            }
            if s.user >= self.users.len() || s.items.iter().any(|&i| i >= self.items.len()) {
                return Err(Error::Data("session index outside vocabulary".into()));
            }
        }
        Ok(())
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(s.lines().map(str::to_string).collect())
}

fn write_sessions(path: &Path, times: &Path, sessions: &[Session]) -> Result<()> {
    let mut body = String::new();
    let mut ts = String::new();
    for s in sessions {
        let items: Vec<String> = s.items.iter().map(usize::to_string).collect();
        body.push_str(&format!("{}\t{}\n", s.user, items.join(",")));
        ts.push_str(&format!("{}\n", s.time));
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    fs::write(times, ts).map_err(|e| Error::io(times, e))
}

fn read_sessions(path: &Path, times: &Path) -> Result<Vec<Session>> {
    let body = read_lines(path)?;
    let ts = if times.exists() { read_lines(times)? } else { Vec::new() };
    body.iter()
        .enumerate()
        .map(|(i, line)| {
            let bad = |msg: &str| Error::Parse {
                line: i + 1,
                msg: format!("{}: {msg}", path.display()),
            };
            let (u, rest) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let user = u.parse().map_err(|_| bad("bad user index"))?;
            let items = rest
                .split(',')
                .map(|x| x.parse().map_err(|_| bad("bad item index")))
                .collect::<Result<Vec<usize>>>()?;
            let time = match ts.get(i) {
                Some(t) => t.parse().map_err(|_| bad("bad session time"))?,
                None => 0,
            };
            Ok(Session { user, items, time })
        })
        .collect()
}

/// Which `(prefix, target)` pairs a session contributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InstanceMode {
    /// Every prefix of length >= 1 predicts the item after it.
    #[default]
    AllPrefixes,
    /// Only the full prefix predicts the last item.
    LastOnly,
}

impl std::str::FromStr for InstanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(InstanceMode::AllPrefixes),
            "last" => Ok(InstanceMode::LastOnly),
            other => Err(Error::Config(format!("unknown instance mode {other:?}"))),
        }
    }
}

impl fmt::Display for InstanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InstanceMode::AllPrefixes => "all",
            InstanceMode::LastOnly => "last",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
}

pub fn instances(sessions: &[Session], mode: InstanceMode) -> Vec<Instance> {
    let mut out = Vec::new();
    for s in sessions {
        let n = s.items.len();
        let ends: Box<dyn Iterator<Item = usize>> = match mode {
            InstanceMode::AllPrefixes => Box::new(1..n),
            InstanceMode::LastOnly => Box::new(std::iter::once(n - 1)),
        };
        for end in ends {
            out.push(Instance {
                user: s.user,
                prefix: s.items[..end].to_vec(),
                target: s.items[end],
            });
        }
    }
    out
}

/// Padded prefixes of one mini-batch. Row `i` occupies
/// `items[i * max_len..(i + 1) * max_len]`; positions past `lengths[i]` hold
/// `pad`, the index one past the last real item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionBatch {
    pub items: Vec<usize>,
    pub lengths: Vec<usize>,
    pub targets: Vec<usize>,
    pub users: Vec<usize>,
    pub max_len: usize,
    pub pad: usize,
}

impl SessionBatch {
    pub fn from_instances(batch: &[Instance], pad: usize) -> Self {
        let max_len = batch.iter().map(|x| x.prefix.len()).max().unwrap_or(0);
        let mut items = Vec::with_capacity(batch.len() * max_len);
        for inst in batch {
            items.extend_from_slice(&inst.prefix);
            items.extend(std::iter::repeat_n(pad, max_len - inst.prefix.len()));
        }
        SessionBatch {
            items,
            lengths: batch.iter().map(|x| x.prefix.len()).collect(),
            targets: batch.iter().map(|x| x.target).collect(),
            users: batch.iter().map(|x| x.user).collect(),
            max_len,
            pad,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn prefix(&self, i: usize) -> &[usize] {
        &self.items[i * self.max_len..i * self.max_len + self.lengths[i]]
    }

    pub fn prefixes(&self) -> Vec<&[usize]> {
        (0..self.len()).map(|i| self.prefix(i)).collect()
    }
}

/// Seeded shuffle of the train instances, chunked into batches.
pub struct BatchIter {
    instances: Vec<Instance>,
    batch_size: usize,
    pos: usize,
    pad: usize,
}

impl Iterator for BatchIter {
    type Item = SessionBatch;

    fn next(&mut self) -> Option<SessionBatch> {
        if self.pos >= self.instances.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.instances.len());
        let batch = SessionBatch::from_instances(&self.instances[self.pos..end], self.pad);
        self.pos = end;
        Some(batch)
    }
}

pub fn batch_iter(ds: &Dataset, batch_size: usize, seed: u64, mode: InstanceMode) -> Result<BatchIter> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut all = instances(&ds.train, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    Ok(BatchIter {
        instances: all,
        batch_size,
        pos: 0,
        pad: ds.num_items(),
    })
}

/// Items seen in at least one train session.
pub fn train_items(ds: &Dataset) -> HashSet<usize> {
    ds.train.iter().flat_map(|s| s.items.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<Interaction>> {
        parse_reader(s.as_bytes(), LogFormat::default())
    }

    #[test]
    fn single_row() {
        let rows = parse("u1,i1,s1,100").unwrap();
        assert_eq!(rows, vec![Interaction::new("u1", "i1", "s1", 100)]);
    }

    #[test]
    fn empty_input() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn malformed_timestamp_reports_line() {
        match parse("u1,i1,s1,abc") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse("user,item,session,timestamp\nu1,i1,s1,1\nu1,,s1,2") {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("item"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("u1,i1,s1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("u1,i1,s1,-5"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn tab_delimiter_and_header() {
        let rows = parse_reader(
            "userId\titemId\tsessionId\ttimeframe\nu\ti\ts\t7\n".as_bytes(),
            LogFormat { delimiter: '\t' },
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn missing_file() {
        let err = parse_log(Path::new("/definitely/not/here.csv"), LogFormat::default()).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.csv"));
    }

    fn cfg(min_item_freq: usize) -> PreprocessConfig {
        PreprocessConfig {
            min_item_freq,
            min_user_ops: 1,
            min_session_len: 2,
            test_window_days: 1,
        }
    }

    fn day(d: u64) -> u64 {
        d * SECONDS_PER_DAY
    }

    #[test]
    fn rare_item_absent_from_vocab() {
        let raw = vec![
            Interaction::new("u1", "a", "s1", day(1)),
            Interaction::new("u1", "b", "s1", day(1) + 1),
            Interaction::new("u1", "iX", "s1", day(1) + 2),
            Interaction::new("u1", "a", "s2", day(5)),
            Interaction::new("u1", "b", "s2", day(5) + 1),
            Interaction::new("u1", "a", "s3", day(5) + 2),
            Interaction::new("u1", "b", "s3", day(5) + 3),
        ];
        let ds = preprocess(&raw, &cfg(2)).unwrap();
        assert!(ds.items.get("iX").is_none());
        assert_eq!(ds.items.len(), 2);
    }

    #[test]
    fn session_reduced_to_one_item_is_dropped() {
        let raw = vec![
            Interaction::new("u1", "a", "s1", day(1)),
            Interaction::new("u1", "b", "s1", day(1) + 1),
            Interaction::new("u1", "a", "s2", day(1) + 5),
            Interaction::new("u1", "rare", "s2", day(1) + 6),
            Interaction::new("u1", "a", "s3", day(9)),
            Interaction::new("u1", "b", "s3", day(9) + 1),
        ];
        let ds = preprocess(&raw, &cfg(2)).unwrap();
        assert_eq!(ds.train.len(), 1);
        assert_eq!(ds.sessions.ids(), &["s1".to_string()]);
    }

    #[test]
    fn empty_split_is_an_error() {
        // everything within the test window
        let raw = vec![
            Interaction::new("u1", "a", "s1", 10),
            Interaction::new("u1", "b", "s1", 11),
        ];
        assert!(matches!(preprocess(&raw, &cfg(1)), Err(Error::Data(_))));
        assert!(preprocess(&[], &cfg(1)).is_err());
    }

    #[test]
    fn fixpoint_removes_items_starved_by_dropped_test_sessions() {
        // item c reaches the threshold only through a test session whose
        // user is unknown; after that session is removed c is too rare
        let raw = vec![
            Interaction::new("u1", "a", "s1", day(1)),
            Interaction::new("u1", "b", "s1", day(1) + 1),
            Interaction::new("u1", "c", "s1", day(1) + 2),
            Interaction::new("u1", "a", "s2", day(2)),
            Interaction::new("u1", "b", "s2", day(2) + 1),
            Interaction::new("u1", "a", "s3", day(9)),
            Interaction::new("u1", "b", "s3", day(9) + 1),
            Interaction::new("u9", "c", "s4", day(9)),
            Interaction::new("u9", "a", "s4", day(9) + 1),
        ];
        let ds = preprocess(&raw, &cfg(2)).unwrap();
        assert!(ds.items.get("c").is_none());
        assert_eq!(ds.train[0].items.len(), 2);
    }

    #[test]
    fn instance_expansion() {
        let s = Session {
            user: 0,
            items: vec![0, 1, 2],
            time: 0,
        };
        let last = instances(std::slice::from_ref(&s), InstanceMode::LastOnly);
        assert_eq!(
            last,
            vec![Instance {
                user: 0,
                prefix: vec![0, 1],
                target: 2
            }]
        );
        let all = instances(&[s], InstanceMode::AllPrefixes);
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].prefix, vec![0]);
        assert_eq!(all[0].target, 1);
    }

    #[test]
    fn padding_layout() {
        let batch = SessionBatch::from_instances(
            &[
                Instance { user: 0, prefix: vec![3], target: 1 },
                Instance { user: 1, prefix: vec![0, 2], target: 4 },
            ],
            9,
        );
        assert_eq!(batch.items, vec![3, 9, 0, 2]);
        assert_eq!(batch.prefix(0), &[3]);
        assert_eq!(batch.prefix(1), &[0, 2]);
    }
}
