//! SOHO archive client with an append-only local cache.
//!
//! Cache layout under the root:
//!
//! ```text
//! <root>/<INST>/<YYYY>/<MM>/<DD>/<original filename>
//! <root>/listings/<sha256 of url>.json     parsed directory listings
//! <root>/manifest.jsonl                    one CachedFrame per line
//! <root>/quarantine/                       files that failed verification
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration as StdDuration, Instant, SystemTime};

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Utc};
use log::{debug, info, warn};
use ndarray::Array2;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imaging::{load_raw_frame, FrameSource, ImagingError};
use crate::Instrument;

/// Environment variable overriding the cache root.
pub const CACHE_ENV: &str = "GEOEFF_CACHE";
pub const MAX_QUERY_HOURS: i64 = 24;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("offline and not cached: {0}")]
    OfflineMiss(String),
    #[error("fetching {url} failed after {attempts} attempt(s): {message}")]
    Fetch { url: String, attempts: u32, message: String },
    #[error("checksum mismatch for {path}; moved to {quarantined}")]
    Checksum { path: PathBuf, quarantined: PathBuf },
    #[error("timed out waiting for lock {0}")]
    Lock(PathBuf),
    #[error("cache I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache record: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchiveQuery {
    pub instrument: Instrument,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl ArchiveQuery {
    pub fn new(instrument: Instrument, start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self, ArchiveError> {
        if start >= end {
            return Err(ArchiveError::InvalidQuery(format!("start {start} is not before end {end}")));
        }
        if end - start > Duration::hours(MAX_QUERY_HOURS) {
            return Err(ArchiveError::InvalidQuery(format!("range exceeds {MAX_QUERY_HOURS} h")));
        }
        Ok(ArchiveQuery { instrument, start, end })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Product {
    Fits,
    QuickLook,
}

impl Product {
    fn from_name(name: &str) -> Option<Product> {
        let lower = name.to_ascii_lowercase();
        let ext = lower.rsplit('.').next()?;
        match ext {
            "fits" | "fts" | "fit" => Some(Product::Fits),
            "gif" | "png" => Some(Product::QuickLook),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedFrame {
    pub instrument: Instrument,
    pub observation_time: DateTime<Utc>,
    /// Relative to the cache root.
    pub local_path: PathBuf,
    /// SHA-256 of the file, hex.
    pub checksum: String,
    pub source_url: String,
    pub product: Product,
}

/// A file offered by a directory listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListingEntry {
    pub filename: String,
    pub url: String,
    pub observation_time: DateTime<Utc>,
    pub product: Product,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub message: String,
    /// Client errors such as 404 are not retried.
    pub retryable: bool,
    pub not_found: bool,
}

pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<Vec<u8>, TransportError>;
}

/// Blocking HTTPS client.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: StdDuration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpTransport { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new(StdDuration::from_secs(120))
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<Vec<u8>, TransportError> {
        let mut resp = self.agent.get(url).call().map_err(|e| TransportError {
            retryable: !matches!(e, ureq::Error::StatusCode(code) if (400..500).contains(&code) && code != 429),
            not_found: matches!(e, ureq::Error::StatusCode(404)),
            message: e.to_string(),
        })?;
        resp.body_mut()
            .with_config()
            .limit(512 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| TransportError { message: e.to_string(), retryable: true, not_found: false })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchiveConfig {
    pub cache_root: PathBuf,
    /// Directory-listing URL per instrument. Placeholders: `{yyyy}`, `{yy}`,
    /// `{mm}`, `{dd}`, `{yymmdd}`, `{yyyymmdd}`.
    pub url_templates: BTreeMap<Instrument, String>,
    /// Minimum spacing between requests.
    pub rate_limit_ms: u64,
    pub max_attempts: u32,
    /// First retry delay; doubles per attempt.
    pub backoff_ms: u64,
    pub offline: bool,
    pub lock_timeout_s: u64,
}

impl Default for ArchiveConfig {
    fn default() -> Self {
        let url_templates = [
            (Instrument::C2, "https://lasco-www.nrl.navy.mil/lz/level_05/{yymmdd}/c2/"),
            (Instrument::Eit, "https://umbra.nascom.nasa.gov/eit/lz/{yyyy}/{mm}/"),
            (Instrument::Mdi, "https://soi.stanford.edu/data/mdi/fd_M_96m_01d/{yyyy}{mm}{dd}/"),
        ]
        .into_iter()
        .map(|(i, s)| (i, s.to_string()))
        .collect();
        ArchiveConfig {
            cache_root: std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("cache")),
            url_templates,
            rate_limit_ms: 1000,
            max_attempts: 3,
            backoff_ms: 1000,
            offline: false,
            lock_timeout_s: 600,
        }
    }
}

pub fn expand_template(template: &str, day: NaiveDate) -> String {
    template
        .replace("{yyyymmdd}", &day.format("%Y%m%d").to_string())
        .replace("{yymmdd}", &day.format("%y%m%d").to_string())
        .replace("{yyyy}", &day.format("%Y").to_string())
        .replace("{yy}", &day.format("%y").to_string())
        .replace("{mm}", &day.format("%m").to_string())
        .replace("{dd}", &day.format("%d").to_string())
}

/// Observation time encoded in an archive filename: `YYYYMMDD` followed by
/// an optional `_`, `T`, `.` or `-` and `HHMM[SS]`.
pub fn parse_filename_time(name: &str) -> Option<DateTime<Utc>> {
    let re = Regex::new(r"((?:19|20)\d{6})[_T.\-]?(\d{4})(\d{2})?").unwrap();
    let c = re.captures(name)?;
    let date = NaiveDate::parse_from_str(&c[1], "%Y%m%d").ok()?;
    let hm = &c[2];
    let secs = c.get(3).map_or(Ok(0), |m| m.as_str().parse::<u32>()).ok()?;
    let time = NaiveTime::from_hms_opt(hm[..2].parse().ok()?, hm[2..].parse().ok()?, secs)?;
    Some(Utc.from_utc_datetime(&NaiveDateTime::new(date, time)))
}

/// Files linked from an HTML directory index (or listed one per line in a
/// plain-text index) whose names carry a timestamp and a supported
/// extension.
pub fn parse_listing(body: &str, base_url: &str) -> Vec<ListingEntry> {
    let href = Regex::new(r#"(?i)href\s*=\s*["']([^"'?#]+)["']"#).unwrap();
    let names: Vec<String> = if body.to_ascii_lowercase().contains("href") {
        href.captures_iter(body).map(|c| c[1].to_string()).collect()
    } else {
        body.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect()
    };
    let base = if base_url.ends_with('/') { base_url.to_string() } else { format!("{base_url}/") };
    let mut out = Vec::new();
    for name in names {
        let filename = name.rsplit('/').next().unwrap_or(&name).to_string();
        let (Some(product), Some(t)) = (Product::from_name(&filename), parse_filename_time(&filename)) else {
            continue;
        };
        let url = if name.starts_with("http://") || name.starts_with("https://") { name.clone() } else { format!("{base}{filename}") };
        out.push(ListingEntry { filename, url, observation_time: t, product });
    }
    out.sort_by(|a, b| (a.observation_time, a.product, &a.filename).cmp(&(b.observation_time, b.product, &b.filename)));
    out.dedup_by(|a, b| a.filename == b.filename);
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Inventory of the cache grouped by instrument.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Inventory {
    pub by_instrument: BTreeMap<Instrument, Vec<CachedFrame>>,
    /// Manifest records whose file is gone.
    pub dangling: Vec<CachedFrame>,
}

impl Inventory {
    pub fn total(&self) -> usize {
        self.by_instrument.values().map(Vec::len).sum()
    }
}

pub struct Archive<T: Transport> {
    config: ArchiveConfig,
    transport: T,
    last_request: Mutex<Option<Instant>>,
    manifest_lock: Mutex<()>,
}

const MANIFEST: &str = "manifest.jsonl";

impl<T: Transport> Archive<T> {
    pub fn new(config: ArchiveConfig, transport: T) -> Result<Self, ArchiveError> {
        fs::create_dir_all(&config.cache_root)?;
        Ok(Archive { config, transport, last_request: Mutex::new(None), manifest_lock: Mutex::new(()) })
    }

    pub fn config(&self) -> &ArchiveConfig {
        &self.config
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn root(&self) -> &Path {
        &self.config.cache_root
    }

    /// Every frame in `[start, end]`, ascending by time. FITS wins over a
    /// quick-look product with the same timestamp.
    pub fn fetch(&self, query: &ArchiveQuery) -> Result<Vec<CachedFrame>, ArchiveError> {
        let known = self.records()?;
        let mut chosen: BTreeMap<DateTime<Utc>, ListingEntry> = BTreeMap::new();
        for entry in self.listing_entries(query)? {
            if entry.observation_time < query.start || entry.observation_time > query.end {
                continue;
            }
            match chosen.get(&entry.observation_time) {
                Some(existing) if existing.product <= entry.product => {}
                _ => {
                    chosen.insert(entry.observation_time, entry);
                }
            }
        }
        let mut out = Vec::with_capacity(chosen.len());
        for entry in chosen.into_values() {
            out.push(self.ensure_cached(query.instrument, &entry, &known)?);
        }
        Ok(out)
    }

    fn day_dir(&self, instrument: Instrument, t: DateTime<Utc>) -> PathBuf {
        PathBuf::from(instrument.as_str())
            .join(format!("{:04}", t.year()))
            .join(format!("{:02}", t.month()))
            .join(format!("{:02}", t.day()))
    }

    fn listing_entries(&self, query: &ArchiveQuery) -> Result<Vec<ListingEntry>, ArchiveError> {
        let template = self
            .config
            .url_templates
            .get(&query.instrument)
            .ok_or_else(|| ArchiveError::InvalidQuery(format!("no URL template for {}", query.instrument)))?;
        let mut urls: Vec<String> = Vec::new();
        let mut day = query.start.date_naive();
        while day <= query.end.date_naive() {
            let url = expand_template(template, day);
            if !urls.contains(&url) {
                urls.push(url);
            }
            day = day.succ_opt().expect("date in range");
        }
        let mut entries = Vec::new();
        for url in urls {
            entries.extend(self.listing(&url)?);
        }
        Ok(entries)
    }

    fn listing(&self, url: &str) -> Result<Vec<ListingEntry>, ArchiveError> {
        let path = self.root().join("listings").join(format!("{}.json", sha256_hex(url.as_bytes())));
        if let Ok(bytes) = fs::read(&path) {
            return Ok(serde_json::from_slice(&bytes)?);
        }
        if self.config.offline {
            return Err(ArchiveError::OfflineMiss(format!("listing {url}")));
        }
        let entries = match self.download(url) {
            Ok(body) => parse_listing(&String::from_utf8_lossy(&body), url),
            Err(ArchiveError::NotFound(_)) => {
                info!("no listing at {url}; nothing observed");
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        atomic_write(&path, &serde_json::to_vec_pretty(&entries)?)?;
        Ok(entries)
    }

    fn ensure_cached(&self, instrument: Instrument, entry: &ListingEntry, known: &HashMap<PathBuf, CachedFrame>) -> Result<CachedFrame, ArchiveError> {
        let rel = self.day_dir(instrument, entry.observation_time).join(&entry.filename);
        let abs = self.root().join(&rel);
        if let Some(frame) = known.get(&rel) {
            if abs.exists() {
                self.verify(frame)?;
                return Ok(frame.clone());
            }
        }
        if abs.exists() {
            // Left behind by an interrupted run after the rename.
            let bytes = fs::read(&abs)?;
            let frame = self.record(instrument, entry, rel, &bytes)?;
            return Ok(frame);
        }
        if self.config.offline {
            return Err(ArchiveError::OfflineMiss(entry.url.clone()));
        }
        let _lock = FileLock::acquire(&abs.with_extension("lock"), StdDuration::from_secs(self.config.lock_timeout_s))?;
        if abs.exists() {
            let bytes = fs::read(&abs)?;
            return self.record(instrument, entry, rel, &bytes);
        }
        let bytes = self.download(&entry.url)?;
        atomic_write(&abs, &bytes)?;
        info!("cached {}", rel.display());
        self.record(instrument, entry, rel, &bytes)
    }

    fn record(&self, instrument: Instrument, entry: &ListingEntry, rel: PathBuf, bytes: &[u8]) -> Result<CachedFrame, ArchiveError> {
        let frame = CachedFrame {
            instrument,
            observation_time: entry.observation_time,
            local_path: rel,
            checksum: sha256_hex(bytes),
            source_url: entry.url.clone(),
            product: entry.product,
        };
        let _guard = self.manifest_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = OpenOptions::new().create(true).append(true).open(self.root().join(MANIFEST))?;
        let mut line = serde_json::to_vec(&frame)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(frame)
    }

    /// Re-hashes a cached file; a mismatch moves it to the quarantine.
    pub fn verify(&self, frame: &CachedFrame) -> Result<(), ArchiveError> {
        let abs = self.root().join(&frame.local_path);
        let bytes = fs::read(&abs)?;
        if sha256_hex(&bytes) == frame.checksum {
            return Ok(());
        }
        let qdir = self.root().join("quarantine");
        fs::create_dir_all(&qdir)?;
        let stamp = SystemTime::now().duration_since(SystemTime::UNIX_EPOCH).map_or(0, |d| d.as_millis());
        let name = abs.file_name().map_or_else(|| "frame".into(), |n| n.to_string_lossy().into_owned());
        let quarantined = qdir.join(format!("{name}.{stamp}"));
        fs::rename(&abs, &quarantined)?;
        warn!("checksum mismatch: {} quarantined", frame.local_path.display());
        Err(ArchiveError::Checksum { path: abs, quarantined })
    }

    fn download(&self, url: &str) -> Result<Vec<u8>, ArchiveError> {
        let mut last = String::new();
        let attempts = self.config.max_attempts.max(1);
        for attempt in 1..=attempts {
            self.pace();
            debug!("GET {url} (attempt {attempt})");
            match self.transport.get(url) {
                Ok(bytes) => return Ok(bytes),
                Err(e) => {
                    last = e.message;
                    if e.not_found {
                        return Err(ArchiveError::NotFound(url.into()));
                    }
                    if !e.retryable {
                        return Err(ArchiveError::Fetch { url: url.into(), attempts: attempt, message: last });
                    }
                    if attempt < attempts {
                        let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                        warn!("GET {url} failed ({last}); retrying in {delay} ms");
                        std::thread::sleep(StdDuration::from_millis(delay));
                    }
                }
            }
        }
        Err(ArchiveError::Fetch { url: url.into(), attempts, message: last })
    }

    fn pace(&self) {
        let mut last = self.last_request.lock().unwrap_or_else(|e| e.into_inner());
        let gap = StdDuration::from_millis(self.config.rate_limit_ms);
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < gap {
                std::thread::sleep(gap - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    /// Latest manifest record per local path.
    fn records(&self) -> Result<HashMap<PathBuf, CachedFrame>, ArchiveError> {
        let path = self.root().join(MANIFEST);
        let f = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = HashMap::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let frame: CachedFrame = serde_json::from_str(&line)?;
            out.insert(frame.local_path.clone(), frame);
        }
        Ok(out)
    }

    pub fn cache_manifest(&self) -> Result<Inventory, ArchiveError> {
        fs::read_dir(self.root())?;
        let mut inv = Inventory::default();
        let mut records: Vec<CachedFrame> = self.records()?.into_values().collect();
        records.sort_by(|a, b| (a.instrument, a.observation_time, &a.local_path).cmp(&(b.instrument, b.observation_time, &b.local_path)));
        for r in records {
            if self.root().join(&r.local_path).exists() {
                inv.by_instrument.entry(r.instrument).or_default().push(r);
            } else {
                inv.dangling.push(r);
            }
        }
        Ok(inv)
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("part-{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Exclusive on-disk lock held for the lifetime of the value.
struct FileLock {
    path: PathBuf,
}

impl FileLock {
    const STALE: StdDuration = StdDuration::from_secs(1800);

    fn acquire(path: &Path, timeout: StdDuration) -> Result<FileLock, ArchiveError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let deadline = Instant::now() + timeout;
        loop {
            match OpenOptions::new().write(true).create_new(true).open(path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(FileLock { path: path.to_path_buf() });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let stale = fs::metadata(path)
                        .and_then(|m| m.modified())
                        .ok()
                        .and_then(|t| t.elapsed().ok())
                        .is_some_and(|age| age > Self::STALE);
                    if stale {
                        warn!("removing stale lock {}", path.display());
                        let _ = fs::remove_file(path);
                        continue;
                    }
                    if Instant::now() >= deadline {
                        return Err(ArchiveError::Lock(path.to_path_buf()));
                    }
                    std::thread::sleep(StdDuration::from_millis(100));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// The archive as a frame source for dataset building. Long ranges are
/// split into queries of at most a day.
impl<T: Transport> FrameSource for Archive<T> {
    fn available(&self, instrument: Instrument, start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Vec<DateTime<Utc>>, ImagingError> {
        let mut times = Vec::new();
        let mut s = start;
        while s < end {
            let e = (s + Duration::hours(MAX_QUERY_HOURS)).min(end);
            let q = ArchiveQuery::new(instrument, s, e).map_err(|err| ImagingError::Source(err.to_string()))?;
            let frames = self.fetch(&q).map_err(|err| ImagingError::Source(err.to_string()))?;
            times.extend(frames.into_iter().map(|f| f.observation_time));
            s = e;
        }
        times.sort();
        times.dedup();
        Ok(times)
    }

    fn load(&self, instrument: Instrument, time: DateTime<Utc>) -> Result<Array2<f32>, ImagingError> {
        let records = self.records().map_err(|e| ImagingError::Source(e.to_string()))?;
        let mut candidates: Vec<&CachedFrame> = records
            .values()
            .filter(|f| f.instrument == instrument && f.observation_time == time)
            .collect();
        candidates.sort_by_key(|f| f.product);
        let frame = candidates
            .first()
            .ok_or_else(|| ImagingError::Source(format!("no cached {instrument} frame at {time}")))?;
        self.verify(frame).map_err(|e| ImagingError::Source(e.to_string()))?;
        load_raw_frame(&self.root().join(&frame.local_path))
    }
}
