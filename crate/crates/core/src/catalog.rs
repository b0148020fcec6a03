//! Event catalog: parses the Richardson & Cane ICME list and the SOHO/LASCO
//! CME catalog, joins them by onset time and labels each event by its
//! minimum Dst.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Utc};
use log::{info, warn};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::Label;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("catalog I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("catalog record: {0}")]
    Json(#[from] serde_json::Error),
}

/// A row that could not be turned into a record. Reported, never dropped
/// silently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub errors: Vec<RowError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaloClass {
    Halo,
    PartialHalo,
    Other,
}

impl HaloClass {
    /// 360° is a full halo; at least `partial_threshold_deg` is a partial halo.
    pub fn from_width(width_deg: f64, partial_threshold_deg: f64) -> HaloClass {
        if width_deg >= 360.0 {
            HaloClass::Halo
        } else if width_deg >= partial_threshold_deg {
            HaloClass::PartialHalo
        } else {
            HaloClass::Other
        }
    }

    pub fn is_halo_like(self) -> bool {
        matches!(self, HaloClass::Halo | HaloClass::PartialHalo)
    }
}

/// One ICME row of the RC list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcRecord {
    pub line: usize,
    /// Associated LASCO CME time listed in the row.
    pub onset_time: DateTime<Utc>,
    /// Minimum Dst in nT, absent when the row gives none.
    pub dst_min: Option<i32>,
    /// Disturbance (shock/ICME arrival) time at Earth.
    pub arrival_time: DateTime<Utc>,
}

/// One CME row of the LASCO catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LascoRecord {
    pub line: usize,
    pub onset_time: DateTime<Utc>,
    pub width_deg: f64,
    pub halo_class: HaloClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmeEvent {
    pub event_id: String,
    pub onset_time: DateTime<Utc>,
    pub halo_class: HaloClass,
    pub dst_min: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl CmeEvent {
    pub fn new(event_id: impl Into<String>, onset_time: DateTime<Utc>, halo_class: HaloClass, dst_min: Option<i32>) -> Self {
        CmeEvent {
            event_id: event_id.into(),
            onset_time,
            halo_class,
            dst_min,
            label: dst_min.map(|d| Label::from_dst(f64::from(d))),
        }
    }
}

/// Canonical event identifier derived from the LASCO onset time.
pub fn event_id_for(onset: DateTime<Utc>) -> String {
    format!("CME_{}", onset.format("%Y%m%dT%H%M%S"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceChecksum {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<SourceChecksum>,
    pub parsed_at: Option<DateTime<Utc>>,
}

impl Provenance {
    pub fn add_source(&mut self, name: impl Into<String>, content: &[u8]) {
        self.sources.push(SourceChecksum {
            name: name.into(),
            sha256: hex::encode(Sha256::digest(content)),
        });
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventCatalog {
    pub events: Vec<CmeEvent>,
    pub provenance: Provenance,
}

impl EventCatalog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn labeled(&self) -> impl Iterator<Item = (&CmeEvent, Label)> {
        self.events.iter().filter_map(|e| e.label.map(|l| (e, l)))
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labeled().filter(|(_, l)| l.is_positive()).count();
        (pos, self.labeled().count() - pos)
    }

    pub fn truths(&self) -> BTreeMap<String, Label> {
        self.labeled().map(|(e, l)| (e.event_id.clone(), l)).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), CatalogError> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, CatalogError> {
        let mut events = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line)?);
        }
        Ok(EventCatalog { events, provenance: Provenance::default() })
    }
}

// ---------------------------------------------------------------------------
// RC list

/// Splits the document into rows of cells with their source line numbers.
/// HTML tables are recognised by `<tr`; anything else is read as TSV.
fn table_rows(doc: &str) -> Vec<(usize, Vec<String>)> {
    if doc.to_ascii_lowercase().contains("<tr") {
        html_rows(doc)
    } else {
        doc.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(i, l)| (i + 1, l.split('\t').map(|c| c.trim().to_string()).collect()))
            .collect()
    }
}

fn html_rows(doc: &str) -> Vec<(usize, Vec<String>)> {
    let row_re = Regex::new(r"(?is)<tr[^>]*>(.*?)</tr>").unwrap();
    let cell_re = Regex::new(r"(?is)<t[dh][^>]*>(.*?)</t[dh]>").unwrap();
    let tag_re = Regex::new(r"(?s)<[^>]*>").unwrap();
    row_re
        .captures_iter(doc)
        .map(|cap| {
            let start = cap.get(0).unwrap().start();
            let line = doc[..start].matches('\n').count() + 1;
            let cells = cell_re
                .captures_iter(&cap[1])
                .map(|c| {
                    let text = tag_re.replace_all(&c[1], " ");
                    decode_entities(&text).split_whitespace().collect::<Vec<_>>().join(" ")
                })
                .collect();
            (line, cells)
        })
        .collect()
}

fn decode_entities(s: &str) -> String {
    s.replace("&nbsp;", " ")
        .replace("&minus;", "-")
        .replace("&#8722;", "-")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&amp;", "&")
}

fn normalise_minus(s: &str) -> String {
    s.replace(['\u{2212}', '\u{2013}'], "-")
}

fn is_blank_value(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.chars().all(|c| c == '.') || t.eq_ignore_ascii_case("n/a") || t == "-"
}

/// Parses "HHMM", "HH:MM" or "HH:MM:SS".
fn parse_clock(s: &str) -> Option<NaiveTime> {
    let s = s.trim();
    if s.contains(':') {
        NaiveTime::parse_from_str(s, "%H:%M:%S")
            .or_else(|_| NaiveTime::parse_from_str(s, "%H:%M"))
            .ok()
    } else if s.len() == 4 && s.chars().all(|c| c.is_ascii_digit()) {
        let h: u32 = s[..2].parse().ok()?;
        let m: u32 = s[2..].parse().ok()?;
        if h == 24 && m == 0 {
            return None;
        }
        NaiveTime::from_hms_opt(h, m, 0)
    } else {
        None
    }
}

/// Parses "YYYY/MM/DD HHMM". With `reference` set, "MM/DD HHMM" is also
/// accepted and the year is taken from the reference, stepping back one
/// year when the month lies after the reference month.
fn parse_rc_time(s: &str, reference: Option<DateTime<Utc>>) -> Result<DateTime<Utc>, String> {
    let s = s.trim();
    let mut parts = s.split_whitespace();
    let date = parts.next().ok_or_else(|| "empty timestamp".to_string())?;
    let clock = parts
        .next()
        .ok_or_else(|| format!("ambiguous timestamp '{s}': no time of day"))?;
    if parts.next().is_some() {
        return Err(format!("ambiguous timestamp '{s}'"));
    }
    let time = parse_clock(clock).ok_or_else(|| format!("bad time of day in '{s}'"))?;
    let fields: Vec<&str> = date.split(['/', '-']).collect();
    let nd = match fields.as_slice() {
        [y, m, d] if y.len() == 4 => {
            let (y, m, d) = (y.parse::<i32>(), m.parse::<u32>(), d.parse::<u32>());
            match (y, m, d) {
                (Ok(y), Ok(m), Ok(d)) => NaiveDate::from_ymd_opt(y, m, d),
                _ => None,
            }
        }
        [m, d] => {
            let reference = reference.ok_or_else(|| format!("ambiguous timestamp '{s}': no year"))?;
            let (m, d) = (
                m.parse::<u32>().map_err(|_| format!("bad month in '{s}'"))?,
                d.parse::<u32>().map_err(|_| format!("bad day in '{s}'"))?,
            );
            let year = if m > reference.month() { reference.year() - 1 } else { reference.year() };
            NaiveDate::from_ymd_opt(year, m, d)
        }
        _ => None,
    }
    .ok_or_else(|| format!("bad date in '{s}'"))?;
    Ok(Utc.from_utc_datetime(&NaiveDateTime::new(nd, time)))
}

fn parse_dst(cell: &str) -> Result<Option<i32>, String> {
    let cell = normalise_minus(cell);
    if is_blank_value(&cell) {
        return Ok(None);
    }
    let re = Regex::new(r"^\s*([+-]?\d+)").unwrap();
    match re.captures(&cell) {
        Some(c) => c[1].parse::<i32>().map(Some).map_err(|e| e.to_string()),
        None => Err(format!("unreadable Dst value '{}'", cell.trim())),
    }
}

struct RcColumns {
    arrival: usize,
    cme: usize,
    dst: usize,
}

fn rc_columns(cells: &[String]) -> Option<RcColumns> {
    let find = |pred: &dyn Fn(&str) -> bool| cells.iter().position(|c| pred(&c.to_ascii_lowercase()));
    let arrival = find(&|c| c.contains("disturbance"))?;
    let dst = find(&|c| c.contains("dst"))?;
    let cme = find(&|c| c.contains("lasco")).or_else(|| find(&|c| c.contains("cme") && !c.contains("icme")))?;
    Some(RcColumns { arrival, cme, dst })
}

/// Parses the RC ICME list (TSV or HTML table export). The header row must
/// name a disturbance-time column, a LASCO CME column and a Dst column.
pub fn parse_rc_list(doc: &str) -> Result<Parsed<RcRecord>, CatalogError> {
    let rows = table_rows(doc);
    let header_pos = rows.iter().position(|(_, cells)| rc_columns(cells).is_some());
    let Some(header_pos) = header_pos else {
        return Err(CatalogError::Parse {
            line: rows.first().map_or(1, |r| r.0),
            message: "no header row with disturbance, LASCO CME and Dst columns".into(),
        });
    };
    let cols = rc_columns(&rows[header_pos].1).unwrap();
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (line, cells) in &rows[header_pos + 1..] {
        let line = *line;
        let need = cols.arrival.max(cols.cme).max(cols.dst);
        if cells.len() <= need {
            errors.push(RowError { line, message: format!("expected at least {} cells, found {}", need + 1, cells.len()) });
            continue;
        }
        let arrival = match parse_rc_time(&cells[cols.arrival], None) {
            Ok(t) => t,
            Err(message) => {
                errors.push(RowError { line, message });
                continue;
            }
        };
        if is_blank_value(&cells[cols.cme]) {
            errors.push(RowError { line, message: "no associated LASCO CME".into() });
            continue;
        }
        let onset = match parse_rc_time(&cells[cols.cme], Some(arrival)) {
            Ok(t) => t,
            Err(message) => {
                errors.push(RowError { line, message });
                continue;
            }
        };
        match parse_dst(&cells[cols.dst]) {
            Ok(dst_min) => records.push(RcRecord { line, onset_time: onset, dst_min, arrival_time: arrival }),
            Err(message) => errors.push(RowError { line, message }),
        }
    }
    Ok(Parsed { records, errors })
}

// ---------------------------------------------------------------------------
// LASCO catalog

pub const DEFAULT_PARTIAL_HALO_DEG: f64 = 120.0;

/// Parses the LASCO CME catalog text export: whitespace-separated columns
/// `date time central_pa width ...`. Lines that do not start with a date
/// are headers or notes and are skipped.
pub fn parse_lasco_catalog(doc: &str, partial_halo_threshold_deg: f64) -> Parsed<LascoRecord> {
    let date_re = Regex::new(r"^\d{4}/\d{2}/\d{2}$").unwrap();
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in doc.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() || !date_re.is_match(fields[0]) {
            continue;
        }
        if fields.len() < 4 {
            errors.push(RowError { line, message: "missing central PA or width column".into() });
            continue;
        }
        let onset = NaiveDate::parse_from_str(fields[0], "%Y/%m/%d")
            .ok()
            .zip(parse_clock(fields[1]))
            .map(|(d, t)| Utc.from_utc_datetime(&NaiveDateTime::new(d, t)));
        let Some(onset) = onset else {
            errors.push(RowError { line, message: format!("bad timestamp '{} {}'", fields[0], fields[1]) });
            continue;
        };
        match fields[3].parse::<f64>() {
            Ok(width) if (0.0..=360.0).contains(&width) => records.push(LascoRecord {
                line,
                onset_time: onset,
                width_deg: width,
                halo_class: HaloClass::from_width(width, partial_halo_threshold_deg),
            }),
            _ => errors.push(RowError { line, message: format!("unknown width token '{}'", fields[3]) }),
        }
    }
    Parsed { records, errors }
}

// ---------------------------------------------------------------------------
// Join and label

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinConfig {
    pub match_tolerance_minutes: i64,
    pub study_start: DateTime<Utc>,
    pub study_end: DateTime<Utc>,
}

impl Default for JoinConfig {
    fn default() -> Self {
        JoinConfig {
            match_tolerance_minutes: 120,
            study_start: Utc.with_ymd_and_hms(1996, 1, 1, 0, 0, 0).unwrap(),
            study_end: Utc.with_ymd_and_hms(2008, 12, 31, 23, 59, 59).unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ExclusionReason {
    OutsideStudyInterval,
    NoLascoMatch,
    NotHalo { width_deg: f64 },
    MissingDst,
    DuplicateEvent { event_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub rc_line: usize,
    pub rc_onset_time: DateTime<Utc>,
    #[serde(flatten)]
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinOutcome {
    pub catalog: EventCatalog,
    pub exclusions: Vec<Exclusion>,
}

impl JoinOutcome {
    pub fn write_exclusions_jsonl<W: Write>(&self, mut w: W) -> Result<(), CatalogError> {
        for e in &self.exclusions {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Nearest LASCO row to `t` within `tol`; equidistant rows resolve to the
/// earlier one.
fn nearest_lasco(t: DateTime<Utc>, lasco: &[LascoRecord], tol: Duration) -> Option<&LascoRecord> {
    let mut best: Option<(&LascoRecord, Duration)> = None;
    for rec in lasco {
        let d = (rec.onset_time - t).abs();
        if d > tol {
            continue;
        }
        match best {
            None => best = Some((rec, d)),
            Some((b, bd)) => {
                if d < bd {
                    best = Some((rec, d));
                } else if d == bd && rec.onset_time != b.onset_time {
                    let earlier = if rec.onset_time < b.onset_time { rec } else { b };
                    warn!(
                        "RC row {}: LASCO rows {} and {} equidistant; taking the earlier",
                        t, b.onset_time, rec.onset_time
                    );
                    best = Some((earlier, d));
                }
            }
        }
    }
    best.map(|(r, _)| r)
}

/// Matches every RC record to its nearest LASCO CME and keeps labeled
/// halo/partial-halo events. Each dropped record gets one exclusion.
pub fn join_and_label(rc: &[RcRecord], lasco: &[LascoRecord], config: &JoinConfig) -> JoinOutcome {
    if rc.is_empty() {
        warn!("no RC records to join; catalog is empty");
    }
    let mut lasco_sorted: Vec<LascoRecord> = lasco.to_vec();
    lasco_sorted.sort_by(|a, b| a.onset_time.cmp(&b.onset_time).then(a.line.cmp(&b.line)));
    let tol = Duration::minutes(config.match_tolerance_minutes);
    let mut events: Vec<CmeEvent> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut exclusions = Vec::new();
    for r in rc {
        let exclude = |reason| Exclusion { rc_line: r.line, rc_onset_time: r.onset_time, reason };
        if r.onset_time < config.study_start || r.onset_time > config.study_end {
            exclusions.push(exclude(ExclusionReason::OutsideStudyInterval));
            continue;
        }
        let Some(m) = nearest_lasco(r.onset_time, &lasco_sorted, tol) else {
            exclusions.push(exclude(ExclusionReason::NoLascoMatch));
            continue;
        };
        if !m.halo_class.is_halo_like() {
            exclusions.push(exclude(ExclusionReason::NotHalo { width_deg: m.width_deg }));
            continue;
        }
        if r.dst_min.is_none() {
            exclusions.push(exclude(ExclusionReason::MissingDst));
            continue;
        }
        let id = event_id_for(m.onset_time);
        if seen.contains_key(&id) {
            exclusions.push(exclude(ExclusionReason::DuplicateEvent { event_id: id }));
            continue;
        }
        seen.insert(id.clone(), events.len());
        events.push(CmeEvent::new(id, m.onset_time, m.halo_class, r.dst_min));
    }
    events.sort_by_key(|a| a.onset_time);
    for e in &exclusions {
        info!("excluded RC row {}: {:?}", e.rc_line, e.reason);
    }
    JoinOutcome {
        catalog: EventCatalog { events, provenance: Provenance::default() },
        exclusions,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearCounts {
    pub geoeffective: usize,
    pub non_geoeffective: usize,
}

/// Per-year event counts by label.
pub fn summarize(catalog: &EventCatalog) -> BTreeMap<i32, YearCounts> {
    let mut out: BTreeMap<i32, YearCounts> = BTreeMap::new();
    for (e, label) in catalog.labeled() {
        let c = out.entry(e.onset_time.year()).or_default();
        if label.is_positive() {
            c.geoeffective += 1;
        } else {
            c.non_geoeffective += 1;
        }
    }
    out
}
