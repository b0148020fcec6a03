use std::collections::HashMap;
use std::io::Cursor;
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{DateTime, Duration, TimeZone, Utc};
use geoeff::archive::{Archive, ArchiveConfig, Transport, TransportError};
use geoeff::catalog::{CmeEvent, EventCatalog, HaloClass};
use geoeff::imaging::{build_manifest, PreprocessConfig, WindowPolicy};
use geoeff::Instrument;

struct Mock {
    pages: HashMap<String, Vec<u8>>,
    calls: AtomicUsize,
}

impl Transport for Mock {
    fn get(&self, url: &str) -> Result<Vec<u8>, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.pages.get(url).cloned().ok_or(TransportError { message: format!("404 {url}"), retryable: false, not_found: true })
    }
}

fn png(seed: u8) -> Vec<u8> {
    let img = image::GrayImage::from_fn(32, 32, |x, y| image::Luma([((x * 3 + y * 5) as u8).wrapping_add(seed)]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn onset() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2002, 9, 17, 8, 6, 0).unwrap()
}

/// One listing per instrument for 2002-09-17; C2 includes a frame before
/// the window to serve as base.
fn server() -> Mock {
    let o = onset();
    let m = Duration::minutes;
    let frames: [(Instrument, Vec<DateTime<Utc>>); 3] = [
        (Instrument::C2, vec![o - m(90), o + m(24), o + m(60), o + m(300)]),
        (Instrument::Eit, vec![o - m(300), o - m(120), o - m(12)]),
        (Instrument::Mdi, vec![o - m(400), o - m(300), o - m(200), o - m(100), o + m(10)]),
    ];
    let mut pages = HashMap::new();
    for (inst, times) in frames {
        let base = format!("https://archive.test/{}/020917/", inst.as_str());
        let mut listing = String::from("<html>\n");
        for (k, t) in times.iter().enumerate() {
            let name = format!("{}_{}.png", t.format("%Y%m%d_%H%M%S"), inst.as_str().to_lowercase());
            listing.push_str(&format!("<a href=\"{name}\">{name}</a>\n"));
            pages.insert(format!("{base}{name}"), png(k as u8 * 40));
        }
        pages.insert(base, listing.into_bytes());
    }
    Mock { pages, calls: AtomicUsize::new(0) }
}

fn config(root: &std::path::Path, offline: bool) -> ArchiveConfig {
    ArchiveConfig {
        cache_root: root.to_path_buf(),
        url_templates: Instrument::ALL.iter().map(|i| (*i, format!("https://archive.test/{}/{{yymmdd}}/", i.as_str()))).collect(),
        rate_limit_ms: 0,
        backoff_ms: 0,
        offline,
        ..ArchiveConfig::default()
    }
}

#[test]
fn dataset_builds_from_the_cache_and_rebuilds_offline() {
    let cache = tempfile::tempdir().unwrap();
    let catalog = EventCatalog {
        events: vec![CmeEvent::new("CME_20020917T080600", onset(), HaloClass::Halo, Some(-84))],
        ..EventCatalog::default()
    };
    let pre = PreprocessConfig { target_shape: [16, 16], ..PreprocessConfig::default() };
    let policy = WindowPolicy::default();

    let online = Archive::new(config(cache.path(), false), server()).unwrap();
    let out1 = tempfile::tempdir().unwrap();
    let m1 = build_manifest(&catalog, &online, &policy, &pre, out1.path()).unwrap();
    let e = &m1.entries[0];
    assert_eq!((e.counts[&Instrument::C2], e.counts[&Instrument::Eit], e.counts[&Instrument::Mdi]), (2, 2, 3));
    assert!(online.transport_calls() > 0);

    let inv = online.cache_manifest().unwrap();
    assert!(inv.dangling.is_empty());
    assert_eq!(inv.by_instrument[&Instrument::C2].len(), 3);

    let offline = Archive::new(config(cache.path(), true), server()).unwrap();
    let out2 = tempfile::tempdir().unwrap();
    let m2 = build_manifest(&catalog, &offline, &policy, &pre, out2.path()).unwrap();
    assert_eq!(offline.transport_calls(), 0);
    assert_eq!(m1.entries, m2.entries);
}

trait Calls {
    fn transport_calls(&self) -> usize;
}

impl Calls for Archive<Mock> {
    fn transport_calls(&self) -> usize {
        self.transport().calls.load(Ordering::SeqCst)
    }
}
