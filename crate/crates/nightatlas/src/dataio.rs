//! Image manifests, geographic subsets and the download cache.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("manifest line {line}: {reason}")]
    Manifest { line: u64, reason: String },
    #[error("duplicate id `{0}` in manifest")]
    DuplicateId(String),
    #[error("invalid bounding box `{label}`: {reason}")]
    BBox { label: String, reason: String },
    #[error("url template `{0}` has no {{id}} placeholder")]
    Template(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub mission: String,
    pub lat: f64,
    pub lon: f64,
}

/// Ids become file names in the cache, so they are restricted to a safe
/// alphabet.
fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Parses a `id,mission,lat,lon` CSV with decimal-degree coordinates.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DataError::Manifest { line: 1, reason: e.to_string() })?
        .clone();
    let expected = ["id", "mission", "lat", "lon"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(DataError::Manifest {
            line: 1,
            reason: format!("header must be `id,mission,lat,lon`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Manifest {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| DataError::Manifest { line, reason };
        let id = record[0].to_string();
        if !valid_id(&id) {
            return Err(bad(format!("invalid id `{id}`")));
        }
        let coord = |i: usize, name: &str, limit: f64| -> Result<f64> {
            let v: f64 = record[i].parse().map_err(|_| bad(format!("{name} `{}` is not a decimal number", &record[i])))?;
            if !(-limit..=limit).contains(&v) {
                return Err(bad(format!("{name} {v} outside [-{limit}, {limit}]")));
            }
            Ok(v)
        };
        let lat = coord(2, "lat", 90.0)?;
        let lon = coord(3, "lon", 180.0)?;
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId(id));
        }
        entries.push(ManifestEntry { id, mission: record[1].to_string(), lat, lon });
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Parse { path: path.into(), reason: e.to_string() })?;
    for e in entries {
        w.serialize(e).map_err(|e| DataError::Parse { path: path.into(), reason: e.to_string() })?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lat_min <= self.lat_max && self.lon_min <= self.lon_max) {
            return Err(format!("min must not exceed max in {self:?}"));
        }
        Ok(())
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }
}

/// Entries inside `bbox` (inclusive) whose ids are not excluded, in input
/// order.
pub fn subset_by_bbox(entries: &[ManifestEntry], bbox: &BBox, exclusions: &HashSet<String>) -> Vec<ManifestEntry> {
    entries
        .iter()
        .filter(|e| bbox.contains(e.lat, e.lon) && !exclusions.contains(&e.id))
        .cloned()
        .collect()
}

/// One id per line; blank lines and `#` comments are skipped.
pub fn parse_exclusions(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusions_path: Option<PathBuf>,
}

/// A label → subset map, with exclusion lists already loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetConfig {
    pub subsets: BTreeMap<String, (BBox, HashSet<String>)>,
}

/// Reads a bbox config; relative exclusion paths resolve against the config's
/// directory.
pub fn load_subset_config(path: &Path) -> Result<SubsetConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: BTreeMap<String, SubsetSpec> =
        serde_json::from_str(&text).map_err(|e| DataError::Parse { path: path.into(), reason: e.to_string() })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut subsets = BTreeMap::new();
    for (label, spec) in raw {
        spec.bbox.validate().map_err(|reason| DataError::BBox { label: label.clone(), reason })?;
        let exclusions = match &spec.exclusions_path {
            Some(p) => {
                let full = base.join(p);
                parse_exclusions(&fs::read_to_string(&full).map_err(io_err(&full))?)
            }
            None => HashSet::new(),
        };
        subsets.insert(label, (spec.bbox, exclusions));
    }
    Ok(SubsetConfig { subsets })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FetchStatus {
    Cached,
    Downloaded,
    Missing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FetchOutcome {
    pub id: String,
    pub status: FetchStatus,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct FetchOptions {
    pub force: bool,
    pub retries: u32,
    pub parallelism: usize,
    pub timeout: Duration,
    pub backoff: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            force: false,
            retries: 3,
            parallelism: 4,
            timeout: Duration::from_secs(60),
            backoff: Duration::from_millis(200),
        }
    }
}

const CACHE_EXTENSIONS: [&str; 2] = ["png", "jpg"];

/// Marks an id the server permanently refused, so reruns skip it.
pub fn missing_marker(cache_dir: &Path, id: &str) -> PathBuf {
    cache_dir.join(format!("{id}.missing"))
}

/// The cached file for `id`, if any.
pub fn cached_path(cache_dir: &Path, id: &str) -> Option<PathBuf> {
    CACHE_EXTENSIONS.iter().map(|ext| cache_dir.join(format!("{id}.{ext}"))).find(|p| p.is_file())
}

fn sniff_extension(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG") {
        "png"
    } else {
        "jpg"
    }
}

enum Attempt {
    Body(Vec<u8>),
    Permanent,
    Transient,
}

fn attempt(agent: &ureq::Agent, url: &str) -> Attempt {
    match agent.get(url).call() {
        Ok(mut resp) => {
            let mut body = Vec::new();
            match resp.body_mut().as_reader().read_to_end(&mut body) {
                Ok(_) => Attempt::Body(body),
                Err(_) => Attempt::Transient,
            }
        }
        Err(ureq::Error::StatusCode(code)) if (400..500).contains(&code) && code != 408 && code != 429 => {
            Attempt::Permanent
        }
        Err(_) => Attempt::Transient,
    }
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.part"));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &target).map_err(io_err(&target))?;
    Ok(target)
}

fn fetch_one(agent: &ureq::Agent, template: &str, cache_dir: &Path, id: &str, opts: &FetchOptions) -> Result<FetchOutcome> {
    if !opts.force {
        if let Some(path) = cached_path(cache_dir, id) {
            return Ok(FetchOutcome { id: id.into(), status: FetchStatus::Cached, path: Some(path) });
        }
        if missing_marker(cache_dir, id).is_file() {
            return Ok(FetchOutcome { id: id.into(), status: FetchStatus::Missing, path: None });
        }
    }
    let url = template.replace("{id}", id);
    let mut delay = opts.backoff;
    for round in 0..=opts.retries {
        match attempt(agent, &url) {
            Attempt::Body(bytes) => {
                let ext = sniff_extension(&bytes);
                for other in CACHE_EXTENSIONS.iter().filter(|&&e| e != ext) {
                    let stale = cache_dir.join(format!("{id}.{other}"));
                    if stale.is_file() {
                        fs::remove_file(&stale).map_err(io_err(&stale))?;
                    }
                }
                let path = write_atomic(cache_dir, &format!("{id}.{ext}"), &bytes)?;
                let marker = missing_marker(cache_dir, id);
                if marker.is_file() {
                    fs::remove_file(&marker).map_err(io_err(&marker))?;
                }
                return Ok(FetchOutcome { id: id.into(), status: FetchStatus::Downloaded, path: Some(path) });
            }
            Attempt::Permanent => {
                write_atomic(cache_dir, &format!("{id}.missing"), &[])?;
                break;
            }
            Attempt::Transient if round < opts.retries => {
                std::thread::sleep(delay);
                delay *= 2;
            }
            Attempt::Transient => {}
        }
    }
    log::warn!("{id}: not retrievable from {url}");
    Ok(FetchOutcome { id: id.into(), status: FetchStatus::Missing, path: None })
}

/// Downloads every uncached entry into `cache_dir/<id>.png|jpg`.
///
/// Per-entry failures become [`FetchStatus::Missing`]; only cache IO errors
/// are fatal. Permanent refusals (4xx other than 408 and 429) leave a
/// `<id>.missing` marker and are not requested again unless `force` is set.
/// Outcomes are returned in entry order.
pub fn fetch_images(
    entries: &[ManifestEntry],
    url_template: &str,
    cache_dir: &Path,
    opts: &FetchOptions,
) -> Result<Vec<FetchOutcome>> {
    if !url_template.contains("{id}") {
        return Err(DataError::Template(url_template.into()));
    }
    fs::create_dir_all(cache_dir).map_err(io_err(cache_dir))?;
    let config = ureq::Agent::config_builder().timeout_global(Some(opts.timeout)).build();
    let agent = ureq::Agent::new_with_config(config);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<FetchOutcome>>>> = Mutex::new((0..entries.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..opts.parallelism.clamp(1, entries.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(entry) = entries.get(i) else { break };
                let outcome = fetch_one(&agent, url_template, cache_dir, &entry.id, opts);
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every entry visited")).collect()
}
