#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nightatlas::core::augment::{build_sra_dataset, AugmentConfig, Reference, SraCorpus};
use nightatlas::core::imgproc::RgbImage;
use nightatlas::dataio::ManifestEntry;
use nightatlas::harness::Scale;
use nightatlas::synth::{self, OTHER_LABEL};

/// Minimal HTTP server answering `GET /img/<id>` with a fixed body, or 404
/// for the ids in `missing`. Counts every request it receives.
pub struct StubServer {
    pub base: String,
    hits: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start(body: Vec<u8>, missing: &[&str]) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        let missing: Vec<String> = missing.iter().map(|s| s.to_string()).collect();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request = String::new();
                if reader.read_line(&mut request).is_err() {
                    continue;
                }
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).map_or(true, |n| n == 0) || line == "\r\n" {
                        break;
                    }
                }
                counter.fetch_add(1, Ordering::SeqCst);
                let path = request.split_whitespace().nth(1).unwrap_or_default();
                let id = path.rsplit('/').next().unwrap_or_default();
                let response = if missing.iter().any(|m| m == id) {
                    b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\nConnection: close\r\n\r\n".to_vec()
                } else {
                    let mut r = format!("HTTP/1.1 200 OK\r\nContent-Type: image/png\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len()).into_bytes();
                    r.extend_from_slice(&body);
                    r
                };
                let _ = stream.write_all(&response);
            }
        });
        Self { base, hits }
    }

    pub fn template(&self) -> String {
        format!("{}/img/{{id}}", self.base)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

pub fn png_bytes() -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frame.png");
    let img = RgbImage::from_fn(4, 3, |x, y| [x as f64 / 3.0, y as f64 / 2.0, 0.5]);
    nightatlas::pngio::write_rgb(&path, &img).unwrap();
    std::fs::read(path).unwrap()
}

/// Ten entries on a small lat/lon grid around Berlin and Madrid.
pub fn manifest() -> Vec<ManifestEntry> {
    (0..10)
        .map(|i| {
            let (lat, lon) = if i < 5 { (52.4 + 0.05 * i as f64, 13.3 + 0.02 * i as f64) } else { (40.3 + 0.05 * i as f64, -3.8 + 0.02 * i as f64) };
            ManifestEntry { id: format!("ISS030-E-{:05}", 100 + i), mission: "ISS030".into(), lat, lon }
        })
        .collect()
}

/// Synthetic references and Other frames for desk-scale training.
pub struct DeskFixture {
    pub references: Vec<synth::SynthItem>,
    pub others: Vec<synth::SynthItem>,
}

impl DeskFixture {
    pub fn new(classes: usize, others: usize, seed: u64) -> Self {
        Self { references: synth::synth_dataset(classes, 1, seed), others: synth::synth_others(others, seed) }
    }

    pub fn corpus(&self, variants: usize, split: f64) -> SraCorpus {
        let refs: Vec<Reference> =
            self.references.iter().map(|i| Reference { label: &i.label, id: &i.id, image: &i.image }).collect();
        let others: Vec<(&str, &RgbImage)> = self.others.iter().map(|o| (o.id.as_str(), &o.image)).collect();
        let class_cfg = AugmentConfig { variants_per_image: variants, master_seed: 5, ..AugmentConfig::default() };
        let other_cfg = AugmentConfig { variants_per_image: 1, ..class_cfg };
        build_sra_dataset(&refs, &others, OTHER_LABEL, &class_cfg, &other_cfg, split, 9, &Scale::Desk.geometry()).unwrap()
    }
}
