//! Directory-based feature archive.
//!
//! ```text
//! manifest.json   dataset manifest + per-file SHA-256 (whole file and 64 KiB blocks)
//! index.json      per split, per sample: byte offsets and true lengths
//! text.bin        i32 LE token ids, each sample padded to l_t
//! video.bin       f32 LE row-major l_v × d_v per sample
//! audio.bin       f32 LE row-major l_a × d_a per sample
//! labels.bin      i32 LE, one per sample
//! text_emb.bin    optional f32 LE (l_t + 1) × d_t per sample
//! ```
//!
//! Every `.bin` starts with `MTCL` and a one-byte payload code. Samples are
//! stored in split order (train, val, test).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::types::{Dataset, DatasetManifest, ModalityBundle, Split, TrueLens};
use crate::error::{Error, Result};
use crate::substrate::Matrix;

pub const MAGIC: &[u8; 4] = b"MTCL";
pub const FORMAT_VERSION: &str = "1.0";
const HEADER_LEN: u64 = 5;
const BLOCK_SIZE: usize = 64 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    TextIds = 1,
    Video = 2,
    Audio = 3,
    Labels = 4,
    TextEmbeddings = 5,
}

impl PayloadKind {
    pub fn file_name(self) -> &'static str {
        match self {
            PayloadKind::TextIds => "text.bin",
            PayloadKind::Video => "video.bin",
            PayloadKind::Audio => "audio.bin",
            PayloadKind::Labels => "labels.bin",
            PayloadKind::TextEmbeddings => "text_emb.bin",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FileChecksum {
    size: u64,
    sha256: String,
    block_size: usize,
    blocks: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArchiveManifest {
    #[serde(flatten)]
    manifest: DatasetManifest,
    checksums: BTreeMap<String, FileChecksum>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexRecord {
    text_offset: u64,
    text_len: usize,
    video_offset: u64,
    video_len: usize,
    audio_offset: u64,
    audio_len: usize,
    label_offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_emb_offset: Option<u64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct ArchiveIndex {
    train: Vec<IndexRecord>,
    val: Vec<IndexRecord>,
    test: Vec<IndexRecord>,
}

impl ArchiveIndex {
    fn split(&self, split: Split) -> &[IndexRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Per-sample byte sizes of each payload.
struct RecordSizes {
    text: u64,
    video: u64,
    audio: u64,
    label: u64,
    text_emb: u64,
}

impl RecordSizes {
    fn new(m: &DatasetManifest) -> Self {
        let (l, d) = (m.max_lens, m.dims);
        Self {
            text: (l.text * 4) as u64,
            video: (l.video * d.video * 4) as u64,
            audio: (l.audio * d.audio * 4) as u64,
            label: 4,
            text_emb: ((l.text + 1) * d.text * 4) as u64,
        }
    }
}

fn checksum(bytes: &[u8]) -> FileChecksum {
    FileChecksum {
        size: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(bytes)),
        block_size: BLOCK_SIZE,
        blocks: bytes
            .chunks(BLOCK_SIZE)
            .map(|c| hex::encode(Sha256::digest(c)))
            .collect(),
    }
}

fn header(kind: PayloadKind) -> Vec<u8> {
    let mut v = MAGIC.to_vec();
    v.push(kind as u8);
    v
}

fn push_f32(buf: &mut Vec<u8>, m: &Matrix<f32>) {
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes `dataset` as an archive directory at `path` (created if needed).
pub fn write_feature_archive(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let manifest = &dataset.manifest;
    let sizes = RecordSizes::new(manifest);
    let l_t = manifest.max_lens.text;

    let mut text = header(PayloadKind::TextIds);
    let mut video = header(PayloadKind::Video);
    let mut audio = header(PayloadKind::Audio);
    let mut labels = header(PayloadKind::Labels);
    let mut text_emb = header(PayloadKind::TextEmbeddings);
    let mut index = ArchiveIndex::default();

    for split in Split::ALL {
        let records = match split {
            Split::Train => &mut index.train,
            Split::Val => &mut index.val,
            Split::Test => &mut index.test,
        };
        for b in dataset.split(split) {
            records.push(IndexRecord {
                text_offset: text.len() as u64,
                text_len: b.true_lens.text,
                video_offset: video.len() as u64,
                video_len: b.true_lens.video,
                audio_offset: audio.len() as u64,
                audio_len: b.true_lens.audio,
                label_offset: labels.len() as u64,
                text_emb_offset: manifest.text_embeddings.then_some(text_emb.len() as u64),
            });
            for i in 0..l_t {
                let id = b.text_ids.get(i).copied().unwrap_or(0) as i32;
                text.extend_from_slice(&id.to_le_bytes());
            }
            push_f32(&mut video, &b.video);
            push_f32(&mut audio, &b.audio);
            labels.extend_from_slice(&(b.label as i32).to_le_bytes());
            if let Some(e) = &b.text_embeddings {
                push_f32(&mut text_emb, e);
            }
        }
    }
    debug_assert_eq!(
        video.len() as u64,
        HEADER_LEN + sizes.video * index_len(&index) as u64
    );

    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut payloads = vec![
        (PayloadKind::TextIds, text),
        (PayloadKind::Video, video),
        (PayloadKind::Audio, audio),
        (PayloadKind::Labels, labels),
    ];
    if manifest.text_embeddings {
        payloads.push((PayloadKind::TextEmbeddings, text_emb));
    }
    let mut checksums = BTreeMap::new();
    for (kind, bytes) in &payloads {
        let file = path.join(kind.file_name());
        fs::write(&file, bytes).map_err(|e| Error::io(&file, e))?;
        checksums.insert(kind.file_name().to_string(), checksum(bytes));
    }
    let archive_manifest = ArchiveManifest {
        manifest: manifest.clone(),
        checksums,
    };
    write_json(&path.join("manifest.json"), &archive_manifest)?;
    write_json(&path.join("index.json"), &index)?;
    Ok(())
}

fn index_len(index: &ArchiveIndex) -> usize {
    index.train.len() + index.val.len() + index.test.len()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        file: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArchiveReport {
    pub samples: usize,
    pub warnings: Vec<String>,
}

/// Reads and fully validates an archive directory.
pub fn read_feature_archive(path: &Path) -> Result<Dataset> {
    read_archive(path).map(|(d, _)| d)
}

/// Validates an archive and reports non-fatal findings.
pub fn validate_archive(path: &Path) -> Result<ArchiveReport> {
    read_archive(path).map(|(_, r)| r)
}

fn version_supported(v: &str) -> bool {
    v.split('.').next() == FORMAT_VERSION.split('.').next()
}

fn read_archive(path: &Path) -> Result<(Dataset, ArchiveReport)> {
    let archive: ArchiveManifest = read_json(&path.join("manifest.json"))?;
    let manifest = archive.manifest;
    if !version_supported(&manifest.format_version) {
        return Err(Error::Version {
            found: manifest.format_version,
            supported: FORMAT_VERSION.to_string(),
        });
    }
    manifest.validate()?;
    let index: ArchiveIndex = read_json(&path.join("index.json"))?;
    let s = manifest.split_sizes;
    if (index.train.len(), index.val.len(), index.test.len()) != (s.train, s.val, s.test) {
        return Err(Error::Dimension(format!(
            "index lists {}/{}/{} samples, manifest says {}/{}/{}",
            index.train.len(),
            index.val.len(),
            index.test.len(),
            s.train,
            s.val,
            s.test
        )));
    }
    let total = index_len(&index) as u64;
    let sizes = RecordSizes::new(&manifest);
    let l = manifest.max_lens;
    let d = manifest.dims;

    let mut kinds = vec![
        (PayloadKind::TextIds, sizes.text, l.text, 1, "l_t"),
        (PayloadKind::Video, sizes.video, l.video, d.video, "d_v"),
        (PayloadKind::Audio, sizes.audio, l.audio, d.audio, "d_a"),
        (PayloadKind::Labels, sizes.label, 1, 1, "label"),
    ];
    if manifest.text_embeddings {
        kinds.push((PayloadKind::TextEmbeddings, sizes.text_emb, l.text + 1, d.text, "d_t"));
    }
    let mut payloads = BTreeMap::new();
    for (kind, record, rows, width, dim_name) in kinds {
        let name = kind.file_name();
        let file = path.join(name);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if bytes.len() < HEADER_LEN as usize || &bytes[..4] != MAGIC {
            return Err(Error::Format {
                file: name.into(),
                reason: "missing MTCL magic".into(),
            });
        }
        if bytes[4] != kind as u8 {
            return Err(Error::Format {
                file: name.into(),
                reason: format!("payload code {} (expected {})", bytes[4], kind as u8),
            });
        }
        let payload = bytes.len() as u64 - HEADER_LEN;
        let expected = record * total;
        if payload != expected {
            // a consistent record stride of another width is a dimension error
            let per_row = (total * rows as u64 * 4).max(1);
            if total > 0 && payload.is_multiple_of(per_row) && width > 1 {
                return Err(Error::Dimension(format!(
                    "{name} payload implies {dim_name}={} but manifest says {width}",
                    payload / per_row
                )));
            }
            return Err(Error::Length {
                file: name.into(),
                expected: expected + HEADER_LEN,
                actual: bytes.len() as u64,
            });
        }
        let sum = archive.checksums.get(name).ok_or_else(|| Error::Format {
            file: "manifest.json".into(),
            reason: format!("no checksum for {name}"),
        })?;
        verify_checksum(name, &bytes, sum)?;
        payloads.insert(name, bytes);
    }

    let mut report = ArchiveReport::default();
    let mut splits: BTreeMap<Split, Vec<ModalityBundle>> = BTreeMap::new();
    let mut ordinal: u64 = 0;
    for split in Split::ALL {
        let mut out = Vec::new();
        for (i, rec) in index.split(split).iter().enumerate() {
            let expect = |record: u64| HEADER_LEN + ordinal * record;
            let check = |field: &str, got: u64, want: u64| -> Result<()> {
                if got != want {
                    return Err(Error::Dimension(format!(
                        "{} sample {i}: {field} offset {got}, expected {want}",
                        split.name()
                    )));
                }
                Ok(())
            };
            check("text", rec.text_offset, expect(sizes.text))?;
            check("video", rec.video_offset, expect(sizes.video))?;
            check("audio", rec.audio_offset, expect(sizes.audio))?;
            check("label", rec.label_offset, expect(sizes.label))?;
            if manifest.text_embeddings {
                let off = rec.text_emb_offset.ok_or_else(|| {
                    Error::Dimension(format!("{} sample {i}: missing text_emb_offset", split.name()))
                })?;
                check("text_emb", off, expect(sizes.text_emb))?;
            }
            if rec.text_len > l.text || rec.video_len > l.video || rec.audio_len > l.audio {
                return Err(Error::Dimension(format!(
                    "{} sample {i}: true lengths exceed max lengths",
                    split.name()
                )));
            }

            let ids = read_i32s(&payloads["text.bin"], rec.text_offset, l.text);
            let text_ids: Vec<u32> = ids[..rec.text_len].iter().map(|&v| v as u32).collect();
            let video = read_matrix(&payloads["video.bin"], rec.video_offset, l.video, d.video)?;
            let audio = read_matrix(&payloads["audio.bin"], rec.audio_offset, l.audio, d.audio)?;
            let label = read_i32s(&payloads["labels.bin"], rec.label_offset, 1)[0];
            if label < 0 {
                return Err(Error::Label {
                    label: label as usize,
                    num_labels: manifest.num_labels,
                });
            }
            let text_embeddings = match rec.text_emb_offset {
                Some(off) if manifest.text_embeddings => Some(read_matrix(
                    &payloads["text_emb.bin"],
                    off,
                    l.text + 1,
                    d.text,
                )?),
                _ => None,
            };
            let bundle = ModalityBundle {
                text_ids,
                video,
                audio,
                true_lens: TrueLens {
                    text: rec.text_len,
                    video: rec.video_len,
                    audio: rec.audio_len,
                },
                label: label as usize,
                text_embeddings,
            };
            bundle.validate(&manifest)?;
            if rec.text_len == 0 || rec.video_len == 0 || rec.audio_len == 0 {
                report.warnings.push(format!(
                    "{} sample {i}: a modality has zero true length",
                    split.name()
                ));
            }
            out.push(bundle);
            ordinal += 1;
        }
        splits.insert(split, out);
    }
    report.samples = ordinal as usize;
    for split in Split::ALL {
        if splits[&split].is_empty() {
            report.warnings.push(format!("{} split is empty", split.name()));
        }
    }

    let dataset = Dataset {
        manifest,
        train: splits.remove(&Split::Train).unwrap_or_default(),
        val: splits.remove(&Split::Val).unwrap_or_default(),
        test: splits.remove(&Split::Test).unwrap_or_default(),
    };
    Ok((dataset, report))
}

fn verify_checksum(name: &str, bytes: &[u8], sum: &FileChecksum) -> Result<()> {
    if sum.size != bytes.len() as u64 {
        return Err(Error::Length {
            file: name.into(),
            expected: sum.size,
            actual: bytes.len() as u64,
        });
    }
    let block = sum.block_size.max(1);
    for (i, chunk) in bytes.chunks(block).enumerate() {
        let digest = hex::encode(Sha256::digest(chunk));
        if sum.blocks.get(i) != Some(&digest) {
            return Err(Error::Checksum {
                file: name.into(),
                offset: (i * block) as u64,
            });
        }
    }
    if hex::encode(Sha256::digest(bytes)) != sum.sha256 {
        return Err(Error::Checksum {
            file: name.into(),
            offset: 0,
        });
    }
    Ok(())
}

fn read_i32s(bytes: &[u8], offset: u64, n: usize) -> Vec<i32> {
    let start = offset as usize;
    bytes[start..start + 4 * n]
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn read_matrix(bytes: &[u8], offset: u64, rows: usize, cols: usize) -> Result<Matrix<f32>> {
    let start = offset as usize;
    let data = bytes[start..start + 4 * rows * cols]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::from_vec(rows, cols, data)
}
