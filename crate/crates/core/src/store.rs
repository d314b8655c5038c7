//! LSF1 layer-stack files and the TSV manifests that index them.
//!
//! An LSF1 file is a 21-byte little-endian header (magic `LAPF`, version,
//! `C`, `N`, `T`, dtype tag) followed by `C·N·T` 32-bit floats laid out as
//! `[N][T][C]`, so one layer is contiguous and each frame is a contiguous
//! `C`-vector inside it.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pooling::LayerStack;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LAPF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: u64 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lsf1Header {
    pub channels: u32,
    pub layers: u32,
    pub frames: u32,
}

impl Lsf1Header {
    pub fn payload_len(&self) -> u64 {
        4 * self.channels as u64 * self.layers as u64 * self.frames as u64
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN + self.payload_len()
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Serializes a stack in LSF1 layout.
pub fn encode_layerstack(x: &LayerStack) -> Result<Vec<u8>> {
    let (c, n, t) = (x.channels(), x.layers(), x.frames());
    let dim = |v: usize| {
        u32::try_from(v)
            .map_err(|_| Error::InvalidTensor(format!("dimension {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * c * n * t);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim(c)?.to_le_bytes());
    out.extend_from_slice(&dim(n)?.to_le_bytes());
    out.extend_from_slice(&dim(t)?.to_le_bytes());
    out.push(DTYPE_F32);
    let data = x.tensor().data();
    for l in 0..n {
        for f in 0..t {
            for ch in 0..c {
                let v = data[ch * n * t + l * t + f] as f32;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_layerstack(x: &LayerStack, path: &Path) -> Result<()> {
    write_atomic(path, &encode_layerstack(x)?)
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Lsf1Header> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let k = bytes.len().min(4);
        found[..k].copy_from_slice(&bytes[..k]);
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: MAGIC,
        });
    }
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            actual: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    if bytes[20] != DTYPE_F32 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: 20,
            msg: format!("unknown dtype tag {}", bytes[20]),
        });
    }
    Ok(Lsf1Header {
        channels: u32_at(bytes, 8),
        layers: u32_at(bytes, 12),
        frames: u32_at(bytes, 16),
    })
}

/// Decodes a complete LSF1 image; `path` only labels errors.
pub fn decode_layerstack(path: &Path, utt_id: &str, bytes: &[u8]) -> Result<LayerStack> {
    let header = parse_header(path, bytes)?;
    let expected = header.file_len();
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let (c, n, t) = (
        header.channels as usize,
        header.layers as usize,
        header.frames as usize,
    );
    if c == 0 || n == 0 || t == 0 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: 8,
            msg: format!("zero dimension in header [{c}, {n}, {t}]"),
        });
    }
    let payload = &bytes[HEADER_LEN as usize..];
    let mut data = vec![0.0; c * n * t];
    for l in 0..n {
        for f in 0..t {
            for ch in 0..c {
                let at = 4 * ((l * t + f) * c + ch);
                let v = f32::from_le_bytes(payload[at..at + 4].try_into().expect("four bytes"));
                if !v.is_finite() {
                    return Err(Error::Corrupt {
                        path: path.to_path_buf(),
                        offset: HEADER_LEN + at as u64,
                        msg: "non-finite value".into(),
                    });
                }
                data[ch * n * t + l * t + f] = v as f64;
            }
        }
    }
    LayerStack::new(utt_id, Tensor::new(vec![c, n, t], data)?)
}

pub fn read_layerstack(path: &Path, utt_id: &str) -> Result<LayerStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_layerstack(path, utt_id, &bytes)
}

/// Reads and validates only the header.
pub fn read_header(path: &Path) -> Result<Lsf1Header> {
    use std::io::Read;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN as usize);
    file.take(HEADER_LEN)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    parse_header(path, &buf)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub utt_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub speaker: String,
    pub num_frames: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: lineno,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(format!(
                    "expected 4 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(err("empty field".into()));
            }
            let num_frames = fields[3]
                .parse::<usize>()
                .map_err(|_| err(format!("bad frame count `{}`", fields[3])))?;
            if !seen.insert(fields[0].to_string()) {
                return Err(err(format!("duplicate utterance id `{}`", fields[0])));
            }
            rows.push(ManifestRow {
                utt_id: fields[0].to_string(),
                path: fields[1].to_string(),
                speaker: fields[2].to_string(),
                num_frames,
            });
        }
        Ok(Self { rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.utt_id, r.path, r.speaker, r.num_frames
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    /// Sorted speaker ids mapped to consecutive class indices.
    pub fn speaker_index(&self) -> BTreeMap<String, usize> {
        let mut ids: Vec<&str> = self.rows.iter().map(|r| r.speaker.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i))
            .collect()
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.utt_id == utt_id)
    }
}

/// Resolves a manifest row's file against the manifest directory.
pub fn resolve(root: &Path, row: &ManifestRow) -> PathBuf {
    root.join(&row.path)
}

/// Loads every stack named in the manifest, in row order.
pub fn load_stacks(manifest: &Manifest, root: &Path) -> Result<Vec<LayerStack>> {
    manifest
        .rows
        .iter()
        .map(|row| {
            let path = resolve(root, row);
            let stack = read_layerstack(&path, &row.utt_id)?;
            if stack.frames() != row.num_frames {
                return Err(Error::Invalid(format!(
                    "{}: manifest says {} frames, file has {}",
                    path.display(),
                    row.num_frames,
                    stack.frames()
                )));
            }
            Ok(stack)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileCheck {
    pub utt_id: String,
    pub problem: Option<String>,
}

impl FileCheck {
    pub fn passed(&self) -> bool {
        self.problem.is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StoreReport {
    pub files: Vec<FileCheck>,
    /// Store-wide problems such as files disagreeing on `C` or `N`.
    pub global: Vec<String>,
}

impl StoreReport {
    pub fn all_pass(&self) -> bool {
        self.global.is_empty() && self.files.iter().all(FileCheck::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &FileCheck> {
        self.files.iter().filter(|f| !f.passed())
    }
}

/// Checks each referenced file's header and length against the manifest and
/// against the rest of the store. Never fails; problems go in the report.
pub fn validate_store(manifest: &Manifest, root: &Path) -> StoreReport {
    let mut report = StoreReport::default();
    let mut shapes: BTreeMap<(u32, u32), Vec<String>> = BTreeMap::new();
    for row in &manifest.rows {
        let path = resolve(root, row);
        let problem = match check_file(&path, row) {
            Ok(h) => {
                shapes
                    .entry((h.channels, h.layers))
                    .or_default()
                    .push(row.utt_id.clone());
                None
            }
            Err(msg) => Some(msg),
        };
        report.files.push(FileCheck {
            utt_id: row.utt_id.clone(),
            problem,
        });
    }
    if shapes.len() > 1 {
        let groups: Vec<String> = shapes
            .iter()
            .map(|((c, n), ids)| format!("C={c} N={n}: {} file(s), first `{}`", ids.len(), ids[0]))
            .collect();
        report.global.push(format!(
            "inconsistent stack shapes across store: {}",
            groups.join("; ")
        ));
    }
    report
}

fn check_file(path: &Path, row: &ManifestRow) -> std::result::Result<Lsf1Header, String> {
    let header = read_header(path).map_err(|e| e.to_string())?;
    let actual = fs::metadata(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .len();
    if actual != header.file_len() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header.file_len(),
            actual,
        }
        .to_string());
    }
    if header.frames as usize != row.num_frames {
        return Err(format!(
            "{}: header has T={}, manifest says {}",
            path.display(),
            header.frames,
            row.num_frames
        ));
    }
    Ok(header)
}
