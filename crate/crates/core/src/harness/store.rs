//! On-disk episode store: a JSON manifest plus one little-endian value blob
//! and one float64 timestamp blob per stream.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::sim::{Failure, TaskId, TaskSpec};

use super::{io_err, HarnessError};

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamDtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "f64le")]
    F64Le,
}

impl StreamDtype {
    pub fn size(self) -> usize {
        match self {
            StreamDtype::F32Le => 4,
            StreamDtype::F64Le => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamDesc {
    pub name: String,
    pub dtype: StreamDtype,
    /// Shape of one row.
    pub shape: Vec<usize>,
    pub rate_hz: f64,
    pub rows: usize,
    pub data_file: String,
    pub time_file: String,
}

impl StreamDesc {
    pub fn row_len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub index: usize,
    pub seed: u64,
    pub frames: usize,
    pub success: bool,
    pub failure: Option<Failure>,
    /// `[start, end)` of every injected force spike, in seconds.
    pub spikes: Vec<[f64; 2]>,
    pub streams: Vec<StreamDesc>,
}

impl EpisodeMeta {
    pub fn stream(&self, name: &str) -> Option<&StreamDesc> {
        self.streams.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub schema_version: u32,
    pub task: TaskId,
    pub spec: TaskSpec,
    pub episodes: Vec<EpisodeMeta>,
}

/// Values of one stream, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl StreamValues {
    pub fn dtype(&self) -> StreamDtype {
        match self {
            StreamValues::F32(_) => StreamDtype::F32Le,
            StreamValues::F64(_) => StreamDtype::F64Le,
        }
    }

    fn len(&self) -> usize {
        match self {
            StreamValues::F32(v) => v.len(),
            StreamValues::F64(v) => v.len(),
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            StreamValues::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            StreamValues::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamData {
    pub name: String,
    pub shape: Vec<usize>,
    pub rate_hz: f64,
    pub times: Vec<f64>,
    pub values: StreamValues,
}

/// Episode store rooted at a directory. Reads are counted per stream name so
/// callers can verify which modalities a consumer touched.
#[derive(Debug)]
pub struct EpisodeStore {
    root: PathBuf,
    manifest: StoreManifest,
    bytes_read: Mutex<BTreeMap<String, u64>>,
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl EpisodeStore {
    /// Creates an empty store, replacing any manifest already in `root`.
    pub fn create(root: &Path, task: TaskId, spec: TaskSpec) -> Result<Self, HarnessError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let store = Self {
            root: root.to_path_buf(),
            manifest: StoreManifest { schema_version: SCHEMA_VERSION, task, spec, episodes: Vec::new() },
            bytes_read: Mutex::new(BTreeMap::new()),
        };
        store.write_manifest()?;
        Ok(store)
    }

    pub fn open(root: &Path) -> Result<Self, HarnessError> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: StoreManifest =
            serde_json::from_str(&text).map_err(|e| HarnessError::Store { path: path.clone(), msg: e.to_string() })?;
        let store = Self { root: root.to_path_buf(), manifest, bytes_read: Mutex::new(BTreeMap::new()) };
        store.check()?;
        Ok(store)
    }

    fn malformed(&self, msg: String) -> HarnessError {
        HarnessError::Store { path: self.root.clone(), msg }
    }

    /// Verifies schema version and that every blob has the declared size.
    fn check(&self) -> Result<(), HarnessError> {
        if self.manifest.schema_version != SCHEMA_VERSION {
            return Err(self.malformed(format!("schema version {} (expected {SCHEMA_VERSION})", self.manifest.schema_version)));
        }
        let mut files = std::collections::BTreeSet::new();
        for ep in &self.manifest.episodes {
            for s in &ep.streams {
                for (file, want) in [(&s.data_file, s.rows * s.row_len() * s.dtype.size()), (&s.time_file, s.rows * 8)] {
                    if !files.insert(file.clone()) {
                        return Err(self.malformed(format!("file {file} referenced twice")));
                    }
                    let path = self.root.join(file);
                    let len = fs::metadata(&path).map_err(io_err(&path))?.len() as usize;
                    if len != want {
                        return Err(self.malformed(format!("{file}: {len} bytes, expected {want}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn write_manifest(&self) -> Result<(), HarnessError> {
        let path = self.root.join(MANIFEST);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(io_err(&path))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.episodes.is_empty()
    }

    pub fn episode(&self, i: usize) -> &EpisodeMeta {
        &self.manifest.episodes[i]
    }

    /// Writes one episode's streams and records it in the manifest.
    pub fn append(&mut self, mut meta: EpisodeMeta, streams: &[StreamData]) -> Result<(), HarnessError> {
        let index = self.manifest.episodes.len();
        let dir = format!("ep{index:05}");
        fs::create_dir_all(self.root.join(&dir)).map_err(io_err(&self.root.join(&dir)))?;
        meta.index = index;
        meta.streams.clear();
        for s in streams {
            let row_len: usize = s.shape.iter().product();
            if row_len == 0 || s.values.len() != s.times.len() * row_len {
                return Err(self.malformed(format!("stream {}: {} values for {} rows of {row_len}", s.name, s.values.len(), s.times.len())));
            }
            if s.times.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(self.malformed(format!("stream {}: timestamps not strictly increasing", s.name)));
            }
            let desc = StreamDesc {
                name: s.name.clone(),
                dtype: s.values.dtype(),
                shape: s.shape.clone(),
                rate_hz: s.rate_hz,
                rows: s.times.len(),
                data_file: format!("{dir}/{}.bin", s.name),
                time_file: format!("{dir}/{}.t.bin", s.name),
            };
            let data_path = self.root.join(&desc.data_file);
            fs::write(&data_path, s.values.to_le_bytes()).map_err(io_err(&data_path))?;
            let time_path = self.root.join(&desc.time_file);
            fs::write(&time_path, f64s_to_bytes(&s.times)).map_err(io_err(&time_path))?;
            meta.streams.push(desc);
        }
        self.manifest.episodes.push(meta);
        self.write_manifest()
    }

    fn read_file(&self, name: &str, file: &str) -> Result<Vec<u8>, HarnessError> {
        let path = self.root.join(file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        *self.bytes_read.lock().expect("byte counter").entry(name.to_string()).or_insert(0) += bytes.len() as u64;
        Ok(bytes)
    }

    /// Reads one stream of episode `ep`.
    pub fn read(&self, ep: usize, name: &str) -> Result<StreamData, HarnessError> {
        let meta = self.manifest.episodes.get(ep).ok_or_else(|| self.malformed(format!("no episode {ep}")))?;
        let desc = meta.stream(name).ok_or_else(|| self.malformed(format!("episode {ep} has no stream {name}")))?;
        let raw = self.read_file(name, &desc.data_file)?;
        let values = match desc.dtype {
            StreamDtype::F32Le => StreamValues::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            StreamDtype::F64Le => StreamValues::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        let traw = self.read_file(name, &desc.time_file)?;
        let times: Vec<f64> = traw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(self.malformed(format!("episode {ep} stream {name}: timestamps not strictly increasing")));
        }
        Ok(StreamData { name: name.to_string(), shape: desc.shape.clone(), rate_hz: desc.rate_hz, times, values })
    }

    /// Reads an f32 stream as `(times, rows)` with rows of the stream's width.
    pub fn read_f32(&self, ep: usize, name: &str) -> Result<(Vec<f64>, Vec<f32>), HarnessError> {
        match self.read(ep, name)? {
            StreamData { times, values: StreamValues::F32(v), .. } => Ok((times, v)),
            _ => Err(self.malformed(format!("stream {name} is not f32le"))),
        }
    }

    pub fn read_f64(&self, ep: usize, name: &str) -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
        match self.read(ep, name)? {
            StreamData { times, values: StreamValues::F64(v), .. } => Ok((times, v)),
            _ => Err(self.malformed(format!("stream {name} is not f64le"))),
        }
    }

    /// Total bytes read so far from streams called `name`.
    pub fn bytes_read(&self, name: &str) -> u64 {
        self.bytes_read.lock().expect("byte counter").get(name).copied().unwrap_or(0)
    }

    /// Re-writes every episode into a new store at `dest`.
    pub fn copy_to(&self, dest: &Path) -> Result<EpisodeStore, HarnessError> {
        let mut out = EpisodeStore::create(dest, self.manifest.task, self.manifest.spec.clone())?;
        for (i, meta) in self.manifest.episodes.iter().enumerate() {
            let streams = meta.streams.iter().map(|s| self.read(i, &s.name)).collect::<Result<Vec<_>, _>>()?;
            out.append(meta.clone(), &streams)?;
        }
        Ok(out)
    }
}
