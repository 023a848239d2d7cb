//! On-disk tensor bundles: a `manifest.json` plus one raw little-endian,
//! row-major payload file per tensor.
//!
//! ```text
//! {"version":1,"dtype":"f32","config":{...},
//!  "tensors":[{"name":"blocks.0.attn.W_Q.0","shape":[64,768],"file":"t/0.bin"}],
//!  "metadata":{"pattern_base_len":100,"pattern_n_seq":8},
//!  "vocab":"vocab.json"}
//! ```
//!
//! Payloads are read lazily, one tensor at a time, and always widened to `f64`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl FromStr for DType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn new(d_model: usize, d_head: usize, n_layers: usize, n_heads: usize) -> Result<Self> {
        let config = ModelConfig {
            d_model,
            d_head,
            n_layers,
            n_heads,
            vocab_size: 0,
        };
        config.validate()?;
        Ok(config)
    }

    /// GPT2-small dimensions.
    pub fn gpt2_small() -> Self {
        ModelConfig {
            d_model: 768,
            d_head: 64,
            n_layers: 12,
            n_heads: 12,
            vocab_size: 50257,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_head == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        if self.d_head > self.d_model {
            return Err(Error::InvalidConfig(format!(
                "d_head {} exceeds d_model {}",
                self.d_head, self.d_model
            )));
        }
        Ok(())
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// All heads in layer-major order.
    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.n_layers)
            .flat_map(move |layer| (0..self.n_heads).map(move |head| HeadId::new(layer, head)))
    }

    pub fn head_index(&self, head: HeadId) -> usize {
        head.layer * self.n_heads + head.head
    }

    pub fn check_head(&self, head: HeadId) -> Result<()> {
        if head.layer >= self.n_layers || head.head >= self.n_heads {
            return Err(Error::OutOfRange(format!(
                "head {head} (model has {} layers x {} heads)",
                self.n_layers, self.n_heads
            )));
        }
        Ok(())
    }
}

/// A (layer, head) address, displayed as `L{layer}H{head}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::MalformedHeadId(s.to_string());
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, head) = rest.split_once('H').ok_or_else(bad)?;
        let layer = layer.parse().map_err(|_| bad())?;
        let head = head.parse().map_err(|_| bad())?;
        Ok(HeadId { layer, head })
    }
}

impl Serialize for HeadId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WType {
    Q,
    K,
    V,
    O,
}

impl WType {
    pub const ALL: [WType; 4] = [WType::Q, WType::K, WType::V, WType::O];

    pub fn letter(self) -> char {
        match self {
            WType::Q => 'Q',
            WType::K => 'K',
            WType::V => 'V',
            WType::O => 'O',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'Q' => Some(WType::Q),
            'K' => Some(WType::K),
            'V' => Some(WType::V),
            'O' => Some(WType::O),
            _ => None,
        }
    }
}

impl fmt::Display for WType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for WType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next().and_then(WType::from_letter), chars.next()) {
            (Some(w), None) => Ok(w),
            _ => Err(Error::InvalidArgument(format!("unknown weight type `{s}`"))),
        }
    }
}

/// Address of one d_model x d_head column-subspace generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WeightRef {
    pub head: HeadId,
    pub wtype: WType,
}

impl WeightRef {
    pub const fn new(layer: usize, head: usize, wtype: WType) -> Self {
        WeightRef {
            head: HeadId::new(layer, head),
            wtype,
        }
    }
}

impl fmt::Display for WeightRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.head, self.wtype)
    }
}

pub mod names {
    //! Tensor naming convention inside a bundle.
    use super::{HeadId, WType};

    pub fn weight(head: HeadId, wtype: WType) -> String {
        format!("blocks.{}.attn.W_{}.{}", head.layer, wtype.letter(), head.head)
    }

    pub fn bias(head: HeadId, wtype: WType) -> String {
        format!("blocks.{}.attn.b_{}.{}", head.layer, wtype.letter(), head.head)
    }

    pub fn ln1_gamma(layer: usize) -> String {
        format!("blocks.{layer}.ln1.gamma")
    }

    pub fn ln1_beta(layer: usize) -> String {
        format!("blocks.{layer}.ln1.beta")
    }

    pub const LN_FINAL_GAMMA: &str = "ln_final.gamma";
    pub const LN_FINAL_BETA: &str = "ln_final.beta";
    pub const UNEMBED: &str = "unembed.W_U";

    pub fn pattern(seq: usize, head: HeadId) -> String {
        format!("patterns.{seq}.{}.{}", head.layer, head.head)
    }

    pub const META_PATTERN_BASE_LEN: &str = "pattern_base_len";
    pub const META_PATTERN_N_SEQ: &str = "pattern_n_seq";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<DType>,
}

impl TensorEntry {
    pub fn n_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: DType,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
}

/// A dense row-major tensor widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn into_matrix(self, name: &str) -> Result<DMatrix<f64>> {
        match self.shape.as_slice() {
            [rows, cols] => Ok(DMatrix::from_row_slice(*rows, *cols, &self.data)),
            _ => Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: vec![0, 0],
                actual: self.shape,
            }),
        }
    }

    pub fn into_vector(self, name: &str) -> Result<DVector<f64>> {
        match self.shape.as_slice() {
            [_] => Ok(DVector::from_vec(self.data)),
            _ => Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: vec![0],
                actual: self.shape,
            }),
        }
    }
}

/// A validated bundle. Immutable after load; payloads are read on demand.
#[derive(Debug, Clone)]
pub struct TensorBundle {
    root: PathBuf,
    manifest: Manifest,
    index: HashMap<String, usize>,
}

pub fn load_bundle(root: impl AsRef<Path>) -> Result<TensorBundle> {
    TensorBundle::open(root)
}

impl TensorBundle {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::MissingManifest(manifest_path));
        }
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        // Parse untyped first so an unknown dtype is reported as such.
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
                path: manifest_path.clone(),
                reason: e.to_string(),
            })?;
        check_dtypes(&raw)?;
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| Error::MalformedManifest {
                path: manifest_path.clone(),
                reason: e.to_string(),
            })?;
        Self::from_manifest(root, manifest)
    }

    fn from_manifest(root: PathBuf, manifest: Manifest) -> Result<Self> {
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::MalformedManifest {
                path: root.join(MANIFEST_FILE),
                reason: format!("unsupported version {}", manifest.version),
            });
        }
        manifest.config.validate()?;
        let mut index = HashMap::with_capacity(manifest.tensors.len());
        for (i, entry) in manifest.tensors.iter().enumerate() {
            if index.insert(entry.name.clone(), i).is_some() {
                return Err(Error::DuplicateTensor(entry.name.clone()));
            }
            let dtype = entry.dtype.unwrap_or(manifest.dtype);
            let expected = (entry.n_elements() * dtype.width()) as u64;
            let path = root.join(&entry.file);
            let actual = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
            if actual != expected {
                return Err(Error::ByteLength {
                    name: entry.name.clone(),
                    expected,
                    actual,
                });
            }
        }
        Ok(TensorBundle {
            root,
            manifest,
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn config(&self) -> &ModelConfig {
        &self.manifest.config
    }

    pub fn len(&self) -> usize {
        self.manifest.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.index
            .get(name)
            .map(|&i| &self.manifest.tensors[i])
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn dtype_of(&self, name: &str) -> Result<DType> {
        Ok(self.entry(name)?.dtype.unwrap_or(self.manifest.dtype))
    }

    pub fn metadata_usize(&self, key: &str) -> Option<usize> {
        self.manifest
            .metadata
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
    }

    pub fn read_raw(&self, name: &str) -> Result<Vec<u8>> {
        let entry = self.entry(name)?;
        let path = self.root.join(&entry.file);
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn read_tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self.entry(name)?;
        let dtype = entry.dtype.unwrap_or(self.manifest.dtype);
        let bytes = self.read_raw(name)?;
        let expected = entry.n_elements() * dtype.width();
        if bytes.len() != expected {
            return Err(Error::ByteLength {
                name: name.to_string(),
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        Ok(Tensor {
            shape: entry.shape.clone(),
            data: decode(&bytes, dtype),
        })
    }

    /// Reads a 2-D tensor and checks its shape.
    pub fn read_matrix(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let entry = self.entry(name)?;
        if entry.shape != [rows, cols] {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: vec![rows, cols],
                actual: entry.shape.clone(),
            });
        }
        self.read_tensor(name)?.into_matrix(name)
    }

    pub fn read_vector(&self, name: &str, len: usize) -> Result<DVector<f64>> {
        let entry = self.entry(name)?;
        if entry.shape != [len] {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: vec![len],
                actual: entry.shape.clone(),
            });
        }
        self.read_tensor(name)?.into_vector(name)
    }

    /// The column-subspace generator of `weight`: stored Q/K/V (d_head x d)
    /// are transposed, O (d x d_head) is returned as stored.
    pub fn get_weight(&self, weight: WeightRef) -> Result<DMatrix<f64>> {
        let cfg = self.config();
        cfg.check_head(weight.head)?;
        let name = names::weight(weight.head, weight.wtype);
        match weight.wtype {
            WType::O => self.read_matrix(&name, cfg.d_model, cfg.d_head),
            _ => Ok(self.read_matrix(&name, cfg.d_head, cfg.d_model)?.transpose()),
        }
    }

    /// Stored orientation: Q/K/V as d_head x d, O as d x d_head.
    pub fn get_stored_weight(&self, head: HeadId, wtype: WType) -> Result<DMatrix<f64>> {
        let cfg = self.config();
        cfg.check_head(head)?;
        let name = names::weight(head, wtype);
        match wtype {
            WType::O => self.read_matrix(&name, cfg.d_model, cfg.d_head),
            _ => self.read_matrix(&name, cfg.d_head, cfg.d_model),
        }
    }

    pub fn vocab(&self) -> Result<Option<Vec<String>>> {
        let Some(file) = &self.manifest.vocab else {
            return Ok(None);
        };
        let path = self.root.join(file);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let vocab: Vec<String> = serde_json::from_str(&text)?;
        Ok(Some(vocab))
    }
}

fn check_dtypes(raw: &serde_json::Value) -> Result<()> {
    let mut dtypes = vec![raw.get("dtype")];
    if let Some(tensors) = raw.get("tensors").and_then(|t| t.as_array()) {
        dtypes.extend(tensors.iter().map(|t| t.get("dtype")));
    }
    for d in dtypes.into_iter().flatten() {
        if let Some(s) = d.as_str() {
            s.parse::<DType>()?;
        }
    }
    Ok(())
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    }
}

fn encode(values: &[f64], dtype: DType) -> Vec<u8> {
    match dtype {
        DType::F32 => values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect(),
        DType::F64 => values.iter().flat_map(|&v| v.to_le_bytes()).collect(),
    }
}

/// Row-major flattening of a matrix.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Incrementally writes a bundle directory. Payload files go under `t/`.
pub struct BundleWriter {
    root: PathBuf,
    manifest: Manifest,
    names: BTreeSet<String>,
}

impl BundleWriter {
    pub fn create(root: impl AsRef<Path>, config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let root = root.as_ref().to_path_buf();
        let dir = root.join("t");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(BundleWriter {
            root,
            manifest: Manifest {
                version: MANIFEST_VERSION,
                dtype,
                config,
                tensors: Vec::new(),
                metadata: BTreeMap::new(),
                vocab: None,
            },
            names: BTreeSet::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn add_raw(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        dtype: DType,
        bytes: &[u8],
    ) -> Result<()> {
        let expected = shape.iter().product::<usize>() * dtype.width();
        if bytes.len() != expected {
            return Err(Error::ByteLength {
                name: name.to_string(),
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        if !self.names.insert(name.to_string()) {
            return Err(Error::DuplicateTensor(name.to_string()));
        }
        let file = format!("t/{}.bin", self.manifest.tensors.len());
        let path = self.root.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            file,
            dtype: (dtype != self.manifest.dtype).then_some(dtype),
        });
        Ok(())
    }

    /// Adds a tensor in the bundle's default dtype.
    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: &[f64]) -> Result<()> {
        let dtype = self.manifest.dtype;
        self.add_raw(name, shape, dtype, &encode(values, dtype))
    }

    pub fn add_matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        self.add(name, vec![m.nrows(), m.ncols()], &row_major(m))
    }

    pub fn add_vector(&mut self, name: &str, v: &DVector<f64>) -> Result<()> {
        self.add(name, vec![v.len()], v.as_slice())
    }

    /// Adds a head weight in stored orientation.
    pub fn add_weight(&mut self, head: HeadId, wtype: WType, stored: &DMatrix<f64>) -> Result<()> {
        self.add_matrix(&names::weight(head, wtype), stored)
    }

    pub fn set_metadata(&mut self, key: &str, value: serde_json::Value) {
        self.manifest.metadata.insert(key.to_string(), value);
    }

    pub fn set_vocab(&mut self, vocab: &[String]) -> Result<()> {
        let file = "vocab.json";
        let path = self.root.join(file);
        fs::write(&path, serde_json::to_vec(vocab)?).map_err(|e| Error::io(&path, e))?;
        self.manifest.vocab = Some(file.to_string());
        Ok(())
    }

    pub fn set_vocab_size(&mut self, vocab_size: usize) {
        self.manifest.config.vocab_size = vocab_size;
    }

    pub fn finish(self) -> Result<TensorBundle> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        TensorBundle::open(&self.root)
    }
}

/// Copies a bundle tensor by tensor; payload bytes are reproduced exactly.
pub fn write_bundle(bundle: &TensorBundle, out: impl AsRef<Path>) -> Result<TensorBundle> {
    let m = bundle.manifest();
    let mut writer = BundleWriter::create(out, m.config, m.dtype)?;
    for entry in &m.tensors {
        let dtype = entry.dtype.unwrap_or(m.dtype);
        writer.add_raw(&entry.name, entry.shape.clone(), dtype, &bundle.read_raw(&entry.name)?)?;
    }
    for (k, v) in &m.metadata {
        writer.set_metadata(k, v.clone());
    }
    if let Some(vocab) = bundle.vocab()? {
        writer.set_vocab(&vocab)?;
    }
    writer.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeadClass {
    Duplicate,
    Previous,
    Induction,
    NameMover,
    NegativeNameMover,
    BackupNameMover,
    SInhibition,
    Identity,
}

impl HeadClass {
    pub const ALL: [HeadClass; 8] = [
        HeadClass::Duplicate,
        HeadClass::Previous,
        HeadClass::Induction,
        HeadClass::NameMover,
        HeadClass::NegativeNameMover,
        HeadClass::BackupNameMover,
        HeadClass::SInhibition,
        HeadClass::Identity,
    ];

    /// The seven functional classes; Identity is a separate hub annotation.
    pub const FUNCTIONAL: [HeadClass; 7] = [
        HeadClass::Duplicate,
        HeadClass::Previous,
        HeadClass::Induction,
        HeadClass::NameMover,
        HeadClass::NegativeNameMover,
        HeadClass::BackupNameMover,
        HeadClass::SInhibition,
    ];

    pub fn label(self) -> &'static str {
        match self {
            HeadClass::Duplicate => "Duplicate",
            HeadClass::Previous => "Previous",
            HeadClass::Induction => "Induction",
            HeadClass::NameMover => "NameMover",
            HeadClass::NegativeNameMover => "NegativeNameMover",
            HeadClass::BackupNameMover => "BackupNameMover",
            HeadClass::SInhibition => "SInhibition",
            HeadClass::Identity => "Identity",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            HeadClass::Duplicate => "Dup",
            HeadClass::Previous => "Prev",
            HeadClass::Induction => "Ind",
            HeadClass::NameMover => "NM",
            HeadClass::NegativeNameMover => "N-NM",
            HeadClass::BackupNameMover => "B-NM",
            HeadClass::SInhibition => "S-Inh",
            HeadClass::Identity => "Id",
        }
    }
}

impl FromStr for HeadClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        HeadClass::ALL
            .into_iter()
            .find(|c| c.label() == s || c.short() == s)
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

impl fmt::Display for HeadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Head-class label -> set of heads. A head may carry several labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeadClassAnnotations {
    pub classes: BTreeMap<HeadClass, BTreeSet<HeadId>>,
}

/// Final GPT2-small head classes (36 functional heads).
pub const GPT2_SMALL_ANNOTATIONS: &str = include_str!("../data/gpt2_small_head_classes.json");
/// IOI-circuit classes before top-10 Previous/Induction augmentation.
pub const GPT2_SMALL_IOI_BASE: &str = include_str!("../data/gpt2_small_ioi_base.json");

impl HeadClassAnnotations {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)
            .map_err(|e| Error::MalformedAnnotations(e.to_string()))?;
        let mut classes = BTreeMap::new();
        for (label, heads) in raw {
            let class: HeadClass = label.parse()?;
            let set = heads
                .iter()
                .map(|h| h.parse::<HeadId>())
                .collect::<Result<BTreeSet<_>>>()?;
            classes.entry(class).or_insert_with(BTreeSet::new).extend(set);
        }
        Ok(HeadClassAnnotations { classes })
    }

    pub fn to_json(&self) -> Result<String> {
        let raw: BTreeMap<&str, Vec<String>> = self
            .classes
            .iter()
            .map(|(c, hs)| (c.label(), hs.iter().map(|h| h.to_string()).collect()))
            .collect();
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn gpt2_small() -> Self {
        Self::from_json(GPT2_SMALL_ANNOTATIONS).expect("shipped annotations parse")
    }

    pub fn gpt2_small_ioi_base() -> Self {
        Self::from_json(GPT2_SMALL_IOI_BASE).expect("shipped annotations parse")
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for heads in self.classes.values() {
            for &h in heads {
                config.check_head(h)?;
            }
        }
        Ok(())
    }

    pub fn heads(&self, class: HeadClass) -> BTreeSet<HeadId> {
        self.classes.get(&class).cloned().unwrap_or_default()
    }

    pub fn classes_of(&self, head: HeadId) -> Vec<HeadClass> {
        self.classes
            .iter()
            .filter(|(_, hs)| hs.contains(&head))
            .map(|(c, _)| *c)
            .collect()
    }

    /// Distinct heads in any functional (non-Identity) class.
    pub fn functional_heads(&self) -> BTreeSet<HeadId> {
        self.classes
            .iter()
            .filter(|(c, _)| **c != HeadClass::Identity)
            .flat_map(|(_, hs)| hs.iter().copied())
            .collect()
    }

    pub fn insert(&mut self, class: HeadClass, head: HeadId) {
        self.classes.entry(class).or_default().insert(head);
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<HeadClassAnnotations> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    HeadClassAnnotations::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_bundle(dir: &Path, payload_len: usize) {
        fs::create_dir_all(dir.join("t")).unwrap();
        fs::write(dir.join("t/x.bin"), vec![0u8; payload_len]).unwrap();
        let manifest = serde_json::json!({
            "version": 1, "dtype": "f32",
            "config": {"d_model": 3, "d_head": 2, "n_layers": 1, "n_heads": 1},
            "tensors": [{"name": "x", "shape": [2, 3], "file": "t/x.bin"}]
        });
        fs::write(dir.join(MANIFEST_FILE), manifest.to_string()).unwrap();
    }

    #[test]
    fn minimal_bundle_loads() {
        let dir = tempfile::tempdir().unwrap();
        minimal_bundle(dir.path(), 24);
        let b = load_bundle(dir.path()).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.read_tensor("x").unwrap().data, vec![0.0; 6]);
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        minimal_bundle(dir.path(), 23);
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::ByteLength { expected: 24, actual: 23, .. })
        ));
    }

    #[test]
    fn missing_and_malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::MissingManifest(_))));
        fs::write(dir.path().join(MANIFEST_FILE), "{not json").unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::MalformedManifest { .. })
        ));
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        minimal_bundle(dir.path(), 24);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), text.replace("\"f32\"", "\"bf16\"")).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::UnknownDtype(d)) if d == "bf16"));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        minimal_bundle(dir.path(), 24);
        let manifest = serde_json::json!({
            "version": 1, "dtype": "f32",
            "config": {"d_model": 3, "d_head": 2, "n_layers": 1, "n_heads": 1},
            "tensors": [{"name": "x", "shape": [2, 3], "file": "t/x.bin"},
                        {"name": "x", "shape": [2, 3], "file": "t/x.bin"}]
        });
        fs::write(dir.path().join(MANIFEST_FILE), manifest.to_string()).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::DuplicateTensor(_))));
    }

    #[test]
    fn head_id_round_trip_and_errors() {
        let h: HeadId = "L10H7".parse().unwrap();
        assert_eq!(h, HeadId::new(10, 7));
        assert_eq!(h.to_string(), "L10H7");
        for bad in ["10H7", "L10", "LxH1", "L1H", ""] {
            assert!(matches!(bad.parse::<HeadId>(), Err(Error::MalformedHeadId(_))));
        }
    }

    #[test]
    fn get_weight_orientation_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::new(4, 2, 1, 1).unwrap();
        let mut w = BundleWriter::create(dir.path(), cfg, DType::F64).unwrap();
        let w_o = DMatrix::<f64>::identity(4, 2);
        let w_q = DMatrix::from_row_slice(2, 4, &[1., 2., 3., 4., 5., 6., 7., 8.]);
        w.add_weight(HeadId::new(0, 0), WType::O, &w_o).unwrap();
        w.add_weight(HeadId::new(0, 0), WType::Q, &w_q).unwrap();
        let b = w.finish().unwrap();
        assert_eq!(b.get_weight(WeightRef::new(0, 0, WType::O)).unwrap(), w_o);
        let q = b.get_weight(WeightRef::new(0, 0, WType::Q)).unwrap();
        assert_eq!(q.shape(), (4, 2));
        assert_eq!(q, w_q.transpose());
        assert!(matches!(
            b.get_weight(WeightRef::new(1, 0, WType::Q)),
            Err(Error::OutOfRange(_))
        ));
        assert!(matches!(
            b.get_weight(WeightRef::new(0, 0, WType::K)),
            Err(Error::MissingTensor(_))
        ));
    }

    #[test]
    fn shipped_annotations() {
        let ann = HeadClassAnnotations::gpt2_small();
        ann.validate(&ModelConfig::gpt2_small()).unwrap();
        assert_eq!(ann.functional_heads().len(), 36);
        let counts: Vec<usize> = HeadClass::FUNCTIONAL
            .iter()
            .map(|c| ann.heads(*c).len())
            .collect();
        assert_eq!(counts, vec![3, 10, 6, 3, 2, 8, 4]);
        let dup: Vec<String> = ann
            .heads(HeadClass::Duplicate)
            .iter()
            .map(|h| h.to_string())
            .collect();
        assert_eq!(dup, ["L0H1", "L0H5", "L3H0"]);
        // L0H1 is both a Duplicate Token Head and an Identity Head.
        let l0h1 = ann.classes_of(HeadId::new(0, 1));
        assert!(l0h1.contains(&HeadClass::Duplicate) && l0h1.contains(&HeadClass::Identity));
    }

    #[test]
    fn annotation_errors_and_empty() {
        assert!(HeadClassAnnotations::from_json("{}").unwrap().functional_heads().is_empty());
        assert!(matches!(
            HeadClassAnnotations::from_json(r#"{"Bogus": ["L0H0"]}"#),
            Err(Error::UnknownClass(_))
        ));
        assert!(matches!(
            HeadClassAnnotations::from_json(r#"{"Duplicate": ["0.0"]}"#),
            Err(Error::MalformedHeadId(_))
        ));
        let ann = HeadClassAnnotations::from_json(r#"{"Duplicate": ["L12H0"]}"#).unwrap();
        assert!(ann.validate(&ModelConfig::gpt2_small()).is_err());
    }
}
