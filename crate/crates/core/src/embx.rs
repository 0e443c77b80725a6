//! EMBX: a directory holding `manifest.json` plus one raw little-endian,
//! row-major binary file per tensor.
//!
//! An embedding directory carries `fe` `[N, H]` f32 and `labels` `[N]` i64,
//! optionally `logits` `[N, C]` f32. A classifier head directory carries
//! `weights` `[C, H]` f32 and optionally `bias` `[C]` f32.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FORMAT_VERSION: &str = "embx-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LAYOUT: &str = "row-major";
pub const BYTE_ORDER: &str = "little-endian";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub name: String,
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub layout: String,
    pub byte_order: String,
}

impl TensorDecl {
    fn new(name: &str, dtype: Dtype, shape: Vec<usize>) -> Self {
        Self {
            name: name.to_string(),
            file: format!("{name}.bin"),
            dtype,
            shape,
            layout: LAYOUT.to_string(),
            byte_order: BYTE_ORDER.to_string(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.num_elements() as u64 * self.dtype.size() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbxManifest {
    pub format_version: String,
    pub tensors: Vec<TensorDecl>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EmbxManifest {
    pub fn tensor(&self, name: &str) -> Option<&TensorDecl> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_classes(&self) -> Result<Option<usize>> {
        match self.metadata.get("num_classes") {
            None => Ok(None),
            Some(s) => match s.trim().parse::<usize>() {
                Ok(c) if c > 0 => Ok(Some(c)),
                _ => Err(Error::MalformedManifest(format!(
                    "num_classes `{s}` is not a positive integer"
                ))),
            },
        }
    }

    /// Structural checks that do not touch tensor payloads.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::MalformedManifest(format!(
                "format_version `{}`, expected `{FORMAT_VERSION}`",
                self.format_version
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::MalformedManifest(format!("duplicate tensor name `{}`", t.name)));
            }
            if t.layout != LAYOUT {
                return Err(Error::MalformedManifest(format!(
                    "tensor `{}` layout `{}`, expected `{LAYOUT}`",
                    t.name, t.layout
                )));
            }
            if t.byte_order != BYTE_ORDER {
                return Err(Error::MalformedManifest(format!(
                    "tensor `{}` byte_order `{}`, expected `{BYTE_ORDER}`",
                    t.name, t.byte_order
                )));
            }
            if t.shape.is_empty() || t.shape.contains(&0) {
                return Err(Error::MalformedManifest(format!(
                    "tensor `{}` shape {:?} must be non-empty with positive dims",
                    t.name, t.shape
                )));
            }
            let file = Path::new(&t.file);
            if file.is_absolute() || file.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(Error::MalformedManifest(format!(
                    "tensor `{}` file `{}` must be a relative path inside the directory",
                    t.name, t.file
                )));
            }
        }
        self.num_classes()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Other,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Other => "other",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "other" => Ok(Split::Other),
            _ => Err(Error::MalformedManifest(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Downgrade negative feature embeddings from an error to a warning.
    pub allow_signed_fe: bool,
}

/// Feature embeddings of one split, with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    fe: Matrix<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    dataset: Option<String>,
    logits: Option<Matrix<f32>>,
}

impl EmbeddingSet {
    pub fn new(fe: Matrix<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        Self::new_with(fe, labels, num_classes, split, &ReadOptions::default())
    }

    pub fn new_with(
        fe: Matrix<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        opts: &ReadOptions,
    ) -> Result<Self> {
        if fe.rows() == 0 || fe.cols() == 0 {
            return Err(Error::EmptyInput(format!(
                "fe must be at least 1x1, got {}x{}",
                fe.rows(),
                fe.cols()
            )));
        }
        if num_classes == 0 {
            return Err(Error::EmptyInput("num_classes must be positive".into()));
        }
        if labels.len() != fe.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} fe rows",
                labels.len(),
                fe.rows()
            )));
        }
        check_finite("fe", fe.as_slice())?;
        if let Some((idx, &value)) = fe.as_slice().iter().enumerate().find(|(_, v)| **v < 0.0) {
            let (row, col) = (idx / fe.cols(), idx % fe.cols());
            if opts.allow_signed_fe {
                log::warn!("fe[{row}][{col}] = {value} is negative; continuing with signed embeddings");
            } else {
                return Err(Error::NegativeFe { row, col, value });
            }
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, l)| **l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                index,
                label: label as i64,
                num_classes,
            });
        }
        Ok(Self {
            fe,
            labels,
            num_classes,
            split,
            dataset: None,
            logits: None,
        })
    }

    pub fn with_dataset(mut self, dataset: impl Into<String>) -> Self {
        self.dataset = Some(dataset.into());
        self
    }

    /// Attaches logits exported by the training framework.
    pub fn with_logits(mut self, logits: Matrix<f32>) -> Result<Self> {
        if logits.rows() != self.len() || logits.cols() != self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "logits are {}x{}, expected {}x{}",
                logits.rows(),
                logits.cols(),
                self.len(),
                self.num_classes
            )));
        }
        check_finite("logits", logits.as_slice())?;
        self.logits = Some(logits);
        Ok(self)
    }

    pub fn fe(&self) -> &Matrix<f32> {
        &self.fe
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn dataset(&self) -> Option<&str> {
        self.dataset.as_deref()
    }

    pub fn logits(&self) -> Option<&Matrix<f32>> {
        self.logits.as_ref()
    }

    pub fn len(&self) -> usize {
        self.fe.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.fe.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.fe.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Subset of instances, in the given order. Exported logits follow the rows.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("empty instance selection".into()));
        }
        let mut out = Self {
            fe: self.fe.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            dataset: self.dataset.clone(),
            logits: None,
        };
        out.logits = self.logits.as_ref().map(|l| l.select_rows(indices));
        Ok(out)
    }
}

/// Final linear layer: `C x H` weights and an optional bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weights: Matrix<f32>,
    bias: Option<Vec<f32>>,
}

impl ClassifierHead {
    pub fn new(weights: Matrix<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::EmptyInput("weights must be at least 1x1".into()));
        }
        check_finite("weights", weights.as_slice())?;
        if let Some(b) = &bias {
            if b.len() != weights.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "bias has {} entries for {} classes",
                    b.len(),
                    weights.rows()
                )));
            }
            check_finite("bias", b)?;
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &Matrix<f32> {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    /// Bias of class `c`, zero when the head has none.
    #[inline]
    pub fn bias_of(&self, c: usize) -> f64 {
        self.bias.as_ref().map_or(0.0, |b| b[c] as f64)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Contents of an EMBX directory.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbxObject {
    Embeddings(EmbeddingSet),
    Head(ClassifierHead),
}

fn check_finite(name: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            name: name.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

pub fn read_manifest(dir: &Path) -> Result<EmbxManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingManifest(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EmbxManifest = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

fn read_payload(dir: &Path, decl: &TensorDecl) -> Result<Vec<u8>> {
    let path = dir.join(&decl.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != decl.byte_len() {
        return Err(Error::ShapeMismatch {
            name: decl.name.clone(),
            file: path,
            expected: decl.byte_len(),
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn read_f32(dir: &Path, decl: &TensorDecl) -> Result<Vec<f32>> {
    expect_dtype(decl, Dtype::F32)?;
    let bytes = read_payload(dir, decl)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_i64(dir: &Path, decl: &TensorDecl) -> Result<Vec<i64>> {
    expect_dtype(decl, Dtype::I64)?;
    let bytes = read_payload(dir, decl)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn expect_dtype(decl: &TensorDecl, dtype: Dtype) -> Result<()> {
    if decl.dtype != dtype {
        return Err(Error::MalformedManifest(format!(
            "tensor `{}` has dtype {:?}, expected {:?}",
            decl.name, decl.dtype, dtype
        )));
    }
    Ok(())
}

fn expect_rank(decl: &TensorDecl, rank: usize) -> Result<()> {
    if decl.shape.len() != rank {
        return Err(Error::MalformedManifest(format!(
            "tensor `{}` has rank {}, expected {rank}",
            decl.name,
            decl.shape.len()
        )));
    }
    Ok(())
}

/// Loads and validates an EMBX directory.
pub fn read_embx(dir: &Path, opts: &ReadOptions) -> Result<(EmbxManifest, EmbxObject)> {
    let manifest = read_manifest(dir)?;
    let object = match (manifest.tensor("fe"), manifest.tensor("weights")) {
        (Some(_), Some(_)) => {
            return Err(Error::MalformedManifest(
                "directory declares both `fe` and `weights`; store them separately".into(),
            ))
        }
        (Some(fe), None) => EmbxObject::Embeddings(load_embeddings(dir, &manifest, fe, opts)?),
        (None, Some(w)) => EmbxObject::Head(load_head(dir, &manifest, w)?),
        (None, None) => {
            return Err(Error::MalformedManifest(
                "directory declares neither `fe` nor `weights`".into(),
            ))
        }
    };
    Ok((manifest, object))
}

fn load_embeddings(
    dir: &Path,
    manifest: &EmbxManifest,
    fe_decl: &TensorDecl,
    opts: &ReadOptions,
) -> Result<EmbeddingSet> {
    expect_rank(fe_decl, 2)?;
    let labels_decl = manifest
        .tensor("labels")
        .ok_or_else(|| Error::MalformedManifest("`fe` present without `labels`".into()))?;
    expect_rank(labels_decl, 1)?;
    let (n, h) = (fe_decl.shape[0], fe_decl.shape[1]);
    if labels_decl.shape[0] != n {
        return Err(Error::MalformedManifest(format!(
            "`labels` has {} entries for {n} fe rows",
            labels_decl.shape[0]
        )));
    }
    let logits_decl = manifest.tensor("logits");
    if let Some(l) = logits_decl {
        expect_rank(l, 2)?;
        if l.shape[0] != n {
            return Err(Error::MalformedManifest(format!(
                "`logits` has {} rows for {n} fe rows",
                l.shape[0]
            )));
        }
    }

    let fe = Matrix::from_vec(n, h, read_f32(dir, fe_decl)?)?;
    let raw_labels = read_i64(dir, labels_decl)?;
    let logits = logits_decl
        .map(|d| read_f32(dir, d).and_then(|v| Matrix::from_vec(n, d.shape[1], v)))
        .transpose()?;

    let num_classes = match manifest.num_classes()? {
        Some(c) => c,
        None => match &logits {
            Some(l) => l.cols(),
            None => raw_labels.iter().copied().max().unwrap_or(0).max(0) as usize + 1,
        },
    };
    let mut labels = Vec::with_capacity(n);
    for (index, &label) in raw_labels.iter().enumerate() {
        if label < 0 || label as u64 >= num_classes as u64 {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        labels.push(label as usize);
    }
    let split = match manifest.metadata.get("split") {
        Some(s) => s.parse()?,
        None => Split::Other,
    };

    let mut es = EmbeddingSet::new_with(fe, labels, num_classes, split, opts)?;
    if let Some(d) = manifest.metadata.get("dataset") {
        es = es.with_dataset(d.clone());
    }
    if let Some(l) = logits {
        es = es.with_logits(l)?;
    }
    Ok(es)
}

fn load_head(dir: &Path, manifest: &EmbxManifest, w_decl: &TensorDecl) -> Result<ClassifierHead> {
    expect_rank(w_decl, 2)?;
    let (c, h) = (w_decl.shape[0], w_decl.shape[1]);
    if let Some(nc) = manifest.num_classes()? {
        if nc != c {
            return Err(Error::MalformedManifest(format!(
                "num_classes {nc} disagrees with {c} weight rows"
            )));
        }
    }
    let weights = Matrix::from_vec(c, h, read_f32(dir, w_decl)?)?;
    let bias = match manifest.tensor("bias") {
        Some(b) => {
            expect_rank(b, 1)?;
            if b.shape[0] != c {
                return Err(Error::MalformedManifest(format!(
                    "`bias` has {} entries for {c} classes",
                    b.shape[0]
                )));
            }
            Some(read_f32(dir, b)?)
        }
        None => None,
    };
    ClassifierHead::new(weights, bias)
}

pub fn read_embeddings(dir: &Path, opts: &ReadOptions) -> Result<EmbeddingSet> {
    match read_embx(dir, opts)?.1 {
        EmbxObject::Embeddings(es) => Ok(es),
        EmbxObject::Head(_) => Err(Error::MalformedManifest(format!(
            "{} holds a classifier head, expected embeddings",
            dir.display()
        ))),
    }
}

pub fn read_head(dir: &Path) -> Result<ClassifierHead> {
    match read_embx(dir, &ReadOptions::default())?.1 {
        EmbxObject::Head(h) => Ok(h),
        EmbxObject::Embeddings(_) => Err(Error::MalformedManifest(format!(
            "{} holds embeddings, expected a classifier head",
            dir.display()
        ))),
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_manifest(dir: &Path, manifest: &EmbxManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// Writes `obj` into `dir` (created if needed) and returns the directory path.
pub fn write_embx(obj: &EmbxObject, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::new();
    match obj {
        EmbxObject::Embeddings(es) => {
            let (n, h) = (es.len(), es.dim());
            let fe = TensorDecl::new("fe", Dtype::F32, vec![n, h]);
            write_file(&dir.join(&fe.file), &f32_bytes(es.fe().as_slice()))?;
            tensors.push(fe);

            let labels = TensorDecl::new("labels", Dtype::I64, vec![n]);
            let bytes: Vec<u8> = es.labels().iter().flat_map(|&l| (l as i64).to_le_bytes()).collect();
            write_file(&dir.join(&labels.file), &bytes)?;
            tensors.push(labels);

            if let Some(l) = es.logits() {
                let decl = TensorDecl::new("logits", Dtype::F32, vec![n, l.cols()]);
                write_file(&dir.join(&decl.file), &f32_bytes(l.as_slice()))?;
                tensors.push(decl);
            }
            metadata.insert("num_classes".into(), es.num_classes().to_string());
            metadata.insert("split".into(), es.split().to_string());
            if let Some(d) = es.dataset() {
                metadata.insert("dataset".into(), d.to_string());
            }
        }
        EmbxObject::Head(head) => {
            let w = TensorDecl::new("weights", Dtype::F32, vec![head.num_classes(), head.dim()]);
            write_file(&dir.join(&w.file), &f32_bytes(head.weights().as_slice()))?;
            tensors.push(w);
            if let Some(b) = head.bias() {
                let decl = TensorDecl::new("bias", Dtype::F32, vec![b.len()]);
                write_file(&dir.join(&decl.file), &f32_bytes(b))?;
                tensors.push(decl);
            }
            metadata.insert("num_classes".into(), head.num_classes().to_string());
        }
    }
    let manifest = EmbxManifest {
        format_version: FORMAT_VERSION.to_string(),
        tensors,
        metadata,
    };
    write_manifest(dir, &manifest)?;
    Ok(dir.to_path_buf())
}

pub fn write_embeddings(es: &EmbeddingSet, dir: &Path) -> Result<PathBuf> {
    write_embx(&EmbxObject::Embeddings(es.clone()), dir)
}

pub fn write_head(head: &ClassifierHead, dir: &Path) -> Result<PathBuf> {
    write_embx(&EmbxObject::Head(head.clone()), dir)
}
