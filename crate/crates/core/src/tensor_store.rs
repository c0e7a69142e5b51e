//! Activation containers and on-disk formats.
//!
//! A dataset is a directory holding `manifest.txt` plus one tensor file per
//! layer with all samples of that layer concatenated. Tensor files are raw
//! little-endian `f32` in C order, or NPY v1.0 arrays of shape `(N, P, Q, K)`;
//! either way only the header is inspected until a tensor is requested.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::bitplane::{InitQuantizerSpec, QuantizerKind};
use crate::bottleneck::{LossReference, QuantScheme};
use crate::kvtext::{KvDocument, KvWriter};
use crate::solver::CoefficientVector;
use crate::{hexfloat, npy, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_VERSION: u32 = 1;
pub const SCHEME_VERSION: u32 = 1;

/// Spatial extent of one activation block: height `P`, width `Q`, feature
/// maps `K`. Elements are laid out with `k` varying fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "dimensions must be positive, got {height},{width},{channels}"
            )));
        }
        Ok(Shape {
            height,
            width,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_index(&self, p: usize, q: usize, k: usize) -> usize {
        (p * self.width + q) * self.channels + k
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.height, self.width, self.channels)
    }
}

/// One activation block `X_i^(l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub layer_id: usize,
    pub sample_id: usize,
    pub shape: Shape,
    values: Vec<f32>,
}

impl ActivationTensor {
    pub fn new(layer_id: usize, sample_id: usize, shape: Shape, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: layer_id,
                sample: sample_id,
                index,
                value,
            });
        }
        Ok(ActivationTensor {
            layer_id,
            sample_id,
            shape,
            values,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileLayout {
    Raw,
    Npy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEntry {
    pub layer_id: usize,
    pub shape: Shape,
    /// Path as written in the manifest, relative to the dataset directory.
    pub file: String,
    pub resolved: PathBuf,
    pub layout: FileLayout,
    pub data_offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub num_layers: usize,
    pub num_samples: usize,
    pub layers: Vec<LayerEntry>,
    pub notes: Vec<String>,
}

impl DatasetManifest {
    pub fn layer(&self, layer_id: usize) -> Result<&LayerEntry> {
        if layer_id == 0 || layer_id > self.num_layers {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer_id,
                max: self.num_layers,
            });
        }
        Ok(&self.layers[layer_id - 1])
    }

    pub fn shape(&self, layer_id: usize) -> Result<Shape> {
        self.layer(layer_id).map(|l| l.shape)
    }
}

/// Opens a dataset. `path` may be a dataset directory, its manifest file, or
/// a single `.npy` file, which is treated as a one-layer dataset.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    if path.extension().is_some_and(|e| e == "npy") && path.is_file() {
        return load_npy_dataset(path);
    }
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    if !manifest_path.is_file() {
        return Err(Error::Manifest {
            path: manifest_path,
            message: "no such manifest file".into(),
        });
    }
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let doc = KvDocument::read(&manifest_path)?;
    let bad = |message: String| Error::Manifest {
        path: manifest_path.clone(),
        message,
    };

    let version: u32 = doc.parse_value("version")?;
    if version != MANIFEST_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: MANIFEST_VERSION,
        });
    }
    let num_layers: usize = doc.parse_value("num_layers")?;
    let num_samples: usize = doc.parse_value("num_samples")?;
    if num_layers == 0 || num_samples == 0 {
        return Err(bad("num_layers and num_samples must be positive".into()));
    }
    let order = doc.require("order")?;
    if order != "c" {
        return Err(bad(format!("unsupported element order `{order}` (only c)")));
    }
    let default_dtype = doc.require("dtype")?.to_string();

    // Every per-layer key must belong to a layer in 1..=num_layers.
    for key in doc.keys() {
        for prefix in ["shape_", "file_", "dtype_"] {
            if let Some(suffix) = key.strip_prefix(prefix) {
                let index: usize = suffix
                    .parse()
                    .map_err(|_| bad(format!("malformed layer key `{key}`")))?;
                if index == 0 || index > num_layers {
                    return Err(Error::Layer {
                        layer: index,
                        message: format!(
                            "layer indices must be contiguous from 1 to {num_layers}"
                        ),
                    });
                }
            }
        }
    }

    let mut layers = Vec::with_capacity(num_layers);
    for layer_id in 1..=num_layers {
        let shape_key = format!("shape_{layer_id}");
        let file_key = format!("file_{layer_id}");
        if !doc.contains(&shape_key) || !doc.contains(&file_key) {
            return Err(Error::Layer {
                layer: layer_id,
                message: format!(
                    "missing `{shape_key}` or `{file_key}`; layer indices must be contiguous from 1 to {num_layers}"
                ),
            });
        }
        let dims: Vec<usize> = doc.list(&shape_key)?;
        let shape = match dims.as_slice() {
            &[p, q, k] => Shape::new(p, q, k).map_err(|e| Error::Layer {
                layer: layer_id,
                message: e.to_string(),
            })?,
            _ => {
                return Err(Error::Layer {
                    layer: layer_id,
                    message: format!("shape must be P,Q,K, got {dims:?}"),
                })
            }
        };
        let dtype = doc
            .get(&format!("dtype_{layer_id}"))
            .unwrap_or(&default_dtype);
        if dtype != "f32le" {
            return Err(Error::UnsupportedDtype {
                layer: layer_id,
                dtype: dtype.to_string(),
            });
        }
        let file = doc.require(&file_key)?.to_string();
        let entry = inspect_layer_file(&root, layer_id, shape, num_samples, file)?;
        layers.push(entry);
    }

    let notes = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(&manifest_path, e))?
        .lines()
        .filter_map(|l| l.trim_start().strip_prefix('#'))
        .map(|l| l.trim().to_string())
        .collect();

    Ok(DatasetManifest {
        root,
        num_layers,
        num_samples,
        layers,
        notes,
    })
}

fn inspect_layer_file(
    root: &Path,
    layer_id: usize,
    shape: Shape,
    num_samples: usize,
    file: String,
) -> Result<LayerEntry> {
    let resolved = root.join(&file);
    let meta = fs::metadata(&resolved).map_err(|e| Error::Layer {
        layer: layer_id,
        message: format!("cannot open {}: {e}", resolved.display()),
    })?;
    let payload = (num_samples * shape.len() * 4) as u64;
    let is_npy = resolved.extension().is_some_and(|e| e == "npy");
    let (layout, data_offset) = if is_npy {
        let mut reader =
            BufReader::new(File::open(&resolved).map_err(|e| Error::io(&resolved, e))?);
        let header = npy::read_header(&mut reader).map_err(|e| Error::Layer {
            layer: layer_id,
            message: e.to_string(),
        })?;
        let expected_shape = [num_samples, shape.height, shape.width, shape.channels];
        if header.shape != expected_shape {
            return Err(Error::Layer {
                layer: layer_id,
                message: format!(
                    "npy shape {:?} does not match manifest ({num_samples}, {shape})",
                    header.shape
                ),
            });
        }
        (FileLayout::Npy, header.data_offset)
    } else {
        (FileLayout::Raw, 0)
    };
    if meta.len() != data_offset + payload {
        return Err(Error::ByteLength {
            layer: layer_id,
            path: resolved,
            expected: data_offset + payload,
            actual: meta.len(),
        });
    }
    Ok(LayerEntry {
        layer_id,
        shape,
        file,
        resolved,
        layout,
        data_offset,
    })
}

fn load_npy_dataset(path: &Path) -> Result<DatasetManifest> {
    let mut reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = npy::read_header(&mut reader)?;
    let (num_samples, shape) = match header.shape.as_slice() {
        &[n, p, q, k] => (n, Shape::new(p, q, k)?),
        &[p, q, k] => (1, Shape::new(p, q, k)?),
        &[n, f] => (n, Shape::new(1, 1, f)?),
        &[f] => (1, Shape::new(1, 1, f)?),
        other => {
            return Err(Error::Npy(format!(
                "{}: cannot interpret shape {other:?} as (N, P, Q, K)",
                path.display()
            )))
        }
    };
    if num_samples == 0 {
        return Err(Error::Npy(format!("{}: no samples", path.display())));
    }
    let len = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    let expected = header.data_offset + (num_samples * shape.len() * 4) as u64;
    if len != expected {
        return Err(Error::ByteLength {
            layer: 1,
            path: path.to_path_buf(),
            expected,
            actual: len,
        });
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(DatasetManifest {
        root,
        num_layers: 1,
        num_samples,
        layers: vec![LayerEntry {
            layer_id: 1,
            shape,
            file,
            resolved: path.to_path_buf(),
            layout: FileLayout::Npy,
            data_offset: header.data_offset,
        }],
        notes: Vec::new(),
    })
}

pub fn read_tensor(
    manifest: &DatasetManifest,
    layer_id: usize,
    sample_id: usize,
) -> Result<ActivationTensor> {
    let mut tensors = read_samples(manifest, layer_id, sample_id, 1)?;
    Ok(tensors.remove(0))
}

/// Reads `count` consecutive samples of one layer starting at `first_sample`.
pub fn read_samples(
    manifest: &DatasetManifest,
    layer_id: usize,
    first_sample: usize,
    count: usize,
) -> Result<Vec<ActivationTensor>> {
    let entry = manifest.layer(layer_id)?;
    for sample in [first_sample, first_sample + count.max(1) - 1] {
        if sample == 0 || sample > manifest.num_samples {
            return Err(Error::IndexOutOfRange {
                what: "sample",
                index: sample,
                max: manifest.num_samples,
            });
        }
    }
    let len = entry.shape.len();
    let mut file = File::open(&entry.resolved).map_err(|e| Error::io(&entry.resolved, e))?;
    let offset = entry.data_offset + ((first_sample - 1) * len * 4) as u64;
    file.seek(SeekFrom::Start(offset))
        .map_err(|e| Error::io(&entry.resolved, e))?;
    let mut bytes = vec![0u8; count * len * 4];
    file.read_exact(&mut bytes)
        .map_err(|e| Error::io(&entry.resolved, e))?;

    bytes
        .chunks_exact(len * 4)
        .enumerate()
        .map(|(n, chunk)| {
            let values = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ActivationTensor::new(layer_id, first_sample + n, entry.shape, values)
        })
        .collect()
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Builds a raw dataset container. Layer files are preallocated so tensors
/// can be written in any order; the manifest is written by [`finish`].
///
/// [`finish`]: DatasetWriter::finish
#[derive(Debug)]
pub struct DatasetWriter {
    root: PathBuf,
    num_samples: usize,
    shapes: Vec<Shape>,
    files: Vec<File>,
    notes: Vec<String>,
}

impl DatasetWriter {
    pub fn create(root: &Path, num_samples: usize, shapes: &[Shape]) -> Result<Self> {
        if num_samples == 0 || shapes.is_empty() {
            return Err(Error::Empty("dataset needs at least one layer and one sample"));
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut files = Vec::with_capacity(shapes.len());
        for (n, shape) in shapes.iter().enumerate() {
            let path = root.join(layer_file_name(n + 1));
            let file = OpenOptions::new()
                .create(true)
                .truncate(true)
                .read(true)
                .write(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            file.set_len((num_samples * shape.len() * 4) as u64)
                .map_err(|e| Error::io(&path, e))?;
            files.push(file);
        }
        Ok(DatasetWriter {
            root: root.to_path_buf(),
            num_samples,
            shapes: shapes.to_vec(),
            files,
            notes: Vec::new(),
        })
    }

    /// Adds a `#` comment line to the manifest.
    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn write_tensor(&mut self, tensor: &ActivationTensor) -> Result<()> {
        let layer = tensor.layer_id;
        if layer == 0 || layer > self.shapes.len() {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer,
                max: self.shapes.len(),
            });
        }
        if tensor.sample_id == 0 || tensor.sample_id > self.num_samples {
            return Err(Error::IndexOutOfRange {
                what: "sample",
                index: tensor.sample_id,
                max: self.num_samples,
            });
        }
        let shape = self.shapes[layer - 1];
        if tensor.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer} holds {shape}, tensor is {}",
                tensor.shape
            )));
        }
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = self.root.join(layer_file_name(layer));
        let file = &mut self.files[layer - 1];
        file.seek(SeekFrom::Start(((tensor.sample_id - 1) * shape.len() * 4) as u64))
            .map_err(|e| Error::io(&path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn finish(self) -> Result<DatasetManifest> {
        for (n, file) in self.files.iter().enumerate() {
            file.sync_all()
                .map_err(|e| Error::io(self.root.join(layer_file_name(n + 1)), e))?;
        }
        let mut w = KvWriter::new();
        for note in &self.notes {
            w.comment(note);
        }
        w.entry("version", MANIFEST_VERSION)
            .entry("num_layers", self.shapes.len())
            .entry("num_samples", self.num_samples)
            .entry("dtype", "f32le")
            .entry("order", "c");
        for (n, shape) in self.shapes.iter().enumerate() {
            w.entry(&format!("shape_{}", n + 1), shape)
                .entry(&format!("file_{}", n + 1), layer_file_name(n + 1));
        }
        let manifest_path = self.root.join(MANIFEST_FILE);
        write_atomic(&manifest_path, w.finish().as_bytes())?;
        load_dataset(&self.root)
    }
}

fn layer_file_name(layer_id: usize) -> String {
    format!("layer_{layer_id}.f32")
}

pub fn scheme_to_string(scheme: &QuantScheme) -> String {
    let spec = &scheme.spec;
    let coeffs = &scheme.coefficients;
    let mut w = KvWriter::new();
    w.entry("schema_version", SCHEME_VERSION)
        .entry("layer", scheme.layer_id)
        .entry("D", spec.bits())
        .entry("init_quantizer", spec.kind().name())
        .real("clip_lo", spec.clip_lo())
        .real("clip_hi", spec.clip_hi())
        .real("scale", spec.scale());
    for (j, a) in coeffs.alpha.iter().enumerate() {
        w.real(&format!("alpha[{}]", j + 1), *a);
    }
    w.list("support", &coeffs.support)
        .entry("effective_rate", scheme.effective_rate())
        .real("lambda", coeffs.lambda)
        .real("residual_sse", coeffs.residual_sse)
        .real("psnr_db", scheme.psnr_db)
        .real("psnr_loss_db", scheme.psnr_loss_db)
        .real("threshold_db", scheme.threshold_db)
        .entry("threshold_unmet", scheme.threshold_unmet)
        .entry("loss_reference", scheme.loss_reference.name());
    let t: Vec<String> = scheme.t_per_sample.iter().map(|&t| hexfloat::format(t)).collect();
    w.list("t_per_sample", &t);
    w.finish()
}

pub fn write_scheme(scheme: &QuantScheme, path: &Path) -> Result<()> {
    scheme.validate()?;
    write_atomic(path, scheme_to_string(scheme).as_bytes())
}

pub fn read_scheme(path: &Path) -> Result<QuantScheme> {
    let doc = KvDocument::read(path)?;
    scheme_from_document(&doc)
}

pub fn scheme_from_document(doc: &KvDocument) -> Result<QuantScheme> {
    let version: u32 = doc.parse_value("schema_version")?;
    if version != SCHEME_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: SCHEME_VERSION,
        });
    }
    let layer_id: usize = doc.parse_value("layer")?;
    let bits: u32 = doc.parse_value("D")?;
    let kind_name = doc.require("init_quantizer")?;
    let kind = QuantizerKind::from_name(kind_name).ok_or_else(|| {
        doc.error(
            doc.line_of("init_quantizer"),
            format!("unknown init_quantizer `{kind_name}`"),
        )
    })?;
    let spec = InitQuantizerSpec::from_parts(
        kind,
        bits,
        doc.real("clip_lo")?,
        doc.real("clip_hi")?,
        doc.real("scale")?,
    )?;
    let alpha = (1..=bits as usize)
        .map(|j| doc.real(&format!("alpha[{j}]")))
        .collect::<Result<Vec<_>>>()?;
    let support: Vec<usize> = doc.list("support")?;
    let lambda = doc.real("lambda")?;
    let residual_sse = doc.real("residual_sse")?;
    let coefficients = CoefficientVector::from_raw(alpha, lambda, residual_sse);
    if coefficients.support != support {
        return Err(doc.error(
            doc.line_of("support"),
            format!(
                "support {support:?} disagrees with nonzero coefficients {:?}",
                coefficients.support
            ),
        ));
    }
    let effective_rate: usize = doc.parse_value("effective_rate")?;
    if effective_rate != support.len() {
        return Err(doc.error(
            doc.line_of("effective_rate"),
            format!("effective_rate {effective_rate} != |support| {}", support.len()),
        ));
    }
    let reference_name = doc.require("loss_reference")?;
    let loss_reference = LossReference::from_name(reference_name).ok_or_else(|| {
        doc.error(
            doc.line_of("loss_reference"),
            format!("unknown loss_reference `{reference_name}`"),
        )
    })?;
    let t_per_sample = doc
        .list::<String>("t_per_sample")?
        .iter()
        .map(|s| {
            hexfloat::parse(s).ok_or_else(|| {
                doc.error(doc.line_of("t_per_sample"), format!("not a number: `{s}`"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scheme = QuantScheme {
        layer_id,
        spec,
        coefficients,
        psnr_db: doc.real("psnr_db")?,
        psnr_loss_db: doc.real("psnr_loss_db")?,
        t_per_sample,
        threshold_db: doc.real("threshold_db")?,
        threshold_unmet: doc.bool("threshold_unmet")?,
        loss_reference,
    };
    scheme.validate()?;
    Ok(scheme)
}
