//! File artifacts: models, datasets, latency tables, candidate-space tables.
//!
//! A model is a pair `<stem>.json` + `<stem>.bin`: the manifest lists layers
//! in topological order plus a tensor-name table of (byte offset, shape); the
//! blob concatenates every tensor as little-endian f32 in manifest order.
//! Datasets use the same manifest+blob pattern with an optional
//! `<stem>.labels.bin` of little-endian i32. All artifacts are byte-stable
//! for a fixed input.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    BnSpec, BuildingBlock, ConvSpec, DenseSpec, GraphBuilder, LayerId, LayerKind, LowRankBranch,
    NetworkGraph, Port,
};
use crate::lrspace::BlockConfig;
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "lrnas-model-v1";
pub const DATASET_FORMAT: &str = "lrnas-dataset-v1";

fn json_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

fn bin_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn labels_path(stem: &Path) -> PathBuf {
    stem.with_extension("labels.bin")
}

fn write_f32_le(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::artifact(path, e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::artifact(path, "blob length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

// ---------------------------------------------------------------------------
// Model manifest
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    input_shape: [usize; 3],
    classes: usize,
    output: u32,
    targets: Vec<u32>,
    layers: Vec<LayerManifest>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerManifest {
    id: u32,
    name: String,
    /// Input ports; -1 is the graph input, otherwise a layer id.
    inputs: Vec<i64>,
    #[serde(flatten)]
    kind: KindManifest,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum KindManifest {
    Conv {
        stride: [usize; 2],
        padding: [usize; 2],
        groups: usize,
        weight: String,
        bias: Option<String>,
    },
    Batchnorm {
        momentum: f32,
        gamma: String,
        beta: String,
        running_mean: String,
        running_var: String,
    },
    Relu,
    Maxpool {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Avgpool {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Gap,
    Flatten,
    Dense {
        weight: String,
        bias: String,
    },
    Add,
    Block {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        branches: Vec<BranchManifest>,
    },
}

#[derive(Serialize, Deserialize)]
struct BranchManifest {
    #[serde(rename = "kernel-split")]
    kernel_split: String,
    g0: usize,
    g1: usize,
    rank: usize,
    w0: String,
    w1: String,
    bias: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    /// Byte offset into the blob.
    offset: u64,
    shape: Vec<usize>,
}

pub fn split_label_parse(label: &str) -> Result<((usize, usize), (usize, usize))> {
    let err = || Error::Contract(format!("malformed kernel split `{label}`"));
    let (a, b) = label.split_once('+').ok_or_else(err)?;
    let parse = |s: &str| -> Result<(usize, usize)> {
        let (h, w) = s.split_once('x').ok_or_else(err)?;
        Ok((h.parse().map_err(|_| err())?, w.parse().map_err(|_| err())?))
    };
    Ok((parse(a)?, parse(b)?))
}

/// Write `<stem>.json` + `<stem>.bin`. Graphs holding super blocks are not
/// serializable; select a candidate first.
pub fn save_model(graph: &NetworkGraph, stem: &Path) -> Result<()> {
    let named = graph.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut blob: Vec<f32> = Vec::new();
    let mut name_of: BTreeMap<u64, String> = BTreeMap::new();
    for (name, t) in &named {
        name_of.insert(t.id(), name.clone());
        tensors.push(TensorEntry {
            name: name.clone(),
            offset: (blob.len() * 4) as u64,
            shape: t.shape().to_vec(),
        });
        blob.extend_from_slice(&t.to_vec());
    }
    let tname = |t: &Tensor| -> String { name_of[&t.id()].clone() };

    let mut layers = Vec::new();
    for layer in graph.layers() {
        let kind = match &layer.kind {
            LayerKind::Conv(s) => KindManifest::Conv {
                stride: [s.stride.0, s.stride.1],
                padding: [s.padding.0, s.padding.1],
                groups: s.groups,
                weight: tname(&s.weight),
                bias: s.bias.as_ref().map(&tname),
            },
            LayerKind::BatchNorm(s) => KindManifest::Batchnorm {
                momentum: s.momentum,
                gamma: tname(&s.gamma),
                beta: tname(&s.beta),
                running_mean: tname(&s.running_mean),
                running_var: tname(&s.running_var),
            },
            LayerKind::Relu => KindManifest::Relu,
            LayerKind::MaxPool { kernel, stride } => KindManifest::Maxpool {
                kernel: [kernel.0, kernel.1],
                stride: [stride.0, stride.1],
            },
            LayerKind::AvgPool { kernel, stride } => KindManifest::Avgpool {
                kernel: [kernel.0, kernel.1],
                stride: [stride.0, stride.1],
            },
            LayerKind::GlobalAvgPool => KindManifest::Gap,
            LayerKind::Flatten => KindManifest::Flatten,
            LayerKind::Dense(s) => KindManifest::Dense {
                weight: tname(&s.weight),
                bias: tname(&s.bias),
            },
            LayerKind::Add => KindManifest::Add,
            LayerKind::Block(b) => KindManifest::Block {
                in_channels: b.in_channels,
                out_channels: b.out_channels,
                kernel: [b.orig_kernel.0, b.orig_kernel.1],
                stride: [b.orig_stride.0, b.orig_stride.1],
                padding: [b.orig_padding.0, b.orig_padding.1],
                branches: b
                    .branches
                    .iter()
                    .map(|br| BranchManifest {
                        kernel_split: br.config.split_label(),
                        g0: br.config.groups0,
                        g1: br.config.groups1,
                        rank: br.config.rank,
                        w0: tname(&br.w0),
                        w1: tname(&br.w1),
                        bias: br.bias.as_ref().map(&tname),
                    })
                    .collect(),
            },
            LayerKind::Super(_) => {
                return Err(Error::Contract(format!(
                    "layer {} is a super block and cannot be serialized",
                    layer.id
                )))
            }
        };
        layers.push(LayerManifest {
            id: layer.id.0,
            name: layer.name.clone(),
            inputs: layer
                .inputs
                .iter()
                .map(|p| match p {
                    Port::Input => -1,
                    Port::Layer(l) => l.0 as i64,
                })
                .collect(),
            kind,
        });
    }

    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        input_shape: graph.input_shape(),
        classes: graph.classes(),
        output: graph.output_layer().0,
        targets: graph.targets().iter().map(|t| t.0).collect(),
        layers,
        tensors,
    };
    fs::write(json_path(stem), serde_json::to_vec_pretty(&manifest).expect("serializable"))?;
    write_f32_le(&bin_path(stem), &blob)?;
    Ok(())
}

pub fn load_model(stem: &Path) -> Result<NetworkGraph> {
    let jp = json_path(stem);
    let manifest: ModelManifest = serde_json::from_slice(
        &fs::read(&jp).map_err(|e| Error::artifact(&jp, e.to_string()))?,
    )
    .map_err(|e| Error::artifact(&jp, format!("malformed manifest: {e}")))?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::artifact(&jp, format!("unknown format `{}`", manifest.format)));
    }
    let blob = read_f32_le(&bin_path(stem))?;

    let mut table: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
    for t in &manifest.tensors {
        table.insert(t.name.clone(), ((t.offset / 4) as usize, t.shape.clone()));
    }
    let fetch = |name: &str, trainable: bool| -> Result<Tensor> {
        let (start, shape) = table
            .get(name)
            .ok_or_else(|| Error::artifact(&jp, format!("tensor `{name}` missing from table")))?;
        let count: usize = shape.iter().product();
        if start + count > blob.len() {
            return Err(Error::artifact(&jp, format!("tensor `{name}` exceeds blob")));
        }
        let data = blob[*start..start + count].to_vec();
        if trainable {
            Tensor::param(shape, data)
        } else {
            Tensor::from_vec(shape, data)
        }
    };

    let mut builder = GraphBuilder::new();
    for lm in &manifest.layers {
        let inputs: Vec<Port> = lm
            .inputs
            .iter()
            .map(|&i| if i < 0 { Port::Input } else { Port::Layer(LayerId(i as u32)) })
            .collect();
        let kind = match &lm.kind {
            KindManifest::Conv { stride, padding, groups, weight, bias } => {
                LayerKind::Conv(ConvSpec {
                    weight: fetch(weight, true)?,
                    bias: bias.as_ref().map(|b| fetch(b, true)).transpose()?,
                    stride: (stride[0], stride[1]),
                    padding: (padding[0], padding[1]),
                    groups: *groups,
                })
            }
            KindManifest::Batchnorm { momentum, gamma, beta, running_mean, running_var } => {
                LayerKind::BatchNorm(BnSpec {
                    gamma: fetch(gamma, true)?,
                    beta: fetch(beta, true)?,
                    running_mean: fetch(running_mean, false)?,
                    running_var: fetch(running_var, false)?,
                    momentum: *momentum,
                })
            }
            KindManifest::Relu => LayerKind::Relu,
            KindManifest::Maxpool { kernel, stride } => LayerKind::MaxPool {
                kernel: (kernel[0], kernel[1]),
                stride: (stride[0], stride[1]),
            },
            KindManifest::Avgpool { kernel, stride } => LayerKind::AvgPool {
                kernel: (kernel[0], kernel[1]),
                stride: (stride[0], stride[1]),
            },
            KindManifest::Gap => LayerKind::GlobalAvgPool,
            KindManifest::Flatten => LayerKind::Flatten,
            KindManifest::Dense { weight, bias } => LayerKind::Dense(DenseSpec {
                weight: fetch(weight, true)?,
                bias: fetch(bias, true)?,
            }),
            KindManifest::Add => LayerKind::Add,
            KindManifest::Block { in_channels, out_channels, kernel, stride, padding, branches } => {
                let mut brs = Vec::new();
                for bm in branches {
                    let (kernel0, kernel1) = split_label_parse(&bm.kernel_split)?;
                    let config = BlockConfig {
                        kernel0,
                        kernel1,
                        groups0: bm.g0,
                        groups1: bm.g1,
                        rank: bm.rank,
                    };
                    let (s0, p0, s1, p1) =
                        config.stride_padding_split((stride[0], stride[1]), (padding[0], padding[1]));
                    brs.push(LowRankBranch {
                        config,
                        w0: fetch(&bm.w0, true)?,
                        w1: fetch(&bm.w1, true)?,
                        bias: bm.bias.as_ref().map(|b| fetch(b, true)).transpose()?,
                        stride0: s0,
                        padding0: p0,
                        stride1: s1,
                        padding1: p1,
                    });
                }
                LayerKind::Block(BuildingBlock {
                    branches: brs,
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    orig_kernel: (kernel[0], kernel[1]),
                    orig_stride: (stride[0], stride[1]),
                    orig_padding: (padding[0], padding[1]),
                })
            }
        };
        let got = builder.add(lm.name.clone(), inputs, kind);
        if got.0 != lm.id {
            return Err(Error::artifact(
                &jp,
                format!("layer ids must be dense and ordered; expected {}, found {}", got.0, lm.id),
            ));
        }
    }
    let mut graph = builder.finish(
        manifest.input_shape,
        manifest.classes,
        LayerId(manifest.output),
    )?;
    let targets: Vec<LayerId> = manifest.targets.iter().map(|&t| LayerId(t)).collect();
    graph.designate_targets(&targets)?;
    Ok(graph)
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    count: usize,
    shape: [usize; 3],
    seed: u64,
    has_labels: bool,
    config: serde_json::Value,
}

pub struct StoredDataset {
    pub images: Vec<f32>,
    pub labels: Option<Vec<usize>>,
    pub shape: [usize; 3],
    pub count: usize,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub fn save_dataset(
    stem: &Path,
    images: &[f32],
    shape: [usize; 3],
    labels: Option<&[usize]>,
    seed: u64,
    config: serde_json::Value,
) -> Result<()> {
    let pix: usize = shape.iter().product();
    if pix == 0 || images.len() % pix != 0 {
        return Err(Error::Contract(format!(
            "image blob of {} values is not a multiple of {shape:?}",
            images.len()
        )));
    }
    let count = images.len() / pix;
    if let Some(l) = labels {
        if l.len() != count {
            return Err(Error::Contract(format!("{} labels for {count} images", l.len())));
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        count,
        shape,
        seed,
        has_labels: labels.is_some(),
        config,
    };
    fs::write(json_path(stem), serde_json::to_vec_pretty(&manifest).expect("serializable"))?;
    write_f32_le(&bin_path(stem), images)?;
    if let Some(l) = labels {
        let mut bytes = Vec::with_capacity(l.len() * 4);
        for &v in l {
            bytes.extend_from_slice(&(v as i32).to_le_bytes());
        }
        fs::write(labels_path(stem), bytes)?;
    }
    Ok(())
}

pub fn load_dataset(stem: &Path) -> Result<StoredDataset> {
    let jp = json_path(stem);
    let manifest: DatasetManifest = serde_json::from_slice(
        &fs::read(&jp).map_err(|e| Error::artifact(&jp, e.to_string()))?,
    )
    .map_err(|e| Error::artifact(&jp, format!("malformed manifest: {e}")))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::artifact(&jp, format!("unknown format `{}`", manifest.format)));
    }
    let images = read_f32_le(&bin_path(stem))?;
    let pix: usize = manifest.shape.iter().product();
    if images.len() != manifest.count * pix {
        return Err(Error::artifact(
            bin_path(stem),
            format!("expected {} values, found {}", manifest.count * pix, images.len()),
        ));
    }
    let labels = if manifest.has_labels {
        let lp = labels_path(stem);
        let bytes = fs::read(&lp).map_err(|e| Error::artifact(&lp, e.to_string()))?;
        if bytes.len() != manifest.count * 4 {
            return Err(Error::artifact(&lp, "label array length mismatch"));
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
                .collect(),
        )
    } else {
        None
    };
    Ok(StoredDataset {
        images,
        labels,
        shape: manifest.shape,
        count: manifest.count,
        seed: manifest.seed,
        config: manifest.config,
    })
}

// ---------------------------------------------------------------------------
// Latency table
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LatencyEntry {
    sig: String,
    ms: f64,
}

#[derive(Serialize, Deserialize)]
struct LatencyFile {
    entries: Vec<LatencyEntry>,
}

pub fn save_latency_table(table: &crate::cost::LatencyTable, path: &Path) -> Result<()> {
    let file = LatencyFile {
        entries: table
            .entries
            .iter()
            .map(|(sig, ms)| LatencyEntry { sig: sig.clone(), ms: *ms })
            .collect(),
    };
    fs::write(path, serde_json::to_vec_pretty(&file).expect("serializable"))?;
    Ok(())
}

pub fn load_latency_table(path: &Path) -> Result<crate::cost::LatencyTable> {
    let file: LatencyFile = serde_json::from_slice(
        &fs::read(path).map_err(|e| Error::artifact(path, e.to_string()))?,
    )
    .map_err(|e| Error::artifact(path, format!("malformed latency table: {e}")))?;
    let mut table = crate::cost::LatencyTable::default();
    for e in file.entries {
        if e.ms <= 0.0 {
            return Err(Error::artifact(path, format!("non-positive latency for `{}`", e.sig)));
        }
        table.insert(e.sig, e.ms);
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Candidate space table
// ---------------------------------------------------------------------------

/// Per-layer candidate records with pruning provenance. Candidates with
/// `pruned_by == None` survive into the search.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SpaceTable {
    pub layers: Vec<SpaceLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpaceLayer {
    pub layer: u32,
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    #[serde(rename = "kernel-split")]
    pub kernel_split: String,
    pub g0: usize,
    pub g1: usize,
    pub rank: usize,
    pub flops: u64,
    pub params: u64,
    #[serde(rename = "pruned-by")]
    pub pruned_by: Option<String>,
}

impl CandidateRecord {
    pub fn config(&self) -> Result<BlockConfig> {
        let (kernel0, kernel1) = split_label_parse(&self.kernel_split)?;
        Ok(BlockConfig {
            kernel0,
            kernel1,
            groups0: self.g0,
            groups1: self.g1,
            rank: self.rank,
        })
    }

    pub fn from_config(config: &BlockConfig, flops: u64, params: u64) -> CandidateRecord {
        CandidateRecord {
            kernel_split: config.split_label(),
            g0: config.groups0,
            g1: config.groups1,
            rank: config.rank,
            flops,
            params,
            pruned_by: None,
        }
    }
}

impl SpaceTable {
    pub fn surviving(&self, layer: LayerId) -> Vec<BlockConfig> {
        self.layers
            .iter()
            .filter(|l| l.layer == layer.0)
            .flat_map(|l| &l.candidates)
            .filter(|c| c.pruned_by.is_none())
            .filter_map(|c| c.config().ok())
            .collect()
    }
}

pub fn save_space_table(table: &SpaceTable, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(table).expect("serializable"))?;
    Ok(())
}

pub fn load_space_table(path: &Path) -> Result<SpaceTable> {
    serde_json::from_slice(&fs::read(path).map_err(|e| Error::artifact(path, e.to_string()))?)
        .map_err(|e| Error::artifact(path, format!("malformed space table: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_desk_model;
    use tempfile::tempdir;

    #[test]
    fn model_roundtrip_preserves_everything() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("model");
        let g = build_desk_model(9).unwrap();
        save_model(&g, &stem).unwrap();
        let g2 = load_model(&stem).unwrap();
        assert_eq!(g.input_shape(), g2.input_shape());
        assert_eq!(g.classes(), g2.classes());
        assert_eq!(g.targets(), g2.targets());
        let a = g.named_tensors();
        let b = g2.named_tensors();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        // Saving the reloaded graph is byte-identical.
        let stem2 = dir.path().join("model2");
        save_model(&g2, &stem2).unwrap();
        assert_eq!(
            std::fs::read(json_path(&stem)).unwrap(),
            std::fs::read(json_path(&stem2)).unwrap()
        );
        assert_eq!(
            std::fs::read(bin_path(&stem)).unwrap(),
            std::fs::read(bin_path(&stem2)).unwrap()
        );
    }

    #[test]
    fn dataset_roundtrip_with_labels() {
        let dir = tempdir().unwrap();
        let stem = dir.path().join("data");
        let images: Vec<f32> = (0..2 * 12).map(|v| v as f32 * 0.5).collect();
        save_dataset(&stem, &images, [3, 2, 2], Some(&[1, 7]), 42, serde_json::json!({"s": 1}))
            .unwrap();
        let d = load_dataset(&stem).unwrap();
        assert_eq!(d.images, images);
        assert_eq!(d.labels, Some(vec![1, 7]));
        assert_eq!(d.count, 2);
        assert_eq!(d.seed, 42);
    }

    #[test]
    fn latency_table_roundtrip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("lat.json");
        let mut t = crate::cost::LatencyTable::default();
        t.insert("conv,4,4,3,3,1,1,8,8", 1.25);
        save_latency_table(&t, &path).unwrap();
        let t2 = load_latency_table(&path).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn split_label_roundtrip() {
        let cfg = BlockConfig {
            kernel0: (3, 1),
            kernel1: (1, 3),
            groups0: 2,
            groups1: 1,
            rank: 5,
        };
        let rec = CandidateRecord::from_config(&cfg, 10, 20);
        assert_eq!(rec.kernel_split, "3x1+1x3");
        assert_eq!(rec.config().unwrap(), cfg);
    }
}
