//! Model and statistics files: a 4-byte magic, a u32 length, a JSON envelope
//! of that length, then one embedding block per name in `envelope.blocks`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decode_block, encode_labels, encode_matrix, write_atomic, Dtype, EmbData};
use crate::error::{CondaError, Result};
use crate::model::{CbmModel, ConceptBank, LinearHead, ResidualBranch};
use crate::stats::{ClassGaussian, ClassStats};
use crate::DenseMatrix;

pub const MODEL_MAGIC: [u8; 4] = *b"CMD1";
pub const STATS_MAGIC: [u8; 4] = *b"CST1";
const SCHEMA_VERSION: u32 = 1;

const MODEL_BLOCKS: [&str; 7] = [
    "bank",
    "bank_source",
    "head_weights",
    "head_bias",
    "residual_vectors",
    "residual_weights",
    "residual_bias",
];

#[derive(Debug, Serialize, Deserialize)]
struct ModelEnvelope {
    schema_version: u32,
    classes: usize,
    concepts: usize,
    residual: usize,
    dim: usize,
    blocks: Vec<String>,
    captions: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsEnvelope {
    schema_version: u32,
    classes: usize,
    concepts: usize,
    blocks: Vec<String>,
}

fn frame<T: Serialize>(magic: [u8; 4], envelope: &T) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(envelope)?;
    let len = u32::try_from(json.len()).map_err(|_| CondaError::Format("envelope too large".into()))?;
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

fn unframe<T: for<'de> Deserialize<'de>>(magic: [u8; 4], bytes: &[u8]) -> Result<(T, &[u8])> {
    if bytes.len() < 8 {
        return Err(CondaError::Truncated {
            needed: 8,
            found: bytes.len() as u64,
        });
    }
    if bytes[..4] != magic {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(CondaError::BadMagic { expected: magic, found });
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + len {
        return Err(CondaError::Truncated {
            needed: (8 + len) as u64,
            found: bytes.len() as u64,
        });
    }
    let envelope = serde_json::from_slice(&bytes[8..8 + len])?;
    Ok((envelope, &bytes[8 + len..]))
}

/// Reads the named blocks in order and checks nothing trails them.
fn read_blocks(mut rest: &[u8], names: &[String]) -> Result<Vec<EmbData>> {
    let mut out = Vec::with_capacity(names.len());
    for _ in names {
        let (data, used) = decode_block(rest)?;
        out.push(data);
        rest = &rest[used..];
    }
    if !rest.is_empty() {
        return Err(CondaError::Format(format!(
            "{} trailing bytes after last block",
            rest.len()
        )));
    }
    Ok(out)
}

fn expect_matrix(data: EmbData, name: &str, shape: (usize, usize)) -> Result<DenseMatrix> {
    match data {
        EmbData::Matrix { matrix, .. } if matrix.shape() == shape => Ok(matrix),
        EmbData::Matrix { matrix, .. } => Err(CondaError::Format(format!(
            "block {name} is {:?}, envelope declares {shape:?}",
            matrix.shape()
        ))),
        EmbData::Labels(_) => Err(CondaError::Format(format!(
            "block {name} holds labels, expected a matrix"
        ))),
    }
}

fn row(v: &[f64]) -> DenseMatrix {
    DenseMatrix::from_vec(1, v.len(), v.to_vec()).expect("length matches")
}

pub fn encode_model(model: &CbmModel) -> Result<Vec<u8>> {
    let envelope = ModelEnvelope {
        schema_version: SCHEMA_VERSION,
        classes: model.class_count(),
        concepts: model.bank.concept_count(),
        residual: model.residual.size(),
        dim: model.dim(),
        blocks: MODEL_BLOCKS.iter().map(|s| s.to_string()).collect(),
        captions: model.bank.captions.clone(),
    };
    let mut out = frame(MODEL_MAGIC, &envelope)?;
    for m in [
        &model.bank.vectors,
        model.bank.source_snapshot(),
        &model.head.weights,
        &row(&model.head.bias),
        &model.residual.vectors,
        &model.residual.weights,
        &row(&model.residual.bias),
    ] {
        encode_matrix(&mut out, m, Dtype::F64)?;
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<CbmModel> {
    let (env, rest): (ModelEnvelope, _) = unframe(MODEL_MAGIC, bytes)?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(CondaError::Format(format!(
            "unsupported model schema {}",
            env.schema_version
        )));
    }
    if env.blocks != MODEL_BLOCKS {
        return Err(CondaError::Format(format!("unexpected model blocks {:?}", env.blocks)));
    }
    let (l, m, r, d) = (env.classes, env.concepts, env.residual, env.dim);
    let shapes = [(m, d), (m, d), (l, m), (1, l), (r, d), (l, r), (1, l)];
    let mut mats = read_blocks(rest, &env.blocks)?
        .into_iter()
        .zip(MODEL_BLOCKS.iter().zip(shapes))
        .map(|(data, (name, shape))| expect_matrix(data, name, shape))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || mats.next().expect("seven blocks");
    let bank = ConceptBank::with_snapshot(next(), next(), env.captions)?;
    let head = LinearHead {
        weights: next(),
        bias: next().into_vec(),
    };
    let residual = ResidualBranch {
        vectors: next(),
        weights: next(),
        bias: next().into_vec(),
    };
    CbmModel::new(bank, head, residual)
}

pub fn encode_stats(stats: &ClassStats) -> Result<Vec<u8>> {
    let l = stats.class_count();
    let mut blocks = Vec::with_capacity(3 * l + 1);
    for y in 0..l {
        for part in ["mean", "cov", "inv"] {
            blocks.push(format!("{part}_{y}"));
        }
    }
    blocks.push("counts".to_string());
    let envelope = StatsEnvelope {
        schema_version: SCHEMA_VERSION,
        classes: l,
        concepts: stats.dim(),
        blocks,
    };
    let mut out = frame(STATS_MAGIC, &envelope)?;
    for g in stats.classes() {
        encode_matrix(&mut out, &row(&g.mean), Dtype::F64)?;
        encode_matrix(&mut out, &g.cov, Dtype::F64)?;
        encode_matrix(&mut out, &g.inv, Dtype::F64)?;
    }
    let counts: Vec<usize> = stats.classes().iter().map(|g| g.count).collect();
    encode_labels(&mut out, &counts)?;
    Ok(out)
}

pub fn decode_stats(bytes: &[u8]) -> Result<ClassStats> {
    let (env, rest): (StatsEnvelope, _) = unframe(STATS_MAGIC, bytes)?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(CondaError::Format(format!(
            "unsupported stats schema {}",
            env.schema_version
        )));
    }
    let (l, m) = (env.classes, env.concepts);
    if env.blocks.len() != 3 * l + 1 {
        return Err(CondaError::Format(format!(
            "{} blocks for {l} classes",
            env.blocks.len()
        )));
    }
    let mut data = read_blocks(rest, &env.blocks)?.into_iter();
    let mut classes = Vec::with_capacity(l);
    for y in 0..l {
        let mean = expect_matrix(data.next().expect("counted"), &format!("mean_{y}"), (1, m))?;
        let cov = expect_matrix(data.next().expect("counted"), &format!("cov_{y}"), (m, m))?;
        let inv = expect_matrix(data.next().expect("counted"), &format!("inv_{y}"), (m, m))?;
        classes.push(ClassGaussian {
            mean: mean.into_vec(),
            cov,
            inv,
            count: 0,
        });
    }
    match data.next().expect("counted") {
        EmbData::Labels(counts) if counts.len() == l => {
            for (g, c) in classes.iter_mut().zip(counts) {
                g.count = c as usize;
            }
        }
        _ => return Err(CondaError::Format("counts block must hold one u32 per class".into())),
    }
    ClassStats::from_parts(classes)
}

pub fn write_model(path: impl AsRef<Path>, model: &CbmModel) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model(model)?)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<CbmModel> {
    decode_model(&fs::read(path)?)
}

pub fn write_stats(path: impl AsRef<Path>, stats: &ClassStats) -> Result<()> {
    write_atomic(path.as_ref(), &encode_stats(stats)?)
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<ClassStats> {
    decode_stats(&fs::read(path)?)
}
