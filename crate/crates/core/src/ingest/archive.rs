use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_bytes, write_atomic, IngestError};
use crate::bundle::ModelBundle;
use crate::numkit::{BatchNorm, LayerNorm, Linear, Vector};
use crate::router::{CostModel, Thresholds};
use crate::signals::{
    predictor_widths, ConfidencePredictor, ConvergenceConfig, FusionWeights, ProjectionModel,
    ResidualBlock,
};

pub const BUNDLE_MAGIC: &[u8; 4] = b"CRB1";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupSpec {
    name: String,
    len: usize,
}

/// Everything except the raw parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    format_version: u32,
    bundle_version: String,
    hidden_dim: usize,
    projection_depth: usize,
    projection_output_dim: usize,
    projection_dropout: f64,
    layer_norm_eps: Vec<f64>,
    predictor_widths: Vec<usize>,
    predictor_dropout: f64,
    batch_norm_momentum: Vec<f64>,
    batch_norm_eps: Vec<f64>,
    weights: FusionWeights,
    thresholds: Thresholds,
    convergence: ConvergenceConfig,
    cost_model: CostModel,
    groups: Vec<GroupSpec>,
}

fn running_stats(pred: &ConfidencePredictor) -> impl Iterator<Item = &Vector> {
    pred.norms
        .iter()
        .flat_map(|bn| [&bn.running_mean, &bn.running_var])
}

/// Archive bytes: magic, version, metadata length and JSON, f64 parameter
/// blocks (in parameter-group order, then batch-norm running statistics),
/// and a trailing SHA-256 over everything before it.
pub fn encode_bundle(bundle: &ModelBundle) -> Result<Vec<u8>, IngestError> {
    bundle.validate()?;
    let groups = bundle
        .projection
        .param_groups()
        .into_iter()
        .chain(bundle.predictor.param_groups());
    let meta = BundleMeta {
        format_version: BUNDLE_FORMAT_VERSION,
        bundle_version: bundle.bundle_version.clone(),
        hidden_dim: bundle.hidden_dim(),
        projection_depth: bundle.projection.blocks.len(),
        projection_output_dim: bundle.projection.output_dim(),
        projection_dropout: bundle.projection.dropout,
        layer_norm_eps: bundle
            .projection
            .blocks
            .iter()
            .map(|b| b.norm.eps)
            .collect(),
        predictor_widths: predictor_widths(bundle.hidden_dim()).to_vec(),
        predictor_dropout: bundle.predictor.dropout,
        batch_norm_momentum: bundle.predictor.norms.iter().map(|b| b.momentum).collect(),
        batch_norm_eps: bundle.predictor.norms.iter().map(|b| b.eps).collect(),
        weights: bundle.weights,
        thresholds: bundle.thresholds,
        convergence: bundle.convergence,
        cost_model: bundle.cost_model,
        groups: groups
            .clone()
            .map(|(name, g)| GroupSpec { name, len: g.len() })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| IngestError::Bundle(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, g) in groups {
        for v in g {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in running_stats(&bundle.predictor) {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn skeleton(meta: &BundleMeta) -> Result<(ProjectionModel, ConfidencePredictor), IngestError> {
    let h = meta.hidden_dim;
    if h == 0 {
        return Err(IngestError::Bundle("hidden_dim is 0".into()));
    }
    let widths = predictor_widths(h);
    if meta.predictor_widths != widths {
        return Err(IngestError::Bundle(format!(
            "predictor widths {:?} do not match hidden_dim {h} (expected {widths:?})",
            meta.predictor_widths
        )));
    }
    if meta.layer_norm_eps.len() != meta.projection_depth {
        return Err(IngestError::Bundle(format!(
            "{} layer-norm eps values for {} blocks",
            meta.layer_norm_eps.len(),
            meta.projection_depth
        )));
    }
    if meta.batch_norm_momentum.len() != 3 || meta.batch_norm_eps.len() != 3 {
        return Err(IngestError::Bundle(
            "predictor needs 3 batch-norm settings".into(),
        ));
    }
    let proj = ProjectionModel {
        blocks: meta
            .layer_norm_eps
            .iter()
            .map(|eps| ResidualBlock {
                norm: LayerNorm {
                    eps: *eps,
                    ..LayerNorm::new(h)
                },
                linear: Linear::zeros(h, h),
            })
            .collect(),
        output: Linear::zeros(h, meta.projection_output_dim),
        dropout: meta.projection_dropout,
    };
    let mut pred = ConfidencePredictor::zeros(h);
    pred.dropout = meta.predictor_dropout;
    for (k, bn) in pred.norms.iter_mut().enumerate() {
        *bn = BatchNorm {
            momentum: meta.batch_norm_momentum[k],
            eps: meta.batch_norm_eps[k],
            ..BatchNorm::new(widths[k + 1])
        };
    }
    Ok((proj, pred))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn f64s(&mut self, out: &mut [f64]) -> Result<(), IngestError> {
        let need = out.len() * 8;
        if self.bytes.len() - self.pos < need {
            return Err(IngestError::format(self.pos, "parameter block truncated"));
        }
        for (i, v) in out.iter_mut().enumerate() {
            let off = self.pos + 8 * i;
            *v = f64::from_le_bytes(self.bytes[off..off + 8].try_into().expect("8 bytes"));
        }
        self.pos += need;
        Ok(())
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle, IngestError> {
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(IngestError::format(bytes.len(), "bundle too short"));
    }
    if &bytes[..4] != BUNDLE_MAGIC {
        return Err(IngestError::format(0, "bad bundle magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != BUNDLE_FORMAT_VERSION {
        return Err(IngestError::format(
            4,
            format!("unsupported bundle version {version}"),
        ));
    }
    let body_end = bytes.len() - DIGEST_LEN;
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(IngestError::Bundle(
            "checksum mismatch: archive is corrupted".into(),
        ));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let meta_end = usize::try_from(meta_len)
        .ok()
        .and_then(|n| PREFIX_LEN.checked_add(n))
        .filter(|end| *end <= body_end)
        .ok_or_else(|| {
            IngestError::format(8, format!("metadata length {meta_len} exceeds archive"))
        })?;
    let meta: BundleMeta = serde_json::from_slice(&bytes[PREFIX_LEN..meta_end])
        .map_err(|e| IngestError::Bundle(format!("metadata: {e}")))?;
    if meta.format_version != BUNDLE_FORMAT_VERSION {
        return Err(IngestError::Bundle(format!(
            "metadata format_version {}",
            meta.format_version
        )));
    }

    let (mut proj, mut pred) = skeleton(&meta)?;
    let declared: Vec<GroupSpec> = proj
        .param_groups()
        .into_iter()
        .chain(pred.param_groups())
        .map(|(name, g)| GroupSpec { name, len: g.len() })
        .collect();
    if declared.len() != meta.groups.len() {
        return Err(IngestError::Bundle(format!(
            "architecture declares {} parameter groups, archive has {}",
            declared.len(),
            meta.groups.len()
        )));
    }
    for (d, m) in declared.iter().zip(&meta.groups) {
        if d != m {
            return Err(IngestError::Bundle(format!(
                "parameter group mismatch: architecture expects {} with {} values, archive has {} with {}",
                d.name, d.len, m.name, m.len
            )));
        }
    }

    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: meta_end,
    };
    for g in proj.params_mut().into_iter().chain(pred.params_mut()) {
        r.f64s(g)?;
    }
    for bn in &mut pred.norms {
        r.f64s(bn.running_mean.as_mut_slice())?;
        r.f64s(bn.running_var.as_mut_slice())?;
    }
    if r.pos != body_end {
        return Err(IngestError::format(
            r.pos,
            format!("{} unexpected bytes", body_end - r.pos),
        ));
    }

    let bundle = ModelBundle {
        projection: proj,
        predictor: pred,
        weights: meta.weights,
        thresholds: meta.thresholds,
        convergence: meta.convergence,
        cost_model: meta.cost_model,
        bundle_version: meta.bundle_version,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), IngestError> {
    write_atomic(path, &encode_bundle(bundle)?)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, IngestError> {
    decode_bundle(&read_bytes(path)?)
}
