use serde::{Deserialize, Serialize};

use super::bundle::{Linear, ModelBundle};
use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Ehr,
    Cxr,
    Unified,
}

fn affine(g: &mut Graph, bundle: &ModelBundle, layer: Linear, x: NodeId) -> Result<NodeId> {
    let w = g.param(&bundle.store, layer.weight);
    let b = g.param(&bundle.store, layer.bias);
    let z = g.matmul(x, w)?;
    g.add_bias(z, b)
}

impl Head {
    pub fn input_dim(self, bundle: &ModelBundle) -> usize {
        match self {
            Head::Ehr => bundle.spec.seq.feature_dim(),
            Head::Cxr => bundle.spec.img.feature_dim(),
            Head::Unified => bundle.spec.fused_dim(),
        }
    }

    pub fn output_dim(self, bundle: &ModelBundle) -> usize {
        match self {
            Head::Ehr | Head::Unified => bundle.spec.task_labels,
            Head::Cxr => bundle.spec.aux_labels,
        }
    }
}

/// Maps features to label probabilities.
///
/// Accepts a `[features]` vector or a `[batch×features]` matrix and returns
/// probabilities of the matching rank.
pub fn head_forward(g: &mut Graph, bundle: &ModelBundle, head: Head, feature: NodeId) -> Result<NodeId> {
    let shape = g.value(feature).shape().to_vec();
    let expected = head.input_dim(bundle);
    let (x, single) = match shape.as_slice() {
        [n] if *n == expected => (g.reshape(feature, vec![1, *n])?, true),
        [_, n] if *n == expected => (feature, false),
        _ => {
            return Err(Error::Shape(format!(
                "{head:?} head expects features of width {expected}, got {shape:?}"
            )))
        }
    };
    let logits = match head {
        Head::Ehr => affine(g, bundle, bundle.head_ehr, x)?,
        Head::Cxr => affine(g, bundle, bundle.head_cxr, x)?,
        Head::Unified => {
            let hidden = affine(g, bundle, bundle.unified_hidden, x)?;
            let hidden = g.relu(hidden);
            affine(g, bundle, bundle.unified_out, hidden)?
        }
    };
    let probs = g.sigmoid(logits);
    if single {
        g.reshape(probs, vec![head.output_dim(bundle)])
    } else {
        Ok(probs)
    }
}
