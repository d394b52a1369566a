//! LSTM sequence encoder. The feature is the last hidden state.

use super::bundle::ModelBundle;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Time-major view of several episodes padded to a common length.
///
/// Shorter episodes stop updating once they run out of steps, so each row's
/// final state equals what the episode would produce on its own.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    batch: usize,
    input_dim: usize,
    /// Per step, `[batch×input_dim]`.
    steps: Vec<Tensor>,
    /// Per step, which rows still have input.
    active: Vec<Vec<bool>>,
}

impl SeqBatch {
    pub fn from_episodes(episodes: &[&Tensor]) -> Result<Self> {
        let Some(first) = episodes.first() else {
            return Err(Error::EmptySequence("no episodes in batch".into()));
        };
        if first.rank() != 2 {
            return Err(Error::Shape(format!("episode of shape {:?}; expected [T×features]", first.shape())));
        }
        let input_dim = first.shape()[1];
        let mut max_t = 0;
        for ep in episodes {
            if ep.rank() != 2 || ep.shape()[1] != input_dim {
                return Err(Error::Shape(format!(
                    "episode of shape {:?} in a batch of width {}",
                    ep.shape(),
                    input_dim
                )));
            }
            if ep.shape()[0] == 0 {
                return Err(Error::EmptySequence("episode has no time steps".into()));
            }
            max_t = max_t.max(ep.shape()[0]);
        }
        let batch = episodes.len();
        let mut steps = Vec::with_capacity(max_t);
        let mut active = Vec::with_capacity(max_t);
        for t in 0..max_t {
            let mut data = vec![0.0; batch * input_dim];
            let mut mask = vec![false; batch];
            for (b, ep) in episodes.iter().enumerate() {
                if t < ep.shape()[0] {
                    data[b * input_dim..(b + 1) * input_dim].copy_from_slice(ep.row(t));
                    mask[b] = true;
                }
            }
            steps.push(Tensor::new(vec![batch, input_dim], data)?);
            active.push(mask);
        }
        Ok(Self {
            batch,
            input_dim,
            steps,
            active,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs the LSTM over a batch and returns the `[batch×hidden]` features.
pub fn seq_encode_batch(g: &mut Graph, bundle: &ModelBundle, batch: &SeqBatch) -> Result<NodeId> {
    let spec = &bundle.spec.seq;
    if batch.input_dim != spec.input_dim {
        return Err(Error::Shape(format!(
            "episode width {} but the encoder expects {}",
            batch.input_dim, spec.input_dim
        )));
    }
    let h_dim = spec.hidden_dim;
    let b = batch.batch;
    let w_x = g.param(&bundle.store, bundle.seq.w_x);
    let w_h = g.param(&bundle.store, bundle.seq.w_h);
    let bias = g.param(&bundle.store, bundle.seq.bias);

    let mut h = g.constant(Tensor::zeros(&[b, h_dim]));
    let mut c = g.constant(Tensor::zeros(&[b, h_dim]));
    for (t, x_t) in batch.steps.iter().enumerate() {
        let x = g.constant(x_t.clone());
        let from_x = g.matmul(x, w_x)?;
        let from_h = g.matmul(h, w_h)?;
        let pre = g.add(from_x, from_h)?;
        let gates = g.add_bias(pre, bias)?;

        let i_pre = g.narrow(gates, 0, h_dim)?;
        let f_pre = g.narrow(gates, h_dim, h_dim)?;
        let g_pre = g.narrow(gates, 2 * h_dim, h_dim)?;
        let o_pre = g.narrow(gates, 3 * h_dim, h_dim)?;
        let input_gate = g.sigmoid(i_pre);
        let forget_gate = g.sigmoid(f_pre);
        let candidate = g.tanh(g_pre);
        let output_gate = g.sigmoid(o_pre);

        let kept = g.mul(forget_gate, c)?;
        let written = g.mul(input_gate, candidate)?;
        let c_new = g.add(kept, written)?;
        let c_act = g.tanh(c_new);
        let h_new = g.mul(output_gate, c_act)?;

        let mask = &batch.active[t];
        if mask.iter().all(|&a| a) {
            h = h_new;
            c = c_new;
        } else {
            // m·new + (1−m)·old with m ∈ {0,1} reproduces `new` exactly on
            // active rows and `old` exactly on finished ones.
            let keep: Vec<f64> = mask
                .iter()
                .flat_map(|&a| std::iter::repeat_n(if a { 1.0 } else { 0.0 }, h_dim))
                .collect();
            let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            let keep = g.constant(Tensor::new(vec![b, h_dim], keep)?);
            let drop = g.constant(Tensor::new(vec![b, h_dim], drop)?);
            h = blend(g, h_new, h, keep, drop)?;
            c = blend(g, c_new, c, keep, drop)?;
        }
    }
    Ok(h)
}

fn blend(g: &mut Graph, new: NodeId, old: NodeId, keep: NodeId, drop: NodeId) -> Result<NodeId> {
    let a = g.mul(new, keep)?;
    let b = g.mul(old, drop)?;
    g.add(a, b)
}

/// Encodes one `[T×input]` episode into a `[hidden]` feature vector.
pub fn seq_encode(g: &mut Graph, bundle: &ModelBundle, episode: &Tensor) -> Result<NodeId> {
    if episode.rank() == 2 && episode.shape()[0] == 0 {
        return Err(Error::EmptySequence("episode has no time steps".into()));
    }
    let batch = SeqBatch::from_episodes(&[episode])?;
    let h = seq_encode_batch(g, bundle, &batch)?;
    g.reshape(h, vec![bundle.spec.seq.hidden_dim])
}
