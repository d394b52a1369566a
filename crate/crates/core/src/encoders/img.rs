//! Residual CNN image encoder.

use super::bundle::ModelBundle;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Encodes a `[batch×channels×side×side]` stack into `[batch×features]`.
///
/// stem (stride 2) → relu → per stage: [downsample (stride 2) → relu] →
/// blocks of `relu(x + conv(relu(conv(x))))` → global average pool.
pub fn img_encode_batch(g: &mut Graph, bundle: &ModelBundle, images: &Tensor) -> Result<NodeId> {
    let spec = &bundle.spec.img;
    let s = images.shape();
    if s.len() != 4 || s[1] != spec.in_channels || s[2] != spec.image_side || s[3] != spec.image_side {
        return Err(Error::Shape(format!(
            "images of shape {:?}; expected [batch×{}×{}×{}]",
            s, spec.in_channels, spec.image_side, spec.image_side
        )));
    }
    let x = g.constant(images.clone());
    let stem = g.param(&bundle.store, bundle.img.stem);
    let x = g.conv2d(x, stem, 2)?;
    let mut x = g.relu(x);
    for stage in &bundle.img.stages {
        if let Some(down) = stage.downsample {
            let k = g.param(&bundle.store, down);
            let y = g.conv2d(x, k, 2)?;
            x = g.relu(y);
        }
        for block in &stage.blocks {
            let k1 = g.param(&bundle.store, block.conv1);
            let k2 = g.param(&bundle.store, block.conv2);
            let r = g.conv2d(x, k1, 1)?;
            let r = g.relu(r);
            let r = g.conv2d(r, k2, 1)?;
            let sum = g.add(x, r)?;
            x = g.relu(sum);
        }
    }
    g.global_avg_pool(x)
}

/// Encodes one `[channels×side×side]` image into a `[features]` vector.
pub fn img_encode(g: &mut Graph, bundle: &ModelBundle, image: &Tensor) -> Result<NodeId> {
    if image.rank() != 3 {
        return Err(Error::Shape(format!("image of shape {:?}; expected rank 3", image.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batched = image.clone().reshaped(shape)?;
    let f = img_encode_batch(g, bundle, &batched)?;
    g.reshape(f, vec![bundle.spec.img.feature_dim()])
}
