use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, TensorEntry, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Backbone, BackboneConfig, BackboneParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEPCKPT1";

const BACKBONE_KIND: &str = "backbone";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    kind: String,
    config: BackboneConfig,
    frozen: bool,
    tensors: Vec<TensorEntry>,
}

/// Writes every parameter as little-endian f32 in manifest order.
pub fn save_checkpoint(path: &Path, backbone: &Backbone) -> Result<()> {
    let mut payload = Vec::new();
    let mut named = Vec::new();
    backbone.params.for_each(&mut |name, t| named.push((name, t.clone())));
    let tensors = container::encode_tensors(named.iter().map(|(n, t)| (n.clone(), t)), &mut payload);
    let header = Header {
        version: FORMAT_VERSION,
        kind: BACKBONE_KIND.into(),
        config: backbone.config.clone(),
        frozen: backbone.is_frozen(),
        tensors,
    };
    container::write(path, CHECKPOINT_MAGIC, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Backbone> {
    let (header, payload): (Header, _) = container::read(path, CHECKPOINT_MAGIC)?;
    container::check_version(path, header.version)?;
    if header.kind != BACKBONE_KIND {
        return Err(Error::format(path, format!("expected a backbone checkpoint, found kind {}", header.kind)));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::format(path, format!("header config: {e}")))?;

    // The config alone determines the expected manifest.
    let mut params = BackboneParams::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0));
    let mut expected = Vec::new();
    params.for_each(&mut |name, t| expected.push((name, t.shape().to_vec())));
    if expected.len() != header.tensors.len() {
        return Err(Error::format(
            path,
            format!("manifest has {} tensors, config implies {}", header.tensors.len(), expected.len()),
        ));
    }
    let mut loaded: Vec<Tensor> = Vec::with_capacity(expected.len());
    let mut cursor = 0;
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape || entry.offset != cursor {
            return Err(Error::format(
                path,
                format!("tensor {} {:?} disagrees with config ({name} {shape:?})", entry.name, entry.shape),
            ));
        }
        cursor += shape.iter().product::<usize>();
        loaded.push(container::decode_tensor(path, entry, &payload)?);
    }
    if cursor * 4 != payload.len() {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, manifest needs {}", payload.len(), cursor * 4),
        ));
    }
    let mut it = loaded.into_iter();
    params.for_each_mut(&mut |_, t| *t = it.next().expect("counted above"));
    Ok(Backbone::from_params(header.config, params, header.frozen))
}
