//! GMDL model checkpoint: magic "GMDL", version u32, header-length u32,
//! JSON header (spec, parameter names, config hash), then one GTEN block
//! per parameter followed by (mean, var) GTEN blocks per BN layer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::io::{read_gten, write_gten};

use super::{BnRunning, Model, ModelError, ModelResult, ModelSpec};

const GMDL_MAGIC: &[u8; 4] = b"GMDL";
const GMDL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    param_names: Vec<String>,
    bn_layers: usize,
    config_hash: String,
}

pub fn save_model(path: &Path, model: &Model, config_hash: &str) -> ModelResult<()> {
    let header = Header {
        spec: model.spec.clone(),
        param_names: model.param_names.clone(),
        bn_layers: model.bn_running.len(),
        config_hash: config_hash.to_string(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GMDL_MAGIC)?;
    w.write_all(&GMDL_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for p in &model.params {
        write_gten(&mut w, p)?;
    }
    for bn in &model.bn_running {
        write_gten(&mut w, &bn.mean)?;
        write_gten(&mut w, &bn.var)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint; returns the model and the config hash it embeds.
pub fn load_model(path: &Path) -> ModelResult<(Model, String)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GMDL_MAGIC {
        return Err(ModelError::Format(format!(
            "bad magic {magic:?} at offset 0, expected \"GMDL\""
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != GMDL_VERSION {
        return Err(ModelError::Format(format!("unsupported GMDL version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| ModelError::Format(e.to_string()))?;

    let mut params = Vec::with_capacity(header.param_names.len());
    for _ in 0..header.param_names.len() {
        params.push(read_gten(&mut r)?);
    }
    let mut bn_running = Vec::with_capacity(header.bn_layers);
    for _ in 0..header.bn_layers {
        let mean = read_gten(&mut r)?;
        let var = read_gten(&mut r)?;
        bn_running.push(BnRunning { mean, var });
    }

    Ok((
        Model {
            spec: header.spec,
            params,
            param_names: header.param_names,
            bn_running,
        },
        header.config_hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init, Activation, ModelSpec};
    use crate::tensor::Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = ModelSpec::convnet_s(&[1, 8, 8], 10, Activation::Relu).unwrap();
        let mut rng = Rng::new(17);
        let model = init(&spec, &mut rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.gmdl");
        save_model(&path, &model, "cafebabe").unwrap();
        let (back, hash) = load_model(&path).unwrap();

        assert_eq!(hash, "cafebabe");
        assert_eq!(back.spec, model.spec);
        assert_eq!(back.param_names, model.param_names);
        for (a, b) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in model.bn_running.iter().zip(back.bn_running.iter()) {
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.var, b.var);
        }
    }
}
