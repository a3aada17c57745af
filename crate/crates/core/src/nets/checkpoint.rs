use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Integrator, IntegratorConfig, LstmIntegrator, NetError, ParamStore, TransformerIntegrator};
use crate::diffcore::DenseArray;

const MAGIC: &[u8; 8] = b"SDRECKPT";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: IntegratorConfig,
    seed: u64,
    params: Vec<Entry>,
}

/// Writes magic, u64 LE header length, JSON header, then all parameters as LE f64.
pub fn save_checkpoint<W: Write>(mut w: W, model: &Integrator, seed: u64) -> Result<(), NetError> {
    let store = model.params();
    let header = Header {
        config: model.config(),
        seed,
        params: store
            .iter()
            .map(|(_, name, v)| Entry {
                name: name.to_string(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, v) in store.iter() {
        for x in v.values() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]; returns the model and its seed.
pub fn load_checkpoint<R: Read>(mut r: R) -> Result<(Integrator, u64), NetError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let total: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(NetError::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    let mut store = ParamStore::new();
    for e in header.params {
        let n = e.shape.iter().product();
        let v: Vec<f64> = values.by_ref().take(n).collect();
        store.add(e.name, DenseArray::new(e.shape, v)?);
    }
    let model = match header.config {
        IntegratorConfig::Lstm(c) => Integrator::Lstm(LstmIntegrator::with_params(c, store)?),
        IntegratorConfig::Transformer(c) => Integrator::Transformer(TransformerIntegrator::with_params(c, store)?),
    };
    Ok((model, header.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ActivationKind, LstmConfig, PoolingKind, TransformerConfig};

    #[test]
    fn roundtrip_is_bit_exact() {
        let configs = [
            IntegratorConfig::Lstm(LstmConfig {
                layernorm: true,
                ..LstmConfig::new(3, 4, 2, ActivationKind::b2bsqrt())
            }),
            IntegratorConfig::Transformer(TransformerConfig {
                model_dim: 8,
                heads: 2,
                ..TransformerConfig::new(3, 3, 2, PoolingKind::OneToken)
            }),
        ];
        for config in configs {
            let model = Integrator::new(&config, 17).unwrap();
            let mut buf = Vec::new();
            save_checkpoint(&mut buf, &model, 17).unwrap();
            let (back, seed) = load_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(seed, 17);
            assert_eq!(back, model);
            let w = [0.1, -0.4, 2.0, 0.3, 0.3, -1.0];
            assert_eq!(back.posterior(&w).unwrap(), model.posterior(&w).unwrap());
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let model = Integrator::new(&IntegratorConfig::Lstm(LstmConfig::new(2, 2, 2, ActivationKind::Tanh)), 0).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &model, 0).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(load_checkpoint(buf.as_slice()), Err(NetError::Checkpoint(_))));
        assert!(load_checkpoint(&b"NOTACKPT"[..]).is_err());
    }
}
