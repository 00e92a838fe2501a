use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnetConfig, ModelBundle};
use crate::codec::{self, Record};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Tensor};

pub const MAGIC: &[u8; 8] = b"EBALNET1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: HarnetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    step: u64,
    #[serde(flatten)]
    config: AdamConfig,
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                config: o.config,
            }),
        };
        let text = toml::to_string(&header)?;
        let mut w = codec::Writer::new(MAGIC, FORMAT_VERSION, &text);
        let names = self.network.param_names();
        let mut name_iter = names.iter();
        for (i, layer) in self.network.layers.iter().enumerate() {
            for p in &layer.params {
                w.tensor(
                    name_iter.next().expect("one name per tensor"),
                    p.shape(),
                    p.data(),
                );
            }
            if let Some(rs) = &layer.running {
                let base = format!("layer{i:02}.{}", layer.spec.name());
                w.tensor(&format!("{base}.running_mean"), &[rs.mean.len()], &rs.mean);
                w.tensor(&format!("{base}.running_var"), &[rs.var.len()], &rs.var);
            }
        }
        if let Some(opt) = &self.optimizer {
            for (name, m) in names.iter().zip(&opt.first) {
                w.tensor(&format!("adam.m.{name}"), m.shape(), m.data());
            }
            for (name, v) in names.iter().zip(&opt.second) {
                w.tensor(&format!("adam.v.{name}"), v.shape(), v.data());
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (text, records) = codec::read(bytes, MAGIC, FORMAT_VERSION)?;
        let header: Header = toml::from_str(&text)?;
        let mut bundle = ModelBundle {
            network: header.config.network()?,
            config: header.config,
            optimizer: None,
        };
        let mut recs = records.into_iter();
        let mut next = |name: &str, shape: &[usize]| -> Result<Record> {
            let r = recs
                .next()
                .ok_or_else(|| Error::Malformed(format!("missing tensor {name}")))?;
            if r.name != name {
                return Err(Error::Malformed(format!(
                    "expected tensor {name}, found {}",
                    r.name
                )));
            }
            if r.shape != shape {
                return Err(Error::shape(name, shape, &r.shape));
            }
            Ok(r)
        };
        let names = bundle.network.param_names();
        let mut name_iter = names.iter();
        for (i, layer) in bundle.network.layers.iter_mut().enumerate() {
            for p in layer.params.iter_mut() {
                let name = name_iter.next().expect("one name per tensor");
                let r = next(name, p.shape())?;
                *p = Tensor::new(r.shape.clone(), r.to_f64())?;
            }
            if let Some(rs) = layer.running.as_mut() {
                let base = format!("layer{i:02}.{}", layer.spec.name());
                rs.mean = next(&format!("{base}.running_mean"), &[rs.mean.len()])?.to_f64();
                rs.var = next(&format!("{base}.running_var"), &[rs.var.len()])?.to_f64();
            }
        }
        if let Some(oh) = header.optimizer {
            let shapes = bundle.network.param_shapes();
            let mut st = AdamState::new(oh.config, &shapes);
            st.step = oh.step;
            for (k, name) in names.iter().enumerate() {
                st.first[k] = Tensor::new(
                    shapes[k].clone(),
                    next(&format!("adam.m.{name}"), &shapes[k])?.to_f64(),
                )?;
            }
            for (k, name) in names.iter().enumerate() {
                st.second[k] = Tensor::new(
                    shapes[k].clone(),
                    next(&format!("adam.v.{name}"), &shapes[k])?.to_f64(),
                )?;
            }
            bundle.optimizer = Some(st);
        }
        if let Some(extra) = recs.next() {
            return Err(Error::Malformed(format!(
                "unexpected tensor {}",
                extra.name
            )));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut m = ModelBundle::build(HarnetConfig::default(), 5).unwrap();
        m.optimizer_mut().step = 17;
        let bytes = m.to_bytes().unwrap();
        let back = ModelBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, m.quantized());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let m = ModelBundle::build(HarnetConfig::with_classes(2, 32), 5).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"EBALNET1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
        assert!(text.starts_with("[config]"), "{text}");
        // first record
        let p = 16 + hlen;
        let nlen = u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as usize;
        assert_eq!(&bytes[p + 4..p + 4 + nlen], b"layer00.conv1d.weight");
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let m = ModelBundle::build(HarnetConfig::default(), 5).unwrap();
        let mut bytes = m.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        assert!(matches!(
            ModelBundle::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }
}
