//! Parameter checkpoints: `params.glab` holds one tensor dump per parameter,
//! back to back; `manifest.txt` lists `name shape offset` per tensor after
//! `# key = value` header lines describing the architecture.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::diffusion::VarianceMode;
use crate::error::{Error, Result};
use crate::numerics::{Grid, Tensor};

use super::{Denoiser, DenoiserOutput, MlpConfig, MlpDenoiser, ParamSet, TinyConfig, TinyDenoiser, Trainable};

pub const PARAMS_FILE: &str = "params.glab";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Either trainable architecture, as stored in a checkpoint.
#[derive(Clone, Debug)]
pub enum SavedModel {
    Tiny(TinyDenoiser),
    Mlp(MlpDenoiser),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Tiny(_) => "tiny",
            SavedModel::Mlp(_) => "mlp",
        }
    }

    fn header(&self) -> Vec<(&'static str, String)> {
        match self {
            SavedModel::Tiny(m) => {
                let c = m.config();
                vec![
                    ("in_channels", c.in_channels.to_string()),
                    ("size", c.size.to_string()),
                    ("features", c.features.to_string()),
                    ("heads", c.heads.to_string()),
                    ("attn_layers", c.attn_layers.to_string()),
                    ("time_dim", c.time_dim.to_string()),
                    ("num_classes", c.num_classes.to_string()),
                    ("variance_mode", c.variance_mode.name().to_string()),
                ]
            }
            SavedModel::Mlp(m) => {
                let c = m.config();
                vec![
                    ("dim", c.dim.to_string()),
                    ("hidden", c.hidden.to_string()),
                    ("time_dim", c.time_dim.to_string()),
                    ("num_classes", c.num_classes.to_string()),
                    ("variance_mode", c.variance_mode.name().to_string()),
                ]
            }
        }
    }
}

impl Denoiser for SavedModel {
    fn predict(&self, x_t: &Grid, t: usize, class: Option<usize>) -> Result<DenoiserOutput> {
        match self {
            SavedModel::Tiny(m) => m.predict(x_t, t, class),
            SavedModel::Mlp(m) => m.predict(x_t, t, class),
        }
    }

    fn sample_shape(&self) -> (usize, usize, usize) {
        match self {
            SavedModel::Tiny(m) => m.sample_shape(),
            SavedModel::Mlp(m) => m.sample_shape(),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            SavedModel::Tiny(m) => m.num_classes(),
            SavedModel::Mlp(m) => m.num_classes(),
        }
    }

    fn attention_layers(&self) -> Vec<String> {
        match self {
            SavedModel::Tiny(m) => m.attention_layers(),
            SavedModel::Mlp(m) => m.attention_layers(),
        }
    }
}

impl Trainable for SavedModel {
    fn params(&self) -> &ParamSet {
        match self {
            SavedModel::Tiny(m) => m.params(),
            SavedModel::Mlp(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            SavedModel::Tiny(m) => m.params_mut(),
            SavedModel::Mlp(m) => m.params_mut(),
        }
    }

    fn example_grad(&self, x_t: &Grid, t: usize, class: Option<usize>, target: &Grid) -> Result<(f64, ParamSet)> {
        match self {
            SavedModel::Tiny(m) => m.example_grad(x_t, t, class, target),
            SavedModel::Mlp(m) => m.example_grad(x_t, t, class, target),
        }
    }
}

/// Serializes to `(manifest text, tensor bytes)`.
pub fn encode(model: &SavedModel) -> Result<(String, Vec<u8>)> {
    let mut manifest = format!("# kind = {}\n", model.kind());
    for (k, v) in model.header() {
        manifest.push_str(&format!("# {k} = {v}\n"));
    }
    let mut bytes = Vec::new();
    for p in model.params().iter() {
        let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {} {}\n", p.name, shape.join("x"), bytes.len()));
        Tensor::new(p.shape.clone(), p.data.clone())?.write_to(&mut bytes)?;
    }
    Ok((manifest, bytes))
}

pub fn decode(manifest: &str, bytes: &[u8]) -> Result<SavedModel> {
    let mut header = BTreeMap::new();
    let mut entries = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, offset] = fields[..] else {
            return Err(Error::Format(format!("manifest line {}: expected `name shape offset`", lineno + 1)));
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {}: bad offset", lineno + 1)))?;
        entries.push((name.to_string(), shape.to_string(), offset));
    }

    let mut params = ParamSet::new();
    for (name, shape, offset) in &entries {
        let tail = bytes
            .get(*offset..)
            .ok_or_else(|| Error::Format(format!("offset {offset} of {name} past end of tensor file")))?;
        let t = Tensor::read_from(&mut Cursor::new(tail))?;
        let dims: Vec<String> = t.dims.iter().map(|d| d.to_string()).collect();
        if dims.join("x") != *shape {
            return Err(Error::Format(format!("{name}: manifest shape {shape}, stored {}", dims.join("x"))));
        }
        params.push(name.clone(), t.dims, t.data);
    }

    let get = |k: &str| -> Result<&String> {
        header
            .get(k)
            .ok_or_else(|| Error::Format(format!("checkpoint header lacks `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint header `{k}` is not a count")))
    };
    let variance_mode = VarianceMode::parse(get("variance_mode")?)?;
    match get("kind")?.as_str() {
        "tiny" => {
            let config = TinyConfig {
                in_channels: num("in_channels")?,
                size: num("size")?,
                features: num("features")?,
                heads: num("heads")?,
                attn_layers: num("attn_layers")?,
                time_dim: num("time_dim")?,
                num_classes: num("num_classes")?,
                variance_mode,
            };
            Ok(SavedModel::Tiny(TinyDenoiser::from_params(config, params)?))
        }
        "mlp" => {
            let config = MlpConfig {
                dim: num("dim")?,
                hidden: num("hidden")?,
                time_dim: num("time_dim")?,
                num_classes: num("num_classes")?,
                variance_mode,
            };
            Ok(SavedModel::Mlp(MlpDenoiser::from_params(config, params)?))
        }
        other => Err(Error::Format(format!("unknown checkpoint kind `{other}`"))),
    }
}

pub fn save(model: &SavedModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, bytes) = encode(model)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<SavedModel> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    decode(&manifest, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_round(p: &ParamSet) -> Vec<f64> {
        p.iter().flat_map(|q| q.data.iter().map(|&v| v as f32 as f64)).collect()
    }

    #[test]
    fn round_trip_tiny_and_mlp() {
        let tiny = SavedModel::Tiny(
            TinyDenoiser::new(
                TinyConfig {
                    size: 8,
                    features: 8,
                    heads: 2,
                    num_classes: 3,
                    ..TinyConfig::default()
                },
                4,
            )
            .unwrap(),
        );
        let mlp = SavedModel::Mlp(MlpDenoiser::new(MlpConfig::default(), 5).unwrap());
        for m in [tiny, mlp] {
            let (manifest, bytes) = encode(&m).unwrap();
            assert!(manifest.starts_with(&format!("# kind = {}\n", m.kind())));
            let back = decode(&manifest, &bytes).unwrap();
            assert_eq!(back.kind(), m.kind());
            let restored: Vec<f64> = back.params().iter().flat_map(|q| q.data.clone()).collect();
            assert_eq!(restored, f32_round(m.params()));
            assert_eq!(encode(&back).unwrap().1, bytes);
        }
    }

    #[test]
    fn corrupted_manifest_is_rejected() {
        let m = SavedModel::Mlp(MlpDenoiser::new(MlpConfig::default(), 5).unwrap());
        let (manifest, bytes) = encode(&m).unwrap();
        assert!(decode(&manifest.replace("kind = mlp", "kind = unet"), &bytes).is_err());
        assert!(decode(&manifest.replace("fc1.weight 64x2", "fc1.weight 2x64"), &bytes).is_err());
        assert!(decode(&manifest, &bytes[..100]).is_err());
    }
}
