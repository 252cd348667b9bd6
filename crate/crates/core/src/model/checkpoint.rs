//! Model checkpoints: one `<f8` array per parameter plus a `config.txt`
//! member holding the architecture as `key=value` lines.

use std::path::Path;

use super::{CMixerConfig, CMixerModel, ParamSet};
use crate::ctensor::RealTensor;
use crate::data::npy::NpyArray;
use crate::data::npz::{NpzArchive, NpzWriter};
use crate::error::{Error, Result};

const CONFIG_MEMBER: &str = "config.txt";

pub fn save(model: &CMixerModel, path: &Path) -> Result<()> {
    let mut writer = NpzWriter::new();
    let config: String = model
        .config()
        .to_kv()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    writer.raw(CONFIG_MEMBER, config.into_bytes());
    for (name, value) in model.params().iter() {
        writer.array(
            name,
            &NpyArray::F64 {
                shape: value.shape().to_vec(),
                data: value.data().to_vec(),
            },
        );
    }
    writer.write(path)
}

pub fn load(path: &Path) -> Result<CMixerModel> {
    let archive = NpzArchive::read(path)?;
    let text = archive
        .raw(CONFIG_MEMBER)
        .ok_or_else(|| Error::format(CONFIG_MEMBER, "missing entry"))?;
    let text = std::str::from_utf8(text).map_err(|_| Error::format(CONFIG_MEMBER, "not UTF-8"))?;
    let pairs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .ok_or_else(|| Error::format(CONFIG_MEMBER, format!("bad line `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let config = CMixerConfig::from_kv(pairs.into_iter().map(|(k, v)| (k.trim(), v.trim())))?;

    let template = CMixerModel::zeros(config.clone())?;
    let mut params = ParamSet::new();
    for (name, expected) in template.params().iter() {
        let (shape, data) = match archive.array(name)? {
            NpyArray::F64 { shape, data } => (shape, data),
            _ => return Err(Error::format(name, "expected <f8 data")),
        };
        if shape != expected.shape() {
            return Err(Error::format(
                name,
                format!("shape {shape:?}, expected {:?}", expected.shape()),
            ));
        }
        params.push(name, RealTensor::new(shape, data)?);
    }
    CMixerModel::from_params(config, params)
}
