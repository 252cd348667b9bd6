//! `.npz` archives: a zip of `.npy` members. Writes are uncompressed with a
//! fixed timestamp so identical contents give identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use super::npy::{self, NpyArray};
use crate::error::{Error, Result};

/// All members of an archive, in stored order, keyed without the `.npy` suffix.
#[derive(Clone, Debug, Default)]
pub struct NpzArchive {
    entries: Vec<(String, Vec<u8>)>,
}

impl NpzArchive {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut zip = ZipArchive::new(BufReader::new(file)).map_err(|e| {
            Error::format(
                path.display().to_string(),
                format!("not a zip archive: {e}"),
            )
        })?;
        let mut entries = Vec::with_capacity(zip.len());
        for i in 0..zip.len() {
            let mut member = zip
                .by_index(i)
                .map_err(|e| Error::format(format!("member #{i}"), e.to_string()))?;
            let name = member
                .name()
                .map_err(|e| Error::format(format!("member #{i}"), e.to_string()))?
                .to_string();
            let mut bytes = Vec::with_capacity(member.size() as usize);
            member
                .read_to_end(&mut bytes)
                .map_err(|e| Error::format(name.clone(), e.to_string()))?;
            let key = name.strip_suffix(".npy").unwrap_or(&name).to_string();
            entries.push((key, bytes));
        }
        Ok(Self { entries })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.raw(name).is_some()
    }

    /// Undecoded member bytes; non-array members keep their full file name.
    pub fn raw(&self, name: &str) -> Option<&[u8]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn array(&self, name: &str) -> Result<NpyArray> {
        let bytes = self
            .raw(name)
            .ok_or_else(|| Error::format(name, "missing entry"))?;
        npy::decode(bytes, name)
    }
}

/// Builds an archive in memory order and writes it in one go.
#[derive(Debug, Default)]
pub struct NpzWriter {
    entries: Vec<(String, Vec<u8>)>,
}

impl NpzWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn array(&mut self, name: &str, array: &NpyArray) -> &mut Self {
        self.entries
            .push((format!("{name}.npy"), npy::encode(array)));
        self
    }

    /// Adds a member stored verbatim under `file_name`.
    pub fn raw(&mut self, file_name: &str, bytes: Vec<u8>) -> &mut Self {
        self.entries.push((file_name.to_string(), bytes));
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let to_err = |e: zip::result::ZipError| Error::io(path, std::io::Error::other(e));
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut zip = ZipWriter::new(BufWriter::new(file));
        let opts = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(DateTime::default())
            .large_file(
                self.entries
                    .iter()
                    .any(|(_, b)| b.len() as u64 >= u32::MAX as u64),
            );
        for (name, bytes) in &self.entries {
            zip.start_file(name.as_str(), opts).map_err(to_err)?;
            zip.write_all(bytes).map_err(|e| Error::io(path, e))?;
        }
        let mut inner = zip.finish().map_err(to_err)?;
        inner.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npz");
        let imgs = NpyArray::U8 {
            shape: vec![2, 2, 2],
            data: (0..8).collect(),
        };
        let labels = NpyArray::I64 {
            shape: vec![2, 1],
            data: vec![1, 0],
        };
        NpzWriter::new()
            .array("train_images", &imgs)
            .array("train_labels", &labels)
            .raw("config.txt", b"k=v\n".to_vec())
            .write(&path)
            .unwrap();
        let ar = NpzArchive::read(&path).unwrap();
        assert_eq!(
            ar.names().collect::<Vec<_>>(),
            ["train_images", "train_labels", "config.txt"]
        );
        assert_eq!(ar.array("train_images").unwrap(), imgs);
        assert_eq!(ar.array("train_labels").unwrap(), labels);
        assert_eq!(ar.raw("config.txt").unwrap(), b"k=v\n");
    }

    #[test]
    fn output_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = NpyArray::F64 {
            shape: vec![3],
            data: vec![1.0, 2.0, 3.0],
        };
        let (p1, p2) = (dir.path().join("1.npz"), dir.path().join("2.npz"));
        NpzWriter::new().array("x", &a).write(&p1).unwrap();
        NpzWriter::new().array("x", &a).write(&p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn missing_entry_and_garbage_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npz");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(NpzArchive::read(&path), Err(Error::Format { .. })));
        let ar = NpzArchive::default();
        assert!(
            matches!(ar.array("val_images"), Err(Error::Format { ref entry, .. }) if entry == "val_images")
        );
    }
}
