use std::fs;
use std::path::Path;

use super::{Dataset, ImageRecord, PIXELS};
use crate::error::{Error, Result};

/// One label byte followed by 1024 R, 1024 G and 1024 B bytes.
pub const RECORD_BYTES: usize = 1 + PIXELS;

fn parse(path: &Path, bytes: &[u8]) -> Result<Vec<ImageRecord>> {
    let format = |detail: String| Error::Format { path: path.to_path_buf(), detail };
    if bytes.is_empty() {
        return Err(format("empty file".into()));
    }
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(format(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records (truncated?)",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| ImageRecord::new(rec[0], rec[1..].to_vec()).map_err(|e| format(format!("record {i}: {e}"))))
        .collect()
}

/// Reads one CIFAR-10 binary batch file.
pub fn load_cifar(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Dataset { records: parse(path, &bytes)? })
}

/// Loads the training batches (`data_batch_*.bin`) or `test_batch.bin` of
/// a CIFAR-10 binary directory, in file-name order.
pub fn load_cifar_split(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if train {
                name.starts_with("data_batch") && name.ends_with(".bin")
            } else {
                name == "test_batch.bin"
            }
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            detail: format!("no {} batch files", if train { "training" } else { "test" }),
        });
    }
    let mut records = Vec::new();
    for f in files {
        records.extend(load_cifar(&f)?.records);
    }
    Ok(Dataset { records })
}

pub fn serialize(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * RECORD_BYTES);
    for r in &data.records {
        out.push(r.label());
        out.extend_from_slice(r.pixels());
    }
    out
}

/// Writes `data` in the CIFAR-10 binary layout via a temporary file.
pub fn write_cifar(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    crate::config::write_atomic(path.as_ref(), &serialize(data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_is_first_byte_and_round_trip() {
        let mut bytes = Vec::new();
        for i in 0..3u8 {
            bytes.push(i);
            bytes.extend((0..PIXELS).map(|p| (p as u8).wrapping_mul(i + 1)));
        }
        let recs = parse(Path::new("mem"), &bytes).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].label(), 2);
        assert_eq!(serialize(&Dataset { records: recs }), bytes);
    }

    #[test]
    fn truncation_and_bad_labels_rejected() {
        let mut bytes = vec![0u8; RECORD_BYTES * 2];
        assert!(parse(Path::new("mem"), &bytes[..RECORD_BYTES + 5]).is_err());
        assert!(parse(Path::new("mem"), &[]).is_err());
        bytes[RECORD_BYTES] = 11;
        let err = parse(Path::new("mem"), &bytes).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
    }
}
