//! Portable artifact formats: FMAT binary matrices, index-list point maps,
//! and atomic file writes.
//!
//! FMAT layout: magic "FMAT", u16 version = 1, u32 rows, u32 cols, then
//! rows*cols little-endian f64 values in row-major order. Round-trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use crate::assign::PointMap;
use crate::error::{Error, Result};

pub const FMAT_MAGIC: &[u8; 4] = b"FMAT";
pub const FMAT_VERSION: u16 = 1;

pub fn write_fmat<W: Write>(matrix: &DMatrix<f64>, mut out: W) -> Result<()> {
    out.write_all(FMAT_MAGIC)?;
    out.write_u16::<LittleEndian>(FMAT_VERSION)?;
    out.write_u32::<LittleEndian>(matrix.nrows() as u32)?;
    out.write_u32::<LittleEndian>(matrix.ncols() as u32)?;
    for r in 0..matrix.nrows() {
        for c in 0..matrix.ncols() {
            out.write_f64::<LittleEndian>(matrix[(r, c)])?;
        }
    }
    Ok(())
}

pub fn read_fmat<R: Read>(mut input: R) -> Result<DMatrix<f64>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != FMAT_MAGIC {
        return Err(Error::Parse("bad FMAT magic".into()));
    }
    let version = input.read_u16::<LittleEndian>()?;
    if version != FMAT_VERSION {
        return Err(Error::Parse(format!("unsupported FMAT version {version}")));
    }
    let rows = input.read_u32::<LittleEndian>()? as usize;
    let cols = input.read_u32::<LittleEndian>()? as usize;
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(input.read_f64::<LittleEndian>()?);
    }
    // reject trailing garbage so truncation and padding are both caught
    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(Error::Parse("trailing bytes after FMAT payload".into()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn save_fmat(matrix: &DMatrix<f64>, path: &Path) -> Result<()> {
    atomic_write(path, |out| write_fmat(matrix, out))
}

pub fn load_fmat(path: &Path) -> Result<DMatrix<f64>> {
    read_fmat(BufReader::new(File::open(path)?))
}

/// Hard point map as text: one 0-based target index per line. A single
/// header line `# n_target <count>` pins the target vertex count.
pub fn write_index_map<W: Write>(map: &PointMap, mut out: W) -> Result<()> {
    let indices = map
        .hard_indices()
        .ok_or_else(|| Error::Config("index-list export needs a hard map".into()))?;
    writeln!(out, "# n_target {}", map.n_target())?;
    for &i in indices {
        writeln!(out, "{i}")?;
    }
    Ok(())
}

pub fn read_index_map<R: Read>(input: R, source: &str, target: &str) -> Result<PointMap> {
    let reader = BufReader::new(input);
    let mut indices = Vec::new();
    let mut n_target: Option<usize> = None;
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut words = rest.split_whitespace();
            if words.next() == Some("n_target") {
                let v = words
                    .next()
                    .ok_or_else(|| Error::Parse("n_target header missing value".into()))?;
                n_target =
                    Some(v.parse().map_err(|_| Error::Parse(format!("bad n_target '{v}'")))?);
            }
            continue;
        }
        indices
            .push(line.parse().map_err(|_| Error::Parse(format!("bad map index '{line}'")))?);
    }
    if indices.is_empty() {
        return Err(Error::Parse("empty index-list map".into()));
    }
    let n_target = n_target.unwrap_or_else(|| indices.iter().max().unwrap() + 1);
    PointMap::hard(indices, n_target, source, target)
}

pub fn save_index_map(map: &PointMap, path: &Path) -> Result<()> {
    atomic_write(path, |out| write_index_map(map, out))
}

pub fn load_index_map(path: &Path, source: &str, target: &str) -> Result<PointMap> {
    read_index_map(File::open(path)?, source, target)
}

pub fn save_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    atomic_write(path, |out| {
        serde_json::to_writer_pretty(out, value)?;
        Ok(())
    })
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Writes through a temporary sibling file and renames into place, so
/// readers never observe a partial artifact.
pub fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut out = BufWriter::new(File::create(&tmp)?);
        write(&mut out)?;
        out.flush()?;
        out.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            std::fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fmat_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DMatrix::from_fn(7, 5, |_, _| {
            // exercise subnormals, negatives, exact powers of two
            let v: f64 = rng.gen_range(-1.0..1.0);
            v * 2.0f64.powi(rng.gen_range(-1040..100))
        });
        let mut buf = Vec::new();
        write_fmat(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 4 + 4 + 8 * 7 * 5);
        let back = read_fmat(&buf[..]).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fmat_rejects_corruption() {
        let m = DMatrix::from_element(2, 2, 1.0);
        let mut buf = Vec::new();
        write_fmat(&m, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_fmat(&bad_magic[..]), Err(Error::Parse(_))));

        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(matches!(read_fmat(&bad_version[..]), Err(Error::Parse(_))));

        let truncated = &buf[..buf.len() - 3];
        assert!(read_fmat(truncated).is_err());

        let mut padded = buf.clone();
        padded.push(0);
        assert!(matches!(read_fmat(&padded[..]), Err(Error::Parse(_))));
    }

    #[test]
    fn index_map_roundtrip() {
        let map = PointMap::hard(vec![3, 0, 2, 2], 5, "a", "b").unwrap();
        let mut buf = Vec::new();
        write_index_map(&map, &mut buf).unwrap();
        let back = read_index_map(&buf[..], "a", "b").unwrap();
        assert_eq!(back.hard_indices().unwrap(), map.hard_indices().unwrap());
        assert_eq!(back.n_target(), 5);
    }

    #[test]
    fn index_map_without_header_infers_target_count() {
        let text = "2\n0\n1\n";
        let map = read_index_map(text.as_bytes(), "a", "b").unwrap();
        assert_eq!(map.n_target(), 3);
    }

    #[test]
    fn index_map_rejects_soft_and_garbage() {
        let soft = PointMap::soft(DMatrix::from_element(2, 2, 0.5), "a", "b").unwrap();
        let mut buf = Vec::new();
        assert!(matches!(write_index_map(&soft, &mut buf), Err(Error::Config(_))));
        assert!(matches!(
            read_index_map("1\nfoo\n".as_bytes(), "a", "b"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn atomic_write_leaves_no_temp_and_survives_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("artifact.fmat");
        save_fmat(&DMatrix::from_element(3, 3, 2.5), &path).unwrap();
        let listed: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(listed.len(), 1);
        let loaded = load_fmat(&path).unwrap();
        assert_eq!(loaded[(0, 0)], 2.5);

        // failing writer must not clobber the existing artifact
        let r = atomic_write(&path, |_out| Err(Error::Parse("boom".into())));
        assert!(r.is_err());
        assert_eq!(load_fmat(&path).unwrap()[(1, 1)], 2.5);
        let listed: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(listed.len(), 1);
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let value = vec![1.5f64, -2.25, 0.0];
        save_json(&value, &path).unwrap();
        let back: Vec<f64> = load_json(&path).unwrap();
        assert_eq!(value, back);
    }
}
