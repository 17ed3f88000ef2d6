//! Round-trips the two on-disk artifacts: the binary matrix container used
//! for functional maps and assignments, and the plain-text vertex index map.
//! Both writers go through a temp-file rename, so readers never observe a
//! partially written artifact.

use nalgebra::DMatrix;
use shapecorr::io::{load_fmat, load_index_map, save_fmat, save_index_map};
use shapecorr::PointMap;

fn main() -> shapecorr::Result<()> {
    let dir = std::env::temp_dir().join("shapecorr-formats-example");
    std::fs::create_dir_all(&dir)?;

    let matrix = DMatrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 / 7.0);
    let fmat_path = dir.join("example.fmat");
    save_fmat(&matrix, &fmat_path)?;
    let restored = load_fmat(&fmat_path)?;
    println!(
        "matrix round-trip: {} x {}, bit-identical: {}",
        restored.nrows(),
        restored.ncols(),
        restored
            .iter()
            .zip(matrix.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    );

    let map = PointMap::hard(vec![2, 0, 1, 3], 4, "left", "right")?;
    let map_path = dir.join("example.map");
    save_index_map(&map, &map_path)?;
    let restored_map = load_index_map(&map_path, "left", "right")?;
    println!(
        "index map round-trip: {:?} -> {:?}",
        map.hard_indices().unwrap(),
        restored_map.hard_indices().unwrap()
    );
    println!("artifacts written under {}", dir.display());
    Ok(())
}
