//! CSV ingestion and export.
//!
//! Observation files: UTF-8 CSV, header row of node ids (an optional
//! leading `timestamp` column is skipped), one row per timestep, column
//! order defines node order. Missing cells (empty or `nan`) are linearly
//! interpolated per node. Coordinate files: `node_id,x,y`. Precomputed
//! distance files: `node_i,node_j,dist` with every unordered pair listed.

use super::{DataError, Result, SpatioTemporalDataset};
use crate::graph;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na")
}

/// Read the observation table; returns (node ids, column-major series with
/// missing cells as None).
fn read_observations(path: &Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut cols: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    let skip_first = cols
        .first()
        .map(|c| c.eq_ignore_ascii_case("timestamp"))
        .unwrap_or(false);
    if skip_first {
        cols.remove(0);
    }
    if cols.is_empty() {
        return Err(DataError::Validation(format!(
            "{}: no node columns found",
            path.display()
        )));
    }
    let n = cols.len();
    let mut series: Vec<Vec<Option<f64>>> = vec![Vec::new(); n];
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let offset = usize::from(skip_first);
        if record.len() != n + offset {
            return Err(DataError::Validation(format!(
                "{}: row {} has {} cells, expected {}",
                path.display(),
                row_idx + 2,
                record.len(),
                n + offset
            )));
        }
        for (j, cell) in record.iter().skip(offset).enumerate() {
            if is_missing(cell) {
                series[j].push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    DataError::Validation(format!(
                        "{}: row {} column '{}': cannot parse '{}'",
                        path.display(),
                        row_idx + 2,
                        cols[j],
                        cell
                    ))
                })?;
                series[j].push(Some(v));
            }
        }
    }
    if series[0].is_empty() {
        return Err(DataError::Validation(format!(
            "{}: no observation rows",
            path.display()
        )));
    }
    Ok((cols, series))
}

/// Linear interpolation of interior gaps; boundary gaps take the nearest
/// known value. An all-missing column is an error.
fn impute_column(node_id: &str, col: &[Option<f64>]) -> Result<Vec<f64>> {
    let known: Vec<(usize, f64)> = col
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x)))
        .collect();
    if known.is_empty() {
        return Err(DataError::Validation(format!(
            "column '{}' has no observed values",
            node_id
        )));
    }
    let gaps = col.len() - known.len();
    if gaps > 0 {
        log::warn!("column '{}': interpolating {} missing value(s)", node_id, gaps);
    }
    let mut out = vec![0.0; col.len()];
    let mut next_known = 0usize;
    for (i, slot) in out.iter_mut().enumerate() {
        if let Some(v) = col[i] {
            *slot = v;
            continue;
        }
        while next_known < known.len() && known[next_known].0 < i {
            next_known += 1;
        }
        let after = known.get(next_known);
        let before = if next_known == 0 { None } else { Some(known[next_known - 1]) };
        *slot = match (before, after) {
            (Some((i0, v0)), Some(&(i1, v1))) => {
                let f = (i - i0) as f64 / (i1 - i0) as f64;
                v0 + f * (v1 - v0)
            }
            (Some((_, v0)), None) => v0,
            (None, Some(&(_, v1))) => v1,
            (None, None) => unreachable!("known is nonempty"),
        };
    }
    Ok(out)
}

/// Read just the observation table (with imputation), no graph files.
pub fn load_observations(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let (node_ids, raw_cols) = read_observations(path)?;
    let n = node_ids.len();
    let t = raw_cols[0].len();
    let mut obs = vec![0.0; t * n];
    for (j, (id, col)) in node_ids.iter().zip(&raw_cols).enumerate() {
        let filled = impute_column(id, col)?;
        for (i, v) in filled.iter().enumerate() {
            obs[i * n + j] = *v;
        }
    }
    Ok((node_ids, Tensor::new(vec![t, n], obs)?))
}

enum SecondFile {
    Coords(HashMap<String, (f64, f64)>),
    Distances(HashMap<(String, String), f64>),
}

fn read_second_file(path: &Path) -> Result<SecondFile> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_lowercase()).collect();
    if headers == ["node_id", "x", "y"] {
        let mut coords = HashMap::new();
        for record in reader.records() {
            let r = record?;
            let id = r[0].to_string();
            let x: f64 = r[1].parse().map_err(|_| {
                DataError::Validation(format!("coords for '{}': bad x '{}'", id, &r[1]))
            })?;
            let y: f64 = r[2].parse().map_err(|_| {
                DataError::Validation(format!("coords for '{}': bad y '{}'", id, &r[2]))
            })?;
            if coords.insert(id.clone(), (x, y)).is_some() {
                return Err(DataError::Validation(format!("duplicate coordinates for '{}'", id)));
            }
        }
        Ok(SecondFile::Coords(coords))
    } else if headers == ["node_i", "node_j", "dist"] {
        let mut dist = HashMap::new();
        for record in reader.records() {
            let r = record?;
            let (a, b) = (r[0].to_string(), r[1].to_string());
            let d: f64 = r[2].parse().map_err(|_| {
                DataError::Validation(format!("distance {}-{}: bad value '{}'", a, b, &r[2]))
            })?;
            let key = if a <= b { (a, b) } else { (b, a) };
            if let Some(prev) = dist.insert(key.clone(), d) {
                if prev != d {
                    return Err(DataError::Validation(format!(
                        "conflicting distances for pair {}-{}",
                        key.0, key.1
                    )));
                }
            }
        }
        Ok(SecondFile::Distances(dist))
    } else {
        Err(DataError::Validation(format!(
            "{}: expected header 'node_id,x,y' or 'node_i,node_j,dist', got '{}'",
            path.display(),
            headers.join(",")
        )))
    }
}

/// Load observations plus either coordinates or a precomputed distance
/// table, impute gaps, and build the graph matrices.
pub fn load_dataset(
    obs_path: &Path,
    coords_or_dist_path: &Path,
    alpha_k: f64,
    beta_k: f64,
) -> Result<SpatioTemporalDataset> {
    load_dataset_with_scale(obs_path, coords_or_dist_path, Some(alpha_k), beta_k).map(|(ds, _)| ds)
}

/// [`load_dataset`] with an optional kernel width: `None` uses the mean
/// nearest-neighbor distance of the loaded graph. Returns the width used.
pub fn load_dataset_with_scale(
    obs_path: &Path,
    coords_or_dist_path: &Path,
    alpha_k: Option<f64>,
    beta_k: f64,
) -> Result<(SpatioTemporalDataset, f64)> {
    let (node_ids, observations) = load_observations(obs_path)?;
    let n = node_ids.len();

    let (coords, dist) = match read_second_file(coords_or_dist_path)? {
        SecondFile::Coords(map) => {
            for id in map.keys() {
                if !node_ids.contains(id) {
                    return Err(DataError::Validation(format!(
                        "coordinate file mentions unknown node id '{}'",
                        id
                    )));
                }
            }
            let coords: Vec<(f64, f64)> = node_ids
                .iter()
                .map(|id| {
                    map.get(id).cloned().ok_or_else(|| {
                        DataError::Validation(format!("no coordinates for node id '{}'", id))
                    })
                })
                .collect::<Result<_>>()?;
            let dist = graph::euclidean_distances(&coords)?;
            (Some(coords), dist)
        }
        SecondFile::Distances(map) => {
            for (a, b) in map.keys() {
                if !node_ids.contains(a) || !node_ids.contains(b) {
                    return Err(DataError::Validation(format!(
                        "distance file mentions unknown node pair '{}'-'{}'",
                        a, b
                    )));
                }
            }
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let (a, b) = (&node_ids[i], &node_ids[j]);
                    let key = if a <= b {
                        (a.clone(), b.clone())
                    } else {
                        (b.clone(), a.clone())
                    };
                    let v = *map.get(&key).ok_or_else(|| {
                        DataError::Validation(format!("no distance listed for pair '{}'-'{}'", a, b))
                    })?;
                    d[i * n + j] = v;
                    d[j * n + i] = v;
                }
            }
            (None, Tensor::new(vec![n, n], d)?)
        }
    };

    let alpha_used = match alpha_k {
        Some(v) => v,
        None => mean_nearest_neighbor_distance(&dist).ok_or_else(|| {
            DataError::Validation("cannot derive a kernel width from a single node".into())
        })?,
    };
    let adjacency = graph::build_adjacency(&dist, alpha_used, beta_k)?;
    let laplacian = graph::normalized_laplacian(&adjacency)?;

    Ok((
        SpatioTemporalDataset {
            node_ids,
            coords,
            adjacency,
            laplacian,
            observations,
            norm: None,
        },
        alpha_used,
    ))
}

/// Mean over nodes of the distance to the nearest other node.
pub fn mean_nearest_neighbor_distance(dist: &Tensor) -> Option<f64> {
    let n = dist.rows();
    if n < 2 {
        return None;
    }
    let total: f64 = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| dist.at2(i, j))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Some(total / n as f64)
}

/// Write an observation table in the ingestion format. Float formatting is
/// the shortest round-trip representation, so save -> load is bit-exact.
pub fn save_observations(path: &Path, node_ids: &[String], observations: &Tensor) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{}", node_ids.join(","))?;
    let n = node_ids.len();
    for row in 0..observations.rows() {
        let cells: Vec<String> = (0..n).map(|j| observations.at2(row, j).to_string()).collect();
        writeln!(file, "{}", cells.join(","))?;
    }
    file.flush()?;
    Ok(())
}

/// Write a `node_id,x,y` coordinate table.
pub fn save_coords(path: &Path, node_ids: &[String], coords: &[(f64, f64)]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "node_id,x,y")?;
    for (id, (x, y)) in node_ids.iter().zip(coords) {
        writeln!(file, "{},{},{}", id, x, y)?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_toy_file_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write_file(dir.path(), "obs.csv", "a,b\n1,2\n3,4\n5,6\n7,8\n");
        let coords = write_file(dir.path(), "coords.csv", "node_id,x,y\na,0,0\nb,1,0\n");
        let ds = load_dataset(&obs, &coords, 1.0, 0.0).unwrap();
        assert_eq!(ds.observations.shape(), &[4, 2]);
        assert_eq!(ds.node_ids, vec!["a", "b"]);
        assert_eq!(ds.adjacency.at2(0, 1), (-1.0f64).exp());
    }

    #[test]
    fn timestamp_column_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write_file(
            dir.path(),
            "obs.csv",
            "timestamp,a,b\n2017-01-01T00:00:00,1,2\n2017-01-01T01:00:00,3,4\n",
        );
        let coords = write_file(dir.path(), "coords.csv", "node_id,x,y\na,0,0\nb,1,0\n");
        let ds = load_dataset(&obs, &coords, 1.0, 0.0).unwrap();
        assert_eq!(ds.observations.shape(), &[2, 2]);
        assert_eq!(ds.observations.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn interior_gap_is_linearly_interpolated() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write_file(dir.path(), "obs.csv", "a,b\n1,1\n,2\n3,3\n");
        let coords = write_file(dir.path(), "coords.csv", "node_id,x,y\na,0,0\nb,1,0\n");
        let ds = load_dataset(&obs, &coords, 1.0, 0.0).unwrap();
        assert_eq!(ds.observations.at2(1, 0), 2.0);
    }

    #[test]
    fn unknown_node_id_in_coords_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write_file(dir.path(), "obs.csv", "a,b\n1,2\n3,4\n");
        let coords = write_file(dir.path(), "coords.csv", "node_id,x,y\na,0,0\nb,1,0\nzz,2,0\n");
        let err = load_dataset(&obs, &coords, 1.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("zz"), "{err}");
    }

    #[test]
    fn missing_coordinate_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write_file(dir.path(), "obs.csv", "a,b\n1,2\n3,4\n");
        let coords = write_file(dir.path(), "coords.csv", "node_id,x,y\na,0,0\n");
        let err = load_dataset(&obs, &coords, 1.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("'b'"), "{err}");
    }

    #[test]
    fn all_missing_column_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write_file(dir.path(), "obs.csv", "a,b\n1,\n2,nan\n");
        let coords = write_file(dir.path(), "coords.csv", "node_id,x,y\na,0,0\nb,1,0\n");
        let err = load_dataset(&obs, &coords, 1.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("'b'"), "{err}");
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write_file(dir.path(), "obs.csv", "a,b\n1,2\n3\n");
        let coords = write_file(dir.path(), "coords.csv", "node_id,x,y\na,0,0\nb,1,0\n");
        assert!(load_dataset(&obs, &coords, 1.0, 0.0).is_err());
    }

    #[test]
    fn precomputed_distance_table_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write_file(dir.path(), "obs.csv", "a,b,c\n1,2,3\n4,5,6\n");
        let dists = write_file(
            dir.path(),
            "dist.csv",
            "node_i,node_j,dist\na,b,1.0\na,c,2.0\nb,c,1.0\n",
        );
        let ds = load_dataset(&obs, &dists, 1.0, 0.0).unwrap();
        assert!(ds.coords.is_none());
        assert!((ds.adjacency.at2(0, 1) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((ds.adjacency.at2(0, 2) - (-4.0f64).exp()).abs() < 1e-12);

        let missing = write_file(dir.path(), "dist2.csv", "node_i,node_j,dist\na,b,1.0\n");
        assert!(load_dataset(&obs, &missing, 1.0, 0.0).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::data::synth_dataset(4, 60, 3).unwrap();
        let obs_path = dir.path().join("obs.csv");
        save_observations(&obs_path, &ds.node_ids, &ds.observations).unwrap();
        let coords_path = dir.path().join("coords.csv");
        save_coords(&coords_path, &ds.node_ids, ds.coords.as_ref().unwrap()).unwrap();

        // alpha_k = mean nearest-neighbor distance, matching the synth rule
        let coords = ds.coords.as_ref().unwrap();
        let nn = |i: usize| -> f64 {
            coords
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, c)| ((coords[i].0 - c.0).powi(2) + (coords[i].1 - c.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let alpha_k = (0..4).map(nn).sum::<f64>() / 4.0;
        let reloaded = load_dataset(&obs_path, &coords_path, alpha_k, 0.05).unwrap();
        assert_eq!(reloaded.observations.data(), ds.observations.data());
        assert_eq!(reloaded.adjacency.data(), ds.adjacency.data());

        // idempotence: save the reloaded copy and compare bytes
        let obs_path2 = dir.path().join("obs2.csv");
        save_observations(&obs_path2, &reloaded.node_ids, &reloaded.observations).unwrap();
        assert_eq!(
            std::fs::read(&obs_path).unwrap(),
            std::fs::read(&obs_path2).unwrap()
        );
    }
}
