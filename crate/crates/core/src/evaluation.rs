//! Retrieval scoring: distance matrices, Recall@N, precision-recall sweeps,
//! F1-max, per-query success maps and the on-disk report bundle.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{pairwise_geo_distances, Position};
use crate::error::{shape_err, Error, Result};
use crate::model::{FusionVpr, PreparedSet};
use crate::plot;

pub const DEFAULT_PHI: f64 = 75.0;
pub const DEFAULT_NS: &[usize] = &[1, 5, 10, 20];

/// Row-major `|Q| × |DB|` descriptor distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!("{} values for a {rows}x{cols} matrix", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, q: usize) -> &[f32] {
        &self.data[q * self.cols..(q + 1) * self.cols]
    }

    pub fn get(&self, q: usize, d: usize) -> f32 {
        self.data[q * self.cols + d]
    }

    /// Database indices of row `q` by ascending distance, ties by index.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let row = self.row(q);
        let mut idx: Vec<usize> = (0..self.cols).collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        idx
    }

    /// Nearest database entry of row `q` (lowest index among ties).
    pub fn nearest(&self, q: usize) -> Option<(usize, f32)> {
        self.row(q)
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, rows: usize, cols: usize) -> Result<Self> {
        let data = read_f32_le(path)?;
        if data.len() != rows * cols {
            return Err(Error::file(
                path,
                format!("holds {} values, expected {rows}x{cols}", data.len()),
            ));
        }
        Self::new(rows, cols, data)
    }
}

fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::file(path, "length is not a multiple of 4 bytes"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Euclidean distances between row-major descriptor sets of width `dim`.
pub fn distance_matrix(queries: &[f32], database: &[f32], dim: usize) -> Result<DistanceMatrix> {
    if dim == 0 || !queries.len().is_multiple_of(dim) || !database.len().is_multiple_of(dim) {
        return Err(shape_err!("descriptor buffers are not multiples of dimension {dim}"));
    }
    let (nq, nd) = (queries.len() / dim, database.len() / dim);
    let mut data = Vec::with_capacity(nq * nd);
    for q in queries.chunks_exact(dim) {
        for d in database.chunks_exact(dim) {
            let s: f64 = q.iter().zip(d).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            data.push(s.sqrt() as f32);
        }
    }
    DistanceMatrix::new(nq, nd, data)
}

fn check_positions(dist: &DistanceMatrix, q_pos: &[Position], db_pos: &[Position], phi: f64) -> Result<Vec<Vec<f64>>> {
    if !(phi > 0.0) {
        return Err(Error::Config(format!("true-positive radius must be positive, got {phi}")));
    }
    if q_pos.len() != dist.rows || db_pos.len() != dist.cols {
        return Err(shape_err!(
            "{}x{} distances but {} query and {} database positions",
            dist.rows,
            dist.cols,
            q_pos.len(),
            db_pos.len()
        ));
    }
    pairwise_geo_distances(q_pos, db_pos)
}

/// Fraction of queries with a database entry within `phi` meters among
/// their `N` nearest descriptors, for each requested `N`.
pub fn recall_at_n(
    dist: &DistanceMatrix,
    q_pos: &[Position],
    db_pos: &[Position],
    phi: f64,
    ns: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let geo = check_positions(dist, q_pos, db_pos, phi)?;
    let mut hits = vec![0usize; ns.len()];
    let clipped: Vec<usize> = ns
        .iter()
        .map(|&n| {
            if n > dist.cols {
                log::warn!("Recall@{n} clipped to the database size {}", dist.cols);
            }
            n.min(dist.cols)
        })
        .collect();
    for q in 0..dist.rows {
        let rank = dist.ranking(q);
        // First rank at which a true match appears.
        let first = rank.iter().position(|&d| geo[q][d] <= phi);
        for (h, &n) in hits.iter_mut().zip(&clipped) {
            if first.is_some_and(|r| r < n) {
                *h += 1;
            }
        }
    }
    let total = dist.rows.max(1) as f64;
    Ok(ns.iter().zip(hits).map(|(&n, h)| (n, h as f64 / total)).collect())
}

/// Whether each query's top-1 retrieval lies within `phi` meters.
pub fn per_query_success(dist: &DistanceMatrix, q_pos: &[Position], db_pos: &[Position], phi: f64) -> Result<Vec<bool>> {
    let geo = check_positions(dist, q_pos, db_pos, phi)?;
    Ok((0..dist.rows)
        .map(|q| dist.nearest(q).is_some_and(|(d, _)| geo[q][d] <= phi))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

impl PrPoint {
    pub fn f1(&self) -> f64 {
        let s = self.precision + self.recall;
        if s > 0.0 {
            2.0 * self.precision * self.recall / s
        } else {
            0.0
        }
    }
}

/// Threshold sweep over each query's nearest-neighbour distance. The first
/// point accepts nothing (`threshold = -inf`, precision 1, recall 0).
pub fn pr_curve(
    dist: &DistanceMatrix,
    q_pos: &[Position],
    db_pos: &[Position],
    phi: f64,
    split: &str,
) -> Result<Vec<PrPoint>> {
    let geo = check_positions(dist, q_pos, db_pos, phi)?;
    let mut nn: Vec<(f32, bool, bool)> = Vec::with_capacity(dist.rows);
    for q in 0..dist.rows {
        let Some((d, score)) = dist.nearest(q) else { continue };
        let has_match = geo[q].iter().any(|&g| g <= phi);
        nn.push((score, geo[q][d] <= phi, has_match));
    }
    if !nn.iter().any(|n| n.2) {
        return Err(Error::Evaluation(format!(
            "split '{split}': no query has a database entry within {phi} m, recall is undefined"
        )));
    }
    let mut thresholds: Vec<f32> = nn.iter().map(|n| n.0).collect();
    thresholds.sort_by(f32::total_cmp);
    thresholds.dedup();

    let mut points = vec![PrPoint {
        threshold: f64::NEG_INFINITY,
        precision: 1.0,
        recall: 0.0,
    }];
    for &t in &thresholds {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for &(score, correct, has_match) in &nn {
            let accepted = score <= t;
            match (accepted, correct) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, _) if has_match => fneg += 1,
                _ => {}
            }
        }
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        points.push(PrPoint {
            threshold: t as f64,
            precision,
            recall,
        });
    }
    Ok(points)
}

pub fn f1_max(points: &[PrPoint]) -> f64 {
    points.iter().map(PrPoint::f1).fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct RetrievalReport {
    pub split: String,
    pub phi: f64,
    pub distances: DistanceMatrix,
    pub recalls: BTreeMap<usize, f64>,
    pub pr: Vec<PrPoint>,
    pub f1_max: f64,
    pub success: Vec<bool>,
    pub query_positions: Vec<Position>,
}

impl RetrievalReport {
    pub fn recall_at_1(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

pub fn evaluate(
    dist: DistanceMatrix,
    q_pos: &[Position],
    db_pos: &[Position],
    phi: f64,
    ns: &[usize],
    split: &str,
) -> Result<RetrievalReport> {
    let recalls = recall_at_n(&dist, q_pos, db_pos, phi, ns)?;
    let pr = pr_curve(&dist, q_pos, db_pos, phi, split)?;
    let success = per_query_success(&dist, q_pos, db_pos, phi)?;
    Ok(RetrievalReport {
        split: split.to_string(),
        phi,
        f1_max: f1_max(&pr),
        distances: dist,
        recalls,
        pr,
        success,
        query_positions: q_pos.to_vec(),
    })
}

/// Inference-mode descriptors for every sample of `set`, row-major.
pub fn build_index(model: &FusionVpr, set: &PreparedSet, batch: usize) -> Result<Vec<f32>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    model.describe(set, &idx, batch)
}

/// Rank a query set against a database with a trained model.
pub fn evaluate_model(
    model: &FusionVpr,
    database: &PreparedSet,
    query: &PreparedSet,
    phi: f64,
    ns: &[usize],
    batch: usize,
) -> Result<RetrievalReport> {
    let dim = model.config.descriptor_len();
    let db = build_index(model, database, batch)?;
    let q = build_index(model, query, batch)?;
    evaluate(
        distance_matrix(&q, &db, dim)?,
        &query.positions,
        &database.positions,
        phi,
        ns,
        &query.name,
    )
}

// ---- success map -----------------------------------------------------------

/// CSV rows `lat,lon,success` (or `x,y,success` for planar positions).
pub fn success_map_csv(report: &RetrievalReport) -> String {
    let geographic = report.query_positions.first().is_some_and(Position::is_geographic);
    let mut s = String::from(if geographic { "lat,lon,success\n" } else { "x,y,success\n" });
    for (p, ok) in report.query_positions.iter().zip(&report.success) {
        let (a, b) = p.coords();
        s.push_str(&format!("{a},{b},{}\n", u8::from(*ok)));
    }
    s
}

// ---- report bundle ---------------------------------------------------------

pub const DISTANCES_FILE: &str = "distances.f32";
pub const RECALLS_FILE: &str = "recalls.json";
pub const PR_FILE: &str = "pr.csv";
pub const SUCCESS_FILE: &str = "success_map.csv";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecallsFile {
    pub split: String,
    pub phi: f64,
    /// `[queries, database]`
    pub distance_shape: [usize; 2],
    pub recalls: BTreeMap<String, f64>,
    pub f1_max: f64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Write every bundle file plus plots; returns the paths written.
pub fn write_report(dir: &Path, report: &RetrievalReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let p = dir.join(DISTANCES_FILE);
    report.distances.write(&p)?;
    written.push(p);

    let recalls = RecallsFile {
        split: report.split.clone(),
        phi: report.phi,
        distance_shape: [report.distances.rows, report.distances.cols],
        recalls: report.recalls.iter().map(|(n, r)| (n.to_string(), *r)).collect(),
        f1_max: report.f1_max,
    };
    let p = dir.join(RECALLS_FILE);
    write_text(&p, &serde_json::to_string_pretty(&recalls)?)?;
    written.push(p);

    let mut csv = String::from("threshold,precision,recall\n");
    for pt in &report.pr {
        csv.push_str(&format!("{},{},{}\n", pt.threshold, pt.precision, pt.recall));
    }
    let p = dir.join(PR_FILE);
    write_text(&p, &csv)?;
    written.push(p);

    let p = dir.join(SUCCESS_FILE);
    write_text(&p, &success_map_csv(report))?;
    written.push(p);

    written.extend(render_plots(dir)?);
    Ok(written)
}

/// Re-render `pr.png`, `recall_at_n.png` and `success_map.png` from the
/// CSV/JSON files of a bundle directory.
pub fn render_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let recalls: RecallsFile = {
        let p = dir.join(RECALLS_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::file(&p, e.to_string()))?
    };
    let pr = read_csv_rows(&dir.join(PR_FILE), 3)?;
    let success = read_csv_rows(&dir.join(SUCCESS_FILE), 3)?;

    let mut out = Vec::new();
    let p = dir.join("pr.png");
    let pts: Vec<(f64, f64)> = pr.iter().map(|r| (r[2], r[1])).collect();
    plot::pr_plot(&p, &[(pts, plot::BLUE)])?;
    out.push(p);

    let p = dir.join("recall_at_n.png");
    let mut pts: Vec<(f64, f64)> = recalls
        .recalls
        .iter()
        .filter_map(|(n, r)| n.parse::<f64>().ok().map(|n| (n, *r)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    plot::recall_plot(&p, &[(pts, plot::ORANGE)])?;
    out.push(p);

    let p = dir.join("success_map.png");
    let sp = dir.join(SUCCESS_FILE);
    let geographic = std::fs::read_to_string(&sp)
        .map_err(|e| Error::io(&sp, e))?
        .starts_with("lat");
    // Longitude runs along x.
    let pts: Vec<(f64, f64, bool)> = success
        .iter()
        .map(|r| if geographic { (r[1], r[0], r[2] > 0.5) } else { (r[0], r[1], r[2] > 0.5) })
        .collect();
    plot::success_plot(&p, &pts)?;
    out.push(p);
    Ok(out)
}

fn read_csv_rows(path: &Path, cols: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row: Vec<f64> = l
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if row.len() != cols {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: format!("expected {cols} columns, found {}", row.len()),
                });
            }
            Ok(row)
        })
        .collect()
}

// ---- descriptor export -----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorManifest {
    pub count: usize,
    pub dimension: usize,
    pub source_traverse: String,
    pub checkpoint_id: String,
}

/// Write `rows` (row-major f32) to `path` and the manifest to `path.json`.
pub fn write_descriptors(path: &Path, rows: &[f32], manifest: &DescriptorManifest) -> Result<()> {
    if rows.len() != manifest.count * manifest.dimension {
        return Err(shape_err!(
            "{} values for {} descriptors of dimension {}",
            rows.len(),
            manifest.count,
            manifest.dimension
        ));
    }
    let bytes: Vec<u8> = rows.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mp = manifest_path(path);
    write_text(&mp, &serde_json::to_string_pretty(manifest)?)
}

pub fn read_descriptors(path: &Path) -> Result<(DescriptorManifest, Vec<f32>)> {
    let mp = manifest_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: DescriptorManifest = serde_json::from_str(&text).map_err(|e| Error::file(&mp, e.to_string()))?;
    let data = read_f32_le(path)?;
    if data.len() != manifest.count * manifest.dimension {
        return Err(Error::file(
            path,
            format!(
                "holds {} values but the manifest declares {}x{}",
                data.len(),
                manifest.count,
                manifest.dimension
            ),
        ));
    }
    Ok((manifest, data))
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar(pts: &[(f64, f64)]) -> Vec<Position> {
        pts.iter().map(|&(x, y)| Position::Planar { x, y }).collect()
    }

    fn line(n: usize, step: f64) -> Vec<Position> {
        (0..n).map(|i| Position::Planar { x: i as f64 * step, y: 0.0 }).collect()
    }

    #[test]
    fn identity_retrieval() {
        let desc: Vec<f32> = (0..5 * 3).map(|i| (i * 7 % 11) as f32).collect();
        let d = distance_matrix(&desc, &desc, 3).unwrap();
        let pos = line(5, 100.0);
        let r = recall_at_n(&d, &pos, &pos, 75.0, &[1, 3]).unwrap();
        assert_eq!(r[&1], 1.0);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(d.get(i, j), d.get(j, i));
            }
        }
        let pr = pr_curve(&d, &pos, &pos, 75.0, "self").unwrap();
        assert!(pr.iter().any(|p| p.precision == 1.0 && p.recall == 1.0));
        assert_eq!(f1_max(&pr), 1.0);
    }

    #[test]
    fn empty_acceptance_point_and_f1() {
        let pts = [PrPoint {
            threshold: 0.0,
            precision: 0.5,
            recall: 0.5,
        }];
        assert_eq!(f1_max(&pts), 0.5);
        let zero = PrPoint {
            threshold: 0.0,
            precision: 0.0,
            recall: 0.0,
        };
        assert_eq!(zero.f1(), 0.0);
    }

    #[test]
    fn recall_clips_large_n() {
        let d = DistanceMatrix::new(1, 2, vec![1.0, 0.5]).unwrap();
        let r = recall_at_n(&d, &line(1, 1.0), &planar(&[(0.0, 0.0), (500.0, 0.0)]), 75.0, &[1, 9]).unwrap();
        assert_eq!(r[&1], 0.0);
        assert_eq!(r[&9], 1.0);
    }

    #[test]
    fn no_matches_names_the_split() {
        let d = DistanceMatrix::new(1, 1, vec![0.0]).unwrap();
        let err = pr_curve(&d, &line(1, 1.0), &planar(&[(1000.0, 0.0)]), 75.0, "night").unwrap_err();
        assert!(err.to_string().contains("night"));
    }

    #[test]
    fn success_csv_rows() {
        let d = DistanceMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let pos = line(2, 100.0);
        let rep = evaluate(d, &pos, &pos, 75.0, &[1], "s").unwrap();
        let csv = success_map_csv(&rep);
        assert_eq!(csv, "x,y,success\n0,0,1\n100,0,1\n");
        let geo = vec![Position::LatLon { lat: -27.5, lon: 153.0 }];
        let rep = evaluate(DistanceMatrix::new(1, 1, vec![0.0]).unwrap(), &geo, &geo, 75.0, &[1], "g").unwrap();
        assert!(success_map_csv(&rep).starts_with("lat,lon,success\n-27.5,153,1"));
    }

    #[test]
    fn bundle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..12).map(|_| rng.random()).collect();
        let d = DistanceMatrix::new(3, 4, data).unwrap();
        let rep = evaluate(d.clone(), &line(3, 30.0), &line(4, 30.0), 75.0, &[1, 2], "t").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(dir.path(), &rep).unwrap();
        assert_eq!(files.len(), 7);
        assert_eq!(DistanceMatrix::read(&dir.path().join(DISTANCES_FILE), 3, 4).unwrap(), d);
        let rf: RecallsFile =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(RECALLS_FILE)).unwrap()).unwrap();
        assert_eq!(rf.distance_shape, [3, 4]);
        let pr = std::fs::read_to_string(dir.path().join(PR_FILE)).unwrap();
        assert!(pr.starts_with("threshold,precision,recall\n-inf,1,0\n"));
    }

    #[test]
    fn descriptor_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("db.f32");
        let m = DescriptorManifest {
            count: 2,
            dimension: 3,
            source_traverse: "a".into(),
            checkpoint_id: "x".into(),
        };
        let rows = [1.0, 2.0, 3.0, -1.0, 0.5, 0.25];
        write_descriptors(&p, &rows, &m).unwrap();
        assert_eq!(read_descriptors(&p).unwrap(), (m.clone(), rows.to_vec()));
        let bad = DescriptorManifest { count: 3, ..m };
        assert!(write_descriptors(&p, &rows, &bad).is_err());
        std::fs::write(manifest_path(&p), serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(read_descriptors(&p).is_err());
    }

    proptest! {
        #[test]
        fn recall_monotone_and_success_mean(seed in 0u64..5000, nq in 1usize..15, nd in 1usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = DistanceMatrix::new(nq, nd, (0..nq * nd).map(|_| rng.random_range(0.0..2.0f32)).collect()).unwrap();
            let q: Vec<Position> = (0..nq).map(|_| Position::Planar { x: rng.random_range(0.0..300.0), y: 0.0 }).collect();
            let db: Vec<Position> = (0..nd).map(|_| Position::Planar { x: rng.random_range(0.0..300.0), y: 0.0 }).collect();
            let ns: Vec<usize> = (1..=nd).collect();
            let r = recall_at_n(&d, &q, &db, 75.0, &ns).unwrap();
            let v: Vec<f64> = r.values().copied().collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
            let s = per_query_success(&d, &q, &db, 75.0).unwrap();
            let mean = s.iter().filter(|&&x| x).count() as f64 / nq as f64;
            prop_assert_eq!(mean, r[&1]);
            let geo = pairwise_geo_distances(&q, &db).unwrap();
            if geo.iter().all(|row| row.iter().any(|&g| g <= 75.0)) {
                prop_assert_eq!(r[&nd], 1.0);
            }
            if let Ok(pr) = pr_curve(&d, &q, &db, 75.0, "p") {
                let f = f1_max(&pr);
                prop_assert!((0.0..=1.0).contains(&f));
                prop_assert!(pr.iter().all(|p| p.f1() <= f && (0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall)));
            }
        }
    }
}
