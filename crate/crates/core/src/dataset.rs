//! Traverse recordings and geographic triplet mining.
//!
//! A traverse directory holds `frames/<t_us>.png`, an event table
//! `events.dat` and a pose table `poses.csv` (`t_us,lat,lon` or `t_us,x,y`).

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    read_event_file, write_event_file, Event, EventFileFormat, EventStream, EventVolume,
    SensorSize, Timestamp, WindowMode,
};

const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Position {
    /// Degrees.
    LatLon { lat: f64, lon: f64 },
    /// Meters in a local frame.
    Planar { x: f64, y: f64 },
}

impl Position {
    pub fn coords(&self) -> (f64, f64) {
        match *self {
            Position::LatLon { lat, lon } => (lat, lon),
            Position::Planar { x, y } => (x, y),
        }
    }

    pub fn is_geographic(&self) -> bool {
        matches!(self, Position::LatLon { .. })
    }
}

/// Haversine distance for lat/lon, Euclidean for planar positions.
pub fn geo_distance(a: &Position, b: &Position) -> Result<f64> {
    match (*a, *b) {
        (Position::Planar { x: x1, y: y1 }, Position::Planar { x: x2, y: y2 }) => {
            Ok((x1 - x2).hypot(y1 - y2))
        }
        (Position::LatLon { lat: la1, lon: lo1 }, Position::LatLon { lat: la2, lon: lo2 }) => {
            let (p1, p2) = (la1.to_radians(), la2.to_radians());
            let dp = p2 - p1;
            let dl = (lo2 - lo1).to_radians();
            let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
            Ok(2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin())
        }
        _ => Err(Error::Validation(
            "cannot measure distance between lat/lon and planar positions".into(),
        )),
    }
}

/// Equirectangular projection about a fixed origin, identity for planar input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalProjection {
    origin: Option<(f64, f64)>,
}

impl LocalProjection {
    pub fn fit<'a>(positions: impl IntoIterator<Item = &'a Position>) -> Result<Self> {
        let mut geo = None;
        let (mut sum_lat, mut sum_lon, mut n) = (0.0, 0.0, 0usize);
        for p in positions {
            match (geo, p.is_geographic()) {
                (Some(g), now) if g != now => {
                    return Err(Error::Validation(
                        "mixed lat/lon and planar positions".into(),
                    ))
                }
                _ => geo = Some(p.is_geographic()),
            }
            if let Position::LatLon { lat, lon } = *p {
                sum_lat += lat;
                sum_lon += lon;
                n += 1;
            }
        }
        let origin = (n > 0).then(|| (sum_lat / n as f64, sum_lon / n as f64));
        Ok(Self { origin })
    }

    pub fn project(&self, p: &Position) -> Result<[f64; 2]> {
        match (*p, self.origin) {
            (Position::Planar { x, y }, None) => Ok([x, y]),
            (Position::LatLon { lat, lon }, Some((lat0, lon0))) => {
                let x = (lon - lon0).to_radians() * lat0.to_radians().cos() * EARTH_RADIUS_M;
                let y = (lat - lat0).to_radians() * EARTH_RADIUS_M;
                Ok([x, y])
            }
            _ => Err(Error::Validation(
                "position convention does not match projection".into(),
            )),
        }
    }
}

/// Image with values in `[0, 1]`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn gray(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            channels: 1,
            width,
            height,
            data,
        }
    }

    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::file(path, format!("unreadable frame: {e}")))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let data = match channels {
            1 => img.to_luma32f().into_raw(),
            3 => {
                let rgb = img.to_rgb32f().into_raw();
                let n = width * height;
                let mut planar = vec![0f32; 3 * n];
                for (i, px) in rgb.chunks_exact(3).enumerate() {
                    for c in 0..3 {
                        planar[c * n + i] = px[c];
                    }
                }
                planar
            }
            c => return Err(Error::Config(format!("frames must have 1 or 3 channels, got {c}"))),
        };
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    /// Writes the first channel as 8-bit grayscale.
    pub fn save_gray(&self, path: &Path) -> Result<()> {
        let n = self.width * self.height;
        let bytes: Vec<u8> = self.data[..n]
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::file(path, e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct PlaceSample {
    pub frame: Frame,
    pub event_volume: EventVolume,
    pub position: Position,
    pub timestamp: Timestamp,
}

#[derive(Clone, Debug)]
pub struct Traverse {
    pub name: String,
    pub samples: Vec<PlaceSample>,
}

impl Traverse {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positions(&self) -> Vec<Position> {
        self.samples.iter().map(|s| s.position).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadConfig {
    pub window_us: u64,
    pub window_mode: WindowMode,
    pub frame_channels: usize,
    /// Frames whose nearest pose is further away in time are dropped.
    pub max_pose_gap_us: u64,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            window_us: 25_000,
            window_mode: WindowMode::Centered,
            frame_channels: 1,
            max_pose_gap_us: 1_000_000,
        }
    }
}

fn read_poses(path: &Path) -> Result<Vec<(Timestamp, Position)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let geographic = loop {
        let Some((i, line)) = lines.next() else {
            return Err(parse_err(1, "missing header".into()));
        };
        let line = line.map_err(|e| Error::io(path, e))?;
        let header: Vec<String> = line.split(',').map(|s| s.trim().to_ascii_lowercase()).collect();
        if header.iter().all(|h| h.is_empty()) {
            continue;
        }
        match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["t_us", "lat", "lon"] => break true,
            ["t_us", "x", "y"] => break false,
            _ => {
                return Err(parse_err(
                    i + 1,
                    format!("expected header 't_us,lat,lon' or 't_us,x,y', found '{line}'"),
                ))
            }
        }
    };
    let mut poses = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(parse_err(i + 1, format!("expected 3 columns, found {}", f.len())));
        }
        let t = f[0]
            .parse::<u64>()
            .map_err(|e| parse_err(i + 1, format!("bad timestamp '{}': {e}", f[0])))?;
        let a = f[1]
            .parse::<f64>()
            .map_err(|e| parse_err(i + 1, format!("bad coordinate '{}': {e}", f[1])))?;
        let b = f[2]
            .parse::<f64>()
            .map_err(|e| parse_err(i + 1, format!("bad coordinate '{}': {e}", f[2])))?;
        let pos = if geographic {
            Position::LatLon { lat: a, lon: b }
        } else {
            Position::Planar { x: a, y: b }
        };
        poses.push((t, pos));
    }
    poses.sort_by_key(|p| p.0);
    Ok(poses)
}

fn nearest_pose(poses: &[(Timestamp, Position)], t: Timestamp) -> Option<(u64, Position)> {
    let i = poses.partition_point(|p| p.0 < t);
    [i.checked_sub(1), (i < poses.len()).then_some(i)]
        .into_iter()
        .flatten()
        .map(|j| (poses[j].0.abs_diff(t), poses[j].1))
        .min_by_key(|(gap, _)| *gap)
}

/// Frame files as `(timestamp, path)` sorted by time.
pub fn list_frames(root: &Path) -> Result<Vec<(Timestamp, PathBuf)>> {
    let dir = root.join("frames");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let t = stem
            .parse::<u64>()
            .map_err(|_| Error::file(&path, "frame file name is not a microsecond timestamp"))?;
        frames.push((t, path));
    }
    frames.sort();
    Ok(frames)
}

pub fn load_traverse(root: &Path, config: &LoadConfig) -> Result<Traverse> {
    let name = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("traverse")
        .to_string();
    let pose_path = root.join("poses.csv");
    if !pose_path.is_file() {
        return Err(Error::file(&pose_path, "missing pose file"));
    }
    let poses = read_poses(&pose_path)?;
    let frames = list_frames(root)?;
    let event_path = root.join("events.dat");
    let events = if event_path.exists() {
        read_event_file(&event_path)?
    } else {
        log::warn!("{}: no events.dat, using an empty event stream", root.display());
        Vec::new()
    };

    let mut samples = Vec::with_capacity(frames.len());
    let mut stream: Option<EventStream> = None;
    let mut dropped = 0usize;
    for (t, path) in frames {
        let Some((gap, position)) = nearest_pose(&poses, t) else {
            dropped += 1;
            continue;
        };
        if gap > config.max_pose_gap_us {
            dropped += 1;
            continue;
        }
        let frame = Frame::load(&path, config.frame_channels)?;
        let sensor = SensorSize::new(frame.width as u32, frame.height as u32);
        let stream = match &stream {
            Some(s) => s,
            None => stream.insert(
                EventStream::new(events.clone(), sensor)
                    .map_err(|e| Error::file(&event_path, e.to_string()))?,
            ),
        };
        if stream.sensor() != Some(sensor) {
            return Err(Error::file(&path, "frame size differs from earlier frames"));
        }
        let event_volume = stream.slice(t, config.window_us, config.window_mode)?;
        samples.push(PlaceSample {
            frame,
            event_volume,
            position,
            timestamp: t,
        });
    }
    if dropped > 0 {
        log::warn!("{name}: dropped {dropped} frames without a pose");
    }
    Ok(Traverse { name, samples })
}

/// Write a traverse in the on-disk layout read by [`load_traverse`].
pub fn write_traverse(root: &Path, traverse: &Traverse, events: &[Event]) -> Result<()> {
    let frames = root.join("frames");
    std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    for s in &traverse.samples {
        s.frame.save_gray(&frames.join(format!("{}.png", s.timestamp)))?;
    }
    write_event_file(&root.join("events.dat"), events, EventFileFormat::Binary)?;
    let pose_path = root.join("poses.csv");
    let mut out = std::fs::File::create(&pose_path).map_err(|e| Error::io(&pose_path, e))?;
    let geographic = traverse.samples.first().is_some_and(|s| s.position.is_geographic());
    let mut text = String::from(if geographic { "t_us,lat,lon\n" } else { "t_us,x,y\n" });
    for s in &traverse.samples {
        let (a, b) = s.position.coords();
        text.push_str(&format!("{},{a},{b}\n", s.timestamp));
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io(&pose_path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSpec {
    pub query_index: usize,
    pub potential_positive_indices: Vec<usize>,
    pub negative_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    /// Potential positives lie within this many meters.
    pub pos_threshold: f64,
    /// Negatives lie strictly beyond this many meters.
    pub neg_threshold: f64,
    pub negatives_per_query: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            pos_threshold: 25.0,
            neg_threshold: 75.0,
            negatives_per_query: 10,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_threshold >= 0.0 && self.pos_threshold < self.neg_threshold) {
            return Err(Error::Config(format!(
                "positive threshold ({} m) must be below the negative threshold ({} m)",
                self.pos_threshold, self.neg_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Mining {
    pub triplets: Vec<TripletSpec>,
    /// Queries without any potential positive.
    pub skipped: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded sampling key tied to sample identity (timestamps), not list order.
fn negative_rank(seed: u64, query_t: Timestamp, db_t: Timestamp) -> u64 {
    splitmix64(seed ^ splitmix64(query_t ^ splitmix64(db_t)))
}

/// Positions of both traverses in a shared local metric frame.
pub fn project_pair(query: &[Position], database: &[Position]) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let proj = LocalProjection::fit(database.iter().chain(query))?;
    let q = query.iter().map(|p| proj.project(p)).collect::<Result<Vec<_>>>()?;
    let db = database.iter().map(|p| proj.project(p)).collect::<Result<Vec<_>>>()?;
    Ok((q, db))
}

pub fn mine_triplets(query: &Traverse, database: &Traverse, config: &MiningConfig) -> Result<Mining> {
    let times = |t: &Traverse| t.samples.iter().map(|s| s.timestamp).collect::<Vec<_>>();
    let mining = mine_triplets_at(
        (&query.positions(), &times(query)),
        (&database.positions(), &times(database)),
        config,
    )?;
    if mining.skipped > 0 {
        log::info!(
            "{} / {}: skipped {} queries without a potential positive",
            query.name,
            database.name,
            mining.skipped
        );
    }
    Ok(mining)
}

/// [`mine_triplets`] over bare `(positions, timestamps)` lists.
pub fn mine_triplets_at(
    query: (&[Position], &[Timestamp]),
    database: (&[Position], &[Timestamp]),
    config: &MiningConfig,
) -> Result<Mining> {
    config.validate()?;
    let (q_xy, db_xy) = project_pair(query.0, database.0)?;
    let mut mining = Mining::default();
    for (qi, q) in q_xy.iter().enumerate() {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (di, d) in db_xy.iter().enumerate() {
            let dist = (q[0] - d[0]).hypot(q[1] - d[1]);
            if dist <= config.pos_threshold {
                positives.push(di);
            } else if dist > config.neg_threshold {
                negatives.push(di);
            }
        }
        if positives.is_empty() {
            mining.skipped += 1;
            continue;
        }
        let qt = query.1[qi];
        negatives.sort_by_key(|&di| (negative_rank(config.seed, qt, database.1[di]), di));
        negatives.truncate(config.negatives_per_query);
        negatives.sort_unstable();
        mining.triplets.push(TripletSpec {
            query_index: qi,
            potential_positive_indices: positives,
            negative_indices: negatives,
        });
    }
    Ok(mining)
}

/// Distances from each query to each database entry, in meters.
pub fn pairwise_geo_distances(query: &[Position], database: &[Position]) -> Result<Vec<Vec<f64>>> {
    query
        .iter()
        .map(|q| database.iter().map(|d| geo_distance(q, d)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Polarity;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar(x: f64, y: f64) -> Position {
        Position::Planar { x, y }
    }

    fn traverse_at(name: &str, pts: &[[f64; 2]]) -> Traverse {
        let sensor = SensorSize::new(2, 2);
        Traverse {
            name: name.into(),
            samples: pts
                .iter()
                .enumerate()
                .map(|(i, p)| PlaceSample {
                    frame: Frame::gray(2, 2, vec![0.0; 4]),
                    event_volume: EventVolume::empty(0, 1, sensor),
                    position: planar(p[0], p[1]),
                    timestamp: 1000 + i as u64 * 7,
                })
                .collect(),
        }
    }

    #[test]
    fn distance_identity_and_triangle() {
        let a = Position::LatLon { lat: -27.47, lon: 153.02 };
        assert_eq!(geo_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(geo_distance(&planar(0., 0.), &planar(3., 4.)).unwrap(), 5.0);
    }

    #[test]
    fn equator_millidegree() {
        let a = Position::LatLon { lat: 0.0, lon: 0.0 };
        let b = Position::LatLon { lat: 0.0, lon: 0.001 };
        // Independent evaluation: arc length on a sphere along the equator.
        let expected = 111.32;
        let d = geo_distance(&a, &b).unwrap();
        assert!((d - expected).abs() / expected < 0.005, "{d}");
    }

    #[test]
    fn mixed_conventions_rejected() {
        let a = Position::LatLon { lat: 0.0, lon: 0.0 };
        assert!(geo_distance(&a, &planar(0., 0.)).is_err());
        assert!(LocalProjection::fit([a, planar(0., 0.)].iter()).is_err());
    }

    #[test]
    fn projection_tracks_haversine_at_city_scale() {
        let base = Position::LatLon { lat: -27.47, lon: 153.02 };
        let other = Position::LatLon { lat: -27.4712, lon: 153.0231 };
        let proj = LocalProjection::fit([base, other].iter()).unwrap();
        let a = proj.project(&base).unwrap();
        let b = proj.project(&other).unwrap();
        let flat = (a[0] - b[0]).hypot(a[1] - b[1]);
        let sphere = geo_distance(&base, &other).unwrap();
        assert!((flat - sphere).abs() / sphere < 1e-3);
    }

    #[test]
    fn thresholds_must_be_ordered() {
        let t = traverse_at("q", &[[0., 0.]]);
        let cfg = MiningConfig {
            pos_threshold: 75.0,
            neg_threshold: 75.0,
            ..Default::default()
        };
        assert!(matches!(mine_triplets(&t, &t, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn colocated_database_point_is_positive() {
        let q = traverse_at("q", &[[10., 10.]]);
        let db = traverse_at("db", &[[10., 10.], [500., 0.]]);
        let m = mine_triplets(&q, &db, &MiningConfig::default()).unwrap();
        assert_eq!(m.triplets[0].potential_positive_indices, vec![0]);
        assert_eq!(m.triplets[0].negative_indices, vec![1]);
    }

    #[test]
    fn query_without_positive_is_skipped() {
        let q = traverse_at("q", &[[0., 0.], [1000., 0.]]);
        let db = traverse_at("db", &[[0., 5.], [200., 0.]]);
        let m = mine_triplets(&q, &db, &MiningConfig::default()).unwrap();
        assert_eq!(m.skipped, 1);
        assert_eq!(m.triplets.len(), 1);
    }

    #[test]
    fn mining_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<[f64; 2]> = (0..200)
            .map(|_| [rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)])
            .collect();
        let q = traverse_at("q", &pts[..100]);
        let db = traverse_at("db", &pts[100..]);
        let cfg = MiningConfig {
            negatives_per_query: usize::MAX,
            ..Default::default()
        };
        let m = mine_triplets(&q, &db, &cfg).unwrap();
        let mut expected = Vec::new();
        for (qi, a) in pts[..100].iter().enumerate() {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (di, b) in pts[100..].iter().enumerate() {
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                if d <= 25.0 {
                    pos.push(di);
                }
                if d > 75.0 {
                    neg.push(di);
                }
            }
            if !pos.is_empty() {
                expected.push(TripletSpec {
                    query_index: qi,
                    potential_positive_indices: pos,
                    negative_indices: neg,
                });
            }
        }
        assert_eq!(m.triplets, expected);
        assert_eq!(m.skipped, 100 - expected.len());
    }

    #[test]
    fn negative_sample_is_invariant_to_database_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f64; 2]> = (0..60)
            .map(|_| [rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)])
            .collect();
        let q = traverse_at("q", &pts[..10]);
        let db = traverse_at("db", &pts[10..]);
        let mut shuffled = db.clone();
        shuffled.samples.reverse();
        let cfg = MiningConfig {
            negatives_per_query: 5,
            seed: 99,
            ..Default::default()
        };
        let a = mine_triplets(&q, &db, &cfg).unwrap();
        let b = mine_triplets(&q, &shuffled, &cfg).unwrap();
        let ids = |t: &Traverse, idx: &[usize]| {
            let mut v: Vec<u64> = idx.iter().map(|&i| t.samples[i].timestamp).collect();
            v.sort();
            v
        };
        for (ta, tb) in a.triplets.iter().zip(&b.triplets) {
            assert_eq!(ids(&db, &ta.negative_indices), ids(&shuffled, &tb.negative_indices));
            assert_eq!(
                ids(&db, &ta.potential_positive_indices),
                ids(&shuffled, &tb.potential_positive_indices)
            );
        }
    }

    fn write_dir(root: &Path, n: usize, events: &[Event]) {
        let t = Traverse {
            name: "x".into(),
            samples: (0..n)
                .map(|i| PlaceSample {
                    frame: Frame::gray(4, 3, vec![i as f32 / n as f32; 12]),
                    event_volume: EventVolume::empty(0, 0, SensorSize::new(4, 3)),
                    position: planar(i as f64, 0.0),
                    timestamp: 100_000 + i as u64 * 25_000,
                })
                .collect(),
        };
        write_traverse(root, &t, events).unwrap();
    }

    #[test]
    fn load_ten_frames_with_full_pose_coverage() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), 10, &[]);
        let t = load_traverse(dir.path(), &LoadConfig::default()).unwrap();
        assert_eq!(t.len(), 10);
        assert!(t.samples.iter().all(|s| s.event_volume.is_empty()));
        assert!(t.samples.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn consecutive_windows_partition_stream() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut events: Vec<Event> = (0..2000)
            .map(|_| Event::new(rng.random_range(80_000..360_000), 1, 1, Polarity::Positive))
            .collect();
        events.sort_by_key(|e| e.t);
        write_dir(dir.path(), 10, &events);
        let t = load_traverse(dir.path(), &LoadConfig::default()).unwrap();
        for (i, a) in t.samples.iter().enumerate() {
            for b in &t.samples[i + 1..] {
                let (va, vb) = (&a.event_volume, &b.event_volume);
                assert!(va.t_end <= vb.t_start || vb.t_end <= va.t_start);
            }
        }
        let covered: usize = t.samples.iter().map(|s| s.event_volume.len()).sum();
        let span = events.iter().filter(|e| (87_500..337_500).contains(&e.t)).count();
        assert_eq!(covered, span);
    }

    #[test]
    fn missing_pose_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), 2, &[]);
        std::fs::remove_file(dir.path().join("poses.csv")).unwrap();
        let err = load_traverse(dir.path(), &LoadConfig::default()).unwrap_err();
        assert!(err.to_string().contains("poses.csv"), "{err}");
    }

    #[test]
    fn frames_far_from_any_pose_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), 3, &[]);
        std::fs::write(dir.path().join("poses.csv"), "t_us,x,y\n100000,0,0\n").unwrap();
        let cfg = LoadConfig {
            max_pose_gap_us: 30_000,
            ..Default::default()
        };
        let t = load_traverse(dir.path(), &cfg).unwrap();
        assert_eq!(t.len(), 2);
    }

    proptest! {
        #[test]
        fn planar_distance_is_a_metric(
            a in prop::array::uniform2(-1e3f64..1e3),
            b in prop::array::uniform2(-1e3f64..1e3),
            c in prop::array::uniform2(-1e3f64..1e3),
        ) {
            let (a, b, c) = (planar(a[0], a[1]), planar(b[0], b[1]), planar(c[0], c[1]));
            let ab = geo_distance(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, geo_distance(&b, &a).unwrap());
            let ac = geo_distance(&a, &c).unwrap();
            let cb = geo_distance(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }

        #[test]
        fn positives_and_negatives_are_disjoint(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 2]> = (0..40).map(|_| [rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)]).collect();
            let q = traverse_at("q", &pts[..10]);
            let db = traverse_at("db", &pts[10..]);
            let m = mine_triplets(&q, &db, &MiningConfig::default()).unwrap();
            for t in &m.triplets {
                for p in &t.potential_positive_indices {
                    prop_assert!(!t.negative_indices.contains(p));
                }
            }
        }
    }
}
