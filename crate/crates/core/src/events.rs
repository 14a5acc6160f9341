//! Event streams: time-window slicing and per-polarity count frames.
//!
//! On disk an event table is either plain text (one `t_us x y p` record per
//! line, comma or whitespace separated, `p` in `{0,1}`) or the packed binary
//! layout written by [`write_event_file`]. See the README for both layouts.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resample_area, Fold};

/// Microseconds.
pub type Timestamp = u64;

pub const BINARY_MAGIC: &[u8; 4] = b"FEVT";
pub const BINARY_VERSION: u32 = 1;
const RECORD_BYTES: usize = 8 + 2 + 2 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn from_sign(sign: i8) -> Result<Self> {
        match sign {
            -1 => Ok(Polarity::Negative),
            1 => Ok(Polarity::Positive),
            other => Err(Error::Validation(format!(
                "polarity must be -1 or +1, got {other}"
            ))),
        }
    }

    /// On-disk encoding: 0 = negative, 1 = positive.
    pub fn from_bit(bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(Polarity::Negative),
            1 => Ok(Polarity::Positive),
            other => Err(Error::Validation(format!(
                "polarity bit must be 0 or 1, got {other}"
            ))),
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    /// Frame channel holding this polarity's counts.
    pub fn channel(self) -> usize {
        self.bit() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: Timestamp,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: Timestamp, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorSize {
    pub width: u32,
    pub height: u32,
}

impl SensorSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    fn contains(&self, e: &Event) -> bool {
        (e.x as u32) < self.width && (e.y as u32) < self.height
    }
}

/// Where the slicing window sits relative to the reference timestamp.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// `[t - w/2, t - w/2 + w)`
    #[default]
    Centered,
    /// `[t - w, t)`
    Trailing,
}

/// Half-open window `[start, end)` for a reference time. Start saturates at 0.
pub fn window_bounds(t_ref: Timestamp, window: u64, mode: WindowMode) -> (Timestamp, Timestamp) {
    let (before, after) = match mode {
        WindowMode::Centered => (window / 2, window - window / 2),
        WindowMode::Trailing => (window, 0),
    };
    (t_ref.saturating_sub(before), t_ref.saturating_add(after))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventVolume {
    pub events: Vec<Event>,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub sensor: SensorSize,
}

impl EventVolume {
    pub fn empty(t_start: Timestamp, t_end: Timestamp, sensor: SensorSize) -> Self {
        Self {
            events: Vec::new(),
            t_start,
            t_end,
            sensor,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Re-slice this volume. The result never extends beyond the current bounds.
    pub fn slice(&self, t_ref: Timestamp, window: u64, mode: WindowMode) -> Result<EventVolume> {
        let mut v = slice_sorted(&self.events, self.sensor, t_ref, window, mode)?;
        v.t_start = v.t_start.max(self.t_start);
        v.t_end = v.t_end.min(self.t_end).max(v.t_start);
        Ok(v)
    }

    pub fn count(&self, p: Polarity) -> usize {
        self.events.iter().filter(|e| e.p == p).count()
    }
}

/// A validated, time-ordered event sequence from one sensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    sensor: Option<SensorSize>,
}

impl EventStream {
    pub fn new(events: Vec<Event>, sensor: SensorSize) -> Result<Self> {
        check_sorted(&events)?;
        if let Some((i, e)) = events.iter().enumerate().find(|(_, e)| !sensor.contains(e)) {
            return Err(Error::Validation(format!(
                "event {i} at (x={}, y={}) lies outside the {}x{} sensor",
                e.x, e.y, sensor.width, sensor.height
            )));
        }
        Ok(Self {
            events,
            sensor: Some(sensor),
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn sensor(&self) -> Option<SensorSize> {
        self.sensor
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn slice(&self, t_ref: Timestamp, window: u64, mode: WindowMode) -> Result<EventVolume> {
        let sensor = self.sensor.unwrap_or(SensorSize::new(0, 0));
        slice_sorted(&self.events, sensor, t_ref, window, mode)
    }
}

fn check_sorted(events: &[Event]) -> Result<()> {
    if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(Error::Validation(format!(
            "event stream is not sorted by time: event {} (t={}) follows t={}",
            i + 1,
            events[i + 1].t,
            events[i].t
        )));
    }
    Ok(())
}

fn slice_sorted(
    events: &[Event],
    sensor: SensorSize,
    t_ref: Timestamp,
    window: u64,
    mode: WindowMode,
) -> Result<EventVolume> {
    if window == 0 {
        return Err(Error::Validation("slicing window must be positive".into()));
    }
    let (t_start, t_end) = window_bounds(t_ref, window, mode);
    let lo = events.partition_point(|e| e.t < t_start);
    let hi = events.partition_point(|e| e.t < t_end);
    Ok(EventVolume {
        events: events[lo..hi].to_vec(),
        t_start,
        t_end,
        sensor,
    })
}

/// All events with `t` inside the window around `t_ref`. The stream must be
/// sorted by time; an unsorted stream is rejected.
pub fn slice_events(
    stream: &[Event],
    sensor: SensorSize,
    t_ref: Timestamp,
    window: u64,
    mode: WindowMode,
) -> Result<EventVolume> {
    check_sorted(stream)?;
    slice_sorted(stream, sensor, t_ref, window, mode)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Raw counts.
    None,
    /// Each channel divided by its own maximum.
    #[default]
    Max,
    /// Both channels divided by the total event count.
    Count,
}

impl std::str::FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "max" => Ok(Self::Max),
            "count" => Ok(Self::Count),
            other => Err(Error::Config(format!("unknown normalization '{other}'"))),
        }
    }
}

/// Two-channel raster: channel 0 counts negative events, channel 1 positive.
#[derive(Clone, Debug, PartialEq)]
pub struct EventFrame {
    pub data: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub normalization: Normalization,
}

impl EventFrame {
    pub fn zeros(width: usize, height: usize, normalization: Normalization) -> Self {
        Self {
            data: vec![0.0; 2 * width * height],
            width,
            height,
            normalization,
        }
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn channel_sum(&self, channel: usize) -> f64 {
        self.channel(channel).iter().map(|&v| v as f64).sum()
    }

    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

pub fn events_to_frame(
    volume: &EventVolume,
    out_size: (usize, usize),
    normalization: Normalization,
) -> Result<EventFrame> {
    let (out_w, out_h) = out_size;
    if out_w == 0 || out_h == 0 {
        return Err(Error::Validation(format!(
            "output size must be positive, got {out_w}x{out_h}"
        )));
    }
    let sw = volume.sensor.width as usize;
    let sh = volume.sensor.height as usize;
    if volume.events.is_empty() {
        return Ok(EventFrame::zeros(out_w, out_h, normalization));
    }
    let mut hist = vec![0f32; 2 * sw * sh];
    for (i, e) in volume.events.iter().enumerate() {
        if !volume.sensor.contains(e) {
            return Err(Error::Validation(format!(
                "event {i} at (x={}, y={}) lies outside the {sw}x{sh} sensor",
                e.x, e.y
            )));
        }
        hist[(e.p.channel() * sh + e.y as usize) * sw + e.x as usize] += 1.0;
    }

    let mut data = Vec::with_capacity(2 * out_w * out_h);
    for c in 0..2 {
        let plane = &hist[c * sw * sh..(c + 1) * sw * sh];
        data.extend(resample_area(plane, (sw, sh), (out_w, out_h), Fold::Sum));
    }

    let n = out_w * out_h;
    match normalization {
        Normalization::None => {}
        Normalization::Max => {
            for plane in data.chunks_mut(n) {
                let max = plane.iter().copied().fold(0f32, f32::max);
                if max > 0.0 {
                    plane.iter_mut().for_each(|v| *v /= max);
                }
            }
        }
        Normalization::Count => {
            let total = volume.events.len() as f32;
            data.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(EventFrame {
        data,
        width: out_w,
        height: out_h,
        normalization,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFileFormat {
    Text,
    Binary,
}

/// Read an event table, auto-detecting the binary layout by its magic bytes.
pub fn read_event_file(path: &Path) -> Result<Vec<Event>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 4];
    let n = read_up_to(&mut file, &mut head).map_err(|e| Error::io(path, e))?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    if n == 4 && &head == BINARY_MAGIC {
        read_binary(path, BufReader::new(file))
    } else {
        read_text(path, BufReader::new(file))
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

fn read_binary(path: &Path, mut r: impl Read) -> Result<Vec<Event>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(Error::file(path, format!("unsupported event file version {version}")));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut events = Vec::with_capacity(count);
    let mut rec = [0u8; RECORD_BYTES];
    for i in 0..count {
        r.read_exact(&mut rec)
            .map_err(|_| Error::file(path, format!("truncated at record {i} of {count}")))?;
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let p = Polarity::from_bit(rec[12])
            .map_err(|e| Error::file(path, format!("record {i}: {e}")))?;
        events.push(Event { t, x, y, p });
    }
    Ok(events)
}

fn read_text(path: &Path, r: impl BufRead) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        // Optional column header.
        if idx == 0 && line.starts_with(|c: char| c.is_ascii_alphabetic()) {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 columns (t_us x y p), found {}", fields.len())));
        }
        let t = fields[0]
            .parse::<u64>()
            .map_err(|e| parse_err(format!("bad timestamp '{}': {e}", fields[0])))?;
        let x = fields[1]
            .parse::<u16>()
            .map_err(|e| parse_err(format!("bad x '{}': {e}", fields[1])))?;
        let y = fields[2]
            .parse::<u16>()
            .map_err(|e| parse_err(format!("bad y '{}': {e}", fields[2])))?;
        let bit = fields[3]
            .parse::<u8>()
            .map_err(|e| parse_err(format!("bad polarity '{}': {e}", fields[3])))?;
        let p = Polarity::from_bit(bit).map_err(|e| parse_err(e.to_string()))?;
        events.push(Event { t, x, y, p });
    }
    Ok(events)
}

pub fn write_event_file(path: &Path, events: &[Event], format: EventFileFormat) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    match format {
        EventFileFormat::Binary => {
            w.write_all(BINARY_MAGIC).map_err(io)?;
            w.write_all(&BINARY_VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(events.len() as u64).to_le_bytes()).map_err(io)?;
            for e in events {
                w.write_all(&e.t.to_le_bytes()).map_err(io)?;
                w.write_all(&e.x.to_le_bytes()).map_err(io)?;
                w.write_all(&e.y.to_le_bytes()).map_err(io)?;
                w.write_all(&[e.p.bit()]).map_err(io)?;
            }
        }
        EventFileFormat::Text => {
            writeln!(w, "t_us,x,y,p").map_err(io)?;
            for e in events {
                writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p.bit()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SENSOR: SensorSize = SensorSize {
        width: 16,
        height: 12,
    };

    fn random_stream(rng: &mut ChaCha8Rng, n: usize, t_max: u64) -> Vec<Event> {
        let mut ev: Vec<Event> = (0..n)
            .map(|_| {
                let p = if rng.random_bool(0.5) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                Event::new(
                    rng.random_range(0..t_max),
                    rng.random_range(0..SENSOR.width as u16),
                    rng.random_range(0..SENSOR.height as u16),
                    p,
                )
            })
            .collect();
        ev.sort_by_key(|e| e.t);
        ev
    }

    #[test]
    fn empty_stream_gives_empty_volume() {
        let v = slice_events(&[], SENSOR, 1_000, 25_000, WindowMode::Centered).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn brisbane_window_covers_25ms_span() {
        let stream: Vec<Event> = (0..100u64)
            .map(|i| Event::new(i * 1_000, 0, 0, Polarity::Positive))
            .collect();
        let v = slice_events(&stream, SENSOR, 50_000, 25_000, WindowMode::Centered).unwrap();
        assert_eq!((v.t_start, v.t_end), (37_500, 62_500));
        let ts: Vec<u64> = v.events.iter().map(|e| e.t).collect();
        assert_eq!(ts, (38..=62).map(|i| i * 1_000).collect::<Vec<_>>());
    }

    #[test]
    fn event_at_window_end_is_excluded() {
        let stream = vec![
            Event::new(10, 0, 0, Polarity::Positive),
            Event::new(20, 0, 0, Polarity::Positive),
        ];
        let v = slice_events(&stream, SENSOR, 15, 10, WindowMode::Centered).unwrap();
        assert_eq!(v.events.len(), 1);
        assert_eq!(v.events[0].t, 10);
    }

    #[test]
    fn trailing_window() {
        let stream: Vec<Event> = (0..10u64)
            .map(|i| Event::new(i * 10, 0, 0, Polarity::Negative))
            .collect();
        let v = slice_events(&stream, SENSOR, 50, 20, WindowMode::Trailing).unwrap();
        assert_eq!(v.events.iter().map(|e| e.t).collect::<Vec<_>>(), vec![30, 40]);
    }

    #[test]
    fn unsorted_stream_rejected() {
        let stream = vec![
            Event::new(20, 0, 0, Polarity::Positive),
            Event::new(10, 0, 0, Polarity::Positive),
        ];
        let err = slice_events(&stream, SENSOR, 15, 10, WindowMode::Centered).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn slicing_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stream = random_stream(&mut rng, 1000, 1_000_000);
        for _ in 0..100 {
            let center = rng.random_range(0..1_100_000u64);
            let window = rng.random_range(1..200_000u64);
            let v = slice_events(&stream, SENSOR, center, window, WindowMode::Centered).unwrap();
            let lo = center.saturating_sub(window / 2);
            let hi = center + (window - window / 2);
            let expected: Vec<Event> = stream
                .iter()
                .filter(|e| e.t >= lo && e.t < hi)
                .copied()
                .collect();
            assert_eq!(v.events, expected);
        }
    }

    #[test]
    fn single_event_frame() {
        let vol = EventVolume {
            events: vec![Event::new(0, 3, 5, Polarity::Positive)],
            t_start: 0,
            t_end: 1,
            sensor: SENSOR,
        };
        let f = events_to_frame(&vol, (16, 12), Normalization::None).unwrap();
        for c in 0..2 {
            for y in 0..12 {
                for x in 0..16 {
                    let want = if (c, y, x) == (1, 5, 3) { 1.0 } else { 0.0 };
                    assert_eq!(f.get(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn empty_volume_gives_zero_frame() {
        let vol = EventVolume::empty(0, 10, SENSOR);
        let f = events_to_frame(&vol, (8, 6), Normalization::Max).unwrap();
        assert_eq!(f.data.len(), 2 * 8 * 6);
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_bounds_event_names_index() {
        let vol = EventVolume {
            events: vec![
                Event::new(0, 1, 1, Polarity::Positive),
                Event::new(1, 16, 1, Polarity::Positive),
            ],
            t_start: 0,
            t_end: 2,
            sensor: SENSOR,
        };
        let err = events_to_frame(&vol, (16, 12), Normalization::None).unwrap_err();
        assert!(err.to_string().contains("event 1"), "{err}");
    }

    #[test]
    fn channel_sums_match_polarity_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let events = random_stream(&mut rng, 500, 10_000);
        let neg = events.iter().filter(|e| e.p == Polarity::Negative).count();
        let pos = events.len() - neg;
        let vol = EventVolume {
            events,
            t_start: 0,
            t_end: 10_000,
            sensor: SENSOR,
        };
        let f = events_to_frame(&vol, (16, 12), Normalization::None).unwrap();
        assert_eq!(f.channel_sum(0), neg as f64);
        assert_eq!(f.channel_sum(1), pos as f64);
        assert!(f.data.iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn max_and_count_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vol = EventVolume {
            events: random_stream(&mut rng, 300, 10_000),
            t_start: 0,
            t_end: 10_000,
            sensor: SENSOR,
        };
        let f = events_to_frame(&vol, (8, 6), Normalization::Max).unwrap();
        for c in 0..2 {
            let max = f.channel(c).iter().copied().fold(0f32, f32::max);
            assert!((max - 1.0).abs() < 1e-6);
            assert!(f.channel(c).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let f = events_to_frame(&vol, (8, 6), Normalization::Count).unwrap();
        assert!((f.total() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn text_and_binary_files_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let events = random_stream(&mut rng, 50, 1000);
        for (name, fmt) in [("a.txt", EventFileFormat::Text), ("a.dat", EventFileFormat::Binary)] {
            let path = dir.path().join(name);
            write_event_file(&path, &events, fmt).unwrap();
            assert_eq!(read_event_file(&path).unwrap(), events);
        }
    }

    #[test]
    fn text_polarity_must_be_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "t_us,x,y,p\n1,2,3,1\n2,2,3,-1\n").unwrap();
        let err = read_event_file(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    fn arb_stream() -> impl Strategy<Value = Vec<Event>> {
        prop::collection::vec((0u64..5_000, 0u16..16, 0u16..12, any::<bool>()), 0..200).prop_map(
            |mut v| {
                v.sort_by_key(|e| e.0);
                v.into_iter()
                    .map(|(t, x, y, p)| {
                        Event::new(t, x, y, if p { Polarity::Positive } else { Polarity::Negative })
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn count_conservation(stream in arb_stream()) {
            let vol = EventVolume { events: stream.clone(), t_start: 0, t_end: 5_000, sensor: SENSOR };
            let f = events_to_frame(&vol, (16, 12), Normalization::None).unwrap();
            prop_assert_eq!(f.total(), stream.len() as f64);
        }

        #[test]
        fn count_conservation_under_resampling(stream in arb_stream(), w in 1usize..20, h in 1usize..20) {
            let vol = EventVolume { events: stream.clone(), t_start: 0, t_end: 5_000, sensor: SENSOR };
            let f = events_to_frame(&vol, (w, h), Normalization::None).unwrap();
            prop_assert!((f.total() - stream.len() as f64).abs() < 1e-3);
        }

        #[test]
        fn polarity_separation(stream in arb_stream()) {
            let flipped: Vec<Event> = stream.iter().map(|e| {
                let p = if e.p == Polarity::Positive { Polarity::Negative } else { Polarity::Positive };
                Event { p, ..*e }
            }).collect();
            let a = events_to_frame(&EventVolume { events: stream, t_start: 0, t_end: 5_000, sensor: SENSOR }, (16, 12), Normalization::None).unwrap();
            let b = events_to_frame(&EventVolume { events: flipped, t_start: 0, t_end: 5_000, sensor: SENSOR }, (16, 12), Normalization::None).unwrap();
            prop_assert_eq!(a.channel(0), b.channel(1));
            prop_assert_eq!(a.channel(1), b.channel(0));
        }

        #[test]
        fn slicing_is_idempotent(stream in arb_stream(), center in 0u64..6_000, window in 1u64..3_000) {
            let once = slice_events(&stream, SENSOR, center, window, WindowMode::Centered).unwrap();
            let twice = once.slice(center, window, WindowMode::Centered).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
