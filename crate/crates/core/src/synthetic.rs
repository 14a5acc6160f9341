//! A small procedural world for end-to-end tests: places on a circular
//! loop, each with its own texture, observed by a camera that records
//! intensity frames and brightness-change events.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_traverse, Frame, PlaceSample, Position, Traverse};
use crate::error::Result;
use crate::events::{Event, EventStream, Polarity, SensorSize, Timestamp, WindowMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub places: usize,
    /// Arc length between consecutive places, meters.
    pub spacing_m: f64,
    pub image_size: usize,
    /// Texture pixels per meter of along-track offset.
    pub pixels_per_meter: f64,
    /// Camera motion inside one event window, pixels.
    pub motion_px: f64,
    /// Log-intensity change that triggers an event.
    pub contrast_threshold: f64,
    pub window_us: u64,
    /// Time between consecutive places.
    pub place_interval_us: u64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            places: 32,
            spacing_m: 50.0,
            image_size: 64,
            pixels_per_meter: 0.6,
            motion_px: 2.0,
            contrast_threshold: 0.12,
            window_us: 25_000,
            place_interval_us: 1_000_000,
            seed: 0,
        }
    }
}

/// What goes wrong with a traverse's sensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    #[default]
    None,
    /// Frames are washed out towards white.
    Glare,
    /// The event camera reports nothing.
    NoEvents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraverseStyle {
    pub name: String,
    pub seed: u64,
    /// Along-track pose jitter bound, meters.
    pub jitter_m: f64,
    pub gain: f64,
    pub offset: f64,
    pub noise: f64,
    pub corruption: Corruption,
}

impl Default for TraverseStyle {
    fn default() -> Self {
        Self {
            name: "traverse".into(),
            seed: 1,
            jitter_m: 5.0,
            gain: 1.0,
            offset: 0.0,
            noise: 0.02,
            corruption: Corruption::None,
        }
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

struct Blob {
    x: f64,
    y: f64,
    r: f64,
    amp: f64,
}

struct Texture {
    waves: Vec<Wave>,
    blobs: Vec<Blob>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let waves = (0..6)
            .map(|_| {
                let cycles = rng.random_range(1.5..7.0);
                let theta = rng.random_range(0.0..PI);
                let f = 2.0 * PI * cycles / size;
                Wave {
                    fx: f * theta.cos(),
                    fy: f * theta.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: rng.random_range(0.3..1.0),
                }
            })
            .collect();
        let blobs = (0..5)
            .map(|_| Blob {
                x: rng.random_range(0.0..size),
                y: rng.random_range(0.0..size),
                r: rng.random_range(0.06..0.2) * size,
                amp: rng.random_range(-1.0..1.0),
            })
            .collect();
        Self { waves, blobs }
    }

    /// Intensity in `[0, 1]` at continuous coordinates.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.0;
        let mut norm = 0.0;
        for w in &self.waves {
            v += w.amp * (w.fx * x + w.fy * y + w.phase).sin();
            norm += w.amp;
        }
        v /= norm;
        for b in &self.blobs {
            let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
            v += b.amp * (-d2 / (2.0 * b.r * b.r)).exp();
        }
        (0.5 + 0.3 * v).clamp(0.0, 1.0)
    }
}

pub struct World {
    pub config: WorldConfig,
    textures: Vec<Texture>,
}

impl World {
    pub fn new(config: WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let textures = (0..config.places)
            .map(|_| Texture::random(&mut rng, config.image_size as f64))
            .collect();
        Self { config, textures }
    }

    pub fn circumference(&self) -> f64 {
        self.config.places as f64 * self.config.spacing_m
    }

    /// Planar position of arc length `s` along the loop.
    pub fn position(&self, s: f64) -> Position {
        let r = self.circumference() / (2.0 * PI);
        let a = 2.0 * PI * s / self.circumference();
        Position::Planar {
            x: r * a.cos(),
            y: r * a.sin(),
        }
    }

    fn render(&self, place: usize, shift_px: f64, style: &TraverseStyle) -> Vec<f64> {
        let n = self.config.image_size;
        let tex = &self.textures[place];
        let mut img = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let v = tex.sample(x as f64 + shift_px, y as f64);
                img.push((style.gain * v + style.offset).clamp(0.0, 1.0));
            }
        }
        img
    }

    /// Simulate one traverse; returns the samples and the full event stream.
    pub fn traverse(&self, style: &TraverseStyle) -> Result<(Traverse, Vec<Event>)> {
        let cfg = &self.config;
        let n = cfg.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(style.seed);
        let noise = Normal::new(0.0, style.noise.max(0.0)).expect("finite std");
        let sensor = SensorSize::new(n as u32, n as u32);
        let mut events: Vec<Event> = Vec::new();
        let mut frames = Vec::with_capacity(cfg.places);
        for place in 0..cfg.places {
            let jitter = if style.jitter_m > 0.0 {
                rng.random_range(-style.jitter_m..=style.jitter_m)
            } else {
                0.0
            };
            let t: Timestamp = place as u64 * cfg.place_interval_us + cfg.place_interval_us / 2;
            let shift = jitter * cfg.pixels_per_meter;

            let mut pixels = self.render(place, shift, style);
            for v in &mut pixels {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                if style.corruption == Corruption::Glare {
                    *v = (0.15 * *v + 0.9).min(1.0);
                }
            }
            frames.push((t, jitter, pixels));

            if style.corruption != Corruption::NoEvents {
                events.extend(self.simulate_events(place, shift, t, style, &mut rng));
            }
        }
        let stream = EventStream::new(events.clone(), sensor)?;
        let samples = frames
            .into_iter()
            .map(|(t, jitter, pixels)| {
                let place = (t / cfg.place_interval_us) as f64;
                Ok(PlaceSample {
                    frame: Frame::gray(n, n, pixels.into_iter().map(|v| v as f32).collect()),
                    event_volume: stream.slice(t, cfg.window_us, WindowMode::Centered)?,
                    position: self.position(place * cfg.spacing_m + jitter),
                    timestamp: t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Traverse {
                name: style.name.clone(),
                samples,
            },
            events,
        ))
    }

    /// Events from thresholded log-intensity changes while the camera pans
    /// across the window centered on `t`.
    fn simulate_events(
        &self,
        place: usize,
        shift: f64,
        t: Timestamp,
        style: &TraverseStyle,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Event> {
        const STEPS: usize = 12;
        let cfg = &self.config;
        let n = cfg.image_size;
        let t0 = t - cfg.window_us / 2;
        let log = |v: f64| (v + 0.05).ln();
        let start = shift - cfg.motion_px / 2.0;
        let mut reference: Vec<f64> = self.render(place, start, style).into_iter().map(log).collect();
        let mut out = Vec::new();
        for step in 1..=STEPS {
            let frac = step as f64 / STEPS as f64;
            let img = self.render(place, start + cfg.motion_px * frac, style);
            let ts = t0 + ((cfg.window_us as f64) * (step as f64 - 0.5) / STEPS as f64) as u64;
            for (i, v) in img.into_iter().enumerate() {
                let l = log(v);
                let diff = l - reference[i];
                if diff.abs() >= cfg.contrast_threshold {
                    // A little sensor noise: occasionally drop an event.
                    if rng.random_bool(0.95) {
                        let p = if diff > 0.0 { Polarity::Positive } else { Polarity::Negative };
                        out.push(Event::new(ts, (i % n) as u16, (i / n) as u16, p));
                    }
                    reference[i] = l;
                }
            }
        }
        out
    }
}

/// Named traverse styles used by tests and the `synth` command.
pub fn standard_styles() -> Vec<TraverseStyle> {
    vec![
        TraverseStyle {
            name: "database".into(),
            seed: 11,
            ..Default::default()
        },
        TraverseStyle {
            name: "train_query".into(),
            seed: 12,
            gain: 0.85,
            offset: 0.05,
            ..Default::default()
        },
        TraverseStyle {
            name: "validation".into(),
            seed: 13,
            gain: 1.1,
            offset: -0.04,
            ..Default::default()
        },
        TraverseStyle {
            name: "heldout".into(),
            seed: 14,
            gain: 0.9,
            offset: 0.06,
            ..Default::default()
        },
        TraverseStyle {
            name: "glare".into(),
            seed: 15,
            corruption: Corruption::Glare,
            ..Default::default()
        },
        TraverseStyle {
            name: "no_events".into(),
            seed: 16,
            corruption: Corruption::NoEvents,
            ..Default::default()
        },
    ]
}

/// Generate every standard traverse under `root/<name>/`.
pub fn write_world(root: &Path, config: &WorldConfig) -> Result<Vec<String>> {
    let world = World::new(config.clone());
    let mut names = Vec::new();
    for style in standard_styles() {
        let (traverse, events) = world.traverse(&style)?;
        write_traverse(&root.join(&style.name), &traverse, &events)?;
        names.push(style.name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{geo_distance, load_traverse, LoadConfig};

    fn small() -> WorldConfig {
        WorldConfig {
            places: 8,
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn places_are_spaced_along_the_loop() {
        let w = World::new(WorldConfig::default());
        let d = geo_distance(&w.position(0.0), &w.position(50.0)).unwrap();
        assert!((d - 50.0).abs() < 0.2, "{d}");
        let wrap = geo_distance(&w.position(0.0), &w.position(31.0 * 50.0)).unwrap();
        assert!((wrap - d).abs() < 1e-6);
    }

    #[test]
    fn jitter_is_bounded() {
        let w = World::new(small());
        let (t, _) = w.traverse(&TraverseStyle::default()).unwrap();
        for (i, s) in t.samples.iter().enumerate() {
            let d = geo_distance(&s.position, &w.position(i as f64 * 50.0)).unwrap();
            assert!(d <= 5.0 + 1e-9);
        }
    }

    #[test]
    fn corruptions() {
        let w = World::new(small());
        let (clean, ev) = w.traverse(&TraverseStyle::default()).unwrap();
        assert!(!ev.is_empty());
        assert!(clean.samples.iter().all(|s| !s.event_volume.is_empty()));
        let (none, ev) = w
            .traverse(&TraverseStyle {
                corruption: Corruption::NoEvents,
                ..Default::default()
            })
            .unwrap();
        assert!(ev.is_empty() && none.samples.iter().all(|s| s.event_volume.is_empty()));
        let (glare, _) = w
            .traverse(&TraverseStyle {
                corruption: Corruption::Glare,
                ..Default::default()
            })
            .unwrap();
        assert!(glare.samples.iter().all(|s| s.frame.data.iter().all(|&v| v >= 0.9)));
    }

    #[test]
    fn deterministic_and_round_trips_through_disk() {
        let w = World::new(small());
        let (a, ev) = w.traverse(&TraverseStyle::default()).unwrap();
        let (b, _) = w.traverse(&TraverseStyle::default()).unwrap();
        assert_eq!(a.samples[3].frame, b.samples[3].frame);
        let dir = tempfile::tempdir().unwrap();
        write_traverse(dir.path(), &a, &ev).unwrap();
        let loaded = load_traverse(dir.path(), &LoadConfig::default()).unwrap();
        assert_eq!(loaded.len(), a.len());
        for (x, y) in loaded.samples.iter().zip(&a.samples) {
            assert_eq!(x.event_volume.events, y.event_volume.events);
            assert_eq!(x.position, y.position);
            let max_err = x.frame.data.iter().zip(&y.frame.data).map(|(p, q)| (p - q).abs()).fold(0f32, f32::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-6);
        }
    }
}
