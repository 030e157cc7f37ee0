//! Deterministic synthetic sensors.
//!
//! Every payload is a pure function of `(SensorSimConfig, tick)`. Randomness
//! comes from a ChaCha stream selected by the tick index, so any tick can be
//! generated on its own without replaying earlier ones.

use icu_core::samples::{scalar_payload, SampleBatch};
use icu_core::{ColorImage, DepthFrame, Modality, TimestampMs, MS_PER_HOUR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FACE_BRIGHTNESS: std::ops::RangeInclusive<u8> = 220..=240;
pub const BACKGROUND: std::ops::RangeInclusive<u8> = 20..=90;
pub const WALL_DEPTH_MM: u16 = 3500;
pub const PERSON_DEPTHS_MM: [u16; 4] = [1500, 1800, 2100, 2400];
/// Fraction of depth pixels replaced by sensor dropouts (0 or 65535).
pub const SALT_FRACTION: f64 = 0.005;

const BACKGROUND_STREAM: u64 = (1 << 63) - 1;

/// A step function over ticks: the value of the last segment starting at or
/// before the tick. With `cycle` set, the tick is taken modulo the cycle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(default)]
    pub segments: Vec<(u64, u8)>,
    #[serde(default)]
    pub cycle: Option<u64>,
}

impl Schedule {
    pub fn constant(v: u8) -> Self {
        Self {
            segments: vec![(0, v)],
            cycle: None,
        }
    }

    /// One segment per tick, repeating: `[0, 1, 2, 1]` gives 0,1,2,1,0,1,...
    pub fn per_tick(values: &[u8]) -> Self {
        Self {
            segments: values.iter().enumerate().map(|(i, &v)| (i as u64, v)).collect(),
            cycle: Some(values.len() as u64),
        }
    }

    pub fn at(&self, tick: u64) -> u8 {
        let t = match self.cycle {
            Some(c) if c > 0 => tick % c,
            _ => tick,
        };
        self.segments
            .iter()
            .filter(|(start, _)| *start <= t)
            .max_by_key(|(start, _)| *start)
            .map_or(0, |&(_, v)| v)
    }
}

/// Diurnal curve for the environmental sensors:
/// `mean + amplitude·cos(2π(hour − peak_hour)/24) + U(−jitter, jitter)`,
/// plus any spikes covering the tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diurnal {
    pub mean: f64,
    pub amplitude: f64,
    pub peak_hour: f64,
    pub jitter: f64,
    /// `(from_tick, to_tick_exclusive, value)`; the value replaces the curve.
    #[serde(default)]
    pub spikes: Vec<(u64, u64, f64)>,
}

impl Default for Diurnal {
    fn default() -> Self {
        Self {
            mean: 40.0,
            amplitude: 10.0,
            peak_hour: 14.0,
            jitter: 2.0,
            spikes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    /// Faces visible in the RGB frame.
    pub faces: Schedule,
    /// Persons standing in the depth frame.
    pub persons: Schedule,
    pub eyes_closed: bool,
    pub mouth_open: bool,
    pub diurnal: Diurnal,
    /// Capture time of tick 0; used to place ticks on the diurnal curve.
    pub epoch_ms: TimestampMs,
    /// Local-time offset for the diurnal curve.
    pub utc_offset_hours: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            faces: Schedule::constant(1),
            persons: Schedule::constant(1),
            eyes_closed: false,
            mouth_open: false,
            diurnal: Diurnal::default(),
            epoch_ms: 0,
            utc_offset_hours: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSimConfig {
    pub modality: Modality,
    pub sensor_id: String,
    pub seed: u64,
    /// Samples per second; defaults to the modality's nominal rate.
    #[serde(default)]
    pub rate_hz: Option<f64>,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default)]
    pub scenario: Scenario,
}

fn default_width() -> usize {
    96
}

fn default_height() -> usize {
    72
}

impl SensorSimConfig {
    pub fn new(modality: Modality, sensor_id: impl Into<String>, seed: u64) -> Self {
        Self {
            modality,
            sensor_id: sensor_id.into(),
            seed,
            rate_hz: None,
            width: default_width(),
            height: default_height(),
            scenario: Scenario::default(),
        }
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz.unwrap_or_else(|| self.modality.nominal_rate_hz())
    }

    /// Milliseconds between payloads. Batched modalities emit one payload per second.
    pub fn period_ms(&self) -> i64 {
        if self.modality.is_batched() {
            self.modality.envelope_period_ms()
        } else {
            (1000.0 / self.rate_hz()).round().max(1.0) as i64
        }
    }

    pub fn tick_time(&self, tick: u64) -> TimestampMs {
        self.scenario.epoch_ms + tick as i64 * self.period_ms()
    }

    fn rng(&self, tick: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(tick);
        rng
    }

    /// Second stream per tick, for draws that must not shift the layout.
    fn aux_rng(&self, tick: u64) -> ChaCha8Rng {
        self.rng(tick | 1 << 63)
    }
}

/// Axis-aligned ellipse used for faces; `cx, cy` is the true centroid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Person silhouette: a head disc above a rectangular torso.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Silhouette {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub depth_mm: u16,
}

impl Silhouette {
    fn contains(&self, x: usize, y: usize) -> bool {
        if x < self.x || x >= self.x + self.w || y < self.y || y >= self.y + self.h {
            return false;
        }
        let head = self.w as f64 / 2.0;
        let (fx, fy) = (x as f64 + 0.5 - self.x as f64, y as f64 + 0.5 - self.y as f64);
        if fy < 2.0 * head {
            let (dx, dy) = (fx - head, fy - head);
            dx * dx + dy * dy <= head * head
        } else {
            // torso is narrower than the full width at the shoulders
            fx >= self.w as f64 * 0.1 && fx <= self.w as f64 * 0.9
        }
    }
}

/// Splits the frame width into `n` equal slots and returns the slot origin and width.
fn slots(width: usize, n: usize) -> impl Iterator<Item = (f64, f64)> {
    let slot = width as f64 / n.max(1) as f64;
    (0..n).map(move |i| (i as f64 * slot, slot))
}

/// Face layout for a tick: one ellipse per scripted face, each in its own
/// horizontal slot with seeded jitter. Faces never touch each other or the border.
pub fn face_layout(cfg: &SensorSimConfig, tick: u64) -> Vec<Ellipse> {
    let n = cfg.scenario.faces.at(tick) as usize;
    let mut rng = cfg.rng(tick);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    slots(cfg.width, n)
        .map(|(x0, slot)| {
            let rx = (slot * 0.28).min(h * 0.22);
            let ry = rx * 1.3;
            let jx = rng.gen_range(-0.08..=0.08) * slot;
            let jy = rng.gen_range(-0.1..=0.1) * h;
            Ellipse {
                cx: (x0 + slot / 2.0 + jx).clamp(rx + 2.0, w - rx - 2.0),
                cy: (h / 2.0 + jy).clamp(ry + 2.0, h - ry - 2.0),
                rx,
                ry,
            }
        })
        .collect()
}

pub fn person_layout(cfg: &SensorSimConfig, tick: u64) -> Vec<Silhouette> {
    let n = (cfg.scenario.persons.at(tick) as usize).min(PERSON_DEPTHS_MM.len());
    let mut rng = cfg.rng(tick);
    let h = cfg.height;
    slots(cfg.width, n)
        .enumerate()
        .map(|(i, (x0, slot))| {
            let w = ((slot * 0.5) as usize).max(4);
            let ph = (h * 7 / 10).max(8);
            let jitter = (slot * 0.1) as i64;
            let dx = if jitter > 0 { rng.gen_range(-jitter..=jitter) } else { 0 };
            let x = ((x0 + (slot - w as f64) / 2.0) as i64 + dx).max(1) as usize;
            Silhouette {
                x: x.min(cfg.width - w - 1),
                y: h - ph - 1,
                w,
                h: ph,
                depth_mm: PERSON_DEPTHS_MM[i],
            }
        })
        .collect()
}

fn background_texture(cfg: &SensorSimConfig) -> Vec<u8> {
    let mut rng = cfg.rng(BACKGROUND_STREAM);
    (0..cfg.width * cfg.height)
        .map(|_| rng.gen_range(BACKGROUND))
        .collect()
}

pub fn render_rgb(cfg: &SensorSimConfig, tick: u64) -> ColorImage {
    let faces = face_layout(cfg, tick);
    let mut rng = cfg.aux_rng(tick);
    let bg = background_texture(cfg);
    let (w, h) = (cfg.width, cfg.height);
    let mut px = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let v = bg[y * w + x];
            px[(y * w + x) * 3..][..3].copy_from_slice(&[v, v.saturating_sub(5), v.saturating_sub(10)]);
        }
    }
    for f in &faces {
        let tone = rng.gen_range(FACE_BRIGHTNESS);
        let eye_rx = (f.rx * 0.18).max(1.0);
        let eye_ry = (f.ry * 0.1).max(1.0);
        let eye_y = f.cy - f.ry * 0.25;
        let eyes = [
            Ellipse { cx: f.cx - f.rx * 0.4, cy: eye_y, rx: eye_rx, ry: eye_ry },
            Ellipse { cx: f.cx + f.rx * 0.4, cy: eye_y, rx: eye_rx, ry: eye_ry },
        ];
        let mouth = Ellipse { cx: f.cx, cy: f.cy + f.ry * 0.45, rx: f.rx * 0.3, ry: f.ry * 0.12 };
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if !f.contains(fx, fy) {
                    continue;
                }
                let mut rgb = [tone, tone, tone.saturating_sub(8)];
                if eyes.iter().any(|e| e.contains(fx, fy)) {
                    // open eyes are dark; closed lids are mid-grey, still below face threshold
                    rgb = if cfg.scenario.eyes_closed { [150, 140, 130] } else { [25, 20, 20] };
                } else if cfg.scenario.mouth_open && mouth.contains(fx, fy) {
                    rgb = [60, 20, 20];
                }
                px[(y * w + x) * 3..][..3].copy_from_slice(&rgb);
            }
        }
    }
    ColorImage::new(w, h, px).expect("dimensions are consistent")
}

pub fn render_depth(cfg: &SensorSimConfig, tick: u64) -> DepthFrame {
    let persons = person_layout(cfg, tick);
    let (w, h) = (cfg.width, cfg.height);
    let mut depth = vec![WALL_DEPTH_MM; w * h];
    for y in 0..h {
        for x in 0..w {
            if let Some(p) = persons.iter().find(|p| p.contains(x, y)) {
                depth[y * w + x] = p.depth_mm;
            }
        }
    }
    let mut rng = cfg.aux_rng(tick);
    let n_salt = (w * h) as f64 * SALT_FRACTION;
    for i in 0..n_salt as usize {
        let idx = rng.gen_range(0..w * h);
        depth[idx] = if i % 2 == 0 { 0 } else { u16::MAX };
    }
    DepthFrame::new(w, h, depth).expect("dimensions are consistent")
}

/// Local hour of day (fractional) for a tick.
pub fn local_hour(cfg: &SensorSimConfig, tick: u64) -> f64 {
    let local = cfg.tick_time(tick) as f64 + cfg.scenario.utc_offset_hours * MS_PER_HOUR as f64;
    (local / MS_PER_HOUR as f64).rem_euclid(24.0)
}

pub fn environmental_value(cfg: &SensorSimConfig, tick: u64) -> f32 {
    let d = &cfg.scenario.diurnal;
    if let Some(&(_, _, v)) = d.spikes.iter().find(|(a, b, _)| (*a..*b).contains(&tick)) {
        return v as f32;
    }
    let hour = local_hour(cfg, tick);
    let mut rng = cfg.rng(tick);
    let jitter = if d.jitter > 0.0 { rng.gen_range(-d.jitter..=d.jitter) } else { 0.0 };
    let v = d.mean + d.amplitude * (std::f64::consts::TAU * (hour - d.peak_hour) / 24.0).cos() + jitter;
    v.max(0.0) as f32
}

fn wave_batch(cfg: &SensorSimConfig, tick: u64, channels: u8, freq_hz: f64, amp: f64, noise: f64) -> SampleBatch {
    let rate = cfg.rate_hz().round() as u32;
    let mut rng = cfg.rng(tick);
    let mut values = Vec::with_capacity(rate as usize * channels as usize);
    for i in 0..rate {
        let t = tick as f64 + i as f64 / rate as f64;
        for c in 0..channels {
            let phase = c as f64 * std::f64::consts::FRAC_PI_3;
            let v = amp * (std::f64::consts::TAU * freq_hz * t + phase).sin() + rng.gen_range(-noise..=noise);
            values.push(v as f32);
        }
    }
    SampleBatch { rate_hz: rate, channels, values }
}

/// Raw (unsealed) payload for one tick.
pub fn generate_tick(cfg: &SensorSimConfig, tick: u64) -> Vec<u8> {
    match cfg.modality {
        Modality::RgbFrame => render_rgb(cfg, tick).to_payload(),
        Modality::DepthFrame => render_depth(cfg, tick).to_payload(),
        Modality::Accel => wave_batch(cfg, tick, 3, 0.5, 1.0, 0.05).to_payload(),
        Modality::Emg => wave_batch(cfg, tick, 1, 50.0, 0.2, 0.02).to_payload(),
        Modality::Noise | Modality::Light => scalar_payload(environmental_value(cfg, tick)),
    }
}
