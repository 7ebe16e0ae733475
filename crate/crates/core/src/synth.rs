//! Parametric Foley-like sound classes and the on-disk corpus built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{config_err, input_err, FlabError, Result};

pub const PEAK: f32 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ImpulseTrain,
    BandNoise,
    Chirp,
    TonalBurst,
    AmNoise,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::ImpulseTrain => "impulse_train",
            Family::BandNoise => "band_noise",
            Family::Chirp => "chirp",
            Family::TonalBurst => "tonal_burst",
            Family::AmNoise => "am_noise",
        }
    }

    fn required_params(self) -> &'static [&'static str] {
        match self {
            Family::ImpulseTrain => &["rate_hz", "center_hz", "decay_s"],
            Family::BandNoise => &["center_hz", "bandwidth_hz"],
            Family::Chirp => &["f_start_hz", "f_end_hz", "sweep_s", "rate_hz"],
            Family::TonalBurst => &["f0_hz", "rate_hz", "burst_s", "harmonics"],
            Family::AmNoise => &["center_hz", "bandwidth_hz", "mod_rate_hz", "mod_depth"],
        }
    }
}

impl FromStr for Family {
    type Err = FlabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "impulse_train" => Family::ImpulseTrain,
            "band_noise" => Family::BandNoise,
            "chirp" => Family::Chirp,
            "tonal_burst" => Family::TonalBurst,
            "am_noise" => Family::AmNoise,
            other => return config_err(format!("unknown sound family `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundClassSpec {
    pub name: String,
    pub family: Family,
    pub param_ranges: BTreeMap<String, (f64, f64)>,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl SoundClassSpec {
    pub fn new(name: &str, family: Family, ranges: &[(&str, f64, f64)], duration_s: f64, sample_rate: u32) -> Self {
        Self {
            name: name.to_string(),
            family,
            param_ranges: ranges.iter().map(|&(k, lo, hi)| (k.to_string(), (lo, hi))).collect(),
            duration_s,
            sample_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return config_err(format!("class {}: duration must be positive", self.name));
        }
        for (k, &(lo, hi)) in &self.param_ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return config_err(format!(
                    "class {}: parameter {k} has empty range [{lo}, {hi}]",
                    self.name
                ));
            }
        }
        for k in self.family.required_params() {
            if !self.param_ranges.contains_key(*k) {
                return config_err(format!(
                    "class {}: family {} needs parameter {k}",
                    self.name,
                    self.family.as_str()
                ));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

pub fn validate_specs(specs: &[SoundClassSpec]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !seen.insert(&s.name) {
            return config_err(format!("duplicate class name {}", s.name));
        }
    }
    Ok(())
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Derives an independent stream seed from a parent seed and a list of tags.
pub fn derive_seed(parent: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(parent), |h, &t| splitmix64(h ^ splitmix64(t)))
}

struct Draw<'a> {
    spec: &'a SoundClassSpec,
    rng: ChaCha8Rng,
}

impl Draw<'_> {
    fn param(&mut self, key: &str) -> f64 {
        let (lo, hi) = self.spec.param_ranges[key];
        if hi > lo {
            self.rng.random_range(lo..=hi)
        } else {
            lo
        }
    }

    fn param_or(&mut self, key: &str, default: f64) -> f64 {
        if self.spec.param_ranges.contains_key(key) {
            self.param(key)
        } else {
            default
        }
    }

    fn gauss(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// Event onsets for a repeating source: random phase, optional jitter.
fn onsets(d: &mut Draw, rate_hz: f64, jitter: f64, duration: f64) -> Vec<f64> {
    let period = 1.0 / rate_hz.max(1e-3);
    let mut t = d.rng.random_range(0.0..period.min(duration * 0.5));
    let mut out = Vec::new();
    while t < duration {
        out.push(t);
        let j = jitter * d.rng.random_range(-0.5..0.5);
        t += period * (1.0 + j);
    }
    out
}

/// Two-pole resonator driven by `x` (in place), normalized to unit peak gain at `f`.
fn resonate(x: &mut [f64], f: f64, bandwidth: f64, sr: f64) {
    let r = (-PI * bandwidth / sr).exp();
    let c = 2.0 * r * (2.0 * PI * f / sr).cos();
    let (mut y1, mut y2) = (0.0, 0.0);
    let gain = 1.0 - r;
    for v in x.iter_mut() {
        let y = gain * *v + c * y1 - r * r * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn band_limited_noise(d: &mut Draw, n: usize, sr: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(d.gauss(), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = if k <= n / 2 { k } else { n - k };
        let f = kk as f64 * sr / n as f64;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn synth_impulse_train(d: &mut Draw, n: usize, sr: f64) -> Vec<f64> {
    let rate = d.param("rate_hz");
    let centre = d.param("center_hz");
    let decay = d.param("decay_s").max(1e-4);
    let jitter = d.param_or("jitter", 0.0);
    let duration = n as f64 / sr;
    let mut excitation = vec![0.0; n];
    for t0 in onsets(d, rate, jitter, duration) {
        let start = (t0 * sr) as usize;
        let amp = 0.6 + 0.4 * d.rng.random::<f64>();
        let len = ((decay * 6.0 * sr) as usize).min(n.saturating_sub(start));
        for i in 0..len {
            let env = (-(i as f64) / (decay * sr)).exp();
            excitation[start + i] += amp * env * d.gauss();
        }
    }
    resonate(&mut excitation, centre, centre * 0.5, sr);
    excitation
}

fn synth_band_noise(d: &mut Draw, n: usize, sr: f64) -> Vec<f64> {
    let centre = d.param("center_hz");
    let bw = d.param("bandwidth_hz");
    band_limited_noise(d, n, sr, (centre - bw / 2.0).max(0.0), centre + bw / 2.0)
}

fn synth_chirp(d: &mut Draw, n: usize, sr: f64) -> Vec<f64> {
    let f0 = d.param("f_start_hz");
    let f1 = d.param("f_end_hz");
    let sweep = d.param("sweep_s").max(1e-3);
    let rate = d.param("rate_hz");
    let duration = n as f64 / sr;
    let mut out = vec![0.0; n];
    for t0 in onsets(d, rate, 0.3, duration) {
        let start = (t0 * sr) as usize;
        let len = ((sweep * sr) as usize).min(n.saturating_sub(start));
        let mut phase = d.rng.random_range(0.0..2.0 * PI);
        for i in 0..len {
            let u = i as f64 / (sweep * sr);
            let f = f0 + (f1 - f0) * u;
            phase += 2.0 * PI * f / sr;
            let env = (PI * u).sin().powi(2);
            out[start + i] += env * (phase.sin() + 0.3 * d.gauss());
        }
    }
    out
}

fn synth_tonal_burst(d: &mut Draw, n: usize, sr: f64) -> Vec<f64> {
    let f0 = d.param("f0_hz");
    let rate = d.param("rate_hz");
    let burst = d.param("burst_s").max(1e-3);
    let harmonics = d.param("harmonics").round().max(1.0) as usize;
    let duration = n as f64 / sr;
    let mut out = vec![0.0; n];
    for t0 in onsets(d, rate, 0.2, duration) {
        let start = (t0 * sr) as usize;
        let len = ((burst * sr) as usize).min(n.saturating_sub(start));
        let detune = 1.0 + 0.03 * d.gauss();
        for i in 0..len {
            let t = i as f64 / sr;
            let u = t / burst;
            let env = (1.0 - (-u * 20.0).exp()) * (-u * 3.0).exp();
            let tone: f64 = (1..=harmonics)
                .filter(|&h| f0 * h as f64 * detune < sr / 2.0)
                .map(|h| (2.0 * PI * f0 * h as f64 * detune * t).sin() / h as f64)
                .sum();
            out[start + i] += env * tone;
        }
    }
    out
}

fn synth_am_noise(d: &mut Draw, n: usize, sr: f64) -> Vec<f64> {
    let centre = d.param("center_hz");
    let bw = d.param("bandwidth_hz");
    let rate = d.param("mod_rate_hz");
    let depth = d.param("mod_depth").clamp(0.0, 1.0);
    let phase = d.rng.random_range(0.0..2.0 * PI);
    let mut x = band_limited_noise(d, n, sr, (centre - bw / 2.0).max(0.0), centre + bw / 2.0);
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / sr;
        *v *= 1.0 + depth * (2.0 * PI * rate * t + phase).sin();
    }
    x
}

/// Renders one clip. A pure function of `(spec, seed)`.
pub fn synth_clip(spec: &SoundClassSpec, seed: u64) -> Result<Waveform> {
    spec.validate()?;
    let n = spec.n_samples();
    let sr = spec.sample_rate as f64;
    let mut d = Draw {
        spec,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[fnv1a(&spec.name)])),
    };
    let mut x = match spec.family {
        Family::ImpulseTrain => synth_impulse_train(&mut d, n, sr),
        Family::BandNoise => synth_band_noise(&mut d, n, sr),
        Family::Chirp => synth_chirp(&mut d, n, sr),
        Family::TonalBurst => synth_tonal_burst(&mut d, n, sr),
        Family::AmNoise => synth_am_noise(&mut d, n, sr),
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    let floor = d.param_or("noise_floor", 0.002);
    for v in x.iter_mut() {
        *v += floor * d.gauss();
    }
    let mut w = Waveform::new(x.into_iter().map(|v| v as f32).collect(), spec.sample_rate);
    w.normalize_peak(PEAK);
    Ok(w)
}

/// The seven fine-tuning classes, named after the DCASE 2023 task 7 categories.
pub fn dcase_classes(duration_s: f64, sample_rate: u32) -> Vec<SoundClassSpec> {
    use Family::*;
    let c = |name, fam, r: &[(&str, f64, f64)]| SoundClassSpec::new(name, fam, r, duration_s, sample_rate);
    vec![
        c(
            "DogBark",
            TonalBurst,
            &[
                ("f0_hz", 350.0, 600.0),
                ("rate_hz", 1.2, 2.5),
                ("burst_s", 0.12, 0.25),
                ("harmonics", 4.0, 6.0),
            ],
        ),
        c(
            "Footstep",
            ImpulseTrain,
            &[
                ("rate_hz", 1.5, 2.5),
                ("center_hz", 150.0, 400.0),
                ("decay_s", 0.03, 0.06),
                ("jitter", 0.1, 0.2),
            ],
        ),
        c(
            "GunShot",
            ImpulseTrain,
            &[
                ("rate_hz", 0.8, 1.5),
                ("center_hz", 800.0, 1500.0),
                ("decay_s", 0.15, 0.3),
                ("jitter", 0.3, 0.5),
            ],
        ),
        c(
            "Keyboard",
            ImpulseTrain,
            &[
                ("rate_hz", 6.0, 10.0),
                ("center_hz", 2000.0, 3000.0),
                ("decay_s", 0.005, 0.015),
                ("jitter", 0.4, 0.6),
            ],
        ),
        c(
            "MovingMotorVehicle",
            AmNoise,
            &[
                ("center_hz", 150.0, 400.0),
                ("bandwidth_hz", 100.0, 300.0),
                ("mod_rate_hz", 8.0, 30.0),
                ("mod_depth", 0.3, 0.8),
            ],
        ),
        c(
            "Rain",
            BandNoise,
            &[("center_hz", 1800.0, 2600.0), ("bandwidth_hz", 1500.0, 2500.0)],
        ),
        c(
            "SneezeCough",
            Chirp,
            &[
                ("f_start_hz", 1200.0, 1800.0),
                ("f_end_hz", 300.0, 600.0),
                ("sweep_s", 0.15, 0.3),
                ("rate_hz", 0.8, 1.5),
            ],
        ),
    ]
}

/// Twenty pretraining classes over the same five families, disjoint in name
/// from [`dcase_classes`].
pub fn pretrain_classes(duration_s: f64, sample_rate: u32) -> Vec<SoundClassSpec> {
    use Family::*;
    let c = |name, fam, r: &[(&str, f64, f64)]| SoundClassSpec::new(name, fam, r, duration_s, sample_rate);
    vec![
        c(
            "DoorKnock",
            ImpulseTrain,
            &[
                ("rate_hz", 2.0, 4.0),
                ("center_hz", 200.0, 500.0),
                ("decay_s", 0.02, 0.05),
                ("jitter", 0.1, 0.1),
            ],
        ),
        c(
            "ClockTick",
            ImpulseTrain,
            &[
                ("rate_hz", 3.0, 6.0),
                ("center_hz", 2500.0, 3400.0),
                ("decay_s", 0.003, 0.01),
                ("jitter", 0.0, 0.05),
            ],
        ),
        c(
            "Hammer",
            ImpulseTrain,
            &[
                ("rate_hz", 1.0, 2.0),
                ("center_hz", 600.0, 1200.0),
                ("decay_s", 0.05, 0.12),
                ("jitter", 0.2, 0.2),
            ],
        ),
        c(
            "Drip",
            ImpulseTrain,
            &[
                ("rate_hz", 1.0, 3.0),
                ("center_hz", 1000.0, 2000.0),
                ("decay_s", 0.01, 0.03),
                ("jitter", 0.5, 0.5),
            ],
        ),
        c(
            "Applause",
            ImpulseTrain,
            &[
                ("rate_hz", 15.0, 30.0),
                ("center_hz", 1500.0, 3000.0),
                ("decay_s", 0.01, 0.02),
                ("jitter", 0.8, 0.8),
            ],
        ),
        c(
            "Wind",
            BandNoise,
            &[("center_hz", 200.0, 800.0), ("bandwidth_hz", 200.0, 600.0)],
        ),
        c(
            "Waterfall",
            BandNoise,
            &[("center_hz", 1000.0, 2000.0), ("bandwidth_hz", 1500.0, 2500.0)],
        ),
        c(
            "Hiss",
            BandNoise,
            &[("center_hz", 2800.0, 3400.0), ("bandwidth_hz", 500.0, 1000.0)],
        ),
        c(
            "Static",
            BandNoise,
            &[("center_hz", 1500.0, 2500.0), ("bandwidth_hz", 2500.0, 3000.0)],
        ),
        c(
            "Siren",
            Chirp,
            &[
                ("f_start_hz", 600.0, 900.0),
                ("f_end_hz", 1200.0, 1600.0),
                ("sweep_s", 0.4, 0.8),
                ("rate_hz", 0.5, 1.0),
            ],
        ),
        c(
            "BirdChirp",
            Chirp,
            &[
                ("f_start_hz", 2500.0, 3200.0),
                ("f_end_hz", 1800.0, 2400.0),
                ("sweep_s", 0.05, 0.1),
                ("rate_hz", 3.0, 6.0),
            ],
        ),
        c(
            "Whistle",
            Chirp,
            &[
                ("f_start_hz", 1000.0, 1500.0),
                ("f_end_hz", 1500.0, 2200.0),
                ("sweep_s", 0.2, 0.4),
                ("rate_hz", 1.0, 2.0),
            ],
        ),
        c(
            "Horn",
            TonalBurst,
            &[
                ("f0_hz", 200.0, 350.0),
                ("rate_hz", 0.5, 1.0),
                ("burst_s", 0.3, 0.6),
                ("harmonics", 3.0, 6.0),
            ],
        ),
        c(
            "Bell",
            TonalBurst,
            &[
                ("f0_hz", 800.0, 1200.0),
                ("rate_hz", 1.0, 2.0),
                ("burst_s", 0.2, 0.4),
                ("harmonics", 2.0, 3.0),
            ],
        ),
        c(
            "Beep",
            TonalBurst,
            &[
                ("f0_hz", 1000.0, 2000.0),
                ("rate_hz", 2.0, 4.0),
                ("burst_s", 0.05, 0.1),
                ("harmonics", 1.0, 1.0),
            ],
        ),
        c(
            "CatMeow",
            TonalBurst,
            &[
                ("f0_hz", 500.0, 800.0),
                ("rate_hz", 0.8, 1.5),
                ("burst_s", 0.3, 0.5),
                ("harmonics", 3.0, 5.0),
            ],
        ),
        c(
            "Engine",
            AmNoise,
            &[
                ("center_hz", 80.0, 200.0),
                ("bandwidth_hz", 80.0, 200.0),
                ("mod_rate_hz", 20.0, 40.0),
                ("mod_depth", 0.4, 0.9),
            ],
        ),
        c(
            "Helicopter",
            AmNoise,
            &[
                ("center_hz", 200.0, 500.0),
                ("bandwidth_hz", 200.0, 500.0),
                ("mod_rate_hz", 10.0, 20.0),
                ("mod_depth", 0.6, 0.9),
            ],
        ),
        c(
            "Crowd",
            AmNoise,
            &[
                ("center_hz", 500.0, 1500.0),
                ("bandwidth_hz", 500.0, 1000.0),
                ("mod_rate_hz", 2.0, 5.0),
                ("mod_depth", 0.2, 0.5),
            ],
        ),
        c(
            "Fan",
            AmNoise,
            &[
                ("center_hz", 300.0, 700.0),
                ("bandwidth_hz", 300.0, 600.0),
                ("mod_rate_hz", 30.0, 60.0),
                ("mod_depth", 0.1, 0.3),
            ],
        ),
    ]
}

/// Label → descriptive text table (`label_text.tsv`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelTable {
    entries: BTreeMap<String, String>,
}

impl LabelTable {
    pub fn default_table() -> Self {
        let mut t = Self::default();
        for (label, text) in [
            ("DogBark", "a dog bark"),
            ("Footstep", "someone walking footsteps"),
            ("GunShot", "a gun shot"),
            ("Keyboard", "Someone using keyboard"),
            ("MovingMotorVehicle", "a moving motor vehicle"),
            ("Rain", "rain falling"),
            ("SneezeCough", "someone sneeze and cough"),
        ] {
            t.insert(label, text);
        }
        for spec in pretrain_classes(1.0, 8000) {
            let text = split_camel(&spec.name);
            t.insert(&spec.name, &text);
        }
        t
    }

    pub fn insert(&mut self, label: &str, text: &str) {
        self.entries.insert(label.to_string(), text.to_string());
    }

    pub fn label_to_text(&self, label: &str) -> Result<&str> {
        self.entries
            .get(label)
            .map(String::as_str)
            .ok_or_else(|| FlabError::Lookup(format!("no wrapped text for label `{label}`")))
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.values().map(String::as_str)
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut t = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((label, wrapped)) = line.split_once('\t') else {
                return config_err(format!(
                    "label table line {}: expected two tab-separated columns",
                    i + 1
                ));
            };
            t.insert(label.trim(), wrapped.trim());
        }
        Ok(t)
    }

    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_tsv(&std::fs::read_to_string(path).map_err(|e| FlabError::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| FlabError::io(path, e))
    }
}

/// "MovingMotorVehicle" → "moving motor vehicle".
pub fn split_camel(name: &str) -> String {
    let mut out = String::new();
    for (i, ch) in name.chars().enumerate() {
        if ch.is_uppercase() && i > 0 {
            out.push(' ');
        }
        out.extend(ch.to_lowercase());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        }
    }
}

impl FromStr for Split {
    type Err = FlabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => Split::Pretrain,
            "train" => Split::Train,
            "val" => Split::Val,
            "eval" => Split::Eval,
            other => return config_err(format!("unknown split `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub class: String,
    pub text: String,
    pub seed: u64,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn file_name(split: Split) -> String {
        format!("{}.jsonl", split.as_str())
    }

    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.class.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn by_class(&self) -> BTreeMap<String, Vec<&ManifestEntry>> {
        let mut map: BTreeMap<String, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(e.class.clone()).or_default().push(e);
        }
        map
    }

    /// Resolves an entry path relative to the manifest's root directory.
    pub fn resolve(root: &Path, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(root).map_err(|e| FlabError::io(root, e))?;
        let path = root.join(Self::file_name(self.split));
        std::fs::write(&path, self.to_jsonl()?).map_err(|e| FlabError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let path = root.join(Self::file_name(split));
        let text = std::fs::read_to_string(&path).map_err(|e| FlabError::io(&path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self { split, entries })
    }

    pub fn load_audio(&self, root: &Path) -> Result<Vec<Waveform>> {
        self.entries
            .par_iter()
            .map(|e| Waveform::read_wav(&Self::resolve(root, e)))
            .collect()
    }
}

fn render_split(
    specs: &[SoundClassSpec],
    picks: Vec<(usize, usize, u64)>,
    split: Split,
    labels: &LabelTable,
    root: &Path,
) -> Result<CorpusManifest> {
    let entries = picks
        .into_par_iter()
        .map(|(class_idx, clip_idx, seed)| {
            let spec = &specs[class_idx];
            let clip_id = format!("{}_{}_{clip_idx:04}", spec.name, split.as_str());
            let rel = format!("audio/{}/{clip_id}.wav", split.as_str());
            let wav = synth_clip(spec, seed)?;
            wav.write_wav(&root.join(&rel))?;
            Ok(ManifestEntry {
                clip_id,
                class: spec.name.clone(),
                text: labels.label_to_text(&spec.name)?.to_string(),
                seed,
                path: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest { split, entries };
    manifest.save(root)?;
    Ok(manifest)
}

fn clip_seed(root_seed: u64, salt: &str, class: &str, idx: usize) -> u64 {
    derive_seed(root_seed, &[fnv1a(salt), fnv1a(class), idx as u64]) >> 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: CorpusManifest,
    pub val: CorpusManifest,
}

/// Synthesizes `n_per_class` clips per class, randomly partitioned so that
/// `floor(split_ratio * n)` land in train and the rest in val.
pub fn build_corpus(
    specs: &[SoundClassSpec],
    n_per_class: usize,
    split_ratio: f64,
    root_seed: u64,
    labels: &LabelTable,
    root: &Path,
) -> Result<CorpusSplits> {
    validate_specs(specs)?;
    if n_per_class < 2 {
        return input_err("n_per_class must be at least 2");
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return input_err(format!("split ratio {split_ratio} must lie in (0, 1)"));
    }
    for s in specs {
        labels.label_to_text(&s.name)?;
    }
    let n_train = ((split_ratio * n_per_class as f64).floor() as usize)
        .min(n_per_class - 1)
        .max(1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (ci, spec) in specs.iter().enumerate() {
        let mut order: Vec<usize> = (0..n_per_class).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, &[fnv1a("partition"), fnv1a(&spec.name)]));
        order.shuffle(&mut rng);
        for (rank, idx) in order.into_iter().enumerate() {
            let pick = (ci, idx, clip_seed(root_seed, "dev", &spec.name, idx));
            if rank < n_train {
                train.push(pick);
            } else {
                val.push(pick);
            }
        }
    }
    train.sort();
    val.sort();
    Ok(CorpusSplits {
        train: render_split(specs, train, Split::Train, labels, root)?,
        val: render_split(specs, val, Split::Val, labels, root)?,
    })
}

/// Synthesizes a single split (pretraining superset or held-out evaluation set).
pub fn build_split(
    specs: &[SoundClassSpec],
    n_per_class: usize,
    split: Split,
    root_seed: u64,
    labels: &LabelTable,
    root: &Path,
) -> Result<CorpusManifest> {
    validate_specs(specs)?;
    for s in specs {
        labels.label_to_text(&s.name)?;
    }
    let picks = specs
        .iter()
        .enumerate()
        .flat_map(|(ci, spec)| {
            (0..n_per_class).map(move |i| (ci, i, clip_seed(root_seed, split.as_str(), &spec.name, i)))
        })
        .collect();
    render_split(specs, picks, split, labels, root)
}
