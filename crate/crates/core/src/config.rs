//! Experiment configuration: `key=value` lines, `#` comments.
//!
//! Every key is optional; [`ExperimentConfig::echo`] writes the full
//! effective configuration in the same format, so `parse(echo(c)) == c`.

use std::fmt::Write as _;

use crate::backbone::TrainConfig;
use crate::cotrain::{CotrainConfig, Mode};
use crate::error::{Error, Result};
use crate::phantom::{PhantomSpec, SplitCounts, DEFAULT_CONTRAST};
use crate::volume::{Dims, WindowSpec, DEFAULT_WINDOWS};

/// The learning rate reported for the original deep model; kept for
/// reference only, the reference segmenter uses `learning_rate`.
pub const DEEP_MODEL_LEARNING_RATE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub rounds: usize,
    pub num_classes: u8,
    pub windows: Vec<WindowSpec>,
    pub learning_rate: f64,
    pub teacher_iters: usize,
    pub student_iters: usize,
    pub batch_slices: usize,
    pub pixels_per_slice: usize,
    pub hidden_units: usize,
    pub init_scale: f64,
    pub momentum: f64,
    pub lr_decay: bool,
    pub standardize: bool,
    pub warm_start: bool,
    pub top_n: usize,
    pub seed: u64,
    pub record_provenance: bool,
    // phantom generation
    pub volume_size: usize,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub case_hu_jitter: f64,
    pub hu_offset: f64,
    pub size_scale: f64,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let cot = CotrainConfig::default();
        let ph = PhantomSpec::default();
        ExperimentConfig {
            mode: Mode::Dmpct,
            rounds: cot.rounds,
            num_classes: ph.num_classes(),
            windows: DEFAULT_WINDOWS.to_vec(),
            learning_rate: train.learning_rate,
            teacher_iters: cot.teacher_iters,
            student_iters: 2 * cot.teacher_iters,
            batch_slices: train.batch_slices,
            pixels_per_slice: train.pixels_per_slice,
            hidden_units: train.hidden_units,
            init_scale: train.init_scale,
            momentum: train.momentum,
            lr_decay: train.lr_decay,
            standardize: train.standardize,
            warm_start: cot.warm_start,
            top_n: cot.top_n,
            seed: 0,
            record_provenance: true,
            volume_size: ph.dims.width,
            contrast: DEFAULT_CONTRAST,
            noise_sigma: ph.noise_sigma,
            case_hu_jitter: ph.case_hu_jitter,
            hu_offset: ph.hu_offset,
            size_scale: ph.size_scale,
            labeled: 4,
            unlabeled: 16,
            test: 10,
        }
    }
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| err(line, format!("{key}: cannot parse {value:?}")))
}

fn boolean(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(err(line, format!("{key}: expected true/false, got {value:?}"))),
    }
}

fn windows(line: usize, value: &str) -> Result<Vec<WindowSpec>> {
    value
        .split(',')
        .map(|w| {
            let (lo, hi) = w
                .trim()
                .split_once(':')
                .ok_or_else(|| err(line, format!("windows: expected lo:hi, got {w:?}")))?;
            let lo: f32 = num(line, "windows", lo.trim())?;
            let hi: f32 = num(line, "windows", hi.trim())?;
            WindowSpec::new(lo, hi).map_err(|e| err(line, e.to_string()))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let mut seen = std::collections::HashMap::new();
        let mut student_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected key=value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(err(line, format!("duplicate key {key} (first on line {prev})")));
            }
            match key {
                "mode" => c.mode = value.parse().map_err(|e: Error| err(line, e.to_string()))?,
                "T" => c.rounds = num(line, key, value)?,
                "K" => c.num_classes = num(line, key, value)?,
                "windows" => c.windows = windows(line, value)?,
                "learning_rate" => c.learning_rate = num(line, key, value)?,
                "teacher_iters" => c.teacher_iters = num(line, key, value)?,
                "student_iters" => {
                    c.student_iters = num(line, key, value)?;
                    student_set = true;
                }
                "batch_slices" => c.batch_slices = num(line, key, value)?,
                "pixels_per_slice" => c.pixels_per_slice = num(line, key, value)?,
                "hidden_units" => c.hidden_units = num(line, key, value)?,
                "init_scale" => c.init_scale = num(line, key, value)?,
                "momentum" => c.momentum = num(line, key, value)?,
                "lr_decay" => c.lr_decay = boolean(line, key, value)?,
                "standardize" => c.standardize = boolean(line, key, value)?,
                "warm_start" => c.warm_start = boolean(line, key, value)?,
                "top_n" => c.top_n = num(line, key, value)?,
                "seed" => c.seed = num(line, key, value)?,
                "record_provenance" => c.record_provenance = boolean(line, key, value)?,
                "volume_size" => c.volume_size = num(line, key, value)?,
                "contrast" => c.contrast = num(line, key, value)?,
                "noise_sigma" => c.noise_sigma = num(line, key, value)?,
                "case_hu_jitter" => c.case_hu_jitter = num(line, key, value)?,
                "hu_offset" => c.hu_offset = num(line, key, value)?,
                "size_scale" => c.size_scale = num(line, key, value)?,
                "labeled" => c.labeled = num(line, key, value)?,
                "unlabeled" => c.unlabeled = num(line, key, value)?,
                "test" => c.test = num(line, key, value)?,
                other => return Err(err(line, format!("unknown key {other:?}"))),
            }
            c.check_key(key, line)?;
        }
        if !student_set {
            c.student_iters = 2 * c.teacher_iters;
        }
        Ok(c)
    }

    fn check_key(&self, key: &str, line: usize) -> Result<()> {
        let positive = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(err(line, format!("{key}: {what}")))
            }
        };
        match key {
            "T" => positive(self.rounds >= 1, "must be ≥ 1"),
            "K" => positive(
                (1..=PhantomSpec::default().organs.len()).contains(&(self.num_classes as usize)),
                "must be between 1 and 4",
            ),
            "learning_rate" => positive(
                self.learning_rate.is_finite() && self.learning_rate > 0.0,
                "must be > 0",
            ),
            "teacher_iters" | "student_iters" | "batch_slices" | "top_n" | "volume_size"
            | "labeled" => positive(
                match key {
                    "teacher_iters" => self.teacher_iters,
                    "student_iters" => self.student_iters,
                    "batch_slices" => self.batch_slices,
                    "top_n" => self.top_n,
                    "volume_size" => self.volume_size,
                    _ => self.labeled,
                } >= 1,
                "must be ≥ 1",
            ),
            "contrast" | "size_scale" => positive(
                {
                    let v = if key == "contrast" { self.contrast } else { self.size_scale };
                    v.is_finite() && v > 0.0
                },
                "must be > 0",
            ),
            "noise_sigma" | "case_hu_jitter" => positive(
                {
                    let v = if key == "noise_sigma" { self.noise_sigma } else { self.case_hu_jitter };
                    v.is_finite() && v >= 0.0
                },
                "must be ≥ 0",
            ),
            "hu_offset" => positive(self.hu_offset.is_finite(), "must be finite"),
            "init_scale" => positive(
                self.init_scale.is_finite() && self.init_scale >= 0.0,
                "must be ≥ 0",
            ),
            "momentum" => positive((0.0..1.0).contains(&self.momentum), "must be in [0, 1)"),
            _ => Ok(()),
        }
    }

    /// Full effective configuration in parseable form.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let w = self
            .windows
            .iter()
            .map(|w| format!("{:?}:{:?}", w.lo(), w.hi()))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "mode={}", self.mode);
        let _ = writeln!(s, "T={}", self.rounds);
        let _ = writeln!(s, "K={}", self.num_classes);
        let _ = writeln!(s, "windows={w}");
        let _ = writeln!(s, "learning_rate={:?}", self.learning_rate);
        let _ = writeln!(s, "teacher_iters={}", self.teacher_iters);
        let _ = writeln!(s, "student_iters={}", self.student_iters);
        let _ = writeln!(s, "batch_slices={}", self.batch_slices);
        let _ = writeln!(s, "pixels_per_slice={}", self.pixels_per_slice);
        let _ = writeln!(s, "hidden_units={}", self.hidden_units);
        let _ = writeln!(s, "init_scale={:?}", self.init_scale);
        let _ = writeln!(s, "momentum={:?}", self.momentum);
        let _ = writeln!(s, "lr_decay={}", self.lr_decay);
        let _ = writeln!(s, "standardize={}", self.standardize);
        let _ = writeln!(s, "warm_start={}", self.warm_start);
        let _ = writeln!(s, "top_n={}", self.top_n);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "record_provenance={}", self.record_provenance);
        let _ = writeln!(s, "volume_size={}", self.volume_size);
        let _ = writeln!(s, "contrast={:?}", self.contrast);
        let _ = writeln!(s, "noise_sigma={:?}", self.noise_sigma);
        let _ = writeln!(s, "case_hu_jitter={:?}", self.case_hu_jitter);
        let _ = writeln!(s, "hu_offset={:?}", self.hu_offset);
        let _ = writeln!(s, "size_scale={:?}", self.size_scale);
        let _ = writeln!(s, "labeled={}", self.labeled);
        let _ = writeln!(s, "unlabeled={}", self.unlabeled);
        let _ = writeln!(s, "test={}", self.test);
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_slices: self.batch_slices,
            pixels_per_slice: self.pixels_per_slice,
            learning_rate: self.learning_rate,
            hidden_units: self.hidden_units,
            init_scale: self.init_scale,
            momentum: self.momentum,
            lr_decay: self.lr_decay,
            standardize: self.standardize,
        }
    }

    pub fn cotrain_config(&self) -> CotrainConfig {
        CotrainConfig {
            rounds: self.rounds,
            teacher_iters: self.teacher_iters,
            student_iters: self.student_iters,
            windows: self.windows.clone(),
            warm_start: self.warm_start,
            top_n: self.top_n,
            seed: self.seed,
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let base = PhantomSpec::default();
        let scale = self.volume_size as f64 / base.dims.width as f64;
        let mut spec = base
            .with_organs(self.num_classes as usize)
            .with_contrast(self.contrast);
        spec.dims = Dims::cube(self.volume_size);
        if scale != 1.0 {
            for o in &mut spec.organs {
                for a in &mut o.semi_axes {
                    *a *= scale;
                }
            }
        }
        spec.noise_sigma = self.noise_sigma;
        spec.case_hu_jitter = self.case_hu_jitter;
        spec.hu_offset = self.hu_offset;
        spec.size_scale = self.size_scale;
        spec
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            labeled: self.labeled,
            unlabeled: self.unlabeled,
            test: self.test,
        }
    }
}
