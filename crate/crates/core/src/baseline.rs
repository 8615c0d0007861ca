//! Deterministic counter: temporal smoothing, bilinear upsampling, background
//! subtraction, connected-component labeling and blob-size classification.

use std::fmt::Write as _;

use crate::dataset::{Fold, SessionRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::FoldMetrics;
use crate::zoo::{Frame, FRAME_SIDE};

/// Largest count reported, matching the dataset's label range.
pub const MAX_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    /// EMA weight of the newest frame.
    pub alpha: f64,
    /// Upsampling factor; an 8-pixel side becomes `(8 - 1) * factor + 1`.
    pub interp_factor: usize,
    /// Detection threshold above background, °C.
    pub delta_t: f64,
    pub min_area: usize,
    pub max_area: usize,
    pub connectivity: Connectivity,
    /// Background learning rate outside blobs.
    pub beta: f64,
    pub warmup: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            interp_factor: 2,
            delta_t: 1.5,
            min_area: 2,
            max_area: 40,
            connectivity: Connectivity::Eight,
            beta: 0.01,
            warmup: 20,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Invalid("alpha must be in (0, 1]".into()));
        }
        if !(self.delta_t > 0.0) {
            return Err(Error::Invalid("delta_t must be positive".into()));
        }
        if self.min_area > self.max_area {
            return Err(Error::Invalid("min_area exceeds max_area".into()));
        }
        if self.interp_factor == 0 {
            return Err(Error::Invalid("interp_factor must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Invalid("beta must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        (FRAME_SIDE - 1) * self.interp_factor + 1
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Invalid(format!("bad value '{value}' for {key}"));
        match key {
            "alpha" => self.alpha = value.parse().map_err(|_| bad())?,
            "interp_factor" => self.interp_factor = value.parse().map_err(|_| bad())?,
            "delta_t" => self.delta_t = value.parse().map_err(|_| bad())?,
            "min_area" => self.min_area = value.parse().map_err(|_| bad())?,
            "max_area" => self.max_area = value.parse().map_err(|_| bad())?,
            "beta" => self.beta = value.parse().map_err(|_| bad())?,
            "warmup" => self.warmup = value.parse().map_err(|_| bad())?,
            "connectivity" => {
                self.connectivity = match value {
                    "4" => Connectivity::Four,
                    "8" => Connectivity::Eight,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(Error::Invalid(format!("unknown baseline key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("expected key = value, got '{line}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let conn = match self.connectivity {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        };
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "interp_factor = {}", self.interp_factor);
        let _ = writeln!(s, "delta_t = {}", self.delta_t);
        let _ = writeln!(s, "min_area = {}", self.min_area);
        let _ = writeln!(s, "max_area = {}", self.max_area);
        let _ = writeln!(s, "connectivity = {conn}");
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "warmup = {}", self.warmup);
        s
    }
}

/// Square single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub side: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn filled(side: usize, v: f64) -> Self {
        Self {
            side,
            data: vec![v; side * side],
        }
    }

    pub fn from_frame(f: &Frame) -> Self {
        Self {
            side: FRAME_SIDE,
            data: f.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.side + c]
    }
}

/// Bilinear upsampling with aligned corners: `n` samples become `(n - 1) * factor + 1`.
pub fn bilinear_upsample(g: &Grid, factor: usize) -> Grid {
    let side = (g.side - 1) * factor + 1;
    let mut data = Vec::with_capacity(side * side);
    for r in 0..side {
        let (r0, fr) = (r / factor, (r % factor) as f64 / factor as f64);
        let r1 = (r0 + 1).min(g.side - 1);
        for c in 0..side {
            let (c0, fc) = (c / factor, (c % factor) as f64 / factor as f64);
            let c1 = (c0 + 1).min(g.side - 1);
            let top = g.at(r0, c0) * (1.0 - fc) + g.at(r0, c1) * fc;
            let bot = g.at(r1, c0) * (1.0 - fc) + g.at(r1, c1) * fc;
            data.push(top * (1.0 - fr) + bot * fr);
        }
    }
    Grid { side, data }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
    pub area: usize,
    /// Highest temperature inside the blob.
    pub peak: f64,
    /// Background temperature under the peak pixel.
    pub peak_background: f64,
    pub centroid: (f64, f64),
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Labels connected foreground pixels; `0` is background, components are numbered
/// from 1 in raster order of their first pixel.
pub fn label_components(mask: &[bool], side: usize, conn: Connectivity) -> (Vec<usize>, usize) {
    let n = side * side;
    let mut parent: Vec<usize> = (0..n).collect();
    let union = |parent: &mut Vec<usize>, a: usize, b: usize| {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            parent[hi] = lo;
        }
    };
    for r in 0..side {
        for c in 0..side {
            let i = r * side + c;
            if !mask[i] {
                continue;
            }
            if c > 0 && mask[i - 1] {
                union(&mut parent, i, i - 1);
            }
            if r > 0 {
                if mask[i - side] {
                    union(&mut parent, i, i - side);
                }
                if conn == Connectivity::Eight {
                    if c > 0 && mask[i - side - 1] {
                        union(&mut parent, i, i - side - 1);
                    }
                    if c + 1 < side && mask[i - side + 1] {
                        union(&mut parent, i, i - side + 1);
                    }
                }
            }
        }
    }
    let mut labels = vec![0usize; n];
    let mut root_label = vec![0usize; n];
    let mut next = 0;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let root = find(&mut parent, i);
        if root_label[root] == 0 {
            next += 1;
            root_label[root] = next;
        }
        labels[i] = root_label[root];
    }
    (labels, next)
}

/// Blobs of pixels warmer than `background + delta_t`.
pub fn segment(frame: &Grid, background: &Grid, cfg: &BaselineConfig) -> Result<Vec<Blob>> {
    if frame.side != background.side {
        return Err(Error::Shape(format!(
            "frame side {} vs background side {}",
            frame.side, background.side
        )));
    }
    let side = frame.side;
    let mask: Vec<bool> = frame
        .data
        .iter()
        .zip(&background.data)
        .map(|(f, b)| f - b > cfg.delta_t)
        .collect();
    let (labels, count) = label_components(&mask, side, cfg.connectivity);
    let mut blobs: Vec<Blob> = (0..count)
        .map(|_| Blob {
            pixels: Vec::new(),
            area: 0,
            peak: f64::NEG_INFINITY,
            peak_background: 0.0,
            centroid: (0.0, 0.0),
        })
        .collect();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let b = &mut blobs[l - 1];
        b.pixels.push(i);
        b.area += 1;
        b.centroid.0 += (i / side) as f64;
        b.centroid.1 += (i % side) as f64;
        if frame.data[i] > b.peak {
            b.peak = frame.data[i];
            b.peak_background = background.data[i];
        }
    }
    for b in &mut blobs {
        b.centroid.0 /= b.area as f64;
        b.centroid.1 /= b.area as f64;
    }
    Ok(blobs)
}

/// Number of person-sized blobs, clamped to the label range.
pub fn classify_and_count(blobs: &[Blob], cfg: &BaselineConfig) -> usize {
    blobs
        .iter()
        .filter(|b| {
            (cfg.min_area..=cfg.max_area).contains(&b.area)
                && b.peak >= b.peak_background + cfg.delta_t
        })
        .count()
        .min(MAX_COUNT)
}

/// Exponential update of non-blob pixels.
pub fn update_background(
    background: &mut Grid,
    frame: &Grid,
    blobs: &[Blob],
    cfg: &BaselineConfig,
) {
    let mut inside = vec![false; background.data.len()];
    for b in blobs {
        for &p in &b.pixels {
            inside[p] = true;
        }
    }
    for ((bg, &f), &skip) in background.data.iter_mut().zip(&frame.data).zip(&inside) {
        if !skip {
            *bg = (1.0 - cfg.beta) * *bg + cfg.beta * f;
        }
    }
}

/// Per-session streaming state.
#[derive(Debug, Clone)]
pub struct BaselineCounter {
    cfg: BaselineConfig,
    smoothed: Option<Grid>,
    background: Option<Grid>,
    seen: usize,
}

impl BaselineCounter {
    pub fn new(cfg: BaselineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            smoothed: None,
            background: None,
            seen: 0,
        })
    }

    /// EMA smoothing on the native grid, then upsampling.
    pub fn preprocess(&mut self, frame: &Frame) -> Grid {
        let g = Grid::from_frame(frame);
        let a = self.cfg.alpha;
        let s = match self.smoothed.take() {
            None => g,
            Some(prev) => Grid {
                side: prev.side,
                data: g
                    .data
                    .iter()
                    .zip(&prev.data)
                    .map(|(x, p)| a * x + (1.0 - a) * p)
                    .collect(),
            },
        };
        let out = bilinear_upsample(&s, self.cfg.interp_factor);
        self.smoothed = Some(s);
        out
    }

    pub fn background(&self) -> Option<&Grid> {
        self.background.as_ref()
    }

    /// Processes the next frame and returns its count.
    ///
    /// During warmup the background is the running mean of every frame so far.
    pub fn step(&mut self, frame: &Frame) -> usize {
        let f = self.preprocess(frame);
        self.seen += 1;
        if self.seen <= self.cfg.warmup || self.background.is_none() {
            let n = self.seen as f64;
            let bg = match self.background.take() {
                None => f.clone(),
                Some(mut bg) => {
                    for (b, &x) in bg.data.iter_mut().zip(&f.data) {
                        *b += (x - *b) / n;
                    }
                    bg
                }
            };
            let blobs = segment(&f, &bg, &self.cfg).expect("matching sides");
            self.background = Some(bg);
            return classify_and_count(&blobs, &self.cfg);
        }
        let bg = self.background.as_mut().expect("initialized");
        let blobs = segment(&f, bg, &self.cfg).expect("matching sides");
        let count = classify_and_count(&blobs, &self.cfg);
        update_background(bg, &f, &blobs, &self.cfg);
        count
    }
}

/// Counts every frame of a session in order.
pub fn run_baseline(frames: &[Frame], cfg: &BaselineConfig) -> Result<Vec<usize>> {
    if frames.is_empty() {
        return Err(Error::Empty("session".into()));
    }
    let mut counter = BaselineCounter::new(cfg.clone())?;
    Ok(frames.iter().map(|f| counter.step(f)).collect())
}

/// Baseline metrics on the test session of each fold; nothing is fitted.
pub fn evaluate_folds(
    sessions: &[SessionRecord],
    folds: &[Fold],
    cfg: &BaselineConfig,
) -> Result<Vec<(u32, FoldMetrics)>> {
    folds
        .iter()
        .map(|fold| {
            let (mut labels, mut preds) = (Vec::new(), Vec::new());
            for s in sessions
                .iter()
                .filter(|s| s.session_id == fold.test_session)
            {
                preds.extend(run_baseline(&s.frames, cfg)?);
                labels.extend(s.labels.iter().map(|&l| l as usize));
            }
            if labels.is_empty() {
                return Err(Error::Empty(format!("test session {}", fold.test_session)));
            }
            Ok((
                fold.test_session,
                FoldMetrics::from_predictions(&labels, &preds, NUM_CLASSES)?,
            ))
        })
        .collect()
}
