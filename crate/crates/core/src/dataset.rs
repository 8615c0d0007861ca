//! Recording ingestion, leave-one-session-out folds and sliding-window samples.
//!
//! CSV layout, one row per frame:
//! `session,frame_idx,label,confidence,p00,...,p77` with pixels in row-major order.
//! Rows of a session must be contiguous and ordered by `frame_idx`.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::zoo::{Frame, FRAME_PIXELS, FRAME_SIDE};

pub const NUM_CLASSES: usize = 4;
/// The session kept in every training split.
pub const ANCHOR_SESSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: u32,
    pub frame_idx: Vec<u64>,
    pub frames: Vec<Frame>,
    pub labels: Vec<u8>,
    pub confidence: Vec<bool>,
}

impl SessionRecord {
    pub fn new(session_id: u32) -> Self {
        Self {
            session_id,
            frame_idx: Vec::new(),
            frames: Vec::new(),
            labels: Vec::new(),
            confidence: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, idx: u64, frame: Frame, label: u8, confident: bool) {
        self.frame_idx.push(idx);
        self.frames.push(frame);
        self.labels.push(label);
        self.confidence.push(confident);
    }

    /// Ranges of consecutive `frame_idx` values; windows never span two segments.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..self.len() {
            if self.frame_idx[i] != self.frame_idx[i - 1] + 1 {
                out.push(start..i);
                start = i;
            }
        }
        if !self.is_empty() {
            out.push(start..self.len());
        }
        out
    }
}

pub fn header() -> Vec<String> {
    let mut h: Vec<String> = ["session", "frame_idx", "label", "confidence"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for r in 0..FRAME_SIDE {
        for c in 0..FRAME_SIDE {
            h.push(format!("p{r}{c}"));
        }
    }
    h
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    line: usize,
    what: &str,
) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Data {
            line,
            reason: format!("bad {what} '{}'", rec.get(i).unwrap_or("")),
        })
}

/// Parses sessions from CSV text. Low-confidence frames are dropped when `filter_low_confidence`.
pub fn read_sessions<R: Read>(
    reader: R,
    filter_low_confidence: bool,
) -> Result<Vec<SessionRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let expected = 4 + FRAME_PIXELS;
    let hdr = rdr.headers()?.clone();
    if hdr.len() != expected {
        return Err(Error::Data {
            line: 1,
            reason: format!("header has {} columns, expected {expected}", hdr.len()),
        });
    }
    let mut sessions: Vec<SessionRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec?;
        if rec.len() != expected {
            return Err(Error::Data {
                line,
                reason: format!("{} columns, expected {expected}", rec.len()),
            });
        }
        let session: u32 = field(&rec, 0, line, "session")?;
        let idx: u64 = field(&rec, 1, line, "frame_idx")?;
        let label: u8 = field(&rec, 2, line, "label")?;
        if label as usize >= NUM_CLASSES {
            return Err(Error::Data {
                line,
                reason: format!("label {label} outside 0..{}", NUM_CLASSES - 1),
            });
        }
        let conf: u8 = field(&rec, 3, line, "confidence")?;
        if conf > 1 {
            return Err(Error::Data {
                line,
                reason: format!("confidence {conf} is not 0 or 1"),
            });
        }
        let mut frame = [0f32; FRAME_PIXELS];
        for (p, v) in frame.iter_mut().enumerate() {
            *v = field(&rec, 4 + p, line, "pixel")?;
            if !v.is_finite() {
                return Err(Error::Data {
                    line,
                    reason: "non-finite pixel".into(),
                });
            }
        }
        if sessions.last().map(|s| s.session_id) != Some(session) {
            if !seen.insert(session) {
                return Err(Error::Data {
                    line,
                    reason: format!("session {session} rows are not contiguous"),
                });
            }
            sessions.push(SessionRecord::new(session));
        }
        let s = sessions.last_mut().expect("session pushed");
        if let Some(&prev) = s.frame_idx.last() {
            if idx <= prev {
                return Err(Error::Data {
                    line,
                    reason: format!("frame_idx {idx} does not follow {prev}"),
                });
            }
        }
        if conf == 1 || !filter_low_confidence {
            s.push(idx, frame, label, conf == 1);
        }
    }
    if sessions.is_empty() {
        return Err(Error::Empty("dataset file has no rows".into()));
    }
    sessions.retain(|s| !s.is_empty());
    Ok(sessions)
}

pub fn load_sessions(path: &Path, filter_low_confidence: bool) -> Result<Vec<SessionRecord>> {
    read_sessions(std::fs::File::open(path)?, filter_low_confidence)
}

pub fn write_sessions<W: Write>(writer: W, sessions: &[SessionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header())?;
    for s in sessions {
        for i in 0..s.len() {
            let mut row = vec![
                s.session_id.to_string(),
                s.frame_idx[i].to_string(),
                s.labels[i].to_string(),
                u8::from(s.confidence[i]).to_string(),
            ];
            row.extend(s.frames[i].iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn total_samples(sessions: &[SessionRecord]) -> usize {
    sessions.iter().map(SessionRecord::len).sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub test_session: u32,
    pub train_sessions: Vec<u32>,
}

/// One fold per session other than the anchor, which always stays in training.
pub fn make_folds(sessions: &[SessionRecord]) -> Result<Vec<Fold>> {
    let ids: BTreeSet<u32> = sessions.iter().map(|s| s.session_id).collect();
    if ids.len() < 2 {
        return Err(Error::Invalid(format!(
            "cross-validation needs at least 2 sessions, got {}",
            ids.len()
        )));
    }
    if !ids.contains(&ANCHOR_SESSION) {
        return Err(Error::Invalid(format!(
            "session {ANCHOR_SESSION} is missing"
        )));
    }
    Ok(ids
        .iter()
        .filter(|&&t| t != ANCHOR_SESSION)
        .map(|&t| Fold {
            test_session: t,
            train_sessions: ids.iter().copied().filter(|&s| s != t).collect(),
        })
        .collect())
}

/// Scalar input normalization `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: 0.0,
        std: 1.0,
    };

    pub fn apply(&self, f: &Frame) -> Frame {
        let mut out = *f;
        for v in &mut out {
            *v = ((*v as f64 - self.mean) / self.std) as f32;
        }
        out
    }
}

/// Mean and (floored) population std over every pixel of the given frames.
pub fn normalization_stats<'a>(
    frames: impl IntoIterator<Item = &'a Frame>,
) -> Result<Normalization> {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for f in frames {
        for &v in f {
            n += 1;
            sum += v as f64;
            sq += v as f64 * v as f64;
        }
    }
    if n == 0 {
        return Err(Error::Empty("normalization set".into()));
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    Ok(Normalization {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    })
}

/// `w_c = N / (K * N_c)`, or 0 for a class with no samples.
pub fn class_weights(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y >= k {
            return Err(Error::Invalid(format!("label {y} outside [0, {k})")));
        }
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                n / (k as f64 * c as f64)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub session: u32,
    pub frame_idx: u64,
    pub label: usize,
    buffer: usize,
    start: usize,
}

/// Windows of `w` frames stored as left-padded segment buffers, so each window is a
/// contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    w: usize,
    buffers: Vec<Vec<Frame>>,
    samples: Vec<Sample>,
}

impl WindowSet {
    pub fn new(w: usize) -> Result<Self> {
        if w < 1 {
            return Err(Error::Invalid("window size must be at least 1".into()));
        }
        Ok(Self {
            w,
            buffers: Vec::new(),
            samples: Vec::new(),
        })
    }

    /// Adds one sample per frame of `session`; each gap-free segment is padded on the
    /// left with copies of its first frame.
    pub fn extend_session(&mut self, session: &SessionRecord, norm: &Normalization) {
        for seg in session.segments() {
            let first = norm.apply(&session.frames[seg.start]);
            let mut buf = vec![first; self.w - 1];
            buf.extend(session.frames[seg.clone()].iter().map(|f| norm.apply(f)));
            let b = self.buffers.len();
            self.buffers.push(buf);
            for (j, i) in seg.enumerate() {
                self.samples.push(Sample {
                    session: session.session_id,
                    frame_idx: session.frame_idx[i],
                    label: session.labels[i] as usize,
                    buffer: b,
                    start: j,
                });
            }
        }
    }

    pub fn window_size(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn window(&self, i: usize) -> &[Frame] {
        let s = &self.samples[i];
        &self.buffers[s.buffer][s.start..s.start + self.w]
    }

    pub fn windows(&self) -> Vec<&[Frame]> {
        (0..self.len()).map(|i| self.window(i)).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Samples of a single session, unnormalized.
pub fn make_windows(session: &SessionRecord, w: usize) -> Result<WindowSet> {
    let mut set = WindowSet::new(w)?;
    set.extend_session(session, &Normalization::IDENTITY);
    Ok(set)
}

/// Normalized train/test windows plus training class weights for one fold.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub fold: Fold,
    pub norm: Normalization,
    pub class_weights: Vec<f64>,
    pub train: WindowSet,
    pub test: WindowSet,
}

pub fn fold_data(sessions: &[SessionRecord], fold: &Fold, w: usize) -> Result<FoldData> {
    let train_sessions: Vec<&SessionRecord> = sessions
        .iter()
        .filter(|s| fold.train_sessions.contains(&s.session_id))
        .collect();
    let norm = normalization_stats(train_sessions.iter().flat_map(|s| s.frames.iter()))?;
    let mut train = WindowSet::new(w)?;
    for s in &train_sessions {
        train.extend_session(s, &norm);
    }
    let mut test = WindowSet::new(w)?;
    for s in sessions
        .iter()
        .filter(|s| s.session_id == fold.test_session)
    {
        test.extend_session(s, &norm);
    }
    if test.is_empty() {
        return Err(Error::Empty(format!("test session {}", fold.test_session)));
    }
    Ok(FoldData {
        fold: fold.clone(),
        norm,
        class_weights: class_weights(&train.labels(), NUM_CLASSES)?,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(id: u32, idx: &[u64]) -> SessionRecord {
        let mut s = SessionRecord::new(id);
        for &i in idx {
            s.push(i, [i as f32; FRAME_PIXELS], (i % 4) as u8, true);
        }
        s
    }

    #[test]
    fn padding_replicates_first_frame() {
        let s = session(1, &(0..10).collect::<Vec<_>>());
        let ws = make_windows(&s, 3).unwrap();
        assert_eq!(ws.len(), 10);
        assert!(ws.window(0).iter().all(|f| f[0] == 0.0));
        assert_eq!(
            ws.window(9).iter().map(|f| f[0]).collect::<Vec<_>>(),
            vec![7.0, 8.0, 9.0]
        );
        assert_eq!(ws.samples()[9].label, 1);
    }

    #[test]
    fn gaps_restart_windows() {
        let s = session(1, &[0, 1, 2, 5, 6]);
        let ws = make_windows(&s, 3).unwrap();
        assert_eq!(
            ws.window(3).iter().map(|f| f[0]).collect::<Vec<_>>(),
            vec![5.0, 5.0, 5.0]
        );
        assert_eq!(
            ws.window(4).iter().map(|f| f[0]).collect::<Vec<_>>(),
            vec![5.0, 5.0, 6.0]
        );
    }

    #[test]
    fn weights_from_frequencies() {
        let w = class_weights(&[0, 1, 0, 1], 4).unwrap();
        assert_eq!(w, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(class_weights(&[0, 1, 2, 3], 4).unwrap(), vec![1.0; 4]);
        assert!(class_weights(&[], 4).is_err());
    }

    #[test]
    fn constant_data_normalizes_to_zero() {
        let f = [21.5f32; FRAME_PIXELS];
        let n = normalization_stats([&f, &f]).unwrap();
        assert_eq!(n.mean, 21.5);
        assert_eq!(n.std, STD_FLOOR);
        assert!(n.apply(&f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn folds_keep_anchor_in_training() {
        let ss: Vec<_> = (1..=5).map(|i| session(i, &[0])).collect();
        let folds = make_folds(&ss).unwrap();
        assert_eq!(
            folds.iter().map(|f| f.test_session).collect::<Vec<_>>(),
            vec![2, 3, 4, 5]
        );
        assert!(folds.iter().all(|f| f.train_sessions.contains(&1)));
        assert!(make_folds(&ss[..1]).is_err());
    }
}
