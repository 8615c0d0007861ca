//! Synthetic 8x8 thermal recordings: warm Gaussian people moving over a
//! per-session ambient background with sensor noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{SessionRecord, NUM_CLASSES};
use crate::zoo::{Frame, FRAME_PIXELS, FRAME_SIDE};

/// A warm blob at sub-pixel position `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Person {
    pub row: f64,
    pub col: f64,
    /// Peak excess temperature over ambient, °C.
    pub peak: f64,
    /// Spatial spread in pixels.
    pub sigma: f64,
}

/// Noise-free frame: `ambient + background + sum of Gaussians`.
pub fn render(ambient: f64, background: &[f64; FRAME_PIXELS], people: &[Person]) -> Frame {
    let mut f = [0f32; FRAME_PIXELS];
    for r in 0..FRAME_SIDE {
        for c in 0..FRAME_SIDE {
            let mut v = ambient + background[r * FRAME_SIDE + c];
            for p in people {
                let d2 = (r as f64 - p.row).powi(2) + (c as f64 - p.col).powi(2);
                v += p.peak * (-d2 / (2.0 * p.sigma * p.sigma)).exp();
            }
            f[r * FRAME_SIDE + c] = v as f32;
        }
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sessions: u32,
    pub frames_per_session: usize,
    pub seed: u64,
    /// Pixel noise standard deviation, °C.
    pub noise: f64,
    /// Extra fraction of frames flagged low-confidence at random.
    pub random_low_confidence: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sessions: 5,
            frames_per_session: 1000,
            seed: 0,
            noise: 0.15,
            random_low_confidence: 0.01,
        }
    }
}

struct Walker {
    p: Person,
    vr: f64,
    vc: f64,
}

impl Walker {
    fn enter(rng: &mut ChaCha8Rng) -> Self {
        let edge = rng.random_range(0..4);
        let t = rng.random_range(0.0..7.0);
        let (row, col) = match edge {
            0 => (0.0, t),
            1 => (7.0, t),
            2 => (t, 0.0),
            _ => (t, 7.0),
        };
        Self {
            p: Person {
                row,
                col,
                peak: rng.random_range(2.0..4.5),
                sigma: rng.random_range(0.7..1.1),
            },
            vr: rng.random_range(-0.25..0.25),
            vc: rng.random_range(-0.25..0.25),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) {
        self.vr = (self.vr + rng.random_range(-0.05..0.05)).clamp(-0.3, 0.3);
        self.vc = (self.vc + rng.random_range(-0.05..0.05)).clamp(-0.3, 0.3);
        self.p.row += self.vr;
        self.p.col += self.vc;
        if !(0.0..=7.0).contains(&self.p.row) {
            self.vr = -self.vr;
            self.p.row = self.p.row.clamp(0.0, 7.0);
        }
        if !(0.0..=7.0).contains(&self.p.col) {
            self.vc = -self.vc;
            self.p.col = self.p.col.clamp(0.0, 7.0);
        }
    }
}

/// Occupancy mix roughly matching a room with mostly 0-2 people.
const TARGET_MIX: [f64; NUM_CLASSES] = [0.27, 0.42, 0.23, 0.08];

/// Frames between occupancy target changes.
const BLOCK: usize = 50;

/// Shuffled per-block targets whose counts follow [`TARGET_MIX`] (largest
/// remainder), with every class present once there are enough blocks.
fn block_targets(blocks: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let exact: Vec<f64> = TARGET_MIX.iter().map(|p| p * blocks as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let assigned: usize = counts.iter().sum();
    for &k in order.iter().take(blocks - assigned) {
        counts[k] += 1;
    }
    if blocks >= NUM_CLASSES {
        for k in 0..NUM_CLASSES {
            if counts[k] == 0 {
                let donor = (0..NUM_CLASSES).max_by_key(|&j| counts[j]).expect("classes");
                counts[donor] -= 1;
                counts[k] += 1;
            }
        }
    }
    let mut out: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    out.shuffle(rng);
    out
}

/// Generates sessions numbered `1..=sessions`. Frames where two people overlap
/// (centres closer than 1.5 px) are flagged low-confidence, like hard-to-label frames.
pub fn generate(cfg: &SynthConfig) -> Vec<SessionRecord> {
    (1..=cfg.sessions)
        .map(|id| generate_session(cfg, id))
        .collect()
}

fn generate_session(cfg: &SynthConfig, id: u32) -> SessionRecord {
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let ambient = rng.random_range(19.0..27.0);
    let mut background = [0f64; FRAME_PIXELS];
    let (gr, gc) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    for r in 0..FRAME_SIDE {
        for c in 0..FRAME_SIDE {
            background[r * FRAME_SIDE + c] = gr * r as f64 + gc * c as f64;
        }
    }
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let mut people: Vec<Walker> = Vec::new();
    let targets = block_targets(cfg.frames_per_session.div_ceil(BLOCK), &mut rng);
    let mut rec = SessionRecord::new(id);
    for t in 0..cfg.frames_per_session {
        let target = targets[t / BLOCK];
        if people.len() < target && rng.random_bool(0.2) {
            people.push(Walker::enter(&mut rng));
        } else if people.len() > target && rng.random_bool(0.2) {
            let i = rng.random_range(0..people.len());
            people.remove(i);
        }
        for w in &mut people {
            w.step(&mut rng);
        }
        let ps: Vec<Person> = people.iter().map(|w| w.p).collect();
        let mut frame = render(ambient, &background, &ps);
        for v in &mut frame {
            *v += noise.sample(&mut rng) as f32;
        }
        let overlap = ps.iter().enumerate().any(|(i, a)| {
            ps[i + 1..]
                .iter()
                .any(|b| (a.row - b.row).hypot(a.col - b.col) < 1.5)
        });
        let confident = !overlap && !rng.random_bool(cfg.random_low_confidence.clamp(0.0, 1.0));
        rec.push(t as u64, frame, ps.len() as u8, confident);
    }
    rec
}
