//! Flood-fill labeling oracle and scripted blob sessions for the baseline counter.

use std::collections::VecDeque;

use ircount::baseline::Connectivity;
use ircount::zoo::{Frame, FRAME_PIXELS, FRAME_SIDE};

/// Breadth-first flood fill; components are numbered in raster order of their first pixel.
pub fn flood_fill(mask: &[bool], side: usize, conn: Connectivity) -> (Vec<usize>, usize) {
    let mut labels = vec![0usize; side * side];
    let mut next = 0;
    let steps: &[(i64, i64)] = match conn {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    for start in 0..side * side {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (r, c) = ((p / side) as i64, (p % side) as i64);
            for &(dr, dc) in steps {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= side as i64 || nc >= side as i64 {
                    continue;
                }
                let q = nr as usize * side + nc as usize;
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    queue.push_back(q);
                }
            }
        }
    }
    (labels, next)
}

pub const AMBIENT: f64 = 22.0;
pub const AMPLITUDE: f64 = 3.2;
pub const SIGMA: f64 = 1.2;
/// Fixed person positions (row, col) on the native grid.
pub const SPOTS: [(f64, f64); 2] = [(1.0, 1.0), (6.0, 6.0)];

/// Frame with `n` Gaussian people at the first `n` spots.
pub fn scripted_frame(n: usize) -> Frame {
    let mut f = [0f32; FRAME_PIXELS];
    for (i, v) in f.iter_mut().enumerate() {
        let (r, c) = ((i / FRAME_SIDE) as f64, (i % FRAME_SIDE) as f64);
        // faint fixed texture so the background is not flat
        let mut t = AMBIENT + 0.1 * ((r * 3.0 + c) % 4.0) / 4.0;
        for &(pr, pc) in &SPOTS[..n] {
            let d2 = (r - pr).powi(2) + (c - pc).powi(2);
            t += AMPLITUDE * (-d2 / (2.0 * SIGMA * SIGMA)).exp();
        }
        *v = t as f32;
    }
    f
}

/// Per-frame true counts: an empty warmup, then 0/1/2-person segments.
pub fn script(warmup: usize) -> Vec<usize> {
    let mut s = vec![0; warmup];
    for (n, len) in [(0, 8), (1, 15), (2, 15), (1, 10), (0, 10), (2, 12), (0, 8)] {
        s.extend(std::iter::repeat_n(n, len));
    }
    s
}

pub fn scripted_session(script: &[usize], offset: f32) -> Vec<Frame> {
    script
        .iter()
        .map(|&n| {
            let mut f = scripted_frame(n);
            f.iter_mut().for_each(|v| *v += offset);
            f
        })
        .collect()
}
