//! Central finite-difference gradient checking (64-bit only).
//!
//! The comparison core is independent of the tape: it only needs a closure
//! that recomputes the scalar loss from a flat parameter vector. Layer and
//! composite checks live in `checks` and are shared by the `gradcheck` CLI
//! command and the test suite.

/// Default probe step for central differences.
pub const FD_STEP: f64 = 1e-3;
/// Per-layer relative tolerance.
pub const TOL_LAYER: f64 = 1e-4;
/// Whole-generator relative tolerance.
pub const TOL_COMPOSITE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub probes: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero pairs from
/// blowing up on rounding noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Forward and backward difference slopes that disagree by more than this
/// mark a ReLU/abs/pool vertex inside the probe window (on a vertex-free
/// window they match to rounding noise for piecewise-linear objectives, and
/// to O(step) curvature for smooth ones, which one round of shrinking cures).
const VERTEX_TOL: f64 = 1e-4;
/// How much to shrink the probe window when it contains a vertex.
const VERTEX_SHRINK: f64 = 16.0;
/// Maximum window shrinks per probe before concluding the evaluation point
/// itself sits on a vertex.
const VERTEX_DEPTH: usize = 3;

/// Compare analytic gradients against central differences of `f` at `params`.
/// `probe` selects which coordinates to test (None = all of them).
///
/// Networks built from convolutions, ReLU-family activations, max-pooling and
/// absolute-value losses are piecewise linear in any single parameter, so the
/// central chord at `step` is the exact derivative unless the probe window
/// straddles a vertex — there it measures a length-weighted average of the
/// two one-sided slopes instead. Straddled windows are detected by comparing
/// the forward and backward one-sided slopes (these agree on a vertex-free
/// window, and differ by the full slope jump whenever the vertex is inside,
/// no matter how close to the evaluation point) and shrunk until clean. If
/// the point itself lies on a vertex the derivative is one-sided, and the
/// analytic value is accepted when it matches either side.
pub fn compare_grads(
    name: &str,
    params: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    step: f64,
    tol: f64,
    probe: Option<&[usize]>,
) -> CheckOutcome {
    assert_eq!(params.len(), analytic.len(), "{name}: gradient length mismatch");
    let all: Vec<usize>;
    let indices = match probe {
        Some(p) => p,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut work = params.to_vec();
    let center = f(&work);
    let mut max_rel = 0.0f64;
    for &i in indices {
        let keep = work[i];
        let mut h = step;
        let mut numeric = f64::NAN;
        for depth in 0..=VERTEX_DEPTH {
            work[i] = keep + h;
            let up = f(&work);
            work[i] = keep - h;
            let down = f(&work);
            work[i] = keep;
            let forward = (up - center) / h;
            let backward = (center - down) / h;
            if rel_err(forward, backward) <= VERTEX_TOL {
                numeric = (up - down) / (2.0 * h);
                break;
            }
            if depth == VERTEX_DEPTH {
                // Vertex at the point itself: any value between the one-sided
                // slopes is a valid subgradient there, so compare against the
                // nearest point of that interval.
                let (lo, hi) = (forward.min(backward), forward.max(backward));
                numeric = analytic[i].clamp(lo, hi);
            }
            h /= VERTEX_SHRINK;
        }
        max_rel = max_rel.max(rel_err(analytic[i], numeric));
    }
    CheckOutcome { name: name.to_string(), max_rel_err: max_rel, tol, probes: indices.len() }
}
