//! Synthetic strain fixtures matching the input schema: 3 strains, 14 time
//! points over 72 hours, 23 features. The real supplementary dataset is not
//! redistributable, so these curves stand in for development and testing;
//! shapes are smooth, non-negative, and scale with the strain's producer
//! level so the held-out-strain protocol is meaningful.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{DataError, FeatureSchema, Pathway};

const N_RAW_POINTS: usize = 14;
const SPAN_HOURS: f64 = 72.0;

/// Producer-level multipliers for strains 1..3 (low, medium, high).
const STRAIN_FACTORS: [f64; 3] = [0.55, 1.0, 1.5];

struct Curve {
    kind: CurveKind,
    amplitude: f64,
    center_h: f64,
    width_h: f64,
    baseline: f64,
    wiggle_phase: f64,
    strain_exponent: f64,
}

enum CurveKind {
    /// Sigmoid rise to a plateau.
    Rise,
    /// Gaussian pulse (transient intermediate).
    Pulse,
    /// Exponential decay from an initial pool.
    Decay,
}

impl Curve {
    fn eval(&self, t: f64, strain_factor: f64) -> f64 {
        let shape = match self.kind {
            CurveKind::Rise => sigmoid((t - self.center_h) / self.width_h),
            CurveKind::Pulse => (-((t - self.center_h) / self.width_h).powi(2)).exp(),
            CurveKind::Decay => (-t / self.width_h).exp(),
        };
        let level = strain_factor.powf(self.strain_exponent);
        let wiggle = 0.03 * (t / 9.0 + self.wiggle_phase).sin();
        let v = self.baseline + self.amplitude * level * (shape + wiggle);
        v.max(0.0)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    lo + u * (hi - lo)
}

fn curve_for(rng: &mut ChaCha20Rng, name: &str, is_state: bool, target: &str) -> Curve {
    if name == target {
        // Target metabolite: late monotone rise from ~0, strongly tied to
        // the producer level.
        return Curve {
            kind: CurveKind::Rise,
            amplitude: uniform(rng, 1.2, 2.4),
            center_h: uniform(rng, 30.0, 44.0),
            width_h: uniform(rng, 6.0, 10.0),
            baseline: 0.0,
            wiggle_phase: uniform(rng, 0.0, std::f64::consts::TAU),
            strain_exponent: 1.0,
        };
    }
    if name == "OD600" {
        // Culture density: early logistic growth.
        return Curve {
            kind: CurveKind::Rise,
            amplitude: uniform(rng, 1.5, 3.0),
            center_h: uniform(rng, 10.0, 18.0),
            width_h: uniform(rng, 4.0, 8.0),
            baseline: uniform(rng, 0.02, 0.08),
            wiggle_phase: uniform(rng, 0.0, std::f64::consts::TAU),
            strain_exponent: 0.4,
        };
    }
    if !is_state {
        // Proteins: expression plateaus, weakly tied to producer level.
        return Curve {
            kind: CurveKind::Rise,
            amplitude: uniform(rng, 0.6, 2.8),
            center_h: uniform(rng, 12.0, 40.0),
            width_h: uniform(rng, 4.0, 12.0),
            baseline: uniform(rng, 0.1, 0.4),
            wiggle_phase: uniform(rng, 0.0, std::f64::consts::TAU),
            strain_exponent: 0.25,
        };
    }
    // Other metabolites: a mix of transients and decaying pools; tails sit
    // near zero so negativity penalties have something to guard.
    match rng.next_u64() % 3 {
        0 => Curve {
            kind: CurveKind::Pulse,
            amplitude: uniform(rng, 0.8, 2.5),
            center_h: uniform(rng, 18.0, 50.0),
            width_h: uniform(rng, 8.0, 18.0),
            baseline: uniform(rng, 0.0, 0.08),
            wiggle_phase: uniform(rng, 0.0, std::f64::consts::TAU),
            strain_exponent: 0.7,
        },
        1 => Curve {
            kind: CurveKind::Decay,
            amplitude: uniform(rng, 0.8, 2.5),
            center_h: 0.0,
            width_h: uniform(rng, 14.0, 36.0),
            baseline: uniform(rng, 0.0, 0.05),
            wiggle_phase: uniform(rng, 0.0, std::f64::consts::TAU),
            strain_exponent: 0.6,
        },
        _ => Curve {
            kind: CurveKind::Rise,
            amplitude: uniform(rng, 0.5, 1.8),
            center_h: uniform(rng, 20.0, 48.0),
            width_h: uniform(rng, 5.0, 14.0),
            baseline: uniform(rng, 0.0, 0.1),
            wiggle_phase: uniform(rng, 0.0, std::f64::consts::TAU),
            strain_exponent: 0.7,
        },
    }
}

/// Write `<dir>/<pathway>.csv` with 3 strains x 14 points x 23 features.
/// Identical `(pathway, seed)` produce identical bytes.
pub fn write_fixture(dir: &Path, pathway: Pathway, seed: u64) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir)?;
    let schema = FeatureSchema::for_pathway(pathway);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (pathway as u64).wrapping_mul(0x9E37_79B9));
    let curves: Vec<Curve> = schema
        .feature_names
        .iter()
        .zip(&schema.state_mask)
        .map(|(name, &is_state)| curve_for(&mut rng, name, is_state, pathway.target()))
        .collect();

    let path = dir.join(format!("{}.csv", pathway.name()));
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["strain".to_string(), "time_h".to_string()];
    header.extend(schema.feature_names.iter().cloned());
    w.write_record(&header)?;

    for (si, strain) in pathway.strain_ids().iter().enumerate() {
        let factor = STRAIN_FACTORS[si];
        for i in 0..N_RAW_POINTS {
            let t = SPAN_HOURS * i as f64 / (N_RAW_POINTS - 1) as f64;
            let mut rec = vec![strain.to_string(), format!("{t}")];
            for c in &curves {
                rec.push(format!("{}", c.eval(t, factor)));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(path)
}
