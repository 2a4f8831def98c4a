//! The neural vector field `f(u, theta)`: a small fully connected MLP with
//! tanh activations mapping a D-dimensional state to its time derivative.
//!
//! Layer sequence: `Linear(D -> H)`, then `hidden_layers - 1` times
//! `Linear(H -> H)`, then `Linear(H -> D)`, with tanh after every linear
//! layer except the last. Parameters live in a single flat vector so the
//! optimizers can treat the model as a point in R^n.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::adiff::{AdiffError, Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PATHODE\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field spec: {0}")]
    InvalidSpec(String),
    #[error("state dimension {got} does not match field input dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter vector has length {got}, spec requires {expected}")]
    ThetaLength { expected: usize, got: usize },
    #[error("parameter vector contains non-finite entries")]
    NonFiniteTheta,
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error(transparent)]
    Adiff(#[from] AdiffError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Architecture descriptor. The shipped default profile is 23 inputs, width
/// 10, four hidden linear layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FieldSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
}

impl FieldSpec {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        hidden_layers: usize,
    ) -> Result<Self, FieldError> {
        if input_dim == 0 || hidden_dim == 0 || hidden_layers == 0 {
            return Err(FieldError::InvalidSpec(format!(
                "dims must be positive, got {input_dim}/{hidden_dim}/{hidden_layers}"
            )));
        }
        Ok(FieldSpec {
            input_dim,
            hidden_dim,
            hidden_layers,
        })
    }

    /// The default 23-feature profile: width 10, 4 hidden layers (823
    /// parameters).
    pub fn default_profile() -> Self {
        FieldSpec {
            input_dim: 23,
            hidden_dim: 10,
            hidden_layers: 4,
        }
    }

    /// `(out, in)` dimensions of each linear layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        dims.push((h, d));
        for _ in 1..self.hidden_layers {
            dims.push((h, h));
        }
        dims.push((d, h));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(out, inp)| out * inp + out)
            .sum()
    }
}

/// Flat parameter vector plus its layer-shape descriptor. Layout per layer:
/// weight matrix row-major, then bias.
#[derive(Clone, Debug)]
pub struct FieldParams {
    pub spec: FieldSpec,
    pub theta: Vec<f64>,
}

impl FieldParams {
    pub fn from_theta(spec: FieldSpec, theta: Vec<f64>) -> Result<Self, FieldError> {
        if theta.len() != spec.param_count() {
            return Err(FieldError::ThetaLength {
                expected: spec.param_count(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(FieldError::NonFiniteTheta);
        }
        Ok(FieldParams { spec, theta })
    }

    /// Weights drawn from Normal(0, 0.1) via a seeded ChaCha20 stream and a
    /// Box-Muller transform; biases start at zero. Identical `(spec, seed)`
    /// reproduce the identical vector on every platform.
    pub fn init(spec: FieldSpec, seed: u64) -> Self {
        let mut sampler = NormalSampler::new(seed);
        let mut theta = Vec::with_capacity(spec.param_count());
        for (out, inp) in spec.layer_dims() {
            for _ in 0..out * inp {
                theta.push(0.1 * sampler.sample());
            }
            theta.resize(theta.len() + out, 0.0);
        }
        FieldParams { spec, theta }
    }

    /// Per-layer `(weights, bias)` slices into the flat vector.
    pub fn layers(&self) -> Vec<(&[f64], &[f64])> {
        let mut views = Vec::new();
        let mut off = 0;
        for (out, inp) in self.spec.layer_dims() {
            let w = &self.theta[off..off + out * inp];
            off += out * inp;
            let b = &self.theta[off..off + out];
            off += out;
            views.push((w, b));
        }
        views
    }

    /// Evaluate `f(u)` without recording anything.
    pub fn eval(&self, u: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        let d = self.spec.input_dim;
        if u.len() != d || out.len() != d {
            return Err(FieldError::DimensionMismatch {
                expected: d,
                got: u.len(),
            });
        }
        let h = self.spec.hidden_dim;
        let mut cur = u.to_vec();
        let mut next = vec![0.0; h.max(d)];
        let layers = self.layers();
        let last = layers.len() - 1;
        for (li, (w, b)) in layers.iter().enumerate() {
            let rows = b.len();
            let cols = cur.len();
            for r in 0..rows {
                let mut acc = b[r];
                let row = &w[r * cols..(r + 1) * cols];
                for (x, wv) in cur.iter().zip(row) {
                    acc += x * wv;
                }
                next[r] = if li == last { acc } else { acc.tanh() };
            }
            cur.clear();
            cur.extend_from_slice(&next[..rows]);
        }
        out.copy_from_slice(&cur);
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path, seed: u64) -> Result<(), FieldError> {
        let mut buf = Vec::with_capacity(40 + 8 * self.theta.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.spec.input_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.spec.hidden_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.spec.hidden_layers as u32).to_le_bytes());
        buf.extend_from_slice(&seed.to_le_bytes());
        buf.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for x in &self.theta {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(FieldParams, u64), FieldError> {
        let fail = |detail: &str| FieldError::Checkpoint {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let mut file = fs::File::open(path).map_err(|e| FieldError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut header = [0u8; 40];
        file.read_exact(&mut header)
            .map_err(|_| fail("truncated header"))?;
        if &header[..8] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let input_dim = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let hidden_dim = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let hidden_layers = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(header[24..32].try_into().unwrap());
        let theta_len = u64::from_le_bytes(header[32..40].try_into().unwrap()) as usize;

        let spec = FieldSpec::new(input_dim, hidden_dim, hidden_layers)
            .map_err(|e| fail(&e.to_string()))?;
        if theta_len != spec.param_count() {
            return Err(fail(&format!(
                "theta length {theta_len} does not match spec ({})",
                spec.param_count()
            )));
        }
        let mut raw = vec![0u8; theta_len * 8];
        file.read_exact(&mut raw)
            .map_err(|_| fail("truncated theta"))?;
        let theta: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params = FieldParams::from_theta(spec, theta).map_err(|e| fail(&e.to_string()))?;
        Ok((params, seed))
    }
}

/// Seeded standard-normal stream: ChaCha20 for uniforms, Box-Muller for the
/// transform. Both values of each pair are consumed, so the draw sequence is
/// a pure function of the seed.
pub struct NormalSampler {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new(seed: u64) -> Self {
        NormalSampler {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    fn uniform01(&mut self) -> f64 {
        // 53 mantissa bits -> uniform in [0, 1).
        (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform01(); // (0, 1]; keeps ln away from 0
        let u2 = self.uniform01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// The field's parameter leaves recorded on a tape, ready for repeated
/// differentiable evaluation.
pub struct TapedField {
    dims: Vec<(usize, usize)>,
    vars: Vec<(Var, Var)>,
    input_dim: usize,
}

impl TapedField {
    /// Record one `(weight, bias)` leaf pair per layer. All later `eval`
    /// calls reference the same leaves, so a single backward pass yields the
    /// full parameter gradient.
    pub fn bind(tape: &mut Tape, params: &FieldParams) -> Result<TapedField, FieldError> {
        let dims = params.spec.layer_dims();
        let mut vars = Vec::with_capacity(dims.len());
        for ((out, inp), (w, b)) in dims.iter().zip(params.layers()) {
            let wv = tape.leaf(Tensor::new(*out, *inp, w.to_vec()), true)?;
            let bv = tape.leaf(Tensor::col(b.to_vec()), true)?;
            vars.push((wv, bv));
        }
        Ok(TapedField {
            dims,
            vars,
            input_dim: params.spec.input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// `f(u)` recorded on the tape; `u` must be a `D x 1` Var.
    pub fn eval(&self, tape: &mut Tape, u: Var) -> Result<Var, FieldError> {
        let shape = tape.value(u).shape();
        if shape != (self.input_dim, 1) {
            return Err(FieldError::DimensionMismatch {
                expected: self.input_dim,
                got: shape.0,
            });
        }
        let last = self.vars.len() - 1;
        let mut cur = u;
        for (li, (w, b)) in self.vars.iter().enumerate() {
            let z = tape.matmul(*w, cur)?;
            let zb = tape.add(z, *b)?;
            cur = if li == last { zb } else { tape.tanh(zb)? };
        }
        Ok(cur)
    }

    /// Flatten the per-layer gradients back into theta layout. Layers missing
    /// from the map contribute zeros.
    pub fn flatten_grads(&self, grads: &crate::adiff::Gradients) -> Vec<f64> {
        let mut flat = Vec::new();
        for ((out, inp), (wv, bv)) in self.dims.iter().zip(&self.vars) {
            match grads.get(*wv) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.resize(flat.len() + out * inp, 0.0),
            }
            match grads.get(*bv) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.resize(flat.len() + out, 0.0),
            }
        }
        flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_has_823_parameters() {
        let spec = FieldSpec::default_profile();
        assert_eq!(spec.param_count(), 823);
    }

    #[test]
    fn init_is_deterministic_in_spec_and_seed() {
        let spec = FieldSpec::default_profile();
        let a = FieldParams::init(spec, 1234);
        let b = FieldParams::init(spec, 1234);
        assert_eq!(a.theta, b.theta);
        let c = FieldParams::init(spec, 1235);
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn weight_sample_std_near_point_one() {
        // 10^4 weight draws from a wide spec.
        let spec = FieldSpec::new(100, 96, 1).unwrap();
        let params = FieldParams::init(spec, 77);
        let weights: Vec<f64> = params
            .layers()
            .iter()
            .flat_map(|(w, _)| w.iter().copied())
            .collect();
        assert!(weights.len() >= 10_000);
        let n = weights.len() as f64;
        let mean = weights.iter().sum::<f64>() / n;
        let var = weights.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(std > 0.09 && std < 0.11, "std = {std}");
        assert!(mean.abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn biases_start_at_zero() {
        let params = FieldParams::init(FieldSpec::default_profile(), 5);
        for (_, b) in params.layers() {
            assert!(b.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_theta_gives_zero_field() {
        let spec = FieldSpec::new(4, 6, 3).unwrap();
        let params = FieldParams::from_theta(spec, vec![0.0; spec.param_count()]).unwrap();
        let mut out = vec![1.0; 4];
        params.eval(&[0.3, -2.0, 5.0, 0.1], &mut out).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn eval_matches_hand_rolled_chain_on_toy_spec() {
        // Independent straight-line reimplementation for a 3-5-3 network
        // with 2 hidden layers.
        let spec = FieldSpec::new(3, 5, 2).unwrap();
        let params = FieldParams::init(spec, 99);
        let u = [0.7, -1.2, 0.4];

        let layers = params.layers();
        let dims = spec.layer_dims();
        let mut cur = u.to_vec();
        for (li, ((w, b), (out, inp))) in layers.iter().zip(&dims).enumerate() {
            let mut next = vec![0.0; *out];
            for r in 0..*out {
                let mut acc = b[r];
                for c in 0..*inp {
                    acc += w[r * inp + c] * cur[c];
                }
                next[r] = if li == dims.len() - 1 {
                    acc
                } else {
                    acc.tanh()
                };
            }
            cur = next;
        }

        let mut got = vec![0.0; 3];
        params.eval(&u, &mut got).unwrap();
        for (a, b) in got.iter().zip(&cur) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn taped_eval_matches_plain_eval() {
        let spec = FieldSpec::new(4, 7, 3).unwrap();
        let params = FieldParams::init(spec, 3);
        let u = [0.2, -0.4, 1.4, -2.2];

        let mut plain = vec![0.0; 4];
        params.eval(&u, &mut plain).unwrap();

        let mut tape = Tape::new();
        let fv = TapedField::bind(&mut tape, &params).unwrap();
        let uv = tape.leaf(Tensor::col(u.to_vec()), false).unwrap();
        let out = fv.eval(&mut tape, uv).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&plain) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn output_bounded_by_last_layer_norms() {
        // tanh output of the penultimate layer is in [-1, 1], so
        // |f_i| <= sum_j |W_last[i][j]| + |b_last[i]|.
        let spec = FieldSpec::new(5, 8, 2).unwrap();
        let params = FieldParams::init(spec, 11);
        let layers = params.layers();
        let (w_last, b_last) = layers.last().unwrap();
        let h = spec.hidden_dim;

        for seed in 0..20u64 {
            let mut s = NormalSampler::new(seed);
            let u: Vec<f64> = (0..5).map(|_| 3.0 * s.sample()).collect();
            let mut out = vec![0.0; 5];
            params.eval(&u, &mut out).unwrap();
            for i in 0..5 {
                let bound: f64 = w_last[i * h..(i + 1) * h]
                    .iter()
                    .map(|x| x.abs())
                    .sum::<f64>()
                    + b_last[i].abs();
                assert!(out[i].abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn taped_gradients_match_finite_differences() {
        let spec = FieldSpec::new(3, 4, 2).unwrap();
        let params = FieldParams::init(spec, 21);
        let u0 = [0.5, -0.7, 1.1];

        let loss_of = |theta: &[f64], u: &[f64]| -> f64 {
            let p = FieldParams::from_theta(spec, theta.to_vec()).unwrap();
            let mut tape = Tape::new();
            let fv = TapedField::bind(&mut tape, &p).unwrap();
            let uv = tape.leaf(Tensor::col(u.to_vec()), false).unwrap();
            let out = fv.eval(&mut tape, uv).unwrap();
            let sq = tape.square(out).unwrap();
            let root = tape.mean(sq).unwrap();
            tape.scalar_value(root)
        };

        // Tape gradient w.r.t. theta and u.
        let mut tape = Tape::new();
        let fv = TapedField::bind(&mut tape, &params).unwrap();
        let uv = tape.leaf(Tensor::col(u0.to_vec()), true).unwrap();
        let out = fv.eval(&mut tape, uv).unwrap();
        let sq = tape.square(out).unwrap();
        let root = tape.mean(sq).unwrap();
        let grads = tape.backward(root).unwrap();
        let g_theta = fv.flatten_grads(&grads);
        let g_u = grads.get(uv).unwrap().data().to_vec();

        let h = 1e-5;
        for i in (0..params.theta.len()).step_by(7) {
            let mut tp = params.theta.clone();
            let mut tm = params.theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (loss_of(&tp, &u0) - loss_of(&tm, &u0)) / (2.0 * h);
            let ad = g_theta[i];
            assert!(
                (ad - fd).abs() <= 1e-5 * ad.abs().max(fd.abs()).max(1e-4),
                "theta[{i}]: ad={ad} fd={fd}"
            );
        }
        for i in 0..3 {
            let mut up = u0;
            let mut um = u0;
            up[i] += h;
            um[i] -= h;
            let fd = (loss_of(&params.theta, &up) - loss_of(&params.theta, &um)) / (2.0 * h);
            let ad = g_u[i];
            assert!(
                (ad - fd).abs() <= 1e-5 * ad.abs().max(fd.abs()).max(1e-4),
                "u[{i}]: ad={ad} fd={fd}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = FieldSpec::new(6, 5, 3).unwrap();
        let params = FieldParams::init(spec, 4242);
        params.save_checkpoint(&path, 4242).unwrap();
        let (loaded, seed) = FieldParams::load_checkpoint(&path).unwrap();
        assert_eq!(seed, 4242);
        assert_eq!(loaded.spec, spec);
        for (a, b) in loaded.theta.iter().zip(&params.theta) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        let err = FieldParams::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("bad.ckpt"));
    }

    #[test]
    fn theta_length_validated() {
        let spec = FieldSpec::default_profile();
        let err = FieldParams::from_theta(spec, vec![0.0; 10]).unwrap_err();
        assert!(matches!(err, FieldError::ThetaLength { expected: 823, .. }));
    }
}
