//! Small dense multilayer perceptrons, their tape evaluation, the Adam
//! optimizer, positional encoding features, and the checkpoint byte layout.
//!
//! Parameters of a net are a flat vector ordered layer by layer, row-major
//! weights then bias; the checkpoint block layout mirrors this exactly so a
//! save/load round trip is bit-identical.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::tape::{logistic, softplus, ParamBlock, Tape, VarId};
use crate::vec3::{Aabb, Vec3};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Softplus,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => logistic(x),
        }
    }

    #[inline]
    fn apply_taped(self, t: &mut Tape, x: VarId) -> VarId {
        match self {
            Activation::Linear => x,
            Activation::Softplus => t.softplus(x),
            Activation::Sigmoid => t.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major weights: w[o * in_dim + i].
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpNet {
    pub layers: Vec<Layer>,
}

impl MlpNet {
    /// Fresh net with uniform Xavier-style init and the given activations on
    /// hidden layers / output layer. Consecutive dims chain by construction.
    pub fn new(
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut impl Rng,
    ) -> MlpNet {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (in_dim, out_dim) = (dims[k], dims[k + 1]);
            let bound = libm::sqrt(6.0 / (in_dim + out_dim) as f64);
            let w = (0..in_dim * out_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let act = if k + 1 == dims.len() - 1 {
                out_act
            } else {
                hidden_act
            };
            layers.push(Layer {
                in_dim,
                out_dim,
                w,
                b: vec![0.0; out_dim],
                act,
            });
        }
        MlpNet { layers }
    }

    /// Zero the final layer so the net evaluates to exactly
    /// out_act(0) regardless of input; used for residual fields that must
    /// start as the analytic base.
    pub fn zero_output_layer(mut self) -> MlpNet {
        if let Some(last) = self.layers.last_mut() {
            last.w.iter_mut().for_each(|w| *w = 0.0);
            last.b.iter_mut().for_each(|b| *b = 0.0);
        }
        self
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }

    /// Flat parameter vector: per layer, row-major weights then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.in_dim * l.out_dim;
            l.w.copy_from_slice(&params[off..off + nw]);
            off += nw;
            l.b.copy_from_slice(&params[off..off + l.out_dim]);
            off += l.out_dim;
        }
        Ok(())
    }

    /// Plain (untaped) forward pass. `scratch` buffers avoid per-call
    /// allocation in hot loops; see [`MlpNet::eval`] for the simple form.
    pub fn eval_into(&self, x: &[f64], scratch: &mut EvalScratch, out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim());
        scratch.a.clear();
        scratch.a.extend_from_slice(x);
        for l in &self.layers {
            scratch.b.clear();
            for o in 0..l.out_dim {
                let row = &l.w[o * l.in_dim..(o + 1) * l.in_dim];
                let mut acc = l.b[o];
                for (wi, xi) in row.iter().zip(scratch.a.iter()) {
                    acc += wi * xi;
                }
                scratch.b.push(l.act.apply(acc));
            }
            core::mem::swap(&mut scratch.a, &mut scratch.b);
        }
        out.clear();
        out.extend_from_slice(&scratch.a);
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut scratch = EvalScratch::default();
        let mut out = Vec::new();
        self.eval_into(x, &mut scratch, &mut out);
        out
    }

    /// Tape forward pass over constant input features. `block` must hold this
    /// net's parameters in flat order (see [`MlpNet::params_flat`]); the
    /// caller binds it once per tape and may share it across many evals.
    pub fn eval_taped(&self, t: &mut Tape, block: ParamBlock, x: &[f64]) -> Vec<VarId> {
        debug_assert_eq!(x.len(), self.in_dim());
        debug_assert_eq!(block.len(), self.param_count());
        let mut cur: Vec<VarId> = Vec::new();
        let mut next: Vec<VarId> = Vec::new();
        let mut off = 0usize;
        for (li, l) in self.layers.iter().enumerate() {
            next.clear();
            let bias_base = off + l.in_dim * l.out_dim;
            for o in 0..l.out_dim {
                let row = off + o * l.in_dim;
                let mut acc = block.var(bias_base + o);
                if li == 0 {
                    // Constant inputs: one fused node per weight.
                    for (i, &xi) in x.iter().enumerate() {
                        acc = t.madd_c(acc, block.var(row + i), xi);
                    }
                } else {
                    for (i, &ci) in cur.iter().enumerate() {
                        let m = t.mul(block.var(row + i), ci);
                        acc = t.add(acc, m);
                    }
                }
                next.push(l.act.apply_taped(t, acc));
            }
            off = bias_base + l.out_dim;
            core::mem::swap(&mut cur, &mut next);
        }
        cur
    }
}

#[derive(Default)]
pub struct EvalScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Tape plus bookkeeping produced by [`forward_eval`].
pub struct EvalTape {
    pub tape: Tape,
    pub block: ParamBlock,
    pub outputs: Vec<VarId>,
}

/// Record one full forward pass of `net` at `x` on a fresh tape.
pub fn forward_eval(net: &MlpNet, x: &[f64]) -> Result<(Vec<f64>, EvalTape)> {
    if x.len() != net.in_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.in_dim(),
            got: x.len(),
        });
    }
    let mut tape = Tape::new();
    let block = tape.param_block(&net.params_flat());
    let outputs = net.eval_taped(&mut tape, block, x);
    let y = outputs.iter().map(|&o| tape.val(o)).collect();
    Ok((
        y,
        EvalTape {
            tape,
            block,
            outputs,
        },
    ))
}

/// Per-parameter gradients of seed * (sum of outputs). An empty tape yields a
/// zero-length gradient.
pub fn backward(et: &EvalTape, seed: f64) -> Vec<f64> {
    let seeds: Vec<(VarId, f64)> = et.outputs.iter().map(|&o| (o, seed)).collect();
    let adj = et.tape.backward_seeded(&seeds);
    adj.block(et.block).to_vec()
}

/// Adam with bias correction; defaults beta1=0.9, beta2=0.999, eps=1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> AdamState {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
        }
    }

    pub fn param_count(&self) -> usize {
        self.first_moment.len()
    }

    /// One optimizer step in place. Lengths must match the state.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.first_moment.len());
        assert_eq!(grads.len(), self.first_moment.len());
        self.step += 1;
        let b1t = 1.0 - libm::pow(self.beta1, self.step as f64);
        let b2t = 1.0 - libm::pow(self.beta2, self.step as f64);
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / b1t;
            let v_hat = v / b2t;
            params[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
    }
}

/// Positional encoding: normalized coordinates followed by
/// sin/cos pairs over `octaves` doubling frequencies per axis.
/// Feature count = 3 + 6 * octaves.
#[derive(Debug, Clone)]
pub struct PosEnc {
    pub octaves: usize,
    center: Vec3,
    inv_half: Vec3,
}

impl PosEnc {
    pub fn new(bbox: Aabb, octaves: usize) -> PosEnc {
        let h = bbox.extent() * 0.5;
        PosEnc {
            octaves,
            center: bbox.center(),
            inv_half: Vec3 {
                x: 1.0 / h.x,
                y: 1.0 / h.y,
                z: 1.0 / h.z,
            },
        }
    }

    pub fn feature_count(&self) -> usize {
        3 + 6 * self.octaves
    }

    pub fn features_into(&self, p: Vec3, out: &mut Vec<f64>) {
        out.clear();
        let n = [
            (p.x - self.center.x) * self.inv_half.x,
            (p.y - self.center.y) * self.inv_half.y,
            (p.z - self.center.z) * self.inv_half.z,
        ];
        out.extend_from_slice(&n);
        let mut freq = core::f64::consts::PI;
        for _ in 0..self.octaves {
            for c in n {
                out.push(libm::sin(freq * c));
                out.push(libm::cos(freq * c));
            }
            freq *= 2.0;
        }
    }
}

// --- checkpoint byte layout ---------------------------------------------

/// Magic prefix of a checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TFG1";

/// Serialize one net as a self-describing block: layer count (u32 LE),
/// per-layer (in, out) dims, then per layer the row-major weights followed by
/// the bias, all little-endian f64. Activations are not stored; they are
/// assigned by role when loading.
pub fn encode_block(net: &MlpNet, out: &mut Vec<u8>) {
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
    }
    for l in &net.layers {
        for &w in &l.w {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &b in &l.b {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
}

fn take<'a>(bytes: &'a [u8], off: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if *off + n > bytes.len() {
        return Err(Error::CheckpointFormat(format!(
            "truncated while reading {what} at offset {}",
            *off
        )));
    }
    let s = &bytes[*off..*off + n];
    *off += n;
    Ok(s)
}

fn read_u32(bytes: &[u8], off: &mut usize, what: &str) -> Result<u32> {
    let s = take(bytes, off, 4, what)?;
    Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

fn read_f64(bytes: &[u8], off: &mut usize, what: &str) -> Result<f64> {
    let s = take(bytes, off, 8, what)?;
    Ok(f64::from_le_bytes([
        s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7],
    ]))
}

/// Deserialize one block written by [`encode_block`], advancing `off`.
/// Hidden layers get `hidden_act`, the final layer `out_act`.
pub fn decode_block(
    bytes: &[u8],
    off: &mut usize,
    hidden_act: Activation,
    out_act: Activation,
) -> Result<MlpNet> {
    let n_layers = read_u32(bytes, off, "layer count")? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::CheckpointFormat(format!(
            "implausible layer count {n_layers}"
        )));
    }
    let mut dims = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let ind = read_u32(bytes, off, "layer in dim")? as usize;
        let outd = read_u32(bytes, off, "layer out dim")? as usize;
        if ind == 0 || outd == 0 || ind > 65536 || outd > 65536 {
            return Err(Error::CheckpointFormat(format!(
                "implausible dims {ind}x{outd} in layer {i}"
            )));
        }
        dims.push((ind, outd));
    }
    for w in dims.windows(2) {
        if w[0].1 != w[1].0 {
            return Err(Error::CheckpointFormat(String::from(
                "layer dimensions do not chain",
            )));
        }
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (i, &(ind, outd)) in dims.iter().enumerate() {
        let mut w = Vec::with_capacity(ind * outd);
        for _ in 0..ind * outd {
            w.push(read_f64(bytes, off, "weight")?);
        }
        let mut b = Vec::with_capacity(outd);
        for _ in 0..outd {
            b.push(read_f64(bytes, off, "bias")?);
        }
        let act = if i + 1 == n_layers { out_act } else { hidden_act };
        layers.push(Layer {
            in_dim: ind,
            out_dim: outd,
            w,
            b,
            act,
        });
    }
    Ok(MlpNet { layers })
}
