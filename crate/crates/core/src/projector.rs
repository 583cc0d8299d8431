//! The learnable projector: a SiLU MLP branch plus a linear residual branch,
//! with hand-derived gradients and an Adam optimizer whose learning rate
//! decays exponentially across the run.

use crate::math::Matrix;
use crate::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::{Read, Write};

/// Batch rows are processed in fixed chunks so parallel reductions keep a
/// deterministic order regardless of thread count.
const CHUNK: usize = 256;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Projector weights. The MLP branch is `w2 * dropout(silu(w1 * f + b1)) + b2`,
/// the residual branch `res_w * f + res_b`; the output is their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    /// hidden x d_in
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// d_out x hidden
    pub w2: Matrix,
    pub b2: Vec<f64>,
    /// d_out x d_in
    pub res_w: Matrix,
    pub res_b: Vec<f64>,
    /// Dropout probability on the hidden activation, in [0, 1).
    pub dropout_p: f64,
}

impl ProjectorParams {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize, dropout_p: f64) -> Self {
        ProjectorParams {
            d_in,
            hidden,
            d_out,
            w1: Matrix::zeros(hidden, d_in),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(d_out, hidden),
            b2: vec![0.0; d_out],
            res_w: Matrix::zeros(d_out, d_in),
            res_b: vec![0.0; d_out],
            dropout_p,
        }
    }

    /// Seeded fan-in-scaled uniform initialization. Hidden and output widths
    /// equal the input feature dimension.
    pub fn init(d: usize, dropout_p: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(d, d, d, dropout_p);
        let mut fill = |m: &mut Matrix, fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in m.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(&mut p.w1, d);
        fill(&mut p.w2, d);
        fill(&mut p.res_w, d);
        p
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.w1.rows() == self.hidden
            && self.w1.cols() == self.d_in
            && self.b1.len() == self.hidden
            && self.w2.rows() == self.d_out
            && self.w2.cols() == self.hidden
            && self.b2.len() == self.d_out
            && self.res_w.rows() == self.d_out
            && self.res_w.cols() == self.d_in
            && self.res_b.len() == self.d_out;
        if !shapes_ok {
            return Err(Error::Validation("projector parameter shapes are inconsistent".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Validation("dropout probability must lie in [0, 1)".into()));
        }
        let finite = self.w1.is_finite()
            && self.w2.is_finite()
            && self.res_w.is_finite()
            && self.b1.iter().chain(&self.b2).chain(&self.res_b).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("projector parameters are not finite".into()));
        }
        Ok(())
    }

    fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.data(),
            &self.b1,
            self.w2.data(),
            &self.b2,
            self.res_w.data(),
            &self.res_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
            self.res_w.data_mut(),
            &mut self.res_b,
        ]
    }

    /// Serialize as a length-prefixed blob: dims, dropout, then f32 matrices
    /// row-major in declaration order (w1, b1, w2, b2, res_w, res_b).
    pub fn write_blob(&self, w: &mut impl Write) -> Result<()> {
        let count: usize = self.tensors().iter().map(|t| t.len()).sum();
        let payload = 4 * 3 + 4 + 4 * count as u64;
        w.write_u64::<LittleEndian>(payload)?;
        w.write_u32::<LittleEndian>(self.d_in as u32)?;
        w.write_u32::<LittleEndian>(self.hidden as u32)?;
        w.write_u32::<LittleEndian>(self.d_out as u32)?;
        w.write_f32::<LittleEndian>(self.dropout_p as f32)?;
        for t in self.tensors() {
            for &v in t {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_blob(r: &mut impl Read) -> Result<Self> {
        let payload = r.read_u64::<LittleEndian>().map_err(|_| truncated())?;
        let d_in = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
        let hidden = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
        let d_out = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
        let dropout_p = f64::from(r.read_f32::<LittleEndian>().map_err(|_| truncated())?);
        let mut p = Self::zeros(d_in, hidden, d_out, dropout_p);
        let count: usize = p.tensors().iter().map(|t| t.len()).sum();
        if payload != 4 * 3 + 4 + 4 * count as u64 {
            return Err(Error::format(0, "projector blob length mismatch"));
        }
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from(r.read_f32::<LittleEndian>().map_err(|_| truncated())?);
            }
        }
        p.validate()?;
        Ok(p)
    }
}

fn truncated() -> Error {
    Error::format(0, "truncated projector blob")
}

/// Activations recorded by [`project`] for the matching [`backward`] call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Matrix,
    hidden_pre: Matrix,
    /// Dropout keep mask (row-major batch x hidden); `None` in eval mode
    /// or when dropout_p == 0.
    mask: Option<Vec<bool>>,
    dropout_p: f64,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.input.rows()
    }
}

/// Forward pass over a batch (rows of `f`). In training mode, inverted
/// dropout with probability `dropout_p` is applied to the hidden activation;
/// in eval mode the pass is a pure function of `(params, f)`.
pub fn project(
    params: &ProjectorParams,
    f: &Matrix,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Matrix, ForwardCache)> {
    params.validate()?;
    if f.cols() != params.d_in {
        return Err(Error::Validation(format!(
            "projector input dimension {} does not match d_in {}",
            f.cols(),
            params.d_in
        )));
    }
    let batch = f.rows();
    let mask: Option<Vec<bool>> = if training && params.dropout_p > 0.0 {
        // Drawn sequentially so parallel execution below stays deterministic.
        Some(
            (0..batch * params.hidden)
                .map(|_| rng.random::<f64>() >= params.dropout_p)
                .collect(),
        )
    } else {
        None
    };

    let mut out = Matrix::zeros(batch, params.d_out);
    let mut hidden_pre = Matrix::zeros(batch, params.hidden);
    let keep_scale = 1.0 / (1.0 - params.dropout_p);

    out.par_rows_mut()
        .zip(hidden_pre.par_rows_mut())
        .enumerate()
        .with_min_len(CHUNK)
        .for_each(|(k, (out_row, h_row))| {
            let x = f.row(k);
            params.w1.matvec(x, h_row);
            for (h, b) in h_row.iter_mut().zip(&params.b1) {
                *h += b;
            }
            let mut act: Vec<f64> = h_row.iter().map(|&h| silu(h)).collect();
            if let Some(mask) = &mask {
                for (j, a) in act.iter_mut().enumerate() {
                    *a = if mask[k * params.hidden + j] { *a * keep_scale } else { 0.0 };
                }
            }
            params.w2.matvec(&act, out_row);
            for (i, o) in out_row.iter_mut().enumerate() {
                let mut res = params.res_b[i];
                for (w, &xv) in params.res_w.row(i).iter().zip(x) {
                    res += w * xv;
                }
                *o += params.b2[i] + res;
            }
        });

    let cache = ForwardCache {
        input: f.clone(),
        hidden_pre,
        mask,
        dropout_p: params.dropout_p,
    };
    Ok((out, cache))
}

/// Per-parameter gradients, shaped like [`ProjectorParams`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub res_w: Matrix,
    pub res_b: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ProjectorParams) -> Self {
        ParamGrads {
            w1: Matrix::zeros(params.hidden, params.d_in),
            b1: vec![0.0; params.hidden],
            w2: Matrix::zeros(params.d_out, params.hidden),
            b2: vec![0.0; params.d_out],
            res_w: Matrix::zeros(params.d_out, params.d_in),
            res_b: vec![0.0; params.d_out],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.res_w.is_finite()
            && self.b1.iter().chain(&self.b2).chain(&self.res_b).all(|v| v.is_finite())
    }

    fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.data(),
            &self.b1,
            self.w2.data(),
            &self.b2,
            self.res_w.data(),
            &self.res_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
            self.res_w.data_mut(),
            &mut self.res_b,
        ]
    }

    fn merge(&mut self, other: &ParamGrads) {
        self.w1.add_assign(&other.w1);
        self.w2.add_assign(&other.w2);
        self.res_w.add_assign(&other.res_w);
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
        for (a, b) in self.res_b.iter_mut().zip(&other.res_b) {
            *a += b;
        }
    }
}

/// Backward pass: given `dL/df_proj`, return parameter gradients and
/// per-sample input gradients. The dropout mask recorded by the forward pass
/// is reused.
pub fn backward(
    params: &ProjectorParams,
    cache: &ForwardCache,
    grad_out: &Matrix,
) -> Result<(ParamGrads, Matrix)> {
    if cache.input.rows() != grad_out.rows()
        || grad_out.cols() != params.d_out
        || cache.input.cols() != params.d_in
        || cache.hidden_pre.cols() != params.hidden
        || cache.dropout_p != params.dropout_p
    {
        return Err(Error::Usage(
            "forward cache does not match these parameters and upstream gradients".into(),
        ));
    }
    let batch = grad_out.rows();
    let keep_scale = 1.0 / (1.0 - params.dropout_p);

    let mut grad_in = Matrix::zeros(batch, params.d_in);

    // Fixed-span chunks keep the reduction order independent of threading.
    let spans: Vec<(usize, usize)> = (0..batch)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(batch)))
        .collect();

    let partials: Vec<ParamGrads> = spans
        .par_iter()
        .zip(grad_in.data_mut().par_chunks_mut(CHUNK * params.d_in))
        .map(|(&(start, end), gin_chunk)| {
            let mut g = ParamGrads::zeros_like(params);
            let mut g_act = vec![0.0; params.hidden];
            let mut g_hidden = vec![0.0; params.hidden];
            for k in start..end {
                let x = cache.input.row(k);
                let go = grad_out.row(k);
                let h = cache.hidden_pre.row(k);

                g.res_w.add_outer(go, x);
                for (gb, &v) in g.res_b.iter_mut().zip(go) {
                    *gb += v;
                }

                // Dropped activation as seen by w2 in the forward pass.
                let act: Vec<f64> = h
                    .iter()
                    .enumerate()
                    .map(|(j, &hv)| {
                        let a = silu(hv);
                        match &cache.mask {
                            Some(m) => {
                                if m[k * params.hidden + j] {
                                    a * keep_scale
                                } else {
                                    0.0
                                }
                            }
                            None => a,
                        }
                    })
                    .collect();
                g.w2.add_outer(go, &act);
                for (gb, &v) in g.b2.iter_mut().zip(go) {
                    *gb += v;
                }

                g_act.iter_mut().for_each(|v| *v = 0.0);
                params.w2.matvec_t_add(go, &mut g_act);
                for (j, gh) in g_hidden.iter_mut().enumerate() {
                    let pass = match &cache.mask {
                        Some(m) => {
                            if m[k * params.hidden + j] {
                                keep_scale
                            } else {
                                0.0
                            }
                        }
                        None => 1.0,
                    };
                    *gh = g_act[j] * pass * silu_grad(h[j]);
                }
                g.w1.add_outer(&g_hidden, x);
                for (gb, &v) in g.b1.iter_mut().zip(&g_hidden) {
                    *gb += v;
                }

                let gin = &mut gin_chunk[(k - start) * params.d_in..(k - start + 1) * params.d_in];
                params.w1.matvec_t_add(&g_hidden, gin);
                params.res_w.matvec_t_add(go, gin);
            }
            g
        })
        .collect();

    let mut grads = ParamGrads::zeros_like(params);
    for p in &partials {
        grads.merge(p);
    }
    Ok((grads, grad_in))
}

/// Adam state with the exponential learning-rate schedule
/// `lr(e) = lr_start * (lr_end / lr_start)^(e / total_epochs)`.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub step: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_epochs: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ProjectorParams, lr_start: f64, lr_end: f64, total_epochs: u64) -> Result<Self> {
        if lr_start <= 0.0 || lr_end <= 0.0 {
            return Err(Error::Validation("learning-rate endpoints must be positive".into()));
        }
        if total_epochs == 0 {
            return Err(Error::Validation("total_epochs must be positive".into()));
        }
        Ok(OptimizerState {
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
            step: 0,
            lr_start,
            lr_end,
            total_epochs,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    /// Effective learning rate at a given epoch of the schedule.
    pub fn lr_at(&self, epoch: u64) -> f64 {
        let t = epoch as f64 / self.total_epochs as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}

/// One Adam update with bias correction. Non-finite gradients reject the
/// step and leave both parameters and state untouched.
pub fn adam_step(
    params: &mut ProjectorParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradients; step rejected".into()));
    }
    let lr = state.lr_at(state.step);
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);

    let mut p_t = params.tensors_mut();
    let mut m_t = state.m.tensors_mut();
    let mut v_t = state.v.tensors_mut();
    let g_t = grads.tensors();
    for i in 0..6 {
        let (p, m, v, g) = (&mut p_t[i], &mut m_t[i], &mut v_t[i], g_t[i]);
        debug_assert_eq!(p.len(), g.len());
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
