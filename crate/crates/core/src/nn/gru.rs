//! Gated recurrent unit with full-sequence unroll and backpropagation
//! through time. Gate order in the stacked weights is (reset, update, new).
//!
//! r = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h

use rand::Rng;

use crate::error::{ensure, Result};

use super::gemm::gemm;
use super::ops::sigmoid_scalar;
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

/// Saved activations for the backward pass.
#[derive(Clone, Debug)]
pub struct GruCache {
    batch: usize,
    steps: usize,
    x: Tensor,
    /// Hidden state before each step, `[T][B*H]`.
    h_prev: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    /// W_hn h + b_hn per step.
    hn: Vec<Vec<f64>>,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        Self {
            input,
            hidden,
            w_ih: ps.add(format!("{name}.w_ih"), Tensor::uniform(&[3 * hidden, input], -k, k, rng)),
            w_hh: ps.add(format!("{name}.w_hh"), Tensor::uniform(&[3 * hidden, hidden], -k, k, rng)),
            b_ih: ps.add(format!("{name}.b_ih"), Tensor::zeros(&[3 * hidden])),
            b_hh: ps.add(format!("{name}.b_hh"), Tensor::zeros(&[3 * hidden])),
        }
    }

    /// Run over `x: [B, T, I]` from a zero state; returns `[B, T, H]`.
    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<(Tensor, GruCache)> {
        ensure!(x.rank() == 3, Contract, "gru input must be [B, T, I], got {:?}", x.shape());
        let (b, t, i) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        ensure!(i == self.input, Contract, "gru input width {i} != {}", self.input);
        let h = self.hidden;
        let (w_ih, w_hh) = (ps.get(self.w_ih), ps.get(self.w_hh));
        let (b_ih, b_hh) = (ps.get(self.b_ih).data(), ps.get(self.b_hh).data());

        // Input projections for every (batch, step) at once: [B*T, 3H].
        let mut gi = vec![0.0; b * t * 3 * h];
        for row in gi.chunks_mut(3 * h) {
            row.copy_from_slice(b_ih);
        }
        gemm(b * t, i, 3 * h, 1.0, x.data(), false, w_ih.data(), true, 1.0, &mut gi);

        let mut out = vec![0.0; b * t * h];
        let mut cache = GruCache {
            batch: b,
            steps: t,
            x: x.clone(),
            h_prev: Vec::with_capacity(t),
            r: Vec::with_capacity(t),
            z: Vec::with_capacity(t),
            n: Vec::with_capacity(t),
            hn: Vec::with_capacity(t),
        };
        let mut state = vec![0.0; b * h];
        let mut gh = vec![0.0; b * 3 * h];
        for step in 0..t {
            for row in gh.chunks_mut(3 * h) {
                row.copy_from_slice(b_hh);
            }
            gemm(b, h, 3 * h, 1.0, &state, false, w_hh.data(), true, 1.0, &mut gh);
            let mut r = vec![0.0; b * h];
            let mut z = vec![0.0; b * h];
            let mut n = vec![0.0; b * h];
            let mut hn = vec![0.0; b * h];
            let mut next = vec![0.0; b * h];
            for bi in 0..b {
                let gi_row = &gi[(bi * t + step) * 3 * h..(bi * t + step + 1) * 3 * h];
                let gh_row = &gh[bi * 3 * h..(bi + 1) * 3 * h];
                for j in 0..h {
                    let k = bi * h + j;
                    r[k] = sigmoid_scalar(gi_row[j] + gh_row[j]);
                    z[k] = sigmoid_scalar(gi_row[h + j] + gh_row[h + j]);
                    hn[k] = gh_row[2 * h + j];
                    n[k] = (gi_row[2 * h + j] + r[k] * hn[k]).tanh();
                    next[k] = (1.0 - z[k]) * n[k] + z[k] * state[k];
                    out[(bi * t + step) * h + j] = next[k];
                }
            }
            cache.h_prev.push(std::mem::replace(&mut state, next));
            cache.r.push(r);
            cache.z.push(z);
            cache.n.push(n);
            cache.hn.push(hn);
        }
        Ok((Tensor::from_vec(&[b, t, h], out)?, cache))
    }

    /// Backward through time. Accumulates parameter gradients into `grads`
    /// and returns the input gradient `[B, T, I]`.
    pub fn backward(&self, ps: &ParamSet, cache: &GruCache, dy: &Tensor, grads: &mut ParamSet) -> Result<Tensor> {
        let (b, t, h, i) = (cache.batch, cache.steps, self.hidden, self.input);
        ensure!(dy.shape() == [b, t, h], Contract, "gru output gradient shape {:?}", dy.shape());
        let (w_ih, w_hh) = (ps.get(self.w_ih), ps.get(self.w_hh));
        let mut d_gi = vec![0.0; b * t * 3 * h];
        let mut dw_hh = vec![0.0; 3 * h * h];
        let mut db_hh = vec![0.0; 3 * h];
        let mut dh_next = vec![0.0; b * h];
        let mut d_gh = vec![0.0; b * 3 * h];
        for step in (0..t).rev() {
            let (r, z, n, hn, hp) = (
                &cache.r[step],
                &cache.z[step],
                &cache.n[step],
                &cache.hn[step],
                &cache.h_prev[step],
            );
            let mut dh_prev = vec![0.0; b * h];
            for bi in 0..b {
                let gi_row = &mut d_gi[(bi * t + step) * 3 * h..(bi * t + step + 1) * 3 * h];
                let gh_row = &mut d_gh[bi * 3 * h..(bi + 1) * 3 * h];
                for j in 0..h {
                    let k = bi * h + j;
                    let dh = dy.data()[(bi * t + step) * h + j] + dh_next[k];
                    let dn = dh * (1.0 - z[k]);
                    let dz = dh * (hp[k] - n[k]);
                    dh_prev[k] = dh * z[k];
                    let dn_pre = dn * (1.0 - n[k] * n[k]);
                    let dr = dn_pre * hn[k];
                    let dr_pre = dr * r[k] * (1.0 - r[k]);
                    let dz_pre = dz * z[k] * (1.0 - z[k]);
                    gi_row[j] = dr_pre;
                    gi_row[h + j] = dz_pre;
                    gi_row[2 * h + j] = dn_pre;
                    gh_row[j] = dr_pre;
                    gh_row[h + j] = dz_pre;
                    gh_row[2 * h + j] = dn_pre * r[k];
                }
            }
            // dW_hh += d_gh^T h_prev ; dh_prev += d_gh W_hh
            gemm(3 * h, b, h, 1.0, &d_gh, true, hp, false, 1.0, &mut dw_hh);
            for row in d_gh.chunks(3 * h) {
                for (a, g) in db_hh.iter_mut().zip(row) {
                    *a += g;
                }
            }
            gemm(b, 3 * h, h, 1.0, &d_gh, false, w_hh.data(), false, 1.0, &mut dh_prev);
            dh_next = dh_prev;
        }
        let mut dw_ih = vec![0.0; 3 * h * i];
        gemm(3 * h, b * t, i, 1.0, &d_gi, true, cache.x.data(), false, 0.0, &mut dw_ih);
        let mut db_ih = vec![0.0; 3 * h];
        for row in d_gi.chunks(3 * h) {
            for (a, g) in db_ih.iter_mut().zip(row) {
                *a += g;
            }
        }
        let mut dx = vec![0.0; b * t * i];
        gemm(b * t, 3 * h, i, 1.0, &d_gi, false, w_ih.data(), false, 0.0, &mut dx);

        grads.accumulate(self.w_ih, &Tensor::from_vec(&[3 * h, i], dw_ih)?)?;
        grads.accumulate(self.w_hh, &Tensor::from_vec(&[3 * h, h], dw_hh)?)?;
        grads.accumulate(self.b_ih, &Tensor::from_vec(&[3 * h], db_ih)?)?;
        grads.accumulate(self.b_hh, &Tensor::from_vec(&[3 * h], db_hh)?)?;
        Tensor::from_vec(&[b, t, i], dx)
    }
}

/// Reverse the time axis of `[B, T, F]`.
pub fn reverse_time(x: &Tensor) -> Tensor {
    let (b, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..b {
        for s in 0..t {
            let src = (bi * t + s) * f;
            let dst = (bi * t + (t - 1 - s)) * f;
            out.data_mut()[dst..dst + f].copy_from_slice(&x.data()[src..src + f]);
        }
    }
    out
}

/// Forward and reverse GRUs with outputs concatenated to `[B, T, 2H]`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

#[derive(Clone, Debug)]
pub struct BiGruCache {
    fwd: GruCache,
    bwd: GruCache,
}

impl BiGru {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fwd: Gru::new(ps, &format!("{name}.fwd"), input, hidden, rng),
            bwd: Gru::new(ps, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_width(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<(Tensor, BiGruCache)> {
        let (yf, cf) = self.fwd.forward(ps, x)?;
        let (yb_rev, cb) = self.bwd.forward(ps, &reverse_time(x))?;
        let yb = reverse_time(&yb_rev);
        let (b, t, h) = (yf.shape()[0], yf.shape()[1], yf.shape()[2]);
        let mut out = Vec::with_capacity(b * t * 2 * h);
        for (rf, rb) in yf.data().chunks(h).zip(yb.data().chunks(h)) {
            out.extend_from_slice(rf);
            out.extend_from_slice(rb);
        }
        Ok((Tensor::from_vec(&[b, t, 2 * h], out)?, BiGruCache { fwd: cf, bwd: cb }))
    }

    pub fn backward(&self, ps: &ParamSet, cache: &BiGruCache, dy: &Tensor, grads: &mut ParamSet) -> Result<Tensor> {
        let (b, t) = (cache.fwd.batch, cache.fwd.steps);
        let h = self.fwd.hidden;
        ensure!(dy.shape() == [b, t, 2 * h], Contract, "bigru output gradient shape {:?}", dy.shape());
        let mut df = Vec::with_capacity(b * t * h);
        let mut db = Vec::with_capacity(b * t * h);
        for row in dy.data().chunks(2 * h) {
            df.extend_from_slice(&row[..h]);
            db.extend_from_slice(&row[h..]);
        }
        let dxf = self.fwd.backward(ps, &cache.fwd, &Tensor::from_vec(&[b, t, h], df)?, grads)?;
        let db_rev = reverse_time(&Tensor::from_vec(&[b, t, h], db)?);
        let dxb = reverse_time(&self.bwd.backward(ps, &cache.bwd, &db_rev, grads)?);
        let mut dx = dxf;
        dx.add_assign(&dxb)?;
        Ok(dx)
    }
}
