//! Single-layer LSTM controller, interface projection and output layer.
//!
//! All parameters live in one flat `f64` vector described by a [`Layout`],
//! which keeps optimizer updates, checkpointing and finite-difference checks
//! simple. Gate order inside the LSTM blocks is input, forget, cell, output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::la::{gemv_acc, gemv_t_acc, ger_acc};

/// Added to the softplus so the sharpness is strictly positive.
pub const BETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub input_size: usize,
    pub output_size: usize,
    pub hidden: usize,
    /// Zero disables the memory path entirely.
    pub heads: usize,
    pub word_size: usize,
    /// Emit three read-mode logits per head (content, forward, backward).
    pub read_modes: bool,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::config("input_size", "must be at least 1"));
        }
        if self.output_size == 0 {
            return Err(Error::config("output_size", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be at least 1"));
        }
        if self.heads > 0 && self.word_size == 0 {
            return Err(Error::config("word_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn read_size(&self) -> usize {
        self.heads * self.word_size
    }

    pub fn lstm_input(&self) -> usize {
        self.input_size + self.read_size()
    }

    /// Interface values per head: query, add word, α, γ, β and optional modes.
    pub fn head_interface(&self) -> usize {
        2 * self.word_size + 3 + if self.read_modes { 3 } else { 0 }
    }

    pub fn interface_size(&self) -> usize {
        self.heads * self.head_interface()
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub wx: usize,
    pub wh: usize,
    pub b: usize,
    pub iface_w: usize,
    pub iface_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub total: usize,
}

impl Layout {
    fn new(c: &ControllerConfig) -> Self {
        let g = 4 * c.hidden;
        let wx = 0;
        let wh = wx + g * c.lstm_input();
        let b = wh + g * c.hidden;
        let iface_w = b + g;
        let iface_b = iface_w + c.interface_size() * c.hidden;
        let out_w = iface_b + c.interface_size();
        let out_b = out_w + c.output_size * (c.hidden + c.read_size());
        Layout {
            wx,
            wh,
            b,
            iface_w,
            iface_b,
            out_w,
            out_b,
            total: out_b + c.output_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Activations saved by [`Controller::lstm_step`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    /// `[x_t; r_{t−1}]`
    pub z: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Post-activation gates `[i; f; g; o]`.
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadInterface {
    pub query: Vec<f64>,
    pub add: Vec<f64>,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Softmax over (content, forward, backward); `[1, 0, 0]` without modes.
    pub modes: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interface {
    pub heads: Vec<HeadInterface>,
    /// Pre-squash projection.
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadInterfaceGrad {
    pub d_query: Vec<f64>,
    pub d_add: Vec<f64>,
    pub d_alpha: f64,
    pub d_gamma: f64,
    pub d_beta: f64,
    pub d_modes: [f64; 3],
}

impl HeadInterfaceGrad {
    pub fn zeros(word_size: usize) -> Self {
        HeadInterfaceGrad {
            d_query: vec![0.0; word_size],
            d_add: vec![0.0; word_size],
            d_alpha: 0.0,
            d_gamma: 0.0,
            d_beta: 0.0,
            d_modes: [0.0; 3],
        }
    }
}

/// Gradients leaving [`Controller::lstm_backward`].
#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub d_x: Vec<f64>,
    pub d_r_prev: Vec<f64>,
    pub d_h_prev: Vec<f64>,
    pub d_c_prev: Vec<f64>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    config: ControllerConfig,
    layout: Layout,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Controller { config, layout })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Weights uniform in (−0.1, 0.1), zero biases, forget-gate bias 1.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let l = &self.layout;
        let hd = self.config.hidden;
        let mut p = vec![0.0; l.total];
        let weight_blocks = [(l.wx, l.b), (l.iface_w, l.iface_b), (l.out_w, l.out_b)];
        for (lo, hi) in weight_blocks {
            for v in &mut p[lo..hi] {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        p[l.b + hd..l.b + 2 * hd].fill(1.0);
        p
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        check_dim("controller params", self.layout.total, params.len())
    }

    pub fn lstm_step(
        &self,
        params: &[f64],
        state: &LstmState,
        x: &[f64],
        r_prev: &[f64],
    ) -> Result<(LstmState, LstmCache)> {
        self.check_params(params)?;
        let c = &self.config;
        check_dim("lstm input", c.input_size, x.len())?;
        check_dim("lstm read input", c.read_size(), r_prev.len())?;
        check_dim("lstm hidden", c.hidden, state.h.len())?;
        let (hd, zs, l) = (c.hidden, c.lstm_input(), &self.layout);
        let mut z = Vec::with_capacity(zs);
        z.extend_from_slice(x);
        z.extend_from_slice(r_prev);
        let mut gates = params[l.b..l.b + 4 * hd].to_vec();
        gemv_acc(&params[l.wx..l.wh], 4 * hd, zs, &z, &mut gates);
        gemv_acc(&params[l.wh..l.b], 4 * hd, hd, &state.h, &mut gates);
        for (k, g) in gates.iter_mut().enumerate() {
            *g = if k / hd == 2 { g.tanh() } else { sigmoid(*g) };
        }
        let mut next = LstmState::zeros(hd);
        let mut tanh_c = vec![0.0; hd];
        for j in 0..hd {
            let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
            next.c[j] = f * state.c[j] + i * g;
            tanh_c[j] = next.c[j].tanh();
            next.h[j] = o * tanh_c[j];
        }
        if next.c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lstm cell".into()));
        }
        Ok((
            next,
            LstmCache {
                z,
                h_prev: state.h.clone(),
                c_prev: state.c.clone(),
                gates,
                tanh_c,
            },
        ))
    }

    /// Backward through one cell. `d_h` is the total gradient reaching
    /// `h_t`, `d_c` the gradient reaching `c_t` from the next step.
    pub fn lstm_backward(
        &self,
        params: &[f64],
        cache: &LstmCache,
        d_h: &[f64],
        d_c: &[f64],
        grads: &mut [f64],
    ) -> Result<LstmGrads> {
        self.check_params(params)?;
        check_dim("controller grads", self.layout.total, grads.len())?;
        let c = &self.config;
        let (hd, zs, l) = (c.hidden, c.lstm_input(), &self.layout);
        check_dim("lstm d_h", hd, d_h.len())?;
        check_dim("lstm d_c", hd, d_c.len())?;
        let g = &cache.gates;
        let mut d_pre = vec![0.0; 4 * hd];
        let mut d_c_prev = vec![0.0; hd];
        for j in 0..hd {
            let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
            let tc = cache.tanh_c[j];
            let dc = d_c[j] + d_h[j] * o * (1.0 - tc * tc);
            let d_o = d_h[j] * tc;
            d_pre[j] = dc * gg * i * (1.0 - i);
            d_pre[hd + j] = dc * cache.c_prev[j] * f * (1.0 - f);
            d_pre[2 * hd + j] = dc * i * (1.0 - gg * gg);
            d_pre[3 * hd + j] = d_o * o * (1.0 - o);
            d_c_prev[j] = dc * f;
        }
        ger_acc(&mut grads[l.wx..l.wh], &d_pre, &cache.z);
        ger_acc(&mut grads[l.wh..l.b], &d_pre, &cache.h_prev);
        for (gb, d) in grads[l.b..l.b + 4 * hd].iter_mut().zip(&d_pre) {
            *gb += d;
        }
        let mut d_z = vec![0.0; zs];
        gemv_t_acc(&params[l.wx..l.wh], 4 * hd, zs, &d_pre, &mut d_z);
        let mut d_h_prev = vec![0.0; hd];
        gemv_t_acc(&params[l.wh..l.b], 4 * hd, hd, &d_pre, &mut d_h_prev);
        let d_r_prev = d_z.split_off(c.input_size);
        Ok(LstmGrads {
            d_x: d_z,
            d_r_prev,
            d_h_prev,
            d_c_prev,
        })
    }

    pub fn interface_project(&self, params: &[f64], h: &[f64]) -> Result<Interface> {
        self.check_params(params)?;
        let c = &self.config;
        check_dim("interface h", c.hidden, h.len())?;
        let l = &self.layout;
        let size = c.interface_size();
        let mut raw = params[l.iface_b..l.iface_b + size].to_vec();
        gemv_acc(&params[l.iface_w..l.iface_b], size, c.hidden, h, &mut raw);
        let (m, per) = (c.word_size, c.head_interface());
        let heads = (0..c.heads)
            .map(|k| {
                let s = &raw[k * per..(k + 1) * per];
                let modes = if c.read_modes {
                    let v = &s[2 * m + 3..2 * m + 6];
                    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e = [(v[0] - mx).exp(), (v[1] - mx).exp(), (v[2] - mx).exp()];
                    let z = e[0] + e[1] + e[2];
                    [e[0] / z, e[1] / z, e[2] / z]
                } else {
                    [1.0, 0.0, 0.0]
                };
                HeadInterface {
                    query: s[..m].to_vec(),
                    add: s[m..2 * m].to_vec(),
                    alpha: sigmoid(s[2 * m]),
                    gamma: sigmoid(s[2 * m + 1]),
                    beta: softplus(s[2 * m + 2]) + BETA_FLOOR,
                    modes,
                }
            })
            .collect();
        Ok(Interface { heads, raw })
    }

    /// Backward through the squashings and the projection; returns `dL/dh`.
    pub fn interface_backward(
        &self,
        params: &[f64],
        h: &[f64],
        iface: &Interface,
        d_iface: &[HeadInterfaceGrad],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let c = &self.config;
        check_dim("interface heads", c.heads, d_iface.len())?;
        let (m, per, l) = (c.word_size, c.head_interface(), &self.layout);
        let mut d_raw = vec![0.0; c.interface_size()];
        for (k, (hi, dg)) in iface.heads.iter().zip(d_iface).enumerate() {
            let s = &mut d_raw[k * per..(k + 1) * per];
            s[..m].copy_from_slice(&dg.d_query);
            s[m..2 * m].copy_from_slice(&dg.d_add);
            s[2 * m] = dg.d_alpha * hi.alpha * (1.0 - hi.alpha);
            s[2 * m + 1] = dg.d_gamma * hi.gamma * (1.0 - hi.gamma);
            s[2 * m + 2] = dg.d_beta * sigmoid(iface.raw[k * per + 2 * m + 2]);
            if c.read_modes {
                let p = hi.modes;
                let dot: f64 = (0..3).map(|j| p[j] * dg.d_modes[j]).sum();
                for j in 0..3 {
                    s[2 * m + 3 + j] = p[j] * (dg.d_modes[j] - dot);
                }
            }
        }
        ger_acc(&mut grads[l.iface_w..l.iface_b], &d_raw, h);
        for (gb, d) in grads[l.iface_b..l.out_w].iter_mut().zip(&d_raw) {
            *gb += d;
        }
        let mut d_h = vec![0.0; c.hidden];
        gemv_t_acc(&params[l.iface_w..l.iface_b], d_raw.len(), c.hidden, &d_raw, &mut d_h);
        Ok(d_h)
    }

    /// `y = W_y [h; r] + b_y`.
    pub fn output_combine(&self, params: &[f64], h: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let c = &self.config;
        check_dim("output h", c.hidden, h.len())?;
        check_dim("output r", c.read_size(), r.len())?;
        let l = &self.layout;
        let cols = c.hidden + c.read_size();
        let mut y = params[l.out_b..l.total].to_vec();
        let w = &params[l.out_w..l.out_b];
        for (row, yk) in y.iter_mut().enumerate() {
            let wr = &w[row * cols..(row + 1) * cols];
            *yk += crate::la::dot(&wr[..c.hidden], h) + crate::la::dot(&wr[c.hidden..], r);
        }
        Ok(y)
    }

    /// Returns `(dL/dh, dL/dr)`.
    pub fn output_backward(
        &self,
        params: &[f64],
        h: &[f64],
        r: &[f64],
        d_y: &[f64],
        grads: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_params(params)?;
        let c = &self.config;
        check_dim("output d_y", c.output_size, d_y.len())?;
        let l = &self.layout;
        let cols = c.hidden + c.read_size();
        let mut hr = Vec::with_capacity(cols);
        hr.extend_from_slice(h);
        hr.extend_from_slice(r);
        ger_acc(&mut grads[l.out_w..l.out_b], d_y, &hr);
        for (gb, d) in grads[l.out_b..l.total].iter_mut().zip(d_y) {
            *gb += d;
        }
        let mut d_hr = vec![0.0; cols];
        gemv_t_acc(&params[l.out_w..l.out_b], c.output_size, cols, d_y, &mut d_hr);
        let d_r = d_hr.split_off(c.hidden);
        Ok((d_hr, d_r))
    }
}
