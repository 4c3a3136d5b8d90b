//! Conditional noise predictor `eps_theta(x_k, k, y)`.
//!
//! A residual MLP over `[x_k | time embedding | condition embedding]`. The
//! condition embedding comes from a small feed-forward encoder of the scaled
//! condition vector, or from a learned null token for `y = none`. Parameters
//! live in one flat `f64` buffer with a named layout; reverse-mode gradients
//! are written by hand.

mod adam;
pub mod train;

pub use adam::Adam;
pub use train::{
    diffusion_loss, train_vanilla, train_with_objective, BatchItem, EpochLog, LossDraws, LossOutput,
    Objective, TrainConfig, TrainMode, TrainOutput,
};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::problems::{ProblemKind, ProblemParams, DECISION_DIM};
use crate::rng::rng_for;

/// Named width presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchProfile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub profile: ArchProfile,
    pub time_embed_dim: usize,
    /// Condition encoder widths; the last is the embedding size.
    pub cond_widths: Vec<usize>,
    /// Trunk widths. Consecutive equal widths get a residual connection.
    pub trunk_widths: Vec<usize>,
}

impl Architecture {
    pub fn desk() -> Self {
        Self {
            profile: ArchProfile::Desk,
            time_embed_dim: 32,
            cond_widths: vec![128, 128],
            trunk_widths: vec![256, 256, 256],
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: ArchProfile::Paper,
            time_embed_dim: 32,
            cond_widths: vec![256, 512],
            trunk_widths: vec![512, 512, 1024],
        }
    }

    pub fn for_profile(profile: ArchProfile) -> Self {
        match profile {
            ArchProfile::Desk => Self::desk(),
            ArchProfile::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding dimension must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        if self.cond_widths.is_empty() || self.trunk_widths.is_empty() {
            return Err(Error::Config("encoder and trunk need at least one layer".into()));
        }
        if self.cond_widths.iter().chain(&self.trunk_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn cond_dim(&self) -> usize {
        *self.cond_widths.last().unwrap()
    }

    fn trunk_input(&self) -> usize {
        DECISION_DIM + self.time_embed_dim + self.cond_dim()
    }
}

/// Sinusoidal step features `[sin(k f_i) | cos(k f_i)]` with frequencies
/// `f_i = 10^(-4 i / (dim/2 - 1))`, spanning `[1e-4, 1]`.
pub fn time_embedding(k: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dimension must be even, got {dim}")));
    }
    let mut out = vec![0.0; dim];
    write_time_embedding(k, &mut out);
    Ok(out)
}

fn write_time_embedding(k: usize, out: &mut [f64]) {
    let half = out.len() / 2;
    for i in 0..half {
        let f = if half == 1 {
            1.0
        } else {
            10_000f64.powf(-(i as f64) / (half - 1) as f64)
        };
        let (s, c) = (k as f64 * f).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Indices into the layout for one dense layer.
#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<TensorSpec>,
    cond: Vec<Dense>,
    null_token: usize,
    trunk: Vec<Dense>,
    out: Dense,
    len: usize,
}

impl Layout {
    fn new(arch: &Architecture, cond_in: usize) -> Self {
        let mut specs = Vec::new();
        let mut len = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            specs.push(TensorSpec {
                name,
                shape,
                offset: len,
            });
            len += n;
            specs.len() - 1
        };
        let mut cond = Vec::new();
        let mut fan_in = cond_in;
        for (i, &w) in arch.cond_widths.iter().enumerate() {
            cond.push(Dense {
                w: push(format!("cond.{i}.weight"), vec![fan_in, w]),
                b: push(format!("cond.{i}.bias"), vec![w]),
            });
            fan_in = w;
        }
        let null_token = push("cond.null_token".into(), vec![arch.cond_dim()]);
        let mut trunk = Vec::new();
        let mut fan_in = arch.trunk_input();
        for (i, &w) in arch.trunk_widths.iter().enumerate() {
            trunk.push(Dense {
                w: push(format!("trunk.{i}.weight"), vec![fan_in, w]),
                b: push(format!("trunk.{i}.bias"), vec![w]),
            });
            fan_in = w;
        }
        let out = Dense {
            w: push("out.weight".into(), vec![fan_in, DECISION_DIM]),
            b: push("out.bias".into(), vec![DECISION_DIM]),
        };
        Self {
            specs,
            cond,
            null_token,
            trunk,
            out,
            len,
        }
    }

    fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let s = &self.specs[idx];
        s.offset..s.offset + s.len()
    }
}

fn view2<'a>(buf: &'a [f64], spec: &TensorSpec) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((spec.shape[0], spec.shape[1]), &buf[spec.offset..spec.offset + spec.len()])
        .expect("layout shape")
}

fn view1<'a>(buf: &'a [f64], spec: &TensorSpec) -> ArrayView1<'a, f64> {
    ArrayView1::from(&buf[spec.offset..spec.offset + spec.len()])
}

fn view2_mut<'a>(buf: &'a mut [f64], spec: &TensorSpec) -> ArrayViewMut2<'a, f64> {
    let n = spec.len();
    ArrayViewMut2::from_shape((spec.shape[0], spec.shape[1]), &mut buf[spec.offset..spec.offset + n])
        .expect("layout shape")
}

fn view1_mut<'a>(buf: &'a mut [f64], spec: &TensorSpec) -> ArrayViewMut1<'a, f64> {
    let n = spec.len();
    ArrayViewMut1::from(&mut buf[spec.offset..spec.offset + n])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Activations kept for the backward pass.
pub(crate) struct Cache {
    null_rows: Vec<bool>,
    /// Encoder layer inputs (`cond_acts[0]` is the scaled condition) and
    /// pre-activations. Empty when every row is null.
    cond_acts: Vec<Array2<f64>>,
    cond_pre: Vec<Array2<f64>>,
    trunk_in: Array2<f64>,
    /// `trunk_h[l]` is the input of trunk layer `l + 1`.
    trunk_h: Vec<Array2<f64>>,
    trunk_pre: Vec<Array2<f64>>,
}

/// The trainable noise predictor for one problem kind.
#[derive(Debug, Clone)]
pub struct Denoiser {
    kind: ProblemKind,
    arch: Architecture,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for Denoiser {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.arch == other.arch && self.params == other.params
    }
}

const INIT_STREAM: u64 = 0x1417;

impl Denoiser {
    /// Fresh weights: fan-in scaled uniform for hidden layers, zeros for
    /// biases and for the output layer.
    pub fn new(kind: ProblemKind, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, kind.condition_dim());
        let mut params = vec![0.0; layout.len];
        let mut rng = rng_for(seed, &[INIT_STREAM]);
        let hidden = layout.cond.iter().chain(&layout.trunk);
        for d in hidden {
            let fan_in = layout.specs[d.w].shape[0] as f64;
            let a = 1.0 / fan_in.sqrt();
            for v in &mut params[layout.range(d.w)] {
                *v = rng.random_range(-a..a);
            }
        }
        let a = 1.0 / (arch.cond_dim() as f64).sqrt();
        for v in &mut params[layout.range(layout.null_token)] {
            *v = rng.random_range(-a..a);
        }
        Ok(Self {
            kind,
            arch,
            layout,
            params,
        })
    }

    /// Rebuilds a model from named tensors; names and shapes must match the
    /// layout of `arch`.
    pub fn from_tensors(kind: ProblemKind, arch: Architecture, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, kind.condition_dim());
        if tensors.len() != layout.specs.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                layout.specs.len(),
                tensors.len()
            )));
        }
        let mut params = vec![0.0; layout.len];
        for (spec, (name, shape, data)) in layout.specs.iter().zip(tensors) {
            if &spec.name != name || &spec.shape != shape || data.len() != spec.len() {
                return Err(Error::Config(format!(
                    "tensor {name} {shape:?} does not match layout entry {} {:?}",
                    spec.name, spec.shape
                )));
            }
            params[spec.offset..spec.offset + spec.len()].copy_from_slice(data);
        }
        Ok(Self {
            kind,
            arch,
            layout,
            params,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensor_specs(&self) -> &[TensorSpec] {
        &self.layout.specs
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Rounds every weight to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.params {
            *v = *v as f32 as f64;
        }
    }

    fn check_condition(&self, c: Option<&ProblemParams>) -> Result<()> {
        if let Some(p) = c {
            if p.kind != self.kind {
                return Err(Error::Config(format!(
                    "condition is a {} instance but the model is for {}",
                    p.kind, self.kind
                )));
            }
        }
        Ok(())
    }

    /// Condition embedding; `None` yields the null token.
    pub fn encode_condition(&self, condition: Option<&ProblemParams>) -> Result<Vec<f64>> {
        self.check_condition(condition)?;
        let (_, cache) = self.forward_cached(&vec![0.0; DECISION_DIM], &[1], &[condition]);
        let cond = cache.trunk_in.slice(s![0, DECISION_DIM + self.arch.time_embed_dim..]);
        Ok(cond.to_vec())
    }

    /// Noise prediction for a single vector.
    pub fn forward(&self, x_k: &[f64], k: usize, condition: Option<&ProblemParams>) -> Result<Vec<f64>> {
        self.forward_batch(x_k, &[k], &[condition])
    }

    /// Noise predictions for stacked rows with per-row steps and conditions.
    pub fn forward_batch(&self, x: &[f64], ks: &[usize], conds: &[Option<&ProblemParams>]) -> Result<Vec<f64>> {
        self.check_batch(x, ks, conds)?;
        let (out, _) = self.forward_cached(x, ks, conds);
        Ok(out.into_raw_vec_and_offset().0)
    }

    pub(crate) fn check_batch(&self, x: &[f64], ks: &[usize], conds: &[Option<&ProblemParams>]) -> Result<()> {
        if x.len() != ks.len() * DECISION_DIM {
            return Err(Error::Shape {
                expected: ks.len() * DECISION_DIM,
                got: x.len(),
            });
        }
        if conds.len() != ks.len() {
            return Err(Error::Shape {
                expected: ks.len(),
                got: conds.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericInput(format!(
                "x_k component {} of row {} is not finite",
                i % DECISION_DIM,
                i / DECISION_DIM
            )));
        }
        for c in conds {
            self.check_condition(*c)?;
            if let Some(p) = c {
                p.validate()?;
            }
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: &[f64], ks: &[usize], conds: &[Option<&ProblemParams>]) -> (Array2<f64>, Cache) {
        let p = &self.params;
        let l = &self.layout;
        let rows = ks.len();
        let t_dim = self.arch.time_embed_dim;
        let c_dim = self.arch.cond_dim();
        let null_rows: Vec<bool> = conds.iter().map(|c| c.is_none()).collect();

        let mut cond_acts = Vec::new();
        let mut cond_pre = Vec::new();
        let mut cemb = Array2::<f64>::zeros((rows, c_dim));
        if null_rows.iter().any(|n| !n) {
            let cin = self.kind.condition_dim();
            let mut a = Array2::<f64>::zeros((rows, cin));
            for (r, c) in conds.iter().enumerate() {
                if let Some(params) = c {
                    for (j, v) in params.scaled_condition().into_iter().enumerate() {
                        a[[r, j]] = v;
                    }
                }
            }
            let last = l.cond.len() - 1;
            for (i, d) in l.cond.iter().enumerate() {
                let w = view2(p, &l.specs[d.w]);
                let mut pre = Array2::<f64>::zeros((rows, w.ncols()));
                pre += &view1(p, &l.specs[d.b]);
                general_mat_mul(1.0, &a, &w, 1.0, &mut pre);
                let next = if i < last { pre.mapv(silu) } else { pre.clone() };
                cond_acts.push(a);
                cond_pre.push(pre);
                a = next;
            }
            cemb = a;
        }
        let null = view1(p, &l.specs[l.null_token]);
        for (r, &is_null) in null_rows.iter().enumerate() {
            if is_null {
                cemb.row_mut(r).assign(&null);
            }
        }

        let mut trunk_in = Array2::<f64>::zeros((rows, self.arch.trunk_input()));
        trunk_in
            .slice_mut(s![.., ..DECISION_DIM])
            .assign(&ArrayView2::from_shape((rows, DECISION_DIM), x).expect("batch shape"));
        for (r, &k) in ks.iter().enumerate() {
            let mut row = trunk_in.row_mut(r);
            let temb = row.slice_mut(s![DECISION_DIM..DECISION_DIM + t_dim]);
            write_time_embedding(k, temb.into_slice().expect("contiguous row"));
        }
        trunk_in.slice_mut(s![.., DECISION_DIM + t_dim..]).assign(&cemb);

        let mut trunk_h = Vec::with_capacity(l.trunk.len());
        let mut trunk_pre = Vec::with_capacity(l.trunk.len());
        for (i, d) in l.trunk.iter().enumerate() {
            let w = view2(p, &l.specs[d.w]);
            let input = if i == 0 { &trunk_in } else { &trunk_h[i - 1] };
            let mut pre = Array2::<f64>::zeros((rows, w.ncols()));
            pre += &view1(p, &l.specs[d.b]);
            general_mat_mul(1.0, input, &w, 1.0, &mut pre);
            let mut h = pre.mapv(silu);
            if self.residual(i) {
                h += input;
            }
            trunk_pre.push(pre);
            trunk_h.push(h);
        }
        let last = trunk_h.last().unwrap();
        let wo = view2(p, &l.specs[l.out.w]);
        let mut out = Array2::<f64>::zeros((rows, DECISION_DIM));
        out += &view1(p, &l.specs[l.out.b]);
        general_mat_mul(1.0, last, &wo, 1.0, &mut out);
        let cache = Cache {
            null_rows,
            cond_acts,
            cond_pre,
            trunk_in,
            trunk_h,
            trunk_pre,
        };
        (out, cache)
    }

    fn residual(&self, i: usize) -> bool {
        i > 0 && self.arch.trunk_widths[i] == self.arch.trunk_widths[i - 1]
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
    pub(crate) fn backward(&self, cache: &Cache, d_out: &Array2<f64>, grad: &mut [f64]) {
        let p = &self.params;
        let l = &self.layout;
        let t_dim = self.arch.time_embed_dim;

        let last = cache.trunk_h.last().unwrap();
        general_mat_mul(1.0, &last.t(), d_out, 1.0, &mut view2_mut(grad, &l.specs[l.out.w]));
        view1_mut(grad, &l.specs[l.out.b]).scaled_add(1.0, &d_out.sum_axis(Axis(0)));
        let mut dh = d_out.dot(&view2(p, &l.specs[l.out.w]).t());

        let mut d_trunk_in = None;
        for i in (0..l.trunk.len()).rev() {
            let d = l.trunk[i];
            let mut dpre = cache.trunk_pre[i].mapv(silu_grad);
            dpre *= &dh;
            let input = if i == 0 { &cache.trunk_in } else { &cache.trunk_h[i - 1] };
            general_mat_mul(1.0, &input.t(), &dpre, 1.0, &mut view2_mut(grad, &l.specs[d.w]));
            view1_mut(grad, &l.specs[d.b]).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
            let w = view2(p, &l.specs[d.w]);
            if i == 0 {
                let wc = w.slice(s![DECISION_DIM + t_dim.., ..]);
                d_trunk_in = Some(dpre.dot(&wc.t()));
            } else {
                let mut dprev = dpre.dot(&w.t());
                if self.residual(i) {
                    dprev += &dh;
                }
                dh = dprev;
            }
        }
        let mut dc = d_trunk_in.expect("trunk has a first layer");

        let mut d_null = view1_mut(grad, &l.specs[l.null_token]);
        for (r, &is_null) in cache.null_rows.iter().enumerate() {
            if is_null {
                d_null += &dc.row(r);
                dc.row_mut(r).fill(0.0);
            }
        }
        if cache.cond_acts.is_empty() {
            return;
        }
        let n_cond = l.cond.len();
        for i in (0..n_cond).rev() {
            let d = l.cond[i];
            let dpre = if i == n_cond - 1 {
                dc
            } else {
                let mut g = cache.cond_pre[i].mapv(silu_grad);
                g *= &dc;
                g
            };
            general_mat_mul(1.0, &cache.cond_acts[i].t(), &dpre, 1.0, &mut view2_mut(grad, &l.specs[d.w]));
            view1_mut(grad, &l.specs[d.b]).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
            if i == 0 {
                break;
            }
            dc = dpre.dot(&view2(p, &l.specs[d.w]).t());
        }
    }
}

impl NoisePredictor for Denoiser {
    fn kind(&self) -> ProblemKind {
        self.kind
    }

    fn predict(&self, x: &[f64], rows: usize, k: usize, condition: Option<&ProblemParams>) -> Result<Vec<f64>> {
        let ks = vec![k; rows];
        let conds = vec![condition; rows];
        self.forward_batch(x, &ks, &conds)
    }
}
