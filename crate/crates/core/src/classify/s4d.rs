use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{ClassifyError, ClassifyResult};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct S4dConfig {
    pub n_layers: usize,
    /// Feature channels per time step.
    pub d_input: usize,
    /// Hidden width H.
    pub d_model: usize,
    /// Diagonal state size N per hidden channel.
    pub d_state: usize,
    pub dropout: f64,
    pub bidirectional: bool,
    pub n_classes: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for S4dConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            d_input: 0,
            d_model: 64,
            d_state: 32,
            dropout: 0.2,
            bidirectional: true,
            n_classes: 3,
            dt_min: 0.001,
            dt_max: 0.1,
        }
    }
}

impl S4dConfig {
    pub fn validate(&self) -> ClassifyResult<()> {
        let bad = |m: String| Err(ClassifyError::Config(m));
        if self.n_layers == 0 || self.d_input == 0 || self.d_model == 0 || self.d_state == 0 {
            return bad("layer count and all widths must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least two classes, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return bad(format!("bad timestep range [{}, {}]", self.dt_min, self.dt_max));
        }
        Ok(())
    }

    pub fn n_directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }
}

/// Parameters of one diagonal SSM running in one time direction.
#[derive(Debug, Clone, PartialEq)]
pub struct S4dDirection {
    /// `[H]`.
    pub log_dt: Array1<f64>,
    /// `[H × N]`; Re(A) = -softplus(a_re_raw).
    pub a_re_raw: Array2<f64>,
    pub a_im: Array2<f64>,
    pub b_re: Array2<f64>,
    pub b_im: Array2<f64>,
    pub c_re: Array2<f64>,
    pub c_im: Array2<f64>,
    /// `[H]` skip term.
    pub d: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct S4dLayer {
    pub dirs: Vec<S4dDirection>,
    /// `[H × directions·H]`.
    pub mix_w: Array2<f64>,
    pub mix_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct S4dModel {
    pub config: S4dConfig,
    /// `[H × d_input]`.
    pub enc_w: Array2<f64>,
    pub enc_b: Array1<f64>,
    pub layers: Vec<S4dLayer>,
    /// `[n_classes × H]`.
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Stable softmax of a logit vector.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

impl S4dDirection {
    fn zeros(h: usize, n: usize) -> Self {
        Self {
            log_dt: Array1::zeros(h),
            a_re_raw: Array2::zeros((h, n)),
            a_im: Array2::zeros((h, n)),
            b_re: Array2::zeros((h, n)),
            b_im: Array2::zeros((h, n)),
            c_re: Array2::zeros((h, n)),
            c_im: Array2::zeros((h, n)),
            d: Array1::zeros(h),
        }
    }

    fn a(&self, h: usize, n: usize) -> Complex64 {
        Complex64::new(-softplus(self.a_re_raw[(h, n)]), self.a_im[(h, n)])
    }

    fn dt(&self, h: usize) -> f64 {
        self.log_dt[h].exp()
    }

    /// Zero-order-hold discretization: (Ā, B̄, C) per `(h, n)`.
    pub fn discretize(&self) -> (Array2<Complex64>, Array2<Complex64>, Array2<Complex64>) {
        let (h, n) = self.a_re_raw.dim();
        let mut abar = Array2::zeros((h, n));
        let mut bbar = Array2::zeros((h, n));
        let mut c = Array2::zeros((h, n));
        for i in 0..h {
            let dt = self.dt(i);
            for j in 0..n {
                let a = self.a(i, j);
                let e = (a * dt).exp();
                abar[(i, j)] = e;
                bbar[(i, j)] = (e - 1.0) / a * Complex64::new(self.b_re[(i, j)], self.b_im[(i, j)]);
                c[(i, j)] = Complex64::new(self.c_re[(i, j)], self.c_im[(i, j)]);
            }
        }
        (abar, bbar, c)
    }

    /// `K[h, l] = Re Σ_n C_n B̄_n exp(l·Δ·A_n)` for `l < t`.
    pub fn kernel(&self, t: usize) -> Array2<f64> {
        let (h, n) = self.a_re_raw.dim();
        let (_, bbar, c) = self.discretize();
        let mut k = Array2::zeros((h, t));
        for i in 0..h {
            let dt = self.dt(i);
            for j in 0..n {
                let dta = self.a(i, j) * dt;
                let z = dta.exp();
                let mut v = c[(i, j)] * bbar[(i, j)];
                for l in 0..t {
                    k[(i, l)] += v.re;
                    v *= z;
                }
            }
        }
        k
    }

    /// Accumulate parameter gradients given `∂L/∂K` (`[H × T]`).
    fn kernel_backward(&self, g_k: &Array2<f64>, grad: &mut S4dDirection) {
        let (h, n) = self.a_re_raw.dim();
        let t = g_k.ncols();
        for i in 0..h {
            let dt = self.dt(i);
            let mut g_dt = 0.0;
            for j in 0..n {
                let a = self.a(i, j);
                let b = Complex64::new(self.b_re[(i, j)], self.b_im[(i, j)]);
                let c = Complex64::new(self.c_re[(i, j)], self.c_im[(i, j)]);
                let dta = a * dt;
                let e = dta.exp();
                let bbar = (e - 1.0) / a * b;
                let p = c * bbar;
                // G_P = Σ g_l conj(V_l); S = Σ g_l l conj(V_l)
                let mut g_p = Complex64::new(0.0, 0.0);
                let mut s = Complex64::new(0.0, 0.0);
                let zc = e.conj();
                let mut pow = Complex64::new(1.0, 0.0);
                for l in 0..t {
                    let v = pow * g_k[(i, l)];
                    g_p += v;
                    s += v * l as f64;
                    pow *= zc;
                }
                let g_c = g_p * bbar.conj();
                let g_bbar = g_p * c.conj();
                let g_dta = p.conj() * s + g_bbar * (e * b / a).conj();
                let mut g_a = g_bbar * (-(e - 1.0) * b / (a * a)).conj();
                let g_b = g_bbar * ((e - 1.0) / a).conj();
                g_a += g_dta * dt;
                g_dt += (g_dta * a.conj()).re;
                grad.a_re_raw[(i, j)] += g_a.re * -sigmoid(self.a_re_raw[(i, j)]);
                grad.a_im[(i, j)] += g_a.im;
                grad.b_re[(i, j)] += g_b.re;
                grad.b_im[(i, j)] += g_b.im;
                grad.c_re[(i, j)] += g_c.re;
                grad.c_im[(i, j)] += g_c.im;
            }
            grad.log_dt[i] += g_dt * dt;
        }
    }
}

/// Precomputed convolution kernels for one sequence length.
#[derive(Debug, Clone)]
pub struct Kernels {
    pub len: usize,
    /// Per layer, per direction, `[H × len]`.
    pub k: Vec<Vec<Array2<f64>>>,
}

/// Activations of one layer kept for the backward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    z: Array2<f64>,
    act: Array2<f64>,
    mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct SampleCache {
    x: Array2<f64>,
    layers: Vec<LayerCache>,
    pooled: Array1<f64>,
    pub(crate) logits: Array1<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[t] = Σ_{l≤t} k[l] s[t-l] + d s[t]`, or the anti-causal mirror.
fn ssm_conv(k: ArrayView1<f64>, d: f64, s: ArrayView1<f64>, reverse: bool, y: &mut [f64]) {
    let n = s.len();
    let k = k.as_slice().expect("contiguous kernel");
    let s = s.to_vec();
    if reverse {
        for t in 0..n {
            y[t] = d * s[t] + dot(&k[..n - t], &s[t..]);
        }
    } else {
        let sr: Vec<f64> = s.iter().rev().copied().collect();
        for t in 0..n {
            y[t] = d * s[t] + dot(&k[..=t], &sr[n - 1 - t..]);
        }
    }
}

/// Gradients of `ssm_conv` w.r.t. kernel, skip term and input.
#[allow(clippy::too_many_arguments)]
fn ssm_conv_backward(
    k: ArrayView1<f64>,
    d: f64,
    s: ArrayView1<f64>,
    g: &[f64],
    reverse: bool,
    g_k: &mut [f64],
    g_d: &mut f64,
    g_s: &mut [f64],
) {
    let n = s.len();
    let k = k.as_slice().expect("contiguous kernel");
    let s = s.to_vec();
    if reverse {
        for t in 0..n {
            let gt = g[t];
            if gt == 0.0 {
                continue;
            }
            *g_d += gt * s[t];
            g_s[t] += gt * d;
            axpy(gt, &s[t..], &mut g_k[..n - t]);
            axpy(gt, &k[..n - t], &mut g_s[t..]);
        }
    } else {
        let sr: Vec<f64> = s.iter().rev().copied().collect();
        let mut g_sr = vec![0.0; n];
        for t in 0..n {
            let gt = g[t];
            if gt == 0.0 {
                continue;
            }
            *g_d += gt * s[t];
            g_s[t] += gt * d;
            axpy(gt, &sr[n - 1 - t..], &mut g_k[..=t]);
            axpy(gt, &k[..=t], &mut g_sr[n - 1 - t..]);
        }
        for (i, v) in g_sr.iter().rev().enumerate() {
            g_s[i] += v;
        }
    }
}

fn s1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn s2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

impl S4dModel {
    /// S4D-Lin initialization: `A_n = -1/2 + iπn`, `B = 1`, `C ~ CN(0, 1)`,
    /// log Δ uniform in `[ln Δ_min, ln Δ_max]`, zero head bias.
    pub fn init(config: &S4dConfig, seed: u64) -> ClassifyResult<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, n, f) = (config.d_model, config.d_state, config.d_input);
        let uniform = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
        };
        let enc_w = uniform(&mut rng, h, f, f);
        let enc_b = Array1::zeros(h);
        let raw0 = (0.5f64.exp() - 1.0).ln();
        let c_dist = Normal::new(0.0, 0.5f64.sqrt()).expect("valid normal");
        let log_dt = Uniform::new_inclusive(config.dt_min.ln(), config.dt_max.ln());
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut dirs = Vec::new();
            for _ in 0..config.n_directions() {
                let mut dir = S4dDirection::zeros(h, n);
                dir.log_dt = Array1::from_shape_simple_fn(h, || log_dt.sample(&mut rng));
                dir.a_re_raw.fill(raw0);
                dir.a_im = Array2::from_shape_fn((h, n), |(_, j)| std::f64::consts::PI * j as f64);
                dir.b_re.fill(1.0);
                dir.c_re = Array2::from_shape_simple_fn((h, n), || c_dist.sample(&mut rng));
                dir.c_im = Array2::from_shape_simple_fn((h, n), || c_dist.sample(&mut rng));
                dir.d = Array1::from_shape_simple_fn(h, || rng.sample::<f64, _>(rand_distr::StandardNormal));
                dirs.push(dir);
            }
            let width = config.n_directions() * h;
            layers.push(S4dLayer { dirs, mix_w: uniform(&mut rng, h, width, width), mix_b: Array1::zeros(h) });
        }
        let head_w = uniform(&mut rng, config.n_classes, h, h);
        Ok(Self { config: config.clone(), enc_w, enc_b, layers, head_w, head_b: Array1::zeros(config.n_classes) })
    }

    /// Same shapes, every entry zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named parameter tensors in a fixed order with their shapes.
    #[allow(clippy::type_complexity)]
    pub fn tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        let mut out: Vec<(String, &[f64], Vec<usize>)> = Vec::new();
        out.push(("enc_w".into(), s2(&self.enc_w), self.enc_w.shape().to_vec()));
        out.push(("enc_b".into(), s1(&self.enc_b), self.enc_b.shape().to_vec()));
        for (li, layer) in self.layers.iter().enumerate() {
            for (di, d) in layer.dirs.iter().enumerate() {
                let p = format!("layer{li}.dir{di}.");
                out.push((p.clone() + "log_dt", s1(&d.log_dt), d.log_dt.shape().to_vec()));
                for (name, a) in [
                    ("a_re_raw", &d.a_re_raw),
                    ("a_im", &d.a_im),
                    ("b_re", &d.b_re),
                    ("b_im", &d.b_im),
                    ("c_re", &d.c_re),
                    ("c_im", &d.c_im),
                ] {
                    out.push((p.clone() + name, s2(a), a.shape().to_vec()));
                }
                out.push((p + "d", s1(&d.d), d.d.shape().to_vec()));
            }
            out.push((format!("layer{li}.mix_w"), s2(&layer.mix_w), layer.mix_w.shape().to_vec()));
            out.push((format!("layer{li}.mix_b"), s1(&layer.mix_b), layer.mix_b.shape().to_vec()));
        }
        out.push(("head_w".into(), s2(&self.head_w), self.head_w.shape().to_vec()));
        out.push(("head_b".into(), s1(&self.head_b), self.head_b.shape().to_vec()));
        out
    }

    /// Mutable parameter tensors in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.enc_w.as_slice_mut().expect("standard layout"));
        out.push(self.enc_b.as_slice_mut().expect("standard layout"));
        for layer in &mut self.layers {
            for d in &mut layer.dirs {
                out.push(d.log_dt.as_slice_mut().expect("standard layout"));
                for a in [&mut d.a_re_raw, &mut d.a_im, &mut d.b_re, &mut d.b_im, &mut d.c_re, &mut d.c_im] {
                    out.push(a.as_slice_mut().expect("standard layout"));
                }
                out.push(d.d.as_slice_mut().expect("standard layout"));
            }
            out.push(layer.mix_w.as_slice_mut().expect("standard layout"));
            out.push(layer.mix_b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head_w.as_slice_mut().expect("standard layout"));
        out.push(self.head_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.1.len()).sum()
    }

    /// Continuous-time stability: every Re(A) < 0 and |Ā| < 1.
    pub fn is_stable(&self) -> bool {
        self.layers.iter().flat_map(|l| &l.dirs).all(|d| {
            let (abar, _, _) = d.discretize();
            d.a_re_raw.iter().all(|&r| -softplus(r) < 0.0) && abar.iter().all(|z| z.norm() < 1.0)
        })
    }

    pub fn kernels(&self, len: usize) -> Kernels {
        Kernels {
            len,
            k: self.layers.iter().map(|l| l.dirs.iter().map(|d| d.kernel(len)).collect()).collect(),
        }
    }

    pub(crate) fn check_input(&self, x: &ArrayView2<f64>) -> ClassifyResult<()> {
        if x.nrows() != self.config.d_input {
            return Err(ClassifyError::Shape(format!(
                "model expects {} feature channels, got {}",
                self.config.d_input,
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(ClassifyError::Shape("empty sequence".into()));
        }
        Ok(())
    }

    pub(crate) fn encode(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.enc_w.dot(x);
        h += &self.enc_b.view().insert_axis(Axis(1));
        h
    }

    /// Bidirectional SSM convolution of one layer: `[directions·H × T]`.
    pub(crate) fn layer_ssm(&self, li: usize, kernels: &Kernels, u: &Array2<f64>) -> Array2<f64> {
        let layer = &self.layers[li];
        let (h, t) = u.dim();
        let mut z = Array2::zeros((layer.dirs.len() * h, t));
        for (di, dir) in layer.dirs.iter().enumerate() {
            let k = &kernels.k[li][di];
            for i in 0..h {
                let mut row = vec![0.0; t];
                ssm_conv(k.row(i), dir.d[i], u.row(i), di == 1, &mut row);
                z.row_mut(di * h + i).assign(&ArrayView1::from(&row[..]));
            }
        }
        z
    }

    pub(crate) fn mix(&self, li: usize, act: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
        let layer = &self.layers[li];
        let mut out = layer.mix_w.dot(act);
        out += &layer.mix_b.view().insert_axis(Axis(1));
        out += u;
        out
    }

    pub(crate) fn head(&self, out: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
        let pooled = out.mean_axis(Axis(1)).expect("non-empty sequence");
        let logits = self.head_w.dot(&pooled) + &self.head_b;
        (pooled, logits)
    }

    /// Convolutional forward of one `[d_input × T]` sequence. With `rng`,
    /// dropout is active and its masks are drawn from it.
    pub(crate) fn forward_cached(
        &self,
        kernels: &Kernels,
        x: ArrayView2<f64>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> ClassifyResult<SampleCache> {
        self.check_input(&x)?;
        if kernels.len < x.ncols() {
            return Err(ClassifyError::Shape(format!(
                "kernels cover {} steps, sequence has {}",
                kernels.len,
                x.ncols()
            )));
        }
        let p = self.config.dropout;
        let mut u = self.encode(&x);
        let mut caches = Vec::with_capacity(self.layers.len());
        for li in 0..self.layers.len() {
            let z = self.layer_ssm(li, kernels, &u);
            let mut act = z.mapv(gelu);
            let mask = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let m = Array2::from_shape_simple_fn(act.dim(), || if r.gen::<f64>() < p { 0.0 } else { keep });
                    act *= &m;
                    Some(m)
                }
                _ => None,
            };
            let out = self.mix(li, &act, &u);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(ClassifyError::Numeric { layer: li, detail: "non-finite activations".into() });
            }
            caches.push(LayerCache { input: u, z, act, mask });
            u = out;
        }
        let (pooled, logits) = self.head(&u);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ClassifyError::Numeric { layer: self.layers.len(), detail: "non-finite logits".into() });
        }
        Ok(SampleCache { x: x.to_owned(), layers: caches, pooled, logits })
    }

    /// Deterministic convolutional forward (dropout off).
    pub fn forward_conv(&self, x: ArrayView2<f64>) -> ClassifyResult<Array1<f64>> {
        let kernels = self.kernels(x.ncols());
        self.forward_with(&kernels, x)
    }

    pub fn forward_with(&self, kernels: &Kernels, x: ArrayView2<f64>) -> ClassifyResult<Array1<f64>> {
        Ok(self.forward_cached(kernels, x, None)?.logits)
    }

    /// Logits for every window of a `[n × d_input × T]` batch.
    pub fn forward_batch(&self, x: &ndarray::Array3<f64>) -> ClassifyResult<Array2<f64>> {
        let kernels = self.kernels(x.shape()[2]);
        let mut out = Array2::zeros((x.shape()[0], self.config.n_classes));
        for (i, sample) in x.axis_iter(Axis(0)).enumerate() {
            out.row_mut(i).assign(&self.forward_with(&kernels, sample)?);
        }
        Ok(out)
    }

    /// Backpropagate `g_logits` through one cached sample. Kernel gradients
    /// are accumulated into `g_k` and resolved to parameters by
    /// [`Self::resolve_kernel_grads`].
    pub(crate) fn backward_sample(
        &self,
        kernels: &Kernels,
        cache: &SampleCache,
        g_logits: ArrayView1<f64>,
        grad: &mut S4dModel,
        g_k: &mut [Vec<Array2<f64>>],
    ) {
        let t = cache.x.ncols();
        let h = self.config.d_model;
        grad.head_w += &g_logits.insert_axis(Axis(1)).dot(&cache.pooled.view().insert_axis(Axis(0)));
        grad.head_b += &g_logits;
        let g_pooled = self.head_w.t().dot(&g_logits) / t as f64;
        let mut g = Array2::from_shape_fn((h, t), |(i, _)| g_pooled[i]);
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let c = &cache.layers[li];
            let gl = &mut grad.layers[li];
            gl.mix_w += &g.dot(&c.act.t());
            gl.mix_b += &g.sum_axis(Axis(1));
            let mut g_act = layer.mix_w.t().dot(&g);
            if let Some(m) = &c.mask {
                g_act *= m;
            }
            g_act.zip_mut_with(&c.z, |ga, &z| *ga *= gelu_grad(z));
            // `g` already carries the residual path.
            for di in 0..layer.dirs.len() {
                let k = &kernels.k[li][di];
                for i in 0..h {
                    let gz = g_act.row(di * h + i).to_vec();
                    let mut g_in = vec![0.0; t];
                    let mut g_d = 0.0;
                    let mut gk_row = g_k[li][di].row_mut(i);
                    let gk = gk_row.as_slice_mut().expect("contiguous");
                    ssm_conv_backward(k.row(i), layer.dirs[di].d[i], c.input.row(i), &gz, di == 1, &mut gk[..t], &mut g_d, &mut g_in);
                    gl.dirs[di].d[i] += g_d;
                    for (gv, add) in g.row_mut(i).iter_mut().zip(&g_in) {
                        *gv += add;
                    }
                }
            }
        }
        grad.enc_w += &g.dot(&cache.x.t());
        grad.enc_b += &g.sum_axis(Axis(1));
    }

    /// Zeroed kernel-gradient buffers for sequences of length `t`.
    pub(crate) fn kernel_grad_buffers(&self, t: usize) -> Vec<Vec<Array2<f64>>> {
        self.layers
            .iter()
            .map(|l| l.dirs.iter().map(|_| Array2::zeros((self.config.d_model, t))).collect())
            .collect()
    }

    /// Push accumulated kernel gradients through discretization into `grad`.
    pub(crate) fn resolve_kernel_grads(&self, g_k: &[Vec<Array2<f64>>], grad: &mut S4dModel) {
        for (li, layer) in self.layers.iter().enumerate() {
            for (di, dir) in layer.dirs.iter().enumerate() {
                dir.kernel_backward(&g_k[li][di], &mut grad.layers[li].dirs[di]);
            }
        }
    }

    /// Mean cross-entropy over `(x, label)` pairs and its gradient.
    /// Dropout masks are drawn from `rng` when given.
    pub fn loss_and_grad(
        &self,
        batch: &[(ArrayView2<f64>, usize)],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> ClassifyResult<(f64, usize, S4dModel)> {
        let t = batch.first().map(|b| b.0.ncols()).ok_or_else(|| ClassifyError::Parameter("empty batch".into()))?;
        let kernels = self.kernels(t);
        let mut grad = self.zeros_like();
        let mut g_k = self.kernel_grad_buffers(t);
        let mut loss = 0.0;
        let mut correct = 0;
        let scale = 1.0 / batch.len() as f64;
        for (x, label) in batch {
            if x.ncols() != t {
                return Err(ClassifyError::Shape("batch sequences differ in length".into()));
            }
            if *label >= self.config.n_classes {
                return Err(ClassifyError::Parameter(format!("label {label} out of range")));
            }
            let cache = self.forward_cached(&kernels, x.view(), rng.as_deref_mut())?;
            let probs = softmax(cache.logits.view());
            loss -= probs[*label].max(1e-300).ln() * scale;
            if argmax(probs.view()) == *label {
                correct += 1;
            }
            let mut g_logits = probs * scale;
            g_logits[*label] -= scale;
            self.backward_sample(&kernels, &cache, g_logits.view(), &mut grad, &mut g_k);
        }
        self.resolve_kernel_grads(&g_k, &mut grad);
        Ok((loss, correct, grad))
    }
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand_distr::StandardNormal;

    fn tiny(bidirectional: bool, dropout: f64) -> S4dModel {
        let config = S4dConfig { d_input: 3, d_model: 2, d_state: 2, dropout, bidirectional, ..S4dConfig::default() };
        S4dModel::init(&config, 11).unwrap()
    }

    fn random_seq(f: usize, t: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((f, t), || rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn init_follows_s4d_lin() {
        let config = S4dConfig { d_input: 5, d_model: 3, d_state: 4, ..S4dConfig::default() };
        let m = S4dModel::init(&config, 1).unwrap();
        for d in m.layers.iter().flat_map(|l| &l.dirs) {
            assert!(d.a_re_raw.iter().all(|&r| (softplus(r) - 0.5).abs() < 1e-12));
            for row in d.a_im.rows() {
                let expect = [0.0, std::f64::consts::PI, 2.0 * std::f64::consts::PI, 3.0 * std::f64::consts::PI];
                for (a, b) in row.iter().zip(expect) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            assert!(d.log_dt.iter().all(|&v| v >= 0.001f64.ln() - 1e-12 && v <= 0.1f64.ln() + 1e-12));
        }
        assert!(m.head_b.iter().all(|&b| b == 0.0));
        assert!(m.is_stable());
        assert_eq!(m, S4dModel::init(&config, 1).unwrap());
        assert_ne!(m, S4dModel::init(&config, 2).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = S4dConfig { d_input: 3, ..S4dConfig::default() };
        for bad in [
            S4dConfig { n_layers: 0, ..base.clone() },
            S4dConfig { dropout: 1.0, ..base.clone() },
            S4dConfig { d_input: 0, ..base.clone() },
            S4dConfig { dt_min: 0.2, ..base.clone() },
        ] {
            assert!(matches!(S4dModel::init(&bad, 0), Err(ClassifyError::Config(_))));
        }
    }

    #[test]
    fn zero_input_with_zero_head_weights_is_uniform() {
        let mut m = tiny(true, 0.0);
        m.head_w.fill(0.0);
        let logits = m.forward_conv(Array2::zeros((3, 16)).view()).unwrap();
        let p = softmax(logits.view());
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn batch_rows_do_not_interact() {
        let config = S4dConfig { d_input: 4, d_model: 8, d_state: 4, ..S4dConfig::default() };
        let m = S4dModel::init(&config, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = Array3::from_shape_simple_fn((16, 4, 20), || rng.sample::<f64, _>(StandardNormal));
        let all = m.forward_batch(&batch).unwrap();
        let one = m.forward_batch(&batch.slice(ndarray::s![7..8, .., ..]).to_owned()).unwrap();
        assert_eq!(one.row(0), all.row(7));
    }

    #[test]
    fn conv_and_recurrent_forward_agree() {
        for bidirectional in [true, false] {
            let config = S4dConfig { d_input: 5, d_model: 8, d_state: 6, bidirectional, ..S4dConfig::default() };
            let m = S4dModel::init(&config, 21).unwrap();
            let x = random_seq(5, 128, 22);
            let a = m.forward_conv(x.view()).unwrap();
            let b = m.forward_recurrent(x.view()).unwrap();
            let scale = a.iter().map(|v| v.abs()).fold(1e-12, f64::max);
            for (p, q) in a.iter().zip(b.iter()) {
                assert!((p - q).abs() / scale < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn streaming_matches_prefix_and_resets() {
        let m = tiny(false, 0.0);
        let x = random_seq(3, 10, 3);
        let mut state = m.stream_state();
        let mut first = Vec::new();
        for col in x.axis_iter(Axis(1)) {
            first.push(m.step(&mut state, col).unwrap().unwrap());
        }
        let prefix = m.forward_conv(x.slice(ndarray::s![.., ..6]).view()).unwrap();
        for (p, q) in first[5].iter().zip(prefix.iter()) {
            assert!((p - q).abs() < 1e-9);
        }
        state.reset();
        let again = m.step(&mut state, x.column(0)).unwrap().unwrap();
        assert_eq!(again, first[0]);
        let zero = m.stream_state();
        assert!(zero.steps() == 0);
    }

    #[test]
    fn bidirectional_stream_buffers_until_finish() {
        let m = tiny(true, 0.0);
        let x = random_seq(3, 12, 4);
        let mut state = m.stream_state();
        for col in x.axis_iter(Axis(1)) {
            assert!(m.step(&mut state, col).unwrap().is_none());
        }
        let out = m.finish(&mut state).unwrap();
        let conv = m.forward_conv(x.view()).unwrap();
        for (p, q) in out.iter().zip(conv.iter()) {
            assert!((p - q).abs() < 1e-9);
        }
        let other = tiny(false, 0.0);
        assert!(matches!(other.step(&mut state, x.column(0)), Err(ClassifyError::Shape(_))));
    }

    #[test]
    fn zero_state_zero_input_gives_zero_ssm_output() {
        let m = tiny(false, 0.0);
        let u = Array2::zeros((2, 8));
        let z = m.layer_ssm(0, &m.kernels(8), &u);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    /// Central-difference gradient for every entry of every tensor.
    fn numeric_grad(m: &S4dModel, batch: &[(ArrayView2<f64>, usize)], seed: u64) -> Vec<Vec<f64>> {
        let loss = |m: &S4dModel| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            m.loss_and_grad(batch, Some(&mut rng)).unwrap().0
        };
        let eps = 1e-6;
        let n_tensors = m.tensors().len();
        let mut out = Vec::new();
        for k in 0..n_tensors {
            let len = m.tensors()[k].1.len();
            let mut g = vec![0.0; len];
            for (i, gi) in g.iter_mut().enumerate() {
                let mut plus = m.clone();
                plus.tensors_mut()[k][i] += eps;
                let mut minus = m.clone();
                minus.tensors_mut()[k][i] -= eps;
                *gi = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for bidirectional in [true, false] {
            let mut m = tiny(bidirectional, 0.25);
            // move away from the symmetric initialization
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for t in m.tensors_mut() {
                for v in t.iter_mut() {
                    *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let xs: Vec<Array2<f64>> = (0..3).map(|i| random_seq(3, 8, 40 + i)).collect();
            let batch: Vec<(ArrayView2<f64>, usize)> = xs.iter().enumerate().map(|(i, x)| (x.view(), i % 3)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let (_, _, grad) = m.loss_and_grad(&batch, Some(&mut rng)).unwrap();
            let numeric = numeric_grad(&m, &batch, 5);
            for ((name, a, _), n) in grad.tensors().iter().zip(&numeric) {
                let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
                assert!(diff / norm.max(1e-8) < 1e-3, "{name}: rel {} ({a:?} vs {n:?})", diff / norm.max(1e-8));
            }
        }
    }
}
