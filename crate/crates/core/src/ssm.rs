//! Selective state-space machinery: zero-order-hold discretization,
//! input-dependent parameterization, and two interchangeable scans over the
//! diagonal recurrence `h_t = ā_t ⊙ h_{t-1} + b̄_t x_t`, `y_t = C_t · h_t + D x_t`.
//!
//! [`scan_sequential`] walks the recurrence left to right and is the oracle.
//! [`scan_parallel`] splits the sequence into fixed-size chunks, reduces each
//! chunk to a single [`ScanElement`], combines the chunk carries in chunk
//! order, and rescans each chunk from its carry. Chunks and channels run
//! concurrently; since the chunk size is fixed and the combine order is by
//! chunk index, the result does not depend on the worker count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{linear, silu, softplus};
use crate::tensor::{Real, Tensor};

/// Below this `|Δ·a|` the ZOH input gain uses its Taylor series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-4;

pub const DEFAULT_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub k_conv: usize,
}

impl SsmConfig {
    /// State size 16, convolution width 4, block expansion 3.
    pub fn for_model(d_model: usize) -> Self {
        Self {
            d_model,
            d_inner: 3 * d_model,
            d_state: 16,
            k_conv: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanMode {
    Sequential,
    Parallel { chunk: usize },
}

impl Default for ScanMode {
    fn default() -> Self {
        ScanMode::Parallel {
            chunk: DEFAULT_CHUNK,
        }
    }
}

/// Parameters of one selective-scan block.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<R = f32> {
    /// `[d_inner, d_state]`; the state matrix is `A = -exp(a_log)`.
    pub a_log: Tensor<R>,
    /// `[2·d_inner, d_model]`, rows `0..d_inner` feed the stream, the rest the gate.
    pub w_in: Tensor<R>,
    /// `[d_inner, k_conv]` causal depthwise kernel.
    pub conv_kernel: Tensor<R>,
    pub conv_bias: Tensor<R>,
    /// `[2·d_state + 1, d_inner]`, rows are `B`, then `C`, then the pre-Δ scalar.
    pub w_x: Tensor<R>,
    pub delta_bias: Tensor<R>,
    /// The `D` skip term.
    pub d_skip: Tensor<R>,
    /// `[d_model, d_inner]`.
    pub w_out: Tensor<R>,
}

pub(crate) fn uniform_tensor<R: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<R> {
    Tensor::from_fn(shape, |_| R::of(rng.gen_range(-bound..=bound)))
}

impl<R: Real> SsmParams<R> {
    /// Fresh block: `-A` spans `1..=d_state` per channel, Δ starts
    /// log-uniform in `[1e-3, 1e-1]` (the pre-Δ row of `w_x` is zeroed so the
    /// bias alone sets it), `D = 1`, projections fan-in uniform.
    pub fn init(cfg: SsmConfig, rng: &mut impl Rng) -> Self {
        let SsmConfig {
            d_model,
            d_inner,
            d_state,
            k_conv,
        } = cfg;
        let a_log = Tensor::from_fn(&[d_inner, d_state], |i| R::of(((i % d_state) + 1) as f64).ln());
        let w_in = uniform_tensor(rng, &[2 * d_inner, d_model], 1.0 / (d_model as f64).sqrt());
        let conv_bound = 1.0 / (k_conv as f64).sqrt();
        let conv_kernel = uniform_tensor(rng, &[d_inner, k_conv], conv_bound);
        let conv_bias = uniform_tensor(rng, &[d_inner], conv_bound);
        let mut w_x = uniform_tensor(rng, &[2 * d_state + 1, d_inner], 1.0 / (d_inner as f64).sqrt());
        w_x.data_mut()[2 * d_state * d_inner..].fill(R::zero());
        let delta_bias = Tensor::from_fn(&[d_inner], |_| {
            let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
            let dt = rng.gen_range(lo..=hi).exp();
            // inverse softplus
            R::of(dt + (-(-dt).exp_m1()).ln())
        });
        let d_skip = Tensor::full(&[d_inner], R::one());
        let w_out = uniform_tensor(rng, &[d_model, d_inner], 1.0 / (d_inner as f64).sqrt());
        Self {
            a_log,
            w_in,
            conv_kernel,
            conv_bias,
            w_x,
            delta_bias,
            d_skip,
            w_out,
        }
    }

    pub fn config(&self) -> SsmConfig {
        let (d_inner, d_state) = (self.a_log.dim(0), self.a_log.dim(1));
        SsmConfig {
            d_model: self.w_in.dim(1),
            d_inner,
            d_state,
            k_conv: self.conv_kernel.dim(1),
        }
    }

    pub fn validate(&self) -> Result<SsmConfig> {
        let (di, ds) = self.a_log.dims2()?;
        let (two_di, dm) = self.w_in.dims2()?;
        let (kd, k) = self.conv_kernel.dims2()?;
        let expect = |t: &Tensor<R>, shape: &[usize], name: &str| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())))
            }
        };
        if two_di != 2 * di || kd != di {
            return Err(Error::shape("w_in / conv_kernel inconsistent with a_log"));
        }
        expect(&self.conv_bias, &[di], "conv_bias")?;
        expect(&self.w_x, &[2 * ds + 1, di], "w_x")?;
        expect(&self.delta_bias, &[di], "delta_bias")?;
        expect(&self.d_skip, &[di], "d_skip")?;
        expect(&self.w_out, &[dm, di], "w_out")?;
        Ok(SsmConfig {
            d_model: dm,
            d_inner: di,
            d_state: ds,
            k_conv: k,
        })
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<R>); 8] {
        [
            ("a_log", &self.a_log),
            ("w_in", &self.w_in),
            ("conv_kernel", &self.conv_kernel),
            ("conv_bias", &self.conv_bias),
            ("w_x", &self.w_x),
            ("delta_bias", &self.delta_bias),
            ("d_skip", &self.d_skip),
            ("w_out", &self.w_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<R>); 8] {
        [
            ("a_log", &mut self.a_log),
            ("w_in", &mut self.w_in),
            ("conv_kernel", &mut self.conv_kernel),
            ("conv_bias", &mut self.conv_bias),
            ("w_x", &mut self.w_x),
            ("delta_bias", &mut self.delta_bias),
            ("d_skip", &mut self.d_skip),
            ("w_out", &mut self.w_out),
        ]
    }

    pub fn cast<S: Real>(&self) -> SsmParams<S> {
        SsmParams {
            a_log: self.a_log.cast(),
            w_in: self.w_in.cast(),
            conv_kernel: self.conv_kernel.cast(),
            conv_bias: self.conv_bias.cast(),
            w_x: self.w_x.cast(),
            delta_bias: self.delta_bias.cast(),
            d_skip: self.d_skip.cast(),
            w_out: self.w_out.cast(),
        }
    }

    /// Continuous state matrix `A = -exp(a_log)`, row-major `[d_inner, d_state]`.
    pub fn state_matrix(&self) -> Tensor<R> {
        self.a_log.map(|v| -v.exp())
    }
}

/// `(ā, ψ)` for one diagonal entry, where `b̄ = ψ·b`.
#[inline]
pub fn zoh_coefficients<R: Real>(a: R, delta: R) -> (R, R) {
    let z = delta * a;
    let (a_bar, em1) = decay(z);
    (a_bar, zoh_psi(z, em1, delta))
}

/// `(e^z, e^z - 1)` from one transcendental. Strongly negative `z` takes
/// `exp` directly so `e^z` does not round to zero through `1 + expm1`.
#[inline]
fn decay<R: Real>(z: R) -> (R, R) {
    if z < R::of(-0.5) {
        let e = z.exp();
        (e, e - R::one())
    } else {
        let em1 = z.exp_m1();
        (em1 + R::one(), em1)
    }
}

#[inline]
fn zoh_psi<R: Real>(z: R, em1: R, delta: R) -> R {
    if z.abs() < R::of(ZOH_SERIES_THRESHOLD) {
        delta * (R::one() + z / R::of(2.0) + z * z / R::of(6.0))
    } else {
        delta * em1 / z
    }
}

/// `(ā, ψ, ∂ψ/∂Δ, ∂ψ/∂a)` for one diagonal entry.
#[inline]
pub(crate) fn zoh_with_grads<R: Real>(a: R, delta: R) -> (R, R, R, R) {
    let z = delta * a;
    let (a_bar, em1) = decay(z);
    let d_a = if z.abs() < R::of(1e-2) {
        delta * delta * (R::of(0.5) + z / R::of(3.0) + z * z / R::of(8.0) + z * z * z / R::of(30.0))
    } else {
        delta * delta * (z * a_bar - em1) / (z * z)
    };
    (a_bar, zoh_psi(z, em1, delta), a_bar, d_a)
}

/// Zero-order-hold discretization of a diagonal `(A, B)` at step `delta`.
pub fn zoh_discretize<R: Real>(a: &Tensor<R>, b: &Tensor<R>, delta: R) -> Result<(Tensor<R>, Tensor<R>)> {
    if !(delta > R::zero()) {
        return Err(Error::invalid(format!("step size must be positive, got {delta}")));
    }
    a.same_shape(b, "zoh a/b")?;
    if !a.all_finite() {
        return Err(Error::NonFinite("zoh state matrix"));
    }
    let (a_bar, b_bar): (Vec<R>, Vec<R>) = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&ai, &bi)| {
            let (ab, psi) = zoh_coefficients(ai, delta);
            (ab, psi * bi)
        })
        .unzip();
    Ok((Tensor::new(a.shape().to_vec(), a_bar)?, Tensor::new(a.shape().to_vec(), b_bar)?))
}

/// Per-step selective parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection<R = f32> {
    /// `[n, d_state]`
    pub b: Tensor<R>,
    /// `[n, d_state]`
    pub c: Tensor<R>,
    /// `[n, d_inner]`, strictly positive.
    pub delta: Tensor<R>,
}

pub fn selective_parameterize<R: Real>(x_seq: &Tensor<R>, params: &SsmParams<R>) -> Result<Selection<R>> {
    let (n, di) = x_seq.dims2()?;
    let ds = params.a_log.dim(1);
    if di != params.w_x.dim(1) {
        return Err(Error::shape(format!(
            "sequence has {di} channels, w_x expects {}",
            params.w_x.dim(1)
        )));
    }
    let proj = linear(x_seq, &params.w_x, None)?;
    let width = 2 * ds + 1;
    let mut b = Vec::with_capacity(n * ds);
    let mut c = Vec::with_capacity(n * ds);
    let mut delta = Vec::with_capacity(n * di);
    let bias = params.delta_bias.data();
    for row in proj.data().chunks(width) {
        b.extend_from_slice(&row[..ds]);
        c.extend_from_slice(&row[ds..2 * ds]);
        let pre = row[2 * ds];
        delta.extend(bias.iter().map(|&db| softplus(pre + db)));
    }
    Ok(Selection {
        b: Tensor::new(vec![n, ds], b)?,
        c: Tensor::new(vec![n, ds], c)?,
        delta: Tensor::new(vec![n, di], delta)?,
    })
}

/// One step (or a composed run of steps) of the diagonal recurrence, as the
/// affine map `h ↦ a_bar ⊙ h + bx`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<R = f32> {
    pub a_bar: Vec<R>,
    pub bx: Vec<R>,
}

impl<R: Real> ScanElement<R> {
    pub fn identity(d_state: usize) -> Self {
        Self {
            a_bar: vec![R::one(); d_state],
            bx: vec![R::zero(); d_state],
        }
    }

    /// `self` followed by `later`: `(a1, b1) ∘ (a2, b2) = (a2 ⊙ a1, a2 ⊙ b1 + b2)`.
    pub fn then(&self, later: &ScanElement<R>) -> ScanElement<R> {
        ScanElement {
            a_bar: self.a_bar.iter().zip(&later.a_bar).map(|(&a1, &a2)| a2 * a1).collect(),
            bx: self
                .bx
                .iter()
                .zip(&later.a_bar)
                .zip(&later.bx)
                .map(|((&b1, &a2), &b2)| a2 * b1 + b2)
                .collect(),
        }
    }

    pub fn apply(&self, h: &[R]) -> Vec<R> {
        h.iter()
            .zip(&self.a_bar)
            .zip(&self.bx)
            .map(|((&h, &a), &b)| a * h + b)
            .collect()
    }
}

/// Materialized scan elements, `[n, d_inner, d_state]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElements<R = f32> {
    pub a_bar: Tensor<R>,
    pub bx: Tensor<R>,
}

impl<R: Real> ScanElements<R> {
    pub fn new(a_bar: Tensor<R>, bx: Tensor<R>) -> Result<Self> {
        a_bar.dims3()?;
        a_bar.same_shape(&bx, "scan elements")?;
        Ok(Self { a_bar, bx })
    }

    /// Discretizes every `(t, channel)` step of a selection.
    pub fn discretize(x_seq: &Tensor<R>, sel: &Selection<R>, a: &Tensor<R>) -> Result<Self> {
        let (n, di) = x_seq.dims2()?;
        let (adi, ds) = a.dims2()?;
        if adi != di || sel.delta.shape() != [n, di] || sel.b.shape() != [n, ds] {
            return Err(Error::shape("selection inconsistent with sequence"));
        }
        let src = Fused {
            x: x_seq.data(),
            delta: sel.delta.data(),
            a: a.data(),
            b: sel.b.data(),
            di,
            ds,
        };
        let mut a_bar = vec![R::zero(); n * di * ds];
        let mut bx = vec![R::zero(); n * di * ds];
        for t in 0..n {
            for d in 0..di {
                let at = (t * di + d) * ds;
                src.step(t, d, &mut a_bar[at..at + ds], &mut bx[at..at + ds]);
            }
        }
        Self::new(Tensor::new(vec![n, di, ds], a_bar)?, Tensor::new(vec![n, di, ds], bx)?)
    }

    pub fn element(&self, t: usize, d: usize) -> ScanElement<R> {
        let (_, di, ds) = self.a_bar.dims3().expect("rank 3");
        let at = (t * di + d) * ds;
        ScanElement {
            a_bar: self.a_bar.data()[at..at + ds].to_vec(),
            bx: self.bx.data()[at..at + ds].to_vec(),
        }
    }
}

/// Supplies `(ā, b̄x)` for step `t` of channel `d`.
trait StepSource<R>: Sync {
    fn step(&self, t: usize, d: usize, a_bar: &mut [R], bx: &mut [R]);
}

struct Materialized<'a, R> {
    a_bar: &'a [R],
    bx: &'a [R],
    di: usize,
    ds: usize,
}

impl<R: Real> StepSource<R> for Materialized<'_, R> {
    #[inline]
    fn step(&self, t: usize, d: usize, a_bar: &mut [R], bx: &mut [R]) {
        let at = (t * self.di + d) * self.ds;
        a_bar.copy_from_slice(&self.a_bar[at..at + self.ds]);
        bx.copy_from_slice(&self.bx[at..at + self.ds]);
    }
}

/// Discretizes on the fly so the `[n, d_inner, d_state]` elements are never stored.
struct Fused<'a, R> {
    x: &'a [R],
    delta: &'a [R],
    /// Continuous `A`, `[d_inner, d_state]`.
    a: &'a [R],
    b: &'a [R],
    di: usize,
    ds: usize,
}

impl<R: Real> StepSource<R> for Fused<'_, R> {
    #[inline]
    fn step(&self, t: usize, d: usize, a_bar: &mut [R], bx: &mut [R]) {
        let dt = self.delta[t * self.di + d];
        let x = self.x[t * self.di + d];
        let a_row = &self.a[d * self.ds..(d + 1) * self.ds];
        let b_row = &self.b[t * self.ds..(t + 1) * self.ds];
        for s in 0..self.ds {
            let (ab, psi) = zoh_coefficients(a_row[s], dt);
            a_bar[s] = ab;
            bx[s] = psi * b_row[s] * x;
        }
    }
}

struct Readout<'a, R> {
    c: &'a [R],
    d_skip: &'a [R],
    x: &'a [R],
    di: usize,
    ds: usize,
}

impl<R: Real> Readout<'_, R> {
    #[inline]
    fn emit(&self, t: usize, d: usize, h: &[R]) -> R {
        let c_row = &self.c[t * self.ds..(t + 1) * self.ds];
        let mut acc = R::zero();
        for (&ci, &hi) in c_row.iter().zip(h) {
            acc = acc + ci * hi;
        }
        acc + self.d_skip[d] * self.x[t * self.di + d]
    }
}

/// Runs `range` of channel `d` from state `h`, writing outputs into `out`
/// (indexed from `range.start`).
fn scan_run<R: Real, S: StepSource<R>>(
    src: &S,
    read: &Readout<'_, R>,
    d: usize,
    range: std::ops::Range<usize>,
    h: &mut [R],
    out: &mut [R],
) {
    let ds = h.len();
    let mut a_bar = vec![R::zero(); ds];
    let mut bx = vec![R::zero(); ds];
    for (i, t) in range.enumerate() {
        src.step(t, d, &mut a_bar, &mut bx);
        for s in 0..ds {
            h[s] = a_bar[s] * h[s] + bx[s];
        }
        out[i] = read.emit(t, d, h);
    }
}

/// Reduces `range` of channel `d` to one composed element.
fn scan_reduce<R: Real, S: StepSource<R>>(src: &S, d: usize, range: std::ops::Range<usize>, ds: usize) -> ScanElement<R> {
    let mut acc = ScanElement::identity(ds);
    let mut a_bar = vec![R::zero(); ds];
    let mut bx = vec![R::zero(); ds];
    for t in range {
        src.step(t, d, &mut a_bar, &mut bx);
        for s in 0..ds {
            acc.a_bar[s] = a_bar[s] * acc.a_bar[s];
            acc.bx[s] = a_bar[s] * acc.bx[s] + bx[s];
        }
    }
    acc
}

fn scatter_channels<R: Real>(n: usize, di: usize, per_channel: Vec<Vec<R>>) -> Vec<R> {
    let mut y = vec![R::zero(); n * di];
    for (d, col) in per_channel.into_iter().enumerate() {
        for (t, v) in col.into_iter().enumerate() {
            y[t * di + d] = v;
        }
    }
    y
}

fn run_sequential<R: Real, S: StepSource<R>>(src: &S, read: &Readout<'_, R>, n: usize) -> Vec<R> {
    let cols: Vec<Vec<R>> = (0..read.di)
        .into_par_iter()
        .map(|d| {
            let mut h = vec![R::zero(); read.ds];
            let mut out = vec![R::zero(); n];
            scan_run(src, read, d, 0..n, &mut h, &mut out);
            out
        })
        .collect();
    scatter_channels(n, read.di, cols)
}

fn run_chunked<R: Real, S: StepSource<R>>(src: &S, read: &Readout<'_, R>, n: usize, chunk: usize) -> Vec<R> {
    let (di, ds) = (read.di, read.ds);
    let n_chunks = n.div_ceil(chunk);
    let span = |k: usize| k * chunk..((k + 1) * chunk).min(n);
    let jobs: Vec<(usize, usize)> = (0..di).flat_map(|d| (0..n_chunks).map(move |k| (d, k))).collect();

    // phase 1: per-chunk aggregates (the last chunk's is never needed)
    let aggregates: Vec<Option<ScanElement<R>>> = jobs
        .par_iter()
        .map(|&(d, k)| (k + 1 < n_chunks).then(|| scan_reduce(src, d, span(k), ds)))
        .collect();

    // phase 2: carries, combined strictly in chunk order
    let mut carries = vec![vec![R::zero(); ds]; jobs.len()];
    for d in 0..di {
        for k in 1..n_chunks {
            let prev = &carries[d * n_chunks + k - 1];
            let agg = aggregates[d * n_chunks + k - 1].as_ref().expect("not last chunk");
            carries[d * n_chunks + k] = agg.apply(prev);
        }
    }

    // phase 3: rescan every chunk from its carry
    let pieces: Vec<Vec<R>> = jobs
        .par_iter()
        .zip(carries.into_par_iter())
        .map(|(&(d, k), mut h)| {
            let r = span(k);
            let mut out = vec![R::zero(); r.len()];
            scan_run(src, read, d, r, &mut h, &mut out);
            out
        })
        .collect();

    let mut y = vec![R::zero(); n * di];
    for (&(d, k), piece) in jobs.iter().zip(pieces) {
        for (i, v) in piece.into_iter().enumerate() {
            y[(k * chunk + i) * di + d] = v;
        }
    }
    y
}

fn check_scan_inputs<R: Real>(
    n: usize,
    di: usize,
    ds: usize,
    c_seq: &Tensor<R>,
    d_skip: &Tensor<R>,
    x_seq: &Tensor<R>,
) -> Result<()> {
    if c_seq.shape() != [n, ds] {
        return Err(Error::shape(format!("c_seq {:?}, expected [{n}, {ds}]", c_seq.shape())));
    }
    if x_seq.shape() != [n, di] {
        return Err(Error::shape(format!("x_seq {:?}, expected [{n}, {di}]", x_seq.shape())));
    }
    if d_skip.shape() != [di] {
        return Err(Error::shape(format!("d_skip {:?}, expected [{di}]", d_skip.shape())));
    }
    Ok(())
}

fn scan_elements<R: Real>(
    elements: &ScanElements<R>,
    c_seq: &Tensor<R>,
    d_skip: &Tensor<R>,
    x_seq: &Tensor<R>,
    mode: ScanMode,
) -> Result<Tensor<R>> {
    let (n, di, ds) = elements.a_bar.dims3()?;
    check_scan_inputs(n, di, ds, c_seq, d_skip, x_seq)?;
    let src = Materialized {
        a_bar: elements.a_bar.data(),
        bx: elements.bx.data(),
        di,
        ds,
    };
    let read = Readout {
        c: c_seq.data(),
        d_skip: d_skip.data(),
        x: x_seq.data(),
        di,
        ds,
    };
    let y = match mode {
        ScanMode::Sequential => run_sequential(&src, &read, n),
        ScanMode::Parallel { chunk } => run_chunked(&src, &read, n, chunk.max(1)),
    };
    Tensor::new(vec![n, di], y)
}

/// Left-to-right recurrence from `h_0 = 0`.
pub fn scan_sequential<R: Real>(
    elements: &ScanElements<R>,
    c_seq: &Tensor<R>,
    d_skip: &Tensor<R>,
    x_seq: &Tensor<R>,
) -> Result<Tensor<R>> {
    scan_elements(elements, c_seq, d_skip, x_seq, ScanMode::Sequential)
}

/// Chunked reduce-then-rescan; equals [`scan_sequential`] up to rounding.
pub fn scan_parallel<R: Real>(
    elements: &ScanElements<R>,
    c_seq: &Tensor<R>,
    d_skip: &Tensor<R>,
    x_seq: &Tensor<R>,
    chunk: usize,
) -> Result<Tensor<R>> {
    scan_elements(elements, c_seq, d_skip, x_seq, ScanMode::Parallel { chunk })
}

/// Discretize-and-scan without materializing the scan elements.
pub fn selective_scan<R: Real>(
    x_seq: &Tensor<R>,
    sel: &Selection<R>,
    a: &Tensor<R>,
    d_skip: &Tensor<R>,
    mode: ScanMode,
) -> Result<Tensor<R>> {
    let (n, di) = x_seq.dims2()?;
    let (adi, ds) = a.dims2()?;
    if adi != di || sel.delta.shape() != [n, di] || sel.b.shape() != [n, ds] {
        return Err(Error::shape("selection inconsistent with sequence"));
    }
    check_scan_inputs(n, di, ds, &sel.c, d_skip, x_seq)?;
    let src = Fused {
        x: x_seq.data(),
        delta: sel.delta.data(),
        a: a.data(),
        b: sel.b.data(),
        di,
        ds,
    };
    let read = Readout {
        c: sel.c.data(),
        d_skip: d_skip.data(),
        x: x_seq.data(),
        di,
        ds,
    };
    let y = match mode {
        ScanMode::Sequential => run_sequential(&src, &read, n),
        ScanMode::Parallel { chunk } => run_chunked(&src, &read, n, chunk.max(1)),
    };
    Tensor::new(vec![n, di], y)
}

/// Causal depthwise convolution over the sequence axis with `k - 1` zeros of
/// left padding: `y[t, d] = bias[d] + Σ_j kernel[d, j] · x[t + j - (k - 1), d]`.
pub fn causal_depthwise_conv1d<R: Real>(x: &Tensor<R>, kernel: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, di) = x.dims2()?;
    let (kd, k) = kernel.dims2()?;
    if kd != di || bias.shape() != [di] {
        return Err(Error::shape("depthwise kernel does not match channels"));
    }
    let (xd, kw, b) = (x.data(), kernel.data(), bias.data());
    let mut out = vec![R::zero(); n * di];
    out.par_chunks_mut(di).enumerate().for_each(|(t, row)| {
        for (d, slot) in row.iter_mut().enumerate() {
            let mut acc = b[d];
            for j in 0..k {
                if let Some(src) = (t + j).checked_sub(k - 1) {
                    acc = acc + kw[d * k + j] * xd[src * di + d];
                }
            }
            *slot = acc;
        }
    });
    Tensor::new(vec![n, di], out)
}

/// One selective-scan block with a residual connection:
/// in-projection to stream and gate, causal conv + SiLU on the stream,
/// selective scan, SiLU gating, out-projection, plus the block input.
pub fn mamba_block_forward<R: Real>(seq: &Tensor<R>, params: &SsmParams<R>, mode: ScanMode) -> Result<Tensor<R>> {
    let cfg = params.validate()?;
    let (n, dm) = seq.dims2()?;
    if dm != cfg.d_model {
        return Err(Error::shape(format!(
            "sequence has {dm} channels, block expects {}",
            cfg.d_model
        )));
    }
    let di = cfg.d_inner;
    let xz = linear(seq, &params.w_in, None)?;
    let mut stream = Vec::with_capacity(n * di);
    for row in xz.data().chunks(2 * di) {
        stream.extend_from_slice(&row[..di]);
    }
    let stream = Tensor::new(vec![n, di], stream)?;
    let xc = causal_depthwise_conv1d(&stream, &params.conv_kernel, &params.conv_bias)?.map(silu);
    drop(stream);
    let sel = selective_parameterize(&xc, params)?;
    let mut y = selective_scan(&xc, &sel, &params.state_matrix(), &params.d_skip, mode)?;
    drop((xc, sel));
    for (yr, zr) in y.data_mut().chunks_mut(di).zip(xz.data().chunks(2 * di)) {
        for (v, &z) in yr.iter_mut().zip(&zr[di..]) {
            *v = *v * silu(z);
        }
    }
    drop(xz);
    let mut out = linear(&y, &params.w_out, None)?;
    for (o, &s) in out.data_mut().iter_mut().zip(seq.data()) {
        *o = *o + s;
    }
    Ok(out)
}
