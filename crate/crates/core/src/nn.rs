//! Parameter storage, initialization and the layer vocabulary used by the
//! encoder, pyramid, query selection and decoder: linear, layer norm,
//! multi-head attention, small MLPs, 1x1/3x3 convolutions, strided
//! transposed convolutions and 2-D sinusoidal position encodings.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, Ix3, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::util::seeded_rng;

pub const LN_EPS: f64 = 1e-6;

/// Named parameter tensors in deterministic (insertion) order.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: IndexMap<String, ArrayD<f64>>,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.params.insert(name.to_string(), value).is_none(),
            "duplicate parameter '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    // ---- initializers; each parameter's values depend only on (seed, name) ----

    /// Dense weight `[din, dout]` (Xavier) plus zero bias `[dout]`.
    pub fn init_linear(&mut self, seed: u64, name: &str, din: usize, dout: usize) {
        let mut rng = seeded_rng(seed, name);
        let std = (2.0 / (din + dout) as f64).sqrt();
        let w = Array2::from_shape_fn((din, dout), |_| normal(&mut rng, std));
        self.insert(&format!("{name}.w"), w.into_dyn());
        self.insert(&format!("{name}.b"), Array1::zeros(dout).into_dyn());
    }

    /// Layer norm gain (ones) and bias (zeros) of width `d`.
    pub fn init_layer_norm(&mut self, name: &str, d: usize) {
        self.insert(&format!("{name}.g"), Array1::from_elem(d, 1.0).into_dyn());
        self.insert(&format!("{name}.b"), Array1::zeros(d).into_dyn());
    }

    /// Embedding table `[n, d]`, normal(0, std).
    pub fn init_embedding(&mut self, seed: u64, name: &str, n: usize, d: usize, std: f64) {
        let mut rng = seeded_rng(seed, name);
        let e = Array2::from_shape_fn((n, d), |_| normal(&mut rng, std));
        self.insert(name, e.into_dyn());
    }

    /// 3x3 convolution as an unfolded weight `[9*cin, cout]` plus bias.
    pub fn init_conv3x3(&mut self, seed: u64, name: &str, cin: usize, cout: usize) {
        let mut rng = seeded_rng(seed, name);
        let fan_in = 9 * cin;
        let std = (2.0 / (fan_in + cout) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, cout), |_| normal(&mut rng, std));
        self.insert(&format!("{name}.w"), w.into_dyn());
        self.insert(&format!("{name}.b"), Array1::zeros(cout).into_dyn());
    }

    /// Transposed convolution with kernel == stride `k`, stored as
    /// `[cin, k*k*cout]` so the forward is a matmul plus pixel shuffle.
    pub fn init_deconv(&mut self, seed: u64, name: &str, cin: usize, cout: usize, k: usize) {
        let mut rng = seeded_rng(seed, name);
        let std = (2.0 / (cin + cout) as f64).sqrt();
        let w = Array2::from_shape_fn((cin, k * k * cout), |_| normal(&mut rng, std));
        self.insert(&format!("{name}.w"), w.into_dyn());
        self.insert(&format!("{name}.b"), Array1::zeros(cout).into_dyn());
    }
}

/// One forward pass: a tape plus the parameters bound onto it.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: IndexMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: IndexMap::new(),
        }
    }

    /// Bind a parameter as a tape leaf (once per name per session).
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Gradients of `root` for every bound parameter (zeros when unreached).
    pub fn param_grads(&self, root: Var) -> IndexMap<String, ArrayD<f64>> {
        let grads = self.tape.backward(root);
        let mut out = IndexMap::new();
        for (name, &var) in &self.bound {
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(self.store.get(name).raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }

    // ---- layers ----------------------------------------------------------------

    /// `x @ W + b` for `x: [m, din]`.
    pub fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    /// Affine layer norm over the last axis of `x: [m, d]`.
    pub fn layer_norm(&mut self, name: &str, x: Var) -> Var {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        let n = self.tape.layer_norm_rows(x, LN_EPS);
        let scaled = self.tape.mul_row(n, g);
        self.tape.add_row(scaled, b)
    }

    /// Multi-head attention. `q_in: [tq, d]`, `k_in`/`v_in`: `[tk, d]`.
    /// Returns the projected output and the per-head attention probabilities.
    pub fn attention(
        &mut self,
        name: &str,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        heads: usize,
    ) -> (Var, Vec<Array2<f64>>) {
        let d = self.tape.shape(q_in)[1];
        assert!(d % heads == 0, "d_model {d} not divisible by {heads} heads");
        let dh = d / heads;
        let q = self.linear(&format!("{name}.q"), q_in);
        let k = self.linear(&format!("{name}.k"), k_in);
        let v = self.linear(&format!("{name}.v"), v_in);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let scores = self.tape.matmul_nt(qh, kh);
            let scaled = self.tape.mul_scalar(scores, scale);
            let p = self.tape.softmax_rows(scaled);
            probs.push(
                self.tape
                    .value(p)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned(),
            );
            outs.push(self.tape.matmul(p, vh));
        }
        let cat = self.tape.concat_cols(&outs);
        (self.linear(&format!("{name}.o"), cat), probs)
    }

    /// Three dense layers with ReLU between; no activation on the last.
    pub fn mlp3(&mut self, name: &str, x: Var) -> Var {
        let h1 = self.linear(&format!("{name}.0"), x);
        let h1 = self.tape.relu(h1);
        let h2 = self.linear(&format!("{name}.1"), h1);
        let h2 = self.tape.relu(h2);
        self.linear(&format!("{name}.2"), h2)
    }

    /// 1x1 convolution over `x: [h, w, cin]`.
    pub fn conv1x1(&mut self, name: &str, x: Var) -> Var {
        let shape = self.tape.shape(x).to_vec();
        let (h, w, cin) = (shape[0], shape[1], shape[2]);
        let flat = self.tape.reshape(x, &[h * w, cin]);
        let y = self.linear(name, flat);
        let cout = self.tape.shape(y)[1];
        self.tape.reshape(y, &[h, w, cout])
    }

    /// 3x3 convolution with padding 1 over `x: [h, w, cin]`.
    pub fn conv3x3(&mut self, name: &str, x: Var) -> Var {
        let shape = self.tape.shape(x).to_vec();
        let (h, w) = (shape[0], shape[1]);
        let cols = self.tape.im2col3x3(x);
        let y = self.linear(name, cols);
        let cout = self.tape.shape(y)[1];
        self.tape.reshape(y, &[h, w, cout])
    }

    /// Transposed convolution, kernel size == stride `k`, `x: [h, w, cin]`.
    pub fn deconv(&mut self, name: &str, x: Var, k: usize) -> Var {
        let shape = self.tape.shape(x).to_vec();
        let (h, w, cin) = (shape[0], shape[1], shape[2]);
        let flat = self.tape.reshape(x, &[h * w, cin]);
        let w_var = self.p(&format!("{name}.w"));
        let kkcout = self.tape.shape(w_var)[1];
        let cout = kkcout / (k * k);
        let y = self.tape.matmul(flat, w_var);
        let grid = self.tape.reshape(y, &[h, w, k * k * cout]);
        let up = self.tape.pixel_shuffle(grid, k, cout);
        let b = self.p(&format!("{name}.b"));
        let flat_up = self.tape.reshape(up, &[h * k * w * k, cout]);
        let biased = self.tape.add_row(flat_up, b);
        self.tape.reshape(biased, &[h * k, w * k, cout])
    }

    /// Channel-wise layer norm over `x: [h, w, c]`.
    pub fn layer_norm_hwc(&mut self, name: &str, x: Var) -> Var {
        let shape = self.tape.shape(x).to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let flat = self.tape.reshape(x, &[h * w, c]);
        let y = self.layer_norm(name, flat);
        self.tape.reshape(y, &[h, w, c])
    }
}

/// 2-D sinusoidal position encoding for an `h` x `w` grid, width `d`
/// (row features in the first half, column features in the second).
pub fn sincos_2d(h: usize, w: usize, d: usize) -> Array2<f64> {
    assert!(d % 4 == 0, "position encoding width must be divisible by 4");
    let half = d / 2;
    let pairs = half / 2;
    let mut out = Array2::<f64>::zeros((h * w, d));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            let ny = (y as f64 + 0.5) / h as f64 * 2.0 * std::f64::consts::PI;
            let nx = (x as f64 + 0.5) / w as f64 * 2.0 * std::f64::consts::PI;
            for i in 0..pairs {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                out[(row, 2 * i)] = (ny * freq).sin();
                out[(row, 2 * i + 1)] = (ny * freq).cos();
                out[(row, half + 2 * i)] = (nx * freq).sin();
                out[(row, half + 2 * i + 1)] = (nx * freq).cos();
            }
        }
    }
    out
}

/// Flatten a `[h, w, c]` tape value into `[h*w, c]`.
pub fn flatten_grid(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    tape.reshape(x, &[shape[0] * shape[1], shape[2]])
}

/// Leaf helper for 3-d arrays.
pub fn leaf3(tape: &mut Tape, a: ndarray::Array3<f64>) -> Var {
    tape.leaf(a.into_dyn())
}

/// Read a rank-3 value out of the tape.
pub fn value3(tape: &Tape, v: Var) -> ndarray::Array3<f64> {
    tape.value(v)
        .view()
        .into_dimensionality::<Ix3>()
        .expect("rank-3 value")
        .to_owned()
}

/// Read a rank-2 value out of the tape.
pub fn value2(tape: &Tape, v: Var) -> Array2<f64> {
    tape.value(v)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank-2 value")
        .to_owned()
}

/// Read a rank-1 value out of the tape.
pub fn value1(tape: &Tape, v: Var) -> Array1<f64> {
    tape.value(v)
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("rank-1 value")
        .to_owned()
}

/// Zero-filled dynamic array.
pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}
