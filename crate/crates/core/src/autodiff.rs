//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! record once in reverse and accumulates gradients. Everything is `f64` and
//! single-threaded with a fixed reduction order, so a forward/backward pass
//! is bit-reproducible and accurate enough for central-difference checks.
//!
//! Tensors are dynamic-rank (`ArrayD`): scalars are 0-d, vectors `[n]`,
//! matrices `[m, n]`, feature maps `[h, w, c]`.

use ndarray::{ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tape, &ArrayD<f64>, &mut Vec<Option<ArrayD<f64>>>)>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

/// Gradients of one scalar root with respect to every node on the tape.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient for `v`, if any path connected it to the root.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate(grads: &mut Vec<Option<ArrayD<f64>>>, idx: usize, g: ArrayD<f64>) {
    match &mut grads[idx] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Record an input (leaf) tensor.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.ndim(), 0, "expected a scalar node");
        *a.first().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.ndim(),
            0,
            "backward requires a scalar root"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(self, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    // ---- elementwise binary -------------------------------------------------

    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes must match"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, g.clone());
                accumulate(grads, b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, g.clone());
                accumulate(grads, b.0, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                accumulate(grads, a.0, g * t.value(b));
                accumulate(grads, b.0, g * t.value(a));
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let value = self.value(a) / self.value(b);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let bv = t.value(b);
                accumulate(grads, a.0, g / bv);
                let av = t.value(a);
                accumulate(grads, b.0, -(g * av) / (bv * bv));
            })),
        )
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "maximum");
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.max(y));
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let (av, bv) = (t.value(a), t.value(b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga).and(av).and(bv).for_each(|e, &x, &y| {
                    if x < y {
                        *e = 0.0;
                    }
                });
                ndarray::Zip::from(&mut gb).and(av).and(bv).for_each(|e, &x, &y| {
                    if x >= y {
                        *e = 0.0;
                    }
                });
                accumulate(grads, a.0, ga);
                accumulate(grads, b.0, gb);
            })),
        )
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "minimum");
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let (av, bv) = (t.value(a), t.value(b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga).and(av).and(bv).for_each(|e, &x, &y| {
                    if x > y {
                        *e = 0.0;
                    }
                });
                ndarray::Zip::from(&mut gb).and(av).and(bv).for_each(|e, &x, &y| {
                    if x <= y {
                        *e = 0.0;
                    }
                });
                accumulate(grads, a.0, ga);
                accumulate(grads, b.0, gb);
            })),
        )
    }

    // ---- scalar broadcast ---------------------------------------------------

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, g.clone());
            })),
        )
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, g.mapv(|x| x * c));
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    // ---- row broadcast (bias / gain) ---------------------------------------

    /// `[m, n] + [n]`, broadcasting the vector across rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a)).to_owned();
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("add_row: rhs must be rank 1");
        assert_eq!(av.ncols(), bv.len(), "add_row: width mismatch");
        let value = (&av + &bv).into_dyn();
        self.push(
            value,
            Some(Box::new(move |_t, g, grads| {
                accumulate(grads, a.0, g.clone());
                let g2 = as2(g);
                accumulate(grads, b.0, g2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// `[m, n] * [n]`, broadcasting the vector across rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a)).to_owned();
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("mul_row: rhs must be rank 1")
            .to_owned();
        assert_eq!(av.ncols(), bv.len(), "mul_row: width mismatch");
        let value = (&av * &bv).into_dyn();
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let g2 = as2(g).to_owned();
                let bval = t
                    .value(b)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                accumulate(grads, a.0, (&g2 * &bval).into_dyn());
                let a2 = as2(t.value(a));
                let gb = (&g2 * &a2).sum_axis(Axis(0));
                accumulate(grads, b.0, gb.into_dyn());
            })),
        )
    }

    // ---- matmul -------------------------------------------------------------

    /// `[m, k] @ [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims must match");
        let value = av.dot(&bv).into_dyn();
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let g2 = as2(g);
                let av = as2(t.value(a));
                let bv = as2(t.value(b));
                accumulate(grads, a.0, g2.dot(&bv.t()).into_dyn());
                accumulate(grads, b.0, av.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// `[m, k] @ [n, k]^T -> [m, n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt: inner dims must match");
        let value = av.dot(&bv.t()).into_dyn();
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let g2 = as2(g);
                let av = as2(t.value(a));
                let bv = as2(t.value(b));
                accumulate(grads, a.0, g2.dot(&bv).into_dyn());
                accumulate(grads, b.0, g2.t().dot(&av).into_dyn());
            })),
        )
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let gs = *g.first().unwrap();
                let shape = t.value(a).raw_dim();
                accumulate(grads, a.0, ArrayD::from_elem(shape, gs));
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum() / n);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let gs = *g.first().unwrap() / n;
                let shape = t.value(a).raw_dim();
                accumulate(grads, a.0, ArrayD::from_elem(shape, gs));
            })),
        )
    }

    /// `[m, n] -> [m]`, summing each row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = as2(self.value(a)).sum_axis(Axis(1)).into_dyn();
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let (m, n) = as2(t.value(a)).dim();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut out = ndarray::Array2::<f64>::zeros((m, n));
                for i in 0..m {
                    out.row_mut(i).fill(g1[i]);
                }
                accumulate(grads, a.0, out.into_dyn());
            })),
        )
    }

    // ---- unary ---------------------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(t.value(a))
                    .for_each(|e, &x| {
                        if x <= 0.0 {
                            *e = 0.0;
                        }
                    });
                accumulate(grads, a.0, ga);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_f);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let s = t.value(a).mapv(sigmoid_f);
                accumulate(grads, a.0, g * &(s.mapv(|v| v * (1.0 - v))));
            })),
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus_f);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let d = t.value(a).mapv(sigmoid_f);
                accumulate(grads, a.0, g * &d);
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let d = t.value(a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accumulate(grads, a.0, g * &d);
            })),
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_f);
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let d = t.value(a).mapv(gelu_grad_f);
                accumulate(grads, a.0, g * &d);
            })),
        )
    }

    // ---- normalization / softmax ----------------------------------------------

    /// Row-wise softmax of a `[m, n]` tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = as2(self.value(a));
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let node = self.push(
            out.into_dyn(),
            Some(Box::new(move |_t, _g, _grads| {})),
        );
        // Rebuild the node with a closure that can see its own output.
        let idx = node.0;
        self.nodes[idx].back = Some(Box::new(move |t, g, grads| {
            let p = as2(&t.nodes[idx].value);
            let g2 = as2(g);
            let mut ga = ndarray::Array2::<f64>::zeros(p.dim());
            for i in 0..p.nrows() {
                let dot = g2.row(i).dot(&p.row(i));
                for j in 0..p.ncols() {
                    ga[(i, j)] = p[(i, j)] * (g2[(i, j)] - dot);
                }
            }
            accumulate(grads, a.0, ga.into_dyn());
        }));
        node
    }

    /// Row-wise log-softmax of a `[m, n]` tensor.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = as2(self.value(a));
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
            row.mapv_inplace(|v| v - lse);
        }
        let node = self.push(out.into_dyn(), Some(Box::new(|_t, _g, _grads| {})));
        let idx = node.0;
        self.nodes[idx].back = Some(Box::new(move |t, g, grads| {
            let y = as2(&t.nodes[idx].value);
            let g2 = as2(g);
            let mut ga = g2.to_owned();
            for i in 0..y.nrows() {
                let gsum: f64 = g2.row(i).sum();
                for j in 0..y.ncols() {
                    ga[(i, j)] -= y[(i, j)].exp() * gsum;
                }
            }
            accumulate(grads, a.0, ga.into_dyn());
        }));
        node
    }

    /// Row-wise standardization of `[m, n]`: zero mean, unit variance per row.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = as2(self.value(a));
        let n = av.ncols() as f64;
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let mu = row.mean().unwrap();
            let var = row.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mu) * inv);
        }
        let node = self.push(out.into_dyn(), Some(Box::new(|_t, _g, _grads| {})));
        let idx = node.0;
        self.nodes[idx].back = Some(Box::new(move |t, g, grads| {
            let y = as2(&t.nodes[idx].value);
            let x = as2(t.value(a));
            let g2 = as2(g);
            let n = x.ncols() as f64;
            let mut ga = ndarray::Array2::<f64>::zeros(x.dim());
            for i in 0..x.nrows() {
                let mu = x.row(i).mean().unwrap();
                let var = x.row(i).fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / n;
                let inv = 1.0 / (var + eps).sqrt();
                let g_mean: f64 = g2.row(i).sum() / n;
                let gy_mean: f64 = g2
                    .row(i)
                    .iter()
                    .zip(y.row(i).iter())
                    .map(|(&gv, &yv)| gv * yv)
                    .sum::<f64>()
                    / n;
                for j in 0..x.ncols() {
                    ga[(i, j)] = inv * (g2[(i, j)] - g_mean - y[(i, j)] * gy_mean);
                }
            }
            accumulate(grads, a.0, ga.into_dyn());
        }));
        node
    }

    // ---- shape ops -------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_len: usize = self.value(a).len();
        let new_len: usize = shape.iter().product();
        assert_eq!(old_len, new_len, "reshape: element count must match");
        let value = self
            .value(a)
            .to_owned()
            .into_shape(IxDyn(shape))
            .expect("reshape");
        self.push(
            value,
            Some(Box::new(move |t, g, grads| {
                let shape = t.value(a).raw_dim();
                let gg = g
                    .to_owned()
                    .as_standard_layout()
                    .to_owned()
                    .into_shape(shape)
                    .expect("reshape backward");
                accumulate(grads, a.0, gg);
            })),
        )
    }

    /// Columns `[start, start+len)` of a `[m, n]` tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = as2(self.value(a));
        assert!(start + len <= av.ncols(), "slice_cols out of range");
        let value = av.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |t, g, grads| {
                let (m, n) = as2(t.value(a)).dim();
                let mut ga = ndarray::Array2::<f64>::zeros((m, n));
                ga.slice_mut(ndarray::s![.., start..start + len])
                    .assign(&as2(g));
                accumulate(grads, a.0, ga.into_dyn());
            })),
        )
    }

    /// Concatenate `[m, n_i]` tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let value = ndarray::concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_cols");
        let owned: Vec<Var> = parts.to_vec();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |t, g, grads| {
                let g2 = as2(g);
                let mut start = 0;
                for &p in &owned {
                    let w = as2(t.value(p)).ncols();
                    let slice = g2.slice(ndarray::s![.., start..start + w]).to_owned();
                    accumulate(grads, p.0, slice.into_dyn());
                    start += w;
                }
            })),
        )
    }

    /// Concatenate `[m_i, n]` tensors along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let value = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_rows");
        let owned: Vec<Var> = parts.to_vec();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |t, g, grads| {
                let g2 = as2(g);
                let mut start = 0;
                for &p in &owned {
                    let h = as2(t.value(p)).nrows();
                    let slice = g2.slice(ndarray::s![start..start + h, ..]).to_owned();
                    accumulate(grads, p.0, slice.into_dyn());
                    start += h;
                }
            })),
        )
    }

    /// Gather rows of a `[m, n]` tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = as2(self.value(a));
        let mut out = ndarray::Array2::<f64>::zeros((indices.len(), av.ncols()));
        for (j, &i) in indices.iter().enumerate() {
            assert!(i < av.nrows(), "gather_rows: index {i} out of range");
            out.row_mut(j).assign(&av.row(i));
        }
        let idx: Vec<usize> = indices.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |t, g, grads| {
                let (m, n) = as2(t.value(a)).dim();
                let g2 = as2(g);
                let mut ga = ndarray::Array2::<f64>::zeros((m, n));
                for (j, &i) in idx.iter().enumerate() {
                    let mut row = ga.row_mut(i);
                    row += &g2.row(j);
                }
                accumulate(grads, a.0, ga.into_dyn());
            })),
        )
    }

    // ---- spatial ops -------------------------------------------------------------

    /// Unfold 3x3 neighbourhoods (zero padding 1) of `[h, w, c]` into `[h*w, 9c]`.
    pub fn im2col3x3(&mut self, a: Var) -> Var {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("im2col3x3: rank-3 input");
        let (h, w, c) = av.dim();
        let mut out = ndarray::Array2::<f64>::zeros((h * w, 9 * c));
        for y in 0..h {
            for x in 0..w {
                let row = y * w + x;
                for (k, (dy, dx)) in NEIGH3X3.iter().enumerate() {
                    let sy = y as i64 + dy;
                    let sx = x as i64 + dx;
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        for ch in 0..c {
                            out[(row, k * c + ch)] = av[(sy as usize, sx as usize, ch)];
                        }
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |t, g, grads| {
                let shape = t.value(a).raw_dim();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let g2 = as2(g);
                let mut ga = ndarray::Array3::<f64>::zeros((h, w, c));
                for y in 0..h {
                    for x in 0..w {
                        let row = y * w + x;
                        for (k, (dy, dx)) in NEIGH3X3.iter().enumerate() {
                            let sy = y as i64 + dy;
                            let sx = x as i64 + dx;
                            if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                for ch in 0..c {
                                    ga[(sy as usize, sx as usize, ch)] += g2[(row, k * c + ch)];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, a.0, ga.into_dyn());
            })),
        )
    }

    /// Rearrange `[h, w, k*k*c]` into `[h*k, w*k, c]` (inverse of space-to-depth).
    pub fn pixel_shuffle(&mut self, a: Var, k: usize, c: usize) -> Var {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("pixel_shuffle: rank-3 input");
        let (h, w, kkc) = av.dim();
        assert_eq!(kkc, k * k * c, "pixel_shuffle: channel count mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((h * k, w * k, c));
        for y in 0..h {
            for x in 0..w {
                for dy in 0..k {
                    for dx in 0..k {
                        for ch in 0..c {
                            out[(y * k + dy, x * k + dx, ch)] = av[(y, x, (dy * k + dx) * c + ch)];
                        }
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |t, g, grads| {
                let shape = t.value(a).raw_dim();
                let (h, w) = (shape[0], shape[1]);
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<f64>::zeros((h, w, k * k * c));
                for y in 0..h {
                    for x in 0..w {
                        for dy in 0..k {
                            for dx in 0..k {
                                for ch in 0..c {
                                    ga[(y, x, (dy * k + dx) * c + ch)] =
                                        g3[(y * k + dy, x * k + dx, ch)];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, a.0, ga.into_dyn());
            })),
        )
    }

    /// 2x2 max pooling with stride 2 on `[h, w, c]`; ties route the gradient to
    /// the first maximal element in scan order.
    pub fn max_pool2(&mut self, a: Var) -> Var {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("max_pool2: rank-3 input");
        let (h, w, c) = av.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: odd spatial dims");
        let mut out = ndarray::Array3::<f64>::zeros((h / 2, w / 2, c));
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for (dy, dx) in POOL2X2 {
                        best = best.max(av[(2 * y + dy, 2 * x + dx, ch)]);
                    }
                    out[(y, x, ch)] = best;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |t, g, grads| {
                let av = t.value(a).view().into_dimensionality::<Ix3>().unwrap();
                let (h, w, c) = av.dim();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<f64>::zeros((h, w, c));
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut arg = (0, 0);
                            for (dy, dx) in POOL2X2 {
                                let v = av[(2 * y + dy, 2 * x + dx, ch)];
                                if v > best {
                                    best = v;
                                    arg = (dy, dx);
                                }
                            }
                            ga[(2 * y + arg.0, 2 * x + arg.1, ch)] += g3[(y, x, ch)];
                        }
                    }
                }
                accumulate(grads, a.0, ga.into_dyn());
            })),
        )
    }

    /// 2x2 average pooling with stride 2 on `[h, w, c]`.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("avg_pool2: rank-3 input");
        let (h, w, c) = av.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial dims");
        let mut out = ndarray::Array3::<f64>::zeros((h / 2, w / 2, c));
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (dy, dx) in POOL2X2 {
                        acc += av[(2 * y + dy, 2 * x + dx, ch)];
                    }
                    out[(y, x, ch)] = acc * 0.25;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |t, g, grads| {
                let shape = t.value(a).raw_dim();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<f64>::zeros((h, w, c));
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        for ch in 0..c {
                            let v = g3[(y, x, ch)] * 0.25;
                            for (dy, dx) in POOL2X2 {
                                ga[(2 * y + dy, 2 * x + dx, ch)] += v;
                            }
                        }
                    }
                }
                accumulate(grads, a.0, ga.into_dyn());
            })),
        )
    }

    /// Bilinear resize of `[h, w, c]` (half-pixel centers, clamp-to-edge).
    pub fn bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bilinear: rank-3 input");
        let (h, w, _c) = av.dim();
        let value = crate::util::bilinear_resize(&av.to_owned(), oh, ow);
        self.push(
            value.into_dyn(),
            Some(Box::new(move |t, g, grads| {
                let shape = t.value(a).raw_dim();
                let (h0, w0, c) = (shape[0], shape[1], shape[2]);
                debug_assert_eq!((h0, w0), (h, w));
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<f64>::zeros((h0, w0, c));
                for oy in 0..oh {
                    let fy = (oy as f64 + 0.5) * h0 as f64 / oh as f64 - 0.5;
                    let y0 = fy.floor();
                    let ty = fy - y0;
                    let y0i = (y0 as i64).clamp(0, h0 as i64 - 1) as usize;
                    let y1i = (y0 as i64 + 1).clamp(0, h0 as i64 - 1) as usize;
                    for ox in 0..ow {
                        let fx = (ox as f64 + 0.5) * w0 as f64 / ow as f64 - 0.5;
                        let x0 = fx.floor();
                        let tx = fx - x0;
                        let x0i = (x0 as i64).clamp(0, w0 as i64 - 1) as usize;
                        let x1i = (x0 as i64 + 1).clamp(0, w0 as i64 - 1) as usize;
                        for ch in 0..c {
                            let gv = g3[(oy, ox, ch)];
                            ga[(y0i, x0i, ch)] += gv * (1.0 - ty) * (1.0 - tx);
                            ga[(y0i, x1i, ch)] += gv * (1.0 - ty) * tx;
                            ga[(y1i, x0i, ch)] += gv * ty * (1.0 - tx);
                            ga[(y1i, x1i, ch)] += gv * ty * tx;
                        }
                    }
                }
                accumulate(grads, a.0, ga.into_dyn());
            })),
        )
    }
}

const NEIGH3X3: [(i64, i64); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

const POOL2X2: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_f(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_K: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_f(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
}
