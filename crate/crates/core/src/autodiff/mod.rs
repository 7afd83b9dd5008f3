//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a computation as a topologically ordered list of
//! nodes; [`Tape::backward`] walks it once in reverse, accumulating
//! gradients. The op set is exactly what the denoiser and losses need —
//! dense linear algebra, graph gathers/scatters with per-segment
//! reductions, a few equivariance-preserving 3-vector ops, and the loss
//! kernels — all in f64.
//!
//! Shape contracts are asserted at op-construction time (misuse is a
//! programming error, not runtime input), and every op's backward pass is
//! verified against central finite differences in the tests below.

pub mod gradcheck;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful for the
/// tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut GradStore)>;

/// Per-node gradients produced by [`Tape::backward`].
pub struct GradStore {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    /// Accumulate a gradient contribution for a node.
    pub fn add(&mut self, id: usize, g: ArrayD<f64>) {
        match &mut self.grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn add_view(&mut self, id: usize, g: ArrayViewD<f64>) {
        match &mut self.grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g.to_owned()),
        }
    }

    /// Gradient of the root with respect to a node, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

/// Records values and backward closures for one forward pass.
#[derive(Default)]
pub struct Tape {
    values: Vec<ArrayD<f64>>,
    backs: Vec<Option<BackFn>>,
    /// Parameter-store id for parameter leaves.
    param_of: Vec<Option<usize>>,
}

/// Smoothing inside Euclidean norms so gradients stay finite at zero.
const NORM_EPS_SQ: f64 = 1e-16;
/// Offset added to distances before normalizing relative vectors.
const UNIT_EPS: f64 = 1e-8;
/// Variance floors for the normalization layers.
const LN_EPS: f64 = 1e-5;
const RMS_EPS: f64 = 1e-8;
/// Smoothing inside the per-graph displacement RMS.
const POSNORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        self.param_of.push(None);
        Var(self.values.len() - 1)
    }

    /// A leaf with no gradient flow.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// A parameter leaf tagged with its parameter-store id. Gradients for
    /// it can be collected with [`GradStore::get`] or by the training loop
    /// via the id mapping.
    pub fn param(&mut self, store_id: usize, value: ArrayD<f64>) -> Var {
        let v = self.push(value, None);
        self.param_of[v.0] = Some(store_id);
        v
    }

    /// (node id, parameter id) pairs for all parameter leaves on the tape.
    pub fn param_nodes(&self) -> Vec<(usize, usize)> {
        self.param_of
            .iter()
            .enumerate()
            .filter_map(|(n, p)| p.map(|p| (n, p)))
            .collect()
    }

    /// Reverse sweep from a scalar root. Every node reachable from the root
    /// receives its gradient.
    pub fn backward(&self, root: Var) -> GradStore {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.values[root.0].shape()
        );
        let mut store = GradStore::new(self.values.len());
        store.add(
            root.0,
            ArrayD::from_elem(self.values[root.0].raw_dim(), 1.0),
        );
        for id in (0..=root.0).rev() {
            if store.grads[id].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[id] {
                // Parents always precede children, so nothing accumulates
                // into `id` after this point; borrow its gradient by take.
                let g = store.grads[id].take().unwrap();
                back(&self.values, &g, &mut store);
                store.grads[id] = Some(g);
            }
        }
        store
    }

    fn val2(&self, v: Var) -> ndarray::ArrayView2<'_, f64> {
        self.values[v.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected rank-2 tensor")
    }

    fn val3(&self, v: Var) -> ndarray::ArrayView3<'_, f64> {
        self.values[v.0]
            .view()
            .into_dimensionality::<Ix3>()
            .expect("expected rank-3 tensor")
    }

    // ---- elementwise and linear algebra ----

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] + &self.values[b.0];
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                sink.add_view(a.0, g.view());
                sink.add_view(b.0, g.view());
            })),
        )
    }

    /// Elementwise difference.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] - &self.values[b.0];
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                sink.add_view(a.0, g.view());
                sink.add(b.0, g.mapv(|x| -x));
            })),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] * &self.values[b.0];
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink.add(a.0, g * &vals[b.0]);
                sink.add(b.0, g * &vals[a.0]);
            })),
        )
    }

    /// Multiply by a compile-time-known scalar.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.values[a.0].mapv(|x| x * k);
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                sink.add(a.0, g.mapv(|x| x * k));
            })),
        )
    }

    /// Add a bias vector along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let f = *self.values[a.0].shape().last().expect("rank >= 1");
        assert_eq!(self.values[bias.0].shape(), [f]);
        let out = &self.values[a.0] + &self.values[bias.0];
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                sink.add_view(a.0, g.view());
                // Sum over all leading axes.
                let gf = g
                    .view()
                    .into_shape_with_order((g.len() / f, f))
                    .expect("contiguous");
                sink.add(bias.0, gf.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.val2(a);
        let bv = self.val2(b);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims disagree");
        let out = av.dot(&bv).into_dyn();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
                sink.add(a.0, g2.dot(&bv.t()).into_dyn());
                sink.add(b.0, av.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Reshape to a new shape with the same element count (row-major order,
    /// regardless of the source's memory layout).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        fn reshaped(arr: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
            let flat: Vec<f64> = arr.iter().copied().collect();
            ArrayD::from_shape_vec(IxDyn(shape), flat)
                .expect("reshape must preserve element count")
        }
        let old_shape: Vec<usize> = self.values[a.0].shape().to_vec();
        let out = reshaped(&self.values[a.0], shape);
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                sink.add(a.0, reshaped(g, &old_shape));
            })),
        )
    }

    /// Apply a [k, n] matrix along the last axis of any-rank input.
    pub fn matmul_last(&mut self, a: Var, w: Var) -> Var {
        let shape: Vec<usize> = self.values[a.0].shape().to_vec();
        let k = *shape.last().expect("rank >= 1");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = self.reshape(a, &[rows, k]);
        let out = self.matmul(flat, w);
        let n = self.val2(w).ncols();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = n;
        self.reshape(out, &out_shape)
    }

    /// Concatenate along an axis.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes agree");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| self.values[p.0].shape()[axis])
            .collect();
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let mut lo = 0;
                for (id, w) in ids.iter().zip(&widths) {
                    let gs = g.slice_axis(Axis(axis), ndarray::Slice::from(lo..lo + w));
                    sink.add_view(*id, gs);
                    lo += w;
                }
            })),
        )
    }

    /// Contiguous slice along an axis.
    pub fn slice_axis(&mut self, a: Var, axis: usize, lo: usize, hi: usize) -> Var {
        let full = self.values[a.0].shape()[axis];
        assert!(lo < hi && hi <= full, "slice [{lo},{hi}) of axis len {full}");
        let out = self.values[a.0]
            .slice_axis(Axis(axis), ndarray::Slice::from(lo..hi))
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let mut ga = ArrayD::<f64>::zeros(vals[a.0].raw_dim());
                ga.slice_axis_mut(Axis(axis), ndarray::Slice::from(lo..hi))
                    .assign(g);
                sink.add(a.0, ga);
            })),
        )
    }

    // ---- graph gathers, scatters and segment reductions ----

    /// Gather rows (axis 0) by index; indices may repeat.
    pub fn row_gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let n = self.values[a.0].shape()[0];
        assert!(idx.iter().all(|&i| i < n), "gather index out of range");
        let out = self.values[a.0].select(Axis(0), idx);
        let idx: Vec<usize> = idx.to_vec();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let mut ga = ArrayD::<f64>::zeros(vals[a.0].raw_dim());
                for (row, &i) in idx.iter().enumerate() {
                    let mut dst = ga.index_axis_mut(Axis(0), i);
                    dst += &g.index_axis(Axis(0), row);
                }
                sink.add(a.0, ga);
            })),
        )
    }

    /// Sum rows into `n_out` segments: out[s] = Σ_{p: seg[p]=s} a[p].
    /// Rows are accumulated in value-canonical order so that permuting the
    /// rows of a segment never changes the sum, not even in the last ulp.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], n_out: usize) -> Var {
        assert_eq!(self.values[a.0].shape()[0], seg.len());
        assert!(seg.iter().all(|&s| s < n_out), "segment id out of range");
        let mut shape: Vec<usize> = self.values[a.0].shape().to_vec();
        shape[0] = n_out;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        let groups = canonical_segment_order(self.values[a.0].view(), seg, n_out);
        for (s, rows) in groups.iter().enumerate() {
            let mut dst = out.index_axis_mut(Axis(0), s);
            for &row in rows {
                dst += &self.values[a.0].index_axis(Axis(0), row);
            }
        }
        let seg: Vec<usize> = seg.to_vec();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let mut ga = ArrayD::<f64>::zeros(vals[a.0].raw_dim());
                for (row, &s) in seg.iter().enumerate() {
                    let mut dst = ga.index_axis_mut(Axis(0), row);
                    dst += &g.index_axis(Axis(0), s);
                }
                sink.add(a.0, ga);
            })),
        )
    }

    /// Rescale each row by a constant per-row factor (no gradient through
    /// the factors; used for fixed 1/N graph normalizers).
    pub fn scale_rows_const(&mut self, a: Var, factors: &[f64]) -> Var {
        assert_eq!(self.values[a.0].shape()[0], factors.len());
        let mut out = self.values[a.0].clone();
        for (row, &f) in factors.iter().enumerate() {
            out.index_axis_mut(Axis(0), row).mapv_inplace(|x| x * f);
        }
        let factors: Vec<f64> = factors.to_vec();
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let mut ga = g.clone();
                for (row, &f) in factors.iter().enumerate() {
                    ga.index_axis_mut(Axis(0), row).mapv_inplace(|x| x * f);
                }
                sink.add(a.0, ga);
            })),
        )
    }

    /// Per-segment, per-column softmax over rows: within each segment s and
    /// column f, out rows are softmax of the corresponding inputs. Empty
    /// segments are fine (they own no rows).
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], n_seg: usize) -> Var {
        let av = self.val2(a);
        assert_eq!(av.nrows(), seg.len());
        assert!(seg.iter().all(|&s| s < n_seg));
        let f = av.ncols();
        // Stabilize by per-(segment, column) max.
        let mut maxes = ndarray::Array2::<f64>::from_elem((n_seg, f), f64::NEG_INFINITY);
        for (row, &s) in seg.iter().enumerate() {
            for c in 0..f {
                if av[[row, c]] > maxes[[s, c]] {
                    maxes[[s, c]] = av[[row, c]];
                }
            }
        }
        let mut out = ndarray::Array2::<f64>::zeros((seg.len(), f));
        for (row, &s) in seg.iter().enumerate() {
            for c in 0..f {
                out[[row, c]] = (av[[row, c]] - maxes[[s, c]]).exp();
            }
        }
        // Denominators accumulate in value-canonical row order so the
        // normalizer is exactly invariant to row permutations of a segment.
        let mut denoms = ndarray::Array2::<f64>::zeros((n_seg, f));
        let groups = canonical_segment_order(self.values[a.0].view(), seg, n_seg);
        for (s, rows) in groups.iter().enumerate() {
            for &row in rows {
                for c in 0..f {
                    denoms[[s, c]] += out[[row, c]];
                }
            }
        }
        for (row, &s) in seg.iter().enumerate() {
            for c in 0..f {
                out[[row, c]] /= denoms[[s, c]];
            }
        }
        let seg_b: Vec<usize> = seg.to_vec();
        let out_id = self.values.len(); // id this node will get
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                // dL/da = y ⊙ (g − Σ_seg(y ⊙ g)), per segment and column.
                let y = vals[out_id].view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let f = y.ncols();
                let mut dots = ndarray::Array2::<f64>::zeros((n_seg, f));
                for (row, &s) in seg_b.iter().enumerate() {
                    for c in 0..f {
                        dots[[s, c]] += y[[row, c]] * g2[[row, c]];
                    }
                }
                let mut ga = ndarray::Array2::<f64>::zeros(y.raw_dim());
                for (row, &s) in seg_b.iter().enumerate() {
                    for c in 0..f {
                        ga[[row, c]] = y[[row, c]] * (g2[[row, c]] - dots[[s, c]]);
                    }
                }
                sink.add(a.0, ga.into_dyn());
            })),
        )
    }

    // ---- nonlinearities and normalizations ----

    /// SiLU activation x·σ(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x * sigmoid(x));
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let ga = ndarray::Zip::from(g)
                    .and(&vals[a.0])
                    .map_collect(|&go, &x| {
                        let s = sigmoid(x);
                        go * s * (1.0 + x * (1.0 - s))
                    });
                sink.add(a.0, ga);
            })),
        )
    }

    /// Standard layer normalization over the last axis of a [n, f] tensor
    /// with learned gain and shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let av = self.val2(a);
        let (n, f) = av.dim();
        assert_eq!(self.values[gamma.0].shape(), [f]);
        assert_eq!(self.values[beta.0].shape(), [f]);
        let gv = self.values[gamma.0].clone();
        let bv = self.values[beta.0].clone();
        let mut out = ndarray::Array2::<f64>::zeros((n, f));
        for i in 0..n {
            let row = av.row(i);
            let mean = row.mean().unwrap();
            let var = row.mapv(|x| (x - mean) * (x - mean)).mean().unwrap();
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..f {
                out[[i, c]] = (av[[i, c]] - mean) * inv * gv[c] + bv[c];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let av = vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let gv = vals[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (n, f) = av.dim();
                let mut ga = ndarray::Array2::<f64>::zeros((n, f));
                let mut ggamma = ndarray::Array1::<f64>::zeros(f);
                let mut gbeta = ndarray::Array1::<f64>::zeros(f);
                for i in 0..n {
                    let row = av.row(i);
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|x| (x - mean) * (x - mean)).mean().unwrap();
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    // xhat = (x - mean) * inv; dL/dxhat = g * gamma
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..f {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = g2[[i, c]] * gv[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        ggamma[c] += g2[[i, c]] * xhat;
                        gbeta[c] += g2[[i, c]];
                    }
                    let ff = f as f64;
                    for c in 0..f {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = g2[[i, c]] * gv[c];
                        ga[[i, c]] =
                            inv * (dxhat - sum_dxhat / ff - xhat * sum_dxhat_xhat / ff);
                    }
                }
                sink.add(a.0, ga.into_dyn());
                sink.add(gamma.0, ggamma.into_dyn());
                sink.add(beta.0, gbeta.into_dyn());
            })),
        )
    }

    /// RMS normalization for vector features [n, 3, c]: each atom's vector
    /// block is divided by sqrt(mean_c ‖v_c‖² + eps) and scaled per channel
    /// by a learned gain. Rotation-equivariant: the scale is built from
    /// invariant norms only.
    pub fn vec_rms_norm(&mut self, v: Var, gamma: Var) -> Var {
        let vv = self.val3(v);
        let (n, three, c) = vv.dim();
        assert_eq!(three, 3);
        assert_eq!(self.values[gamma.0].shape(), [c]);
        let gv = self.values[gamma.0].clone();
        let mut out = ndarray::Array3::<f64>::zeros((n, 3, c));
        for i in 0..n {
            let mut q = 0.0;
            for d in 0..3 {
                for ch in 0..c {
                    q += vv[[i, d, ch]] * vv[[i, d, ch]];
                }
            }
            let inv = 1.0 / (q / c as f64 + RMS_EPS).sqrt();
            for d in 0..3 {
                for ch in 0..c {
                    out[[i, d, ch]] = vv[[i, d, ch]] * inv * gv[ch];
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let vv = vals[v.0].view().into_dimensionality::<Ix3>().unwrap();
                let gm = vals[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (n, _, c) = vv.dim();
                let mut gvin = ndarray::Array3::<f64>::zeros((n, 3, c));
                let mut ggamma = ndarray::Array1::<f64>::zeros(c);
                for i in 0..n {
                    let mut q = 0.0;
                    for d in 0..3 {
                        for ch in 0..c {
                            q += vv[[i, d, ch]] * vv[[i, d, ch]];
                        }
                    }
                    let m = q / c as f64 + RMS_EPS;
                    let inv = 1.0 / m.sqrt();
                    // y = v * inv * gamma; dinv/dv = -v/(c*m^{3/2})
                    let mut dot = 0.0; // Σ g*gamma*v
                    for d in 0..3 {
                        for ch in 0..c {
                            dot += g3[[i, d, ch]] * gm[ch] * vv[[i, d, ch]];
                            ggamma[ch] += g3[[i, d, ch]] * vv[[i, d, ch]] * inv;
                        }
                    }
                    let k = dot / (c as f64 * m * m.sqrt());
                    for d in 0..3 {
                        for ch in 0..c {
                            gvin[[i, d, ch]] = g3[[i, d, ch]] * gm[ch] * inv - vv[[i, d, ch]] * k;
                        }
                    }
                }
                sink.add(v.0, gvin.into_dyn());
                sink.add(gamma.0, ggamma.into_dyn());
            })),
        )
    }

    // ---- geometry ops ----

    /// Row-wise Euclidean norm of a [p, f] tensor → [p, 1], smoothed so the
    /// gradient exists at the origin.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.val2(a);
        let p = av.nrows();
        let mut out = ndarray::Array2::<f64>::zeros((p, 1));
        for i in 0..p {
            out[[i, 0]] = (av.row(i).dot(&av.row(i)) + NORM_EPS_SQ).sqrt();
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let av = vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (p, f) = av.dim();
                let mut ga = ndarray::Array2::<f64>::zeros((p, f));
                for i in 0..p {
                    let n = (av.row(i).dot(&av.row(i)) + NORM_EPS_SQ).sqrt();
                    for c in 0..f {
                        ga[[i, c]] = g2[[i, 0]] * av[[i, c]] / n;
                    }
                }
                sink.add(a.0, ga.into_dyn());
            })),
        )
    }

    /// Normalize each row of a [p, 3] tensor to (near-)unit length:
    /// y = r / (‖r‖ + ε). Equivariant direction features.
    pub fn unit_rows(&mut self, a: Var) -> Var {
        let av = self.val2(a);
        let (p, f) = av.dim();
        let mut out = ndarray::Array2::<f64>::zeros((p, f));
        for i in 0..p {
            let n = (av.row(i).dot(&av.row(i)) + NORM_EPS_SQ).sqrt();
            for c in 0..f {
                out[[i, c]] = av[[i, c]] / (n + UNIT_EPS);
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let av = vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (p, f) = av.dim();
                let mut ga = ndarray::Array2::<f64>::zeros((p, f));
                for i in 0..p {
                    let n = (av.row(i).dot(&av.row(i)) + NORM_EPS_SQ).sqrt();
                    let d = n + UNIT_EPS;
                    let rg = av.row(i).dot(&g2.row(i));
                    for c in 0..f {
                        ga[[i, c]] = g2[[i, c]] / d - av[[i, c]] * rg / (n * d * d);
                    }
                }
                sink.add(a.0, ga.into_dyn());
            })),
        )
    }

    /// Per-channel norms of vector features: [n, 3, c] → [n, c].
    pub fn vec_channel_norms(&mut self, v: Var) -> Var {
        let vv = self.val3(v);
        let (n, _, c) = vv.dim();
        let mut out = ndarray::Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                let mut q = NORM_EPS_SQ;
                for d in 0..3 {
                    q += vv[[i, d, ch]] * vv[[i, d, ch]];
                }
                out[[i, ch]] = q.sqrt();
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let vv = vals[v.0].view().into_dimensionality::<Ix3>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (n, _, c) = vv.dim();
                let mut gv = ndarray::Array3::<f64>::zeros((n, 3, c));
                for i in 0..n {
                    for ch in 0..c {
                        let mut q = NORM_EPS_SQ;
                        for d in 0..3 {
                            q += vv[[i, d, ch]] * vv[[i, d, ch]];
                        }
                        let norm = q.sqrt();
                        for d in 0..3 {
                            gv[[i, d, ch]] = g2[[i, ch]] * vv[[i, d, ch]] / norm;
                        }
                    }
                }
                sink.add(v.0, gv.into_dyn());
            })),
        )
    }

    /// Channel-wise dot product of two [p, 3, c] tensors → [p, c].
    pub fn dot3(&mut self, a: Var, b: Var) -> Var {
        let av = self.val3(a);
        let bv = self.val3(b);
        assert_eq!(av.dim(), bv.dim());
        let (p, _, c) = av.dim();
        let mut out = ndarray::Array2::<f64>::zeros((p, c));
        for i in 0..p {
            for ch in 0..c {
                for d in 0..3 {
                    out[[i, ch]] += av[[i, d, ch]] * bv[[i, d, ch]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let av = vals[a.0].view().into_dimensionality::<Ix3>().unwrap();
                let bv = vals[b.0].view().into_dimensionality::<Ix3>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (p, _, c) = av.dim();
                let mut ga = ndarray::Array3::<f64>::zeros((p, 3, c));
                let mut gb = ndarray::Array3::<f64>::zeros((p, 3, c));
                for i in 0..p {
                    for ch in 0..c {
                        for d in 0..3 {
                            ga[[i, d, ch]] = g2[[i, ch]] * bv[[i, d, ch]];
                            gb[[i, d, ch]] = g2[[i, ch]] * av[[i, d, ch]];
                        }
                    }
                }
                sink.add(a.0, ga.into_dyn());
                sink.add(b.0, gb.into_dyn());
            })),
        )
    }

    /// Outer product of directions and channel weights:
    /// ([p, 3], [p, c]) → [p, 3, c].
    pub fn outer3(&mut self, dir: Var, w: Var) -> Var {
        let dv = self.val2(dir);
        let wv = self.val2(w);
        assert_eq!(dv.ncols(), 3);
        assert_eq!(dv.nrows(), wv.nrows());
        let (p, c) = wv.dim();
        let mut out = ndarray::Array3::<f64>::zeros((p, 3, c));
        for i in 0..p {
            for d in 0..3 {
                for ch in 0..c {
                    out[[i, d, ch]] = dv[[i, d]] * wv[[i, ch]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let dv = vals[dir.0].view().into_dimensionality::<Ix2>().unwrap();
                let wv = vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (p, c) = wv.dim();
                let mut gd = ndarray::Array2::<f64>::zeros((p, 3));
                let mut gw = ndarray::Array2::<f64>::zeros((p, c));
                for i in 0..p {
                    for d in 0..3 {
                        for ch in 0..c {
                            gd[[i, d]] += g3[[i, d, ch]] * wv[[i, ch]];
                            gw[[i, ch]] += g3[[i, d, ch]] * dv[[i, d]];
                        }
                    }
                }
                sink.add(dir.0, gd.into_dyn());
                sink.add(w.0, gw.into_dyn());
            })),
        )
    }

    /// Broadcast-multiply channel weights over the spatial axis:
    /// ([p, c], [p, 3, c]) → [p, 3, c].
    pub fn mul_bcast3(&mut self, w: Var, v: Var) -> Var {
        let wv = self.val2(w);
        let vv = self.val3(v);
        assert_eq!(wv.nrows(), vv.dim().0);
        assert_eq!(wv.ncols(), vv.dim().2);
        let (p, _, c) = vv.dim();
        let mut out = ndarray::Array3::<f64>::zeros((p, 3, c));
        for i in 0..p {
            for d in 0..3 {
                for ch in 0..c {
                    out[[i, d, ch]] = wv[[i, ch]] * vv[[i, d, ch]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let wv = vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
                let vv = vals[v.0].view().into_dimensionality::<Ix3>().unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (p, _, c) = vv.dim();
                let mut gw = ndarray::Array2::<f64>::zeros((p, c));
                let mut gv = ndarray::Array3::<f64>::zeros((p, 3, c));
                for i in 0..p {
                    for d in 0..3 {
                        for ch in 0..c {
                            gw[[i, ch]] += g3[[i, d, ch]] * vv[[i, d, ch]];
                            gv[[i, d, ch]] = g3[[i, d, ch]] * wv[[i, ch]];
                        }
                    }
                }
                sink.add(w.0, gw.into_dyn());
                sink.add(v.0, gv.into_dyn());
            })),
        )
    }

    /// Multiply every row of [p, f] by the per-row scalar in [p, 1].
    pub fn mul_bcast_col(&mut self, a: Var, w: Var) -> Var {
        let av = self.val2(a);
        let wv = self.val2(w);
        assert_eq!(wv.ncols(), 1);
        assert_eq!(av.nrows(), wv.nrows());
        let (p, f) = av.dim();
        let mut out = ndarray::Array2::<f64>::zeros((p, f));
        for i in 0..p {
            for c in 0..f {
                out[[i, c]] = av[[i, c]] * wv[[i, 0]];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let av = vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let wv = vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (p, f) = av.dim();
                let mut ga = ndarray::Array2::<f64>::zeros((p, f));
                let mut gw = ndarray::Array2::<f64>::zeros((p, 1));
                for i in 0..p {
                    for c in 0..f {
                        ga[[i, c]] = g2[[i, c]] * wv[[i, 0]];
                        gw[[i, 0]] += g2[[i, c]] * av[[i, c]];
                    }
                }
                sink.add(a.0, ga.into_dyn());
                sink.add(w.0, gw.into_dyn());
            })),
        )
    }

    /// Remove each graph's mean from its rows: coordinates [n, 3] with a
    /// graph id per row. Linear projection; its own transpose, so backward
    /// applies the same centering to the gradient.
    pub fn center_per_graph(&mut self, x: Var, graph_of_row: &[usize], n_graphs: usize) -> Var {
        let xv = self.val2(x);
        assert_eq!(xv.nrows(), graph_of_row.len());
        let f = xv.ncols();
        let center = move |input: ndarray::ArrayView2<f64>, seg: &[usize]| {
            // Means accumulate in value-canonical row order; a permutation of
            // a graph's rows then shifts every row by bit-identical amounts.
            let groups = canonical_segment_order(input.into_dyn(), seg, n_graphs);
            let mut sums = ndarray::Array2::<f64>::zeros((n_graphs, f));
            let mut counts = vec![0.0f64; n_graphs];
            for (gid, rows) in groups.iter().enumerate() {
                counts[gid] = rows.len() as f64;
                for &row in rows {
                    for c in 0..f {
                        sums[[gid, c]] += input[[row, c]];
                    }
                }
            }
            let mut out = input.to_owned();
            for (row, &gid) in seg.iter().enumerate() {
                for c in 0..f {
                    out[[row, c]] -= sums[[gid, c]] / counts[gid].max(1.0);
                }
            }
            out
        };
        let out = center(xv, graph_of_row);
        let seg: Vec<usize> = graph_of_row.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_, g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(x.0, center(g2, &seg).into_dyn());
            })),
        )
    }

    /// Normalize per-graph displacement magnitudes: each graph's rows are
    /// divided by (RMS over that graph's entries + 1). Keeps coordinate
    /// updates O(1) regardless of how far the raw deltas drift.
    pub fn posnorm_per_graph(&mut self, delta: Var, graph_of_row: &[usize], n_graphs: usize) -> Var {
        let dv = self.val2(delta);
        assert_eq!(dv.nrows(), graph_of_row.len());
        let f = dv.ncols();
        let (p, _) = dv.dim();
        // Per-graph mean square and element count. Row partials accumulate in
        // value-canonical order so the scale is permutation-exact.
        let groups = canonical_segment_order(dv.into_dyn(), graph_of_row, n_graphs);
        let mut msq = vec![0.0f64; n_graphs];
        let mut cnt = vec![0.0f64; n_graphs];
        for (gid, rows) in groups.iter().enumerate() {
            cnt[gid] = (rows.len() * f) as f64;
            for &row in rows {
                let mut part = 0.0;
                for c in 0..f {
                    part += dv[[row, c]] * dv[[row, c]];
                }
                msq[gid] += part;
            }
        }
        let rms: Vec<f64> = (0..n_graphs)
            .map(|gi| (msq[gi] / cnt[gi].max(1.0) + POSNORM_EPS).sqrt())
            .collect();
        let mut out = ndarray::Array2::<f64>::zeros((p, f));
        for (row, &gid) in graph_of_row.iter().enumerate() {
            for c in 0..f {
                out[[row, c]] = dv[[row, c]] / (rms[gid] + 1.0);
            }
        }
        let seg: Vec<usize> = graph_of_row.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let dv = vals[delta.0].view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (p, f) = dv.dim();
                let mut msq = vec![0.0f64; n_graphs];
                let mut cnt = vec![0.0f64; n_graphs];
                let mut dot = vec![0.0f64; n_graphs]; // Σ g·Δ per graph
                for (row, &gid) in seg.iter().enumerate() {
                    cnt[gid] += f as f64;
                    for c in 0..f {
                        msq[gid] += dv[[row, c]] * dv[[row, c]];
                        dot[gid] += g2[[row, c]] * dv[[row, c]];
                    }
                }
                let mut ga = ndarray::Array2::<f64>::zeros((p, f));
                for (row, &gid) in seg.iter().enumerate() {
                    let m = msq[gid] / cnt[gid].max(1.0) + POSNORM_EPS;
                    let r = m.sqrt();
                    let d = r + 1.0;
                    // y = Δ/(r+1); dr/dΔ_k = Δ_k/(r·cnt)
                    let k = dot[gid] / (r * cnt[gid].max(1.0) * d * d);
                    for c in 0..f {
                        ga[[row, c]] = g2[[row, c]] / d - dv[[row, c]] * k;
                    }
                }
                sink.add(delta.0, ga.into_dyn());
            })),
        )
    }

    /// Radial basis expansion of distances [p, 1] onto `n_rbf` Gaussian
    /// bumps with centers evenly spaced on [0, r_max].
    pub fn rbf_expand(&mut self, d: Var, n_rbf: usize, r_max: f64) -> Var {
        let dv = self.val2(d);
        assert_eq!(dv.ncols(), 1);
        assert!(n_rbf >= 2);
        let p = dv.nrows();
        let spacing = r_max / (n_rbf - 1) as f64;
        let gamma = 1.0 / (2.0 * spacing * spacing);
        let centers: Vec<f64> = (0..n_rbf).map(|r| r as f64 * spacing).collect();
        let mut out = ndarray::Array2::<f64>::zeros((p, n_rbf));
        for i in 0..p {
            for (r, &mu) in centers.iter().enumerate() {
                let z = dv[[i, 0]] - mu;
                out[[i, r]] = (-gamma * z * z).exp();
            }
        }
        let centers_b = centers;
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let dv = vals[d.0].view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let p = dv.nrows();
                let mut gd = ndarray::Array2::<f64>::zeros((p, 1));
                for i in 0..p {
                    for (r, &mu) in centers_b.iter().enumerate() {
                        let z = dv[[i, 0]] - mu;
                        gd[[i, 0]] += g2[[i, r]] * (-gamma * z * z).exp() * (-2.0 * gamma * z);
                    }
                }
                sink.add(d.0, gd.into_dyn());
            })),
        )
    }

    // ---- loss kernels ----

    /// Per-row squared error Σ_f (pred − target)², target constant.
    pub fn sq_diff_rowsum(&mut self, pred: Var, target: &ArrayD<f64>) -> Var {
        assert_eq!(self.values[pred.0].shape(), target.shape());
        let pv = self.val2(pred);
        let tv = target.view().into_dimensionality::<Ix2>().unwrap();
        let (n, f) = pv.dim();
        let mut out = ndarray::Array1::<f64>::zeros(n);
        for i in 0..n {
            for c in 0..f {
                let d = pv[[i, c]] - tv[[i, c]];
                out[i] += d * d;
            }
        }
        let target = target.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let pv = vals[pred.0].view().into_dimensionality::<Ix2>().unwrap();
                let tv = target.view().into_dimensionality::<Ix2>().unwrap();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let (n, f) = pv.dim();
                let mut gp = ndarray::Array2::<f64>::zeros((n, f));
                for i in 0..n {
                    for c in 0..f {
                        gp[[i, c]] = 2.0 * (pv[[i, c]] - tv[[i, c]]) * g1[i];
                    }
                }
                sink.add(pred.0, gp.into_dyn());
            })),
        )
    }

    /// Per-row cross-entropy from logits against constant target
    /// distributions: out[i] = −Σ_k t[i,k]·log softmax(logits[i])_k.
    pub fn ce_rows(&mut self, logits: Var, target: &ArrayD<f64>) -> Var {
        assert_eq!(self.values[logits.0].shape(), target.shape());
        let lv = self.val2(logits);
        let tv = target.view().into_dimensionality::<Ix2>().unwrap();
        let (n, k) = lv.dim();
        let mut out = ndarray::Array1::<f64>::zeros(n);
        for i in 0..n {
            let row = lv.row(i);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.mapv(|x| (x - max).exp()).sum().ln() + max;
            for c in 0..k {
                out[i] -= tv[[i, c]] * (row[c] - lse);
            }
        }
        let target = target.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, sink| {
                let lv = vals[logits.0].view().into_dimensionality::<Ix2>().unwrap();
                let tv = target.view().into_dimensionality::<Ix2>().unwrap();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let (n, k) = lv.dim();
                let mut gl = ndarray::Array2::<f64>::zeros((n, k));
                for i in 0..n {
                    let row = lv.row(i);
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let exps = row.mapv(|x| (x - max).exp());
                    let denom = exps.sum();
                    let tsum: f64 = tv.row(i).sum();
                    for c in 0..k {
                        // d/dl = softmax(l)·Σt − t (Σt is 1 for one-hot targets)
                        gl[[i, c]] = (exps[c] / denom * tsum - tv[[i, c]]) * g1[i];
                    }
                }
                sink.add(logits.0, gl.into_dyn());
            })),
        )
    }

    /// Sum of all elements → scalar (0-d tensor).
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.values[a.0].sum();
        let shape = self.values[a.0].raw_dim();
        self.push(
            ndarray::arr0(total).into_dyn(),
            Some(Box::new(move |_, g, sink| {
                let gs = g.iter().next().copied().unwrap_or(0.0);
                sink.add(a.0, ArrayD::from_elem(shape.clone(), gs));
            })),
        )
    }

    /// Weighted sum of a rank-1 tensor with constant weights → scalar.
    pub fn dot_const(&mut self, a: Var, w: &[f64]) -> Var {
        let av = self.values[a.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("dot_const expects rank-1");
        assert_eq!(av.len(), w.len());
        let total: f64 = av.iter().zip(w).map(|(x, wi)| x * wi).sum();
        let w: Vec<f64> = w.to_vec();
        self.push(
            ndarray::arr0(total).into_dyn(),
            Some(Box::new(move |_, g, sink| {
                let gs = g.iter().next().copied().unwrap_or(0.0);
                let ga = ndarray::Array1::from_iter(w.iter().map(|wi| wi * gs));
                sink.add(a.0, ga.into_dyn());
            })),
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row indices grouped by segment, each group sorted by the bit pattern of
/// its row. Segment reductions that accumulate in this order produce
/// bit-identical results for any input ordering of the same row multiset,
/// which is what keeps graph aggregation exactly permutation-equivariant.
fn canonical_segment_order(
    values: ArrayViewD<'_, f64>,
    seg: &[usize],
    n_seg: usize,
) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_seg];
    for (row, &s) in seg.iter().enumerate() {
        groups[s].push(row);
    }
    for group in &mut groups {
        group.sort_by(|&a, &b| {
            let ra = values.index_axis(Axis(0), a);
            let rb = values.index_axis(Axis(0), b);
            for (x, y) in ra.iter().zip(rb.iter()) {
                let (bx, by) = (x.to_bits(), y.to_bits());
                if bx != by {
                    return bx.cmp(&by);
                }
            }
            std::cmp::Ordering::Equal
        });
    }
    groups
}
