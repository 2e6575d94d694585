//! Minimal reverse-mode differentiation over row-major f64 matrices.
//!
//! Nodes are appended in evaluation order, so a reverse sweep visits every
//! node after all of its consumers. Transformer-specific pieces (layer norm,
//! masked multi-head attention, masked mean pooling) are fused ops with
//! hand-written backward passes.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::objective::ObjectiveCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    AddPositions {
        x: Var,
        table: Var,
        seq: usize,
    },
    MeanPool {
        x: Var,
        layout: SeqLayout,
    },
    L2Normalize(Var),
    Objective {
        image: Var,
        text: Var,
        log_tau: Var,
        cache: Box<ObjectiveCache>,
    },
}

/// Shape of a batch of padded sequences stacked row-wise (`batch * seq` rows).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub seq: usize,
    pub lens: Vec<usize>,
}

impl SeqLayout {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize, value: &Array2<f64>) -> Var {
        if let Some(Some(v)) = self.param_vars.get(index) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Param(index));
        if self.param_vars.len() <= index {
            self.param_vars.resize(index + 1, None);
        }
        self.param_vars[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + &self.value(row).row(0);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = Array2::zeros(xv.dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (row, mut out) in xv.axis_iter(Axis(0)).zip(xhat.axis_iter_mut(Axis(0))) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention; keys past a sequence's length
    /// are masked out.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &SeqLayout, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.ncols();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let seq = layout.seq;
        let mut out = Array2::zeros(qv.dim());
        let mut probs = Vec::with_capacity(layout.batch() * heads);
        for (b, &len) in layout.lens.iter().enumerate() {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![rows.clone(), cols.clone()]);
                let kb = kv.slice(s![rows.clone(), cols.clone()]);
                let vb = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qb.dot(&kb.t()) * scale;
                for mut row in p.axis_iter_mut(Axis(0)) {
                    row.slice_mut(s![len..]).fill(f64::NEG_INFINITY);
                    let max = row.slice(s![..len]).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    row.mapv_inplace(|x| (x - max).exp());
                    let z = row.sum();
                    row /= z;
                }
                out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
            },
        )
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Array2::zeros((ids.len(), tv.ncols()));
        for (mut row, &id) in out.axis_iter_mut(Axis(0)).zip(ids) {
            row.assign(&tv.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Adds table rows `0..seq` to each consecutive block of `seq` rows of `x`.
    pub fn add_positions(&mut self, x: Var, table: Var, seq: usize) -> Var {
        let mut out = self.value(x).clone();
        let pos = self.value(table).slice(s![..seq, ..]).to_owned();
        for mut block in out.axis_chunks_iter_mut(Axis(0), seq) {
            block += &pos;
        }
        self.push(out, Op::AddPositions { x, table, seq })
    }

    /// Mean over the first `len` rows of each sequence block.
    pub fn mean_pool(&mut self, x: Var, layout: &SeqLayout) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((layout.batch(), xv.ncols()));
        for (b, &len) in layout.lens.iter().enumerate() {
            let start = b * layout.seq;
            let block = xv.slice(s![start..start + len, ..]);
            out.row_mut(b).assign(&(block.sum_axis(Axis(0)) / len as f64));
        }
        self.push(
            out,
            Op::MeanPool {
                x,
                layout: layout.clone(),
            },
        )
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        self.push(out, Op::L2Normalize(x))
    }

    pub(crate) fn objective(&mut self, image: Var, text: Var, log_tau: Var, cache: ObjectiveCache) -> Var {
        let loss = Array2::from_elem((1, 1), cache.total);
        self.push(
            loss,
            Op::Objective {
                image,
                text,
                log_tau,
                cache: Box::new(cache),
            },
        )
    }

    /// Back-propagates from scalar `root`. Returns the gradient of every
    /// parameter leaf, indexed like the parameter set (`None` if unused).
    pub fn backward(&self, root: Var) -> Vec<Option<Array2<f64>>> {
        self.backward_seeded(root, Array2::ones((1, 1)))
    }

    /// Back-propagates `seed` as the gradient of `root`.
    pub fn backward_seeded(&self, root: Var, seed: Array2<f64>) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut params: Vec<Option<Array2<f64>>> = vec![None; self.param_vars.len()];

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => params[*p] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &self.value(*gamma).row(0);
                    let d = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.dim());
                    for (r, mut out) in gx.axis_iter_mut(Axis(0)).enumerate() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum = dr.sum();
                        let dot = dr.dot(&xr);
                        let inv = inv_std[r];
                        Zip::from(&mut out)
                            .and(&dr)
                            .and(&xr)
                            .for_each(|o, &dv, &xv| *o = inv * (dv - sum / d - xv * dot / d));
                    }
                    acc(&mut grads, *beta, gb);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dh = qv.ncols() / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let seq = layout.seq;
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    for b in 0..layout.batch() {
                        let rows = b * seq..(b + 1) * seq;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let vb = vv.slice(s![rows.clone(), cols.clone()]);
                            let qb = qv.slice(s![rows.clone(), cols.clone()]);
                            let kb = kv.slice(s![rows.clone(), cols.clone()]);
                            gv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vb.t());
                            let mut ds = p * &dp;
                            for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                                let inner = row.sum();
                                Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d -= pv * inner);
                            }
                            ds *= scale;
                            gq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kb));
                            gk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qb));
                        }
                    }
                    acc(&mut grads, *v, gv);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *q, gq);
                }
                Op::Gather { table, ids } => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (row, &id) in g.axis_iter(Axis(0)).zip(ids) {
                        let mut target = gt.row_mut(id);
                        target += &row;
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::AddPositions { x, table, seq } => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    {
                        let mut head = gt.slice_mut(s![..*seq, ..]);
                        for block in g.axis_chunks_iter(Axis(0), *seq) {
                            head += &block;
                        }
                    }
                    acc(&mut grads, *table, gt);
                    acc(&mut grads, *x, g);
                }
                Op::MeanPool { x, layout } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (b, &len) in layout.lens.iter().enumerate() {
                        let start = b * layout.seq;
                        let share = g.row(b).to_owned() / len as f64;
                        for mut row in gx.slice_mut(s![start..start + len, ..]).axis_iter_mut(Axis(0)) {
                            row.assign(&share);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L2Normalize(x) => {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let mut gx = Array2::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let n = xv.row(r).dot(&xv.row(r)).sqrt();
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = yr.dot(&gr);
                        gx.row_mut(r).assign(&((&gr - &(&yr * proj)) / n));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Objective {
                    image,
                    text,
                    log_tau,
                    cache,
                } => {
                    let scale = g[[0, 0]];
                    let (gi, gt, gtau) = cache.gradients();
                    acc(&mut grads, *image, gi * scale);
                    acc(&mut grads, *text, gt * scale);
                    acc(&mut grads, *log_tau, Array2::from_elem((1, 1), gtau * scale));
                }
            }
        }
        params
    }
}

/// Stacks equally shaped matrices row-wise.
pub fn stack_rows(parts: &[ArrayView2<'_, f64>]) -> Array2<f64> {
    ndarray::concatenate(Axis(0), parts).expect("parts share a column count")
}
