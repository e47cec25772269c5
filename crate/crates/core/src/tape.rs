//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Calling
//! [`Tape::backward`] on a 1×1 output walks the record in reverse and returns
//! gradients for every parameter leaf.
//!
//! Vector-valued features use a "row-group" layout: a block of `R` items with
//! `C` channels of 3D vectors is stored as a `(3R)×C` matrix whose row
//! `3r + k` holds spatial component `k` of item `r`. Channel mixing is then a
//! plain right-multiplication, and an `R×3` coordinate block reshapes to a
//! `(3R)×1` single-channel vector block without moving data.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        index: Rc<[usize]>,
        group: usize,
    },
    ScatterMean {
        x: Var,
        index: Rc<[usize]>,
        group: usize,
        weight: Rc<[f64]>,
    },
    RepeatRows(Var, usize),
    SumGroups(Var, usize),
    Reshape(Var),
    Cross(Var, Var),
    Normalize(Var, f64),
    RowNorm(Var),
    GroupNorm(Var),
    Rbf {
        d: Var,
        centers: Rc<[f64]>,
        width: f64,
    },
    SumSquares(Var),
    Sum(Var),
}

struct Node {
    op: Op,
    value: Option<Mat>,
}

/// Records a computation over a borrowed set of parameter values.
pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => &self.params[i],
            _ => node.value.as_ref().expect("non-parameter nodes own their value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Constant leaf; no gradient is reported for it.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(Op::Input, value)
    }

    /// Leaf bound to parameter `index` of the borrowed parameter slice.
    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter {index} out of range");
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), out)
    }

    /// `x + b` with `b` a 1×d row broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1, "bias must be a single row");
        let out = self.value(x) + self.value(b);
        self.push(Op::AddRow(x, b), out)
    }

    /// `x * c` with `c` an n×1 column broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        assert_eq!(self.shape(c).1, 1, "gate must be a single column");
        let out = self.value(x) * self.value(c);
        self.push(Op::MulCol(x, c), out)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x) * s;
        self.push(Op::Scale(x, s), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    /// Sigmoid-weighted linear unit `x·σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(Op::Silu(x), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    /// Row-group gather: output group `k` is input group `index[k]`.
    pub fn gather(&mut self, x: Var, index: &Rc<[usize]>, group: usize) -> Var {
        let src = self.value(x);
        let cols = src.ncols();
        let mut out = Mat::zeros((index.len() * group, cols));
        for (k, &i) in index.iter().enumerate() {
            for a in 0..group {
                out.row_mut(k * group + a).assign(&src.row(i * group + a));
            }
        }
        self.push(
            Op::Gather {
                x,
                index: index.clone(),
                group,
            },
            out,
        )
    }

    /// Row-group scatter with per-target weights: group `index[k]` of the
    /// output accumulates `weight[index[k]]` × input group `k`. With
    /// `weight = 1/count` this is a segment mean.
    pub fn scatter(
        &mut self,
        x: Var,
        index: &Rc<[usize]>,
        group: usize,
        weight: &Rc<[f64]>,
    ) -> Var {
        let src = self.value(x);
        let cols = src.ncols();
        assert_eq!(src.nrows(), index.len() * group, "scatter source rows");
        let mut out = Mat::zeros((weight.len() * group, cols));
        for (k, &i) in index.iter().enumerate() {
            let w = weight[i];
            for a in 0..group {
                out.row_mut(i * group + a).scaled_add(w, &src.row(k * group + a));
            }
        }
        self.push(
            Op::ScatterMean {
                x,
                index: index.clone(),
                group,
                weight: weight.clone(),
            },
            out,
        )
    }

    /// Repeats every row `k` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Var {
        let src = self.value(x);
        let mut out = Mat::zeros((src.nrows() * k, src.ncols()));
        for (r, row) in src.rows().into_iter().enumerate() {
            for i in 0..k {
                out.row_mut(r * k + i).assign(&row);
            }
        }
        self.push(Op::RepeatRows(x, k), out)
    }

    /// Sums consecutive groups of `k` rows.
    pub fn sum_groups(&mut self, x: Var, k: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.nrows() % k, 0, "rows not divisible by group size");
        let mut out = Mat::zeros((src.nrows() / k, src.ncols()));
        for (r, row) in src.rows().into_iter().enumerate() {
            let mut target = out.row_mut(r / k);
            target += &row;
        }
        self.push(Op::SumGroups(x, k), out)
    }

    /// Same data in row-major order, new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(x);
        let data: Vec<f64> = src.iter().copied().collect();
        let out = Mat::from_shape_vec((rows, cols), data).expect("reshape preserves size");
        self.push(Op::Reshape(x), out)
    }

    /// Row-wise cross product of two n×3 blocks.
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        let out = cross_rows(self.value(a), self.value(b));
        self.push(Op::Cross(a, b), out)
    }

    /// Row-wise unit vectors; rows with norm below `eps` become zero.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let mut out = src.clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n < eps {
                row.fill(0.0);
            } else {
                row /= n;
            }
        }
        self.push(Op::Normalize(x, eps), out)
    }

    /// Row-wise Euclidean norm, n×c → n×1.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let norms: Vec<f64> = src.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let out = Mat::from_shape_vec((norms.len(), 1), norms).expect("column");
        self.push(Op::RowNorm(x), out)
    }

    /// Channel norms of a row-group vector block: (3R)×C → R×C with
    /// `sqrt(Σ_k v² + eps)`.
    pub fn group_norm(&mut self, v: Var, eps: f64) -> Var {
        let src = self.value(v);
        let (rows, cols) = src.dim();
        let mut out = Mat::zeros((rows / 3, cols));
        for r in 0..rows / 3 {
            for c in 0..cols {
                let s: f64 = (0..3).map(|k| src[[3 * r + k, c]].powi(2)).sum();
                out[[r, c]] = (s + eps).sqrt();
            }
        }
        self.push(Op::GroupNorm(v), out)
    }

    /// Gaussian radial basis `exp(−((d − μ_k)/width)²)` of an n×1 column.
    pub fn rbf(&mut self, d: Var, centers: &Rc<[f64]>, width: f64) -> Var {
        let src = self.value(d);
        assert_eq!(src.ncols(), 1);
        let out = Mat::from_shape_fn((src.nrows(), centers.len()), |(e, k)| {
            let z = (src[[e, 0]] - centers[k]) / width;
            (-z * z).exp()
        });
        self.push(
            Op::Rbf {
                d,
                centers: centers.clone(),
                width,
            },
            out,
        )
    }

    /// Σ x² as a 1×1 value.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum::<f64>();
        self.push(Op::SumSquares(x), Mat::from_elem((1, 1), s))
    }

    /// Σ x as a 1×1 value.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Mat::from_elem((1, 1), s))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() needs a 1×1 value");
        m[[0, 0]]
    }

    /// Back-propagates from a 1×1 output. Returns one gradient per parameter
    /// (zeros for parameters that were never touched).
    pub fn backward(&self, output: Var) -> Vec<Mat> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut param_grads: Vec<Option<Mat>> = vec![None; self.params.len()];

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(i) => match &mut param_grads[*i] {
                    Some(existing) => *existing += &g,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, g);
                }
                Op::MulCol(x, c) => {
                    let xv = self.value(*x);
                    let gc = (&g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gx = &g * self.value(*c);
                    acc(&mut grads, *c, gc);
                    acc(&mut grads, *x, gx);
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g * *s),
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().expect("owned");
                    let mut gx = g;
                    Zip::from(&mut gx).and(y).for_each(|gv, &yv| *gv *= yv * (1.0 - yv));
                    acc(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    Zip::from(&mut gx).and(xv).for_each(|gv, &v| {
                        let s = sigmoid(v);
                        *gv *= s + v * s * (1.0 - s);
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = self.shape(p).1;
                        let slice = g.slice(ndarray::s![.., start..start + width]).to_owned();
                        acc(&mut grads, p, slice);
                        start += width;
                    }
                }
                Op::Gather { x, index, group } => {
                    let mut gx = Mat::zeros(self.shape(*x));
                    for (k, &i) in index.iter().enumerate() {
                        for a in 0..*group {
                            let mut target = gx.row_mut(i * group + a);
                            target += &g.row(k * group + a);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ScatterMean {
                    x,
                    index,
                    group,
                    weight,
                } => {
                    let mut gx = Mat::zeros(self.shape(*x));
                    for (k, &i) in index.iter().enumerate() {
                        let w = weight[i];
                        for a in 0..*group {
                            gx.row_mut(k * group + a).scaled_add(w, &g.row(i * group + a));
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RepeatRows(x, k) => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Mat::zeros((rows, cols));
                    for (r, row) in g.rows().into_iter().enumerate() {
                        let mut target = gx.row_mut(r / k);
                        target += &row;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SumGroups(x, k) => {
                    let (rows, cols) = self.shape(*x);
                    let gx = Mat::from_shape_fn((rows, cols), |(r, c)| g[[r / k, c]]);
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x);
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *x, Mat::from_shape_vec(shape, data).expect("same size"));
                }
                Op::Cross(a, b) => {
                    let ga = cross_rows(self.value(*b), &g);
                    let gb = cross_rows(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Normalize(x, eps) => {
                    let xv = self.value(*x);
                    let y = node.value.as_ref().expect("owned");
                    let mut gx = Mat::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let n = xv.row(r).dot(&xv.row(r)).sqrt();
                        if n < *eps {
                            continue;
                        }
                        let proj = y.row(r).dot(&g.row(r));
                        for c in 0..xv.ncols() {
                            gx[[r, c]] = (g[[r, c]] - y[[r, c]] * proj) / n;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RowNorm(x) => {
                    let xv = self.value(*x);
                    let n = node.value.as_ref().expect("owned");
                    let mut gx = Mat::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        if n[[r, 0]] > 0.0 {
                            let s = g[[r, 0]] / n[[r, 0]];
                            gx.row_mut(r).scaled_add(s, &xv.row(r));
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::GroupNorm(v) => {
                    let vv = self.value(*v);
                    let n = node.value.as_ref().expect("owned");
                    let gx = Mat::from_shape_fn(vv.dim(), |(row, c)| {
                        g[[row / 3, c]] * vv[[row, c]] / n[[row / 3, c]]
                    });
                    acc(&mut grads, *v, gx);
                }
                Op::Rbf { d, centers, width } => {
                    let dv = self.value(*d);
                    let out = node.value.as_ref().expect("owned");
                    let w2 = width * width;
                    let gd = Mat::from_shape_fn(dv.dim(), |(e, _)| {
                        (0..centers.len())
                            .map(|k| g[[e, k]] * out[[e, k]] * (-2.0 * (dv[[e, 0]] - centers[k]) / w2))
                            .sum()
                    });
                    acc(&mut grads, *d, gd);
                }
                Op::SumSquares(x) => {
                    let s = 2.0 * g[[0, 0]];
                    acc(&mut grads, *x, self.value(*x) * s);
                }
                Op::Sum(x) => {
                    let gx = Mat::from_elem(self.shape(*x), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
            }
        }
        param_grads
            .into_iter()
            .zip(self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Mat::zeros(p.dim())))
            .collect()
    }
}

fn cross_rows(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.ncols(), 3);
    assert_eq!(a.dim(), b.dim());
    let mut out = Mat::zeros(a.dim());
    for r in 0..a.nrows() {
        out[[r, 0]] = a[[r, 1]] * b[[r, 2]] - a[[r, 2]] * b[[r, 1]];
        out[[r, 1]] = a[[r, 2]] * b[[r, 0]] - a[[r, 0]] * b[[r, 2]];
        out[[r, 2]] = a[[r, 0]] * b[[r, 1]] - a[[r, 1]] * b[[r, 0]];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
    }

    /// Central finite differences of `f` w.r.t. every parameter entry,
    /// compared against the tape's gradient.
    fn check(params: Vec<Mat>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new(&params);
        let vars: Vec<Var> = (0..params.len()).map(|i| tape.param(i)).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (p, grad) in grads.iter().enumerate() {
            for idx in 0..params[p].len() {
                let (r, c) = (idx / params[p].ncols(), idx % params[p].ncols());
                let eval = |delta: f64| {
                    let mut shifted = params.clone();
                    shifted[p][[r, c]] += delta;
                    let mut t = Tape::new(&shifted);
                    let vs: Vec<Var> = (0..shifted.len()).map(|i| t.param(i)).collect();
                    let o = f(&mut t, &vs);
                    t.scalar(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grad[[r, c]];
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
                assert!(err < 1e-6, "param {p} entry {idx}: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn dense_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![random(&mut rng, 4, 3), random(&mut rng, 3, 2), random(&mut rng, 1, 2), random(&mut rng, 4, 1)];
        check(params, |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row(h, v[2]);
            let a = t.silu(h);
            let s = t.sigmoid(h);
            let m = t.mul(a, s);
            let m = t.mul_col(m, v[3]);
            let d = t.sub(m, h);
            let d = t.scale(d, 0.7);
            let c = t.concat_cols(&[d, a]);
            let q = t.sum_squares(c);
            let r = t.sum(a);
            t.add(q, r)
        });
    }

    #[test]
    fn gather_scatter_group_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![random(&mut rng, 9, 2), random(&mut rng, 3, 2)];
        let index: Rc<[usize]> = vec![0, 2, 1, 2].into();
        let weight: Rc<[f64]> = vec![1.0, 0.5, 0.5].into();
        check(params, move |t, v| {
            let g = t.gather(v[0], &index, 3);
            let s = t.scatter(g, &index, 3, &weight);
            let n = t.group_norm(s, 1e-8);
            let rep = t.repeat_rows(v[1], 3);
            let m = t.mul(rep, v[0]);
            let sg = t.sum_groups(m, 3);
            let both = t.add(n, sg);
            let r = t.reshape(both, 2, 3);
            t.sum_squares(r)
        });
    }

    #[test]
    fn geometric_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![random(&mut rng, 5, 3), random(&mut rng, 5, 3)];
        let centers: Rc<[f64]> = vec![0.0, 0.5, 1.0, 2.0].into();
        check(params, move |t, v| {
            let c = t.cross(v[0], v[1]);
            let u = t.normalize(c, 1e-8);
            let d = t.sub(v[0], v[1]);
            let n = t.row_norm(d);
            let r = t.rbf(n, &centers, 0.5);
            let w = t.mul_col(u, n);
            let a = t.sum_squares(r);
            let b = t.sum(w);
            t.add(a, b)
        });
    }

    #[test]
    fn normalize_degenerate_rows_are_zero_with_zero_grad() {
        let params = vec![Mat::zeros((1, 3))];
        let mut tape = Tape::new(&params);
        let x = tape.param(0);
        let y = tape.normalize(x, 1e-8);
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert!(g[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn untouched_params_get_zero_grad() {
        let params = vec![Mat::ones((2, 2)), Mat::ones((3, 1))];
        let mut tape = Tape::new(&params);
        let x = tape.param(0);
        let s = tape.sum(x);
        let g = tape.backward(s);
        assert_eq!(g[1], Mat::zeros((3, 1)));
        assert_eq!(g[0], Mat::ones((2, 2)));
    }

    #[test]
    fn saturated_sigmoid_is_exact() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
