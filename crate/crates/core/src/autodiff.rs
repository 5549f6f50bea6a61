//! Reverse-mode automatic differentiation over 2-d arrays.
//!
//! Forward values are computed eagerly; each result records the operation
//! that produced it on a tape.  `backward` walks the tape in reverse and
//! accumulates gradients into every node, so the model code is written as
//! plain forward math.  Vectors are 1×C rows and scalars are 1×1 matrices.

use crate::Scalar;
use ndarray::{s, Array2, Axis};

/// Handle to a tape node.  Cheap to copy; only valid for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    /// Broadcast-add a 1×C row onto every row of an N×C matrix.
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Clamp(Var, F, F),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    },
    /// Output row r is input row `indices[r]`; indices may repeat.
    GatherRows(Var, Vec<usize>),
    ZeroPadRows(Var, usize),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    SumAll(Var),
    MeanAll(Var),
}

struct Node<F: Scalar> {
    value: Array2<F>,
    op: Op<F>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> F {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on a non-scalar node");
        a[(0, 0)]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// New input node.  Leaves receive gradients like any other node; callers
    /// decide which ones they care about (typically the parameters).
    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, an) = self.value(a).dim();
        let (bm, bn) = self.value(b).dim();
        assert_eq!(an, bm, "matmul {am}x{an} . {bm}x{bn}");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, an) = self.value(a).dim();
        let (rm, rn) = self.value(row).dim();
        assert_eq!((rm, rn), (1, an), "add_row wants a 1x{an} row");
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.tanh());
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let value = self.value(a).mapv(|x| {
            if x >= F::zero() {
                one / (one + (-x).exp())
            } else {
                let e = x.exp();
                e / (one + e)
            }
        });
        self.push(value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.exp());
        self.push(value, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.abs());
        self.push(value, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let value = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (_, c) = self.value(x).dim();
        assert_eq!(self.value(gamma).dim(), (1, c), "layer_norm gamma shape");
        assert_eq!(self.value(beta).dim(), (1, c), "layer_norm beta shape");
        let value = {
            let xv = self.value(x);
            let g = self.value(gamma).row(0).to_owned();
            let b = self.value(beta).row(0).to_owned();
            let mut out = xv.clone();
            for mut row in out.rows_mut() {
                let (mean, sd) = row_moments(&row.to_owned(), eps);
                row.mapv_inplace(|v| (v - mean) / sd);
                row.zip_mut_with(&g, |v, gi| *v *= *gi);
                row.zip_mut_with(&b, |v, bi| *v += *bi);
            }
            out
        };
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        )
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let (n, c) = self.value(a).dim();
        let mut value = Array2::zeros((indices.len(), c));
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < n, "gather_rows index {i} out of {n}");
            value.row_mut(r).assign(&self.value(a).row(i));
        }
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn zero_pad_rows(&mut self, a: Var, before: usize, after: usize) -> Var {
        let (n, c) = self.value(a).dim();
        let mut value = Array2::zeros((n + before + after, c));
        value
            .slice_mut(s![before..before + n, ..])
            .assign(self.value(a));
        self.push(value, Op::ZeroPadRows(a, before))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (_, ac) = self.value(a).dim();
        let (_, bc) = self.value(b).dim();
        assert_eq!(ac, bc, "concat_rows column count");
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows");
        self.push(value, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (am, _) = self.value(a).dim();
        let (bm, _) = self.value(b).dim();
        assert_eq!(am, bm, "concat_cols row count");
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols");
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (_, c) = self.value(a).dim();
        assert!(start < end && end <= c, "slice_cols {start}..{end} of {c}");
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = F::from_f64(self.value(a).len() as f64);
        let value = Array2::from_elem((1, 1), self.value(a).sum() / n);
        self.push(value, Op::MeanAll(a))
    }

    /// Backpropagate from a 1×1 root node.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.mapv(|x| x * *c));
                }
                Op::AddRow(a, row) => {
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, col_sum);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|x| {
                        if x > F::zero() {
                            F::one()
                        } else {
                            F::zero()
                        }
                    });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let d = y.mapv(|t| F::one() - t * t);
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let d = y.mapv(|s| s * (F::one() - s));
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, &g * &self.nodes[i].value);
                }
                Op::Abs(a) => {
                    let sign = self.nodes[a.0].value.mapv(|x| {
                        if x > F::zero() {
                            F::one()
                        } else if x < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        }
                    });
                    accumulate(&mut grads, *a, &g * &sign);
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self.nodes[a.0].value.mapv(|x| {
                        if x > *lo && x < *hi {
                            F::one()
                        } else {
                            F::zero()
                        }
                    });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = self.nodes[gamma.0].value.row(0).to_owned();
                    let (n, c) = xv.dim();
                    let cf = F::from_f64(c as f64);
                    let mut gx = Array2::zeros((n, c));
                    let mut ggamma = Array2::zeros((1, c));
                    let mut gbeta = Array2::zeros((1, c));
                    for r in 0..n {
                        let xr = xv.row(r).to_owned();
                        let (mean, sd) = row_moments(&xr, *eps);
                        let xhat = xr.mapv(|v| (v - mean) / sd);
                        let gr = g.row(r).to_owned();
                        // d/dbeta and d/dgamma accumulate over rows.
                        for j in 0..c {
                            gbeta[(0, j)] += gr[j];
                            ggamma[(0, j)] += gr[j] * xhat[j];
                        }
                        let gh = &gr * &gv;
                        let mean_gh = gh.sum() / cf;
                        let mean_gh_xhat = (&gh * &xhat).sum() / cf;
                        for j in 0..c {
                            gx[(r, j)] = (gh[j] - mean_gh - xhat[j] * mean_gh_xhat) / sd;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::GatherRows(a, indices) => {
                    let (n, c) = self.nodes[a.0].value.dim();
                    let mut ga = Array2::zeros((n, c));
                    for (r, &src) in indices.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ZeroPadRows(a, before) => {
                    let (n, _) = self.nodes[a.0].value.dim();
                    let ga = g.slice(s![*before..*before + n, ..]).to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(a, b) => {
                    let (an, _) = self.nodes[a.0].value.dim();
                    accumulate(&mut grads, *a, g.slice(s![..an, ..]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![an.., ..]).to_owned());
                }
                Op::ConcatCols(a, b) => {
                    let (_, ac) = self.nodes[a.0].value.dim();
                    accumulate(&mut grads, *a, g.slice(s![.., ..ac]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., ac..]).to_owned());
                }
                Op::SliceCols(a, start, end) => {
                    let (n, c) = self.nodes[a.0].value.dim();
                    let mut ga = Array2::zeros((n, c));
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.nodes[a.0].value.dim(), g[(0, 0)]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let dim = self.nodes[a.0].value.dim();
                    let n = F::from_f64(self.nodes[a.0].value.len() as f64);
                    let ga = Array2::from_elem(dim, g[(0, 0)] / n);
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

fn row_moments<F: Scalar>(row: &ndarray::Array1<F>, eps: F) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mean = row.sum() / n;
    let var = row.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    (mean, (var + eps).sqrt())
}

fn accumulate<F: Scalar>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences on a scalar-valued function of one leaf.
    fn check_grad(build: impl Fn(&mut Tape<f64>, Var) -> Var, input: &Array2<f64>, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = build(&mut tape, x);
        let grads = tape.backward(y);
        let analytic = grads.get(x).expect("input should receive a gradient");

        let eps = 1e-6;
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let mut plus = input.clone();
            plus[(r, c)] += eps;
            let mut minus = input.clone();
            minus[(r, c)] -= eps;

            let mut tp = Tape::new();
            let xp = tp.leaf(plus);
            let yp = build(&mut tp, xp);
            let fp = tp.scalar(yp);
            let mut tm = Tape::new();
            let xm = tm.leaf(minus);
            let ym = build(&mut tm, xm);
            let fm = tm.scalar(ym);

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[(r, c)];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom < tol,
                "grad mismatch at ({r},{c}): analytic {a}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let w = random(&mut rng, 4, 3);
        let x = random(&mut rng, 2, 4);
        check_grad(
            |t, v| {
                let wv = t.leaf(w.clone());
                let y = t.matmul(v, wv);
                let y = t.tanh(y);
                t.mean_all(y)
            },
            &x,
            1e-7,
        );
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = random(&mut rng, 3, 5);
        let other = random(&mut rng, 3, 5);
        check_grad(
            |t, v| {
                let o = t.leaf(other.clone());
                let a = t.mul(v, o);
                let b = t.sigmoid(a);
                let c = t.exp(v);
                let c = t.scale(c, 0.3);
                let d = t.add(b, c);
                let e = t.sub(d, v);
                t.sum_all(e)
            },
            &x,
            1e-7,
        );
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = random(&mut rng, 3, 6);
        let gamma = random(&mut rng, 1, 6);
        let beta = random(&mut rng, 1, 6);
        check_grad(
            |t, v| {
                let g = t.leaf(gamma.clone());
                let b = t.leaf(beta.clone());
                let y = t.layer_norm(v, g, b, 1e-5);
                let y = t.abs(y);
                t.mean_all(y)
            },
            &x,
            1e-6,
        );
        // Gain and bias gradients, via a tape where they are the checked leaf.
        check_grad(
            |t, v| {
                let xl = t.leaf(x.clone());
                let b = t.leaf(beta.clone());
                let y = t.layer_norm(xl, v, b, 1e-5);
                t.sum_all(y)
            },
            &gamma,
            1e-7,
        );
    }

    #[test]
    fn gather_pad_concat_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let x = random(&mut rng, 4, 3);
        check_grad(
            |t, v| {
                let padded = t.zero_pad_rows(v, 1, 1);
                // Repeated indices: the scatter in backward must accumulate.
                let g = t.gather_rows(padded, &[0, 2, 2, 5, 3]);
                let h = t.slice_cols(g, 1, 3);
                let k = t.concat_cols(h, h);
                let m = t.concat_rows(k, k);
                let m = t.relu(m);
                t.mean_all(m)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn add_row_and_clamp_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x = random(&mut rng, 5, 4);
        let row = random(&mut rng, 1, 4);
        check_grad(
            |t, v| {
                let r = t.leaf(row.clone());
                let y = t.add_row(v, r);
                let y = t.clamp(y, -0.8, 0.8);
                t.sum_all(y)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.leaf(Array2::from_elem((1, 2), 2.0));
        let unused = tape.leaf(Array2::from_elem((3, 3), 1.0));
        let y = tape.sum_all(used);
        let grads = tape.backward(y);
        assert!(grads.get(used).is_some());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn diamond_reuse_accumulates() {
        // f(x) = sum(x*x + x) => df/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array2::from_elem((1, 1), 3.0));
        let sq = tape.mul(x, x);
        let y = tape.add(sq, x);
        let y = tape.sum_all(y);
        let grads = tape.backward(y);
        assert_eq!(grads.get(x).unwrap()[(0, 0)], 7.0);
    }
}
