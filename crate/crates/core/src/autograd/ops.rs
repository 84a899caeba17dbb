use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use super::{Graph, Mat, Var};

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
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn unary(
    g: &mut Graph,
    a: Var,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var {
    let value = g.value(a).mapv(f);
    g.custom(
        value,
        vec![a],
        Box::new(move |ctx| {
            let mut out = ctx.grad.clone();
            ndarray::Zip::from(&mut out)
                .and(ctx.inputs[0])
                .and(ctx.output)
                .for_each(|go, &x, &y| *go *= df(x, y));
            vec![Some(out)]
        }),
    )
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.custom(
            value,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.custom(
            value,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(-ctx.grad)]),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.custom(
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad * ctx.inputs[1]),
                    ctx.needs[1].then(|| ctx.grad * ctx.inputs[0]),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.custom(value, vec![a], Box::new(move |ctx| vec![Some(ctx.grad * k)]))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, n), "add_row: row shape");
        let value = self.value(a) + self.value(row);
        self.custom(
            value,
            vec![a, row],
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            }),
        )
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, n), "mul_row: row shape");
        let value = self.value(a) * self.value(row);
        self.custom(
            value,
            vec![a, row],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad * ctx.inputs[1]),
                    ctx.needs[1].then(|| {
                        (ctx.grad * ctx.inputs[0])
                            .sum_axis(Axis(0))
                            .insert_axis(Axis(0))
                    }),
                ]
            }),
        )
    }

    /// Scales row `i` of `a` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let (m, _) = self.value(a).dim();
        assert_eq!(factors.len(), m, "scale_rows: factor count");
        let col = Array2::from_shape_vec((m, 1), factors).expect("column shape");
        let value = self.value(a) * &col;
        self.custom(value, vec![a], Box::new(move |ctx| vec![Some(ctx.grad * &col)]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k) = self.value(a).dim();
        assert_eq!(self.value(b).nrows(), k, "matmul: inner dimension");
        let value = self.value(a).dot(self.value(b));
        self.custom(
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.dot(&ctx.inputs[1].t())),
                    ctx.needs[1].then(|| ctx.inputs[0].t().dot(ctx.grad)),
                ]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.custom(value, vec![a], Box::new(|ctx| vec![Some(ctx.grad.t().to_owned())]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        unary(self, a, f64::exp, |_, y| y)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        unary(self, a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        unary(self, a, silu, |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        unary(self, a, softplus, |x, _| sigmoid(x))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.custom(
            Array2::from_elem((1, 1), total),
            vec![a],
            Box::new(|ctx| vec![Some(Mat::from_elem(ctx.inputs[0].raw_dim(), ctx.grad[[0, 0]]))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gathers rows of `a` by index; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.dim();
        let mut value = Mat::zeros((idx.len(), cols));
        for (dst, &i) in idx.iter().enumerate() {
            assert!(i < rows, "gather_rows: index {i} out of range {rows}");
            value.row_mut(dst).assign(&src.row(i));
        }
        self.custom(
            value,
            vec![a],
            Box::new(move |ctx| {
                let mut out = Mat::zeros(ctx.inputs[0].raw_dim());
                for (src, &i) in idx.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    row += &ctx.grad.row(src);
                }
                vec![Some(out)]
            }),
        )
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let cols = self.value(parts[0]).ncols();
        let views: Vec<_> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).ncols(), cols, "concat_rows: column mismatch");
                self.value(p).view()
            })
            .collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concatenate rows");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).nrows()).collect();
        self.custom(
            value,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&n, &need)| {
                        let g = need.then(|| ctx.grad.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let cols = self.value(a).ncols();
        assert!(start < end && end <= cols, "slice_cols: bad range");
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.custom(
            value,
            vec![a],
            Box::new(move |ctx| {
                let mut out = Mat::zeros(ctx.inputs[0].raw_dim());
                out.slice_mut(s![.., start..end]).assign(ctx.grad);
                vec![Some(out)]
            }),
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: element count");
        let value = Mat::from_shape_vec((rows, cols), src.iter().copied().collect())
            .expect("reshape");
        self.custom(
            value,
            vec![a],
            Box::new(|ctx| {
                let shape = ctx.inputs[0].raw_dim();
                let flat: Vec<f64> = ctx.grad.iter().copied().collect();
                vec![Some(Mat::from_shape_vec(shape, flat).expect("reshape grad"))]
            }),
        )
    }

    /// `x·W + b` with `W` stored as `in×out` and `b` as `1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Per-row layer normalization with learnable `1×n` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.dim();
        let mut xhat = Mat::zeros((m, n));
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * is));
        }
        let xhat = Rc::new(xhat);
        let normed = {
            let xh = Rc::clone(&xhat);
            let value = (*xh).clone();
            self.custom(
                value,
                vec![x],
                Box::new(move |ctx| {
                    let g = ctx.grad;
                    let mut out = Mat::zeros(g.raw_dim());
                    for i in 0..m {
                        let gr = g.row(i);
                        let xr = xh.row(i);
                        let mean_g = gr.sum() / n as f64;
                        let mean_gx = gr.dot(&xr) / n as f64;
                        let mut o = out.row_mut(i);
                        for j in 0..n {
                            o[j] = inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                    vec![Some(out)]
                }),
            )
        };
        let scaled = self.mul_row(normed, gamma);
        self.add_row(scaled, beta)
    }

    /// Divides each row by its Euclidean norm. Rows must be nonzero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut value = xv.clone();
        for (mut r, &nrm) in value.rows_mut().into_iter().zip(&norms) {
            r /= nrm;
        }
        self.custom(
            value,
            vec![x],
            Box::new(move |ctx| {
                let mut out = ctx.grad.clone();
                for (i, mut o) in out.rows_mut().into_iter().enumerate() {
                    let y = ctx.output.row(i);
                    let proj = o.dot(&y);
                    o.zip_mut_with(&y, |gv, &yv| *gv = (*gv - proj * yv) / norms[i]);
                }
                vec![Some(out)]
            }),
        )
    }
}
