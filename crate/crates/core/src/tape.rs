//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward computation in the crate (decoder rollouts, the speaker
//! encoder, the losses) is recorded here; `Tape::backward` then walks the
//! nodes in reverse. Batched ops carry explicit per-sample lengths so that
//! padded positions never contribute to values or gradients.

use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f64 = 1e-5;

/// Raw Gaussian-mixture position scores `φ_j` for positions `j = 1..=n`.
pub(crate) fn gmm_phi(priors: &[f64], means: &[f64], log_vars: &[f64], n: usize) -> Vec<f64> {
    let mut phi = vec![0.0; n];
    for i in 0..priors.len() {
        let two_var = 2.0 * log_vars[i].exp();
        for (j, p) in phi.iter_mut().enumerate() {
            let d = means[i] - (j + 1) as f64;
            *p += priors[i] * (-(d * d) / two_var).exp();
        }
    }
    phi
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Raw mixture scores summing below this are treated as all-zero.
const GMM_FLOOR: f64 = 1e-300;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<Option<usize>>),
    StackTime(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    RowSqNorm(Var),
    GmmWeights {
        priors: Var,
        means: Var,
        log_vars: Var,
        lens: Vec<usize>,
        /// Per-row normaliser; `None` where the one-hot fallback fired.
        sums: Vec<Option<f64>>,
    },
    Context(Var, Var),
    SelectShift(Var, Vec<usize>),
    Conv2d(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        lens: Vec<usize>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaskedTimeMean(Var, Vec<usize>),
    L2Normalize(Var, Vec<f64>),
    SeqSqErr {
        out: Var,
        target: Tensor,
        lens: Vec<usize>,
    },
    Contrastive {
        z: Var,
        triples: Vec<(usize, usize, usize)>,
        margin: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    gmm_fallbacks: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many attention rows fell back to a one-hot because every
    /// mixture score underflowed.
    pub fn gmm_fallbacks(&self) -> usize {
        self.gmm_fallbacks
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `a · b` for 2-D `a: n×k`, `b: k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        self.push(Tensor::from_vec(&[n, m], out), Op::MatMul(a, b))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (n, m) = self.value(x).dims2();
        let b = self.value(bias).data();
        assert_eq!(b.len(), m);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        self.push(Tensor::from_vec(&[n, m], out), Op::AddRow(x, bias))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.value(*p).dims2();
                assert_eq!(r, rows, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::from_vec(&[rows, total], out),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (rows, cols) = self.value(a).dims2();
        assert!(start <= end && end <= cols);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        self.push(
            Tensor::from_vec(&[rows, end - start], out),
            Op::SliceCols(a, start),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.value(a).dims2();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(Tensor::from_vec(&[rows, cols], out), Op::SoftmaxRows(a))
    }

    /// Row lookup into a 2-D table; `None` produces a zero row.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Var {
        let (n, d) = self.value(table).dims2();
        let src = self.value(table).data();
        let mut out = vec![0.0; ids.len() * d];
        for (r, id) in ids.iter().enumerate() {
            if let Some(i) = *id {
                assert!(i < n, "gather index {i} out of range {n}");
                out[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        self.push(
            Tensor::from_vec(&[ids.len(), d], out),
            Op::GatherRows(table, ids.to_vec()),
        )
    }

    /// Stacks `T` tensors of shape `B×d` into one `B×T×d` tensor.
    pub fn stack_time(&mut self, steps: &[Var]) -> Var {
        let (b, d) = self.value(steps[0]).dims2();
        let t = steps.len();
        let mut out = vec![0.0; b * t * d];
        for (ti, s) in steps.iter().enumerate() {
            let v = self.value(*s).data();
            for bi in 0..b {
                out[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                    .copy_from_slice(&v[bi * d..(bi + 1) * d]);
            }
        }
        self.push(
            Tensor::from_vec(&[b, t, d], out),
            Op::StackTime(steps.to_vec()),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Squared L2 norm of each row of a 2-D tensor.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let (rows, cols) = self.value(a).dims2();
        let out = self
            .value(a)
            .data()
            .chunks(cols)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        self.push(Tensor::from_vec(&[rows], out), Op::RowSqNorm(a))
    }

    /// Normalised Gaussian-mixture attention weights over `lmax` positions.
    ///
    /// Row `b` has `lens[b]` valid positions; the rest are zero. A row whose
    /// raw scores all underflow becomes a one-hot at the rounded mean of its
    /// highest-prior component and passes no gradient.
    pub fn gmm_weights(
        &mut self,
        priors: Var,
        means: Var,
        log_vars: Var,
        lens: &[usize],
        lmax: usize,
    ) -> Var {
        let (b, m) = self.value(priors).dims2();
        assert_eq!(lens.len(), b);
        let mut out = vec![0.0; b * lmax];
        let mut sums = Vec::with_capacity(b);
        for bi in 0..b {
            let n = lens[bi];
            assert!(n >= 1 && n <= lmax);
            let p = &self.value(priors).data()[bi * m..(bi + 1) * m];
            let mu = &self.value(means).data()[bi * m..(bi + 1) * m];
            let lv = &self.value(log_vars).data()[bi * m..(bi + 1) * m];
            let phi = gmm_phi(p, mu, lv, n);
            let s: f64 = phi.iter().sum();
            let row = &mut out[bi * lmax..bi * lmax + n];
            if s > GMM_FLOOR && s.is_finite() {
                for (o, f) in row.iter_mut().zip(&phi) {
                    *o = f / s;
                }
                sums.push(Some(s));
            } else {
                let pos = mu[argmax(p)].round().clamp(1.0, n as f64) as usize;
                row[pos - 1] = 1.0;
                sums.push(None);
                self.gmm_fallbacks += 1;
            }
        }
        self.push(
            Tensor::from_vec(&[b, lmax], out),
            Op::GmmWeights {
                priors,
                means,
                log_vars,
                lens: lens.to_vec(),
                sums,
            },
        )
    }

    /// `c_b = Σ_j w_bj E_bj` with `weights: B×L` and `emb: B×L×d`.
    pub fn context(&mut self, weights: Var, emb: Var) -> Var {
        let (b, l) = self.value(weights).dims2();
        let es = self.value(emb).shape();
        assert_eq!(es.len(), 3);
        assert_eq!((es[0], es[1]), (b, l), "context shape mismatch");
        let d = es[2];
        let w = self.value(weights).data();
        let e = self.value(emb).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for j in 0..l {
                let wj = w[bi * l + j];
                if wj != 0.0 {
                    let col = &e[(bi * l + j) * d..(bi * l + j + 1) * d];
                    for (x, y) in o.iter_mut().zip(col) {
                        *x += wj * y;
                    }
                }
            }
        }
        self.push(Tensor::from_vec(&[b, d], out), Op::Context(weights, emb))
    }

    /// Broadcasts, per row, the shift of the component chosen by `choice`.
    pub fn select_shift(&mut self, shifts: Var, choice: &[usize]) -> Var {
        let (b, m) = self.value(shifts).dims2();
        let s = self.value(shifts).data();
        let mut out = vec![0.0; b * m];
        for bi in 0..b {
            let v = s[bi * m + choice[bi]];
            out[bi * m..(bi + 1) * m].fill(v);
        }
        self.push(
            Tensor::from_vec(&[b, m], out),
            Op::SelectShift(shifts, choice.to_vec()),
        )
    }

    /// Stride-1, same-padded 2-D convolution without bias.
    ///
    /// `x: B×Cin×H×W`, `w: Cout×Cin×K×K` with odd `K`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin);
        assert_eq!(ws[3], k);
        assert!(k % 2 == 1);
        let hw = h * wd;
        let ck = cin * k * k;
        let mut out = vec![0.0; b * cout * hw];
        let mut cols = vec![0.0; ck * hw];
        for bi in 0..b {
            let xb = &self.value(x).data()[bi * cin * hw..(bi + 1) * cin * hw];
            im2col(xb, cin, h, wd, k, &mut cols);
            gemm(
                cout,
                ck,
                hw,
                self.value(w).data(),
                false,
                &cols,
                false,
                0.0,
                &mut out[bi * cout * hw..(bi + 1) * cout * hw],
            );
        }
        self.push(Tensor::from_vec(&[b, cout, h, wd], out), Op::Conv2d(x, w))
    }

    /// Batch normalisation over `x: B×C×T×F`, per channel, counting only
    /// frames `t < lens[b]`. Padded frames come out as exact zeros.
    ///
    /// In training mode the statistics come from the batch itself and are
    /// returned so the caller can update running averages; otherwise
    /// `running` supplies them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        lens: &[usize],
        running: Option<(&[f64], &[f64])>,
    ) -> (Var, Option<BnStats>) {
        let xs = self.value(x).shape().to_vec();
        let (b, c, t, f) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.value(x).data();
        let train = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                let count: usize = lens.iter().map(|l| l * f).sum();
                for ci in 0..c {
                    let mut s = 0.0;
                    for (bi, &l) in lens.iter().enumerate() {
                        let base = (bi * c + ci) * t * f;
                        s += xd[base..base + l * f].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut ss = 0.0;
                    for (bi, &l) in lens.iter().enumerate() {
                        let base = (bi * c + ci) * t * f;
                        ss += xd[base..base + l * f]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ci] = mu;
                    var[ci] = ss / count as f64;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * t * f;
                let n = lens[bi] * f;
                for (o, v) in out[base..base + n].iter_mut().zip(&xd[base..base + n]) {
                    *o = g[ci] * (v - mean[ci]) * inv_std[ci] + be[ci];
                }
            }
        }
        let stats = train.then(|| BnStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let v = self.push(
            Tensor::from_vec(&xs, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                lens: lens.to_vec(),
                mean,
                inv_std,
                train,
            },
        );
        (v, stats)
    }

    /// Mean over the valid frames of `x: B×C×T×F`, giving `B×(C·F)`.
    pub fn masked_time_mean(&mut self, x: Var, lens: &[usize]) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (b, c, t, f) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * f];
        for bi in 0..b {
            let l = lens[bi];
            assert!(l >= 1 && l <= t);
            for ci in 0..c {
                let o = &mut out[(bi * c + ci) * f..(bi * c + ci + 1) * f];
                let base = (bi * c + ci) * t * f;
                for ti in 0..l {
                    for (acc, v) in o.iter_mut().zip(&xd[base + ti * f..base + (ti + 1) * f]) {
                        *acc += v;
                    }
                }
                for acc in o.iter_mut() {
                    *acc /= l as f64;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[b, c * f], out),
            Op::MaskedTimeMean(x, lens.to_vec()),
        )
    }

    /// Divides each row by its L2 norm. Zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let (rows, cols) = self.value(a).dims2();
        let mut out = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for row in out.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            norms.push(n);
        }
        self.push(
            Tensor::from_vec(&[rows, cols], out),
            Op::L2Normalize(a, norms),
        )
    }

    /// Per-sample `Σ_{t<len} ‖out_t − target_t‖²` for `B×T×d` sequences.
    pub fn seq_sq_err(&mut self, out: Var, target: &Tensor, lens: &[usize]) -> Var {
        let s = self.value(out).shape().to_vec();
        assert_eq!(s.as_slice(), target.shape(), "seq_sq_err shape mismatch");
        let (b, t, d) = (s[0], s[1], s[2]);
        let o = self.value(out).data();
        let y = target.data();
        let vals = (0..b)
            .map(|bi| {
                let base = bi * t * d;
                let n = lens[bi] * d;
                o[base..base + n]
                    .iter()
                    .zip(&y[base..base + n])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum()
            })
            .collect();
        self.push(
            Tensor::from_vec(&[b], vals),
            Op::SeqSqErr {
                out,
                target: target.clone(),
                lens: lens.to_vec(),
            },
        )
    }

    /// Mean over triples of `½(‖z1−z2‖² + max(0, Δ − ‖z2−z3‖)²)`; the
    /// triples index rows of `z`.
    pub fn contrastive(&mut self, z: Var, triples: &[(usize, usize, usize)], margin: f64) -> Var {
        let (_, d) = self.value(z).dims2();
        let zd = self.value(z).data();
        let row = |i: usize| &zd[i * d..(i + 1) * d];
        let mut total = 0.0;
        for &(a, p, n) in triples {
            let pos: f64 = row(a)
                .iter()
                .zip(row(p))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let dist = row(p)
                .iter()
                .zip(row(n))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let hinge = (margin - dist).max(0.0);
            total += 0.5 * (pos + hinge * hinge);
        }
        let v = total / triples.len() as f64;
        self.push(
            Tensor::scalar(v),
            Op::Contrastive {
                z,
                triples: triples.to_vec(),
                margin,
            },
        )
    }

    /// Mean softmax cross-entropy of `logits: B×C` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (b, c) = self.value(logits).dims2();
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (bi, row) in probs.chunks_mut(c).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[labels[bi]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Tensor::from_vec(&[b, c], probs),
            },
        )
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(self.value(root).shape(), vec![1.0]));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let gd = g.data();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.value(*a).dims2();
                    let m = self.value(*b).dims2().1;
                    let ga = slot(&mut grads, *a, self.value(*a).shape());
                    gemm(n, m, k, gd, false, self.value(*b).data(), true, 1.0, ga);
                    let gb = slot(&mut grads, *b, self.value(*b).shape());
                    gemm(k, n, m, self.value(*a).data(), true, gd, false, 1.0, gb);
                }
                Op::AddRow(x, bias) => {
                    add_into(slot(&mut grads, *x, g.shape()), gd);
                    let m = self.value(*bias).len();
                    let gb = slot(&mut grads, *bias, self.value(*bias).shape());
                    for row in gd.chunks(m) {
                        add_into(gb, row);
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.shape()), gd);
                    add_into(slot(&mut grads, *b, g.shape()), gd);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, g.shape()), gd);
                    let gb = slot(&mut grads, *b, g.shape());
                    for (o, v) in gb.iter_mut().zip(gd) {
                        *o -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga = slot(&mut grads, *a, g.shape());
                    for ((o, v), y) in ga.iter_mut().zip(gd).zip(vb) {
                        *o += v * y;
                    }
                    let gb = slot(&mut grads, *b, g.shape());
                    for ((o, v), x) in gb.iter_mut().zip(gd).zip(va) {
                        *o += v * x;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = slot(&mut grads, *a, g.shape());
                    for (o, v) in ga.iter_mut().zip(gd) {
                        *o += v * s;
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.shape());
                    for ((o, v), yy) in ga.iter_mut().zip(gd).zip(y) {
                        *o += v * (1.0 - yy * yy);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.shape());
                    for ((o, v), xx) in ga.iter_mut().zip(gd).zip(x) {
                        if *xx > 0.0 {
                            *o += v;
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.shape());
                    for ((o, v), yy) in ga.iter_mut().zip(gd).zip(y) {
                        *o += v * yy;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = g.dims2();
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).dims2().1;
                        let gp = slot(&mut grads, *p, self.value(*p).shape());
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &gd[r * total + off..r * total + off + w],
                            );
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, w) = g.dims2();
                    let cols = self.value(*a).dims2().1;
                    let ga = slot(&mut grads, *a, self.value(*a).shape());
                    for r in 0..rows {
                        add_into(
                            &mut ga[r * cols + start..r * cols + start + w],
                            &gd[r * w..(r + 1) * w],
                        );
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (_, cols) = g.dims2();
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.shape());
                    for ((go, gr), yr) in
                        ga.chunks_mut(cols).zip(gd.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in go.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
                Op::GatherRows(table, ids) => {
                    let d = self.value(*table).dims2().1;
                    let gt = slot(&mut grads, *table, self.value(*table).shape());
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(i) = *id {
                            add_into(&mut gt[i * d..(i + 1) * d], &gd[r * d..(r + 1) * d]);
                        }
                    }
                }
                Op::StackTime(steps) => {
                    let s = g.shape();
                    let (b, t, d) = (s[0], s[1], s[2]);
                    for (ti, sv) in steps.iter().enumerate() {
                        let gs = slot(&mut grads, *sv, &[b, d]);
                        for bi in 0..b {
                            add_into(
                                &mut gs[bi * d..(bi + 1) * d],
                                &gd[(bi * t + ti) * d..(bi * t + ti + 1) * d],
                            );
                        }
                    }
                }
                Op::Reshape(a) => {
                    add_into(slot(&mut grads, *a, self.value(*a).shape()), gd);
                }
                Op::SumAll(a) => {
                    let ga = slot(&mut grads, *a, self.value(*a).shape());
                    for o in ga.iter_mut() {
                        *o += gd[0];
                    }
                }
                Op::RowSqNorm(a) => {
                    let (_, cols) = self.value(*a).dims2();
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, self.value(*a).shape());
                    for (r, (go, xr)) in ga.chunks_mut(cols).zip(x.chunks(cols)).enumerate() {
                        for (o, xv) in go.iter_mut().zip(xr) {
                            *o += 2.0 * xv * gd[r];
                        }
                    }
                }
                Op::GmmWeights {
                    priors,
                    means,
                    log_vars,
                    lens,
                    sums,
                } => {
                    self.gmm_backward(&mut grads, &g, node, *priors, *means, *log_vars, lens, sums);
                }
                Op::Context(weights, emb) => {
                    let (b, l) = self.value(*weights).dims2();
                    let d = g.dims2().1;
                    let w = self.value(*weights).data();
                    let e = self.value(*emb).data();
                    let gw = slot(&mut grads, *weights, &[b, l]);
                    for bi in 0..b {
                        let gc = &gd[bi * d..(bi + 1) * d];
                        for j in 0..l {
                            let col = &e[(bi * l + j) * d..(bi * l + j + 1) * d];
                            gw[bi * l + j] += gc.iter().zip(col).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                    let ge = slot(&mut grads, *emb, &[b, l, d]);
                    for bi in 0..b {
                        let gc = &gd[bi * d..(bi + 1) * d];
                        for j in 0..l {
                            let wj = w[bi * l + j];
                            if wj != 0.0 {
                                for (o, v) in ge[(bi * l + j) * d..(bi * l + j + 1) * d]
                                    .iter_mut()
                                    .zip(gc)
                                {
                                    *o += wj * v;
                                }
                            }
                        }
                    }
                }
                Op::SelectShift(shifts, choice) => {
                    let (b, m) = g.dims2();
                    let gs = slot(&mut grads, *shifts, &[b, m]);
                    for bi in 0..b {
                        gs[bi * m + choice[bi]] += gd[bi * m..(bi + 1) * m].iter().sum::<f64>();
                    }
                }
                Op::Conv2d(x, w) => {
                    let xs = self.value(*x).shape().to_vec();
                    let ws = self.value(*w).shape().to_vec();
                    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (cout, k) = (ws[0], ws[2]);
                    let hw = h * wd;
                    let ck = cin * k * k;
                    let mut cols = vec![0.0; ck * hw];
                    let mut gcols = vec![0.0; ck * hw];
                    let mut gw_acc = vec![0.0; cout * ck];
                    let mut gx_acc = vec![0.0; b * cin * hw];
                    for bi in 0..b {
                        let xb = &self.value(*x).data()[bi * cin * hw..(bi + 1) * cin * hw];
                        let gyb = &gd[bi * cout * hw..(bi + 1) * cout * hw];
                        im2col(xb, cin, h, wd, k, &mut cols);
                        gemm(cout, hw, ck, gyb, false, &cols, true, 1.0, &mut gw_acc);
                        gemm(
                            ck,
                            cout,
                            hw,
                            self.value(*w).data(),
                            true,
                            gyb,
                            false,
                            0.0,
                            &mut gcols,
                        );
                        col2im_add(
                            &gcols,
                            cin,
                            h,
                            wd,
                            k,
                            &mut gx_acc[bi * cin * hw..(bi + 1) * cin * hw],
                        );
                    }
                    add_into(slot(&mut grads, *w, &ws), &gw_acc);
                    add_into(slot(&mut grads, *x, &xs), &gx_acc);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    lens,
                    mean,
                    inv_std,
                    train,
                } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (b, c, t, f) = (xs[0], xs[1], xs[2], xs[3]);
                    let xd = self.value(*x).data();
                    let gam = self.value(*gamma).data();
                    let count: f64 = lens.iter().map(|l| (l * f) as f64).sum();
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * t * f;
                            let n = lens[bi] * f;
                            for (gv, xv) in gd[base..base + n].iter().zip(&xd[base..base + n]) {
                                gb[ci] += gv;
                                gg[ci] += gv * (xv - mean[ci]) * inv_std[ci];
                            }
                        }
                    }
                    let mut gx = vec![0.0; xd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * t * f;
                            let n = lens[bi] * f;
                            let scale = gam[ci] * inv_std[ci];
                            for ((o, gv), xv) in gx[base..base + n]
                                .iter_mut()
                                .zip(&gd[base..base + n])
                                .zip(&xd[base..base + n])
                            {
                                *o = if *train {
                                    let xhat = (xv - mean[ci]) * inv_std[ci];
                                    scale * (gv - gb[ci] / count - xhat * gg[ci] / count)
                                } else {
                                    scale * gv
                                };
                            }
                        }
                    }
                    add_into(slot(&mut grads, *x, &xs), &gx);
                    add_into(slot(&mut grads, *gamma, &[c]), &gg);
                    add_into(slot(&mut grads, *beta, &[c]), &gb);
                }
                Op::MaskedTimeMean(x, lens) => {
                    let xs = self.value(*x).shape().to_vec();
                    let (b, c, t, f) = (xs[0], xs[1], xs[2], xs[3]);
                    let gx = slot(&mut grads, *x, &xs);
                    for bi in 0..b {
                        let l = lens[bi];
                        for ci in 0..c {
                            let gr = &gd[(bi * c + ci) * f..(bi * c + ci + 1) * f];
                            let base = (bi * c + ci) * t * f;
                            for ti in 0..l {
                                for (o, v) in
                                    gx[base + ti * f..base + (ti + 1) * f].iter_mut().zip(gr)
                                {
                                    *o += v / l as f64;
                                }
                            }
                        }
                    }
                }
                Op::L2Normalize(a, norms) => {
                    let (_, cols) = g.dims2();
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.shape());
                    for (r, ((go, gr), yr)) in ga
                        .chunks_mut(cols)
                        .zip(gd.chunks(cols))
                        .zip(y.chunks(cols))
                        .enumerate()
                    {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in go.iter_mut().zip(gr).zip(yr) {
                            *o += (gv - yv * dot) / norms[r];
                        }
                    }
                }
                Op::SeqSqErr { out, target, lens } => {
                    let s = target.shape().to_vec();
                    let (b, t, d) = (s[0], s[1], s[2]);
                    let o = self.value(*out).data();
                    let y = target.data();
                    let go = slot(&mut grads, *out, &s);
                    for bi in 0..b {
                        let base = bi * t * d;
                        let n = lens[bi] * d;
                        for k in base..base + n {
                            go[k] += 2.0 * (o[k] - y[k]) * gd[bi];
                        }
                    }
                }
                Op::Contrastive { z, triples, margin } => {
                    let (rows, d) = self.value(*z).dims2();
                    let zd = self.value(*z).data();
                    let w = gd[0] / triples.len() as f64;
                    let gz = slot(&mut grads, *z, &[rows, d]);
                    for &(a, p, n) in triples {
                        for k in 0..d {
                            let diff = zd[a * d + k] - zd[p * d + k];
                            gz[a * d + k] += w * diff;
                            gz[p * d + k] -= w * diff;
                        }
                        let dist = (0..d)
                            .map(|k| (zd[p * d + k] - zd[n * d + k]).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        let hinge = (margin - dist).max(0.0);
                        if hinge > 0.0 && dist > 0.0 {
                            for k in 0..d {
                                let u = (zd[p * d + k] - zd[n * d + k]) / dist;
                                gz[p * d + k] -= w * hinge * u;
                                gz[n * d + k] += w * hinge * u;
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let (b, c) = probs.dims2();
                    let gl = slot(&mut grads, *logits, &[b, c]);
                    let w = gd[0] / b as f64;
                    for bi in 0..b {
                        for ci in 0..c {
                            let onehot = if labels[bi] == ci { 1.0 } else { 0.0 };
                            gl[bi * c + ci] += w * (probs.data()[bi * c + ci] - onehot);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }

    #[allow(clippy::too_many_arguments)]
    fn gmm_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        node: &Node,
        priors: Var,
        means: Var,
        log_vars: Var,
        lens: &[usize],
        sums: &[Option<f64>],
    ) {
        let (b, lmax) = g.dims2();
        let m = self.value(priors).dims2().1;
        let (p, mu, lv) = (
            self.value(priors).data(),
            self.value(means).data(),
            self.value(log_vars).data(),
        );
        let w = node.value.data();
        let mut gp = vec![0.0; b * m];
        let mut gmu = vec![0.0; b * m];
        let mut glv = vec![0.0; b * m];
        for bi in 0..b {
            let Some(s) = sums[bi] else { continue };
            let n = lens[bi];
            let gw = &g.data()[bi * lmax..bi * lmax + n];
            let wr = &w[bi * lmax..bi * lmax + n];
            let dot: f64 = gw.iter().zip(wr).map(|(x, y)| x * y).sum();
            for i in 0..m {
                let k = bi * m + i;
                let var = lv[k].exp();
                for j in 0..n {
                    let gphi = (gw[j] - dot) / s;
                    let d = mu[k] - (j + 1) as f64;
                    let e = (-(d * d) / (2.0 * var)).exp();
                    gp[k] += gphi * e;
                    gmu[k] += gphi * p[k] * e * (-d / var);
                    glv[k] += gphi * p[k] * e * (d * d / (2.0 * var));
                }
            }
        }
        add_into(slot(grads, priors, &[b, m]), &gp);
        add_into(slot(grads, means, &[b, m]), &gmu);
        add_into(slot(grads, log_vars, &[b, m]), &glv);
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        for dh in 0..k {
            for dw in 0..k {
                let row =
                    &mut cols[((ci * k + dh) * k + dw) * hw..((ci * k + dh) * k + dw + 1) * hw];
                let oh = dh as isize - pad;
                let ow = dw as isize - pad;
                for r in 0..h {
                    let sr = r as isize + oh;
                    let dst = &mut row[r * w..(r + 1) * w];
                    if sr < 0 || sr >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[ci * hw + sr as usize * w..ci * hw + (sr as usize + 1) * w];
                    for (c, d) in dst.iter_mut().enumerate() {
                        let sc = c as isize + ow;
                        *d = if sc < 0 || sc >= w as isize {
                            0.0
                        } else {
                            src[sc as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        for dh in 0..k {
            for dw in 0..k {
                let row = &cols[((ci * k + dh) * k + dw) * hw..((ci * k + dh) * k + dw + 1) * hw];
                let oh = dh as isize - pad;
                let ow = dw as isize - pad;
                for r in 0..h {
                    let sr = r as isize + oh;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ci * hw + sr as usize * w..ci * hw + (sr as usize + 1) * w];
                    for c in 0..w {
                        let sc = c as isize + ow;
                        if sc >= 0 && sc < w as isize {
                            dst[sc as usize] += row[r * w + c];
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, or zeros of `shape` if it did not contribute.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
