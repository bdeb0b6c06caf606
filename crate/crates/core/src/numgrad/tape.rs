use crate::error::{Error, Result};
use crate::numgrad::param::{ParamId, ParamStore};
use crate::numgrad::tensor::{matmul, matmul_nt, matmul_tn, Tensor2};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// One recorded operation. Inputs are earlier tape entries, so replaying the
/// records in reverse visits consumers before producers.
enum Op {
    /// Constant or registered parameter; nothing flows further back.
    Leaf,
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    /// `a + row` with the 1×C `row` broadcast over all rows of `a`.
    AddRow {
        a: ValueId,
        row: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        a: ValueId,
        k: f64,
    },
    Tanh {
        a: ValueId,
    },
    Sigmoid {
        a: ValueId,
    },
    SoftmaxRows {
        a: ValueId,
    },
    LogSoftmaxRows {
        a: ValueId,
    },
    /// Extract entry (r, c) as a 1×1 scalar.
    Pick {
        a: ValueId,
        r: usize,
        c: usize,
    },
    /// Sum of all entries as a 1×1 scalar.
    Sum {
        a: ValueId,
    },
    Transpose {
        a: ValueId,
    },
    ConcatCols {
        a: ValueId,
        b: ValueId,
    },
    /// Stack N rows of identical width into an N×C matrix.
    StackRows {
        parts: Vec<ValueId>,
    },
    /// Centered 1-d sliding window of each filter over a 1×L signal,
    /// zero-padded to keep length L. Output is L×F, one column per filter.
    Conv1dTime {
        signal: ValueId,
        filters: ValueId,
    },
    /// Scalar computed outside the tape together with its gradient with
    /// respect to `input`; backward applies the stored Jacobian row.
    CustomScalar {
        input: ValueId,
        input_grad: Tensor2,
    },
}

struct Node {
    op: Op,
    value: Tensor2,
}

/// Wengert-style operation tape. Values are computed eagerly as operations
/// are recorded; `backward` replays the records in reverse, accumulating
/// gradient contributions into every intermediate.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_links: Vec<(ParamId, ValueId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded node.
    pub fn value(&self, id: ValueId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor2) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a constant; gradients stop here.
    pub fn constant(&mut self, value: Tensor2) -> ValueId {
        self.push(Op::Leaf, value)
    }

    /// Register a parameter's current value as a leaf. Registering the same
    /// parameter twice returns the original leaf, so one tape sees one copy.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> ValueId {
        if let Some(&(_, vid)) = self.param_links.iter().find(|(pid, _)| *pid == id) {
            return vid;
        }
        let vid = self.push(Op::Leaf, store.get(id).value.clone());
        self.param_links.push((id, vid));
        vid
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul { a, b }, value))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Broadcast-add a 1×C row onto every row of `a`.
    pub fn add_row(&mut self, a: ValueId, row: ValueId) -> Result<ValueId> {
        let (at, rt) = (self.value(a), self.value(row));
        if rt.rows() != 1 || rt.cols() != at.cols() {
            return Err(Error::dim(
                "add_row",
                format!(
                    "{}x{} plus row {}x{}",
                    at.rows(),
                    at.cols(),
                    rt.rows(),
                    rt.cols()
                ),
            ));
        }
        let mut value = at.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(rt.row(0)) {
                *v += b;
            }
        }
        Ok(self.push(Op::AddRow { a, row }, value))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    pub fn scale(&mut self, a: ValueId, k: f64) -> ValueId {
        let value = self.value(a).scale(k);
        self.push(Op::Scale { a, k }, value)
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh { a }, value)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid { a }, value)
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> ValueId {
        let src = self.value(a);
        let mut value = Tensor2::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            softmax_row_into(src.row(r), value.row_mut(r));
        }
        self.push(Op::SoftmaxRows { a }, value)
    }

    pub fn log_softmax_rows(&mut self, a: ValueId) -> ValueId {
        let src = self.value(a);
        let mut value = Tensor2::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            log_softmax_row_into(src.row(r), value.row_mut(r));
        }
        self.push(Op::LogSoftmaxRows { a }, value)
    }

    pub fn pick(&mut self, a: ValueId, r: usize, c: usize) -> Result<ValueId> {
        let at = self.value(a);
        if r >= at.rows() || c >= at.cols() {
            return Err(Error::dim(
                "pick",
                format!("({r}, {c}) out of {}x{}", at.rows(), at.cols()),
            ));
        }
        let value = Tensor2::filled(1, 1, at.get(r, c));
        Ok(self.push(Op::Pick { a, r, c }, value))
    }

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum { a }, Tensor2::filled(1, 1, total))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose { a }, value)
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rows() != bt.rows() {
            return Err(Error::dim(
                "concat_cols",
                format!("{} rows vs {} rows", at.rows(), bt.rows()),
            ));
        }
        let (rows, ac, bc) = (at.rows(), at.cols(), bt.cols());
        let mut value = Tensor2::zeros(rows, ac + bc);
        for r in 0..rows {
            value.row_mut(r)[..ac].copy_from_slice(at.row(r));
            value.row_mut(r)[ac..].copy_from_slice(bt.row(r));
        }
        Ok(self.push(Op::ConcatCols { a, b }, value))
    }

    pub fn stack_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Argument("stack_rows of an empty sequence".into()));
        }
        let cols = self.value(parts[0]).cols();
        for &p in parts {
            let t = self.value(p);
            if t.rows() != 1 || t.cols() != cols {
                return Err(Error::dim(
                    "stack_rows",
                    format!("expected 1x{cols}, got {}x{}", t.rows(), t.cols()),
                ));
            }
        }
        let mut value = Tensor2::zeros(parts.len(), cols);
        for (r, &p) in parts.iter().enumerate() {
            value.row_mut(r).copy_from_slice(self.value(p).row(0));
        }
        Ok(self.push(
            Op::StackRows {
                parts: parts.to_vec(),
            },
            value,
        ))
    }

    pub fn conv1d_time(&mut self, signal: ValueId, filters: ValueId) -> Result<ValueId> {
        let value = conv1d_kernel(self.value(signal), self.value(filters))?;
        Ok(self.push(Op::Conv1dTime { signal, filters }, value))
    }

    /// Record an externally computed scalar together with its gradient with
    /// respect to `input` (same shape as `input`).
    pub fn custom_scalar(
        &mut self,
        input: ValueId,
        value: f64,
        input_grad: Tensor2,
    ) -> Result<ValueId> {
        if input_grad.shape() != self.value(input).shape() {
            return Err(Error::dim(
                "custom_scalar",
                format!(
                    "gradient {}x{} vs input {}x{}",
                    input_grad.rows(),
                    input_grad.cols(),
                    self.value(input).rows(),
                    self.value(input).cols()
                ),
            ));
        }
        Ok(self.push(
            Op::CustomScalar { input, input_grad },
            Tensor2::filled(1, 1, value),
        ))
    }

    /// Reverse pass from a finite 1×1 loss node. Returns the gradient of the
    /// loss with respect to every node recorded up to it.
    pub fn backward(&self, loss: ValueId) -> Result<Backprop> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {}x{}", lt.rows(), lt.cols()),
            ));
        }
        if !lt.get(0, 0).is_finite() {
            return Err(Error::NonFinite("loss passed to backward".into()));
        }

        let mut pending: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut done: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let ga = matmul_nt(&g, self.value(*b))?;
                    let gb = matmul_tn(self.value(*a), &g)?;
                    acc(&mut pending[a.0], ga)?;
                    acc(&mut pending[b.0], gb)?;
                }
                Op::Add { a, b } => {
                    acc(&mut pending[a.0], g.clone())?;
                    acc(&mut pending[b.0], g.clone())?;
                }
                Op::AddRow { a, row } => {
                    let mut grow = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in grow.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut pending[a.0], g.clone())?;
                    acc(&mut pending[row.0], grow)?;
                }
                Op::Mul { a, b } => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    acc(&mut pending[a.0], ga)?;
                    acc(&mut pending[b.0], gb)?;
                }
                Op::Scale { a, k } => {
                    acc(&mut pending[a.0], g.scale(*k))?;
                }
                Op::Tanh { a } => {
                    let y = &self.nodes[i].value;
                    let ga = Tensor2::from_fn(y.rows(), y.cols(), |r, c| {
                        let t = y.get(r, c);
                        g.get(r, c) * (1.0 - t * t)
                    });
                    acc(&mut pending[a.0], ga)?;
                }
                Op::Sigmoid { a } => {
                    let y = &self.nodes[i].value;
                    let ga = Tensor2::from_fn(y.rows(), y.cols(), |r, c| {
                        let s = y.get(r, c);
                        g.get(r, c) * s * (1.0 - s)
                    });
                    acc(&mut pending[a.0], ga)?;
                }
                Op::SoftmaxRows { a } => {
                    let y = &self.nodes[i].value;
                    let mut ga = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut pending[a.0], ga)?;
                }
                Op::LogSoftmaxRows { a } => {
                    let y = &self.nodes[i].value;
                    let mut ga = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    acc(&mut pending[a.0], ga)?;
                }
                Op::Pick { a, r, c } => {
                    let at = self.value(*a);
                    let mut ga = Tensor2::zeros(at.rows(), at.cols());
                    ga.set(*r, *c, g.get(0, 0));
                    acc(&mut pending[a.0], ga)?;
                }
                Op::Sum { a } => {
                    let at = self.value(*a);
                    let ga = Tensor2::filled(at.rows(), at.cols(), g.get(0, 0));
                    acc(&mut pending[a.0], ga)?;
                }
                Op::Transpose { a } => {
                    acc(&mut pending[a.0], g.transpose())?;
                }
                Op::ConcatCols { a, b } => {
                    let ac = self.value(*a).cols();
                    let mut ga = Tensor2::zeros(g.rows(), ac);
                    let mut gb = Tensor2::zeros(g.rows(), g.cols() - ac);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    acc(&mut pending[a.0], ga)?;
                    acc(&mut pending[b.0], gb)?;
                }
                Op::StackRows { parts } => {
                    for (r, p) in parts.iter().enumerate() {
                        acc(&mut pending[p.0], Tensor2::row_vector(g.row(r)))?;
                    }
                }
                Op::Conv1dTime { signal, filters } => {
                    let sig = self.value(*signal);
                    let filt = self.value(*filters);
                    let (num_filters, width) = filt.shape();
                    let l = sig.cols();
                    let center = width / 2;
                    let mut gsig = Tensor2::zeros(1, l);
                    let mut gfilt = Tensor2::zeros(num_filters, width);
                    for out_pos in 0..l {
                        for f in 0..num_filters {
                            let gv = g.get(out_pos, f);
                            if gv == 0.0 {
                                continue;
                            }
                            for w in 0..width {
                                let t = out_pos + w;
                                if t < center || t - center >= l {
                                    continue;
                                }
                                let t = t - center;
                                gsig.set(0, t, gsig.get(0, t) + gv * filt.get(f, w));
                                gfilt.set(f, w, gfilt.get(f, w) + gv * sig.get(0, t));
                            }
                        }
                    }
                    acc(&mut pending[signal.0], gsig)?;
                    acc(&mut pending[filters.0], gfilt)?;
                }
                Op::CustomScalar { input, input_grad } => {
                    acc(&mut pending[input.0], input_grad.scale(g.get(0, 0)))?;
                }
            }
            done[i] = Some(g);
        }

        let grads = done
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.unwrap_or_else(|| {
                    Tensor2::zeros(self.nodes[i].value.rows(), self.nodes[i].value.cols())
                })
            })
            .collect();
        Ok(Backprop {
            grads,
            links: self.param_links.clone(),
        })
    }
}

fn acc(slot: &mut Option<Tensor2>, contribution: Tensor2) -> Result<()> {
    match slot {
        Some(g) => g.add_assign(&contribution),
        None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

/// Result of a reverse pass: one gradient tensor per tape node.
pub struct Backprop {
    grads: Vec<Tensor2>,
    links: Vec<(ParamId, ValueId)>,
}

impl Backprop {
    /// Gradient of the loss with respect to the node `id`.
    pub fn wrt(&self, id: ValueId) -> &Tensor2 {
        &self.grads[id.0]
    }

    /// Add the gradients of all registered parameters into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(pid, vid) in &self.links {
            store.get_mut(pid).grad.add_assign(&self.grads[vid.0])?;
        }
        Ok(())
    }
}

/// Max-shifted softmax of one row.
pub(crate) fn softmax_row_into(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &x) in dst.iter_mut().zip(src) {
        let e = (x - m).exp();
        *d = e;
        total += e;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

/// Max-shifted log-softmax of one row.
pub(crate) fn log_softmax_row_into(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = src.iter().map(|&x| (x - m).exp()).sum();
    let lse = m + total.ln();
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = x - lse;
    }
}

/// Centered same-length sliding window of each filter row over a 1×L signal.
pub(crate) fn conv1d_kernel(signal: &Tensor2, filters: &Tensor2) -> Result<Tensor2> {
    if signal.rows() != 1 {
        return Err(Error::dim(
            "conv1d_time",
            format!(
                "signal must be 1xL, got {}x{}",
                signal.rows(),
                signal.cols()
            ),
        ));
    }
    let (num_filters, width) = filters.shape();
    if width % 2 == 0 {
        return Err(Error::Config(format!(
            "conv1d_time filter width must be odd, got {width}"
        )));
    }
    let l = signal.cols();
    let center = width / 2;
    let mut out = Tensor2::zeros(l, num_filters);
    for out_pos in 0..l {
        for f in 0..num_filters {
            let mut accum = 0.0;
            for w in 0..width {
                let t = out_pos + w;
                if t < center || t - center >= l {
                    continue;
                }
                accum += filters.get(f, w) * signal.get(0, t - center);
            }
            out.set(out_pos, f, accum);
        }
    }
    Ok(out)
}
