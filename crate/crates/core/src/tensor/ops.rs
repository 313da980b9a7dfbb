use super::{Result, Tape, Tensor, TensorError, Var};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    MulCol { x: Var, col: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Transpose(Var),
    Sum(Var),
    RowSum(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    MaxAbsRescale { x: Var, argmax: usize, peak: f64 },
}

#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl View {
    fn of(shape: &[usize], trans: bool) -> Self {
        let (r, c) = (shape[0], shape[1]);
        if trans {
            View {
                rows: c,
                cols: r,
                rs: 1,
                cs: c as isize,
            }
        } else {
            View {
                rows: r,
                cols: c,
                rs: c as isize,
                cs: 1,
            }
        }
    }

    fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c (+)= a · b` over strided views.
fn gemm(a: &[f64], av: View, b: &[f64], bv: View, c: &mut [f64], cv: View, beta: f64) {
    debug_assert_eq!(av.cols, bv.rows);
    debug_assert_eq!(av.rows, cv.rows);
    debug_assert_eq!(bv.cols, cv.cols);
    if av.rows == 0 || bv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: every view was derived from the shape of the slice it
    // indexes, so all strided accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.grad_any(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() != vb.numel() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (av, bv) = (View::of(va.shape(), ta), View::of(vb.shape(), tb));
        if av.cols != bv.rows {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; av.rows * bv.cols];
        let cv = View::of(&[av.rows, bv.cols], false);
        gemm(va.data(), av, vb.data(), bv, &mut out, cv, 0.0);
        let value = Tensor::new(vec![av.rows, bv.cols], out)?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b` without materialising the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let cols = vx.cols();
        if vb.numel() != cols {
            return Err(shape_err("add_row", vx.shape(), vb.shape()));
        }
        let b = vb.data();
        let data = vx
            .data()
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.grad_any(&[x, bias]);
        Ok(self.push(value, Op::AddRow { x, bias }, rg))
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (vx, vc) = (self.value(x), self.value(col));
        if !vx.is_matrix() || vc.numel() != vx.rows() {
            return Err(shape_err("mul_col", vx.shape(), vc.shape()));
        }
        let cols = vx.cols();
        let c = vc.data();
        let mut data = vx.data().to_vec();
        for (i, row) in data.chunks_mut(cols.max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v *= c[i]);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.grad_any(&[x, col]);
        Ok(self.push(value, Op::MulCol { x, col }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), logistic)
    }

    /// Row-wise softmax with max subtraction. Entries equal to `-inf`
    /// receive zero probability; every row needs one finite entry.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.is_matrix() || vx.cols() == 0 {
            return Err(shape_err("softmax_rows", vx.shape(), &[]));
        }
        let cols = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(TensorError::NonFinite("softmax_rows"));
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Per-row normalisation followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let cols = vx.cols();
        if !vx.is_matrix() || vg.numel() != cols || vb.numel() != cols || cols == 0 {
            return Err(shape_err("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.grad_any(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Column-wise concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Parameter {
            op: "concat_cols",
            msg: "no parts".into(),
        })?;
        let rows = self.value(*first).rows();
        for p in parts {
            let v = self.value(*p);
            if !v.is_matrix() || v.rows() != rows {
                return Err(shape_err("concat_cols", self.shape(*first), v.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.grad_any(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if !vx.is_matrix() || start + len > vx.cols() {
            return Err(shape_err("slice_cols", vx.shape(), &[start, len]));
        }
        let data = (0..vx.rows())
            .flat_map(|r| vx.row(r)[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![vx.rows(), len], data)?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if !vx.is_matrix() || start + len > vx.rows() {
            return Err(shape_err("slice_rows", vx.shape(), &[start, len]));
        }
        let c = vx.cols();
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.is_matrix() {
            return Err(shape_err("transpose", vx.shape(), &[]));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// Sum of all entries as a 1-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.grad_any(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row, giving an `rows × 1` column.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.is_matrix() {
            return Err(shape_err("row_sum", vx.shape(), &[]));
        }
        let data = (0..vx.rows()).map(|r| vx.row(r).iter().sum()).collect();
        let value = Tensor::new(vec![vx.rows(), 1], data)?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(value, Op::RowSum(x), rg))
    }

    /// Scales each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.is_matrix() {
            return Err(shape_err("row_normalize", vx.shape(), &[]));
        }
        let cols = vx.cols();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(value, Op::RowNormalize { x, norms }, rg))
    }

    /// `x / (1 + max|x|)` when `max|x| > 1`, identity otherwise.
    pub fn max_abs_rescale(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (argmax, peak) = vx
            .data()
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |(k, m), (i, v)| {
                if v.abs() > m {
                    (i, v.abs())
                } else {
                    (k, m)
                }
            });
        let factor = if peak > 1.0 { 1.0 / (1.0 + peak) } else { 1.0 };
        let data = vx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.grad_any(&[x]);
        self.push(value, Op::MaxAbsRescale { x, argmax, peak }, rg)
    }
}

pub(crate) fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn acc<'a>(tape: &Tape, adjoints: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &tape.nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(adjoints[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

/// Pushes the adjoint of node `idx` onto its inputs.
pub(crate) fn propagate(tape: &Tape, idx: usize, g: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
    let out = &tape.nodes[idx].value;
    match &tape.nodes[idx].op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (tape.value(*a), tape.value(*b));
            let (av, bv) = (View::of(va.shape(), *ta), View::of(vb.shape(), *tb));
            let gv = View::of(out.shape(), false);
            if let Some(da) = acc(tape, adjoints, *a) {
                gemm(g, gv, vb.data(), bv.t(), da, av, 1.0);
            }
            if let Some(db) = acc(tape, adjoints, *b) {
                gemm(va.data(), av.t(), g, gv, db, bv, 1.0);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = acc(tape, adjoints, v) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = acc(tape, adjoints, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(tape, adjoints, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (tape.value(*a).data(), tape.value(*b).data());
            if let Some(d) = acc(tape, adjoints, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * vb[i];
                }
            }
            if let Some(d) = acc(tape, adjoints, *b) {
                for i in 0..d.len() {
                    d[i] += g[i] * va[i];
                }
            }
        }
        Op::AddRow { x, bias } => {
            let cols = out.cols().max(1);
            if let Some(d) = acc(tape, adjoints, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(tape, adjoints, *bias) {
                for row in g.chunks(cols) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::MulCol { x, col } => {
            let cols = out.cols().max(1);
            let (vx, vc) = (tape.value(*x).data(), tape.value(*col).data());
            if let Some(d) = acc(tape, adjoints, *x) {
                for (i, (drow, grow)) in d.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g * vc[i]);
                }
            }
            if let Some(d) = acc(tape, adjoints, *col) {
                for (i, (xrow, grow)) in vx.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    d[i] += xrow.iter().zip(grow).map(|(x, g)| x * g).sum::<f64>();
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(d) = acc(tape, adjoints, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f);
            }
        }
        Op::AddScalar(x) => {
            if let Some(d) = acc(tape, adjoints, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::Relu(x) => {
            let vx = tape.value(*x).data();
            if let Some(d) = acc(tape, adjoints, *x) {
                for i in 0..d.len() {
                    if vx[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            if let Some(d) = acc(tape, adjoints, *x) {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let cols = out.cols();
            let y = out.data();
            if let Some(d) = acc(tape, adjoints, *x) {
                for r in 0..out.rows() {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(y, g)| y * g).sum();
                    for i in s {
                        d[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let cols = out.cols();
            let gn = tape.value(*gain).data();
            if let Some(d) = acc(tape, adjoints, *x) {
                let mut dh = vec![0.0; cols];
                for r in 0..out.rows() {
                    let base = r * cols;
                    for c in 0..cols {
                        dh[c] = g[base + c] * gn[c];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                    let mean_dhx = dh
                        .iter()
                        .zip(&xhat[base..base + cols])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / cols as f64;
                    for c in 0..cols {
                        d[base + c] += inv_std[r] * (dh[c] - mean_dh - xhat[base + c] * mean_dhx);
                    }
                }
            }
            if let Some(d) = acc(tape, adjoints, *gain) {
                for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for c in 0..cols {
                        d[c] += grow[c] * hrow[c];
                    }
                }
            }
            if let Some(d) = acc(tape, adjoints, *bias) {
                for grow in g.chunks(cols) {
                    d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let w = tape.value(*p).cols();
                if let Some(d) = acc(tape, adjoints, *p) {
                    for r in 0..out.rows() {
                        let src = &g[r * total + offset..r * total + offset + w];
                        d[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, g)| *d += g);
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let full = tape.value(*x).cols();
            let w = out.cols();
            if let Some(d) = acc(tape, adjoints, *x) {
                for r in 0..out.rows() {
                    d[r * full + start..r * full + start + w]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::SliceRows { x, start } => {
            let c = out.cols();
            if let Some(d) = acc(tape, adjoints, *x) {
                d[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, g)| *d += g);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.rows(), out.cols());
            if let Some(d) = acc(tape, adjoints, *x) {
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = acc(tape, adjoints, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::RowSum(x) => {
            let cols = tape.value(*x).cols().max(1);
            if let Some(d) = acc(tape, adjoints, *x) {
                for (r, row) in d.chunks_mut(cols).enumerate() {
                    row.iter_mut().for_each(|d| *d += g[r]);
                }
            }
        }
        Op::RowNormalize { x, norms } => {
            let cols = out.cols().max(1);
            let y = out.data();
            if let Some(d) = acc(tape, adjoints, *x) {
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(y, g)| y * g).sum();
                    for i in s {
                        d[i] += (g[i] - y[i] * dot) / n;
                    }
                }
            }
        }
        Op::MaxAbsRescale { x, argmax, peak } => {
            let vx = tape.value(*x).data();
            if let Some(d) = acc(tape, adjoints, *x) {
                if *peak > 1.0 {
                    let denom = 1.0 + peak;
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g / denom);
                    let gx: f64 = g.iter().zip(vx).map(|(g, x)| g * x).sum();
                    d[*argmax] -= vx[*argmax].signum() * gx / (denom * denom);
                } else {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
    }
}
