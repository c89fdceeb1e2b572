//! Tape-based reverse-mode differentiation over a fixed set of matrix
//! operations: matmul, softmax, group normalization, Gaussian activation,
//! concatenation, affine maps, row gathers, bilinear grid lookup, and the
//! camera maps used by projective conditioning.
//!
//! All values are dense f64 matrices. A forward pass records nodes eagerly;
//! [`Tape::backward`] walks them in reverse and accumulates gradients for
//! every node, including leaves (parameters and inputs alike).

use ndarray::{Array1, Array2, Axis};

use crate::geometry::{sigmoid, CameraIntrinsics};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    /// (N,C) + broadcast (1,C)
    AddRow(Var, Var),
    /// (N,C) * broadcast (1,C)
    MulRow(Var, Var),
    /// x * scale + shift with constant per-column vectors
    AffineCols(Var, Array1<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// out[i] = x[idx[i]]; idx[i] = -1 yields a zero row
    GatherRows(Var, Vec<isize>),
    SoftmaxRows(Var),
    /// per-row group normalization over channel groups
    GroupNorm(Var, usize, f64),
    /// exp(-x^2 / (2 a^2))
    Gaussian(Var, f64),
    MeanRows(Var),
    SumAll(Var),
    /// bilinear interpolation of a (h*w, C) grid at (N,2) normalized coords
    Bilinear {
        grid: Var,
        coords: Var,
        h: usize,
        w: usize,
    },
    /// (N,3) camera-frame points -> (N,2) normalized (p_h, p_w)
    PinholeProject(Var, CameraIntrinsics),
    /// (N,3) frustum (u,v,l) -> (N,3) camera-frame (x,y,z)
    FrustumToEuclid(Var, CameraIntrinsics),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.g[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when `v` never
    /// influenced the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match &self.g[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register an input or parameter matrix.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    /// Broadcast-add a (1,C) row to every row of a (N,C) matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_owned();
        let v = self.value(x) + &r;
        self.push(v, Op::AddRow(x, row))
    }

    /// Broadcast-multiply every row of a (N,C) matrix by a (1,C) row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_owned();
        let v = self.value(x) * &r;
        self.push(v, Op::MulRow(x, row))
    }

    /// x * scale + shift with constant per-column factors (not differentiated
    /// through scale/shift; used for fixed frame transforms).
    pub fn affine_cols(&mut self, x: Var, scale: Array1<f64>, shift: Array1<f64>) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            for c in 0..row.len() {
                row[c] = row[c] * scale[c] + shift[c];
            }
        }
        self.push(v, Op::AffineCols(x, scale))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = Array2::zeros((n, total));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            let w = pv.ncols();
            v.slice_mut(ndarray::s![.., at..at + w]).assign(pv);
            at += w;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(ndarray::s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(x, start, end))
    }

    /// Gather rows by index; -1 produces a zero row.
    pub fn gather_rows(&mut self, x: Var, indices: Vec<isize>) -> Var {
        let src = self.value(x);
        let c = src.ncols();
        let mut v = Array2::zeros((indices.len(), c));
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= 0 {
                v.row_mut(i).assign(&src.row(idx as usize));
            }
        }
        self.push(v, Op::GatherRows(x, indices))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Per-row group normalization: channels are split into `groups`
    /// contiguous groups, each standardized with biased variance.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let src = self.value(x);
        let c = src.ncols();
        assert!(c.is_multiple_of(groups), "channels {c} not divisible by groups {groups}");
        let gs = c / groups;
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            for g in 0..groups {
                let sl = g * gs..(g + 1) * gs;
                let mean: f64 = row.slice(ndarray::s![sl.clone()]).sum() / gs as f64;
                let var: f64 = row
                    .slice(ndarray::s![sl.clone()])
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / gs as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for e in row.slice_mut(ndarray::s![sl]).iter_mut() {
                    *e = (*e - mean) * inv;
                }
            }
        }
        self.push(v, Op::GroupNorm(x, groups, eps))
    }

    /// Gaussian activation exp(-x^2 / (2 a^2)).
    pub fn gaussian(&mut self, x: Var, a: f64) -> Var {
        let v = self.value(x).mapv(|t| (-t * t / (2.0 * a * a)).exp());
        self.push(v, Op::Gaussian(x, a))
    }

    /// Column means: (N,C) -> (1,C).
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = src.nrows() as f64;
        let v = (src.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    /// Sum of all entries: -> (1,1).
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(ndarray::arr2(&[[s]]), Op::SumAll(x))
    }

    /// Mean of all entries: -> (1,1).
    pub fn mean_all(&mut self, x: Var) -> Var {
        let (n, c) = self.shape(x);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / (n * c) as f64)
    }

    /// Bilinear lookup of a (h*w, C) grid at (N,2) normalized coordinates
    /// (p_h, p_w), pixel centers at (i+0.5)/side. Coordinates whose four taps
    /// all fall outside the grid return zeros; partial overlap zero-pads.
    /// Differentiable in both the grid values and the coordinates.
    pub fn bilinear_lookup(&mut self, grid: Var, coords: Var, h: usize, w: usize) -> Var {
        let g = self.value(grid);
        let cd = self.value(coords);
        assert_eq!(g.nrows(), h * w, "grid rows must equal h*w");
        let c = g.ncols();
        let n = cd.nrows();
        let mut v = Array2::zeros((n, c));
        for i in 0..n {
            let taps = bilinear_taps(cd[[i, 0]], cd[[i, 1]], h, w);
            for (idx, wgt) in taps.iter().flatten() {
                for ch in 0..c {
                    v[[i, ch]] += wgt * g[[*idx, ch]];
                }
            }
        }
        self.push(v, Op::Bilinear { grid, coords, h, w })
    }

    /// Pinhole projection of (N,3) camera-frame points to (N,2) normalized
    /// image coordinates. Differentiable in the points.
    pub fn pinhole_project(&mut self, points: Var, cam: &CameraIntrinsics) -> Var {
        let src = self.value(points);
        let n = src.nrows();
        let mut v = Array2::zeros((n, 2));
        for i in 0..n {
            let (p_h, p_w, _) = cam.project_point(src[[i, 0]], src[[i, 1]], src[[i, 2]]);
            v[[i, 0]] = p_h;
            v[[i, 1]] = p_w;
        }
        self.push(v, Op::PinholeProject(points, *cam))
    }

    /// Map (N,3) frustum coordinates (u,v,l) back to camera-frame (x,y,z).
    /// Differentiable in the inputs.
    pub fn frustum_to_euclid(&mut self, uvl: Var, cam: &CameraIntrinsics) -> Var {
        let src = self.value(uvl);
        let n = src.nrows();
        let mut v = Array2::zeros((n, 3));
        for i in 0..n {
            let p_h = sigmoid(src[[i, 0]]);
            let p_w = sigmoid(src[[i, 1]]);
            let depth = src[[i, 2]].exp();
            let (x, y, z) = cam.unproject_point(p_h, p_w, depth);
            v[[i, 0]] = x;
            v[[i, 1]] = y;
            v[[i, 2]] = z;
        }
        self.push(v, Op::FrustumToEuclid(uvl, *cam))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the
    /// output value). Returns gradients for every node.
    pub fn backward(&self, output: Var, seed: Array2<f64>) -> Grads {
        let mut g: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        assert_eq!(seed.dim(), self.nodes[output.0].value.dim());
        g[output.0] = Some(seed);
        for i in (0..self.nodes.len()).rev() {
            let up = match g[i].take() {
                Some(u) => u,
                None => continue,
            };
            self.propagate(i, &up, &mut g);
            g[i] = Some(up);
        }
        Grads { g }
    }

    /// Reverse pass from a scalar (1,1) output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Grads {
        self.backward(output, ndarray::arr2(&[[1.0]]))
    }

    fn propagate(&self, i: usize, up: &Array2<f64>, g: &mut [Option<Array2<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = up.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(up);
                acc(g, *a, da);
                acc(g, *b, db);
            }
            Op::Transpose(a) => acc(g, *a, up.t().to_owned()),
            Op::Add(a, b) => {
                acc(g, *a, up.clone());
                acc(g, *b, up.clone());
            }
            Op::Sub(a, b) => {
                acc(g, *a, up.clone());
                acc(g, *b, -up);
            }
            Op::Mul(a, b) => {
                acc(g, *a, up * self.value(*b));
                acc(g, *b, up * self.value(*a));
            }
            Op::Scale(a, s) => acc(g, *a, up * *s),
            Op::AddConst(a) => acc(g, *a, up.clone()),
            Op::AddRow(x, row) => {
                acc(g, *x, up.clone());
                acc(g, *row, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row).row(0).to_owned();
                acc(g, *x, up * &r);
                let dr = (up * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(g, *row, dr);
            }
            Op::AffineCols(x, scale) => {
                acc(g, *x, up * scale);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    acc(g, *p, up.slice(ndarray::s![.., at..at + w]).to_owned());
                    at += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (n, c) = self.shape(*x);
                let mut dx = Array2::zeros((n, c));
                dx.slice_mut(ndarray::s![.., *start..*end]).assign(up);
                acc(g, *x, dx);
            }
            Op::GatherRows(x, indices) => {
                let (n, c) = self.shape(*x);
                let mut dx = Array2::zeros((n, c));
                for (i, &idx) in indices.iter().enumerate() {
                    if idx >= 0 {
                        let mut row = dx.row_mut(idx as usize);
                        row += &up.row(i);
                    }
                }
                acc(g, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let mut dx = up * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    for (d, yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= dot * yv;
                    }
                }
                acc(g, *x, dx);
            }
            Op::GroupNorm(x, groups, eps) => {
                let src = self.value(*x);
                let y = &self.nodes[i].value;
                let c = src.ncols();
                let gs = c / groups;
                let mut dx = Array2::zeros(src.dim());
                for r in 0..src.nrows() {
                    for grp in 0..*groups {
                        let sl = grp * gs..(grp + 1) * gs;
                        let mean: f64 =
                            src.slice(ndarray::s![r, sl.clone()]).sum() / gs as f64;
                        let var: f64 = src
                            .slice(ndarray::s![r, sl.clone()])
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>()
                            / gs as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let upg = up.slice(ndarray::s![r, sl.clone()]);
                        let yg = y.slice(ndarray::s![r, sl.clone()]);
                        let mean_up: f64 = upg.sum() / gs as f64;
                        let mean_upy: f64 =
                            upg.iter().zip(yg.iter()).map(|(u, v)| u * v).sum::<f64>()
                                / gs as f64;
                        for (k, off) in sl.enumerate() {
                            dx[[r, off]] = inv * (upg[k] - mean_up - yg[k] * mean_upy);
                        }
                    }
                }
                acc(g, *x, dx);
            }
            Op::Gaussian(x, a) => {
                let y = &self.nodes[i].value;
                let src = self.value(*x);
                let dx = up * y * src * (-1.0 / (a * a));
                acc(g, *x, dx);
            }
            Op::MeanRows(x) => {
                let (n, c) = self.shape(*x);
                let mut dx = Array2::zeros((n, c));
                let scaled = up.row(0).mapv(|v| v / n as f64);
                for mut row in dx.rows_mut() {
                    row.assign(&scaled);
                }
                acc(g, *x, dx);
            }
            Op::SumAll(x) => {
                let (n, c) = self.shape(*x);
                acc(g, *x, Array2::from_elem((n, c), up[[0, 0]]));
            }
            Op::Bilinear { grid, coords, h, w } => {
                let gv = self.value(*grid);
                let cv = self.value(*coords);
                let c = gv.ncols();
                let n = cv.nrows();
                let mut dgrid = Array2::zeros(gv.dim());
                let mut dcoords = Array2::zeros(cv.dim());
                for i2 in 0..n {
                    let (p_h, p_w) = (cv[[i2, 0]], cv[[i2, 1]]);
                    let taps = bilinear_taps(p_h, p_w, *h, *w);
                    for (tap, wgt) in taps.iter().flatten() {
                        for ch in 0..c {
                            dgrid[[*tap, ch]] += wgt * up[[i2, ch]];
                        }
                    }
                    let (dr_taps, dc_taps) = bilinear_coord_grads(p_h, p_w, *h, *w);
                    let mut dval_dr = 0.0;
                    let mut dval_dc = 0.0;
                    for ch in 0..c {
                        let mut dr = 0.0;
                        let mut dc = 0.0;
                        for (tap, wgt) in dr_taps.iter().flatten() {
                            dr += wgt * gv[[*tap, ch]];
                        }
                        for (tap, wgt) in dc_taps.iter().flatten() {
                            dc += wgt * gv[[*tap, ch]];
                        }
                        dval_dr += up[[i2, ch]] * dr;
                        dval_dc += up[[i2, ch]] * dc;
                    }
                    // chain through r = p_h * h - 0.5 and c = p_w * w - 0.5
                    dcoords[[i2, 0]] = dval_dr * *h as f64;
                    dcoords[[i2, 1]] = dval_dc * *w as f64;
                }
                acc(g, *grid, dgrid);
                acc(g, *coords, dcoords);
            }
            Op::PinholeProject(points, cam) => {
                let src = self.value(*points);
                let n = src.nrows();
                let mut dp = Array2::zeros((n, 3));
                let (hh, ww) = (cam.height as f64, cam.width as f64);
                for i2 in 0..n {
                    let (x, y, z) = (src[[i2, 0]], src[[i2, 1]], src[[i2, 2]]);
                    let (dh, dw) = (up[[i2, 0]], up[[i2, 1]]);
                    // p_h = (fy*y/z + cy)/H ; p_w = (fx*x/z + cx)/W
                    dp[[i2, 0]] = dw * cam.fx / (ww * z);
                    dp[[i2, 1]] = dh * cam.fy / (hh * z);
                    dp[[i2, 2]] =
                        -dh * cam.fy * y / (hh * z * z) - dw * cam.fx * x / (ww * z * z);
                }
                acc(g, *points, dp);
            }
            Op::FrustumToEuclid(uvl, cam) => {
                let src = self.value(*uvl);
                let out = &self.nodes[i].value;
                let n = src.nrows();
                let mut d = Array2::zeros((n, 3));
                let (hh, ww) = (cam.height as f64, cam.width as f64);
                for i2 in 0..n {
                    let (u, v, _l) = (src[[i2, 0]], src[[i2, 1]], src[[i2, 2]]);
                    let (x, y, z) = (out[[i2, 0]], out[[i2, 1]], out[[i2, 2]]);
                    let (dx, dy, dz) = (up[[i2, 0]], up[[i2, 1]], up[[i2, 2]]);
                    let sh = sigmoid(u);
                    let sw = sigmoid(v);
                    // x = (sigmoid(v)*W - cx) * z / fx ; y = (sigmoid(u)*H - cy) * z / fy ; z = e^l
                    d[[i2, 0]] = dy * hh * sh * (1.0 - sh) * z / cam.fy;
                    d[[i2, 1]] = dx * ww * sw * (1.0 - sw) * z / cam.fx;
                    d[[i2, 2]] = dx * x + dy * y + dz * z;
                }
                acc(g, *uvl, d);
            }
        }
    }
}

fn acc(g: &mut [Option<Array2<f64>>], v: Var, contribution: Array2<f64>) {
    match &mut g[v.0] {
        Some(existing) => *existing += &contribution,
        slot => *slot = Some(contribution),
    }
}

type Tap = Option<(usize, f64)>;

/// The four (index, weight) taps of a bilinear lookup, with out-of-grid taps
/// dropped (zero padding).
fn bilinear_taps(p_h: f64, p_w: f64, h: usize, w: usize) -> [Tap; 4] {
    let r = p_h * h as f64 - 0.5;
    let c = p_w * w as f64 - 0.5;
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let mut taps = [None; 4];
    let weights = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1.0, (1.0 - fr) * fc),
        (r0 + 1.0, c0, fr * (1.0 - fc)),
        (r0 + 1.0, c0 + 1.0, fr * fc),
    ];
    for (k, (rr, cc, wt)) in weights.into_iter().enumerate() {
        if rr >= 0.0 && rr < h as f64 && cc >= 0.0 && cc < w as f64 {
            taps[k] = Some((rr as usize * w + cc as usize, wt));
        }
    }
    taps
}

/// Derivatives of the four tap weights with respect to the fractional row
/// and column positions.
fn bilinear_coord_grads(p_h: f64, p_w: f64, h: usize, w: usize) -> ([Tap; 4], [Tap; 4]) {
    let r = p_h * h as f64 - 0.5;
    let c = p_w * w as f64 - 0.5;
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let dr_w = [
        (r0, c0, -(1.0 - fc)),
        (r0, c0 + 1.0, -fc),
        (r0 + 1.0, c0, 1.0 - fc),
        (r0 + 1.0, c0 + 1.0, fc),
    ];
    let dc_w = [
        (r0, c0, -(1.0 - fr)),
        (r0, c0 + 1.0, 1.0 - fr),
        (r0 + 1.0, c0, -fr),
        (r0 + 1.0, c0 + 1.0, fr),
    ];
    let mut dr_taps = [None; 4];
    let mut dc_taps = [None; 4];
    for k in 0..4 {
        let (rr, cc, wt) = dr_w[k];
        if rr >= 0.0 && rr < h as f64 && cc >= 0.0 && cc < w as f64 {
            dr_taps[k] = Some((rr as usize * w + cc as usize, wt));
        }
        let (rr, cc, wt) = dc_w[k];
        if rr >= 0.0 && rr < h as f64 && cc >= 0.0 && cc < w as f64 {
            dc_taps[k] = Some((rr as usize * w + cc as usize, wt));
        }
    }
    (dr_taps, dc_taps)
}
