//! Raw numeric kernels over flat row-major buffers, shared by the forward
//! and backward rules of the graph.

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`.
///
/// When `a_t` is set, `a` is stored as `k×m` and used transposed (likewise `b_t`
/// for `b` stored as `n×k`). `c` is `m×n` row-major and is overwritten unless
/// `accumulate` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too short");
    assert!(b.len() >= k * n, "gemm: rhs buffer too short");
    assert!(c.len() >= m * n, "gemm: output buffer too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three buffers, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax over `cols`-wide rows with optional admissibility mask.
/// Returns the index of the first fully-masked row on failure.
pub(crate) fn softmax_rows(x: &[f64], cols: usize, mask: Option<&[bool]>, out: &mut [f64]) -> Result<(), usize> {
    if cols == 0 {
        return Ok(());
    }
    for (r, (xr, yr)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let mr = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let admit = |j: usize| mr.is_none_or(|m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if admit(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY && !(0..cols).any(admit) {
            return Err(r);
        }
        let mut sum = 0.0;
        for (j, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
            *y = if admit(j) { (v - max).exp() } else { 0.0 };
            sum += *y;
        }
        let inv = 1.0 / sum;
        for y in yr.iter_mut() {
            *y *= inv;
        }
    }
    Ok(())
}

/// `dx = y ⊙ (dy − ⟨dy, y⟩)` per row, accumulated into `dx`.
pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize, dx: &mut [f64]) {
    if cols == 0 {
        return;
    }
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((dxv, &yv), &dyv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *dxv += yv * (dyv - dot);
        }
    }
}

/// Sequence geometry of a `[batch, len, channels]` convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub len: usize,
    pub taps: usize,
    pub dilation: usize,
    pub left: usize,
}

impl ConvGeometry {
    /// For tap `j`, the output rows `t0..t1` reading input row `t + offset`.
    fn tap_range(&self, j: usize) -> (usize, usize, isize) {
        let offset = (j * self.dilation) as isize - self.left as isize;
        let n = self.len as isize;
        let t0 = (-offset).clamp(0, n);
        let t1 = (n - offset).clamp(0, n);
        (t0 as usize, t1.max(t0) as usize, offset)
    }
}

/// Dense 1-D convolution: `x[b,n,cin] * kernel[k,cin,cout] -> y[b,n,cout]`.
pub(crate) fn conv1d(g: ConvGeometry, cin: usize, cout: usize, x: &[f64], kernel: &[f64], y: &mut [f64]) {
    y.fill(0.0);
    for b in 0..g.batch {
        for j in 0..g.taps {
            let (t0, t1, off) = g.tap_range(j);
            if t1 <= t0 {
                continue;
            }
            let rows = t1 - t0;
            let src = (b * g.len) as isize + t0 as isize + off;
            let src = src as usize * cin;
            let dst = (b * g.len + t0) * cout;
            gemm(
                rows,
                cin,
                cout,
                &x[src..src + rows * cin],
                false,
                &kernel[j * cin * cout..(j + 1) * cin * cout],
                false,
                &mut y[dst..dst + rows * cout],
                true,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    g: ConvGeometry,
    cin: usize,
    cout: usize,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dkernel: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut dkernel = dkernel;
    for b in 0..g.batch {
        for j in 0..g.taps {
            let (t0, t1, off) = g.tap_range(j);
            if t1 <= t0 {
                continue;
            }
            let rows = t1 - t0;
            let src = ((b * g.len) as isize + t0 as isize + off) as usize * cin;
            let dst = (b * g.len + t0) * cout;
            let kj = &kernel[j * cin * cout..(j + 1) * cin * cout];
            let dyr = &dy[dst..dst + rows * cout];
            if let Some(dx) = dx.as_deref_mut() {
                gemm(
                    rows,
                    cout,
                    cin,
                    dyr,
                    false,
                    kj,
                    true,
                    &mut dx[src..src + rows * cin],
                    true,
                );
            }
            if let Some(dk) = dkernel.as_deref_mut() {
                gemm(
                    cin,
                    rows,
                    cout,
                    &x[src..src + rows * cin],
                    true,
                    dyr,
                    false,
                    &mut dk[j * cin * cout..(j + 1) * cin * cout],
                    true,
                );
            }
        }
    }
}

/// Per-channel 1-D convolution: `x[b,n,c] * kernel[k,c] -> y[b,n,c]`.
pub(crate) fn depthwise_conv1d(g: ConvGeometry, c: usize, x: &[f64], kernel: &[f64], y: &mut [f64]) {
    y.fill(0.0);
    for b in 0..g.batch {
        for j in 0..g.taps {
            let (t0, t1, off) = g.tap_range(j);
            let kj = &kernel[j * c..(j + 1) * c];
            for t in t0..t1 {
                let s = ((b * g.len + t) as isize + off) as usize * c;
                let d = (b * g.len + t) * c;
                for ((yv, &xv), &kv) in y[d..d + c].iter_mut().zip(&x[s..s + c]).zip(kj) {
                    *yv += xv * kv;
                }
            }
        }
    }
}

pub(crate) fn depthwise_conv1d_backward(
    g: ConvGeometry,
    c: usize,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dkernel: Option<&mut [f64]>,
) {
    for b in 0..g.batch {
        for j in 0..g.taps {
            let (t0, t1, off) = g.tap_range(j);
            let kj = &kernel[j * c..(j + 1) * c];
            for t in t0..t1 {
                let s = ((b * g.len + t) as isize + off) as usize * c;
                let d = (b * g.len + t) * c;
                let dyr = &dy[d..d + c];
                if let Some(dx) = dx.as_deref_mut() {
                    for ((dxv, &dyv), &kv) in dx[s..s + c].iter_mut().zip(dyr).zip(kj) {
                        *dxv += dyv * kv;
                    }
                }
                if let Some(dk) = dkernel.as_deref_mut() {
                    for ((dkv, &dyv), &xv) in dk[j * c..(j + 1) * c].iter_mut().zip(dyr).zip(&x[s..s + c]) {
                        *dkv += dyv * xv;
                    }
                }
            }
        }
    }
}
