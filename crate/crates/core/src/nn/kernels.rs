//! Dense kernels behind the differentiable primitives.
//!
//! Convolutions avoid an explicit im2col buffer: after zero-padding every
//! batch item and laying the items end to end, the receptive window of output
//! row `r` is the contiguous slice `seq[r * cin .. (r + k) * cin]`, so the
//! whole batch is a single GEMM with overlapping rows of `A`. Rows whose
//! window straddles two batch items are computed and discarded.

use super::tensor::Real;

/// Zero-pads each of the `batch` sequences of `len` rows by `pad` rows on
/// both sides and concatenates them.
fn pad_sequences<T: Real>(x: &[T], batch: usize, len: usize, width: usize, pad: usize) -> Vec<T> {
    let plen = len + 2 * pad;
    let mut out = vec![T::zero(); batch * plen * width];
    for b in 0..batch {
        let src = &x[b * len * width..(b + 1) * len * width];
        let dst = (b * plen + pad) * width;
        out[dst..dst + len * width].copy_from_slice(src);
    }
    out
}

/// `out[r, o] = sum_p seq[r * cin + p] * mat[p, o]` for `p < win * cin`.
fn window_gemm<T: Real>(seq: &[T], cin: usize, win: usize, rows: usize, mat: &[T], cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cout];
    window_gemm_into(seq, cin, win, rows, mat, cout, T::zero(), &mut out);
    out
}

/// `out <- seq_windows * mat + beta * out`.
#[allow(clippy::too_many_arguments)]
fn window_gemm_into<T: Real>(seq: &[T], cin: usize, win: usize, rows: usize, mat: &[T], cout: usize, beta: T, out: &mut [T]) {
    let inner = win * cin;
    assert!(rows == 0 || (rows - 1) * cin + inner <= seq.len());
    assert_eq!(mat.len(), inner * cout);
    assert_eq!(out.len(), rows * cout);
    if rows == 0 {
        return;
    }
    // SAFETY: the bounds were checked above; A rows overlap but are only read.
    unsafe {
        T::gemm(
            rows,
            inner,
            cout,
            T::one(),
            seq.as_ptr(),
            cin as isize,
            1,
            mat.as_ptr(),
            cout as isize,
            1,
            beta,
            out.as_mut_ptr(),
            cout as isize,
            1,
        );
    }
}

/// Geometry of a same-length 1-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub len: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvShape {
    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn padded_len(&self) -> usize {
        self.len + 2 * self.pad()
    }

    /// Output rows computed over the concatenated padded sequences.
    fn rows(&self) -> usize {
        self.batch * self.padded_len() - (self.kernel - 1)
    }
}

/// `x: (B, K, Cin)`, `weight: (Cout, Cin, k)`, `bias: (Cout)` -> `(B, K, Cout)`.
pub(crate) fn conv1d_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], s: ConvShape) -> Vec<T> {
    let ConvShape { batch, len, cin, cout, kernel } = s;
    // (Cout, Cin, k) -> (k, Cin, Cout) so rows follow the window layout.
    let mut wt = vec![T::zero(); kernel * cin * cout];
    for o in 0..cout {
        for c in 0..cin {
            for j in 0..kernel {
                wt[(j * cin + c) * cout + o] = weight[(o * cin + c) * kernel + j];
            }
        }
    }
    let seq = pad_sequences(x, batch, len, cin, s.pad());
    let rows = s.rows();
    let mut y: Vec<T> = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    window_gemm_into(&seq, cin, kernel, rows, &wt, cout, T::one(), &mut y);
    compact_rows(&mut y, batch, len, s.padded_len(), cout);
    y
}

/// Drops the rows that straddle two batch items: row `b * plen + t` moves to
/// `b * len + t`. Destinations never pass their sources, so this is in place.
fn compact_rows<T: Real>(buf: &mut Vec<T>, batch: usize, len: usize, plen: usize, width: usize) {
    for b in 1..batch {
        buf.copy_within(b * plen * width..(b * plen + len) * width, b * len * width);
    }
    buf.truncate(batch * len * width);
}

/// Gradient of the convolution input.
pub(crate) fn conv1d_backward_input<T: Real>(gy: &[T], weight: &[T], s: ConvShape) -> Vec<T> {
    let ConvShape { batch, len, cin, cout, kernel } = s;
    // Correlation of the padded output gradient with the flipped kernel.
    let mut wflip = vec![T::zero(); kernel * cout * cin];
    for o in 0..cout {
        for c in 0..cin {
            for j in 0..kernel {
                wflip[((kernel - 1 - j) * cout + o) * cin + c] = weight[(o * cin + c) * kernel + j];
            }
        }
    }
    let seq = pad_sequences(gy, batch, len, cout, s.pad());
    let mut dx = window_gemm(&seq, cout, kernel, s.rows(), &wflip, cin);
    compact_rows(&mut dx, batch, len, s.padded_len(), cin);
    dx
}

/// Gradients of the convolution weight `(Cout, Cin, k)` and bias `(Cout)`.
pub(crate) fn conv1d_backward_params<T: Real>(x: &[T], gy: &[T], s: ConvShape) -> (Vec<T>, Vec<T>) {
    let ConvShape { batch, len, cin, cout, kernel } = s;
    let plen = s.padded_len();
    let rows = s.rows();
    let seq = pad_sequences(x, batch, len, cin, s.pad());
    let mut gfull = vec![T::zero(); rows * cout];
    for b in 0..batch {
        let dst = b * plen * cout;
        gfull[dst..dst + len * cout].copy_from_slice(&gy[b * len * cout..(b + 1) * len * cout]);
    }
    let inner = kernel * cin;
    let mut dwt = vec![T::zero(); inner * cout];
    // SAFETY: A^T[p, r] = seq[r * cin + p] stays within seq for r < rows, p < inner.
    unsafe {
        T::gemm(
            inner,
            rows,
            cout,
            T::one(),
            seq.as_ptr(),
            1,
            cin as isize,
            gfull.as_ptr(),
            cout as isize,
            1,
            T::zero(),
            dwt.as_mut_ptr(),
            cout as isize,
            1,
        );
    }
    let mut dw = vec![T::zero(); cout * cin * kernel];
    for o in 0..cout {
        for c in 0..cin {
            for j in 0..kernel {
                dw[(o * cin + c) * kernel + j] = dwt[(j * cin + c) * cout + o];
            }
        }
    }
    (dw, column_sums(gy, cout))
}

fn column_sums<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in x.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
    out
}

/// Position-wise affine map: `x: (rows, Cin)`, `weight: (Cout, Cin)`.
pub(crate) fn linear_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], rows: usize, cin: usize, cout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    // SAFETY: x is rows x cin, weight is cout x cin read transposed, y is rows x cout.
    unsafe {
        T::gemm(
            rows,
            cin,
            cout,
            T::one(),
            x.as_ptr(),
            cin as isize,
            1,
            weight.as_ptr(),
            1,
            cin as isize,
            T::one(),
            y.as_mut_ptr(),
            cout as isize,
            1,
        );
    }
    y
}

pub(crate) fn linear_backward_input<T: Real>(gy: &[T], weight: &[T], rows: usize, cin: usize, cout: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * cin];
    // SAFETY: gy is rows x cout, weight is cout x cin.
    unsafe {
        T::gemm(
            rows,
            cout,
            cin,
            T::one(),
            gy.as_ptr(),
            cout as isize,
            1,
            weight.as_ptr(),
            cin as isize,
            1,
            T::zero(),
            dx.as_mut_ptr(),
            cin as isize,
            1,
        );
    }
    dx
}

pub(crate) fn linear_backward_params<T: Real>(
    x: &[T],
    gy: &[T],
    rows: usize,
    cin: usize,
    cout: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); cout * cin];
    // SAFETY: gy^T is cout x rows, x is rows x cin.
    unsafe {
        T::gemm(
            cout,
            rows,
            cin,
            T::one(),
            gy.as_ptr(),
            1,
            cout as isize,
            x.as_ptr(),
            cin as isize,
            1,
            T::zero(),
            dw.as_mut_ptr(),
            cin as isize,
            1,
        );
    }
    (dw, column_sums(gy, cout))
}
