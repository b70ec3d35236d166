//! im2col convolution kernels backing [`Tape::conv2d`](crate::Tape::conv2d).

use crate::float::{matmul_into, matmul_nt_into, matmul_tn_into};
use crate::{Float, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize) -> Result<Self, TensorError> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return Err(TensorError::Shape { op: "conv2d", lhs: x.to_vec(), rhs: k.to_vec() });
        }
        if k[2] != k[3] || k[2] % 2 == 0 {
            return Err(TensorError::Contract("conv2d kernel must be square with odd size"));
        }
        if stride == 0 || stride > 2 {
            return Err(TensorError::Contract("conv2d stride must be 1 or 2"));
        }
        let ksize = k[2];
        let pad = ksize / 2;
        let out = |n: usize| (n + 2 * pad - ksize) / stride + 1;
        Ok(Self {
            batch: x[0],
            in_channels: x[1],
            out_channels: k[0],
            height: x[2],
            width: x[3],
            ksize,
            stride,
            pad,
            out_height: out(x[2]),
            out_width: out(x[3]),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }

    pub fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.ksize * self.ksize
    }

    /// Pointwise stride-1 convolutions read the image directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.ksize == 1 && self.stride == 1
    }
}

/// Upper bound on column-buffer elements per GEMM; samples are grouped into
/// chunks so one wide multiply covers as many of them as fit.
const COLUMN_BUDGET: usize = 1 << 16;

impl ConvGeometry {
    fn chunk_len(&self) -> usize {
        (COLUMN_BUDGET / (self.col_rows() * self.out_plane()).max(1)).clamp(1, self.batch.max(1))
    }
}

impl ConvGeometry {
    /// Input index for output coordinate `o` and kernel offset `kk`, if inside the image.
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Output columns `lo..hi` whose input column lies inside the image for kernel column `kx`.
    fn valid_columns(&self, kx: usize) -> (usize, usize) {
        let lo = (0..self.out_width).find(|&o| self.source(o, kx, self.width).is_some()).unwrap_or(self.out_width);
        let hi = (lo..self.out_width).rev().find(|&o| self.source(o, kx, self.width).is_some()).map_or(lo, |o| o + 1);
        (lo, hi)
    }
}

/// Writes the column matrix of one image into `cols`, whose rows have
/// leading dimension `ld`, starting at column `offset`.
fn im2col<T: Float>(g: &ConvGeometry, img: &[T], cols: &mut [T], ld: usize, offset: usize) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let src = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let (lo, hi) = g.valid_columns(kx);
                let dst = &mut cols[row * ld + offset..row * ld + offset + plane];
                for (oy, line) in dst.chunks_mut(g.out_width).enumerate() {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src_row = &src[iy * g.width..(iy + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                        } else {
                            for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src_row[first + j * g.stride];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Float>(g: &ConvGeometry, cols: &[T], ld: usize, offset: usize, img: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let dst = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let (lo, hi) = g.valid_columns(kx);
                let src = &cols[row * ld + offset..row * ld + offset + plane];
                for (oy, line) in src.chunks(g.out_width).enumerate() {
                    let Some(iy) = g.source(oy, ky, g.height) else { continue };
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.pad;
                    let dst_row = &mut dst[iy * g.width..(iy + 1) * g.width];
                    for (j, v) in line[lo..hi].iter().enumerate() {
                        let d = &mut dst_row[first + j * g.stride];
                        *d = *d + *v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fills the column matrix for samples `start..start + n`.
fn gather_columns<T: Float>(g: &ConvGeometry, x: &[T], start: usize, n: usize, cols: &mut [T]) {
    let (plane, wide) = (g.out_plane(), n * g.out_plane());
    for s in 0..n {
        let img = &x[(start + s) * g.in_image()..(start + s + 1) * g.in_image()];
        if g.is_pointwise() {
            for (c, src) in img.chunks(plane).enumerate() {
                cols[c * wide + s * plane..c * wide + (s + 1) * plane].copy_from_slice(src);
            }
        } else {
            im2col(g, img, cols, wide, s * plane);
        }
    }
}

/// Channel-major buffer holding a chunk of images for stride-1 convolution.
///
/// Every image row is followed by `pad` zero columns and every image by
/// `pad` zero rows, with `pad` zero rows (plus `pad` zeros) in front. Moving
/// by `dy·row + dx` from any pixel then lands either on the neighbouring
/// pixel or on a zero, so each kernel tap is one strided GEMM over the chunk.
struct PaddedLayout {
    row: usize,
    image: usize,
    base: usize,
    /// Output positions covered, from the first pixel of the chunk to its last.
    span: usize,
    len: usize,
}

impl PaddedLayout {
    fn new(g: &ConvGeometry, n: usize) -> Self {
        let row = g.width + g.pad;
        let image = (g.height + g.pad) * row;
        let base = g.pad * row + g.pad;
        let span = (n - 1) * image + (g.height - 1) * row + g.width;
        Self { row, image, base, span, len: 2 * base + span }
    }

    /// Buffer offset of kernel tap `(ky, kx)` relative to the output position.
    fn tap(&self, g: &ConvGeometry, ky: usize, kx: usize) -> usize {
        self.base + ky * self.row + kx - g.pad * self.row - g.pad
    }

    fn scatter<T: Float>(&self, g: &ConvGeometry, images: &[T], channels: usize, start: usize, n: usize, buf: &mut [T], shift: usize) {
        let (hw, w) = (g.height * g.width, g.width);
        for s in 0..n {
            let img = &images[(start + s) * channels * hw..(start + s + 1) * channels * hw];
            for (c, plane) in img.chunks(hw).enumerate() {
                for (y, line) in plane.chunks(w).enumerate() {
                    let at = c * self.len + shift + s * self.image + y * self.row;
                    buf[at..at + w].copy_from_slice(line);
                }
            }
        }
    }

    fn gather<T: Float>(&self, g: &ConvGeometry, buf: &[T], channels: usize, start: usize, n: usize, images: &mut [T], shift: usize, accumulate: bool) {
        let (hw, w) = (g.height * g.width, g.width);
        for s in 0..n {
            let img = &mut images[(start + s) * channels * hw..(start + s + 1) * channels * hw];
            for (c, plane) in img.chunks_mut(hw).enumerate() {
                for (y, line) in plane.chunks_mut(w).enumerate() {
                    let at = c * self.len + shift + s * self.image + y * self.row;
                    let src = &buf[at..at + w];
                    if accumulate {
                        line.iter_mut().zip(src).for_each(|(d, v)| *d = *d + *v);
                    } else {
                        line.copy_from_slice(src);
                    }
                }
            }
        }
    }
}

/// Elements of padded buffer per chunk; keeps the working set cache-sized.
const PADDED_BUDGET: usize = 1 << 19;

impl ConvGeometry {
    fn uses_shifted_gemm(&self) -> bool {
        self.stride == 1 && self.ksize > 1
    }

    fn padded_chunk_len(&self) -> usize {
        let per_image = (self.in_channels.max(self.out_channels)) * (self.height + self.pad) * (self.width + self.pad);
        (PADDED_BUDGET / per_image.max(1)).clamp(1, self.batch.max(1))
    }

    fn tap_index(&self, ky: usize, kx: usize) -> usize {
        ky * self.ksize + kx
    }
}

fn forward_shifted<T: Float>(g: &ConvGeometry, x: &[T], k: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_channels * g.out_plane()];
    let chunk = g.padded_chunk_len();
    let k2 = g.ksize * g.ksize;
    for start in (0..g.batch).step_by(chunk) {
        let n = chunk.min(g.batch - start);
        let lay = PaddedLayout::new(g, n);
        let mut xb = vec![T::zero(); g.in_channels * lay.len];
        lay.scatter(g, x, g.in_channels, start, n, &mut xb, lay.base);
        let mut ob = vec![T::zero(); g.out_channels * lay.span];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let off = lay.tap(g, ky, kx);
                let kk = g.tap_index(ky, kx);
                T::gemm(
                    g.out_channels,
                    g.in_channels,
                    lay.span,
                    T::one(),
                    &k[kk..],
                    ((g.in_channels * k2) as isize, k2 as isize),
                    &xb[off..],
                    (lay.len as isize, 1),
                    T::one(),
                    &mut ob,
                    (lay.span as isize, 1),
                );
            }
        }
        let out_lay = PaddedLayout { len: lay.span, ..lay };
        out_lay.gather(g, &ob, g.out_channels, start, n, &mut out, 0, false);
    }
    out
}

fn backward_shifted<T: Float>(g: &ConvGeometry, x: &[T], k: &[T], dy: &[T], mut dx: Option<&mut [T]>, mut dk: Option<&mut [T]>) {
    let chunk = g.padded_chunk_len();
    let k2 = g.ksize * g.ksize;
    for start in (0..g.batch).step_by(chunk) {
        let n = chunk.min(g.batch - start);
        let lay = PaddedLayout::new(g, n);
        let out_lay = PaddedLayout { len: lay.span, ..PaddedLayout::new(g, n) };
        let mut gb = vec![T::zero(); g.out_channels * lay.span];
        out_lay.scatter(g, dy, g.out_channels, start, n, &mut gb, 0);
        if let Some(dk) = dk.as_deref_mut() {
            let mut xb = vec![T::zero(); g.in_channels * lay.len];
            lay.scatter(g, x, g.in_channels, start, n, &mut xb, lay.base);
            for ky in 0..g.ksize {
                for kx in 0..g.ksize {
                    let off = lay.tap(g, ky, kx);
                    let kk = g.tap_index(ky, kx);
                    T::gemm(
                        g.out_channels,
                        lay.span,
                        g.in_channels,
                        T::one(),
                        &gb,
                        (lay.span as isize, 1),
                        &xb[off..],
                        (1, lay.len as isize),
                        T::one(),
                        &mut dk[kk..],
                        ((g.in_channels * k2) as isize, k2 as isize),
                    );
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut db = vec![T::zero(); g.in_channels * lay.len];
            for ky in 0..g.ksize {
                for kx in 0..g.ksize {
                    let off = lay.tap(g, ky, kx);
                    let kk = g.tap_index(ky, kx);
                    T::gemm(
                        g.in_channels,
                        g.out_channels,
                        lay.span,
                        T::one(),
                        &k[kk..],
                        (k2 as isize, (g.in_channels * k2) as isize),
                        &gb,
                        (lay.span as isize, 1),
                        T::one(),
                        &mut db[off..],
                        (lay.len as isize, 1),
                    );
                }
            }
            lay.gather(g, &db, g.in_channels, start, n, dx, lay.base, true);
        }
    }
}

pub(crate) fn forward<T: Float>(g: &ConvGeometry, x: &[T], k: &[T]) -> Vec<T> {
    if g.uses_shifted_gemm() {
        return forward_shifted(g, x, k);
    }
    let plane = g.out_plane();
    let out_image = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_image];
    let chunk = g.chunk_len();
    let mut cols = vec![T::zero(); g.col_rows() * plane * chunk];
    let mut wide_out = vec![T::zero(); out_image * chunk];
    for start in (0..g.batch).step_by(chunk) {
        let n = chunk.min(g.batch - start);
        let wide = n * plane;
        gather_columns(g, x, start, n, &mut cols);
        matmul_into(g.out_channels, g.col_rows(), wide, k, &cols[..g.col_rows() * wide], &mut wide_out[..g.out_channels * wide], false);
        for s in 0..n {
            let dst = &mut out[(start + s) * out_image..(start + s + 1) * out_image];
            for (o, line) in dst.chunks_mut(plane).enumerate() {
                line.copy_from_slice(&wide_out[o * wide + s * plane..o * wide + (s + 1) * plane]);
            }
        }
    }
    out
}

/// Writes input and kernel gradients into the provided (zeroed) buffers.
pub(crate) fn backward<T: Float>(
    g: &ConvGeometry,
    x: &[T],
    k: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    if g.uses_shifted_gemm() {
        return backward_shifted(g, x, k, dy, dx, dk);
    }
    let plane = g.out_plane();
    let out_image = g.out_channels * plane;
    let rows = g.col_rows();
    let chunk = g.chunk_len();
    let mut cols = vec![T::zero(); if dk.is_some() { rows * plane * chunk } else { 0 }];
    let mut dcols = vec![T::zero(); if dx.is_some() { rows * plane * chunk } else { 0 }];
    let mut gy = vec![T::zero(); out_image * chunk];
    for start in (0..g.batch).step_by(chunk) {
        let n = chunk.min(g.batch - start);
        let wide = n * plane;
        for s in 0..n {
            let src = &dy[(start + s) * out_image..(start + s + 1) * out_image];
            for (o, line) in src.chunks(plane).enumerate() {
                gy[o * wide + s * plane..o * wide + (s + 1) * plane].copy_from_slice(line);
            }
        }
        let gy = &gy[..g.out_channels * wide];
        if let Some(dk) = dk.as_deref_mut() {
            gather_columns(g, x, start, n, &mut cols);
            matmul_nt_into(g.out_channels, wide, rows, gy, &cols[..rows * wide], dk, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dcols = &mut dcols[..rows * wide];
            matmul_tn_into(rows, g.out_channels, wide, k, gy, dcols, false);
            for s in 0..n {
                let dimg = &mut dx[(start + s) * g.in_image()..(start + s + 1) * g.in_image()];
                if g.is_pointwise() {
                    for (c, line) in dimg.chunks_mut(plane).enumerate() {
                        for (d, v) in line.iter_mut().zip(&dcols[c * wide + s * plane..c * wide + (s + 1) * plane]) {
                            *d = *d + *v;
                        }
                    }
                } else {
                    col2im_add(g, dcols, wide, s * plane, dimg);
                }
            }
        }
    }
}
