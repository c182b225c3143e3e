//! Convolution as a matrix contraction.
//!
//! A kernel `W ∈ ℝ^{F×C×J×K}` is stored as the `F × CJK` matrix `W_resh` (dense or
//! factored). The input batch is unfolded into patch columns, `CJK × (N·L)` with column
//! `n·L + l` holding the patch that feeds output location `l` of sample `n`. The layer
//! output is then `U (S (Vᵀ Z_unfolded)) + b`, so the kernel is never reconstructed.
//!
//! Orientation is cross-correlation (no kernel flip) and padding is zero padding.

use serde::{Deserialize, Serialize};

use crate::dlrt::{phase_gradient, FactorPhase};
use crate::netcore::{dense_gradient, Activation, Affine, LayerSpec, NetworkSpec, Weight};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub channels: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvShape {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.channels, self.filters, self.kernel_h, self.kernel_w, self.stride, self.in_h, self.in_w];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("zero dimension in {self:?}")));
        }
        for (extent, k) in [(self.in_h, self.kernel_h), (self.in_w, self.kernel_w)] {
            let padded = extent + 2 * self.padding;
            if padded < k || !(padded - k).is_multiple_of(self.stride) {
                return Err(Error::invalid(format!(
                    "kernel {k} with stride {} and padding {} does not tile extent {extent}",
                    self.stride, self.padding
                )));
            }
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Output locations per sample, `L = U'·V'`.
    pub fn locations(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// `C·J·K`, the width of the reshaped kernel.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn in_features(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    pub fn out_features(&self) -> usize {
        self.filters * self.locations()
    }
}

/// 2×2 max pooling with stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolShape {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl PoolShape {
    pub const WINDOW: usize = 2;

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.in_h == 0 || self.in_w == 0 || !self.in_h.is_multiple_of(2) || !self.in_w.is_multiple_of(2) {
            return Err(Error::invalid(format!("2x2 pooling does not divide {self:?}")));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        self.in_h / Self::WINDOW
    }

    pub fn out_w(&self) -> usize {
        self.in_w / Self::WINDOW
    }

    pub fn in_features(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    pub fn out_features(&self) -> usize {
        self.channels * self.out_h() * self.out_w()
    }
}

/// One horizontal run of in-bounds taps: patch row `row` reads source features
/// `src, src + stride, …` into locations `loc, loc + 1, …`, `len` entries long.
struct TapRun {
    row: usize,
    loc: usize,
    src: usize,
    len: usize,
}

/// Visits every run of in-bounds taps, one per (patch row, output row) pair.
fn for_each_run(shape: &ConvShape, mut f: impl FnMut(TapRun)) {
    let (oh, ow) = (shape.out_h(), shape.out_w());
    let (h, w) = (shape.in_h as isize, shape.in_w as isize);
    let (pad, stride) = (shape.padding as isize, shape.stride as isize);
    for c in 0..shape.channels {
        for j in 0..shape.kernel_h {
            for k in 0..shape.kernel_w {
                let row = (c * shape.kernel_h + j) * shape.kernel_w + k;
                // Output columns v with 0 <= v·stride + k − pad < w.
                let first = ((pad - k as isize).max(0) as usize).div_ceil(stride as usize);
                let past = ((w - 1 + pad - k as isize).div_euclid(stride) + 1).clamp(0, ow as isize) as usize;
                if first >= past {
                    continue;
                }
                for u in 0..oh {
                    let ih = u as isize * stride + j as isize - pad;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    let iw = first as isize * stride + k as isize - pad;
                    let src = (c * shape.in_h + ih as usize) * shape.in_w + iw as usize;
                    f(TapRun { row, loc: u * ow + first, src, len: past - first });
                }
            }
        }
    }
}

/// im2col: `C·H·W × N` images to `CJK × (N·L)` patch columns.
pub fn unfold(z: &Matrix, shape: &ConvShape) -> Result<Matrix> {
    if z.rows() != shape.in_features() {
        return Err(Error::invalid(format!(
            "unfold expects {} features, got {}",
            shape.in_features(),
            z.rows()
        )));
    }
    let n = z.cols();
    let l = shape.locations();
    let stride = shape.stride;
    // Sample-major copy so each run reads contiguous memory.
    let zt = z.transpose();
    let mut out = Matrix::zeros(shape.patch_len(), n * l);
    let width = n * l;
    let data = out.as_mut_slice();
    for_each_run(shape, |run| {
        for s in 0..n {
            let image = zt.row(s);
            let dst = &mut data[run.row * width + s * l + run.loc..][..run.len];
            for (t, d) in dst.iter_mut().enumerate() {
                *d = image[run.src + t * stride];
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`unfold`]: scatters patch columns back onto `C·H·W × N` images, summing
/// overlapping taps.
pub fn fold(cols: &Matrix, shape: &ConvShape, batch: usize) -> Result<Matrix> {
    let l = shape.locations();
    if cols.shape() != (shape.patch_len(), batch * l) {
        return Err(Error::invalid(format!(
            "fold expects {}x{}, got {:?}",
            shape.patch_len(),
            batch * l,
            cols.shape()
        )));
    }
    let stride = shape.stride;
    let mut zt = Matrix::zeros(batch, shape.in_features());
    let width = batch * l;
    let data = cols.as_slice();
    for_each_run(shape, |run| {
        for s in 0..batch {
            let src = &data[run.row * width + s * l + run.loc..][..run.len];
            let image = zt.row_mut(s);
            for (t, v) in src.iter().enumerate() {
                image[run.src + t * stride] += v;
            }
        }
    });
    Ok(zt.transpose())
}

/// `F × (N·L)` affine output to the `F·L × N` feature layout.
pub fn locations_to_features(y: &Matrix, shape: &ConvShape, batch: usize) -> Matrix {
    let (f, l) = (shape.filters, shape.locations());
    let mut out = Matrix::zeros(f * l, batch);
    // Row `fi` of `y` is a `batch × l` block; its transpose fills rows `fi·l ..`.
    for fi in 0..f {
        transpose_into(y.row(fi), batch, l, &mut out.as_mut_slice()[fi * l * batch..][..l * batch]);
    }
    out
}

/// Inverse of [`locations_to_features`].
pub fn features_to_locations(g: &Matrix, shape: &ConvShape, batch: usize) -> Matrix {
    let (f, l) = (shape.filters, shape.locations());
    let mut out = Matrix::zeros(f, batch * l);
    for fi in 0..f {
        transpose_into(&g.as_slice()[fi * l * batch..][..l * batch], l, batch, out.row_mut(fi));
    }
    out
}

/// Writes the transpose of the row-major `rows × cols` block `src` into `dst`.
fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    const TILE: usize = 32;
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

/// 2×2/2 max pooling. Returns pooled maps and, per output entry (row-major over
/// `out_features × N`), the source feature; ties go to the first maximum in window order.
pub fn max_pool(z: &Matrix, pool: &PoolShape) -> Result<(Matrix, Vec<usize>)> {
    if z.rows() != pool.in_features() {
        return Err(Error::invalid(format!(
            "pool expects {} features, got {}",
            pool.in_features(),
            z.rows()
        )));
    }
    let n = z.cols();
    let (oh, ow) = (pool.out_h(), pool.out_w());
    let mut out = Matrix::zeros(pool.out_features(), n);
    let mut argmax = vec![0usize; pool.out_features() * n];
    for c in 0..pool.channels {
        for u in 0..oh {
            for v in 0..ow {
                let o = (c * oh + u) * ow + v;
                let taps = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .map(|(dj, dk)| (c * pool.in_h + 2 * u + dj) * pool.in_w + 2 * v + dk);
                for s in 0..n {
                    let mut best = taps[0];
                    for &t in &taps[1..] {
                        if z[(t, s)] > z[(best, s)] {
                            best = t;
                        }
                    }
                    out[(o, s)] = z[(best, s)];
                    argmax[o * n + s] = best;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool_backward(g: &Matrix, argmax: &[usize], pool: &PoolShape) -> Matrix {
    let n = g.cols();
    let mut out = Matrix::zeros(pool.in_features(), n);
    for o in 0..g.rows() {
        for s in 0..n {
            out[(argmax[o * n + s], s)] += g[(o, s)];
        }
    }
    out
}

/// What [`conv_forward`] keeps for [`conv_backward`].
#[derive(Debug, Clone)]
pub struct ConvRecord {
    pub unfolded: Matrix,
    pub pre_activation: Matrix,
    pub batch: usize,
}

/// Single conv layer forward: `N` images (`C·H·W × N`) to `F·U'·V' × N`.
pub fn conv_forward(z: &Matrix, shape: &ConvShape, affine: &Affine) -> Result<(Matrix, ConvRecord)> {
    shape.validate()?;
    if affine.weight.n_out() != shape.filters || affine.weight.n_in() != shape.patch_len() {
        return Err(Error::invalid("kernel does not match conv shape"));
    }
    let unfolded = unfold(z, shape)?;
    let y = affine.pre_activation(&unfolded);
    let pre = locations_to_features(&y, shape, z.cols());
    let mut out = pre.clone();
    if affine.activation == Activation::Relu {
        out.map_inplace(|v| v.max(0.0));
    }
    Ok((out, ConvRecord { unfolded, pre_activation: pre, batch: z.cols() }))
}

/// Gradients of one conv layer given the upstream gradient on its output.
#[derive(Debug, Clone)]
pub struct ConvGradients {
    /// ∂W_resh for dense kernels, or the requested factor gradient for low-rank kernels.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub input: Matrix,
}

/// Backward through one conv layer. `phase` selects which factor gradient a low-rank
/// kernel reports (ignored for dense kernels).
pub fn conv_backward(
    record: &ConvRecord,
    shape: &ConvShape,
    affine: &Affine,
    upstream: &Matrix,
    phase: FactorPhase,
) -> Result<ConvGradients> {
    if upstream.shape() != record.pre_activation.shape() {
        return Err(Error::invalid("upstream gradient does not match conv record"));
    }
    let mut g = upstream.clone();
    if affine.activation == Activation::Relu {
        for (x, &a) in g.as_mut_slice().iter_mut().zip(record.pre_activation.as_slice()) {
            if a <= 0.0 {
                *x = 0.0;
            }
        }
    }
    let delta = features_to_locations(&g, shape, record.batch);
    let weight = match &affine.weight {
        Weight::Dense(_) | Weight::Deploy { .. } => dense_gradient(&delta, &record.unfolded).weight,
        Weight::LowRank(f) => phase_gradient(f, &delta, &record.unfolded, phase),
    };
    let input = fold(&affine.weight.apply_transpose(&delta), shape, record.batch)?;
    Ok(ConvGradients { weight, bias: delta.row_sums(), input })
}

/// LeNet5 for 28×28 single-channel input: conv 20@5×5 → pool → conv 50@5×5 →
/// pool → dense 800→500 → dense 500→10. Convs and the first dense layer are low-rank
/// when `low_rank` is set; the head stays dense.
pub fn lenet5_preset(low_rank: bool) -> NetworkSpec {
    let conv1 = ConvShape { channels: 1, filters: 20, kernel_h: 5, kernel_w: 5, stride: 1, padding: 0, in_h: 28, in_w: 28 };
    let conv2 = ConvShape { channels: 20, filters: 50, kernel_h: 5, kernel_w: 5, stride: 1, padding: 0, in_h: 12, in_w: 12 };
    NetworkSpec {
        layers: vec![
            LayerSpec::Conv { shape: conv1, activation: Activation::Relu, low_rank, rank: None },
            LayerSpec::MaxPool(PoolShape { channels: 20, in_h: 24, in_w: 24 }),
            LayerSpec::Conv { shape: conv2, activation: Activation::Relu, low_rank, rank: None },
            LayerSpec::MaxPool(PoolShape { channels: 50, in_h: 8, in_w: 8 }),
            LayerSpec::Linear { n_in: 800, n_out: 500, activation: Activation::Relu, low_rank, rank: None },
            LayerSpec::linear(500, 10, Activation::Softmax),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlrt::LowRankFactors;
    use crate::linalg::svd_small;
    use crate::netcore::{forward, Network};
    use crate::rng::gaussian_matrix;

    /// Direct cross-correlation, one output at a time.
    fn direct_conv(z: &Matrix, w: &Matrix, bias: &[f64], shape: &ConvShape) -> Matrix {
        let (oh, ow) = (shape.out_h(), shape.out_w());
        let mut out = Matrix::zeros(shape.out_features(), z.cols());
        for n in 0..z.cols() {
            for f in 0..shape.filters {
                for u in 0..oh {
                    for v in 0..ow {
                        let mut acc = bias[f];
                        for c in 0..shape.channels {
                            for j in 0..shape.kernel_h {
                                for k in 0..shape.kernel_w {
                                    let ih = (u * shape.stride + j) as isize - shape.padding as isize;
                                    let iw = (v * shape.stride + k) as isize - shape.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= shape.in_h as isize || iw >= shape.in_w as isize {
                                        continue;
                                    }
                                    let wv = w[(f, (c * shape.kernel_h + j) * shape.kernel_w + k)];
                                    acc += wv * z[((c * shape.in_h + ih as usize) * shape.in_w + iw as usize, n)];
                                }
                            }
                        }
                        out[((f * oh + u) * ow + v, n)] = acc;
                    }
                }
            }
        }
        out
    }

    fn shape(c: usize, f: usize, k: usize, stride: usize, pad: usize, h: usize, w: usize) -> ConvShape {
        ConvShape { channels: c, filters: f, kernel_h: k, kernel_w: k, stride, padding: pad, in_h: h, in_w: w }
    }

    fn full_rank_affine(w: &Matrix, seed: u64) -> Affine {
        let (f, n) = w.shape();
        let r = f.min(n);
        let svd = svd_small(w);
        let factors = LowRankFactors::from_parts(svd.p, Matrix::from_diag(&svd.sigma), svd.q, 1.min(r), r).unwrap();
        Affine {
            weight: Weight::LowRank(factors),
            bias: gaussian_matrix(f, 1, seed).into_vec(),
            activation: Activation::Identity,
        }
    }

    #[test]
    fn one_by_one_kernel_is_a_reshape() {
        let s = shape(3, 2, 1, 1, 0, 2, 2);
        let z = gaussian_matrix(12, 2, 1);
        let cols = unfold(&z, &s).unwrap();
        assert_eq!(cols.shape(), (3, 8));
        for c in 0..3 {
            for n in 0..2 {
                for l in 0..4 {
                    assert_eq!(cols[(c, n * 4 + l)], z[(c * 4 + l, n)]);
                }
            }
        }
    }

    #[test]
    fn three_by_three_patches_by_hand() {
        let s = shape(1, 1, 3, 1, 0, 4, 4);
        let z = Matrix::from_fn(16, 1, |i, _| i as f64);
        let cols = unfold(&z, &s).unwrap();
        assert_eq!(cols.shape(), (9, 4));
        let expected = [
            [0.0, 1.0, 2.0, 4.0, 5.0, 6.0, 8.0, 9.0, 10.0],
            [1.0, 2.0, 3.0, 5.0, 6.0, 7.0, 9.0, 10.0, 11.0],
            [4.0, 5.0, 6.0, 8.0, 9.0, 10.0, 12.0, 13.0, 14.0],
            [5.0, 6.0, 7.0, 9.0, 10.0, 11.0, 13.0, 14.0, 15.0],
        ];
        for (l, patch) in expected.iter().enumerate() {
            assert_eq!(cols.column(l), patch.to_vec());
        }
    }

    #[test]
    fn padded_lenet_geometry() {
        let s = shape(1, 20, 5, 1, 2, 28, 28);
        assert_eq!(s.locations(), 28 * 28);
        let cols = unfold(&Matrix::zeros(784, 1), &s).unwrap();
        assert_eq!(cols.shape(), (25, 784));
        assert!(shape(1, 1, 3, 2, 0, 6, 6).validate().is_err());
    }

    #[test]
    fn unfold_fold_adjoint_pair() {
        for (seed, s) in [shape(2, 3, 3, 1, 1, 5, 6), shape(3, 2, 2, 2, 0, 6, 4), shape(1, 1, 5, 1, 2, 7, 7)].into_iter().enumerate() {
            let n = 3;
            let z = gaussian_matrix(s.in_features(), n, seed as u64);
            let g = gaussian_matrix(s.patch_len(), n * s.locations(), seed as u64 + 10);
            let lhs: f64 = unfold(&z, &s).unwrap().as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
            let rhs: f64 = z.as_slice().iter().zip(fold(&g, &s, n).unwrap().as_slice()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let s = shape(3, 3, 1, 1, 0, 4, 4);
        let z = gaussian_matrix(48, 2, 4);
        let mut affine = full_rank_affine(&Matrix::identity(3), 0);
        affine.bias = vec![0.0; 3];
        let (out, _) = conv_forward(&z, &s, &affine).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-14);
    }

    #[test]
    fn full_rank_factored_matches_direct() {
        let s = shape(2, 4, 3, 1, 1, 6, 5);
        let w = gaussian_matrix(4, 18, 7);
        let affine = full_rank_affine(&w, 8);
        let z = gaussian_matrix(s.in_features(), 3, 9);
        let (out, _) = conv_forward(&z, &s, &affine).unwrap();
        let direct = direct_conv(&z, &w, &affine.bias, &s);
        assert!(out.max_abs_diff(&direct) <= 1e-10 * direct.frobenius_norm());
    }

    #[test]
    fn rank_one_kernel_matches_outer_product_oracle() {
        let s = shape(2, 3, 3, 1, 0, 5, 5);
        let a = gaussian_matrix(3, 1, 1);
        let b = gaussian_matrix(18, 1, 2);
        let (qa, ra) = crate::linalg::qr_reduced(&a).unwrap();
        let (qb, rb) = crate::linalg::qr_reduced(&b).unwrap();
        let core = Matrix::from_rows(&[[ra[(0, 0)] * rb[(0, 0)]]]);
        let factors = LowRankFactors::from_parts(qa, core, qb, 1, 3).unwrap();
        let affine = Affine { weight: Weight::LowRank(factors), bias: vec![0.1, -0.2, 0.3], activation: Activation::Identity };
        let z = gaussian_matrix(50, 2, 3);
        let (out, _) = conv_forward(&z, &s, &affine).unwrap();
        let w = a.matmul_t(&b).unwrap();
        assert!(out.max_abs_diff(&direct_conv(&z, &w, &affine.bias, &s)) <= 1e-10);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = shape(2, 3, 3, 1, 0, 6, 6);
        let affine = full_rank_affine(&gaussian_matrix(3, 18, 1), 2);
        let z = gaussian_matrix(72, 2, 3);
        let (out, rec) = conv_forward(&z, &s, &affine).unwrap();
        for phase in [FactorPhase::K, FactorPhase::L, FactorPhase::S] {
            let g = conv_backward(&rec, &s, &affine, &Matrix::zeros(out.rows(), 2), phase).unwrap();
            assert!(g.weight.as_slice().iter().all(|&x| x == 0.0));
            assert!(g.bias.iter().all(|&x| x == 0.0));
            assert!(g.input.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn full_rank_gradient_equals_dense_on_unfolded_input() {
        let s = shape(2, 3, 3, 1, 1, 6, 6);
        let w = gaussian_matrix(3, 18, 5);
        let affine = full_rank_affine(&w, 6);
        let dense = Affine { weight: Weight::Dense(w), bias: affine.bias.clone(), activation: Activation::Identity };
        let z = gaussian_matrix(72, 2, 7);
        let up = gaussian_matrix(s.out_features(), 2, 8);
        let (_, rec) = conv_forward(&z, &s, &affine).unwrap();
        let (_, rec_d) = conv_forward(&z, &s, &dense).unwrap();
        let gd = conv_backward(&rec_d, &s, &dense, &up, FactorPhase::K).unwrap();
        // Dense-on-unfolded oracle: ∂W = Σ_n ∂out(n) · Z_unfolded(n)ᵀ.
        let delta = features_to_locations(&up, &s, 2);
        let oracle = delta.matmul_t(&rec.unfolded).unwrap();
        assert!(gd.weight.max_abs_diff(&oracle) <= 1e-10);
        let f = affine.weight.as_low_rank().unwrap();
        let gk = conv_backward(&rec, &s, &affine, &up, FactorPhase::K).unwrap();
        assert!(gk.weight.max_abs_diff(&oracle.matmul(&f.v).unwrap()) <= 1e-10);
        assert!(gk.input.max_abs_diff(&gd.input) <= 1e-10);
    }

    #[test]
    fn max_pool_routes_to_first_maximum() {
        let p = PoolShape { channels: 1, in_h: 2, in_w: 4 };
        let z = Matrix::column_vector(&[1.0, 3.0, 5.0, 5.0, 3.0, 2.0, 5.0, 0.0]);
        let (out, idx) = max_pool(&z, &p).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 5.0]);
        assert_eq!(idx, vec![1, 2]);
        let back = max_pool_backward(&Matrix::column_vector(&[1.0, 2.0]), &idx, &p);
        assert_eq!(back.as_slice(), &[0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lenet5_produces_ten_logits() {
        let net = Network::build(&lenet5_preset(true), 1).unwrap();
        let (logits, _) = forward(&net, &gaussian_matrix(784, 1, 2), false).unwrap();
        assert_eq!(logits.shape(), (10, 1));
    }
}
