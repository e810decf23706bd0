//! Dilated, strided N-D cross-correlation lowered to GEMM through im2col.
//!
//! Spatial ranks 1 to 3 are handled by one kernel that works on a canonical
//! `[n, c, d, h, w]` view; lower ranks are padded with unit leading axes.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, MatRef, Scalar};

/// Upper bound on im2col buffer elements per chunk.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
    /// No padding.
    Valid,
}

/// Geometry of one convolution layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub dilation: Vec<usize>,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Stride 1, dilation 1, same padding.
    pub fn new(kernel: &[usize], in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: kernel.to_vec(),
            stride: vec![1; kernel.len()],
            dilation: vec![1; kernel.len()],
            padding: Padding::Same,
            in_channels,
            out_channels,
        }
    }

    pub fn with_dilation(mut self, dilation: &[usize]) -> Self {
        self.dilation = dilation.to_vec();
        self
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn spatial_rank(&self) -> usize {
        self.kernel.len()
    }

    /// `[out_channels, in_channels, kernel...]`
    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.kernel.len();
        if !(1..=3).contains(&r) {
            return Err(TensorError::invalid("conv", format!("spatial rank {r} not in 1..=3")));
        }
        if self.stride.len() != r || self.dilation.len() != r {
            return Err(TensorError::invalid(
                "conv",
                "kernel, stride and dilation must have one entry per spatial axis",
            ));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(TensorError::invalid("conv", "kernel and stride extents must be positive"));
        }
        if self.dilation.contains(&0) {
            return Err(TensorError::invalid("conv", "dilation must be at least 1 on every axis"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(TensorError::invalid("conv", "channel counts must be positive"));
        }
        Ok(())
    }

    /// Output spatial extents for the given input spatial extents.
    ///
    /// Valid: `(in - (k - 1) * d - 1) / s + 1`; same: `ceil(in / s)`.
    pub fn output_extent(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        if input.len() != self.kernel.len() {
            return Err(TensorError::shape(
                "conv",
                format!("{} spatial axes given for a rank-{} kernel", input.len(), self.kernel.len()),
            ));
        }
        (0..input.len())
            .map(|a| {
                let span = (self.kernel[a] - 1) * self.dilation[a] + 1;
                match self.padding {
                    Padding::Same => Ok(input[a].div_ceil(self.stride[a])),
                    Padding::Valid if span > input[a] => Err(TensorError::shape(
                        "conv",
                        format!("dilated kernel span {span} exceeds input extent {} on axis {a}", input[a]),
                    )),
                    Padding::Valid => Ok((input[a] - span) / self.stride[a] + 1),
                }
            })
            .collect()
    }
}

/// Resolved, canonical-3D geometry of a convolution.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
    pub out_shape: Vec<usize>,
}

pub(crate) fn canonical3(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

impl ConvGeometry {
    pub fn new(spec: &ConvSpec, input_shape: &[usize], weight_shape: &[usize]) -> Result<Self> {
        spec.validate()?;
        let r = spec.spatial_rank();
        if input_shape.len() != r + 2 {
            return Err(TensorError::shape(
                "conv",
                format!("input rank {} but a rank-{r} kernel needs rank {}", input_shape.len(), r + 2),
            ));
        }
        if input_shape[1] != spec.in_channels {
            return Err(TensorError::shape(
                "conv",
                format!("input has {} channels, spec expects {}", input_shape[1], spec.in_channels),
            ));
        }
        if weight_shape != spec.weight_shape().as_slice() {
            return Err(TensorError::shape(
                "conv",
                format!("weight shape {weight_shape:?}, spec expects {:?}", spec.weight_shape()),
            ));
        }
        let spatial = &input_shape[2..];
        let out = spec.output_extent(spatial)?;
        let mut pad = vec![0; r];
        if spec.padding == Padding::Same {
            for a in 0..r {
                let span = (spec.kernel[a] - 1) * spec.dilation[a] + 1;
                let needed = ((out[a] - 1) * spec.stride[a] + span).saturating_sub(spatial[a]);
                pad[a] = needed / 2;
            }
        }
        let mut out_shape = vec![input_shape[0], spec.out_channels];
        out_shape.extend_from_slice(&out);
        Ok(Self {
            batch: input_shape[0],
            cin: spec.in_channels,
            cout: spec.out_channels,
            input: canonical3(spatial, 1),
            kernel: canonical3(&spec.kernel, 1),
            stride: canonical3(&spec.stride, 1),
            dilation: canonical3(&spec.dilation, 1),
            pad: canonical3(&pad, 0),
            output: canonical3(&out, 1),
            out_shape,
        })
    }

    fn kdim(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Output rows are `(n, od, oh)` triples of width `ow`.
    fn rows(&self) -> usize {
        self.batch * self.output[0] * self.output[1]
    }

    fn rows_per_chunk(&self) -> usize {
        (COLS_BUDGET / (self.kdim() * self.output[2]).max(1)).clamp(1, self.rows())
    }

    fn row_coords(&self, r: usize) -> (usize, usize, usize) {
        let oh = r % self.output[1];
        let rest = r / self.output[1];
        (rest / self.output[0], rest % self.output[0], oh)
    }

    /// Fills `cols` (`kdim x (rows * ow)`) for output rows `r0..r1`.
    fn im2col<T: Scalar>(&self, x: &[T], r0: usize, r1: usize, cols: &mut [T]) {
        let [_, ih_n, iw_n] = self.input;
        let [kd_n, kh_n, kw_n] = self.kernel;
        let ow_n = self.output[2];
        let width = (r1 - r0) * ow_n;
        let mut krow = 0;
        for ci in 0..self.cin {
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let dst_row = &mut cols[krow * width..(krow + 1) * width];
                        let w_off = (kw * self.dilation[2]) as isize - self.pad[2] as isize;
                        for r in r0..r1 {
                            let (n, od, oh) = self.row_coords(r);
                            let dst = &mut dst_row[(r - r0) * ow_n..(r - r0 + 1) * ow_n];
                            let id = (od * self.stride[0] + kd * self.dilation[0]) as isize - self.pad[0] as isize;
                            let ih = (oh * self.stride[1] + kh * self.dilation[1]) as isize - self.pad[1] as isize;
                            if id < 0 || id >= self.input[0] as isize || ih < 0 || ih >= ih_n as isize {
                                dst.fill(T::zero());
                                continue;
                            }
                            let base = (((n * self.cin + ci) * self.input[0] + id as usize) * ih_n + ih as usize) * iw_n;
                            let src = &x[base..base + iw_n];
                            if self.stride[2] == 1 {
                                let lo = (-w_off).clamp(0, ow_n as isize) as usize;
                                let hi = (iw_n as isize - w_off).clamp(lo as isize, ow_n as isize) as usize;
                                dst[..lo].fill(T::zero());
                                if hi > lo {
                                    let s0 = (lo as isize + w_off) as usize;
                                    dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                                }
                                dst[hi..].fill(T::zero());
                            } else {
                                for (ow, d) in dst.iter_mut().enumerate() {
                                    let iw = (ow * self.stride[2]) as isize + w_off;
                                    *d = if iw >= 0 && iw < iw_n as isize { src[iw as usize] } else { T::zero() };
                                }
                            }
                        }
                        krow += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto `dx` for output rows `r0..r1`.
    fn col2im<T: Scalar>(&self, cols: &[T], r0: usize, r1: usize, dx: &mut [T]) {
        let [_, ih_n, iw_n] = self.input;
        let [kd_n, kh_n, kw_n] = self.kernel;
        let ow_n = self.output[2];
        let width = (r1 - r0) * ow_n;
        let mut krow = 0;
        for ci in 0..self.cin {
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let src_row = &cols[krow * width..(krow + 1) * width];
                        let w_off = (kw * self.dilation[2]) as isize - self.pad[2] as isize;
                        for r in r0..r1 {
                            let (n, od, oh) = self.row_coords(r);
                            let id = (od * self.stride[0] + kd * self.dilation[0]) as isize - self.pad[0] as isize;
                            let ih = (oh * self.stride[1] + kh * self.dilation[1]) as isize - self.pad[1] as isize;
                            if id < 0 || id >= self.input[0] as isize || ih < 0 || ih >= ih_n as isize {
                                continue;
                            }
                            let src = &src_row[(r - r0) * ow_n..(r - r0 + 1) * ow_n];
                            let base = (((n * self.cin + ci) * self.input[0] + id as usize) * ih_n + ih as usize) * iw_n;
                            let dst = &mut dx[base..base + iw_n];
                            for (ow, &v) in src.iter().enumerate() {
                                let iw = (ow * self.stride[2]) as isize + w_off;
                                if iw >= 0 && iw < iw_n as isize {
                                    dst[iw as usize] = dst[iw as usize] + v;
                                }
                            }
                        }
                        krow += 1;
                    }
                }
            }
        }
    }

    fn out_index(&self, n: usize, co: usize, od: usize, oh: usize) -> usize {
        (((n * self.cout + co) * self.output[0] + od) * self.output[1] + oh) * self.output[2]
    }

    pub fn forward<T: Scalar>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
        debug_assert_eq!(x.len(), self.batch * self.cin * self.in_volume());
        let kdim = self.kdim();
        let ow_n = self.output[2];
        let chunk = self.rows_per_chunk();
        let mut out = vec![T::zero(); self.batch * self.cout * self.out_volume()];
        let mut cols = vec![T::zero(); kdim * chunk * ow_n];
        let mut tmp = vec![T::zero(); self.cout * chunk * ow_n];
        let mut r0 = 0;
        while r0 < self.rows() {
            let r1 = (r0 + chunk).min(self.rows());
            let width = (r1 - r0) * ow_n;
            self.im2col(x, r0, r1, &mut cols[..kdim * width]);
            gemm(
                MatRef::new(w, self.cout, kdim),
                MatRef::new(&cols[..kdim * width], kdim, width),
                T::zero(),
                &mut tmp[..self.cout * width],
            );
            for co in 0..self.cout {
                let b = bias.map_or(T::zero(), |b| b[co]);
                for r in r0..r1 {
                    let (n, od, oh) = self.row_coords(r);
                    let dst = self.out_index(n, co, od, oh);
                    let src = co * width + (r - r0) * ow_n;
                    for (o, &v) in out[dst..dst + ow_n].iter_mut().zip(&tmp[src..src + ow_n]) {
                        *o = v + b;
                    }
                }
            }
            r0 = r1;
        }
        out
    }

    /// Returns `(dx, dw, db)`; `dx` is only computed when requested.
    pub fn backward<T: Scalar>(
        &self,
        x: &[T],
        w: &[T],
        dy: &[T],
        want_dx: bool,
    ) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
        let kdim = self.kdim();
        let ow_n = self.output[2];
        let chunk = self.rows_per_chunk();
        let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
        let mut dw = vec![T::zero(); self.cout * kdim];
        let mut db = vec![T::zero(); self.cout];
        let mut cols = vec![T::zero(); kdim * chunk * ow_n];
        let mut dyc = vec![T::zero(); self.cout * chunk * ow_n];
        let mut r0 = 0;
        while r0 < self.rows() {
            let r1 = (r0 + chunk).min(self.rows());
            let width = (r1 - r0) * ow_n;
            for co in 0..self.cout {
                let mut acc = T::zero();
                for r in r0..r1 {
                    let (n, od, oh) = self.row_coords(r);
                    let src = self.out_index(n, co, od, oh);
                    let dst = co * width + (r - r0) * ow_n;
                    dyc[dst..dst + ow_n].copy_from_slice(&dy[src..src + ow_n]);
                    acc = acc + dy[src..src + ow_n].iter().copied().sum::<T>();
                }
                db[co] = db[co] + acc;
            }
            let dyc_m = MatRef::new(&dyc[..self.cout * width], self.cout, width);
            self.im2col(x, r0, r1, &mut cols[..kdim * width]);
            gemm(dyc_m, MatRef::new(&cols[..kdim * width], kdim, width).t(), T::one(), &mut dw);
            if let Some(dx) = dx.as_mut() {
                gemm(MatRef::new(w, self.cout, kdim).t(), dyc_m, T::zero(), &mut cols[..kdim * width]);
                self.col2im(&cols[..kdim * width], r0, r1, dx);
            }
            r0 = r1;
        }
        (dx, dw, db)
    }
}
