use crate::conv::{canonical3, Padding};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Max-pooling window description, one entry per spatial axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: Vec<usize>,
    pub stride: Vec<usize>,
    /// `Same` pads so that `out = ceil(in / stride)`; padded cells never win.
    pub padding: Padding,
}

impl PoolSpec {
    /// Non-overlapping windows with no padding.
    pub fn new(window: &[usize]) -> Self {
        Self { window: window.to_vec(), stride: window.to_vec(), padding: Padding::Valid }
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }
}

#[derive(Clone, Debug)]
pub(crate) struct PoolGeometry {
    lead: usize,
    input: [usize; 3],
    window: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
    pub out_shape: Vec<usize>,
}

impl PoolGeometry {
    pub fn new(spec: &PoolSpec, shape: &[usize]) -> Result<Self> {
        let r = spec.window.len();
        if !(1..=3).contains(&r) || spec.stride.len() != r {
            return Err(TensorError::invalid("maxpool", "window and stride need 1..=3 matching axes"));
        }
        if spec.window.contains(&0) || spec.stride.contains(&0) {
            return Err(TensorError::invalid("maxpool", "window and stride extents must be positive"));
        }
        if shape.len() != r + 2 {
            return Err(TensorError::shape(
                "maxpool",
                format!("input rank {} for a rank-{r} window", shape.len()),
            ));
        }
        let spatial = &shape[2..];
        let mut out = Vec::with_capacity(r);
        let mut pad = Vec::with_capacity(r);
        for a in 0..r {
            let (o, p) = match spec.padding {
                Padding::Valid => {
                    if spec.window[a] > spatial[a] {
                        return Err(TensorError::shape(
                            "maxpool",
                            format!("window {} larger than input extent {} on axis {a}", spec.window[a], spatial[a]),
                        ));
                    }
                    ((spatial[a] - spec.window[a]) / spec.stride[a] + 1, 0)
                }
                Padding::Same => {
                    let o = spatial[a].div_ceil(spec.stride[a]);
                    let total = ((o - 1) * spec.stride[a] + spec.window[a]).saturating_sub(spatial[a]);
                    if total / 2 >= spec.window[a] || total - total / 2 >= spec.window[a] {
                        return Err(TensorError::shape(
                            "maxpool",
                            format!("window {} falls entirely in padding on axis {a}", spec.window[a]),
                        ));
                    }
                    (o, total / 2)
                }
            };
            out.push(o);
            pad.push(p);
        }
        let mut out_shape = shape[..2].to_vec();
        out_shape.extend_from_slice(&out);
        Ok(Self {
            lead: shape[0] * shape[1],
            input: canonical3(spatial, 1),
            window: canonical3(&spec.window, 1),
            stride: canonical3(&spec.stride, 1),
            pad: canonical3(&pad, 0),
            output: canonical3(&out, 1),
            out_shape,
        })
    }

    /// Returns pooled values and, per output cell, the flat input index that won.
    /// Ties go to the first cell in scan order.
    pub fn forward<T: Scalar>(&self, x: &[T]) -> (Vec<T>, Vec<u32>) {
        let in_vol: usize = self.input.iter().product();
        let out_vol: usize = self.output.iter().product();
        let mut values = Vec::with_capacity(self.lead * out_vol);
        let mut argmax = Vec::with_capacity(self.lead * out_vol);
        let range = |o: usize, a: usize| {
            let start = (o * self.stride[a]) as isize - self.pad[a] as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + self.window[a] as isize).min(self.input[a] as isize)) as usize;
            lo..hi
        };
        for l in 0..self.lead {
            let base = l * in_vol;
            for od in 0..self.output[0] {
                let rd = range(od, 0);
                for oh in 0..self.output[1] {
                    let rh = range(oh, 1);
                    for ow in 0..self.output[2] {
                        let rw = range(ow, 2);
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for d in rd.clone() {
                            for h in rh.clone() {
                                let row = base + (d * self.input[1] + h) * self.input[2];
                                for w in rw.clone() {
                                    let v = x[row + w];
                                    if best_i == usize::MAX || v > best {
                                        best = v;
                                        best_i = row + w;
                                    }
                                }
                            }
                        }
                        values.push(best);
                        argmax.push(best_i as u32);
                    }
                }
            }
        }
        (values, argmax)
    }
}

/// Nearest-neighbour upsampling by integer factors on the trailing axes.
pub(crate) fn upsample_nearest<T: Scalar>(x: &[T], shape: &[usize], factors: &[usize]) -> (Vec<T>, Vec<usize>) {
    let r = factors.len();
    let lead: usize = shape[..shape.len() - r].iter().product();
    let input = canonical3(&shape[shape.len() - r..], 1);
    let f = canonical3(factors, 1);
    let output = [input[0] * f[0], input[1] * f[1], input[2] * f[2]];
    let mut out = Vec::with_capacity(lead * output.iter().product::<usize>());
    let in_vol: usize = input.iter().product();
    for l in 0..lead {
        for d in 0..output[0] {
            for h in 0..output[1] {
                let row = l * in_vol + ((d / f[0]) * input[1] + h / f[1]) * input[2];
                for w in 0..output[2] {
                    out.push(x[row + w / f[2]]);
                }
            }
        }
    }
    let mut out_shape = shape[..shape.len() - r].to_vec();
    out_shape.extend(shape[shape.len() - r..].iter().zip(factors).map(|(s, f)| s * f));
    (out, out_shape)
}

/// Adjoint of [`upsample_nearest`]: sums each block back onto its source cell.
pub(crate) fn upsample_nearest_backward<T: Scalar>(dy: &[T], in_shape: &[usize], factors: &[usize]) -> Vec<T> {
    let r = factors.len();
    let lead: usize = in_shape[..in_shape.len() - r].iter().product();
    let input = canonical3(&in_shape[in_shape.len() - r..], 1);
    let f = canonical3(factors, 1);
    let output = [input[0] * f[0], input[1] * f[1], input[2] * f[2]];
    let in_vol: usize = input.iter().product();
    let out_vol: usize = output.iter().product();
    let mut dx = vec![T::zero(); lead * in_vol];
    for l in 0..lead {
        for d in 0..output[0] {
            for h in 0..output[1] {
                let row = l * in_vol + ((d / f[0]) * input[1] + h / f[1]) * input[2];
                let src = l * out_vol + (d * output[1] + h) * output[2];
                for w in 0..output[2] {
                    dx[row + w / f[2]] = dx[row + w / f[2]] + dy[src + w];
                }
            }
        }
    }
    dx
}
