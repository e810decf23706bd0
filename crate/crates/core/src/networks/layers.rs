use cq_tensor::{
    he_normal, BatchNormMode, BatchNormState, ConvSpec, Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var,
    BN_EPS, BN_MOMENTUM,
};
use rand::Rng;

use crate::error::Result;

/// Convolution weights plus bias, He-initialized.
#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl ConvLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let w = he_normal(&spec.weight_shape(), spec.fan_in(), rng)?;
        let w = store.add(format!("{name}.w"), w, ParamKind::Trainable)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[spec.out_channels])?, ParamKind::Trainable)?;
        Ok(Self { w, b, spec })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        Ok(g.conv(x, w, Some(b), &self.spec)?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNormLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let ones = Tensor::full(&[channels], T::one())?;
        let zeros = Tensor::zeros(&[channels])?;
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), ones.clone(), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), zeros.clone(), ParamKind::Trainable)?,
            mean: store.add(format!("{name}.running_mean"), zeros, ParamKind::Buffer)?,
            var: store.add(format!("{name}.running_var"), ones, ParamKind::Buffer)?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: BatchNormMode) -> Result<Var> {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        let state = BatchNormState {
            running_mean: store.get(self.mean),
            running_var: store.get(self.var),
            ids: Some((self.mean, self.var)),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        };
        Ok(g.batch_norm(x, gamma, beta, state, mode)?)
    }
}

/// Fully connected layer with weights stored `[out, in]`.
#[derive(Clone, Debug)]
pub(crate) struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), he_normal(&[outputs, inputs], inputs, rng)?, ParamKind::Trainable)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs])?, ParamKind::Trainable)?;
        Ok(Self { w, b })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        Ok(g.dense(x, w, b)?)
    }
}
