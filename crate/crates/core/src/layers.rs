//! Parameterized layer descriptors. A layer records its parameter names and
//! geometry; values live in a [`ParamStore`].

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::nn::{self, Conv2dParams, NormMode, NormParams, NORM_EPSILON};
use crate::params::{ParamStore, Session};
use crate::rng;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        Conv {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`) and zero bias, drawn from a
    /// stream keyed by the weight name.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let name = self.weight_name();
        let mut rng = rng::stream(seed, &name);
        let weight = Tensor::from_fn(self.weight_shape(), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        });
        store.insert(name, weight)?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros([self.out_channels]))?;
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<'_, '_>, x: Var) -> Result<Var> {
        let weight = s.param(&self.weight_name())?;
        let bias = if self.bias {
            Some(s.param(&self.bias_name())?)
        } else {
            None
        };
        nn::conv2d(
            s.tape,
            x,
            &Conv2dParams {
                weight,
                bias,
                stride: self.stride,
                padding: self.padding,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub mode: NormMode,
    /// Start with a zero scale so the layer initially outputs its shift.
    pub zero_scale: bool,
}

impl Norm {
    pub fn new(name: impl Into<String>, channels: usize, mode: NormMode) -> Self {
        Norm {
            name: name.into(),
            channels,
            mode,
            zero_scale: false,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.zero_scale = true;
        self
    }

    fn key(&self, role: &str) -> String {
        format!("{}.{}", self.name, role)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        let scale = if self.zero_scale { 0.0 } else { 1.0 };
        store.insert(self.key("scale"), Tensor::full([self.channels], scale))?;
        store.insert(self.key("shift"), Tensor::zeros([self.channels]))?;
        if self.mode == NormMode::Batch {
            store.insert(self.key("running_mean"), Tensor::zeros([self.channels]))?;
            store.insert(self.key("running_var"), Tensor::ones([self.channels]))?;
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<'_, '_>, x: Var) -> Result<Var> {
        let scale = s.param(&self.key("scale"))?;
        let shift = s.param(&self.key("shift"))?;
        let params = s.params();
        let running = match self.mode {
            NormMode::Batch => Some((
                params.require(&self.key("running_mean"))?,
                params.require(&self.key("running_var"))?,
            )),
            NormMode::Disabled => None,
        };
        let training = s.training();
        let (y, stats) = nn::normalize(
            s.tape,
            x,
            &NormParams {
                scale,
                shift,
                mode: self.mode,
                epsilon: NORM_EPSILON,
                running,
            },
            training,
        )?;
        if let Some(stats) = stats {
            s.record_stats(&self.name, stats);
        }
        Ok(y)
    }
}

/// Blends batch statistics into a store's running estimates:
/// `running <- (1 - momentum)·running + momentum·batch`.
pub fn apply_running_stats(
    store: &mut ParamStore,
    updates: &[(String, nn::BatchStats)],
    momentum: f64,
) -> Result<()> {
    for (norm, stats) in updates {
        for (role, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let key = format!("{}.{}", norm, role);
            let running = store
                .get_mut(&key)
                .ok_or_else(|| crate::Error::contract(format!("missing `{}`", key)))?;
            for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
    Ok(())
}
