use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation '{other}'"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// Layer widths from input to logits plus the hidden nonlinearity.
/// The output layer is always linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerLayout {
    pub weight: usize,
    pub bias: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "an architecture needs at least an input and an output width".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        Ok(Architecture {
            layer_sizes,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub(crate) fn layouts(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let layout = LayerLayout {
                    weight: offset,
                    bias: offset + inputs * outputs,
                    inputs,
                    outputs,
                };
                offset += inputs * outputs + outputs;
                layout
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    params: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        let params = vec![0.0; arch.num_params()];
        ModelParams { arch, params }
    }

    /// He-uniform (relu) or Glorot-uniform (tanh) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut model = ModelParams::zeros(arch);
        for layout in model.arch.layouts() {
            let fan_in = layout.inputs as f64;
            let fan_out = layout.outputs as f64;
            let bound = match model.arch.activation {
                Activation::Relu => (6.0 / fan_in).sqrt(),
                Activation::Tanh => (6.0 / (fan_in + fan_out)).sqrt(),
            };
            let end = layout.weight + layout.inputs * layout.outputs;
            for w in &mut model.params[layout.weight..end] {
                *w = rng.random_range(-bound..bound);
            }
        }
        model
    }

    pub fn from_flat(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.num_params() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, architecture needs {}",
                params.len(),
                arch.num_params()
            )));
        }
        Ok(ModelParams { arch, params })
    }

    /// Build from explicit `(weight[out x in], bias[out])` pairs.
    pub fn from_layers(
        activation: Activation,
        layers: &[(Array2<f64>, Array1<f64>)],
    ) -> Result<Self> {
        let Some((first, _)) = layers.first() else {
            return Err(Error::InvalidArgument("no layers given".into()));
        };
        let mut sizes = vec![first.ncols()];
        let mut params = Vec::new();
        for (w, b) in layers {
            if w.ncols() != *sizes.last().unwrap() || w.nrows() != b.len() {
                return Err(Error::Dimension("inconsistent layer shapes".into()));
            }
            sizes.push(w.nrows());
            params.extend(w.iter().copied());
            params.extend(b.iter().copied());
        }
        ModelParams::from_flat(Architecture::new(sizes, activation)?, params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.params
    }

    /// Weight and bias views of layer `index`.
    pub fn layer(&self, index: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let layout = self.arch.layouts()[index];
        self.layer_views(&layout)
    }

    pub(crate) fn layer_views(
        &self,
        layout: &LayerLayout,
    ) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let w_end = layout.weight + layout.inputs * layout.outputs;
        let w = ArrayView2::from_shape(
            (layout.outputs, layout.inputs),
            &self.params[layout.weight..w_end],
        )
        .expect("layout matches buffer");
        let b = ArrayView1::from(&self.params[layout.bias..layout.bias + layout.outputs]);
        (w, b)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    /// Round every parameter to the nearest `f32`, the precision used when a
    /// model is exchanged or checkpointed.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn param_count_and_layout() {
        let arch = Architecture::new(vec![3, 4, 2], Activation::Relu).unwrap();
        assert_eq!(arch.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        let layouts = arch.layouts();
        assert_eq!(layouts[1].weight, 16);
        assert_eq!(layouts[1].bias, 24);
    }

    #[test]
    fn from_layers_matches_views() {
        let w = ndarray::array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let b = ndarray::array![0.1, 0.2, 0.3];
        let model = ModelParams::from_layers(Activation::Tanh, &[(w.clone(), b.clone())]).unwrap();
        let (wv, bv) = model.layer(0);
        assert_eq!(wv, w);
        assert_eq!(bv, b);
    }

    #[test]
    fn rejects_bad_architectures() {
        assert!(Architecture::new(vec![3], Activation::Relu).is_err());
        assert!(Architecture::new(vec![3, 0, 2], Activation::Relu).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6) {
            let arch = Architecture::new(vec![3, hidden, 2], Activation::Relu).unwrap();
            let model = ModelParams::init(arch.clone(), &mut rng::seeded(seed));
            let back = ModelParams::from_flat(arch, model.flatten()).unwrap();
            let a: Vec<u64> = model.as_slice().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = back.as_slice().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
