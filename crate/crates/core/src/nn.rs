//! Fully connected networks on the autodiff tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHeads {
    Single,
    /// The last layer has twice the nominal width and is split into
    /// `(mean, log_variance)`.
    GaussianPair,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_heads: OutputHeads,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, output_heads: OutputHeads) -> Result<Self> {
        if layer_widths.len() < 2 || layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Contract(format!(
                "an MLP needs at least input and output widths, all positive; got {layer_widths:?}"
            )));
        }
        Ok(Self { layer_widths, activation, output_heads })
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    /// Nominal output width (per head for a gaussian pair).
    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let n = self.layer_widths.len();
        self.layer_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let out = if i == n - 2 && self.output_heads == OutputHeads::GaussianPair { 2 * w[1] } else { w[1] };
                (w[0], out)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum MlpOutput {
    Single(Var),
    Pair { mean: Var, log_variance: Var },
}

impl MlpOutput {
    pub fn single(self) -> Var {
        match self {
            MlpOutput::Single(v) => v,
            MlpOutput::Pair { .. } => panic!("expected a single-head output"),
        }
    }

    pub fn pair(self) -> (Var, Var) {
        match self {
            MlpOutput::Pair { mean, log_variance } => (mean, log_variance),
            MlpOutput::Single(_) => panic!("expected a gaussian-pair output"),
        }
    }
}

/// An MLP whose weights live in a [`ParamStore`] under `{name}.{layer}.weight`
/// (shape `[in, out]`) and `{name}.{layer}.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Register freshly initialised parameters, uniform in ±1/√fan_in.
    pub fn new(name: &str, spec: MlpSpec, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, (fan_in, fan_out)) in spec.layer_shapes().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let wid = store.insert(format!("{name}.{i}.weight"), Tensor::new(&[fan_in, fan_out], w)?)?;
            let bid = store.insert(format!("{name}.{i}.bias"), Tensor::new(&[fan_out], b)?)?;
            layers.push((wid, bid));
        }
        Ok(Self { spec, layers })
    }

    /// Bind to parameters already present in `store` (e.g. from a checkpoint).
    pub fn bind(name: &str, spec: MlpSpec, store: &ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, (fan_in, fan_out)) in spec.layer_shapes().into_iter().enumerate() {
            let lookup = |suffix: &str, shape: Vec<usize>| -> Result<ParamId> {
                let key = format!("{name}.{i}.{suffix}");
                let id = store.id(&key).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{key}`")))?;
                if store.get(id).shape() != shape.as_slice() {
                    return Err(Error::dimension(key, shape, store.get(id).shape().to_vec()));
                }
                Ok(id)
            };
            layers.push((lookup("weight", vec![fan_in, fan_out])?, lookup("bias", vec![fan_out])?));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<MlpOutput> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 2 || shape[1] != self.spec.input_width() {
            return Err(Error::dimension(
                "mlp input",
                vec![shape.first().copied().unwrap_or(0), self.spec.input_width()],
                shape,
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, &(wid, bid)) in self.layers.iter().enumerate() {
            let w = tape.param(store, wid);
            let b = tape.param(store, bid);
            let z = tape.matmul(h, w);
            h = tape.add_bias(z, b);
            if i < last && self.spec.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(match self.spec.output_heads {
            OutputHeads::Single => MlpOutput::Single(h),
            OutputHeads::GaussianPair => {
                let d = self.spec.output_width();
                MlpOutput::Pair { mean: tape.slice_cols(h, 0, d), log_variance: tape.slice_cols(h, d, 2 * d) }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set(store: &mut ParamStore, name: &str, data: Vec<f64>) {
        let id = store.id(name).unwrap();
        store.get_mut(id).data_mut().copy_from_slice(&data);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec::new(vec![3, 3], Activation::Relu, OutputHeads::Single).unwrap();
        let mlp = Mlp::new("id", spec, &mut store, &mut rng).unwrap();
        set(&mut store, "id.0.weight", vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        set(&mut store, "id.0.bias", vec![0.0; 3]);
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 3], vec![1.0, 2.0, 3.0]);
        let y = mlp.forward(&mut tape, &store, x).unwrap().single();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_weights_output_bias_only() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec::new(vec![2, 2], Activation::None, OutputHeads::Single).unwrap();
        let mlp = Mlp::new("z", spec, &mut store, &mut rng).unwrap();
        set(&mut store, "z.0.weight", vec![0.0; 4]);
        set(&mut store, "z.0.bias", vec![0.5, -1.0]);
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 2], vec![7.0, -3.0, 100.0, 2.0]);
        let y = mlp.forward(&mut tape, &store, x).unwrap().single();
        assert_eq!(tape.value(y), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn two_layer_relu_matches_hand_computation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec::new(vec![2, 2, 1], Activation::Relu, OutputHeads::Single).unwrap();
        let mlp = Mlp::new("h", spec, &mut store, &mut rng).unwrap();
        // W1 = [[1, -1], [2, 1]] stored [in, out]; b1 = [0.5, 0]
        set(&mut store, "h.0.weight", vec![1.0, -1.0, 2.0, 1.0]);
        set(&mut store, "h.0.bias", vec![0.5, 0.0]);
        set(&mut store, "h.1.weight", vec![3.0, -2.0]);
        set(&mut store, "h.1.bias", vec![0.25]);
        let x: [f64; 2] = [1.5, -0.5];
        // oracle: explicit matrix arithmetic
        let pre = [x[0] * 1.0 + x[1] * 2.0 + 0.5, x[0] * -1.0 + x[1] * 1.0];
        let hidden = [pre[0].max(0.0), pre[1].max(0.0)];
        let expected = hidden[0] * 3.0 + hidden[1] * -2.0 + 0.25;
        let mut tape = Tape::new();
        let xv = tape.constant(&[1, 2], x.to_vec());
        let y = mlp.forward(&mut tape, &store, xv).unwrap().single();
        assert!((tape.scalar(y) - expected).abs() < 1e-15);
        assert_eq!(expected, 3.25);
    }

    #[test]
    fn gaussian_pair_splits_doubled_head() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MlpSpec::new(vec![4, 5, 3], Activation::Relu, OutputHeads::GaussianPair).unwrap();
        let mlp = Mlp::new("enc", spec, &mut store, &mut rng).unwrap();
        assert_eq!(store.get(store.id("enc.1.weight").unwrap()).shape(), &[5, 6]);
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 4], vec![0.1; 8]);
        let (mu, lv) = mlp.forward(&mut tape, &store, x).unwrap().pair();
        assert_eq!(tape.shape(mu), &[2, 3]);
        assert_eq!(tape.shape(lv), &[2, 3]);
    }

    #[test]
    fn wrong_input_width_reports_both_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec::new(vec![3, 2], Activation::Relu, OutputHeads::Single).unwrap();
        let mlp = Mlp::new("m", spec, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 4], vec![0.0; 4]);
        match mlp.forward(&mut tape, &store, x) {
            Err(Error::Dimension { expected, actual, .. }) => {
                assert_eq!(expected, vec![1, 3]);
                assert_eq!(actual, vec![1, 4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_needs_two_widths() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, OutputHeads::Single).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = MlpSpec::new(vec![3, 8, 2], Activation::Relu, OutputHeads::Single).unwrap();
        let mlp = Mlp::new("d", spec, &mut store, &mut rng).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(&[2, 3], vec![0.3, -0.2, 0.9, 1.0, 0.0, -1.0]);
            let y = mlp.forward(&mut tape, &store, x).unwrap().single();
            tape.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }
}
