use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, LayerSpec};
use super::model::{EnergyModel, Generator};
use crate::error::{Error, Result};

/// Named architecture pair for the energy model and generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetPreset {
    pub name: String,
    pub energy: Vec<LayerSpec>,
    pub generator: Vec<LayerSpec>,
    pub sigma: f64,
}

pub const PRESET_NAMES: [&str; 3] = ["toy32", "toy2circ", "mnist-mlp"];

fn energy_specs(input: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = input;
    for &h in hidden {
        specs.push(LayerSpec::Dense {
            input: prev,
            output: h,
            weight_norm: true,
            activation: Activation::LEAKY_RELU,
        });
        prev = h;
    }
    specs.push(LayerSpec::Dense {
        input: prev,
        output: classes,
        weight_norm: true,
        activation: Activation::Identity,
    });
    specs
}

fn generator_specs(latent: usize, hidden: &[usize], output: usize, out_act: Activation) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = latent;
    for &h in hidden {
        specs.push(LayerSpec::Dense {
            input: prev,
            output: h,
            weight_norm: false,
            activation: Activation::Identity,
        });
        specs.push(LayerSpec::BatchNorm {
            dim: h,
            momentum: 0.9,
            eps: 1e-5,
            activation: Activation::Softplus,
        });
        prev = h;
    }
    specs.push(LayerSpec::Dense {
        input: prev,
        output,
        weight_norm: false,
        activation: out_act,
    });
    specs
}

/// Looks up an architecture by name.
pub fn preset(name: &str) -> Result<NetPreset> {
    let (energy, generator, sigma) = match name {
        "toy32" => (
            energy_specs(2, &[100, 100], 1),
            generator_specs(2, &[50, 50], 2, Activation::Identity),
            0.05,
        ),
        "toy2circ" => (
            energy_specs(2, &[100, 100], 2),
            generator_specs(2, &[50, 50], 2, Activation::Identity),
            0.05,
        ),
        "mnist-mlp" => (
            energy_specs(784, &[1000, 500, 250, 250, 250], 10),
            generator_specs(100, &[500, 500], 784, Activation::Sigmoid),
            0.1,
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown architecture preset {other:?} (expected one of {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(NetPreset {
        name: name.to_string(),
        energy,
        generator,
        sigma,
    })
}

impl NetPreset {
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(EnergyModel, Generator)> {
        let e = EnergyModel::from_specs(&self.energy, rng)?;
        let g = Generator::from_specs(&self.generator, self.sigma, rng)?;
        if e.input_dim() != g.output_dim() {
            return Err(Error::Config(format!(
                "energy input width {} does not match generator output width {}",
                e.input_dim(),
                g.output_dim()
            )));
        }
        Ok((e, g))
    }
}
