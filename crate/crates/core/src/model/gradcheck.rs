use super::Model;
use crate::config::Config;
use crate::data::World;
use crate::encoders::{generate_world, SyntheticWorldConfig};
use crate::error::Result;
use crate::tensor::gradcheck::{check_gradients, GradCheckReport};
use crate::tensor::Tensor;

/// Small world and model used for the whole-model gradient check.
pub struct GradCheckSetup {
    pub world: World,
    pub config: Config,
    pub batch: usize,
}

impl GradCheckSetup {
    /// `d = 16`, four heads, three attributes and three objects.
    pub fn standard(seed: u64) -> Result<Self> {
        let world_cfg = SyntheticWorldConfig {
            n_attrs: 3,
            n_objs: 3,
            d: 16,
            raw_dim: 12,
            latent_dim: 2,
            samples_per_pair: 5,
            seed,
            ..Default::default()
        };
        let (world, _) = generate_world(&world_cfg)?;
        let config = Config {
            dtype: crate::tensor::DType::F64,
            seed,
            encoder_seed: seed,
            vocab_size: 16,
            d_tok: 8,
            heads: 4,
            ..Default::default()
        };
        Ok(GradCheckSetup { world, config, batch: 2 })
    }
}

/// Finite-difference check of every learnable parameter group at 64-bit.
pub fn gradcheck_model(setup: &GradCheckSetup, step: f64) -> Result<Vec<GradCheckReport>> {
    let model = Model::<f64>::for_world(&setup.config, &setup.world)?;
    let train = &setup.world.train;
    // Spread the batch over different compositions.
    let stride = (train.len() / setup.batch).max(1);
    let rows: Vec<usize> = (0..setup.batch).map(|k| (k * stride) % train.len()).collect();
    let raw: Tensor<f64> = train.features.select_rows(&rows)?.cast();
    let labels: Vec<_> = rows.iter().map(|&r| train.labels[r]).collect();
    let inputs: Vec<(String, Tensor<f64>)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    check_gradients(&inputs, step, |g, vars| {
        let p = model.params().bind_vars(vars.to_vec())?;
        Ok(model.total_loss(g, &p, &raw, &labels)?.0)
    })
}
