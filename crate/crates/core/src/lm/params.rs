use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LmConfig, Real};
use crate::error::{Error, Result};

/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    /// `[d_model, 3 * d_model]`: query, key, value projections side by side.
    pub qkv_weight: Tensor<F>,
    pub qkv_bias: Tensor<F>,
    pub attn_out_weight: Tensor<F>,
    pub attn_out_bias: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub fc_weight: Tensor<F>,
    pub fc_bias: Tensor<F>,
    pub proj_weight: Tensor<F>,
    pub proj_bias: Tensor<F>,
}

/// All weights of a pre-norm decoder-only transformer with learned positions
/// and an untied output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<F> {
    pub config: LmConfig,
    pub token_embedding: Tensor<F>,
    pub position_embedding: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_ln_gain: Tensor<F>,
    pub final_ln_bias: Tensor<F>,
    pub output_weight: Tensor<F>,
}

impl<F: Real> LayerParams<F> {
    fn zeros(c: &LmConfig) -> Self {
        let (d, f) = (c.d_model, c.d_ff);
        Self {
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            qkv_weight: Tensor::zeros(&[d, 3 * d]),
            qkv_bias: Tensor::zeros(&[3 * d]),
            attn_out_weight: Tensor::zeros(&[d, d]),
            attn_out_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            fc_weight: Tensor::zeros(&[d, f]),
            fc_bias: Tensor::zeros(&[f]),
            proj_weight: Tensor::zeros(&[f, d]),
            proj_bias: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor<F>); 12] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.out.weight", &self.attn_out_weight),
            ("attn.out.bias", &self.attn_out_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ffn.fc.weight", &self.fc_weight),
            ("ffn.fc.bias", &self.fc_bias),
            ("ffn.proj.weight", &self.proj_weight),
            ("ffn.proj.bias", &self.proj_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 12] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.qkv.weight", &mut self.qkv_weight),
            ("attn.qkv.bias", &mut self.qkv_bias),
            ("attn.out.weight", &mut self.attn_out_weight),
            ("attn.out.bias", &mut self.attn_out_bias),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("ffn.fc.weight", &mut self.fc_weight),
            ("ffn.fc.bias", &mut self.fc_bias),
            ("ffn.proj.weight", &mut self.proj_weight),
            ("ffn.proj.bias", &mut self.proj_bias),
        ]
    }
}

impl<F: Real> LmParams<F> {
    /// All-zero tensors with the shapes implied by `config` (gradient buffers).
    pub fn zeros(config: &LmConfig) -> Self {
        let (v, d, t) = (config.vocab_size, config.d_model, config.max_seq_len);
        Self {
            config: *config,
            token_embedding: Tensor::zeros(&[v, d]),
            position_embedding: Tensor::zeros(&[t, d]),
            layers: (0..config.n_layers)
                .map(|_| LayerParams::zeros(config))
                .collect(),
            final_ln_gain: Tensor::zeros(&[d]),
            final_ln_bias: Tensor::zeros(&[d]),
            output_weight: Tensor::zeros(&[d, v]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Named tensors in canonical (checkpoint) order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.token_embedding),
            ("pos_emb".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_ln.gain".to_string(), &self.final_ln_gain));
        out.push(("final_ln.bias".to_string(), &self.final_ln_bias));
        out.push(("output.weight".to_string(), &self.output_weight));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.token_embedding),
            ("pos_emb".to_string(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.tensors_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_ln.gain".to_string(), &mut self.final_ln_gain));
        out.push(("final_ln.bias".to_string(), &mut self.final_ln_bias));
        out.push(("output.weight".to_string(), &mut self.output_weight));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> LmParams<G> {
        let mut out = LmParams::<G>::zeros(&self.config);
        for ((_, src), (_, dst)) in self
            .named_tensors()
            .into_iter()
            .zip(out.named_tensors_mut())
        {
            *dst = src.cast();
        }
        out
    }
}

/// Deterministic initialization: weights and embeddings ~ N(0, 0.02),
/// biases zero, norm gains one.
pub fn init_params<F: Real>(config: &LmConfig, seed: u64) -> Result<LmParams<F>> {
    config.validate()?;
    let mut params = LmParams::<F>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for (name, tensor) in params.named_tensors_mut() {
        if name.ends_with(".gain") {
            tensor.data.fill(F::one());
        } else if name.ends_with(".bias") {
            // zeros already
        } else {
            for x in tensor.data.iter_mut() {
                *x = F::from_f64_lossy(normal.sample(&mut rng));
            }
        }
    }
    Ok(params)
}
