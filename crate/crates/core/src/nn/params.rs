use crate::error::TensorError;
use crate::nn::config::TcanConfig;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Attention maps of one block: keys, queries and values, each `[d_embed, d_attn]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub key: Tensor,
    pub query: Tensor,
    pub value: Tensor,
    /// `[d_attn, d_embed]`, present only when the values feed the output.
    pub value_out: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attention: Option<AttentionParams>,
    /// `[d_embed, d_embed, k]` convolution standing in for attention.
    pub conv_replace: Option<Tensor>,
    /// `blocks_per_level` kernels of shape `[d_embed, d_embed, k]`.
    pub convs: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub layers: Vec<LayerParams>,
    /// `[d_embed, V]`; `None` when the decoder reuses the embedding table.
    pub decoder: Option<Tensor>,
    pub decoder_bias: Tensor,
}

/// splitmix64 finalizer, used to derive one seed per parameter tensor.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Initializer {
    seed: u64,
    next: u64,
}

impl Initializer {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor, TensorError> {
        let seed = mix_seed(self.seed, self.next);
        self.next += 1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Tensor::uniform(shape, bound, seed)?.with_grad())
    }
}

impl ModelParams {
    pub fn init(cfg: &TcanConfig) -> Result<Self, TensorError> {
        let (v, d, da, k) = (cfg.vocab_size, cfg.d_embed, cfg.d_attn, cfg.kernel_size);
        let mut init = Initializer {
            seed: cfg.seed,
            next: 0,
        };
        let embedding = init.uniform(&[v, d], d)?;
        let mut layers = Vec::with_capacity(cfg.num_levels);
        for _ in 0..cfg.num_levels {
            let attention = if cfg.temporal_attention {
                Some(AttentionParams {
                    key: init.uniform(&[d, da], d)?,
                    query: init.uniform(&[d, da], d)?,
                    value: init.uniform(&[d, da], d)?,
                    value_out: if cfg.use_values_for_output {
                        Some(init.uniform(&[da, d], da)?)
                    } else {
                        None
                    },
                })
            } else {
                None
            };
            let conv_replace = if cfg.temporal_attention {
                None
            } else {
                Some(init.uniform(&[d, d, k], d * k)?)
            };
            let convs = (0..cfg.blocks_per_level)
                .map(|_| init.uniform(&[d, d, k], d * k))
                .collect::<Result<_, _>>()?;
            layers.push(LayerParams {
                attention,
                conv_replace,
                convs,
            });
        }
        let decoder = if cfg.tie_decoder {
            None
        } else {
            Some(init.uniform(&[d, v], d)?)
        };
        let decoder_bias = Tensor::zeros(&[v])?.with_grad();
        Ok(Self {
            embedding,
            layers,
            decoder,
            decoder_bias,
        })
    }

    /// Parameter tensors with stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(a) = &layer.attention {
                out.push((format!("layers.{l}.attn.key"), &a.key));
                out.push((format!("layers.{l}.attn.query"), &a.query));
                out.push((format!("layers.{l}.attn.value"), &a.value));
                if let Some(p) = &a.value_out {
                    out.push((format!("layers.{l}.attn.value_out"), p));
                }
            }
            if let Some(c) = &layer.conv_replace {
                out.push((format!("layers.{l}.conv_replace"), c));
            }
            for (b, c) in layer.convs.iter().enumerate() {
                out.push((format!("layers.{l}.conv.{b}"), c));
            }
        }
        if let Some(dec) = &self.decoder {
            out.push(("decoder.weight".to_string(), dec));
        }
        out.push(("decoder.bias".to_string(), &self.decoder_bias));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            if let Some(a) = &mut layer.attention {
                out.push(&mut a.key);
                out.push(&mut a.query);
                out.push(&mut a.value);
                if let Some(p) = &mut a.value_out {
                    out.push(p);
                }
            }
            if let Some(c) = &mut layer.conv_replace {
                out.push(c);
            }
            out.extend(layer.convs.iter_mut());
        }
        if let Some(dec) = &mut self.decoder {
            out.push(dec);
        }
        out.push(&mut self.decoder_bias);
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let layers = self
            .layers
            .iter()
            .map(|layer| BoundLayer {
                attention: layer.attention.as_ref().map(|a| BoundAttention {
                    key: tape.leaf(&a.key),
                    query: tape.leaf(&a.query),
                    value: tape.leaf(&a.value),
                    value_out: a.value_out.as_ref().map(|p| tape.leaf(p)),
                }),
                conv_replace: layer.conv_replace.as_ref().map(|c| tape.leaf(c)),
                convs: layer.convs.iter().map(|c| tape.leaf(c)).collect(),
            })
            .collect();
        BoundParams {
            embedding: tape.leaf(&self.embedding),
            layers,
            decoder: self.decoder.as_ref().map(|d| tape.leaf(d)),
            decoder_bias: tape.leaf(&self.decoder_bias),
        }
    }
}

/// Exact scalar parameter count for `cfg`, without allocating.
pub fn count_parameters(cfg: &TcanConfig) -> usize {
    let (v, d, da, k) = (cfg.vocab_size, cfg.d_embed, cfg.d_attn, cfg.kernel_size);
    let attention = if cfg.temporal_attention {
        3 * d * da + if cfg.use_values_for_output { da * d } else { 0 }
    } else {
        d * d * k
    };
    let per_level = attention + cfg.blocks_per_level * d * d * k;
    let decoder = if cfg.tie_decoder { 0 } else { d * v };
    v * d + cfg.num_levels * per_level + decoder + v
}

#[derive(Debug, Clone)]
pub struct BoundAttention {
    pub key: Var,
    pub query: Var,
    pub value: Var,
    pub value_out: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub attention: Option<BoundAttention>,
    pub conv_replace: Option<Var>,
    pub convs: Vec<Var>,
}

/// Tape handles for a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub embedding: Var,
    pub layers: Vec<BoundLayer>,
    pub decoder: Option<Var>,
    pub decoder_bias: Var,
}

impl BoundParams {
    /// Handles in [`ModelParams::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for layer in &self.layers {
            if let Some(a) = &layer.attention {
                out.extend([a.key, a.query, a.value]);
                out.extend(a.value_out);
            }
            out.extend(layer.conv_replace);
            out.extend(layer.convs.iter().copied());
        }
        out.extend(self.decoder);
        out.push(self.decoder_bias);
        out
    }

    /// Per-parameter gradients; parameters the loss never reached get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, params: &ModelParams) -> Vec<Vec<f64>> {
        self.vars()
            .into_iter()
            .zip(params.named())
            .map(|(var, (_, t))| grads.take(var).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TcanConfig {
        TcanConfig {
            vocab_size: 5,
            d_embed: 4,
            d_attn: 3,
            kernel_size: 2,
            num_levels: 1,
            blocks_per_level: 1,
            tie_decoder: false,
            ..TcanConfig::default()
        }
    }

    #[test]
    fn tiny_config_hand_count() {
        // embedding 5*4 = 20
        // key/query/value 3 * (4*3) = 36
        // one conv kernel 4*4*2 = 32
        // decoder 4*5 + bias 5 = 25
        let params = ModelParams::init(&tiny()).unwrap();
        assert_eq!(params.count(), 113);
        assert_eq!(count_parameters(&tiny()), 113);
    }

    #[test]
    fn embedding_contributes_v_times_d() {
        let params = ModelParams::init(&tiny()).unwrap();
        assert_eq!(params.named()[0].1.numel(), 5 * 4);
    }

    #[test]
    fn enhanced_residual_adds_no_parameters() {
        let on = tiny();
        let off = TcanConfig {
            use_enhanced_residual: false,
            ..tiny()
        };
        assert_eq!(
            ModelParams::init(&on).unwrap().count(),
            ModelParams::init(&off).unwrap().count()
        );
    }

    #[test]
    fn analytic_count_matches_allocation_for_variants() {
        for tie in [false, true] {
            for values in [false, true] {
                for ta in [false, true] {
                    let cfg = TcanConfig {
                        tie_decoder: tie,
                        use_values_for_output: values,
                        temporal_attention: ta,
                        use_enhanced_residual: ta,
                        blocks_per_level: 2,
                        num_levels: 3,
                        ..tiny()
                    };
                    let p = ModelParams::init(&cfg).unwrap();
                    assert_eq!(p.count(), count_parameters(&cfg), "{cfg:?}");
                    assert_eq!(p.named().len(), p.clone().tensors_mut().len());
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = ModelParams::init(&tiny()).unwrap();
        let b = ModelParams::init(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&TcanConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a.embedding, c.embedding);
    }
}
