//! The T-Encoder / C-Encoder pair and the classification head, all backed
//! by one [`ParamSet`].

use lwpt_autograd::init::xavier_matrix;
use lwpt_autograd::{Graph, ParamId, ParamSet, Tensor, Var};
use rand::RngCore;

use crate::corpus::Batch;
use crate::encoders::{Encoder, EncoderConfig, Mode};
use crate::error::{Error, Result};

pub const T_PREFIX: &str = "t_encoder";
pub const C_PREFIX: &str = "c_encoder";
pub const HEAD_PREFIX: &str = "head";

/// Maps the flattened fused representation `[B, l*4H]` to `l` logits.
#[derive(Clone, Debug)]
pub struct Head {
    w: ParamId,
    bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub t_encoder: Encoder,
    pub c_encoder: Encoder,
    pub head: Option<Head>,
}

impl Model {
    /// Two independently initialized encoders of the same architecture.
    pub fn new(config: EncoderConfig, rng: &mut dyn RngCore) -> Result<Model> {
        let mut params = ParamSet::new();
        let t_encoder = Encoder::new(config.clone(), T_PREFIX, &mut params, rng)?;
        let c_encoder = Encoder::new(config.clone(), C_PREFIX, &mut params, rng)?;
        Ok(Model {
            config,
            params,
            t_encoder,
            c_encoder,
            head: None,
        })
    }

    /// Rebuilds handles over loaded parameters. The head is bound when its
    /// weight matrix is present.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Model> {
        let t_encoder = Encoder::bind(config.clone(), T_PREFIX, &params)?;
        let c_encoder = Encoder::bind(config.clone(), C_PREFIX, &params)?;
        let head = match params.find(&format!("{HEAD_PREFIX}.w")) {
            None => None,
            Some(w) => {
                let expected = [fused_dim(&config), config.num_labels];
                if params.get(w).value().shape() != expected {
                    return Err(Error::Config(format!(
                        "head weight has shape {:?}, expected {expected:?}",
                        params.get(w).value().shape()
                    )));
                }
                Some(Head {
                    w,
                    bias: params.find(&format!("{HEAD_PREFIX}.bias")),
                })
            }
        };
        Ok(Model {
            config,
            params,
            t_encoder,
            c_encoder,
            head,
        })
    }

    /// Adds a freshly initialized head, replacing any existing one's handles.
    pub fn add_head(&mut self, with_bias: bool, rng: &mut dyn RngCore) -> Result<()> {
        if self.head.is_some() {
            return Err(Error::Usage("model already has a classification head".into()));
        }
        let (rows, l) = (fused_dim(&self.config), self.config.num_labels);
        let w = self.params.add(format!("{HEAD_PREFIX}.w"), xavier_matrix(rows, l, rng))?;
        let bias = if with_bias {
            Some(self.params.add(format!("{HEAD_PREFIX}.bias"), Tensor::zeros(&[l]))?)
        } else {
            None
        };
        self.head = Some(Head { w, bias });
        Ok(())
    }

    /// Marks both encoders trainable or frozen.
    pub fn set_encoders_trainable(&mut self, trainable: bool) {
        self.params.set_trainable_prefix(&format!("{T_PREFIX}."), trainable);
        self.params.set_trainable_prefix(&format!("{C_PREFIX}."), trainable);
    }

    /// Fused label-wise representation `[B, l, 4H]`: row `k` is the
    /// T-Encoder output for label `k` followed by the C-Encoder output.
    pub fn fuse(&self, g: &mut Graph, batch: &Batch, mut mode: Mode) -> Result<Var> {
        let qt = self.t_encoder.encode_all(g, &self.params, batch, reborrow(&mut mode))?;
        let qc = self.c_encoder.encode_all(g, &self.params, batch, mode)?;
        Ok(g.concat(&[qt, qc], 2)?)
    }

    /// Label probabilities `[B, l]` from a fused representation `[B, l, 4H]`.
    pub fn predict(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no classification head".into()))?;
        let b = g.shape(fused)[0];
        let flat = g.reshape(fused, &[b, fused_dim(&self.config)])?;
        let w = g.param(&self.params, head.w);
        let mut logits = g.matmul(flat, w)?;
        if let Some(bias) = head.bias {
            let bias = g.param(&self.params, bias);
            logits = g.add_broadcast(logits, bias)?;
        }
        Ok(g.sigmoid(logits))
    }
}

/// Width of the flattened fused representation, `l * 4H`.
pub fn fused_dim(config: &EncoderConfig) -> usize {
    config.num_labels * 2 * config.repr_dim()
}

/// Borrows a mode for one call while keeping it usable afterwards.
pub fn reborrow<'a>(mode: &'a mut Mode<'_>) -> Mode<'a> {
    match mode {
        Mode::Eval => Mode::Eval,
        Mode::Train(rng) => Mode::Train(&mut **rng),
    }
}
