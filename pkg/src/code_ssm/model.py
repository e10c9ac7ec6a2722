"""
Encoder stack for code-ssm.

Token embedding (plus learned positions for the ``pos`` variant), a stack of
gated SSM layers, a final LayerNorm and the masked-language-model head.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import EncoderConfig
from .exceptions import ShapeError
from .layers import INIT_STD, GatedLayerParams, LayerVariant, PadMask, embed, layer_forward
from .numerics import Rng, Tensor, add, gelu, layer_norm, linear, matmul, tensor, transpose
from .ssm import Discretization


logger = logging.getLogger(__name__)

_LAYER_VARIANTS = {
    "base": LayerVariant.BASE,
    "pos": LayerVariant.BASE,
    "uni": LayerVariant.UNI,
    "dft": LayerVariant.DFT,
    "dropout": LayerVariant.DROPOUT,
}


@dataclass
class MLMHead:
    """Vocabulary projection; the dense/GELU/LayerNorm transform is only present for ``bert``."""

    bias: Tensor
    weight: Optional[Tensor] = None
    dense: Optional[Tensor] = None
    dense_bias: Optional[Tensor] = None
    ln_gamma: Optional[Tensor] = None
    ln_beta: Optional[Tensor] = None

    def named_parameters(self, prefix: str = "mlm.") -> List[Tuple[str, Tensor]]:
        names = ["dense", "dense_bias", "ln_gamma", "ln_beta", "weight", "bias"]
        return [(f"{prefix}{name}", getattr(self, name)) for name in names
                if getattr(self, name) is not None]


@dataclass
class EncoderParams:
    """All trainable tensors of one encoder together with its configuration."""

    config: EncoderConfig
    token_embedding: Tensor
    layers: List[GatedLayerParams]
    final_ln_gamma: Tensor
    final_ln_beta: Tensor
    mlm: MLMHead
    position_embedding: Optional[Tensor] = None

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Stable ordering shared by the optimizer, checkpoints and gradient checks."""
        params = [("embeddings.token", self.token_embedding)]
        if self.position_embedding is not None:
            params.append(("embeddings.position", self.position_embedding))
        for index, layer in enumerate(self.layers):
            params += layer.named_parameters(f"layers.{index}.")
        params += [("final_ln_gamma", self.final_ln_gamma), ("final_ln_beta", self.final_ln_beta)]
        params += self.mlm.named_parameters()
        return params

    def parameter_dict(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


@dataclass
class EncoderOutput:
    hidden: Tensor
    logits: Optional[Tensor] = None


def init_params(config: EncoderConfig, rng: Rng) -> EncoderParams:
    """Randomly initialise an encoder.

    Projections and embeddings are truncated normal with std 0.02, LayerNorm
    starts at gamma=1 and beta=0, and SSM kernels use S4D-Lin. Draw order is
    fixed so the same seed always yields the same parameters.
    """
    config.validate()
    d = config.hidden_dim
    variant = _LAYER_VARIANTS[config.variant]
    discretization = Discretization(config.discretization)

    token_embedding = tensor(rng.truncated_normal((config.vocab_size, d), std=INIT_STD), requires_grad=True)
    position_embedding = None
    if config.variant == "pos":
        position_embedding = tensor(rng.truncated_normal((config.max_position, d), std=INIT_STD),
                                    requires_grad=True)

    layers = [
        GatedLayerParams.initialize(d, config.state_size, rng, variant=variant,
                                    dropout_p=config.dropout_p, gate_bias=config.gate_bias,
                                    discretization=discretization)
        for _ in range(config.n_layers)
    ]

    head = MLMHead(bias=tensor(np.zeros(config.vocab_size), requires_grad=True))
    if config.mlm_head == "bert":
        head.dense = tensor(rng.truncated_normal((d, d), std=INIT_STD), requires_grad=True)
        head.dense_bias = tensor(np.zeros(d), requires_grad=True)
        head.ln_gamma = tensor(np.ones(d), requires_grad=True)
        head.ln_beta = tensor(np.zeros(d), requires_grad=True)
    if not config.tie_mlm_head:
        head.weight = tensor(rng.truncated_normal((d, config.vocab_size), std=INIT_STD), requires_grad=True)

    params = EncoderParams(
        config=config,
        token_embedding=token_embedding,
        layers=layers,
        final_ln_gamma=tensor(np.ones(d), requires_grad=True),
        final_ln_beta=tensor(np.zeros(d), requires_grad=True),
        mlm=head,
        position_embedding=position_embedding,
    )
    logger.debug(f"Initialised encoder with {params.num_parameters()} parameters "
                 f"({config.n_layers} layers, d={d}, N={config.state_size}, variant={config.variant})")
    return params


def encode(params: EncoderParams, token_ids: np.ndarray, mask: Optional[PadMask] = None,
           training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """Hidden states after the final LayerNorm, shape (B, L, d)."""
    token_ids = np.asarray(token_ids)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
    if token_ids.ndim != 2:
        raise ShapeError(f"token_ids must be (L,) or (B, L), got shape {token_ids.shape}")
    if mask is not None and (mask.batch_size, mask.max_length) != token_ids.shape:
        raise ShapeError(f"mask ({mask.batch_size}, {mask.max_length}) does not match ids {token_ids.shape}")

    x = embed(token_ids, params.token_embedding, params.position_embedding, mask)
    for layer in params.layers:
        x = layer_forward(layer, x, mask, training=training, rng=rng)
    return layer_norm(x, params.final_ln_gamma, params.final_ln_beta)


def mlm_logits(params: EncoderParams, hidden: Tensor) -> Tensor:
    head = params.mlm
    if head.dense is not None:
        hidden = layer_norm(gelu(linear(hidden, head.dense, head.dense_bias)), head.ln_gamma, head.ln_beta)
    weight = head.weight if head.weight is not None else transpose(params.token_embedding)
    return add(matmul(hidden, weight), head.bias)


def model_forward(params: EncoderParams, token_ids: np.ndarray, mask: Optional[PadMask] = None,
                  training: bool = False, rng: Optional[Rng] = None) -> EncoderOutput:
    """Embed, run every layer, normalise and project onto the vocabulary.

    Args:
        params: Encoder weights
        token_ids: (L,) or (B, L) integer ids
        mask: Valid-prefix mask; None means every position is valid
        training: Enables dropout in the dropout variant
        rng: Source of dropout masks

    Returns:
        EncoderOutput with hidden (B, L, d) and logits (B, L, vocab); a 1-D
        input keeps a leading batch of one
    """
    hidden = encode(params, token_ids, mask, training=training, rng=rng)
    return EncoderOutput(hidden=hidden, logits=mlm_logits(params, hidden))

