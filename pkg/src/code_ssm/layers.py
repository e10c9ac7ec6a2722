"""
Gated bidirectional SSM layer.

A layer runs three stages: LayerNorm followed by GELU-gated projections,
two SSM transforms (forward stream and flipped stream) joined by a
multiplicative gate, and an output projection gated by the value path and
added back to the layer input.

Variants:
    base     both streams, flipped backward stream
    uni      flips removed, the layer becomes causal
    dft      SSM transform replaced by the real part of an orthonormal DFT
    dropout  dropout after each of the two elementwise products (training only)
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import SequenceLengthError, ShapeError
from .numerics import (
    Rng,
    Tensor,
    add,
    apply_mask,
    as_tensor,
    dropout,
    embedding,
    flip_sequences,
    gelu,
    layer_norm,
    linear,
    mul,
    real_dft,
    reshape,
    tensor,
)
from .ssm import Discretization, SSMKernelSpec, materialize_kernel, ssm_conv


logger = logging.getLogger(__name__)

INIT_STD = 0.02
DEFAULT_DROPOUT = 0.1


class LayerVariant(Enum):
    """Behaviour of a gated layer."""
    BASE = "base"
    UNI = "uni"
    DFT = "dft"
    DROPOUT = "dropout"


@dataclass
class PadMask:
    """Valid-prefix mask for a batch of sequences."""

    lengths: np.ndarray
    max_length: int

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64).reshape(-1)
        if np.any(self.lengths < 0) or np.any(self.lengths > self.max_length):
            raise ShapeError(f"valid lengths {self.lengths.tolist()} outside [0, {self.max_length}]")

    @classmethod
    def full(cls, batch: int, length: int) -> "PadMask":
        return cls(np.full(batch, length), length)

    @classmethod
    def from_valid(cls, valid: np.ndarray) -> "PadMask":
        valid = np.asarray(valid, dtype=bool)
        lengths = valid.sum(axis=1)
        expected = np.arange(valid.shape[1])[None, :] < lengths[:, None]
        if not np.array_equal(valid, expected):
            raise ShapeError("valid positions must form a prefix of each sequence")
        return cls(lengths, valid.shape[1])

    @classmethod
    def from_ids(cls, token_ids: np.ndarray, pad_id: int) -> "PadMask":
        return cls.from_valid(np.asarray(token_ids) != pad_id)

    @property
    def batch_size(self) -> int:
        return self.lengths.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.max_length)[None, :] < self.lengths[:, None]

    @property
    def has_padding(self) -> bool:
        return bool(np.any(self.lengths < self.max_length))

    def time_mask(self) -> np.ndarray:
        """(B, L, 1) 0/1 array broadcastable against activations."""
        return self.valid[..., None].astype(np.float32)


@dataclass
class GatedLayerParams:
    """Weights of one gated SSM layer; projections are (d_in, d_out)."""

    ln_gamma: Tensor
    ln_beta: Tensor
    w_v: Tensor
    w_v_bias: Tensor
    w_f: Tensor
    w_f_bias: Tensor
    w_b: Tensor
    w_b_bias: Tensor
    w_u1: Tensor
    w_u2: Tensor
    w_u: Tensor
    w_o: Tensor
    fwd_kernel: SSMKernelSpec
    bwd_kernel: SSMKernelSpec
    variant: LayerVariant = LayerVariant.BASE
    dropout_p: float = DEFAULT_DROPOUT
    w_u1_bias: Optional[Tensor] = None
    w_u2_bias: Optional[Tensor] = None
    w_u_bias: Optional[Tensor] = None
    w_o_bias: Optional[Tensor] = None

    @property
    def hidden_dim(self) -> int:
        return self.ln_gamma.shape[0]

    @classmethod
    def initialize(cls, hidden_dim: int, state_size: int, rng: Rng,
                   variant: LayerVariant = LayerVariant.BASE,
                   dropout_p: float = DEFAULT_DROPOUT,
                   gate_bias: bool = False,
                   discretization: Discretization = Discretization.ZOH) -> "GatedLayerParams":
        d = hidden_dim

        def weight(d_in: int, d_out: int) -> Tensor:
            return tensor(rng.truncated_normal((d_in, d_out), std=INIT_STD), requires_grad=True)

        def bias(size: int) -> Tensor:
            return tensor(np.zeros(size), requires_grad=True)

        return cls(
            ln_gamma=tensor(np.ones(d), requires_grad=True),
            ln_beta=bias(d),
            w_v=weight(d, 3 * d),
            w_v_bias=bias(3 * d),
            w_f=weight(d, d),
            w_f_bias=bias(d),
            w_b=weight(d, d),
            w_b_bias=bias(d),
            w_u1=weight(d, d),
            w_u2=weight(d, d),
            w_u=weight(d, 3 * d),
            w_o=weight(3 * d, d),
            fwd_kernel=SSMKernelSpec.initialize(state_size, rng, discretization),
            bwd_kernel=SSMKernelSpec.initialize(state_size, rng, discretization),
            variant=variant,
            dropout_p=dropout_p,
            w_u1_bias=bias(d) if gate_bias else None,
            w_u2_bias=bias(d) if gate_bias else None,
            w_u_bias=bias(3 * d) if gate_bias else None,
            w_o_bias=bias(d) if gate_bias else None,
        )

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        names = ["ln_gamma", "ln_beta", "w_v", "w_v_bias", "w_f", "w_f_bias", "w_b", "w_b_bias",
                 "w_u1", "w_u1_bias", "w_u2", "w_u2_bias", "w_u", "w_u_bias", "w_o", "w_o_bias"]
        params = [(f"{prefix}{name}", getattr(self, name)) for name in names
                  if getattr(self, name) is not None]
        params += self.fwd_kernel.named_parameters(f"{prefix}fwd_kernel.")
        params += self.bwd_kernel.named_parameters(f"{prefix}bwd_kernel.")
        return params


def flip(x: Tensor, mask: Optional[PadMask] = None) -> Tensor:
    """Reverse each sample's valid prefix in time; padded tail stays in place."""
    x = as_tensor(x)
    if x.ndim == 2:
        lengths = None if mask is None else mask.lengths
        return reshape(flip_sequences(reshape(x, (1,) + x.shape), lengths), x.shape)
    return flip_sequences(x, None if mask is None else mask.lengths)


def _sequence_transform(x: Tensor, kernel: SSMKernelSpec, variant: LayerVariant) -> Tensor:
    if variant is LayerVariant.DFT:
        return real_dft(x, axis=1)
    return ssm_conv(materialize_kernel(kernel, x.shape[1]), x)


def layer_forward(params: GatedLayerParams, x_i: Tensor, mask: Optional[PadMask] = None,
                  training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """One gated layer on (L, d) or (B, L, d) input whose pad rows are zero."""
    x_i = as_tensor(x_i)
    unbatched = x_i.ndim == 2
    if unbatched:
        x_i = reshape(x_i, (1,) + x_i.shape)
    if x_i.ndim != 3 or x_i.shape[-1] != params.hidden_dim:
        raise ShapeError(f"layer input shape {x_i.shape} does not match hidden size {params.hidden_dim}")
    if mask is not None and (mask.batch_size, mask.max_length) != x_i.shape[:2]:
        raise ShapeError(f"mask ({mask.batch_size}, {mask.max_length}) does not match input {x_i.shape}")

    variant = params.variant
    bidirectional = variant is not LayerVariant.UNI
    p_drop = params.dropout_p if variant is LayerVariant.DROPOUT else 0.0
    if training and p_drop > 0 and rng is None:
        raise ValueError("dropout variant needs an rng while training")
    padded = mask is not None and mask.has_padding
    time_mask = mask.time_mask() if padded else None
    lengths = mask.lengths if mask is not None else None

    def reverse(t: Tensor) -> Tensor:
        return flip_sequences(t, lengths) if bidirectional else t

    def zero_pads(t: Tensor) -> Tensor:
        return apply_mask(t, time_mask) if padded else t

    # stage 1: normalise and gate
    x = layer_norm(x_i, params.ln_gamma, params.ln_beta)
    v = gelu(linear(x, params.w_v, params.w_v_bias))
    f = zero_pads(gelu(linear(x, params.w_f, params.w_f_bias)))
    b = zero_pads(gelu(linear(reverse(x), params.w_b, params.w_b_bias)))

    # stage 2: forward and backward sequence transforms joined by a product
    u1 = linear(_sequence_transform(f, params.fwd_kernel, variant), params.w_u1, params.w_u1_bias)
    u2 = linear(_sequence_transform(b, params.bwd_kernel, variant), params.w_u2, params.w_u2_bias)
    gate = dropout(mul(u1, reverse(u2)), p_drop, rng, training)
    u = gelu(linear(gate, params.w_u, params.w_u_bias))

    # stage 3: value-gated output and residual
    o = linear(dropout(mul(u, v), p_drop, rng, training), params.w_o, params.w_o_bias)
    out = zero_pads(add(o, x_i))
    return reshape(out, out.shape[1:]) if unbatched else out


def embed(token_ids: np.ndarray, table: Tensor, position_table: Optional[Tensor] = None,
          mask: Optional[PadMask] = None) -> Tensor:
    """Token embedding lookup, plus learned absolute positions when a table is given.

    Without a positional table there is no length cap; with one, sequences
    longer than the table raise SequenceLengthError.
    """
    token_ids = np.asarray(token_ids)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
    vocab_size = table.shape[0]
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= vocab_size):
        raise ShapeError(f"token ids must lie in [0, {vocab_size})")

    out = embedding(token_ids, table)
    length = token_ids.shape[1]
    if position_table is not None:
        if length > position_table.shape[0]:
            raise SequenceLengthError(f"sequence length {length} exceeds positional table "
                                      f"of {position_table.shape[0]}")
        out = add(out, embedding(np.arange(length), position_table))
    if mask is not None and mask.has_padding:
        out = apply_mask(out, mask.time_mask())
    return out
