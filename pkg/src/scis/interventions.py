"""Parameterized de-confounding modules over a frozen prototype dictionary.

Two interventions, both subtractive:

* ``pdm_forward`` adjusts classification logits: an affinity softmax of
  the queries against the dictionary retrieves a prototype mixture, a
  learnable projection turns it into a logit bias, and a learnable
  per-class vector scales the subtraction. With the scale at zero the
  module is the exact identity.

* ``idm_forward`` cleans query features before they enter a downstream
  interaction: multi-head cross-attention reconstructs the component of
  the query predictable from the dictionary, a sigmoid-gated MLP decides
  per-dimension how much of it to subtract. The attention output
  projection initializes to zero, so a freshly built module is the exact
  identity while keeping live gradients.

The dictionary rows are constants: the forward passes refuse tensors
with gradient tracking enabled, and training asserts after every
backward pass that no gradient reached them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ContractError,
    DimensionError,
    Tensor,
    concat_last,
    matmul,
    mlp_forward,
    mul_elementwise,
    sigmoid,
    slice_last,
    softmax_rows,
    sub,
    transpose_last2,
)


@dataclass
class PdmParams:
    """Prototype-to-logit projection and per-class subtraction scale."""

    b_proto: Tensor   # K x C
    lam: Tensor       # C
    scale: float      # affinity softmax temperature, sqrt(D)

    @classmethod
    def init(cls, k: int, n_classes: int, dim: int, rng: np.random.Generator) -> "PdmParams":
        b = Tensor(0.01 * rng.normal(size=(k, n_classes)), requires_grad=True)
        lam = Tensor(np.zeros(n_classes), requires_grad=True)
        return cls(b_proto=b, lam=lam, scale=math.sqrt(dim))

    def tensors(self) -> dict:
        return {"b_proto": self.b_proto, "lam": self.lam}


@dataclass
class IdmParams:
    """Multi-head cross-attention projections plus the gating MLP."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    gate_w1: Tensor   # 2D x D
    gate_b1: Tensor
    gate_w2: Tensor   # D x D
    gate_b2: Tensor
    heads: int
    clamp_gate: bool = field(default=False)  # test hook: force the gate to zero

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.heads != 0:
            raise ContractError(
                f"model dim {d} not divisible by {self.heads} heads")

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator,
             anchor_scale: float = 1.0) -> "IdmParams":
        """Random projections; value path scaled to the anchor's row norm.

        ``anchor_scale`` should be the mean row norm of the dictionary the
        instance will attend over, so the reconstructed component starts
        at unit scale regardless of how large the frozen prototypes are.
        """
        if dim % heads != 0:
            raise ContractError(f"model dim {dim} not divisible by {heads} heads")
        def mat(gain=2.0):
            # wider-than-usual init keeps early prototype affinities sharp
            return Tensor(gain * rng.normal(size=(dim, dim)) / math.sqrt(dim),
                          requires_grad=True)
        return cls(
            w_q=mat(), w_k=mat(),
            w_v=mat(2.0 / max(anchor_scale, 1.0)),
            w_o=mat(1.0),
            gate_w1=Tensor(rng.normal(size=(2 * dim, dim)) / math.sqrt(2 * dim),
                           requires_grad=True),
            gate_b1=Tensor(np.zeros(dim), requires_grad=True),
            gate_w2=Tensor(rng.normal(size=(dim, dim)) / math.sqrt(dim),
                           requires_grad=True),
            gate_b2=Tensor(np.zeros(dim), requires_grad=True),
            heads=heads,
        )

    def tensors(self) -> dict:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v,
                "w_o": self.w_o, "gate_w1": self.gate_w1,
                "gate_b1": self.gate_b1, "gate_w2": self.gate_w2,
                "gate_b2": self.gate_b2}


def _check_frozen(z: Tensor):
    if z.requires_grad:
        raise ContractError("dictionary tensor must be frozen (requires_grad off)")


def pdm_forward(q: Tensor, l_obs: Tensor, z: Tensor, p: PdmParams) -> Tensor:
    """De-confounded logits: l_obs - lam * softmax(q z^T / scale) b_proto."""
    _check_frozen(z)
    if q.shape[-1] != z.shape[-1]:
        raise DimensionError(
            f"query dim {q.shape} does not match dictionary {z.shape}")
    if l_obs.shape[:-1] != q.shape[:-1]:
        raise DimensionError(
            f"logits shape {l_obs.shape} does not align with queries {q.shape}")
    if z.shape[0] != p.b_proto.shape[0] or l_obs.shape[-1] != p.b_proto.shape[1]:
        raise DimensionError(
            f"projection {p.b_proto.shape} does not match dictionary "
            f"{z.shape} / logits {l_obs.shape}")
    affinity = softmax_rows(matmul(q, transpose_last2(z)), scale=p.scale)
    l_bias = matmul(affinity, p.b_proto)
    return sub(l_obs, mul_elementwise(p.lam, l_bias))


def idm_forward(s_in: Tensor, z: Tensor, p: IdmParams) -> Tensor:
    """Gated subtraction of the dictionary-predictable query component."""
    _check_frozen(z)
    d = s_in.shape[-1]
    if z.shape[-1] != d:
        raise DimensionError(
            f"query dim {s_in.shape} does not match dictionary {z.shape}")
    if p.w_q.shape[0] != d:
        raise DimensionError(
            f"projection dim {p.w_q.shape} does not match queries {s_in.shape}")
    c_spur = _mhca(s_in, z, p)
    if p.clamp_gate:
        gate = Tensor(np.zeros(s_in.shape))
    else:
        gate = sigmoid(mlp_forward(
            [(p.gate_w1, p.gate_b1), (p.gate_w2, p.gate_b2)],
            concat_last(s_in, c_spur)))
    return sub(s_in, mul_elementwise(gate, c_spur))


def _mhca(s_in: Tensor, z: Tensor, p: IdmParams) -> Tensor:
    """Multi-head cross-attention with the dictionary as key and value."""
    d = s_in.shape[-1]
    dh = d // p.heads
    q = matmul(s_in, p.w_q)
    k = matmul(z, p.w_k)
    v = matmul(z, p.w_v)
    head_outs = []
    for h in range(p.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = (slice_last(t, lo, hi) for t in (q, k, v))
        scores = softmax_rows(matmul(qh, transpose_last2(kh)), scale=math.sqrt(dh))
        head_outs.append(matmul(scores, vh))
    merged = head_outs[0]
    for part in head_outs[1:]:
        merged = concat_last(merged, part)
    return matmul(merged, p.w_o)


# wiring plan for the planner pipeline: (instance name, insertion point,
# dictionary domain) -- two logit interventions, four feature interventions
PDM_WIRING = (
    ("pdm_object", "object_logits", "object"),
    ("pdm_map", "map_logits", "map"),
)
IDM_WIRING = (
    ("idm_object_vs_map", "motion_in_object", "map"),
    ("idm_map_vs_object", "motion_in_map", "object"),
    ("idm_agent_vs_map", "planning_in_agent", "map"),
    ("idm_map_vs_agent", "planning_in_map", "agent"),
)
