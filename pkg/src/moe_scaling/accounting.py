"""Parameter, FLOP and memory arithmetic for Switch-style MoE transformers.

Counts include the embedding and unembedding matrices unless a name says
otherwise. Each block holds ``4 d^2`` attention weights and ``9 d^2``
weights per expert (SwiGLU with hidden size ``3 d``), so a dense model has
``13 d^2`` per block.

Integer counts use Python ints and never overflow. The ``standard_*``
helpers are the real-valued versions used by the planners, where
``d_model`` varies continuously under the ``n_blocks = d_model / 64`` rule.
"""

from __future__ import annotations

from dataclasses import dataclass

from scipy.optimize import bisect

from .errors import NoRoot

D_VOCAB = 50257
HEAD_DIM = 64
BYTES_PER_ELEMENT = (1, 2, 4, 8)

_D_LOW = 64.0
_D_HIGH = float(2**17)
_RTOL = 1e-12


@dataclass(frozen=True)
class ModelShape:
    d_model: int
    n_blocks: int
    n_heads: int
    experts: int = 1

    def __post_init__(self):
        for name in ("d_model", "n_blocks", "n_heads", "experts"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @classmethod
    def standard(cls, d_model: int, experts: int = 1) -> "ModelShape":
        """Shape following ``n_blocks = n_heads = d_model / 64``."""
        if d_model % HEAD_DIM:
            raise ValueError(f"d_model must be a multiple of {HEAD_DIM}, got {d_model}")
        depth = d_model // HEAD_DIM
        return cls(d_model, depth, depth, experts)

    @property
    def is_standard(self) -> bool:
        return (
            self.d_model % HEAD_DIM == 0
            and self.n_blocks == self.n_heads == self.d_model // HEAD_DIM
        )


@dataclass(frozen=True)
class ParamCounts:
    active: int
    total: int
    active_nonemb: int


@dataclass(frozen=True)
class ShapeSolution:
    """Result of inverting a parameter or memory count.

    ``d_model`` is the real root; ``shape`` snaps it to a multiple of 64 and
    ``rel_error`` is the relative mismatch of the snapped shape's count.
    """

    d_model: float
    n_blocks: float
    shape: ModelShape
    rel_error: float


def embedding_params(d_model: int, d_vocab: int = D_VOCAB) -> int:
    return 2 * d_model * d_vocab


def active_params(shape: ModelShape, d_vocab: int = D_VOCAB) -> int:
    return embedding_params(shape.d_model, d_vocab) + 13 * shape.n_blocks * shape.d_model**2


def total_params(shape: ModelShape, d_vocab: int = D_VOCAB) -> int:
    return (
        embedding_params(shape.d_model, d_vocab)
        + (4 + 9 * shape.experts) * shape.n_blocks * shape.d_model**2
    )


def param_counts(shape: ModelShape, d_vocab: int = D_VOCAB) -> ParamCounts:
    active = active_params(shape, d_vocab)
    return ParamCounts(
        active=active,
        total=total_params(shape, d_vocab),
        active_nonemb=active - embedding_params(shape.d_model, d_vocab),
    )


def training_flops(n_act, tokens):
    return 6 * n_act * tokens


def inference_flops(n_act, tokens):
    return 2 * n_act * tokens


def kv_cache_elements(tokens_cached: int, shape: ModelShape) -> int:
    """Stored key and value scalars for ``tokens_cached`` tokens (multi-head attention)."""
    if tokens_cached < 0:
        raise ValueError("tokens_cached must be non-negative")
    return 2 * tokens_cached * shape.n_blocks * shape.d_model


def _check_bytes(bytes_per_element):
    if bytes_per_element not in BYTES_PER_ELEMENT:
        raise ValueError(f"bytes_per_element must be one of {BYTES_PER_ELEMENT}")


def memory_bytes(
    shape: ModelShape,
    tokens_cached: int = 0,
    bytes_per_element: int = 2,
    d_vocab: int = D_VOCAB,
) -> int:
    """Bytes for all weights plus the KV cache. Optimizer state is not counted."""
    _check_bytes(bytes_per_element)
    return bytes_per_element * (
        total_params(shape, d_vocab) + kv_cache_elements(tokens_cached, shape)
    )


# Real-valued counts under the standard shape rule.


def standard_active(d_model, d_vocab: int = D_VOCAB):
    return 2.0 * d_vocab * d_model + 13.0 / HEAD_DIM * d_model**3


def standard_total(d_model, experts, d_vocab: int = D_VOCAB):
    return 2.0 * d_vocab * d_model + (4.0 + 9.0 * experts) / HEAD_DIM * d_model**3


def standard_memory(
    d_model, experts, tokens_cached=0, bytes_per_element=2, d_vocab: int = D_VOCAB
):
    kv = 2.0 * tokens_cached * d_model**2 / HEAD_DIM
    return bytes_per_element * (standard_total(d_model, experts, d_vocab) + kv)


def _invert(count_of_d, target, what, snap):
    lo, hi = count_of_d(_D_LOW), count_of_d(_D_HIGH)
    if not lo <= target <= hi:
        raise NoRoot(f"{what}={target:.6g} outside invertible range [{lo:.6g}, {hi:.6g}]")
    if target == lo:
        root = _D_LOW
    else:
        root = bisect(lambda d: count_of_d(d) - target, _D_LOW, _D_HIGH, xtol=1e-300, rtol=_RTOL)
    shape = snap(root)
    return root, shape


def _snap(d_model: float, experts: int, n_blocks: int | None, n_heads: int | None) -> ModelShape:
    d = max(HEAD_DIM, int(round(d_model / HEAD_DIM)) * HEAD_DIM)
    depth = d // HEAD_DIM
    return ModelShape(d, n_blocks or depth, n_heads or depth, experts)


def shape_from_active(
    n_act: float,
    d_vocab: int = D_VOCAB,
    n_blocks: int | None = None,
    n_heads: int | None = None,
) -> ShapeSolution:
    """Invert the active-parameter count to a width.

    Without ``n_blocks`` the depth follows the width (``d/64``), making the
    count cubic in ``d``; a fixed ``n_blocks`` makes it quadratic.
    """
    return _shape_from(n_act, 13.0, 1, d_vocab, n_blocks, n_heads, "n_act")


def shape_from_total(
    n_total: float,
    experts: int,
    d_vocab: int = D_VOCAB,
    n_blocks: int | None = None,
    n_heads: int | None = None,
) -> ShapeSolution:
    return _shape_from(n_total, 4.0 + 9.0 * experts, experts, d_vocab, n_blocks, n_heads, "n_total")


def _shape_from(target, per_block, experts, d_vocab, n_blocks, n_heads, what):
    if n_blocks is None:
        def count(d):
            return 2.0 * d_vocab * d + per_block / HEAD_DIM * d**3
    else:
        def count(d):
            return 2.0 * d_vocab * d + per_block * n_blocks * d**2

    root, shape = _invert(
        count, target, what, lambda d: _snap(d, max(1, int(round(experts))), n_blocks, n_heads)
    )
    snapped = (
        total_params(shape, d_vocab) if what == "n_total" else active_params(shape, d_vocab)
    )
    depth = root / HEAD_DIM if n_blocks is None else float(n_blocks)
    return ShapeSolution(root, depth, shape, abs(snapped - target) / target)


def shape_from_memory(
    memory: float,
    experts,
    tokens_cached=0,
    bytes_per_element=2,
    d_vocab: int = D_VOCAB,
) -> ShapeSolution:
    """Largest standard-rule width whose weights plus KV cache fit in ``memory`` bytes."""
    _check_bytes(bytes_per_element)

    def count(d):
        return standard_memory(d, experts, tokens_cached, bytes_per_element, d_vocab)

    root, shape = _invert(
        count, memory, "memory", lambda d: _snap(d, max(1, int(round(experts))), None, None)
    )
    snapped = memory_bytes(shape, int(tokens_cached), bytes_per_element, d_vocab)
    return ShapeSolution(root, root / HEAD_DIM, shape, abs(snapped - memory) / memory)
