"""Parameter containers and the layers shared by both branches."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, ValidationError
from .tensor import Tensor, parameter


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ValidationError(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        for k, p in params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise ValidationError(f"{k}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data[...] = value


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(xavier_uniform(rng, d_in, d_out, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


def attention_weights(Q, K, key_mask=None) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k))`` over the key axis.

    ``key_mask`` is boolean, true at keys to exclude, broadcastable to the
    score shape. Excluded keys get a score of -inf before the softmax.
    """
    d_k = Q.shape[-1]
    scores = T.matmul(Q, T.swapaxes(K, -1, -2)) * (1.0 / np.sqrt(d_k))
    if key_mask is not None:
        scores = T.masked_fill(scores, key_mask, -np.inf)
    return T.softmax(scores, axis=-1)


def scaled_dot_attention(Q, K, V, key_mask=None) -> Tensor:
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ContractError(f"attention widths disagree: Q{Q.shape} K{K.shape} V{V.shape}")
    return T.matmul(attention_weights(Q, K, key_mask), V)


class MultiHeadAttention(Module):
    """Multi-head attention over inputs shaped ``(..., n, d)``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValidationError(f"width {d} not divisible by {heads} heads")
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self._heads = heads
        self._d = d

    @property
    def heads(self) -> int:
        return self._heads

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        x = T.reshape(x, (*lead, n, self._heads, self._d // self._heads))
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return T.transpose(x, axes)

    def _merge(self, x: Tensor) -> Tensor:
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        x = T.transpose(x, axes)
        *lead, n, _, _ = x.shape
        return T.reshape(x, (*lead, n, self._d))

    def __call__(self, query_in, kv_in, key_mask=None, diagonal: bool = False) -> Tensor:
        """Attend from ``query_in`` rows to ``kv_in`` rows.

        ``key_mask`` (true = excluded) has shape ``(..., n_k)``. With
        ``diagonal`` each query row attends only to the key row at its own
        index, so the output is the projected value of that row.
        """
        if diagonal:
            if query_in.shape != kv_in.shape:
                raise ContractError("diagonal attention needs aligned query and key rows")
            return self.o(self.v(kv_in))
        Q = self._split(self.q(query_in))
        K = self._split(self.k(kv_in))
        V = self._split(self.v(kv_in))
        mask = None
        if key_mask is not None:
            km = np.asarray(key_mask, dtype=bool)
            mask = km[..., None, None, :]
        return self.o(self._merge(scaled_dot_attention(Q, K, V, mask)))

    def weights(self, query_in, kv_in, key_mask=None) -> np.ndarray:
        """Per-head attention matrices, shape ``(..., heads, n_q, n_k)``."""
        with T.no_grad():
            Q = self._split(self.q(query_in))
            K = self._split(self.k(kv_in))
            mask = None
            if key_mask is not None:
                mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
            return attention_weights(Q, K, mask).data
