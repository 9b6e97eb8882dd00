"""Small neural-network toolkit used by the motion predictor.

Everything runs in float64 on the CPU.  Autodiff is delegated to torch's
tape; this module pins down the exact layer semantics the predictor relies
on (masked multi-head attention, a GRU cell with the update gate weighting
the candidate state, post-norm transformer layers), the smooth-L1 loss,
Adam with a step-decay learning rate, and a deterministic checkpoint
format.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
_MASK_FILL = -1e30


def seed_rng(seed: int) -> np.random.Generator:
    """Return an independent generator; equal seeds give equal streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {name}")


# ---------------------------------------------------------------------------
# functional layers
# ---------------------------------------------------------------------------


def dense(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    y = x @ weight.transpose(0, 1)
    return y if bias is None else y + bias


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    mask: torch.Tensor | None,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product attention split across ``heads``.

    Shapes are ``[..., L_q, D]`` for the query and ``[..., L_k, D]`` for key
    and value.  ``mask`` is boolean ``[..., L_q, L_k]`` (True = attend) and
    is applied additively before the softmax.  Query rows with no visible
    key produce zeros.
    """
    *batch, lq, d = query.shape
    lk = key.shape[-2]
    if key.shape[-1] != d or value.shape[-1] != d:
        raise ValueError(f"feature size mismatch: {query.shape}, {key.shape}, {value.shape}")
    if key.shape[-2] != value.shape[-2]:
        raise ValueError("key/value length mismatch")
    if d % heads:
        raise ValueError(f"feature size {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t, n):
        return t.reshape(*t.shape[:-2], n, heads, dh).transpose(-3, -2)

    q, k, v = split(query, lq), split(key, lk), split(value, lk)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)  # [..., H, Lq, Lk]
    if mask is not None:
        if mask.shape[-2:] != (lq, lk):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match ({lq}, {lk})")
        m = mask.unsqueeze(-3)
        scores = scores + (~m).to(DTYPE) * _MASK_FILL
    w = torch.softmax(scores, dim=-1)
    if mask is not None:
        w = w * m.any(dim=-1, keepdim=True).to(DTYPE)
    out = (w @ v).transpose(-3, -2).reshape(*batch, lq, d)
    if return_weights:
        return out, w
    return out


def gru_cell(x: torch.Tensor, h: torch.Tensor, w_ih, w_hh, b_ih, b_hh) -> torch.Tensor:
    """One GRU update: ``h' = (1 - z) * h + z * n``.

    Gate rows of the stacked weights are ordered (reset, update, candidate).
    """
    hidden = h.shape[-1]
    if w_ih.shape != (3 * hidden, x.shape[-1]) or w_hh.shape != (3 * hidden, hidden):
        raise ValueError(f"GRU weight shapes {tuple(w_ih.shape)}, {tuple(w_hh.shape)} "
                         f"inconsistent with input {x.shape[-1]} / hidden {hidden}")
    gi = dense(x, w_ih, b_ih)
    gh = dense(h, w_hh, b_hh)
    i_r, i_z, i_n = gi.split(hidden, dim=-1)
    h_r, h_z, h_n = gh.split(hidden, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1.0 - z) * h + z * n


def smooth_l1_elementwise(diff: torch.Tensor) -> torch.Tensor:
    a = diff.abs()
    return torch.where(a < 1.0, 0.5 * diff * diff, a - 0.5)


def smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return smooth_l1_elementwise(pred - target).mean()


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(as_tensor(rng.uniform(-bound, bound, size=shape)))


def _zeros(*shape) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = _uniform(rng, (d_out, d_in), d_in)
        self.bias = _zeros(d_out)

    def forward(self, x):
        return dense(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.beta = _zeros(d)

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.q = Dense(d, d, rng)
        self.k = Dense(d, d, rng)
        self.v = Dense(d, d, rng)
        self.out = Dense(d, d, rng)

    def forward(self, query, key, mask, return_weights=False):
        res = attention(self.q(query), self.k(key), self.v(key), mask, self.heads, return_weights)
        if return_weights:
            return self.out(res[0]), res[1]
        return self.out(res)


class TransformerLayer(nn.Module):
    """Post-norm attention block: ``LN(x + MHA)`` then ``LN(x + FFN)``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn: int | None = None):
        super().__init__()
        ffn = ffn or 2 * d
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ff1 = Dense(d, ffn, rng)
        self.ff2 = Dense(ffn, d, rng)
        self.norm2 = LayerNorm(d)

    def forward(self, query, key, mask, return_weights=False):
        res = self.attn(query, key, mask, return_weights)
        a, w = res if return_weights else (res, None)
        x = self.norm1(query + a)
        x = self.norm2(x + self.ff2(torch.relu(self.ff1(x))))
        return (x, w) if return_weights else x


class GRUCell(nn.Module):
    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        super().__init__()
        self.w_ih = _uniform(rng, (3 * d_h, d_in), d_in)
        self.w_hh = _uniform(rng, (3 * d_h, d_h), d_h)
        self.b_ih = _zeros(3 * d_h)
        self.b_hh = _zeros(3 * d_h)

    def forward(self, x, h):
        return gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


class MLP(nn.Module):
    def __init__(self, sizes: list[int], rng: np.random.Generator):
        super().__init__()
        self.layers = nn.ModuleList(Dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    base_lr: float = 2e-4
    decay_factor: float = 0.8
    decay_every: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, torch.Tensor], **kw) -> "AdamState":
        st = cls(**kw)
        for name, p in params.items():
            st.m[name] = torch.zeros_like(p, dtype=DTYPE)
            st.v[name] = torch.zeros_like(p, dtype=DTYPE)
        return st

    def lr(self, step: int | None = None) -> float:
        # Decimal keeps the decayed values exact at the printed precision
        # (0.8**2 * 2e-4 is not 1.28e-4 in binary floating point).
        k = (self.step if step is None else step) // self.decay_every
        return float(Decimal(repr(self.base_lr)) * Decimal(repr(self.decay_factor)) ** k)


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None], state: AdamState) -> float:
    """Apply one Adam update in place and return the learning rate used."""
    missing = [n for n in params if grads.get(n) is None]
    if missing:
        raise KeyError(f"missing gradient for {missing[:3]}")
    lr = state.lr()
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return lr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"RPCKPT01"


def save_checkpoint(path, params: dict[str, torch.Tensor], adam: AdamState | None = None,
                    meta: dict | None = None) -> None:
    """Write names, shapes, float64 data and optimizer state.

    The layout is a fixed magic, a length-prefixed canonical JSON header and
    the raw little-endian blobs, so save -> load -> save reproduces the file
    byte for byte.
    """
    blobs: list[bytes] = []
    offset = 0

    def put(t: torch.Tensor) -> dict:
        nonlocal offset
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        raw = arr.tobytes()
        blobs.append(raw)
        entry = {"shape": list(arr.shape), "offset": offset}
        offset += len(raw)
        return entry

    header: dict = {"meta": meta or {}, "params": []}
    for name, p in params.items():
        header["params"].append({"name": name, **put(p)})
    if adam is not None:
        header["adam"] = {
            "step": adam.step, "base_lr": adam.base_lr, "decay_factor": adam.decay_factor,
            "decay_every": adam.decay_every, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps,
            "m": [{"name": n, **put(adam.m[n])} for n in params],
            "v": [{"name": n, **put(adam.v[n])} for n in params],
        }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], AdamState | None, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    base = 16 + n

    def get(entry) -> torch.Tensor:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=base + entry["offset"])
        return torch.tensor(arr.reshape(entry["shape"]), dtype=DTYPE)

    params = {e["name"]: get(e) for e in header["params"]}
    adam = None
    if "adam" in header:
        a = header["adam"]
        adam = AdamState(
            m={e["name"]: get(e) for e in a["m"]}, v={e["name"]: get(e) for e in a["v"]},
            step=a["step"], base_lr=a["base_lr"], decay_factor=a["decay_factor"],
            decay_every=a["decay_every"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
        )
    return params, adam, header["meta"]


def numerical_gradient_check(fn, inputs: list[torch.Tensor], probes: int = 20, h: float = 1e-5,
                             rng: np.random.Generator | None = None) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` maps the list of leaf tensors to a scalar.  ``probes`` random
    coordinates are drawn across all inputs.
    """
    rng = rng or seed_rng(0)
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, grads)]
    sizes = np.array([x.numel() for x in leaves])
    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            which = int(rng.choice(len(leaves), p=sizes / sizes.sum()))
            idx = int(rng.integers(sizes[which]))
            base = [x.detach().clone() for x in leaves]
            flat = base[which].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            f_plus = fn(base).item()
            flat[idx] = orig - h
            f_minus = fn(base).item()
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = grads[which].reshape(-1)[idx].item()
            denom = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
