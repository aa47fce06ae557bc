"""Differentiable building blocks, optimizer, gradient checker and checkpoints.

Reverse-mode differentiation is delegated to ``torch.autograd``: every forward
pass records its graph on the tensors it touches, and ``backward`` walks that
record in reverse.  Model parameters live outside torch as plain float64 numpy
arrays (see :class:`ParameterArchive`); a training step wraps them as leaf
tensors, runs forward/backward, and hands the gradients to :func:`adam_step`.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from fnt_lab.errors import FNTError

DTYPE = torch.float64
CHECKPOINT_VERSION = 1


def _threads_from_env() -> int:
    try:
        return max(1, int(os.environ.get("FNT_LAB_THREADS", "1")))
    except ValueError:
        return 1


# bitwise reproducibility needs a fixed intra-op thread count
torch.set_num_threads(_threads_from_env())


# ---------------------------------------------------------------------------
# primitives


def affine(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """Rows of ``x @ W.T + b``."""
    if x.shape[-1] != W.shape[-1]:
        raise FNTError("shape-mismatch", f"input width {x.shape[-1]} vs weight {tuple(W.shape)}")
    if b is not None and b.shape[-1] != W.shape[0]:
        raise FNTError("shape-mismatch", f"bias {tuple(b.shape)} vs weight {tuple(W.shape)}")
    y = x @ W.transpose(-1, -2)
    return y if b is None else y + b


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return shifted - torch.logsumexp(shifted, dim=dim, keepdim=True)


def _cell(h: torch.Tensor, ax: torch.Tensor, W_h: torch.Tensor) -> torch.Tensor:
    a = ax + h @ W_h.T
    H = h.shape[-1]
    z = torch.sigmoid(a[..., :H])
    c = torch.tanh(a[..., H:])
    return h + z * (c - h)


def recurrent_step(state: torch.Tensor, x: torch.Tensor,
                   params: Mapping[str, torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """One step of a single-gate GRU-style cell.

    ``z = sigmoid(Wx_z x + Wh_z h + b_z)``, ``c = tanh(Wx_c x + Wh_c h + b_c)``,
    ``h' = (1 - z) h + z c``.  The gate and candidate weights are stacked in
    ``W_x`` (2H x in), ``W_h`` (2H x H) and ``b`` (2H).  Returns ``(h', h')``.
    """
    h = _cell(state, affine(x, params["W_x"], params["b"]), params["W_h"])
    return h, h


def recurrent_sequence(xs: torch.Tensor, params: Mapping[str, torch.Tensor],
                       state: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the cell over ``xs`` of shape (B, T, in); returns (B, T, H) outputs and final state."""
    H = params["W_h"].shape[1]
    if state is None:
        state = xs.new_zeros(xs.shape[:-2] + (H,))
    ax = affine(xs, params["W_x"], params["b"])
    outs = []
    h = state
    for t in range(xs.shape[-2]):
        h = _cell(h, ax[..., t, :], params["W_h"])
        outs.append(h)
    if not outs:
        return xs.new_zeros(xs.shape[:-1] + (H,)), h
    return torch.stack(outs, dim=-2), h


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              moments: AdamMoments, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, step: int = 1) -> tuple[dict[str, np.ndarray], AdamMoments]:
    """Bias-corrected Adam update; pure, returns new parameters and moments.

    Parameters missing from ``grads`` are passed through untouched, which is
    how frozen parameters are excluded.  ``step`` counts from 1.
    """
    b1, b2 = betas
    new_params = dict(params)
    new = AdamMoments(dict(moments.m), dict(moments.v))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FNTError("non-finite-gradient", name)
        p = params[name]
        m = b1 * moments.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * moments.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new.m[name], new.v[name] = m, v
    return new_params, new


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst: tuple[str, tuple[int, ...]] | None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def gradient_check(loss_fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
                   params: Mapping[str, np.ndarray], h: float = 1e-4, tol: float = 1e-4,
                   n_coords: int = 50, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn`` with central differences.

    ``loss_fn`` receives a dict of float64 tensors shaped like ``params`` and
    returns a scalar tensor.  ``n_coords`` coordinates are drawn uniformly
    (without replacement) from the flattened concatenation of all parameters.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: torch.tensor(v, dtype=DTYPE, requires_grad=True) for k, v in base.items()}
    loss = loss_fn(leaves)
    loss.backward()
    analytic = {k: (t.grad.numpy() if t.grad is not None else np.zeros_like(base[k]))
                for k, t in leaves.items()}

    coords = [(k, idx) for k, v in base.items() for idx in np.ndindex(v.shape)]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)

    def value(arrays):
        with torch.no_grad():
            return float(loss_fn({k: torch.tensor(v, dtype=DTYPE) for k, v in arrays.items()}))

    worst, max_err = None, 0.0
    for i in sorted(pick):
        name, idx = coords[i]
        plus = dict(base)
        minus = dict(base)
        plus[name] = base[name].copy()
        minus[name] = base[name].copy()
        plus[name][idx] += h
        minus[name][idx] -= h
        numeric = (value(plus) - value(minus)) / (2 * h)
        err = relative_error(float(analytic[name][idx]), numeric)
        if err >= max_err:
            max_err, worst = err, (name, tuple(int(j) for j in idx))
    return GradCheckReport(max_err, len(pick), tol, worst)


# ---------------------------------------------------------------------------
# parameter storage


class ParameterArchive(dict):
    """Ordered mapping ``name -> float64 array`` with a float32 on-disk format.

    Layout of a checkpoint directory::

        manifest.txt   version line, then "name dtype shape offset length" per entry
        data.bin       little-endian float32 arrays, row-major, in manifest order
    """

    version = CHECKPOINT_VERSION

    def validate(self) -> None:
        for name, arr in self.items():
            if not name or any(c.isspace() for c in name):
                raise FNTError("bad-param-name", repr(name))
            if any(d <= 0 for d in arr.shape) or arr.ndim == 0:
                raise FNTError("bad-param-shape", f"{name} {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise FNTError("non-finite-param", name)

    def digest(self, names=None) -> str:
        """SHA-256 over names, shapes and float64 bytes; used for freeze checks."""
        h = hashlib.sha256()
        for name in sorted(self if names is None else names):
            arr = np.ascontiguousarray(self[name], dtype=np.float64)
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def save(self, directory: str | Path) -> None:
        self.validate()
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = [f"fnt-lab-checkpoint {self.version}"]
        offset = 0
        with open(directory / "data.bin", "wb") as f:
            for name, arr in self.items():
                raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                shape = "x".join(str(d) for d in arr.shape)
                lines.append(f"{name} float32 {shape} {offset} {len(raw)}")
                f.write(raw)
                offset += len(raw)
        (directory / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "ParameterArchive":
        directory = Path(directory)
        lines = (directory / "manifest.txt").read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("fnt-lab-checkpoint "):
            raise FNTError("bad-checkpoint", "missing version line")
        version = int(lines[0].split()[1])
        if version != CHECKPOINT_VERSION:
            raise FNTError("bad-checkpoint", f"unsupported version {version}")
        blob = (directory / "data.bin").read_bytes()
        out = cls()
        for line in lines[1:]:
            if not line.strip():
                continue
            name, dtype, shape, offset, length = line.split()
            if dtype != "float32":
                raise FNTError("bad-checkpoint", f"dtype {dtype}")
            dims = tuple(int(d) for d in shape.split("x"))
            start, n = int(offset), int(length)
            arr = np.frombuffer(blob[start:start + n], dtype="<f4").reshape(dims)
            out[name] = arr.astype(np.float64)
        return out
