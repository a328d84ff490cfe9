"""Numeric substrate: float64 torch tensors, the few kernels the model needs,
a finite-difference gradient checker and a named parameter store with
AdamW state and a stable checkpoint format.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64
CHECKPOINT_FORMAT = "tcda-checkpoint/1"

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def tensor(data, checked: bool = True, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    if checked and not torch.isfinite(t).all():
        raise NonFiniteError("tensor contains NaN or Inf")
    return t.requires_grad_(requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit (biased) variance, then apply the affine."""
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_out, d_in, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight.T
        return out if self.bias is None else out + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class GRUCell(nn.Module):
    """Gated recurrent unit: z, r gates and a tanh candidate over ``r * h``.

    Rows of ``weight_ih``/``weight_hh``/``bias`` are ordered (z, r, candidate).
    """

    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.d_hidden = d_hidden
        self.weight_ih = nn.Parameter(torch.zeros(3 * d_hidden, d_in, dtype=DTYPE))
        self.weight_hh = nn.Parameter(torch.zeros(3 * d_hidden, d_hidden, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(3 * d_hidden, dtype=DTYPE))

    def forward(self, h_prev: Tensor, x: Tensor) -> Tensor:
        return gru_cell(h_prev, x, self)


def gru_cell(h_prev: Tensor, x: Tensor, params: GRUCell) -> Tensor:
    d = params.d_hidden
    if h_prev.shape[-1] != d or x.shape[-1] != params.weight_ih.shape[1]:
        raise ShapeError(f"gru_cell got state {tuple(h_prev.shape)} and input {tuple(x.shape)}")
    gx = x @ params.weight_ih.T + params.bias
    u_zr, u_n = params.weight_hh[: 2 * d], params.weight_hh[2 * d :]
    gh = h_prev @ u_zr.T
    z = torch.sigmoid(gx[..., :d] + gh[..., :d])
    r = torch.sigmoid(gx[..., d : 2 * d] + gh[..., d:])
    candidate = torch.tanh(gx[..., 2 * d :] + (r * h_prev) @ u_n.T)
    return (1 - z) * h_prev + z * candidate


def init_parameters(module: nn.Module, seed: int) -> None:
    """Glorot-uniform matrices, zero biases, unit gains; fixed draw order by name."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                p.fill_(1.0)
            elif p.dim() < 2:
                p.zero_()
            else:
                fan_out, fan_in = p.shape[-2], p.shape[-1]
                a = xavier_bound(fan_in, fan_out)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * a - a)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    step: float = 1e-5,
    floor: float = 1e-8,
    report: dict | None = None,
) -> float:
    """Max elementwise relative error between autograd and central differences.

    ``f`` must be pure: it is re-evaluated with each scalar parameter nudged
    by +-``step``. ``report``, if given, receives the per-parameter maxima.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for (name, p), g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            numeric = torch.empty_like(flat)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                up = f().item()
                flat[k] = orig - step
                down = f().item()
                flat[k] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError(f"non-finite loss while perturbing {name}[{k}]")
                numeric[k] = (up - down) / (2 * step)
            a = analytic.reshape(-1)
            denom = torch.clamp(torch.maximum(a.abs(), numeric.abs()), min=floor)
            err = ((a - numeric).abs() / denom).max().item() if flat.numel() else 0.0
            if report is not None:
                report[name] = err
            worst = max(worst, err)
    return worst


class ParamStore:
    """Named parameters of a module plus AdamW state in two learning-rate groups.

    Parameters whose name starts with one of ``encoder_prefixes`` form the
    encoder group.
    """

    def __init__(
        self,
        module: nn.Module,
        seed: int = 0,
        lr: float = 1e-4,
        lr_encoder: float = 1e-5,
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        encoder_prefixes: tuple[str, ...] = ("encoder.",),
    ):
        self.module = module
        self.seed = seed
        self.encoder_prefixes = encoder_prefixes
        self._params = dict(sorted(module.named_parameters()))
        enc = [p for n, p in self._params.items() if n.startswith(encoder_prefixes)]
        rest = [p for n, p in self._params.items() if not n.startswith(encoder_prefixes)]
        groups = [g for g in ({"params": enc, "lr": lr_encoder}, {"params": rest, "lr": lr}) if g["params"]]
        self.optimizer = torch.optim.AdamW(groups, betas=betas, eps=eps, weight_decay=weight_decay, foreach=True)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    @property
    def names(self) -> list[str]:
        return list(self._params)

    def group_of(self, name: str) -> str:
        return "encoder" if name.startswith(self.encoder_prefixes) else "rest"

    def initialize(self, seed: int | None = None) -> None:
        if seed is not None:
            self.seed = seed
        init_parameters(self.module, self.seed)

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def step(self) -> None:
        self.optimizer.step()

    def count(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, p in self._params.items():
            out[f"param/{name}"] = p.detach().cpu().numpy().copy()
            state = self.optimizer.state.get(p)
            if state:
                out[f"adam/{name}/exp_avg"] = state["exp_avg"].cpu().numpy().copy()
                out[f"adam/{name}/exp_avg_sq"] = state["exp_avg_sq"].cpu().numpy().copy()
                out[f"adam/{name}/step"] = np.asarray(float(state["step"]), dtype=np.float64)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = [n for n in self._params if f"param/{n}" not in arrays]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing}")
        with torch.no_grad():
            for name, p in self._params.items():
                value = torch.as_tensor(arrays[f"param/{name}"], dtype=DTYPE)
                if tuple(value.shape) != tuple(p.shape):
                    raise ShapeError(f"{name}: checkpoint shape {tuple(value.shape)} != {tuple(p.shape)}")
                p.copy_(value)
                key = f"adam/{name}/exp_avg"
                if key in arrays:
                    self.optimizer.state[p] = {
                        "step": torch.tensor(float(arrays[f"adam/{name}/step"]), dtype=torch.float32),
                        "exp_avg": torch.as_tensor(arrays[key], dtype=DTYPE).clone(),
                        "exp_avg_sq": torch.as_tensor(arrays[f"adam/{name}/exp_avg_sq"], dtype=DTYPE).clone(),
                    }
                else:
                    self.optimizer.state.pop(p, None)

    def save(self, path, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
        arrays = self.arrays()
        arrays.update(extra or {})
        arrays["__format__"] = np.asarray(CHECKPOINT_FORMAT)
        arrays["__meta__"] = np.asarray(json.dumps(meta or {}, sort_keys=True))
        path = Path(path)
        with path.open("wb") as fh:
            np.savez(fh, **arrays)

    def load(self, path) -> tuple[dict, dict[str, np.ndarray]]:
        arrays, meta = read_checkpoint(path)
        self.load_arrays(arrays)
        return meta, arrays


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    fmt = str(arrays.pop("__format__", ""))
    if fmt != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {fmt!r}")
    meta = json.loads(str(arrays.pop("__meta__")))
    return arrays, meta


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def dropout(x: Tensor, rate: float, training: bool, generator: torch.Generator | None = None) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=DTYPE) >= rate
    return x * keep / (1.0 - rate)
