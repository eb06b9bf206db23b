"""Small convolutional encoder + linear projection head in plain numpy.

Layers cache what they need on a ``Graph`` during ``forward``; ``backward``
walks the cache in reverse and fills the gradient slots of the
``ParameterSet``.  Internally activations are kept channels-last.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArchitectureMismatch, GraphNotEvaluated, MissingGradients, ShapeMismatch
from .raster import PathLike

EPS = 1e-12
DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    height: int = 64
    width: int = 64
    stages: tuple[tuple[int, int, int], ...] = ((16, 3, 2), (32, 3, 2), (64, 3, 2))  # (out, kernel, stride)
    output_dim: int = 8

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))

    @property
    def representation_dim(self) -> int:
        return self.stages[-1][0] if self.stages else self.in_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class ParameterSet:
    """Named weight tensors with matching gradient slots."""

    def __init__(self, values: dict[str, np.ndarray]):
        self.values = dict(values)
        self.grads: dict[str, Optional[np.ndarray]] = dict.fromkeys(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __len__(self) -> int:
        return len(self.values)

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values.values())

    @property
    def dtype(self):
        return next(iter(self.values.values())).dtype

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.values.items()})

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: v.astype(dtype) for k, v in self.values.items()})

    def zero_grad(self) -> None:
        self.grads = dict.fromkeys(self.values)

    def has_grads(self) -> bool:
        return any(g is not None for g in self.grads.values())

    def check_compatible(self, other: "ParameterSet") -> None:
        if list(self.values) != list(other.values):
            raise ArchitectureMismatch("parameter names differ")
        for k, v in self.values.items():
            if v.shape != other.values[k].shape:
                raise ArchitectureMismatch(f"{k}: shape {v.shape} != {other.values[k].shape}")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.values.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()])


def init_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> ParameterSet:
    """He-normal convolutions, zero biases, 1/sqrt(D) head."""
    values = {}
    c_in = cfg.in_channels
    for i, (c_out, k, _) in enumerate(cfg.stages):
        std = np.sqrt(2.0 / (c_in * k * k))
        values[f"conv{i}.weight"] = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)
        values[f"conv{i}.bias"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    d = cfg.representation_dim
    values["head.weight"] = (rng.standard_normal((d, cfg.output_dim)) / np.sqrt(d)).astype(dtype)
    values["head.bias"] = np.zeros(cfg.output_dim, dtype=dtype)
    return ParameterSet(values)


def zero_params(cfg: EncoderConfig, dtype=np.float64) -> ParameterSet:
    p = init_params(cfg, np.random.default_rng(0), dtype)
    return ParameterSet({k: np.zeros_like(v) for k, v in p.values.items()})


@dataclass
class Graph:
    """Forward results plus the per-layer cache needed by ``backward``."""

    params: ParameterSet
    cfg: EncoderConfig
    h: np.ndarray
    logits: np.ndarray
    caches: list = field(default_factory=list, repr=False)
    recorded: bool = True


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int):
    """x: (B, H, W, C) -> (B, Ho, Wo, O); returns the im2col matrix as cache."""
    o, c, k, _ = weight.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    b, ho, wo = win.shape[:3]
    cols = win.reshape(b * ho * wo, c * k * k)
    out = cols @ weight.reshape(o, -1).T + bias
    return out.reshape(b, ho, wo, o), (cols, xp.shape, stride, k, pad)


def _conv_backward(dout: np.ndarray, weight: np.ndarray, cache):
    cols, xp_shape, stride, k, pad = cache
    b, ho, wo, o = dout.shape
    c = weight.shape[1]
    dflat = dout.reshape(-1, o)
    dweight = (dflat.T @ cols).reshape(weight.shape)
    dbias = dflat.sum(axis=0)
    dcols = (dflat @ weight.reshape(o, -1)).reshape(b, ho, wo, c, k, k)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dcols[
                ..., i, j
            ]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return dxp, dweight, dbias


def forward(params: ParameterSet, cfg: EncoderConfig, batch: np.ndarray, record: bool = True) -> Graph:
    """Encoder representation h and pre-softmax head logits for a (B, 3, H, W) batch."""
    batch = np.asarray(batch)
    expected = (cfg.in_channels, cfg.height, cfg.width)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeMismatch(f"batch shape {batch.shape} does not match (B, {expected})")
    x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=params.dtype)
    caches = []
    for i, (_, _, stride) in enumerate(cfg.stages):
        z, cache = _conv_forward(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride)
        x = np.maximum(z, 0)
        if record:
            caches.append((cache, z > 0))
    spatial = x.shape[1] * x.shape[2]
    h = x.sum(axis=(1, 2)) / spatial
    logits = h @ params["head.weight"] + params["head.bias"]
    if record:
        caches.append((x.shape, h))
    return Graph(params, cfg, h, logits, caches, record)


def backward(graph: Graph, grad_logits: np.ndarray, grad_h: Optional[np.ndarray] = None, _relu_mask: bool = True) -> None:
    """Accumulate d(loss)/d(theta) into ``graph.params.grads``.

    ``_relu_mask=False`` deliberately breaks the ReLU derivative; it exists
    only so the gradient checker can prove it catches a real bug.
    """
    if not graph.recorded or not graph.caches:
        raise GraphNotEvaluated("backward needs a recorded forward pass")
    params = graph.params
    dtype = params.dtype
    grad_logits = np.asarray(grad_logits, dtype=dtype)
    act_shape, h = graph.caches[-1]
    grads = {
        "head.weight": h.T @ grad_logits,
        "head.bias": grad_logits.sum(axis=0),
    }
    dh = grad_logits @ params["head.weight"].T
    if grad_h is not None:
        dh = dh + grad_h
    spatial = act_shape[1] * act_shape[2]
    dx = np.broadcast_to((dh / spatial)[:, None, None, :], act_shape)
    for i in reversed(range(len(graph.cfg.stages))):
        cache, mask = graph.caches[i]
        dz = dx * mask if _relu_mask else np.array(dx)
        dx, dw, db = _conv_backward(dz, params[f"conv{i}.weight"], cache)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    for name, g in grads.items():
        prev = params.grads[name]
        params.grads[name] = g if prev is None else prev + g
    graph.caches = []
    graph.recorded = False


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(s: np.ndarray, grad_s: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    return s * (grad_s - (grad_s * s).sum(axis=-1, keepdims=True))


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    return x[np.newaxis] if x.ndim == 1 else x


def entropy(a) -> float:
    a = _rows(a)
    terms = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    return float(-terms.sum(axis=-1).mean())


def loss_supervised(a, s) -> float:
    """Cross-entropy of softmax outputs ``s`` against proportions ``a``, batch mean."""
    a, s = _rows(a), _rows(s)
    return float(-(a * np.log(np.maximum(s, EPS))).sum(axis=-1).mean())


def loss_supervised_grad(a, s) -> np.ndarray:
    a, s = _rows(a), _rows(s)
    return -a / np.maximum(s, EPS) / a.shape[0]


def loss_kl(a, s) -> float:
    a, s = _rows(a), _rows(s)
    safe_a = np.where(a > 0, a, 1.0)
    terms = np.where(a > 0, a * (np.log(safe_a) - np.log(np.maximum(s, EPS))), 0.0)
    return float(terms.sum(axis=-1).mean())


def loss_kl_grad(a, s) -> np.ndarray:
    # the A log A term does not depend on s
    return loss_supervised_grad(a, s)


def loss_consistency(s, t) -> float:
    """Student/teacher term; ``t`` is treated as a constant."""
    s, t = _rows(s), _rows(t)
    return float(-(s * np.log(np.maximum(t, EPS))).sum(axis=-1).mean())


def loss_consistency_grad(s, t) -> np.ndarray:
    s, t = _rows(s), _rows(t)
    return -np.log(np.maximum(t, EPS)) / s.shape[0] * np.ones_like(s)


def loss_total(loss_s: float, loss_t: float, gamma1: float = 1.0, gamma2: float = 1.0) -> float:
    return gamma1 * loss_s + gamma2 * loss_t


def sgd_step(params: ParameterSet, lr: float) -> ParameterSet:
    missing = [k for k, g in params.grads.items() if g is None]
    if missing:
        raise MissingGradients(f"no gradient for {', '.join(missing)}")
    for k, g in params.grads.items():
        v = params.values[k]
        v -= (lr * g).astype(v.dtype, copy=False)
    params.zero_grad()
    return params


def objective_grad(
    graph: Graph,
    targets: np.ndarray,
    teacher_probs: Optional[np.ndarray] = None,
    gamma1: float = 1.0,
    gamma2: float = 1.0,
) -> tuple[dict, np.ndarray]:
    """Loss terms and d(loss)/d(logits) for gamma1 * L_s + gamma2 * L_t."""
    s = softmax(graph.logits)
    ls = loss_supervised(targets, s)
    grad_s = gamma1 * loss_supervised_grad(targets, s)
    lt = 0.0
    if teacher_probs is not None:
        lt = loss_consistency(s, teacher_probs)
        grad_s = grad_s + gamma2 * loss_consistency_grad(s, teacher_probs)
    terms = {"loss_s": ls, "loss_t": lt, "loss_total": loss_total(ls, lt, gamma1, gamma2 if teacher_probs is not None else 0.0)}
    return terms, softmax_backward(s, grad_s)


def _sample_indices(params: ParameterSet, n_samples: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    """At least a few entries from every tensor, the rest uniform over all weights."""
    chosen: list[tuple[str, int]] = []
    for name, v in params.values.items():
        k = min(v.size, 4)
        chosen.extend((name, int(i)) for i in rng.choice(v.size, size=k, replace=False))
    taken = set(chosen)
    offsets = np.cumsum([0] + [v.size for v in params.values.values()])
    names = params.names()
    remaining = max(0, n_samples - len(chosen))
    for flat in rng.permutation(params.size):
        if remaining == 0:
            break
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        key = (names[t], int(flat - offsets[t]))
        if key not in taken:
            taken.add(key)
            chosen.append(key)
            remaining -= 1
    return chosen


def finite_diff_check(
    params: ParameterSet,
    cfg: EncoderConfig,
    batch: np.ndarray,
    targets: np.ndarray,
    n_samples: int = 200,
    eps: float = 1e-5,
    seed: int = 0,
    teacher_probs: Optional[np.ndarray] = None,
    mutation: Optional[str] = None,
) -> dict:
    """Compare backward against central differences on sampled weights.

    Returns ``{"max_rel_error", "n_checked", "n_kinks", "worst"}``.  Relative
    error is ``|a - n| / max(|a|, |n|)``, taken as 0 when both are below
    1e-12.  A weight whose +/-eps perturbation flips any ReLU is at a kink
    where central differences are meaningless; it is counted and replaced by
    another sample.
    """
    if params.dtype != np.float64:
        raise ValueError("finite-difference checking needs float64 parameters")
    if mutation not in (None, "relu_mask"):
        raise ValueError(f"unknown mutation {mutation!r}")
    params = params.copy()

    def loss_at() -> tuple[float, list]:
        g = forward(params, cfg, batch)
        s = softmax(g.logits)
        value = loss_supervised(targets, s)
        if teacher_probs is not None:
            value += loss_consistency(s, teacher_probs)
        return value, [mask for _, mask in g.caches[:-1]]

    graph = forward(params, cfg, batch)
    pattern = [mask for _, mask in graph.caches[:-1]]
    _, dlogits = objective_grad(graph, targets, teacher_probs)
    backward(graph, dlogits, _relu_mask=mutation is None)
    analytic = {k: g.copy() for k, g in params.grads.items()}
    params.zero_grad()

    def same_pattern(other: list) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(pattern, other))

    rng = np.random.default_rng(seed)
    worst, worst_at = 0.0, None
    checked = kinks = 0
    for name, i in _sample_indices(params, 2 * n_samples, rng):
        if checked == n_samples:
            break
        flat = params.values[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up, up_pattern = loss_at()
        flat[i] = orig - eps
        down, down_pattern = loss_at()
        flat[i] = orig
        if not (same_pattern(up_pattern) and same_pattern(down_pattern)):
            kinks += 1
            continue
        checked += 1
        numeric = (up - down) / (2 * eps)
        a = float(analytic[name].reshape(-1)[i])
        scale = max(abs(a), abs(numeric))
        rel = 0.0 if scale < 1e-12 else abs(a - numeric) / scale
        if rel > worst:
            worst, worst_at = rel, (name, i, a, numeric)
    return {"max_rel_error": worst, "n_checked": checked, "n_kinks": kinks, "worst": worst_at}


def save_checkpoint(
    params: ParameterSet,
    cfg: EncoderConfig,
    path: PathLike,
    step: int = 0,
    extra: Optional[dict] = None,
) -> Path:
    """Write ``<path>.ck.json`` + ``<path>.ck.blob``; returns the manifest path."""
    stem = _ck_stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    precision = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}[np.dtype(params.dtype)]
    manifest = {
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in params.values.items()],
        "precision": precision,
        "encoder": cfg.to_dict(),
        "step": step,
    }
    if extra:
        manifest.update(extra)
    blob = b"".join(np.ascontiguousarray(v, dtype=np.dtype(params.dtype).newbyteorder("<")).tobytes() for v in params.values.values())
    blob_path = stem.with_name(stem.name + ".ck.blob")
    blob_path.write_bytes(blob)
    json_path = stem.with_name(stem.name + ".ck.json")
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return json_path


def load_checkpoint(path: PathLike) -> tuple[ParameterSet, EncoderConfig, dict]:
    stem = _ck_stem(path)
    manifest = json.loads(stem.with_name(stem.name + ".ck.json").read_text())
    dtype = np.dtype(DTYPES[manifest["precision"]]).newbyteorder("<")
    blob = stem.with_name(stem.name + ".ck.blob").read_bytes()
    values, pos = {}, 0
    for entry in manifest["parameters"]:
        n = int(np.prod(entry["shape"]))
        values[entry["name"]] = np.frombuffer(blob, dtype=dtype, count=n, offset=pos).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        pos += n * dtype.itemsize
    if pos != len(blob):
        raise ValueError(f"checkpoint blob has {len(blob)} bytes, manifest implies {pos}")
    return ParameterSet(values), EncoderConfig.from_dict(manifest["encoder"]), manifest


def _ck_stem(path: PathLike) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".ck.json", ".ck.blob"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def encode(params: ParameterSet, cfg: EncoderConfig, batch: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Representations h for a large batch, evaluated in chunks without caching."""
    out = [forward(params, cfg, batch[i : i + chunk], record=False).h for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros((0, cfg.representation_dim), dtype=params.dtype)


def onehot(labels: Sequence[int], n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return out
