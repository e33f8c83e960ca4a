"""Parameter containers, dense/GRU layers, Adam, and checkpoint serialization.

Parameters live in a ParamSet: a name -> Tensor map with lexicographic
iteration order, so every reduction over parameters (gradient norms, Adam
sweeps, serialization) visits them in the same order on every run.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, ShapeError, UsageError
from .tensor import Tensor, gru_cell, linear

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_MAGIC = b"AEICKPT\x01"
_VERSION = 1


class ParamSet:
    """Named map of trainable tensors with stable (sorted) iteration."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise UsageError(f"parameter '{name}' already exists")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ShapeError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        for name in self.names():
            yield name, self._tensors[name]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def merged(self, other: "ParamSet") -> "ParamSet":
        """View-like union: shares the underlying tensors, not copies."""
        out = ParamSet()
        for name, t in self.items():
            out._tensors[name] = t
        for name, t in other.items():
            if name in out._tensors:
                raise UsageError(f"parameter '{name}' present in both sets")
            out._tensors[name] = t
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        for name, t in self.items():
            if name not in arrays:
                raise FormatError(f"missing tensor '{name}' in state")
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != t.data.shape:
                raise FormatError(
                    f"tensor '{name}' shape {a.shape} != expected {t.data.shape}"
                )
            t.data = a.copy()


class OptState:
    """Adam moment accumulators, one pair per parameter, plus a step count."""

    def __init__(self, params: ParamSet):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.step = 0


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal (rows, cols) matrix scaled by gain, seed-reproducible."""
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(params: ParamSet, prefix: str, sizes: list[int],
             rng: np.random.Generator, out_gain: float = 1.0):
    """Create w0/b0 ... for an MLP with the given layer widths.

    Hidden weights use orthogonal init with gain sqrt(2); the output layer
    uses out_gain. Biases start at zero.
    """
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        gain = out_gain if i == n_layers - 1 else np.sqrt(2.0)
        params.add(f"{prefix}w{i}", orthogonal(rng, sizes[i], sizes[i + 1], gain))
        params.add(f"{prefix}b{i}", np.zeros(sizes[i + 1]))


def forward_mlp(params: ParamSet, prefix: str, x: Tensor, n_layers: int) -> Tensor:
    """Affine-tanh stack with a linear final layer."""
    for i in range(n_layers):
        w = params[f"{prefix}w{i}"]
        if x.data.shape[-1] != w.data.shape[0]:
            raise ShapeError(
                f"layer '{prefix}w{i}': input width {x.data.shape[-1]} "
                f"!= expected {w.data.shape[0]}"
            )
        x = linear(x, w, params[f"{prefix}b{i}"], tanh_act=i < n_layers - 1)
    return x


def init_gru(params: ParamSet, prefix: str, in_dim: int, hid_dim: int,
             rng: np.random.Generator):
    """GRU weights: input matrices gain sqrt(2), recurrent orthogonal gain 1."""
    for gate in ("z", "r", "h"):
        params.add(f"{prefix}W{gate}", orthogonal(rng, in_dim, hid_dim, np.sqrt(2.0)))
        params.add(f"{prefix}U{gate}", orthogonal(rng, hid_dim, hid_dim, 1.0))
        params.add(f"{prefix}b{gate}", np.zeros(hid_dim))


def gru_step(params: ParamSet, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    """One GRU update:

        z = sigma(Wz x + Uz h + bz),  r = sigma(Wr x + Ur h + br)
        h' = (1 - z) * h + z * tanh(Wh x + Uh (r * h) + bh)
    """
    if x.data.shape[-1] != params[f"{prefix}Wz"].data.shape[0]:
        raise ShapeError(
            f"gru '{prefix}': input width {x.data.shape[-1]} != "
            f"{params[f'{prefix}Wz'].data.shape[0]}"
        )
    if h.data.shape[-1] != params[f"{prefix}Uz"].data.shape[0]:
        raise ShapeError(
            f"gru '{prefix}': hidden width {h.data.shape[-1]} != "
            f"{params[f'{prefix}Uz'].data.shape[0]}"
        )
    return gru_cell(
        x, h,
        params[f"{prefix}Wz"], params[f"{prefix}Uz"], params[f"{prefix}bz"],
        params[f"{prefix}Wr"], params[f"{prefix}Ur"], params[f"{prefix}br"],
        params[f"{prefix}Wh"], params[f"{prefix}Uh"], params[f"{prefix}bh"],
    )


def backward(loss: Tensor, params: ParamSet) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every parameter (zeros if unreachable)."""
    if loss.data.size != 1:
        raise UsageError("loss must be scalar")
    params.zero_grad()
    loss.backward()
    grads = {}
    for name, t in params.items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
    return grads


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so the global norm is at most max_norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for name in sorted(grads):
            grads[name] *= scale
    return norm


def adam_update(params: ParamSet, grads: dict[str, np.ndarray], opt: OptState,
                lr: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                eps: float = ADAM_EPS) -> tuple[ParamSet, OptState]:
    """Bias-corrected Adam step, applied in place."""
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter '{name}' shape {p.data.shape}"
            )
        m = opt.m[name]
        v = opt.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, opt


def grad_check(fn, params: ParamSet, eps: float = 1e-5, max_coords: int = 200,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn(params) must build and return a scalar loss Tensor deterministically.
    At most max_coords coordinates are probed, subsampled with rng.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    grads = backward(fn(params), params)
    coords = []
    for name, t in params.items():
        for idx in range(t.data.size):
            coords.append((name, idx))
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for name, idx in coords:
        t = params[name]
        orig = t.data.flat[idx]
        t.data.flat[idx] = orig + eps
        f_plus = fn(params).item()
        t.data.flat[idx] = orig - eps
        f_minus = fn(params).item()
        t.data.flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = grads[name].flat[idx]
        denom = max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def save_tensors(path, arrays: dict[str, np.ndarray]):
    """Write named float64 tensors in the versioned binary container.

    Layout: magic, version (u64 LE), count (u64 LE); then per tensor sorted
    by name: name length (u64 LE), UTF-8 name, rank (u64 LE), dims (u64 LE
    each), values (f64 LE, row-major). Round-trips bit-exactly.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", _VERSION))
        f.write(struct.pack("<Q", len(arrays)))
        for name in sorted(arrays):
            a = np.asarray(arrays[name], dtype="<f8")
            if a.ndim > 0 and not a.flags["C_CONTIGUOUS"]:
                a = np.ascontiguousarray(a)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<Q", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<Q", d))
            f.write(a.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a tensor container; raises FormatError on any malformation."""

    def read_exact(f, n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise FormatError(f"truncated checkpoint while reading {what}")
        return buf

    arrays = {}
    with open(path, "rb") as f:
        if read_exact(f, len(_MAGIC), "magic") != _MAGIC:
            raise FormatError("not a tensor checkpoint (bad magic)")
        version = struct.unpack("<Q", read_exact(f, 8, "version"))[0]
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        count = struct.unpack("<Q", read_exact(f, 8, "count"))[0]
        for _ in range(count):
            name_len = struct.unpack("<Q", read_exact(f, 8, "name length"))[0]
            name = read_exact(f, name_len, "name").decode("utf-8")
            rank = struct.unpack("<Q", read_exact(f, 8, f"rank of '{name}'"))[0]
            dims = tuple(
                struct.unpack("<Q", read_exact(f, 8, f"dims of '{name}'"))[0]
                for _ in range(rank)
            )
            n_values = int(np.prod(dims)) if dims else 1
            raw = read_exact(f, 8 * n_values, f"values of '{name}'")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
        if f.read(1):
            raise FormatError("trailing bytes after final tensor record")
    return arrays
