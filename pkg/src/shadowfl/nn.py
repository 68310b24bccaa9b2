"""Small numpy networks: an MLP, a two-conv-layer image model, and the
fixed-head two-layer network used for the early-stopping analysis.

Parameters live in one flat float64 vector; :class:`ModelSpec` knows how to
slice it into named tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

ARCHITECTURES = ("mlp", "conv_small", "two_layer_fixed_head")
ACTIVATIONS = ("relu", "smooth_relu")


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``widths`` lists layer sizes starting at the input dimension. For
    ``mlp`` it is ``(d_in, hidden..., n_classes)``. For ``conv_small`` only
    ``(d_in, dense_width, n_classes)`` is used, with the convolution stack
    fixed at 8 and 16 filters. For ``two_layer_fixed_head`` it is
    ``(d_in, hidden)``; the model outputs one real value.
    """

    arch: str
    widths: tuple[int, ...]
    n_classes: int
    activation: str = "relu"
    image_shape: tuple[int, int, int] | None = None
    dropout: float = 0.25
    conv_filters: tuple[int, int] = (8, 16)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.arch == "mlp":
            if len(self.widths) < 2 or self.widths[-1] != self.n_classes:
                raise ValueError("mlp widths must end with n_classes")
        elif self.arch == "two_layer_fixed_head":
            if len(self.widths) != 2:
                raise ValueError("two_layer_fixed_head widths are (d_in, hidden)")
            if self.widths[1] % 2:
                raise ValueError("two_layer_fixed_head needs an even hidden width")
        elif self.arch == "conv_small":
            if self.image_shape is None:
                raise ValueError("conv_small needs image_shape")
            h, w, c = self.image_shape
            if h * w * c != self.widths[0]:
                raise ValueError("image_shape does not match input width")
            if len(self.widths) != 3 or self.widths[-1] != self.n_classes:
                raise ValueError("conv_small widths are (d_in, dense, n_classes)")

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def representation_dim(self) -> int:
        if self.arch == "conv_small":
            return self.widths[1]
        return self.widths[-2] if self.arch == "mlp" else self.widths[1]

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.arch == "mlp":
            out = []
            for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
                out += [(f"w{i}", (a, b)), (f"b{i}", (b,))]
            return out
        if self.arch == "two_layer_fixed_head":
            return [("w", (self.widths[1], self.widths[0]))]
        h, w, c = self.image_shape
        f1, f2 = self.conv_filters
        flat = _conv_flat_dim(h, w, f2)
        return [
            ("c1_w", (3, 3, c, f1)), ("c1_b", (f1,)),
            ("c2_w", (3, 3, f1, f2)), ("c2_b", (f2,)),
            ("d1_w", (flat, self.widths[1])), ("d1_b", (self.widths[1],)),
            ("d2_w", (self.widths[1], self.n_classes)), ("d2_b", (self.n_classes,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(prod(s) for _, s in self.shapes)

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {flat.shape}")
        out, pos = {}, 0
        for name, shape in self.shapes:
            size = prod(shape)
            out[name] = flat[pos:pos + size].reshape(shape)
            pos += size
        return out

    def head(self) -> np.ndarray:
        """Fixed output weights of the two-layer model: +1/sqrt(M) then -1/sqrt(M)."""
        m = self.widths[1]
        v = np.full(m, 1.0 / np.sqrt(m))
        v[m // 2:] *= -1.0
        return v

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "widths": list(self.widths),
            "n_classes": self.n_classes,
            "activation": self.activation,
            "image_shape": list(self.image_shape) if self.image_shape else None,
            "dropout": self.dropout,
            "conv_filters": list(self.conv_filters),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            arch=d["arch"],
            widths=tuple(d["widths"]),
            n_classes=d["n_classes"],
            activation=d.get("activation", "relu"),
            image_shape=tuple(d["image_shape"]) if d.get("image_shape") else None,
            dropout=d.get("dropout", 0.25),
            conv_filters=tuple(d.get("conv_filters", (8, 16))),
        )


def _conv_flat_dim(h: int, w: int, filters: int) -> int:
    h1, w1 = (h - 2) // 2, (w - 2) // 2
    h2, w2 = (h1 - 2) // 2, (w1 - 2) // 2
    return h2 * w2 * filters


def mlp_spec(input_dim: int, n_classes: int, hidden: tuple[int, ...] = (128,)) -> ModelSpec:
    return ModelSpec("mlp", (input_dim, *hidden, n_classes), n_classes)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.inputs) == 0 or len(self.inputs) != len(self.labels):
            raise ValueError("batch must be nonempty with one label per input")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class RepresentationPenalty:
    """Evasion term: pull representations of ``mask`` rows toward ``target``.

    The combined objective is ``gamma * CE + (1 - gamma) * mean ||r_i - target||^2``
    over masked rows.
    """

    gamma: float
    mask: np.ndarray
    target: np.ndarray = field(repr=False)


# -- parameter initialisation -------------------------------------------------

def init_params(spec: ModelSpec, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in spec.shapes:
        if spec.arch == "two_layer_fixed_head":
            parts.append(rng.standard_normal(shape).ravel())
        elif name.endswith("_b") or name.startswith("b"):
            parts.append(np.zeros(prod(shape)))
        else:
            fan_in = prod(shape[:-1])
            parts.append(rng.standard_normal(prod(shape)) * np.sqrt(2.0 / fan_in))
    return np.concatenate(parts)


# -- activations ----------------------------------------------------------------

def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.logaddexp(0.0, z)


def _act_grad(z, kind):
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# -- convolution helpers ------------------------------------------------------

def _patches(x):
    # x: (n, h, w, c) -> (n, h-2, w-2, 3, 3, c) view of valid 3x3 windows
    n, h, w, c = x.shape
    s = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(n, h - 2, w - 2, 3, 3, c), strides=(s[0], s[1], s[2], s[1], s[2], s[3]),
        writeable=False,
    )


def _conv(x, w, b):
    n, h, wd, c = x.shape
    cols = _patches(x).reshape(n * (h - 2) * (wd - 2), 9 * c)
    out = cols @ w.reshape(9 * c, -1) + b
    return out.reshape(n, h - 2, wd - 2, -1), cols


def _conv_back(dout, cols, w, x_shape):
    n, h, wd, c = x_shape
    f = w.shape[-1]
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(9 * c, f).T).reshape(n, h - 2, wd - 2, 3, 3, c)
    dx = np.zeros(x_shape)
    for i in range(3):
        for j in range(3):
            dx[:, i:i + h - 2, j:j + wd - 2, :] += dcols[:, :, :, i, j, :]
    return dx, dw, db


def _pool(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xc = x[:, : 2 * h2, : 2 * w2, :].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    flat = xc.reshape(n, h2, w2, c, 4)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_back(dout, idx, x_shape):
    n, h, w, c = x_shape
    h2, w2 = h // 2, w // 2
    dflat = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
    dxc = dflat.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    dx = np.zeros(x_shape)
    dx[:, : 2 * h2, : 2 * w2, :] = dxc
    return dx


# -- forward / backward ---------------------------------------------------------

def _as_batch_inputs(spec, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"input width {x.shape[-1]} != {spec.input_dim}")
    return x, single


def _forward(params, spec, x, rng=None):
    p = spec.unflatten(params)
    act = spec.activation
    cache = {"x": x}
    if spec.arch == "mlp":
        n_layers = len(spec.widths) - 1
        h = x
        pre = []
        for i in range(n_layers - 1):
            z = h @ p[f"w{i}"] + p[f"b{i}"]
            pre.append((h, z))
            h = _act(z, act)
        cache["layers"] = pre
        cache["rep"] = h
        logits = h @ p[f"w{n_layers - 1}"] + p[f"b{n_layers - 1}"]
        return logits, h, cache
    if spec.arch == "two_layer_fixed_head":
        z = x @ p["w"].T
        h = _act(z, act)
        cache["z"] = z
        return (h @ spec.head())[:, None], h, cache
    hh, ww, cc = spec.image_shape
    img = x.reshape(-1, hh, ww, cc)
    z1, cols1 = _conv(img, p["c1_w"], p["c1_b"])
    a1 = _act(z1, act)
    p1, i1 = _pool(a1)
    z2, cols2 = _conv(p1, p["c2_w"], p["c2_b"])
    a2 = _act(z2, act)
    p2, i2 = _pool(a2)
    flat = p2.reshape(len(x), -1)
    mask = None
    if rng is not None and spec.dropout > 0:
        keep = 1.0 - spec.dropout
        mask = (rng.random(flat.shape) < keep) / keep
        flat = flat * mask
    z3 = flat @ p["d1_w"] + p["d1_b"]
    h = _act(z3, act)
    logits = h @ p["d2_w"] + p["d2_b"]
    cache.update(img=img, z1=z1, cols1=cols1, a1=a1, i1=i1, p1=p1, z2=z2, cols2=cols2,
                 a2=a2, i2=i2, p2=p2, flat=flat, mask=mask, z3=z3, rep=h)
    return logits, h, cache


def forward(params: np.ndarray, spec: ModelSpec, x: np.ndarray):
    """Logits and penultimate representation for one input or a batch (no dropout)."""
    xb, single = _as_batch_inputs(spec, x)
    logits, rep, _ = _forward(params, spec, xb)
    if single:
        return logits[0], rep[0]
    return logits, rep


def _backward(params, spec, cache, dlogits, drep=None):
    p = spec.unflatten(params)
    act = spec.activation
    g = {}
    if spec.arch == "mlp":
        n_layers = len(spec.widths) - 1
        last = n_layers - 1
        h = cache["rep"]
        g[f"w{last}"] = h.T @ dlogits
        g[f"b{last}"] = dlogits.sum(axis=0)
        dh = dlogits @ p[f"w{last}"].T
        if drep is not None:
            dh = dh + drep
        for i in range(last - 1, -1, -1):
            h_in, z = cache["layers"][i]
            dz = dh * _act_grad(z, act)
            g[f"w{i}"] = h_in.T @ dz
            g[f"b{i}"] = dz.sum(axis=0)
            if i:
                dh = dz @ p[f"w{i}"].T
    elif spec.arch == "two_layer_fixed_head":
        dh = dlogits @ spec.head()[None, :]
        if drep is not None:
            dh = dh + drep
        dz = dh * _act_grad(cache["z"], act)
        g["w"] = dz.T @ cache["x"]
    else:
        h = cache["rep"]
        g["d2_w"] = h.T @ dlogits
        g["d2_b"] = dlogits.sum(axis=0)
        dh = dlogits @ p["d2_w"].T
        if drep is not None:
            dh = dh + drep
        dz3 = dh * _act_grad(cache["z3"], act)
        g["d1_w"] = cache["flat"].T @ dz3
        g["d1_b"] = dz3.sum(axis=0)
        dflat = dz3 @ p["d1_w"].T
        if cache["mask"] is not None:
            dflat = dflat * cache["mask"]
        dp2 = dflat.reshape(cache["p2"].shape)
        da2 = _pool_back(dp2, cache["i2"], cache["a2"].shape)
        dz2 = da2 * _act_grad(cache["z2"], act)
        dp1, g["c2_w"], g["c2_b"] = _conv_back(dz2, cache["cols2"], p["c2_w"], cache["p1"].shape)
        da1 = _pool_back(dp1, cache["i1"], cache["a1"].shape)
        dz1 = da1 * _act_grad(cache["z1"], act)
        _, g["c1_w"], g["c1_b"] = _conv_back(dz1, cache["cols1"], p["c1_w"], cache["img"].shape)
    return np.concatenate([g[name].ravel() for name, _ in spec.shapes])


def label_values(n_classes: int) -> np.ndarray:
    """Real-valued regression targets for classes, evenly spaced over [-1, 1]."""
    return np.linspace(-1.0, 1.0, n_classes)


def loss_grad(params: np.ndarray, spec: ModelSpec, batch: Batch, rng=None,
              penalty: RepresentationPenalty | None = None) -> tuple[float, np.ndarray]:
    """Mean loss over ``batch`` and its exact gradient.

    Softmax cross-entropy for classifiers; ``0.5 * (f(x) - y)^2`` for the
    two-layer model, with class indices mapped through :func:`label_values`.
    ``rng`` enables dropout (conv_small only).
    """
    x, _ = _as_batch_inputs(spec, batch.inputs)
    y = np.asarray(batch.labels)
    n = len(y)
    logits, rep, cache = _forward(params, spec, x, rng)
    if spec.arch == "two_layer_fixed_head":
        if np.issubdtype(y.dtype, np.integer):
            target = label_values(spec.n_classes)[y]
        else:
            target = y.astype(np.float64)
        resid = logits[:, 0] - target
        loss = 0.5 * float(np.mean(resid ** 2))
        dlogits = (resid / n)[:, None]
    else:
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted - logz[:, None]
        loss = -float(np.mean(logp[np.arange(n), y]))
        probs = np.exp(logp)
        probs[np.arange(n), y] -= 1.0
        dlogits = probs / n
    drep = None
    if penalty is not None:
        gamma = float(penalty.gamma)
        mask = np.asarray(penalty.mask, dtype=bool)
        loss *= gamma
        dlogits = dlogits * gamma
        m = int(mask.sum())
        if m and gamma < 1.0:
            diff = rep[mask] - penalty.target
            loss += (1.0 - gamma) * float(np.sum(diff ** 2)) / m
            drep = np.zeros_like(rep)
            drep[mask] = (1.0 - gamma) * 2.0 * diff / m
    return loss, _backward(params, spec, cache, dlogits, drep)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if params.shape != grad.shape:
        raise DimensionMismatch("parameter and gradient shapes differ")
    return params - lr * grad


def predict(params: np.ndarray, spec: ModelSpec, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    """Class predictions for a batch of inputs."""
    x, _ = _as_batch_inputs(spec, x)
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), batch_size):
        logits, _, _ = _forward(params, spec, x[start:start + batch_size])
        if spec.arch == "two_layer_fixed_head":
            vals = label_values(spec.n_classes)
            out[start:start + batch_size] = np.argmin(np.abs(logits - vals[None, :]), axis=1)
        else:
            out[start:start + batch_size] = np.argmax(logits, axis=1)
    return out


def representations(params: np.ndarray, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x, _ = _as_batch_inputs(spec, x)
    return _forward(params, spec, x)[1]
