"""Classifier architectures (mlp, cnn-small) and cross-entropy losses.

Parameters live in a single flat float64 vector; the layer layout is
fixed (per layer: weight then bias, in forward order) so the final
linear layer always occupies the trailing block of the vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .tensor import DTYPE, ShapeMismatchError, Tape

CHECKPOINT_MAGIC = "advcoreset-checkpoint v1"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor.

    arch 'mlp': dense relu stack input_dim -> hidden... -> classes.
    arch 'cnn-small': conv3x3/relu/pool twice, then two dense layers;
    input is a flattened (channels, height, width) image.
    """

    arch: str
    input_dim: int
    classes: int
    hidden: tuple[int, ...] = (64, 64)
    image_shape: tuple[int, int, int] | None = None
    conv_channels: tuple[int, int] = (8, 16)
    fc_width: int = 64

    def __post_init__(self):
        if self.arch not in ("mlp", "cnn-small"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.arch == "cnn-small":
            if self.image_shape is None:
                raise ValueError("cnn-small requires image_shape")
            c, h, w = self.image_shape
            if c * h * w != self.input_dim:
                raise ValueError("image_shape inconsistent with input_dim")

    # -- layer bookkeeping -------------------------------------------------

    def layer_dims(self) -> list[tuple[str, tuple]]:
        """[(kind, shape-info)] in forward order; used for init and slicing."""
        if self.arch == "mlp":
            dims = []
            prev = self.input_dim
            for hdim in self.hidden:
                dims.append(("linear", (prev, hdim)))
                prev = hdim
            dims.append(("linear", (prev, self.classes)))
            return dims
        c, h, w = self.image_shape
        c1, c2 = self.conv_channels
        dims = [("conv", (c1, c, 3, 3))]
        h, w = (h - 2) // 2, (w - 2) // 2
        dims.append(("conv", (c2, c1, 3, 3)))
        h, w = (h - 2) // 2, (w - 2) // 2
        flat = c2 * h * w
        dims.append(("linear", (flat, self.fc_width)))
        dims.append(("linear", (self.fc_width, self.classes)))
        return dims

    def param_count(self) -> int:
        total = 0
        for kind, shape in self.layer_dims():
            if kind == "linear":
                fan_in, fan_out = shape
                total += fan_in * fan_out + fan_out
            else:
                oc, ic, kh, kw = shape
                total += oc * ic * kh * kw + oc
        return total

    def last_layer_slice(self) -> slice:
        """Slice of the flat parameter vector holding the final linear layer."""
        fan_in, fan_out = self.layer_dims()[-1][1]
        size = fan_in * fan_out + fan_out
        return slice(self.param_count() - size, self.param_count())


@dataclass
class ModelState:
    spec: ModelSpec
    theta: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=DTYPE)
        if self.theta.shape != (self.spec.param_count(),):
            raise ValueError(
                f"theta has {self.theta.size} entries, spec implies {self.spec.param_count()}"
            )


def init(spec: ModelSpec, seed: int) -> ModelState:
    """Scaled-uniform fan-in init, deterministic given (spec, seed)."""
    rng = np.random.default_rng(seed)
    chunks = []
    for kind, shape in spec.layer_dims():
        if kind == "linear":
            fan_in, fan_out = shape
            n_w, n_b = fan_in * fan_out, fan_out
        else:
            oc, ic, kh, kw = shape
            fan_in = ic * kh * kw
            n_w, n_b = oc * fan_in, oc
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=n_w + n_b))
    return ModelState(spec=spec, theta=np.concatenate(chunks), seed=seed)


def _unflatten(spec: ModelSpec, theta: np.ndarray) -> list[tuple[str, np.ndarray, np.ndarray]]:
    params = []
    pos = 0
    for kind, shape in spec.layer_dims():
        if kind == "linear":
            fan_in, fan_out = shape
            w = theta[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = theta[pos:pos + fan_out]
            pos += fan_out
        else:
            oc, ic, kh, kw = shape
            w = theta[pos:pos + oc * ic * kh * kw].reshape(oc, ic, kh, kw)
            pos += oc * ic * kh * kw
            b = theta[pos:pos + oc]
            pos += oc
        params.append((kind, w, b))
    return params


def _as_batch(spec: ModelSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeMismatchError(
            f"input has shape {x.shape}, model expects {spec.input_dim} features"
        )
    return x, single


def forward(state: ModelState, x: np.ndarray, tape: Tape | None = None) -> tuple[np.ndarray, Tape]:
    """Logits plus a tape replayable for one backward pass.

    Accepts a single sample (d,) or a batch (n, d); logits come back with
    matching rank.
    """
    x, single = _as_batch(state.spec, x)
    if tape is None:
        tape = Tape()
    out = _run_layers(state, x, tape)
    tensor._check_finite("logits", out)
    return (out[0] if single else out), tape


def logits(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Forward pass without recording a tape."""
    x, single = _as_batch(state.spec, x)
    out = _run_layers(state, x, None)
    return out[0] if single else out


def _run_layers(state: ModelState, x: np.ndarray, tape: Tape | None) -> np.ndarray:
    params = _unflatten(state.spec, state.theta)
    if state.spec.arch == "cnn-small":
        c, h, w = state.spec.image_shape
        shape4 = (x.shape[0], c, h, w)
        cur = x.reshape(shape4)
        if tape is not None:
            def backward(g):
                return g.reshape(x.shape), []
            tape.record(backward)
        for idx, (kind, wgt, b) in enumerate(params):
            if kind == "conv":
                cur = tensor.conv2d(cur, wgt, b, tape)
                cur = tensor.relu(cur, tape)
                cur = tensor.maxpool2(cur, tape)
            else:
                if cur.ndim == 4:
                    cur = tensor.flatten(cur, tape)
                cur = tensor.linear(cur, wgt, b, tape)
                if idx < len(params) - 1:
                    cur = tensor.relu(cur, tape)
        return cur
    cur = x
    for idx, (kind, wgt, b) in enumerate(params):
        cur = tensor.linear(cur, wgt, b, tape)
        if idx < len(params) - 1:
            cur = tensor.relu(cur, tape)
    return cur


def penultimate(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Activations feeding the final linear layer (no tape)."""
    x, single = _as_batch(state.spec, x)
    params = _unflatten(state.spec, state.theta)
    if state.spec.arch == "cnn-small":
        c, h, w = state.spec.image_shape
        cur = x.reshape(x.shape[0], c, h, w)
        for idx, (kind, wgt, b) in enumerate(params[:-1]):
            if kind == "conv":
                cur = tensor.maxpool2(tensor.relu(tensor.conv2d(cur, wgt, b, None), None), None)
            else:
                if cur.ndim == 4:
                    cur = tensor.flatten(cur, None)
                cur = tensor.relu(tensor.linear(cur, wgt, b, None), None)
    else:
        cur = x
        for kind, wgt, b in params[:-1]:
            cur = tensor.relu(tensor.linear(cur, wgt, b, None), None)
        if cur.ndim == 4:
            cur = tensor.flatten(cur, None)
    return cur[0] if single else cur


# ---------------------------------------------------------------------------
# Losses. Scalar forms take one logit vector; *_batch forms take (n, k)
# rows and return per-sample vectors.
# ---------------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def ce_loss(z: np.ndarray, label: int) -> float:
    z = np.asarray(z, dtype=DTYPE)
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} out of range for {z.shape[-1]} classes")
    return float(-log_softmax(z)[label])


def ce_loss_batch(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= z.shape[-1]:
        raise ValueError("label out of range")
    return -log_softmax(z)[np.arange(z.shape[0]), labels]


def ce_soft_loss(z: np.ndarray, target_logits: np.ndarray) -> float:
    z = np.asarray(z, dtype=DTYPE)
    t = np.asarray(target_logits, dtype=DTYPE)
    if z.shape != t.shape:
        raise ValueError(f"logit length {z.shape} vs target length {t.shape}")
    return float(-(softmax(t) * log_softmax(z)).sum())


def ce_soft_loss_batch(z: np.ndarray, target_logits: np.ndarray) -> np.ndarray:
    if z.shape != target_logits.shape:
        raise ValueError("shape mismatch between logits and target logits")
    return -(softmax(target_logits) * log_softmax(z)).sum(axis=-1)


def onehot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.atleast_1d(labels)
    out = np.zeros((labels.shape[0], k), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: utf-8 header (spec + seed as key = value lines,
# terminated by "---"), then the parameters as little-endian float32.
# ---------------------------------------------------------------------------

def save_checkpoint(state: ModelState, path: str) -> None:
    lines = [CHECKPOINT_MAGIC,
             f"arch = {state.spec.arch}",
             f"input_dim = {state.spec.input_dim}",
             f"classes = {state.spec.classes}",
             f"hidden = {','.join(map(str, state.spec.hidden))}",
             f"seed = {state.seed}",
             f"params = {state.theta.size}"]
    if state.spec.image_shape is not None:
        lines.append(f"image_shape = {','.join(map(str, state.spec.image_shape))}")
        lines.append(f"conv_channels = {','.join(map(str, state.spec.conv_channels))}")
        lines.append(f"fc_width = {state.spec.fc_width}")
    lines.append("---\n")
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("utf-8"))
        fh.write(state.theta.astype("<f4").tobytes())


def load_checkpoint(path: str) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = b"---\n"
    idx = blob.find(sep)
    if idx < 0:
        raise ValueError(f"{path}: not a model checkpoint (missing header terminator)")
    header = blob[:idx].decode("utf-8").splitlines()
    if not header or header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    kv = {}
    for line in header[1:]:
        if line.strip():
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
    spec_kwargs = dict(
        arch=kv["arch"],
        input_dim=int(kv["input_dim"]),
        classes=int(kv["classes"]),
        hidden=tuple(int(s) for s in kv["hidden"].split(",") if s),
    )
    if "image_shape" in kv:
        spec_kwargs["image_shape"] = tuple(int(s) for s in kv["image_shape"].split(","))
        spec_kwargs["conv_channels"] = tuple(int(s) for s in kv["conv_channels"].split(","))
        spec_kwargs["fc_width"] = int(kv["fc_width"])
    spec = ModelSpec(**spec_kwargs)
    raw = blob[idx + len(sep):]
    theta = np.frombuffer(raw, dtype="<f4").astype(DTYPE)
    if theta.size != int(kv["params"]):
        raise ValueError(
            f"{path}: truncated checkpoint ({theta.size} of {kv['params']} parameters)"
        )
    return ModelState(spec=spec, theta=theta, seed=int(kv.get("seed", 0)))
