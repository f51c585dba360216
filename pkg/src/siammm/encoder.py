"""Small Siamese MLP with a momentum branch and exact hand-written backprop.

Online branch: backbone -> projector -> predictor -> L2 normalize.
Momentum branch: EMA copies of backbone and projector -> L2 normalize.
Everything is float64 and batched over rows.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_random_state
from .errors import DataFormatError, NumericalError, StaleTapeError

CHECKPOINT_MAGIC = b"SMMC"
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    relu: bool

    def copy(self):
        return Layer(self.W.copy(), self.b.copy(), self.relu)


class MlpStack:
    """A chain of affine layers, each optionally followed by ReLU."""

    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[0] != b.W.shape[1]:
                raise ValueError(f"layer shapes do not chain: {a.W.shape} -> {b.W.shape}")

    @classmethod
    def random(cls, dims, rng, relu_last=False):
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            relu = relu_last or i < len(dims) - 2
            scale = np.sqrt((2.0 if relu else 1.0) / fan_in)
            layers.append(Layer(rng.standard_normal((fan_out, fan_in)) * scale,
                                np.zeros(fan_out), relu))
        return cls(layers)

    @classmethod
    def looks_linear(cls, dims, rng, relu_last=False, mirrored_input=False, frame=None):
        """Mirrored init: every ReLU unit is paired with its negation.

        The stack starts out as an exact linear map that is isometric on the
        span of ``frame`` (orthonormal columns spanning where the inputs
        live; identity by default), so an untrained network keeps the
        angular geometry of its input.  That needs every hidden width to be
        at least twice the frame rank; narrower layers project instead.  ``mirrored_input`` says the input
        itself is such a pair (the output of a ReLU stack built this way).
        """
        return _looks_linear(cls, dims, rng, relu_last, mirrored_input, frame)[0]

    @property
    def in_dim(self):
        return self.layers[0].W.shape[1] if self.layers else None

    @property
    def out_dim(self):
        return self.layers[-1].W.shape[0] if self.layers else None

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def copy(self):
        return MlpStack([layer.copy() for layer in self.layers])

    def forward(self, X):
        cache = []
        h = X
        for layer in self.layers:
            z = h @ layer.W.T + layer.b
            cache.append((h, z))
            h = np.maximum(z, 0.0) if layer.relu else z
        return h, cache

    def backward(self, cache, g):
        """Return ``(param_grads, input_grad)`` given the upstream gradient."""
        grads = []
        for layer, (h, z) in zip(reversed(self.layers), reversed(cache)):
            if layer.relu:
                g = g * (z > 0.0)
            grads.append(g.sum(axis=0))
            grads.append(g.T @ h)
            g = g @ layer.W
        grads.reverse()
        return grads, g


def _looks_linear(cls, dims, rng, relu_last, mirrored_input, frame):
    if frame is None:
        frame = np.eye(dims[0] // 2 if mirrored_input else dims[0])
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        relu = relu_last or i < len(dims) - 2
        paired_in = mirrored_input or i > 0
        if (paired_in and fan_in % 2) or (relu and fan_out % 2):
            raise ValueError(f"looks-linear init needs even widths, got {dims}")
        # Map the occupied subspace isometrically onto a fresh random frame.
        new_frame = _semi_orthogonal(fan_out // 2 if relu else fan_out, frame.shape[1], rng)
        core = new_frame @ frame.T
        W = np.hstack([core, -core]) if paired_in else core
        if relu:
            W = np.vstack([W, -W])
        layers.append(Layer(W, np.zeros(fan_out), relu))
        frame = new_frame
    return cls(layers), frame


def _semi_orthogonal(rows, cols, rng):
    Q, R = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    Q = Q * np.sign(np.diag(R))
    return Q if rows >= cols else Q.T


def _normalize(P):
    norms = np.linalg.norm(P, axis=1, keepdims=True)
    return P / norms, norms


def _normalize_backward(V, norms, G):
    return (G - np.sum(G * V, axis=1, keepdims=True) * V) / norms


@dataclass
class SiameseNet:
    backbone: MlpStack
    projector: MlpStack
    predictor: MlpStack
    m_backbone: MlpStack
    m_projector: MlpStack
    m: float = 0.99
    step: int = 0
    velocity: list = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("EMA coefficient must lie in [0, 1]")
        shapes = [l.W.shape for s in (self.backbone, self.projector) for l in s.layers]
        m_shapes = [l.W.shape for s in (self.m_backbone, self.m_projector) for l in s.layers]
        if shapes != m_shapes:
            raise ValueError("momentum stack shapes must equal the online backbone+projector")

    @classmethod
    def build(cls, in_dim, hidden=64, embed_dim=16, pred_hidden=None, m=0.99, rng=None,
              init="looks_linear"):
        """``init`` is ``"looks_linear"`` (mirrored, geometry preserving) or ``"he"``."""
        rng = check_random_state(rng)
        pred_hidden = pred_hidden or hidden
        if init == "looks_linear":
            backbone, frame = _looks_linear(MlpStack, [in_dim, hidden, hidden], rng, True,
                                            False, None)
            projector, _ = _looks_linear(MlpStack, [hidden, hidden, embed_dim], rng, False,
                                         True, frame)
            predictor = MlpStack.looks_linear([embed_dim, pred_hidden, embed_dim], rng)
        elif init == "he":
            backbone = MlpStack.random([in_dim, hidden, hidden], rng, relu_last=True)
            projector = MlpStack.random([hidden, hidden, embed_dim], rng)
            predictor = MlpStack.random([embed_dim, pred_hidden, embed_dim], rng)
        else:
            raise ValueError(f"unknown init {init!r}")
        return cls(backbone, projector, predictor, backbone.copy(), projector.copy(), m=m)

    @property
    def online_stacks(self):
        return [self.backbone, self.projector, self.predictor]

    @property
    def momentum_stacks(self):
        return [self.m_backbone, self.m_projector]

    def parameters(self):
        return [p for s in self.online_stacks for p in s.parameters()]

    def momentum_parameters(self):
        return [p for s in self.momentum_stacks for p in s.parameters()]

    def embed(self, X, branch="momentum"):
        """Unit embeddings of raw inputs from either branch."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        stacks = self.momentum_stacks if branch == "momentum" else self.online_stacks
        h = X
        for s in stacks:
            h, _ = s.forward(h)
        return _normalize(h)[0]


@dataclass
class Tape:
    step: int
    views: list


def _check_input(net, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    first = next((s for s in net.online_stacks if s.layers), None)
    if first is not None and X.shape[1] != first.in_dim:
        raise ValueError(f"input has {X.shape[1]} features, network expects {first.in_dim}")
    return X


def forward(net, X1, X2):
    """Embed both views through both branches; returns ``(v1, v2, v1m, v2m, tape)``."""
    X1, X2 = _check_input(net, X1), _check_input(net, X2)
    if X1.shape != X2.shape:
        raise ValueError("the two views must have the same shape")
    outs, views = [], []
    for X in (X1, X2):
        h, caches = X, []
        for s in net.online_stacks:
            h, c = s.forward(h)
            caches.append(c)
        v, norms = _normalize(h)
        outs.append(v)
        views.append((caches, v, norms))
    moms = [net.embed(X, "momentum") for X in (X1, X2)]
    return outs[0], outs[1], moms[0], moms[1], Tape(net.step, views)


def backward(net, tape, grad_v1, grad_v2):
    """Gradients for every online parameter, aligned with ``net.parameters()``."""
    if tape.step != net.step:
        raise StaleTapeError(f"tape recorded at step {tape.step}, network is at {net.step}")
    total = [np.zeros_like(p) for p in net.parameters()]
    for (caches, v, norms), g in zip(tape.views, (grad_v1, grad_v2)):
        g = _normalize_backward(v, norms, np.asarray(g, dtype=np.float64).reshape(v.shape))
        per_stack = []
        for s, c in zip(reversed(net.online_stacks), reversed(caches)):
            grads, g = s.backward(c, g)
            per_stack.append(grads)
        flat = [p for grads in reversed(per_stack) for p in grads]
        for acc, gp in zip(total, flat):
            acc += gp
    return total


def momentum_update(net):
    for pm, p in zip(net.momentum_parameters(), net.parameters()):
        pm *= net.m
        pm += (1.0 - net.m) * p
    return net


def sgd_step(net, grads, lr, momentum_coeff=0.9, weight_decay=0.0):
    """Momentum SGD with decoupled weight decay, in place."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    params = net.parameters()
    if len(grads) != len(params):
        raise ValueError("gradient list does not match the parameters")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient; training halted")
    if net.velocity is None:
        net.velocity = [np.zeros_like(p) for p in params]
    for p, g, buf in zip(params, grads, net.velocity):
        buf *= momentum_coeff
        buf += g
        p -= lr * (buf + weight_decay * p)
    net.step += 1
    return net


def augment(X, rng, sigma=0.1, p_drop=0.1):
    """Two independent noisy views: Gaussian jitter then coordinate dropout."""
    X = np.asarray(X, dtype=np.float64)
    views = []
    for _ in range(2):
        noise = rng.standard_normal(X.shape) * sigma
        keep = rng.uniform(size=X.shape) >= p_drop
        views.append((X + noise) * keep)
    return views[0], views[1]


# -- checkpoints ----------------------------------------------------------------

def _write_stack(fh, stack):
    fh.write(struct.pack("<I", len(stack.layers)))
    for layer in stack.layers:
        rows, cols = layer.W.shape
        fh.write(struct.pack("<IIB", rows, cols, int(layer.relu)))
        fh.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())


def save_checkpoint(net, path):
    """Versioned binary: magic, u32 version, f64 m, u64 step, then five stacks."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IdQ", CHECKPOINT_VERSION, net.m, net.step))
        for s in net.online_stacks + net.momentum_stacks:
            _write_stack(fh, s)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte 0 (expected {CHECKPOINT_MAGIC!r})")
    off = 4
    try:
        version, m, step = struct.unpack_from("<IdQ", blob, off)
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported version {version} at byte {off}")
        off += struct.calcsize("<IdQ")
        stacks = []
        for _ in range(5):
            (n_layers,) = struct.unpack_from("<I", blob, off)
            off += 4
            layers = []
            for _ in range(n_layers):
                rows, cols, relu = struct.unpack_from("<IIB", blob, off)
                off += 9
                W = np.frombuffer(blob, "<f8", rows * cols, off).reshape(rows, cols).copy()
                off += 8 * rows * cols
                b = np.frombuffer(blob, "<f8", rows, off).copy()
                off += 8 * rows
                layers.append(Layer(W, b, bool(relu)))
            stacks.append(MlpStack(layers))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise DataFormatError(f"{path}: truncated checkpoint near byte {off}") from exc
    if off != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - off} trailing bytes at byte {off}")
    return SiameseNet(*stacks, m=m, step=step)
