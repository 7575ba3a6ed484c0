"""Model zoo: linear encoder, inverse-distance projector, small MLPs.

All forward and backward passes are hand-derived (no autodiff); gradients are
validated against central finite differences by grad_check and the test
suite. Everything runs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels, rng

RELU = "relu"
IDENTITY = "identity"


@dataclass
class LinearEncoder:
    """Plain linear map x -> W x."""

    W: np.ndarray  # (m, d)

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass
class InverseDistanceProjector:
    """Maps an embedding to a convex combination of fixed one-hot anchors,
    weighted by inverse distance to each pattern.

    Pattern label vectors are fixed after initialization and never receive
    gradients; the patterns themselves train unless train_patterns is off.
    The distance floor keeps the weights finite when an embedding lands on a
    pattern; the limit output there is that pattern's label vector.
    """

    patterns: np.ndarray       # (K, m)
    pattern_labels: np.ndarray  # (K,) int class ids
    num_classes: int
    epsilon: float = 1e-8
    train_patterns: bool = True

    @property
    def num_patterns(self) -> int:
        return self.patterns.shape[0]

    @property
    def label_onehot(self) -> np.ndarray:
        out = np.zeros((self.num_patterns, self.num_classes))
        out[np.arange(self.num_patterns), self.pattern_labels] = 1.0
        return out

    @property
    def out_dim(self) -> int:
        return self.num_classes


@dataclass
class MlpNetwork:
    """Affine chain with an elementwise nonlinearity on the hidden layers.

    The final layer is always linear, so a single-layer network is a plain
    affine map regardless of the activation choice.
    """

    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]   # each (out,)
    activation: str = RELU

    def __post_init__(self):
        for l in range(1, len(self.weights)):
            if self.weights[l].shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input dim {self.weights[l].shape[1]} "
                                 f"!= layer {l-1} output dim")
        if self.activation not in (RELU, IDENTITY):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class LayerActivations:
    """Per-layer outputs for one input, ordered input to output."""

    names: list[str]
    values: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.values[-1]


@dataclass
class Model:
    """Encoder plus optional projector; the probing surface of every run."""

    encoder: LinearEncoder | MlpNetwork
    projector: InverseDistanceProjector | MlpNetwork | None = None

    @property
    def embed_dim(self) -> int:
        return self.encoder.out_dim

    @property
    def out_dim(self) -> int:
        return self.encoder.out_dim if self.projector is None else self.projector.out_dim


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def linear_forward(enc: LinearEncoder, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != enc.W.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} != encoder dim {enc.W.shape[1]}")
    return enc.W @ x


def idp_forward(proj: InverseDistanceProjector, z: np.ndarray) -> np.ndarray:
    """Reference single-sample projector output (explicit differences)."""
    diffs = proj.patterns - np.asarray(z, dtype=float)
    u = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
    w = 1.0 / np.maximum(u, proj.epsilon)
    p = w / w.sum()
    return p @ proj.label_onehot


def _act(net: MlpNetwork, s: np.ndarray) -> np.ndarray:
    return np.maximum(s, 0.0) if net.activation == RELU else s


def mlp_forward(net: MlpNetwork, x: np.ndarray) -> LayerActivations:
    """Forward pass capturing every layer output (hidden layers activated,
    final layer linear)."""
    a = np.asarray(x, dtype=float)
    names, values = [], []
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        s = W @ a + b
        a = _act(net, s) if l < last else s
        names.append(f"layer_{l + 1}")
        values.append(a)
    return LayerActivations(names=names, values=values)


def _mlp_forward_batch(net: MlpNetwork, X: np.ndarray,
                       keep: bool = False):
    """Batch MLP forward; optionally keeps (inputs, preactivations) caches."""
    a = X
    acts = [X]
    pres = []
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        s = a @ W.T + b
        a = _act(net, s) if l < last else s
        if keep:
            pres.append(s)
            acts.append(a)
    return (a, acts, pres) if keep else a


def encoder_layers_batch(model: Model, X: np.ndarray) -> list[tuple[str, np.ndarray]]:
    """Named activations of the encoder for a batch, last one = embedding."""
    X = np.asarray(X, dtype=float)
    enc = model.encoder
    if isinstance(enc, LinearEncoder):
        return [("embedding", X @ enc.W.T)]
    out = []
    a = X
    last = len(enc.weights) - 1
    for l, (W, b) in enumerate(zip(enc.weights, enc.biases)):
        s = a @ W.T + b
        a = _act(enc, s) if l < last else s
        name = "embedding" if l == last else f"encoder_hidden_{l + 1}"
        out.append((name, a))
    return out


def layer_activations_batch(model: Model, X: np.ndarray) -> list[tuple[str, np.ndarray]]:
    """All probe boundaries of the model, input to output order."""
    out = encoder_layers_batch(model, X)
    Z = out[-1][1]
    proj = model.projector
    if proj is None:
        out.append(("output", Z))
    elif isinstance(proj, InverseDistanceProjector):
        P, _ = kernels.idp_forward_batch(np.ascontiguousarray(Z), proj.patterns,
                                         proj.pattern_labels, proj.num_classes,
                                         proj.epsilon)
        out.append(("output", P))
    else:
        a = Z
        last = len(proj.weights) - 1
        for l, (W, b) in enumerate(zip(proj.weights, proj.biases)):
            s = a @ W.T + b
            a = _act(proj, s) if l < last else s
            name = "output" if l == last else f"projector_hidden_{l + 1}"
            out.append((name, a))
    return out


def forward_batch(model: Model, X: np.ndarray) -> np.ndarray:
    """Model outputs for a batch of inputs."""
    return layer_activations_batch(model, X)[-1][1]


def embed_batch(model: Model, X: np.ndarray, layer: str = "embedding") -> np.ndarray:
    """Activations of the named probe boundary."""
    for name, acts in layer_activations_batch(model, np.asarray(X, dtype=float)):
        if name == layer:
            return acts
    raise ValueError(f"model has no layer named {layer!r}")


def layer_names(model: Model) -> list[str]:
    d_in = (model.encoder.W.shape[1] if isinstance(model.encoder, LinearEncoder)
            else model.encoder.weights[0].shape[1])
    return [name for name, _ in layer_activations_batch(model, np.zeros((1, d_in)))]


# ---------------------------------------------------------------------------
# parameters and gradients
# ---------------------------------------------------------------------------

def named_params(model: Model) -> list[tuple[str, np.ndarray]]:
    """Trainable parameter blocks in a fixed order. Pattern label vectors are
    fixed and never listed."""
    out: list[tuple[str, np.ndarray]] = []
    enc = model.encoder
    if isinstance(enc, LinearEncoder):
        out.append(("encoder.W", enc.W))
    else:
        for l, (W, b) in enumerate(zip(enc.weights, enc.biases)):
            out.append((f"encoder.W{l}", W))
            out.append((f"encoder.b{l}", b))
    proj = model.projector
    if isinstance(proj, InverseDistanceProjector):
        if proj.train_patterns:
            out.append(("projector.V", proj.patterns))
    elif isinstance(proj, MlpNetwork):
        for l, (W, b) in enumerate(zip(proj.weights, proj.biases)):
            out.append((f"projector.W{l}", W))
            out.append((f"projector.b{l}", b))
    return out


def _mlp_backward_batch(net: MlpNetwork, acts, pres, G_last, prefix: str,
                        grads: dict[str, np.ndarray]) -> np.ndarray:
    """Backprop through an MLP; returns the gradient w.r.t. its input."""
    G = G_last
    last = len(net.weights) - 1
    for l in range(last, -1, -1):
        G_s = G if l == last or net.activation == IDENTITY else G * (pres[l] > 0)
        grads[f"{prefix}.W{l}"] = G_s.T @ acts[l]
        grads[f"{prefix}.b{l}"] = G_s.sum(axis=0)
        G = G_s @ net.weights[l]
    return G


def model_backward(model: Model, X: np.ndarray,
                   Y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """MSE loss over the batch and its gradient for every trainable block.

    Loss is the mean over samples of the squared Euclidean distance between
    model output and target.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = X.shape[0]
    grads: dict[str, np.ndarray] = {}

    enc = model.encoder
    if isinstance(enc, LinearEncoder):
        Z = X @ enc.W.T
        enc_cache = None
    else:
        Z, enc_acts, enc_pres = _mlp_forward_batch(enc, X, keep=True)
        enc_cache = (enc_acts, enc_pres)

    proj = model.projector
    if proj is None:
        out = Z
    elif isinstance(proj, InverseDistanceProjector):
        Zc = np.ascontiguousarray(Z)
        out, U = kernels.idp_forward_batch(Zc, proj.patterns, proj.pattern_labels,
                                           proj.num_classes, proj.epsilon)
    else:
        out, proj_acts, proj_pres = _mlp_forward_batch(proj, Z, keep=True)

    R = out - Y
    loss = float(np.einsum("ij,ij->", R, R)) / n
    G_out = (2.0 / n) * R

    if proj is None:
        G_Z = G_out
    elif isinstance(proj, InverseDistanceProjector):
        G_Z, G_V = kernels.idp_backward_batch(Zc, proj.patterns, G_out, U,
                                              proj.pattern_labels, proj.epsilon)
        if proj.train_patterns:
            grads["projector.V"] = G_V
    else:
        G_Z = _mlp_backward_batch(proj, proj_acts, proj_pres, G_out,
                                  "projector", grads)

    if isinstance(enc, LinearEncoder):
        grads["encoder.W"] = G_Z.T @ X
    else:
        _mlp_backward_batch(enc, enc_cache[0], enc_cache[1], G_Z,
                            "encoder", grads)
    return loss, grads


def batch_loss(model: Model, X: np.ndarray, Y: np.ndarray) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    R = forward_batch(model, X) - Y
    return float(np.einsum("ij,ij->", R, R)) / X.shape[0]


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float]
    num_checked: int
    num_skipped: int
    tolerance: float
    passed: bool


def grad_check(model: Model, X: np.ndarray, Y: np.ndarray, step: float = 1e-5,
               tolerance: float = 1e-4,
               grads: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Relative error uses max(|analytic|, |numeric|) as denominator; when that
    is below 1e-8 the absolute error is compared against the tolerance
    instead. Coordinates whose perturbation could cross the projector's
    distance floor (some pattern within 10*step of an embedding) are skipped.

    A precomputed gradient dict can be injected through grads, which the
    negative-control tests use to verify that corrupted gradients fail.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if grads is None:
        _, grads = model_backward(model, X, Y)

    skip_pattern = np.zeros(0, dtype=bool)
    skip_encoder = False
    proj = model.projector
    if isinstance(proj, InverseDistanceProjector):
        Z = embed_batch(model, X)
        U = np.sqrt(kernels.pairwise_sq_dists(np.ascontiguousarray(Z),
                                              proj.patterns))
        skip_pattern = U.min(axis=0) < 10.0 * step
        skip_encoder = bool(skip_pattern.any())

    per_param: dict[str, float] = {}
    checked = 0
    skipped = 0
    for name, param in named_params(model):
        worst = 0.0
        flat = param.reshape(-1)
        gflat = grads[name].reshape(-1)
        for idx in range(flat.shape[0]):
            if name == "projector.V" and skip_pattern[idx // param.shape[1]]:
                skipped += 1
                continue
            if name.startswith("encoder.") and skip_encoder:
                skipped += 1
                continue
            saved = flat[idx]
            flat[idx] = saved + step
            lp = batch_loss(model, X, Y)
            flat[idx] = saved - step
            lm = batch_loss(model, X, Y)
            flat[idx] = saved
            numeric = (lp - lm) / (2.0 * step)
            analytic = gflat[idx]
            denom = max(abs(analytic), abs(numeric))
            err = abs(analytic - numeric) if denom < 1e-8 \
                else abs(analytic - numeric) / denom
            worst = max(worst, err)
            checked += 1
        per_param[name] = worst
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_err=max_err, per_param=per_param,
                           num_checked=checked, num_skipped=skipped,
                           tolerance=tolerance, passed=max_err <= tolerance)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_linear_encoder(d_in: int, d_out: int, seed: int) -> LinearEncoder:
    """Entries i.i.d. Gaussian with variance 1/d_in."""
    gen = rng.stream(seed, rng.INIT, 0)
    return LinearEncoder(W=gen.standard_normal((d_out, d_in)) / np.sqrt(d_in))


def init_idp(num_patterns: int, dim: int, num_classes: int, seed: int,
             epsilon: float = 1e-8, train_patterns: bool = True) -> InverseDistanceProjector:
    """Patterns i.i.d. standard Gaussian; anchor labels uniform over classes."""
    gen = rng.stream(seed, rng.INIT, 1)
    return InverseDistanceProjector(
        patterns=gen.standard_normal((num_patterns, dim)),
        pattern_labels=gen.integers(0, num_classes, size=num_patterns),
        num_classes=num_classes, epsilon=epsilon, train_patterns=train_patterns)


def init_mlp(layer_sizes: list[int], seed: int, activation: str = RELU) -> MlpNetwork:
    """Weights Gaussian scaled by 1/sqrt(fan-in), biases zero."""
    gen = rng.stream(seed, rng.INIT, 2)
    weights, biases = [], []
    for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(gen.standard_normal((d_out, d_in)) / np.sqrt(d_in))
        biases.append(np.zeros(d_out))
    return MlpNetwork(weights=weights, biases=biases, activation=activation)


def init_model(kind: str, d: int, num_classes: int, seed: int,
               num_patterns: int = 1024, embed_dim: int | None = None,
               encoder_hidden: list[int] | None = None,
               projector_hidden: list[int] | None = None,
               epsilon: float = 1e-8, train_patterns: bool = True,
               activation: str = RELU) -> Model:
    """Build one of the model variants.

    kind: "linear" (encoder only), "linear_idp", "mlp" (encoder only),
    "mlp_idp", "linear_mlp", "mlp_mlp".
    """
    m = d if embed_dim is None else embed_dim
    enc_kind, _, proj_kind = kind.partition("_")
    if enc_kind == "linear":
        encoder = init_linear_encoder(d, m, seed)
    elif enc_kind == "mlp":
        hidden = encoder_hidden or [64]
        encoder = init_mlp([d, *hidden, m], seed, activation)
    else:
        raise ValueError(f"unknown encoder kind in {kind!r}")
    if proj_kind == "":
        projector = None
    elif proj_kind == "idp":
        projector = init_idp(num_patterns, m, num_classes, seed,
                             epsilon=epsilon, train_patterns=train_patterns)
    elif proj_kind == "mlp":
        hidden = projector_hidden or [512]
        projector = init_mlp([m, *hidden, num_classes], seed + 1, activation)
    else:
        raise ValueError(f"unknown projector kind in {kind!r}")
    return Model(encoder=encoder, projector=projector)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"MLCKPT1\n"


def save_checkpoint(model: Model, path) -> None:
    """Flat binary checkpoint: a JSON structure header then raw float64/int64
    blocks with a dimension prefix each. Round-trips bit-exactly."""
    blocks: list[tuple[str, np.ndarray]] = []
    meta: dict = {}
    enc = model.encoder
    if isinstance(enc, LinearEncoder):
        meta["encoder"] = {"kind": "linear"}
        blocks.append(("encoder.W", enc.W))
    else:
        meta["encoder"] = {"kind": "mlp", "activation": enc.activation,
                           "layers": len(enc.weights)}
        for l, (W, b) in enumerate(zip(enc.weights, enc.biases)):
            blocks.append((f"encoder.W{l}", W))
            blocks.append((f"encoder.b{l}", b))
    proj = model.projector
    if proj is None:
        meta["projector"] = {"kind": "none"}
    elif isinstance(proj, InverseDistanceProjector):
        meta["projector"] = {"kind": "idp", "num_classes": proj.num_classes,
                             "epsilon": proj.epsilon,
                             "train_patterns": proj.train_patterns}
        blocks.append(("projector.V", proj.patterns))
        blocks.append(("projector.labels", proj.pattern_labels.astype(np.int64)))
    else:
        meta["projector"] = {"kind": "mlp", "activation": proj.activation,
                             "layers": len(proj.weights)}
        for l, (W, b) in enumerate(zip(proj.weights, proj.biases)):
            blocks.append((f"projector.W{l}", W))
            blocks.append((f"projector.b{l}", b))

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        meta_raw = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<II", len(meta_raw), len(blocks)))
        fh.write(meta_raw)
        for name, arr in blocks:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", 0 if arr.dtype == np.float64 else 1,
                                 arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        meta_len, n_blocks = struct.unpack("<II", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode())
        blocks: dict[str, np.ndarray] = {}
        for _ in range(n_blocks):
            name_len, = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode()
            code, ndim = struct.unpack("<BI", fh.read(5))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
            dtype = np.float64 if code == 0 else np.int64
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * count), dtype=dtype).reshape(shape)
            blocks[name] = arr.copy()

    if meta["encoder"]["kind"] == "linear":
        encoder = LinearEncoder(W=blocks["encoder.W"])
    else:
        L = meta["encoder"]["layers"]
        encoder = MlpNetwork(weights=[blocks[f"encoder.W{l}"] for l in range(L)],
                             biases=[blocks[f"encoder.b{l}"] for l in range(L)],
                             activation=meta["encoder"]["activation"])
    pm = meta["projector"]
    if pm["kind"] == "none":
        projector = None
    elif pm["kind"] == "idp":
        projector = InverseDistanceProjector(
            patterns=blocks["projector.V"], pattern_labels=blocks["projector.labels"],
            num_classes=pm["num_classes"], epsilon=pm["epsilon"],
            train_patterns=pm["train_patterns"])
    else:
        L = pm["layers"]
        projector = MlpNetwork(weights=[blocks[f"projector.W{l}"] for l in range(L)],
                               biases=[blocks[f"projector.b{l}"] for l in range(L)],
                               activation=pm["activation"])
    return Model(encoder=encoder, projector=projector)
