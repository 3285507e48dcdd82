"""Small differentiable models whose affine layers expose the activations
and pre-activation gradients needed for streamed per-sample scoring.

Three kinds are provided: a softmax classifier (one affine layer), a tanh
MLP, and a tiny next-token LM (one-hot embedding affine + tanh + output
affine over a vocabulary of at most 64 tokens). Token id 0 is padding and is
excluded from every token-averaged loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ParameterVector,
    Var,
    affine,
    backward,
    logsumexp,
    mul,
    slice1d,
    reshape,
    vsum,
    tanh as vtanh,
)

PAD_TOKEN = 0
MAX_VOCAB = 64
MAX_SEQ_LEN = 16

SOFTMAX_CLASSIFIER = "softmax_classifier"
MLP = "mlp"
TINY_CAUSAL_LM = "tiny_causal_lm"
MODEL_KINDS = (SOFTMAX_CLASSIFIER, MLP, TINY_CAUSAL_LM)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    out_dim: int
    in_dim: int
    bias: bool = True
    activation: str = "none"  # applied after the affine map: none | tanh


@dataclass
class AffineTape:
    """Recorded (activation, pre-activation gradient) pair for one affine
    layer. For every example n, the outer product preact_grads[n] x
    activations[n] (summed over positions for 3-d tapes) equals that
    example's gradient of the layer weight; preact_grads[n] summed over
    positions equals the bias gradient."""

    name: str
    activations: np.ndarray
    preact_grads: np.ndarray
    has_bias: bool


@dataclass
class GhostTapes:
    tapes: list[AffineTape]
    checkpoint_id: str
    batch_size: int
    total_grad: np.ndarray | None = None  # gradient of the summed loss

    def by_name(self, name: str) -> AffineTape:
        for tape in self.tapes:
            if tape.name == name:
                return tape
        raise KeyError(name)


class ToyModel:
    def __init__(self, kind: str, layers: list[LayerSpec], num_outputs: int,
                 vocab_size: int | None = None):
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.layers = layers
        self.num_outputs = num_outputs
        self.vocab_size = vocab_size
        self._segments = []
        offset = 0
        for spec in layers:
            self._segments.append((f"{spec.name}.weight", (spec.out_dim, spec.in_dim), offset))
            offset += spec.out_dim * spec.in_dim
            if spec.bias:
                self._segments.append((f"{spec.name}.bias", (spec.out_dim,), offset))
                offset += spec.out_dim
        self.dim = offset

    # -- parameters ---------------------------------------------------------

    def init_params(self, rng: np.random.Generator, scale: float = 0.5) -> ParameterVector:
        arrays = []
        for spec in self.layers:
            w = rng.normal(0.0, scale / np.sqrt(spec.in_dim), size=(spec.out_dim, spec.in_dim))
            arrays.append((f"{spec.name}.weight", w))
            if spec.bias:
                arrays.append((f"{spec.name}.bias", np.zeros(spec.out_dim)))
        return ParameterVector.from_arrays(arrays)

    def _layer_vars(self, theta: Var):
        out = {}
        cursor = 0
        for name, shape, offset in self._segments:
            size = int(np.prod(shape))
            assert offset == cursor
            out[name] = reshape(slice1d(theta, offset, offset + size), shape)
            cursor += size
        return out

    def _layer_views(self, values: np.ndarray):
        out = {}
        for name, shape, offset in self._segments:
            size = int(np.prod(shape))
            out[name] = values[offset : offset + size].reshape(shape)
        return out

    # -- batch preparation ---------------------------------------------------

    def stack_inputs(self, batch):
        """Classifier kinds: (X, Y) arrays. LM kind: padded token matrix,
        response starts, target one-hots and the per-position loss mask."""
        if self.kind == TINY_CAUSAL_LM:
            tokens = [np.asarray(ex[0], dtype=np.int64) for ex in batch]
            starts = np.array([int(ex[1]) for ex in batch], dtype=np.int64)
            length = max(t.size for t in tokens)
            if length > MAX_SEQ_LEN:
                raise ValueError(f"sequence length {length} exceeds {MAX_SEQ_LEN}")
            padded = np.full((len(batch), length), PAD_TOKEN, dtype=np.int64)
            for i, t in enumerate(tokens):
                padded[i, : t.size] = t
            return padded, starts
        x = np.stack([np.asarray(ex[0], dtype=np.float64) for ex in batch])
        y = np.array([int(ex[1]) for ex in batch], dtype=np.int64)
        return x, y

    def _lm_targets(self, tokens: np.ndarray, starts: np.ndarray):
        n, length = tokens.shape
        vocab = self.vocab_size
        onehot_in = np.zeros((n, length, vocab))
        np.put_along_axis(onehot_in, tokens[:, :, None], 1.0, axis=2)
        target_onehot = np.zeros((n, length, vocab))
        mask = np.zeros((n, length))
        for i in range(n):
            for t in range(length - 1):
                nxt = tokens[i, t + 1]
                if nxt != PAD_TOKEN and (t + 1) >= starts[i]:
                    target_onehot[i, t, nxt] = 1.0
                    mask[i, t] = 1.0
        return onehot_in, target_onehot, mask

    # -- tape forward --------------------------------------------------------

    def logits(self, theta: Var, inputs: np.ndarray, record: list | None = None) -> Var:
        """Forward pass on the tape. `inputs` is (B, F) features for the
        classifier kinds or a pre-built (B, L, V) one-hot tensor for the LM.
        When `record` is given, (spec, input array, pre-activation Var)
        triples are appended for ghost-tape extraction."""
        params = self._layer_vars(theta)
        h = Var(inputs)
        for spec in self.layers:
            w = params[f"{spec.name}.weight"]
            b = params[f"{spec.name}.bias"] if spec.bias else None
            pre = affine(h, w, b)
            if record is not None:
                record.append((spec, h.value, pre))
            h = vtanh(pre) if spec.activation == "tanh" else pre
        return h

    def logits_np(self, values: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        """Plain numpy forward (no tape): used for frozen-teacher passes and
        cheap evaluation."""
        views = self._layer_views(values)
        h = np.asarray(inputs, dtype=np.float64)
        for spec in self.layers:
            h = h @ views[f"{spec.name}.weight"].T
            if spec.bias:
                h = h + views[f"{spec.name}.bias"]
            if spec.activation == "tanh":
                h = np.tanh(h)
        return h

    def _batch_example_losses(self, theta: Var, batch, record: list | None = None) -> Var:
        """Vector of per-example losses (length B) on the tape."""
        if self.kind == TINY_CAUSAL_LM:
            tokens, starts = self.stack_inputs(batch)
            onehot_in, target_onehot, mask = self._lm_targets(tokens, starts)
            counts = mask.sum(axis=1)
            if np.any(counts < 1):
                raise ValueError("every LM example needs at least one scored response token")
            z = self.logits(theta, onehot_in, record=record)
            logp = z - logsumexp(z, axis=-1)
            ce = mul(vsum(mul(logp, target_onehot), axis=-1), -1.0)  # (B, L)
            return vsum(mul(ce, mask / counts[:, None]), axis=1)
        x, y = self.stack_inputs(batch)
        onehot = np.zeros((len(batch), self.num_outputs))
        onehot[np.arange(len(batch)), y] = 1.0
        z = self.logits(theta, x, record=record)
        logp = z - logsumexp(z, axis=-1)
        return mul(vsum(mul(logp, onehot), axis=-1), -1.0)

    def loss_sum(self, theta: Var, batch, record: list | None = None) -> Var:
        return vsum(self._batch_example_losses(theta, batch, record=record))

    def loss_mean(self, theta: Var, batch) -> Var:
        return mul(self.loss_sum(theta, batch), 1.0 / len(batch))

    def example_loss(self, theta: Var, example) -> Var:
        return vsum(self._batch_example_losses(theta, [example]))


def forward_loss(model: ToyModel, point: ParameterVector, example) -> float:
    """Cross-entropy of one example; token-mean over non-padding response
    tokens for the LM kind."""
    theta = Var(point.values)
    return float(model.example_loss(theta, example).value)


def temperature_probs(model: ToyModel, point: ParameterVector, inputs, temperature: float) -> np.ndarray:
    """softmax(z / temperature). Returns a (C,) vector for classifier kinds
    and an (L, V) row-stochastic matrix of next-token distributions for the
    LM kind."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if model.kind == TINY_CAUSAL_LM:
        tokens = np.asarray(inputs, dtype=np.int64).reshape(1, -1)
        onehot = np.zeros((1, tokens.shape[1], model.vocab_size))
        np.put_along_axis(onehot, tokens[:, :, None], 1.0, axis=2)
        z = model.logits_np(point.values, onehot)[0]
    else:
        z = model.logits_np(point.values, np.asarray(inputs, dtype=np.float64).reshape(1, -1))[0]
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def record_ghost_tapes(model: ToyModel, point: ParameterVector, batch) -> GhostTapes:
    """Run forward + backward of the summed per-example loss and capture
    (activation, pre-activation gradient) tapes for every affine layer."""
    if len(batch) < 1:
        raise ValueError("recording needs a non-empty batch")
    record: list = []
    theta = Var(point.values)
    loss = model.loss_sum(theta, batch, record=record)
    backward(loss)
    tapes = []
    for spec, act, pre in record:
        if pre.grad is None:
            raise RuntimeError(f"recording disabled or no gradient reached layer {spec.name!r}")
        tapes.append(AffineTape(spec.name, np.asarray(act), np.asarray(pre.grad), spec.bias))
    total = theta.grad if theta.grad is not None else np.zeros(point.dim)
    return GhostTapes(tapes, point.fingerprint(), len(batch), total)


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------

def make_softmax_classifier(num_features: int, num_classes: int) -> ToyModel:
    layers = [LayerSpec("out", num_classes, num_features)]
    return ToyModel(SOFTMAX_CLASSIFIER, layers, num_classes)


def make_mlp(num_features: int, hidden_dims: list[int], num_classes: int) -> ToyModel:
    layers = []
    prev = num_features
    for i, width in enumerate(hidden_dims):
        layers.append(LayerSpec(f"hidden{i}", width, prev, activation="tanh"))
        prev = width
    layers.append(LayerSpec("out", num_classes, prev))
    return ToyModel(MLP, layers, num_classes)


def make_tiny_causal_lm(vocab_size: int, embed_dim: int) -> ToyModel:
    if not 2 <= vocab_size <= MAX_VOCAB:
        raise ValueError(f"vocab size must be in [2, {MAX_VOCAB}]")
    layers = [
        LayerSpec("embed", embed_dim, vocab_size, activation="tanh"),
        LayerSpec("out", vocab_size, embed_dim),
    ]
    return ToyModel(TINY_CAUSAL_LM, layers, vocab_size, vocab_size=vocab_size)


def make_model(kind: str, **dims) -> ToyModel:
    if kind == SOFTMAX_CLASSIFIER:
        return make_softmax_classifier(dims["num_features"], dims["num_classes"])
    if kind == MLP:
        return make_mlp(dims["num_features"], list(dims.get("hidden_dims", [8])),
                        dims["num_classes"])
    if kind == TINY_CAUSAL_LM:
        return make_tiny_causal_lm(dims["vocab_size"], dims.get("embed_dim", 8))
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Checkpoint format: plain-text segment manifest + raw float64 payload
# ---------------------------------------------------------------------------

MAGIC = b"dualsft-params 1\n"


def _parse_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def save_params(point: ParameterVector, path, extra: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for key, val in (extra or {}).items():
            fh.write(f"meta {key} {val}\n".encode())
        for seg in point.segments:
            dims = ",".join(str(s) for s in seg.shape)
            fh.write(f"segment {seg.name} {seg.offset} {dims}\n".encode())
        fh.write(b"end-header\n")
        fh.write(point.values.astype("<f8").tobytes())


def load_params(path) -> tuple[ParameterVector, dict]:
    from .tensor import Segment

    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint")
        segments, extra = [], {}
        while True:
            line = fh.readline().decode()
            if line == "end-header\n":
                break
            if line == "":
                raise ValueError("truncated checkpoint header")
            kind, rest = line.rstrip("\n").split(" ", 1)
            if kind == "meta":
                key, val = rest.split(" ", 1)
                extra[key] = _parse_scalar(val)
            elif kind == "segment":
                name, offset, dims = rest.rsplit(" ", 2)
                shape = tuple(int(d) for d in dims.split(",") if d)
                segments.append(Segment(name, int(offset), shape))
            else:
                raise ValueError(f"unknown header line {line!r}")
        values = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return ParameterVector(values, segments), extra
