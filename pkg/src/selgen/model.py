"""Encoder-aligner-decoder network for selective generation.

Shapes (H hidden, A alignment width, D embedding, F record features,
M = F + 2H multi-level width, or M = F without the encoder):

====================  ======================  ==================================
name                  shape                   role
====================  ======================  ==================================
encoder_fwd.T_e       4H x (F + H + 1)        forward LSTM, bias in last column
encoder_bwd.T_e       4H x (F + H + 1)        backward LSTM
aligner.P             A x M                   pre-selector hidden layer
aligner.q             A                       pre-selector output
aligner.W             A x H                   decoder-state term of the scores
aligner.U             A x M                   record term of the scores
aligner.v             A                       score projection
decoder.T_d           4H x (D + H + M + 1)    decoder LSTM, bias in last column
decoder.E             V x D                   word embeddings
decoder.L0            V x D                   deep output layer
decoder.Ls            D x H
decoder.Lz            D x M
====================  ======================  ==================================

LSTM gate order inside every ``T`` is (input, forget, output, candidate).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .corpus import START_ID, Example, FeatureSpec, Vocabulary
from .diffcore import ParamStore, Tensor

FORMAT_VERSION = 1
ALIGNER_MODES = ("coarse_to_fine", "basic")


@dataclass(frozen=True)
class ModelConfig:
    feature_size: int
    vocab_size: int
    hidden_size: int = 500
    embed_size: int = 500
    align_size: int | None = None
    gamma: float = 8.5
    aligner_mode: str = "coarse_to_fine"
    use_encoder: bool = True

    def __post_init__(self):
        for name in ("feature_size", "vocab_size", "hidden_size", "embed_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.align_size is None:
            object.__setattr__(self, "align_size", self.hidden_size)
        if self.align_size < 1:
            raise ValueError("align_size must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.aligner_mode not in ALIGNER_MODES:
            raise ValueError(f"aligner_mode must be one of {ALIGNER_MODES}")

    @property
    def memory_size(self) -> int:
        return self.feature_size + (2 * self.hidden_size if self.use_encoder else 0)

    @property
    def preselect(self) -> bool:
        return self.aligner_mode == "coarse_to_fine"

    def to_json(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Expected tensors for a configuration, in canonical order."""
    H, A, D, F, V, M = cfg.hidden_size, cfg.align_size, cfg.embed_size, cfg.feature_size, cfg.vocab_size, cfg.memory_size
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.use_encoder:
        shapes["encoder_fwd.T_e"] = (4 * H, F + H + 1)
        shapes["encoder_bwd.T_e"] = (4 * H, F + H + 1)
    if cfg.preselect:
        shapes["aligner.P"] = (A, M)
        shapes["aligner.q"] = (A,)
    shapes["aligner.W"] = (A, H)
    shapes["aligner.U"] = (A, M)
    shapes["aligner.v"] = (A,)
    shapes["decoder.T_d"] = (4 * H, D + H + M + 1)
    shapes["decoder.E"] = (V, D)
    shapes["decoder.L0"] = (V, D)
    shapes["decoder.Ls"] = (D, H)
    shapes["decoder.Lz"] = (D, M)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Glorot-uniform weights, zero biases except +1 on the forget gates."""
    rng = np.random.default_rng(seed)
    H = cfg.hidden_size
    store = ParamStore()
    for name, shape in param_shapes(cfg).items():
        fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
        if name.endswith((".T_e", ".T_d")):
            fan_in -= 1
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=shape)
        if name.endswith((".T_e", ".T_d")):
            w[:, -1] = 0.0
            w[H : 2 * H, -1] = 1.0
        store.add(name, w)
    return store


def zero_params(cfg: ModelConfig) -> ParamStore:
    return ParamStore((name, np.zeros(shape)) for name, shape in param_shapes(cfg).items())


# ---------------------------------------------------------------------- pieces

_ONE = dc.constant([1.0])


def lstm_step(T: Tensor, inputs: list[Tensor], c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM update; ``T`` is the affine map over ``(inputs...; 1)``."""
    H = c_prev.size
    gates = dc.matmul(T, dc.concat([*inputs, _ONE]))
    hc = dc.lstm_cell(gates, c_prev)
    return dc.slice_vec(hc, 0, H), dc.slice_vec(hc, H, 2 * H)


@dataclass
class EncoderState:
    h: list[Tensor]
    m: list[Tensor]
    memory: Tensor  # N x M, row j is m_j

    @property
    def num_records(self) -> int:
        return self.memory.shape[0]


def encode(features, params: ParamStore, cfg: ModelConfig) -> EncoderState:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] != cfg.feature_size:
        raise dc.ShapeError("encode", feats.shape, (-1, cfg.feature_size))
    N, H = feats.shape[0], cfg.hidden_size
    r = [dc.constant(row) for row in feats]
    if not cfg.use_encoder:
        return EncoderState([], r, dc.constant(feats))

    def run(T: Tensor, order) -> dict[int, Tensor]:
        h, c = dc.constant(np.zeros(H)), dc.constant(np.zeros(H))
        out = {}
        for j in order:
            h, c = lstm_step(T, [r[j], h], c)
            out[j] = h
        return out

    fwd = run(params["encoder_fwd.T_e"], range(N))
    bwd = run(params["encoder_bwd.T_e"], range(N - 1, -1, -1))
    h = [dc.concat([fwd[j], bwd[j]]) for j in range(N)]
    m = [dc.concat([r[j], h[j]]) for j in range(N)]
    return EncoderState(h, m, dc.stack(m))


def preselect(enc: EncoderState, params: ParamStore) -> Tensor:
    """Per-record selection probabilities, one sigmoid gate per row of the memory."""
    hidden = dc.tanh(dc.matmul(enc.memory, dc.transpose(params["aligner.P"])))
    return dc.sigmoid(dc.matmul(hidden, params["aligner.q"]))


def attention_keys(enc: EncoderState, params: ParamStore) -> Tensor:
    """``U m_j`` for all records (N x A); independent of the decoding step."""
    return dc.matmul(enc.memory, dc.transpose(params["aligner.U"]))


class Alignment(NamedTuple):
    beta: Tensor
    w: Tensor
    alpha: Tensor
    z: Tensor


def align_step(
    s_prev: Tensor,
    enc: EncoderState,
    p: Tensor | None,
    params: ParamStore,
    cfg: ModelConfig,
    keys: Tensor | None = None,
) -> Alignment:
    if keys is None:
        keys = attention_keys(enc, params)
    N = enc.num_records
    query = dc.tile_rows(dc.matmul(params["aligner.W"], s_prev), N)
    beta = dc.matmul(dc.tanh(dc.add(keys, query)), params["aligner.v"])
    w = dc.softmax(beta)
    if cfg.preselect and p is not None:
        pw = dc.mul(p, w)
        norm = dc.total(pw)
        assert norm.data[0] > 0.0, "refiner normalizer vanished"
        alpha = dc.div(pw, norm)
    else:
        alpha = w
    z = dc.matmul(alpha, enc.memory)
    return Alignment(beta, w, alpha, z)


class DecoderOutput(NamedTuple):
    logits: Tensor
    s: Tensor
    c: Tensor

    @property
    def probs(self) -> np.ndarray:
        x = self.logits.data
        e = np.exp(x - x.max())
        return e / e.sum()


def decode_step(prev_word: int, s_prev: Tensor, c_prev: Tensor, z: Tensor, params: ParamStore) -> DecoderOutput:
    E = params["decoder.E"]
    if not 0 <= prev_word < E.shape[0]:
        raise IndexError(f"word index {prev_word} outside vocabulary of size {E.shape[0]}")
    e = dc.row(E, prev_word)
    s, c = lstm_step(params["decoder.T_d"], [e, s_prev, z], c_prev)
    deep = dc.add(dc.add(e, dc.matmul(params["decoder.Ls"], s)), dc.matmul(params["decoder.Lz"], z))
    return DecoderOutput(dc.matmul(params["decoder.L0"], deep), s, c)


def regularizer(p: Tensor, gamma: float) -> Tensor:
    """``(sum p - gamma)^2 + (1 - max p)``."""
    count = dc.square(dc.sub(dc.total(p), dc.constant([gamma])))
    return dc.add(count, dc.sub(dc.constant([1.0]), dc.vmax(p)))


# ------------------------------------------------------------------ sessions


@dataclass
class Context:
    """Per-scenario quantities shared by all decoding steps."""

    enc: EncoderState
    p: Tensor | None
    keys: Tensor


def prepare(features, params: ParamStore, cfg: ModelConfig) -> Context:
    enc = encode(features, params, cfg)
    p = preselect(enc, params) if cfg.preselect else None
    return Context(enc, p, attention_keys(enc, params))


def initial_state(cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    return dc.constant(np.zeros(cfg.hidden_size)), dc.constant(np.zeros(cfg.hidden_size))


class Step(NamedTuple):
    out: DecoderOutput
    align: Alignment


def step(ctx: Context, prev_word: int, s: Tensor, c: Tensor, params: ParamStore, cfg: ModelConfig) -> Step:
    al = align_step(s, ctx.enc, ctx.p, params, cfg, keys=ctx.keys)
    return Step(decode_step(prev_word, s, c, al.z, params), al)


@dataclass
class AlignmentTrace:
    p: np.ndarray | None
    beta: list[np.ndarray] = field(default_factory=list)
    w: list[np.ndarray] = field(default_factory=list)
    alpha: list[np.ndarray] = field(default_factory=list)
    z: list[np.ndarray] = field(default_factory=list)
    s: list[np.ndarray] = field(default_factory=list)
    c: list[np.ndarray] = field(default_factory=list)

    def record(self, st: Step) -> None:
        self.beta.append(st.align.beta.data)
        self.w.append(st.align.w.data)
        self.alpha.append(st.align.alpha.data)
        self.z.append(st.align.z.data)
        self.s.append(st.out.s.data)
        self.c.append(st.out.c.data)

    @property
    def alpha_matrix(self) -> np.ndarray:
        return np.stack(self.alpha)

    def __len__(self) -> int:
        return len(self.alpha)


class LossParts(NamedTuple):
    nll: float
    G: float


def loss(example: Example, params: ParamStore, cfg: ModelConfig, trace: AlignmentTrace | None = None):
    """Teacher-forced negative log-likelihood plus the pre-selection regularizer.

    Returns ``(L, LossParts)`` with ``L`` a differentiable size-1 tensor.
    """
    targets = example.targets
    if not targets:
        raise ValueError("empty token sequence")
    ctx = prepare(example.features, params, cfg)
    if trace is not None:
        trace.p = None if ctx.p is None else ctx.p.data
    s, c = initial_state(cfg)
    prev = START_ID
    picked = []
    for target in targets:
        st = step(ctx, prev, s, c, params, cfg)
        if trace is not None:
            trace.record(st)
        picked.append(dc.take(dc.log_softmax(st.out.logits), target))
        s, c, prev = st.out.s, st.out.c, target
    nll = dc.scale(dc.total(dc.concat(picked)), -1.0)
    if cfg.preselect:
        G = regularizer(ctx.p, cfg.gamma)
        return dc.add(nll, G), LossParts(nll.item(), G.item())
    return nll, LossParts(nll.item(), 0.0)


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


@dataclass
class Model:
    """Trained parameters plus everything needed to featurize and decode."""

    config: ModelConfig
    params: ParamStore
    vocab: Vocabulary
    feature_spec: FeatureSpec

    def copy(self) -> Model:
        return Model(self.config, self.params.copy(), self.vocab, self.feature_spec)


def checkpoint_dict(model: Model) -> dict:
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_json(),
        "vocab_hash": model.vocab.digest(),
        "vocab": model.vocab.words,
        "feature_spec": model.feature_spec.to_json(),
    }
    params = {name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for name, t in model.params.items()}
    return {"header": header, "params": params}


def dumps_checkpoint(model: Model) -> str:
    return json.dumps(checkpoint_dict(model), separators=(",", ":"))


def save_checkpoint(model: Model, path: str | Path) -> None:
    Path(path).write_text(dumps_checkpoint(model), encoding="utf-8")


def checkpoint_digest(model: Model) -> str:
    return hashlib.sha256(dumps_checkpoint(model).encode()).hexdigest()


def model_from_dict(obj: dict) -> Model:
    try:
        header, raw = obj["header"], obj["params"]
        if header["format_version"] != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {header['format_version']}")
        cfg = ModelConfig(**header["config"])
        vocab = Vocabulary(header["vocab"])
        spec = FeatureSpec.from_json(header["feature_spec"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None
    if vocab.digest() != header["vocab_hash"]:
        raise CheckpointError("vocabulary does not match vocab_hash")
    if len(vocab) != cfg.vocab_size:
        raise CheckpointError(f"vocabulary size {len(vocab)} != config vocab_size {cfg.vocab_size}")
    if spec.width != cfg.feature_size:
        raise CheckpointError(f"feature width {spec.width} != config feature_size {cfg.feature_size}")
    expected = param_shapes(cfg)
    if set(raw) != set(expected):
        missing, extra = sorted(set(expected) - set(raw)), sorted(set(raw) - set(expected))
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    store = ParamStore()
    for name, shape in expected.items():
        entry = raw[name]
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(f"{name}: shape {tuple(entry['shape'])} != expected {shape}")
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {data.size} values for shape {shape}")
        store.add(name, data.reshape(shape))
    return Model(cfg, store, vocab, spec)


def load_checkpoint(path: str | Path) -> Model:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc.msg})") from None
    return model_from_dict(obj)

