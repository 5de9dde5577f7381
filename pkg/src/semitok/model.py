"""Miniature acoustic model with an emotion-token layer.

Three training modes share one parameter bundle:

* ``SemiGST`` — a bank of K style tokens; a reference encoder mean-pools the
  target frames into a query, single-head attention over the (tanh'd) tokens
  yields token weights, and their weighted sum is the emotion embedding. The
  weights double as an emotion prediction: labeled utterances add a
  cross-entropy term between the weights and the one-hot label.
* ``EI`` — a plain emotion-embedding table indexed by the label (fully
  supervised baseline).
* ``SemiEI`` — like EI, but unlabeled utterances get a zero embedding.

The decoder is duration-known: each text position emits ``frames_per_token``
frames from a linear map of ``concat(H_t + e, onehot(j))``. Everything runs in
float64 with hand-written analytic gradients (see :func:`gradients`), checked
against central finite differences in the training module.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .corpus import Utterance
from .errors import ContractError, FormatError, ValidationError

MODES = ("SemiGST", "EI", "SemiEI")

# floor inside ln() of the cross-entropy term
CE_EPS = 1e-12

CHECKPOINT_MAGIC = b"EMOT"
CHECKPOINT_VERSION = 1


class CheckpointError(FormatError):
    """A checkpoint file violates the EMOT container format."""


@dataclass
class ModelConfig:
    d_phone: int = 32
    d_tone: int = 8
    d_pos: int = 8
    d_text: int = 16
    d_ref: int = 16
    d_tok: int = 16
    n_emotions: int = 4
    d_mc: int = 12
    frames_per_token: int = 4
    n_phones: int = 32
    n_tones: int = 6
    n_pos: int = 8
    lambda_ce: float = 1.0
    mode: str = "SemiGST"


def validate_config(config: ModelConfig) -> None:
    for name in (
        "d_phone", "d_tone", "d_pos", "d_text", "d_ref", "d_tok",
        "n_emotions", "d_mc", "frames_per_token", "n_phones", "n_tones", "n_pos",
    ):
        if getattr(config, name) < 1:
            raise ValidationError(f"{name}: must be >= 1")
    if config.lambda_ce < 0:
        raise ValidationError("lambda_ce: must be >= 0")
    if config.mode not in MODES:
        raise ValidationError(f"mode: must be one of {MODES}, got {config.mode!r}")
    if config.d_tok != config.d_text:
        # the emotion vector is added to encoder outputs directly; there is
        # no projection array between the two spaces
        raise ValidationError("d_tok: must equal d_text")


@dataclass(eq=False)
class ModelParams:
    """All learnable arrays, float64. Checkpoints serialize in ARRAY_ORDER."""

    emb_phone: np.ndarray  # (n_phones, d_phone)
    emb_tone: np.ndarray  # (n_tones, d_tone)
    emb_pos: np.ndarray  # (n_pos, d_pos)
    W_t: np.ndarray  # (d_text, d_phone + d_tone + d_pos)
    b_t: np.ndarray  # (d_text,)
    W_r: np.ndarray  # (d_ref, d_mc + 2)
    b_r: np.ndarray  # (d_ref,)
    W_q: np.ndarray  # (d_tok, d_ref)
    G: np.ndarray  # (n_emotions, d_tok) style-token bank
    E: np.ndarray  # (n_emotions, d_tok) EI embedding table
    W_d: np.ndarray  # (d_mc + 2, d_text + frames_per_token)
    b_d: np.ndarray  # (d_mc + 2,)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_ORDER}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.as_dict().items()})


ARRAY_ORDER = tuple(f.name for f in fields(ModelParams))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d_in = config.d_phone + config.d_tone + config.d_pos
    n_chan = config.d_mc + 2
    return {
        "emb_phone": (config.n_phones, config.d_phone),
        "emb_tone": (config.n_tones, config.d_tone),
        "emb_pos": (config.n_pos, config.d_pos),
        "W_t": (config.d_text, d_in),
        "b_t": (config.d_text,),
        "W_r": (config.d_ref, n_chan),
        "b_r": (config.d_ref,),
        "W_q": (config.d_tok, config.d_ref),
        "G": (config.n_emotions, config.d_tok),
        "E": (config.n_emotions, config.d_tok),
        "W_d": (n_chan, config.d_text + config.frames_per_token),
        "b_d": (n_chan,),
    }


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform[-a, a] weights with a = sqrt(6 / (rows + cols)); zero biases.

    Arrays are drawn in ARRAY_ORDER from one seeded generator, so the result
    is a deterministic function of (config, seed).
    """
    validate_config(config)
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(**out)


def zeros_like_params(params: ModelParams) -> ModelParams:
    return ModelParams(**{k: np.zeros_like(v) for k, v in params.as_dict().items()})


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max-subtracted)."""
    e = np.exp(z - np.max(z))
    return e / e.sum()


def encode_text(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    """Per-position text states H = tanh(W_t . concat(embeddings) + b_t).

    There is no cross-position mixing; row t depends only on token t.
    """
    tokens = np.asarray(tokens)
    for col, (table, what) in enumerate(
        [(params.emb_phone, "phone_id"), (params.emb_tone, "tone_id"), (params.emb_pos, "position_id")]
    ):
        ids = tokens[:, col]
        bad = np.where((ids < 0) | (ids >= table.shape[0]))[0]
        if bad.size:
            raise ContractError(
                f"{what} {ids[bad[0]]} at position {bad[0]} out of range [0, {table.shape[0]})"
            )
    x = np.concatenate(
        [params.emb_phone[tokens[:, 0]], params.emb_tone[tokens[:, 1]], params.emb_pos[tokens[:, 2]]],
        axis=1,
    )
    return np.tanh(x @ params.W_t.T + params.b_t)


def encode_reference(params: ModelParams, frames: np.ndarray) -> np.ndarray:
    """Fixed-length reference vector r = tanh(W_r . mean_t(frames) + b_r)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ContractError("encode_reference: need at least one frame")
    return np.tanh(params.W_r @ frames.mean(axis=0) + params.b_r)


def token_attention(params: ModelParams, r: np.ndarray) -> np.ndarray:
    """Single-head attention weights over the token bank.

    Logits are (W_q r) . tanh(g_k) / sqrt(d_tok); returns softmax of them
    (a probability vector of length K).
    """
    q = params.W_q @ np.asarray(r, dtype=np.float64)
    z = np.tanh(params.G) @ q / np.sqrt(params.G.shape[1])
    return softmax(z)


def emotion_embedding(
    params: ModelParams,
    mode: str,
    weights: np.ndarray | None = None,
    label: int | None = None,
) -> np.ndarray:
    """Mode-dependent emotion vector added to every encoder output.

    SemiGST takes token weights (sum of tanh'd tokens, weighted); EI takes a
    label index into the embedding table; SemiEI takes a label or, when the
    utterance is unlabeled, returns the zero vector.
    """
    if mode == "SemiGST":
        if weights is None or label is not None:
            raise ContractError("SemiGST emotion embedding needs token weights, not a label")
        return np.tanh(params.G).T @ np.asarray(weights, dtype=np.float64)
    if mode == "EI":
        if label is None or weights is not None:
            raise ContractError("EI emotion embedding needs a label")
        return params.E[label]
    if mode == "SemiEI":
        if weights is not None:
            raise ContractError("SemiEI emotion embedding takes a label, not weights")
        if label is None:
            return np.zeros(params.E.shape[1])
        return params.E[label]
    raise ContractError(f"unknown mode {mode!r}")


def one_hot(index: int, size: int) -> np.ndarray:
    if not 0 <= index < size:
        raise ContractError(f"index {index} out of range [0, {size})")
    v = np.zeros(size)
    v[index] = 1.0
    return v


class _Cache:
    """Per-utterance forward intermediates reused by the backward pass."""

    __slots__ = (
        "tokens", "target", "h", "x_cat", "mean_frame", "r", "q", "tg", "w",
        "e", "dec_in", "chat", "label",
    )

    def __init__(self) -> None:
        self.mean_frame = self.r = self.q = self.tg = self.w = None
        self.label = None


def _forward_utterance(
    params: ModelParams,
    utt: Utterance,
    mode: str,
    inference_token: int | None = None,
) -> _Cache:
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    c = _Cache()
    c.tokens = utt.tokens
    c.target = np.asarray(utt.frames, dtype=np.float64)
    c.h = encode_text(params, utt.tokens)
    # keep the concatenated embedding row for the backward pass
    c.x_cat = np.concatenate(
        [
            params.emb_phone[utt.tokens[:, 0]],
            params.emb_tone[utt.tokens[:, 1]],
            params.emb_pos[utt.tokens[:, 2]],
        ],
        axis=1,
    )

    if mode == "SemiGST":
        if inference_token is not None:
            c.w = one_hot(inference_token, params.G.shape[0])
        else:
            c.mean_frame = c.target.mean(axis=0)
            c.r = np.tanh(params.W_r @ c.mean_frame + params.b_r)
            c.q = params.W_q @ c.r
            z = np.tanh(params.G) @ c.q / np.sqrt(params.G.shape[1])
            c.w = softmax(z)
        c.tg = np.tanh(params.G)
        c.e = c.tg.T @ c.w
    else:
        c.label = utt.emotion if utt.labeled else None
        if mode == "EI" and c.label is None:
            raise ContractError(f"EI mode requires a labeled utterance (got '{utt.id}')")
        c.e = emotion_embedding(params, mode, label=c.label)

    n_frames_per_token = params.W_d.shape[1] - params.W_t.shape[0]
    t_text = c.h.shape[0]
    htilde = c.h + c.e
    c.dec_in = np.concatenate(
        [np.repeat(htilde, n_frames_per_token, axis=0),
         np.tile(np.eye(n_frames_per_token), (t_text, 1))],
        axis=1,
    )
    c.chat = c.dec_in @ params.W_d.T + params.b_d
    return c


def forward(
    params: ModelParams,
    utt: Utterance,
    mode: str,
    inference_token: int | None = None,
) -> np.ndarray:
    """Predicted frames for one utterance, shape (T_text * frames_per_token, d_mc + 2).

    Without ``inference_token``, SemiGST runs the training path: the emotion
    embedding comes from the utterance's own frames through the reference
    encoder and token attention. With it, the embedding is the selected token.
    """
    return _forward_utterance(params, utt, mode, inference_token).chat


def synthesize(
    params: ModelParams,
    utt: Utterance,
    mode: str,
    token: int | None = None,
) -> np.ndarray:
    """Synthesis-path prediction: no access to the utterance's frames.

    SemiGST requires the token index of the wanted emotion; EI and SemiEI use
    the utterance's own (ground-truth) label.
    """
    if mode == "SemiGST":
        if token is None:
            raise ContractError("SemiGST synthesis requires inference_token")
        return forward(params, utt, mode, inference_token=token)
    return forward(params, utt, mode)


@dataclass
class LossBreakdown:
    recon: float
    ce: float
    total: float
    n_labeled: int = 0
    n_elements: int = 0


def _batch_caches(params: ModelParams, batch, mode: str) -> list[_Cache]:
    if not batch:
        raise ContractError("batch must be nonempty")
    return [_forward_utterance(params, utt, mode) for utt in batch]


def _breakdown(caches: list[_Cache], batch, mode: str, lambda_ce: float) -> LossBreakdown:
    sq_sum = 0.0
    n_elem = 0
    ce_sum = 0.0
    n_labeled = 0
    for cache, utt in zip(caches, batch):
        diff = cache.chat - cache.target
        sq_sum += float((diff * diff).sum())
        n_elem += diff.size
        if mode == "SemiGST" and utt.labeled:
            ce_sum += -np.log(max(cache.w[utt.emotion], CE_EPS))
            n_labeled += 1
    recon = sq_sum / n_elem
    ce = ce_sum / n_labeled if n_labeled else 0.0
    return LossBreakdown(recon, ce, recon + lambda_ce * ce, n_labeled, n_elem)


def loss(params: ModelParams, batch, mode: str, lambda_ce: float) -> LossBreakdown:
    """Multi-task loss over a batch of utterances.

    ``recon`` is the mean squared error over every frame and channel in the
    batch; ``ce`` is the mean, over labeled utterances, of the cross entropy
    between the one-hot label and the token weights (SemiGST only, zero when
    no labeled utterance contributed); ``total = recon + lambda_ce * ce``.
    """
    caches = _batch_caches(params, batch, mode)
    return _breakdown(caches, batch, mode, lambda_ce)


def gradients(params: ModelParams, batch, mode: str, lambda_ce: float) -> ModelParams:
    """Analytic gradient of ``loss(...).total`` w.r.t. every parameter array.

    Returns a ModelParams-shaped bundle of gradient arrays. Parameters off
    the active mode's computational path get exactly zero.
    """
    caches = _batch_caches(params, batch, mode)
    n_elem = sum(c.chat.size for c in caches)
    n_labeled = sum(1 for u in batch if u.labeled) if mode == "SemiGST" else 0

    g = zeros_like_params(params)
    d_text = params.W_t.shape[0]
    d_phone = params.emb_phone.shape[1]
    d_tone = params.emb_tone.shape[1]
    fpt = params.W_d.shape[1] - d_text
    sqrt_d = np.sqrt(params.G.shape[1])

    for cache, utt in zip(caches, batch):
        dchat = (2.0 / n_elem) * (cache.chat - cache.target)
        g.W_d += dchat.T @ cache.dec_in
        g.b_d += dchat.sum(axis=0)
        ddec = dchat @ params.W_d
        dhtilde = ddec[:, :d_text]
        dh = dhtilde.reshape(-1, fpt, d_text).sum(axis=1)
        de = dhtilde.sum(axis=0)

        # text path
        da = dh * (1.0 - cache.h**2)
        g.W_t += da.T @ cache.x_cat
        g.b_t += da.sum(axis=0)
        dx = da @ params.W_t
        np.add.at(g.emb_phone, cache.tokens[:, 0], dx[:, :d_phone])
        np.add.at(g.emb_tone, cache.tokens[:, 1], dx[:, d_phone : d_phone + d_tone])
        np.add.at(g.emb_pos, cache.tokens[:, 2], dx[:, d_phone + d_tone :])

        # emotion path
        if mode == "SemiGST":
            dtg = cache.w[:, None] * de[None, :]
            dw = cache.tg @ de
            if utt.labeled and lambda_ce != 0.0 and n_labeled:
                wy = cache.w[utt.emotion]
                if wy >= CE_EPS:
                    dw[utt.emotion] -= lambda_ce / (n_labeled * wy)
            dz = cache.w * (dw - cache.w @ dw)
            dq = cache.tg.T @ dz / sqrt_d
            dtg += dz[:, None] * cache.q[None, :] / sqrt_d
            g.G += dtg * (1.0 - cache.tg**2)
            g.W_q += np.outer(dq, cache.r)
            dr = params.W_q.T @ dq
            du = dr * (1.0 - cache.r**2)
            g.W_r += np.outer(du, cache.mean_frame)
            g.b_r += du
        elif cache.label is not None:  # EI always, SemiEI when labeled
            g.E[cache.label] += de
    return g


# ---------------------------------------------------------------------------
# checkpoint io: EMOT container
# ---------------------------------------------------------------------------


def _config_block(config: ModelConfig) -> bytes:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(ModelConfig)]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config_block(blob: bytes) -> ModelConfig:
    kv = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in kv:
            raise CheckpointError(f"checkpoint config block missing '{f.name}'")
        raw = kv.pop(f.name)
        try:
            kwargs[f.name] = f.type_parse(raw) if hasattr(f, "type_parse") else (
                raw if f.name == "mode" else (float(raw) if f.name == "lambda_ce" else int(raw))
            )
        except ValueError:
            raise CheckpointError(f"checkpoint config: bad value for '{f.name}': {raw!r}") from None
    if kv:
        raise CheckpointError(f"checkpoint config: unknown key '{next(iter(kv))}'")
    return ModelConfig(**kwargs)


def save_checkpoint(path: str | Path, config: ModelConfig, params: ModelParams) -> None:
    """Write magic, version, the length-prefixed config block, then each array
    (u32 rank, u32 dims, float64 little-endian data) in ARRAY_ORDER."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    block = _config_block(config)
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    for name in ARRAY_ORDER:
        arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, ModelParams]:
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    if len(blob) < 8 or bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", view[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 8

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        piece = view[offset : offset + n]
        offset += n
        return piece

    (block_len,) = struct.unpack("<I", take(4))
    config = _parse_config_block(bytes(take(block_len)))
    arrays = {}
    for name in ARRAY_ORDER:
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank} for '{name}'")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    params = ModelParams(**arrays)
    expected = param_shapes(config)
    for name, arr in params.as_dict().items():
        if arr.shape != expected[name]:
            raise CheckpointError(
                f"{path}: array '{name}' has shape {arr.shape}, config implies {expected[name]}"
            )
    return config, params
