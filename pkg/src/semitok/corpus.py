"""Synthetic emotional acoustic-feature corpus.

Each utterance pairs a sequence of abstract text tokens (phone/tone/position
ids) with a frame matrix of shape ``(T_text * frames_per_token, d_mc + 2)``.
Frame columns are ordered ``[mc_0 .. mc_{d_mc-1}, log_f0, voiced]``: the mc
block is a per-phone base pattern plus a per-emotion offset plus Gaussian
noise, ``log_f0`` is ln(Hz) on voiced frames and exactly 0.0 on unvoiced
frames, and ``voiced`` is a 0/1 flag. Emotions differ in their mc offset and
their F0 distribution, so emotion identity is recoverable from the acoustics.

All operations are pure and deterministic given their seeds; frames are kept
in float32, matching the on-disk format, so save/load round-trips bit-exactly.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, ValidationError
from .kvconfig import parse_float, parse_int

DEFAULT_EMOTIONS = ("neutral", "happy", "sad", "angry")
N_TONES = 6

# (f0_mean Hz, f0_std Hz); happy/angry get higher and more variable contours
DEFAULT_F0 = {
    "neutral": (180.0, 10.0),
    "happy": (260.0, 25.0),
    "sad": (140.0, 8.0),
    "angry": (240.0, 20.0),
}
DEFAULT_NOISE_STD = 0.1

# scale of the per-phone base mc patterns (generator-internal, not a knob)
PHONE_BASE_STD = 0.5
# voiced F0 samples are floored here so log_f0 stays strictly positive
F0_FLOOR_HZ = 2.0

FRAME_MAGIC = b"EMOC"
FRAME_VERSION = 1
MANIFEST_HEADER = "id\temotion_name\tlabeled\tsplit\tT_text\tframe_file"


class ManifestError(FormatError):
    """manifest.tsv or tokens.tsv is malformed or inconsistent."""


class FrameFormatError(FormatError):
    """A frame file has a bad magic, version, or shape."""


class TruncatedFrameError(FormatError):
    """A frame file is shorter (or longer) than its header declares."""


@dataclass
class EmotionPrototype:
    """Per-emotion prosody parameters driving the generator."""

    f0_mean: float
    f0_std: float
    mc_offset: np.ndarray
    noise_std: float = DEFAULT_NOISE_STD


@dataclass
class CorpusSpec:
    emotions: tuple[str, ...] = DEFAULT_EMOTIONS
    utterances_per_emotion: dict[str, int] = field(default_factory=dict)
    t_text_min: int = 5
    t_text_max: int = 15
    frames_per_token: int = 4
    d_mc: int = 12
    n_phones: int = 32
    pos_buckets: int = 8
    voicing_rate: float = 0.8
    seed: int = 0
    prototypes: dict[str, EmotionPrototype] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.emotions = tuple(self.emotions)
        if not self.utterances_per_emotion:
            self.utterances_per_emotion = {name: 100 for name in self.emotions}
        if not self.prototypes:
            self.prototypes = default_prototypes(self.emotions, self.d_mc)


def default_mc_offsets(n_emotions: int, d_mc: int, scale: float = 1.0) -> np.ndarray:
    """Disjoint block offsets: emotion k raises its own d_mc//K coefficients."""
    if d_mc < n_emotions:
        raise ValidationError(f"d_mc: need d_mc >= K for default offsets, got {d_mc} < {n_emotions}")
    width = d_mc // n_emotions
    offsets = np.zeros((n_emotions, d_mc))
    for k in range(n_emotions):
        offsets[k, k * width : (k + 1) * width] = scale
    return offsets


def default_prototypes(
    emotions: tuple[str, ...], d_mc: int, offset_scale: float = 1.0
) -> dict[str, EmotionPrototype]:
    offsets = default_mc_offsets(len(emotions), d_mc, offset_scale)
    protos = {}
    for k, name in enumerate(emotions):
        if name not in DEFAULT_F0:
            raise ValidationError(
                f"prototypes: no default prosody for emotion '{name}'; supply one explicitly"
            )
        f0_mean, f0_std = DEFAULT_F0[name]
        protos[name] = EmotionPrototype(f0_mean, f0_std, offsets[k])
    return protos


def validate_spec(spec: CorpusSpec) -> None:
    """Check every CorpusSpec invariant, naming the offending field."""
    if len(spec.emotions) < 1:
        raise ValidationError("emotions: need at least one emotion")
    if len(set(spec.emotions)) != len(spec.emotions):
        raise ValidationError("emotions: names must be unique")
    for name in spec.emotions:
        count = spec.utterances_per_emotion.get(name)
        if count is None or count < 1:
            raise ValidationError(f"utterances_per_emotion[{name}]: need a count >= 1")
        proto = spec.prototypes.get(name)
        if proto is None:
            raise ValidationError(f"prototypes[{name}]: missing")
        if proto.f0_mean <= F0_FLOOR_HZ:
            raise ValidationError(f"prototypes[{name}].f0_mean: must exceed {F0_FLOOR_HZ} Hz")
        if proto.f0_std < 0:
            raise ValidationError(f"prototypes[{name}].f0_std: must be >= 0")
        if proto.noise_std < 0:
            raise ValidationError(f"prototypes[{name}].noise_std: must be >= 0")
        if np.asarray(proto.mc_offset).shape != (spec.d_mc,):
            raise ValidationError(f"prototypes[{name}].mc_offset: expected shape ({spec.d_mc},)")
    if not (1 <= spec.t_text_min <= spec.t_text_max):
        raise ValidationError("t_text_min/t_text_max: need 1 <= min <= max")
    if spec.frames_per_token < 1:
        raise ValidationError("frames_per_token: must be >= 1")
    if spec.d_mc < 1:
        raise ValidationError("d_mc: must be >= 1")
    if spec.n_phones < 1:
        raise ValidationError("n_phones: must be >= 1")
    if spec.pos_buckets < 1:
        raise ValidationError("pos_buckets: must be >= 1")
    if not (0.0 < spec.voicing_rate <= 1.0):
        raise ValidationError("voicing_rate: must be in (0, 1]")


@dataclass(eq=False)
class Utterance:
    id: str
    emotion: int  # index into Corpus.emotions
    labeled: bool
    tokens: np.ndarray  # (T_text, 3) int32, columns [phone_id, tone_id, position_id]
    frames: np.ndarray  # (T_text * frames_per_token, d_mc + 2) float32
    split: str  # "train" | "test"

    @property
    def t_text(self) -> int:
        return self.tokens.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.emotion == other.emotion
            and self.labeled == other.labeled
            and self.split == other.split
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(eq=False)
class Corpus:
    emotions: tuple[str, ...]
    d_mc: int
    frames_per_token: int
    utterances: list[Utterance]

    @property
    def n_emotions(self) -> int:
        return len(self.emotions)

    def subset(self, split: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == split]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.emotions == other.emotions
            and self.d_mc == other.d_mc
            and self.frames_per_token == other.frames_per_token
            and self.utterances == other.utterances
        )


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Generate a corpus deterministically from ``spec``.

    All utterances start labeled and in the train split; draw order is fixed,
    so two calls with equal specs produce identical corpora.
    """
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    fpt = spec.frames_per_token
    base = rng.normal(0.0, PHONE_BASE_STD, size=(spec.n_phones, fpt, spec.d_mc))

    utterances = []
    for k, name in enumerate(spec.emotions):
        proto = spec.prototypes[name]
        offset = np.asarray(proto.mc_offset, dtype=float)
        for i in range(spec.utterances_per_emotion[name]):
            t_text = int(rng.integers(spec.t_text_min, spec.t_text_max + 1))
            n_frames = t_text * fpt
            phones = rng.integers(0, spec.n_phones, size=t_text)
            tones = rng.integers(0, N_TONES, size=t_text)
            positions = (np.arange(t_text) * spec.pos_buckets) // t_text
            tokens = np.stack([phones, tones, positions], axis=1).astype(np.int32)

            mc = base[phones].reshape(n_frames, spec.d_mc) + offset
            mc += rng.normal(0.0, proto.noise_std, size=(n_frames, spec.d_mc))
            voiced = rng.random(n_frames) < spec.voicing_rate
            f0 = np.maximum(rng.normal(proto.f0_mean, proto.f0_std, size=n_frames), F0_FLOOR_HZ)
            log_f0 = np.where(voiced, np.log(f0), 0.0)

            frames = np.concatenate(
                [mc, log_f0[:, None], voiced.astype(float)[:, None]], axis=1
            ).astype(np.float32)
            utterances.append(
                Utterance(
                    id=f"{name}_{i:04d}",
                    emotion=k,
                    labeled=True,
                    tokens=tokens,
                    frames=frames,
                    split="train",
                )
            )
    return Corpus(spec.emotions, spec.d_mc, fpt, utterances)


def split_corpus(corpus: Corpus, test_per_emotion: int, seed: int = 0) -> Corpus:
    """Re-tag ``test_per_emotion`` utterances per emotion as the test split.

    Selection is a seeded shuffle per emotion; utterance order is preserved.
    """
    if test_per_emotion < 0:
        raise ValidationError("test_per_emotion: must be >= 0")
    rng = np.random.default_rng(seed)
    chosen: set[int] = set()
    for k, name in enumerate(corpus.emotions):
        idxs = [i for i, u in enumerate(corpus.utterances) if u.emotion == k]
        if len(idxs) < test_per_emotion:
            raise ValidationError(
                f"test_per_emotion: emotion '{name}' has only {len(idxs)} utterances, "
                f"need {test_per_emotion}"
            )
        perm = rng.permutation(len(idxs))
        chosen.update(idxs[j] for j in perm[:test_per_emotion])
    utterances = [
        dataclasses.replace(u, split="test" if i in chosen else "train")
        for i, u in enumerate(corpus.utterances)
    ]
    return dataclasses.replace(corpus, utterances=utterances)


def mask_labels(corpus: Corpus, fraction: float, seed: int = 0) -> Corpus:
    """Keep labels on floor(fraction * n) train utterances per emotion.

    Stratified and seeded: every emotion keeps exactly floor(fraction * n_k)
    labeled train utterances regardless of utterance order. Test utterances
    keep their labels (ground truth for evaluation).
    """
    if not (0.0 <= fraction <= 1.0):
        raise ValidationError("fraction: must be in [0, 1]")
    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for k in range(corpus.n_emotions):
        idxs = [
            i
            for i, u in enumerate(corpus.utterances)
            if u.emotion == k and u.split == "train"
        ]
        n_keep = int(np.floor(fraction * len(idxs)))
        perm = rng.permutation(len(idxs))
        keep.update(idxs[j] for j in perm[:n_keep])
    utterances = [
        u if u.split != "train" else dataclasses.replace(u, labeled=(i in keep))
        for i, u in enumerate(corpus.utterances)
    ]
    return dataclasses.replace(corpus, utterances=utterances)


def _write_frames(path: Path, frames: np.ndarray) -> None:
    rows, cols = frames.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<III", FRAME_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def _read_frames(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"frame file missing: {path}")
    blob = path.read_bytes()
    if len(blob) < 16:
        raise TruncatedFrameError(f"{path}: shorter than the 16-byte header")
    if blob[:4] != FRAME_MAGIC:
        raise FrameFormatError(f"{path}: bad magic {blob[:4]!r}, expected {FRAME_MAGIC!r}")
    version, rows, cols = struct.unpack("<III", blob[4:16])
    if version != FRAME_VERSION:
        raise FrameFormatError(f"{path}: unsupported version {version}")
    expected = 16 + rows * cols * 4
    if len(blob) != expected:
        raise TruncatedFrameError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob[16:], dtype="<f4").reshape(rows, cols)
    return data.copy()


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    """Write manifest.tsv, tokens.tsv, and one ``<id>.emoc`` file per utterance."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_lines = [MANIFEST_HEADER]
    token_lines = []
    for u in corpus.utterances:
        frame_file = f"{u.id}.emoc"
        manifest_lines.append(
            f"{u.id}\t{corpus.emotions[u.emotion]}\t{int(u.labeled)}\t{u.split}"
            f"\t{u.t_text}\t{frame_file}"
        )
        triples = " ".join(f"{p}/{t}/{s}" for p, t, s in u.tokens)
        token_lines.append(f"{u.id}\t{triples}")
        _write_frames(directory / frame_file, u.frames)
    (directory / "manifest.tsv").write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
    (directory / "tokens.tsv").write_text("\n".join(token_lines) + "\n", encoding="utf-8")


def _parse_tokens_file(path: Path) -> dict[str, np.ndarray]:
    if not path.exists():
        raise ManifestError(f"tokens.tsv missing in {path.parent}")
    tokens: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ManifestError(f"tokens.tsv:{lineno}: expected 'id<TAB>triples'")
        utt_id, triples = parts
        rows = []
        for triple in triples.split():
            fields = triple.split("/")
            if len(fields) != 3:
                raise ManifestError(f"tokens.tsv:{lineno}: bad triple {triple!r}")
            try:
                rows.append([int(x) for x in fields])
            except ValueError:
                raise ManifestError(f"tokens.tsv:{lineno}: non-integer id in {triple!r}") from None
        if not rows:
            raise ManifestError(f"tokens.tsv:{lineno}: empty token sequence")
        tokens[utt_id] = np.asarray(rows, dtype=np.int32)
    return tokens


def load_corpus(directory: str | Path) -> Corpus:
    """Load a corpus directory written by :func:`save_corpus`.

    The emotion index order is the order of first appearance in the manifest
    (generate_corpus groups utterances by emotion, so round-trips preserve it).
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.tsv"
    if not manifest_path.exists():
        raise ManifestError(f"manifest.tsv missing in {directory}")
    lines = manifest_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestError(f"manifest.tsv: bad header, expected {MANIFEST_HEADER!r}")

    tokens_by_id = _parse_tokens_file(directory / "tokens.tsv")
    emotions: list[str] = []
    utterances: list[Utterance] = []
    d_mc: int | None = None
    fpt: int | None = None

    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ManifestError(f"manifest.tsv:{lineno}: expected 6 columns, got {len(parts)}")
        utt_id, emotion_name, labeled_s, split, t_text_s, frame_file = parts
        if labeled_s not in ("0", "1"):
            raise ManifestError(f"manifest.tsv:{lineno}: labeled must be 0 or 1")
        if split not in ("train", "test"):
            raise ManifestError(f"manifest.tsv:{lineno}: split must be train or test")
        try:
            t_text = int(t_text_s)
        except ValueError:
            raise ManifestError(f"manifest.tsv:{lineno}: bad T_text {t_text_s!r}") from None
        if t_text < 1:
            raise ManifestError(f"manifest.tsv:{lineno}: T_text must be >= 1")
        if utt_id not in tokens_by_id:
            raise ManifestError(f"manifest.tsv:{lineno}: no tokens.tsv entry for '{utt_id}'")
        tokens = tokens_by_id[utt_id]
        if tokens.shape[0] != t_text:
            raise ManifestError(
                f"manifest.tsv:{lineno}: T_text={t_text} but tokens.tsv has {tokens.shape[0]}"
            )

        frames = _read_frames(directory / frame_file)
        rows, cols = frames.shape
        if cols < 3:
            raise FrameFormatError(f"{frame_file}: need at least 3 columns, got {cols}")
        if rows % t_text != 0:
            raise FrameFormatError(f"{frame_file}: {rows} rows not divisible by T_text={t_text}")
        this_fpt = rows // t_text
        this_d_mc = cols - 2
        if fpt is None:
            fpt, d_mc = this_fpt, this_d_mc
        elif (this_fpt, this_d_mc) != (fpt, d_mc):
            raise FrameFormatError(
                f"{frame_file}: inconsistent shape (frames_per_token={this_fpt}, "
                f"d_mc={this_d_mc}), corpus has ({fpt}, {d_mc})"
            )

        if emotion_name not in emotions:
            emotions.append(emotion_name)
        utterances.append(
            Utterance(
                id=utt_id,
                emotion=emotions.index(emotion_name),
                labeled=labeled_s == "1",
                tokens=tokens,
                frames=frames,
                split=split,
            )
        )
    if not utterances:
        raise ManifestError("manifest.tsv: no utterances")
    assert fpt is not None and d_mc is not None
    return Corpus(tuple(emotions), d_mc, fpt, utterances)


# ---------------------------------------------------------------------------
# key=value config for the `gen` command
# ---------------------------------------------------------------------------

_SCALAR_KEYS = {
    "emotions",
    "utterances_per_emotion",
    "t_text_min",
    "t_text_max",
    "frames_per_token",
    "d_mc",
    "n_phones",
    "pos_buckets",
    "voicing_rate",
    "seed",
    "noise_std",
    "mc_offset_scale",
}
_EMOTION_KEY_PREFIXES = ("utterances.", "f0_mean.", "f0_std.", "noise_std.", "mc_offset.")


def spec_from_kv(kv: Mapping[str, str]) -> CorpusSpec:
    """Build a CorpusSpec from parsed key=value pairs, rejecting unknown keys."""
    kv = dict(kv)
    emotions = tuple(
        name.strip() for name in kv.get("emotions", ",".join(DEFAULT_EMOTIONS)).split(",")
    )
    for key in kv:
        if key in _SCALAR_KEYS:
            continue
        prefix_ok = any(
            key.startswith(p) and key[len(p) :] in emotions for p in _EMOTION_KEY_PREFIXES
        )
        if not prefix_ok:
            raise ValidationError(f"corpus config: unknown key '{key}'")

    d_mc = parse_int(kv, "d_mc", 12)
    per_emotion_default = parse_int(kv, "utterances_per_emotion", 100)
    counts = {
        name: parse_int(kv, f"utterances.{name}", per_emotion_default) for name in emotions
    }

    offset_scale = parse_float(kv, "mc_offset_scale", 1.0)
    offsets = default_mc_offsets(len(emotions), d_mc, offset_scale)
    noise_default = parse_float(kv, "noise_std", DEFAULT_NOISE_STD)
    prototypes = {}
    for k, name in enumerate(emotions):
        f0_defaults = DEFAULT_F0.get(name)
        if f0_defaults is None and (
            f"f0_mean.{name}" not in kv or f"f0_std.{name}" not in kv
        ):
            raise ValidationError(
                f"corpus config: emotion '{name}' has no default prosody; "
                f"set f0_mean.{name} and f0_std.{name}"
            )
        f0_mean = parse_float(kv, f"f0_mean.{name}", f0_defaults[0] if f0_defaults else 0.0)
        f0_std = parse_float(kv, f"f0_std.{name}", f0_defaults[1] if f0_defaults else 0.0)
        offset = offsets[k]
        if f"mc_offset.{name}" in kv:
            try:
                offset = np.asarray(
                    [float(x) for x in kv[f"mc_offset.{name}"].split(",")], dtype=float
                )
            except ValueError:
                raise ValidationError(f"key 'mc_offset.{name}': expected comma-separated numbers") from None
        prototypes[name] = EmotionPrototype(
            f0_mean=f0_mean,
            f0_std=f0_std,
            mc_offset=offset,
            noise_std=parse_float(kv, f"noise_std.{name}", noise_default),
        )

    spec = CorpusSpec(
        emotions=emotions,
        utterances_per_emotion=counts,
        t_text_min=parse_int(kv, "t_text_min", 5),
        t_text_max=parse_int(kv, "t_text_max", 15),
        frames_per_token=parse_int(kv, "frames_per_token", 4),
        d_mc=d_mc,
        n_phones=parse_int(kv, "n_phones", 32),
        pos_buckets=parse_int(kv, "pos_buckets", 8),
        voicing_rate=parse_float(kv, "voicing_rate", 0.8),
        seed=parse_int(kv, "seed", 0),
        prototypes=prototypes,
    )
    validate_spec(spec)
    return spec
