"""Synthetic sign-video corpus generation, on-disk ingestion, tokenization,
and batch collation.

The synthetic language is an identity translation task: each "sign" is a
fixed seeded binary glyph rendered over several consecutive frames with
small spatial jitter, and the target transcript is the sequence of glyph
names. A model that reads the video perfectly can score 1.0 on every
metric, which makes end-to-end numbers interpretable.

No type or file here carries gloss annotations; supervision is the spoken
transcript only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

_GLYPH_GRID_MIN = 6
_GLYPH_GRID_MAX = 24
_GLYPH_MARGIN = 2
_GLYPH_STREAM = 0
_TRANSITION_STREAM = 4
_SPLIT_STREAMS = {"train": 1, "dev": 2, "test": 3}
SPLITS = ("train", "dev", "test")

# Glyph successors per glyph: the synthetic language is a low-branching
# Markov chain, so text alone predicts a short list of plausible next signs
# and only the video resolves which one. A language backend can therefore
# exploit the prior while the visual signal stays load-bearing, which is the
# regime the two-stage pipeline is built for.
GLYPH_BRANCHING = 3


class SpecValidationError(ValueError):
    """Raised when a SyntheticSpec field is out of range. Carries the field name."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class CorpusIOError(OSError):
    """Raised when an on-disk corpus is missing or inconsistent."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the deterministic synthetic corpus generator."""

    glyph_vocab_size: int = 30
    sentence_length_range: tuple[int, int] = (3, 8)
    frames_per_glyph: int = 4
    jitter: int = 2
    image_size: tuple[int, int] = (32, 32)
    counts: tuple[int, int, int] = (2000, 200, 200)
    seed: int = 7

    def validate(self) -> None:
        if self.glyph_vocab_size < 1:
            raise SpecValidationError("glyph_vocab_size", "must be >= 1")
        lo, hi = self.sentence_length_range
        if lo < 1 or lo > hi:
            raise SpecValidationError(
                "sentence_length_range", f"need 1 <= min <= max, got ({lo}, {hi})"
            )
        if self.frames_per_glyph < 1:
            raise SpecValidationError("frames_per_glyph", "must be >= 1")
        if self.jitter < 0:
            raise SpecValidationError("jitter", "must be >= 0")
        h, w = self.image_size
        needed = _GLYPH_GRID_MIN + 2 * (self.jitter + _GLYPH_MARGIN)
        if min(h, w) < needed:
            raise SpecValidationError(
                "image_size",
                f"canvas {h}x{w} too small for glyphs with jitter "
                f"{self.jitter} (need at least {needed})",
            )
        if any(c < 1 for c in self.counts):
            raise SpecValidationError("counts", "all split counts must be >= 1")

    def to_dict(self) -> dict:
        return {
            "glyph_vocab_size": self.glyph_vocab_size,
            "sentence_length_range": list(self.sentence_length_range),
            "frames_per_glyph": self.frames_per_glyph,
            "jitter": self.jitter,
            "image_size": list(self.image_size),
            "counts": list(self.counts),
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(raw: dict) -> "SyntheticSpec":
        spec = SyntheticSpec(
            glyph_vocab_size=int(raw.get("glyph_vocab_size", 30)),
            sentence_length_range=tuple(raw.get("sentence_length_range", (3, 8))),
            frames_per_glyph=int(raw.get("frames_per_glyph", 4)),
            jitter=int(raw.get("jitter", 2)),
            image_size=tuple(raw.get("image_size", (32, 32))),
            counts=tuple(raw.get("counts", (2000, 200, 200))),
            seed=int(raw.get("seed", 7)),
        )
        spec.validate()
        return spec


@dataclass
class SignVideo:
    """A frame sequence with its paired transcript.

    frames: float32 array (T, H, W, 3) with values in [0, 1].
    """

    frames: np.ndarray
    transcript: str
    sample_id: str

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(
                f"frames must have shape (T, H, W, 3), got {self.frames.shape}"
            )
        if self.frames.shape[0] < 1:
            raise ValueError("video must contain at least one frame")
        if not self.transcript.strip():
            raise ValueError("transcript must be non-empty")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass(frozen=True)
class Vocabulary:
    """Token table with contiguous ids; the first four ids are the specials."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) < len(SPECIAL_TOKENS):
            raise ValueError("vocabulary must at least contain the special tokens")
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError(
                f"first four tokens must be {SPECIAL_TOKENS}, got {self.tokens[:4]}"
            )
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(
            self, "_index", {tok: i for i, tok in enumerate(self.tokens)}
        )

    @property
    def size(self) -> int:
        return len(self.tokens)

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    unk_id = UNK_ID

    def id_for(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token_for(self, token_id: int) -> str:
        return self.tokens[token_id]

    def __contains__(self, token: str) -> bool:
        return token in self._index


@dataclass(eq=False)
class TokenSequence:
    """Tokenized transcript: bos ... eos, no padding."""

    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class Corpus:
    train: list[SignVideo] = field(default_factory=list)
    dev: list[SignVideo] = field(default_factory=list)
    test: list[SignVideo] = field(default_factory=list)

    def split(self, name: str) -> list[SignVideo]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}, expected one of {SPLITS}")
        return getattr(self, name)

    def all_samples(self) -> Iterable[tuple[str, SignVideo]]:
        for name in SPLITS:
            for sample in self.split(name):
                yield name, sample


@dataclass
class Batch:
    """Padded training batch. Masks are True at valid positions; padded
    target slots hold the pad id and padded video slots hold zero frames."""

    videos: np.ndarray          # (B, T_max, H, W, 3) float32
    video_lengths: np.ndarray   # (B,) int64
    video_mask: np.ndarray      # (B, T_max) bool
    target_ids: np.ndarray      # (B, L_max) int64
    target_lengths: np.ndarray  # (B,) int64
    target_mask: np.ndarray     # (B, L_max) bool
    sample_ids: list[str]

    @property
    def size(self) -> int:
        return int(self.videos.shape[0])


def glyph_names(count: int) -> list[str]:
    width = max(2, len(str(count - 1)))
    return [f"g{i:0{width}d}" for i in range(count)]


def build_vocabulary(tokens: Iterable[str]) -> Vocabulary:
    seen: dict[str, None] = {}
    for tok in tokens:
        if tok not in SPECIAL_TOKENS and tok not in seen:
            seen[tok] = None
    return Vocabulary(tokens=SPECIAL_TOKENS + tuple(seen))


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def load_vocabulary(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocabulary(tokens=tuple(lines))


def tokenize(transcript: str, vocab: Vocabulary) -> TokenSequence:
    """Whitespace tokenization with bos/eos wrapping; unknown tokens map to unk."""
    words = transcript.split()
    if not words:
        raise ValueError("cannot tokenize an empty transcript")
    ids = [BOS_ID] + [vocab.id_for(w) for w in words] + [EOS_ID]
    return TokenSequence(ids=np.array(ids, dtype=np.int64))


def detokenize(ids: TokenSequence | np.ndarray | Sequence[int], vocab: Vocabulary) -> str:
    if isinstance(ids, TokenSequence):
        ids = ids.ids
    out = []
    for i in np.asarray(ids).tolist():
        if i in (PAD_ID, BOS_ID):
            continue
        if i == EOS_ID:
            break
        out.append(vocab.token_for(int(i)))
    return " ".join(out)


def trim_vocabulary(base_vocab: Vocabulary, corpus: Corpus) -> Vocabulary:
    """Shrink to the specials plus the tokens of the train-split transcripts,
    in first-occurrence order. The result does not depend on the id order of
    the base vocabulary."""
    seen: dict[str, None] = {}
    for sample in corpus.train:
        for tok in sample.transcript.split():
            if tok not in seen and tok not in SPECIAL_TOKENS:
                seen[tok] = None
    return Vocabulary(tokens=SPECIAL_TOKENS + tuple(seen))


def _glyph_grid(spec: SyntheticSpec) -> tuple[int, int]:
    """Pattern cell-grid side and render scale for one spec's canvas.

    The grid is as fine as the canvas allows up to the cap; fine random
    binary grids share their local statistics, so telling glyphs apart
    requires learned spatial features rather than raw pixel pooling.
    """
    h, w = spec.image_size
    available = min(h, w) - 2 * (spec.jitter + _GLYPH_MARGIN)
    side = min(_GLYPH_GRID_MAX, available)
    return side, available // side


def _glyph_patterns(spec: SyntheticSpec) -> np.ndarray:
    """One distinct binary cell grid per glyph, fixed by the spec seed."""
    side, _ = _glyph_grid(spec)
    patterns = np.zeros(
        (spec.glyph_vocab_size, side, side), dtype=np.uint8
    )
    seen: set[bytes] = set()
    for g in range(spec.glyph_vocab_size):
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, _GLYPH_STREAM, g])
        )
        while True:
            cells = rng.integers(0, 2, size=(side, side), dtype=np.uint8)
            key = cells.tobytes()
            if cells.any() and not cells.all() and key not in seen:
                seen.add(key)
                patterns[g] = cells
                break
    return patterns


def glyph_transitions(
    seed: int, vocab_size: int, branching: int = GLYPH_BRANCHING
) -> np.ndarray:
    """Seeded successor table (vocab_size, k): the allowed next glyphs of
    each glyph, k = min(branching, vocab_size)."""
    k = min(branching, vocab_size)
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, _TRANSITION_STREAM])
    )
    table = np.zeros((vocab_size, k), dtype=np.int64)
    for g in range(vocab_size):
        table[g] = rng.choice(vocab_size, size=k, replace=False)
    return table


def glyph_name_transitions(
    seed: int, vocab_size: int, branching: int = GLYPH_BRANCHING
) -> dict[str, list[str]]:
    """The successor table keyed by glyph name, for text-only samplers."""
    names = glyph_names(vocab_size)
    table = glyph_transitions(seed, vocab_size, branching)
    return {names[g]: [names[s] for s in table[g]] for g in range(vocab_size)}


def _sample_glyph_sequence(
    length: int, transitions: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    ids = np.zeros(length, dtype=np.int64)
    ids[0] = rng.integers(0, transitions.shape[0])
    for i in range(1, length):
        ids[i] = transitions[ids[i - 1], rng.integers(0, transitions.shape[1])]
    return ids


def _render_video(
    spec: SyntheticSpec,
    patterns: np.ndarray,
    glyph_ids: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    h, w = spec.image_size
    grid, scale = _glyph_grid(spec)
    side = scale * grid
    base_y = (h - side) // 2
    base_x = (w - side) // 2
    frames = np.zeros(
        (len(glyph_ids) * spec.frames_per_glyph, h, w, 3), dtype=np.float32
    )
    t = 0
    for g in glyph_ids:
        tile = np.kron(patterns[g], np.ones((scale, scale), dtype=np.float32))
        for _ in range(spec.frames_per_glyph):
            if spec.jitter > 0:
                dy, dx = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
            else:
                dy = dx = 0
            y, x = base_y + int(dy), base_x + int(dx)
            frames[t, y : y + side, x : x + side, :] = tile[:, :, None]
            t += 1
    return frames


def generate_synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    """Deterministic corpus: the same spec always yields bit-identical data.

    Each sample draws its length, glyph sequence, and per-frame jitter from
    an independent seed stream, so generation order never matters.
    """
    spec.validate()
    patterns = _glyph_patterns(spec)
    names = glyph_names(spec.glyph_vocab_size)
    transitions = glyph_transitions(spec.seed, spec.glyph_vocab_size)
    lo, hi = spec.sentence_length_range
    corpus = Corpus()
    for split, count in zip(SPLITS, spec.counts):
        stream = _SPLIT_STREAMS[split]
        samples = corpus.split(split)
        for i in range(count):
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, stream, i])
            )
            length = int(rng.integers(lo, hi + 1))
            glyph_ids = _sample_glyph_sequence(length, transitions, rng)
            frames = _render_video(spec, patterns, glyph_ids, rng)
            samples.append(
                SignVideo(
                    frames=frames,
                    transcript=" ".join(names[g] for g in glyph_ids),
                    sample_id=f"{split}-{i:05d}",
                )
            )
    return corpus


def save_corpus(corpus: Corpus, root: str | Path) -> None:
    """Write manifest.json plus 8-bit PNG frames under frames/<sample_id>/."""
    root = Path(root)
    frames_dir = root / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for split, sample in corpus.all_samples():
        manifest.append(
            {
                "sample_id": sample.sample_id,
                "split": split,
                "transcript": sample.transcript,
                "frame_count": sample.num_frames,
            }
        )
        sample_dir = frames_dir / sample.sample_id
        sample_dir.mkdir(parents=True, exist_ok=True)
        quantized = np.clip(np.rint(sample.frames * 255.0), 0, 255).astype(np.uint8)
        for t in range(sample.num_frames):
            Image.fromarray(quantized[t], mode="RGB").save(sample_dir / f"{t:05d}.png")
    (root / "manifest.json").write_text(
        json.dumps({"samples": manifest}, sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise CorpusIOError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    corpus = Corpus()
    for entry in manifest["samples"]:
        sample_id = entry["sample_id"]
        split = entry["split"]
        if split not in SPLITS:
            raise CorpusIOError(f"sample {sample_id!r}: unknown split {split!r}")
        frames = []
        for t in range(int(entry["frame_count"])):
            frame_path = root / "frames" / sample_id / f"{t:05d}.png"
            if not frame_path.is_file():
                raise CorpusIOError(
                    f"sample {sample_id!r}: missing frame file {frame_path}"
                )
            with Image.open(frame_path) as img:
                frames.append(
                    np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
                )
        corpus.split(split).append(
            SignVideo(
                frames=np.stack(frames, axis=0),
                transcript=entry["transcript"],
                sample_id=sample_id,
            )
        )
    return corpus


def collate(samples: Sequence[SignVideo], vocab: Vocabulary) -> Batch:
    """Pad a list of samples to a rectangular batch. Inverse of itself in the
    sense that slicing each row by its stated length recovers the inputs."""
    if not samples:
        raise ValueError("cannot collate an empty sample list")
    shapes = {s.frames.shape[1:] for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"all samples must share frame dimensions, got {shapes}")
    h, w, c = shapes.pop()
    token_seqs = [tokenize(s.transcript, vocab) for s in samples]
    b = len(samples)
    t_max = max(s.num_frames for s in samples)
    l_max = max(ts.length for ts in token_seqs)

    videos = np.zeros((b, t_max, h, w, c), dtype=np.float32)
    video_lengths = np.zeros(b, dtype=np.int64)
    target_ids = np.full((b, l_max), PAD_ID, dtype=np.int64)
    target_lengths = np.zeros(b, dtype=np.int64)
    for i, (sample, ts) in enumerate(zip(samples, token_seqs)):
        videos[i, : sample.num_frames] = sample.frames
        video_lengths[i] = sample.num_frames
        target_ids[i, : ts.length] = ts.ids
        target_lengths[i] = ts.length
    video_mask = np.arange(t_max)[None, :] < video_lengths[:, None]
    target_mask = np.arange(l_max)[None, :] < target_lengths[:, None]
    return Batch(
        videos=videos,
        video_lengths=video_lengths,
        video_mask=video_mask,
        target_ids=target_ids,
        target_lengths=target_lengths,
        target_mask=target_mask,
        sample_ids=[s.sample_id for s in samples],
    )
