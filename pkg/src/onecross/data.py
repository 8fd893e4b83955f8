"""Synthetic corpus generation, manifests, the binary named-tensor checkpoint
container, and key=value config files.

One binary container serves the whole project: model checkpoints, donor
files, and per-utterance feature files (a single tensor named ``feat``).
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PFCKPT1\n"
_DTYPE_F64 = 0


class CheckpointError(Exception):
    """Base class for checkpoint container failures."""


class BadMagicError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


def save_checkpoint(state: dict[str, np.ndarray], path):
    """Write named float64 tensors: magic, u32 count, per tensor (u16 path
    length + UTF-8 path, u8 dtype, u8 rank, rank x u64 dims, row-major
    little-endian payload), trailing u32 CRC-32 of all preceding bytes."""
    chunks = [MAGIC, struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_F64, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    body = b"".join(chunks)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(body)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise TruncatedCheckpointError(f"{path}: file too short ({len(raw)} bytes)")
    body, (crc_stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CrcMismatchError(f"{path}: CRC-32 mismatch")
    if body[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {body[:len(MAGIC)]!r}")

    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise TruncatedCheckpointError(f"{path}: truncated at offset {off}")
        chunk = body[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", take(2))
        if dtype_code != _DTYPE_F64:
            raise CheckpointFormatError(f"{path}: unknown dtype code {dtype_code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n_elem = int(np.prod(dims)) if rank else 1
        payload = take(8 * n_elem)
        state[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if off != len(body):
        raise CheckpointFormatError(f"{path}: {len(body) - off} trailing bytes after tensors")
    return state


# ---------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class Vocab:
    """Character inventory; SOS/EOS are decoder-only, blank is CTC-only.

    ids: chars 0..n_chars-1, sos = n_chars, eos = n_chars+1,
    blank = vocab_size (= n_chars+2).
    """

    chars: tuple[str, ...]

    @classmethod
    def of_size(cls, n_chars: int) -> "Vocab":
        if n_chars < 2:
            raise ValueError("need at least 2 character tokens")
        if n_chars <= 26:
            chars = tuple(chr(ord("a") + i) for i in range(n_chars))
        else:
            chars = tuple(f"t{i}" for i in range(n_chars))
        return cls(chars)

    @property
    def n_chars(self) -> int:
        return len(self.chars)

    @property
    def sos_id(self) -> int:
        return self.n_chars

    @property
    def eos_id(self) -> int:
        return self.n_chars + 1

    @property
    def vocab_size(self) -> int:
        """Decoder output width (chars + SOS + EOS)."""
        return self.n_chars + 2

    @property
    def blank_id(self) -> int:
        return self.vocab_size

    def encode(self, tokens) -> list[int]:
        lookup = {c: i for i, c in enumerate(self.chars)}
        try:
            return [lookup[t] for t in tokens]
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.chars[i] for i in ids]

    def save(self, path):
        Path(path).write_text("".join(c + "\n" for c in self.chars), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        chars = tuple(line for line in Path(path).read_text(encoding="utf-8").splitlines() if line)
        return cls(chars)


# ---------------------------------------------------------------------------
# utterances and manifests


@dataclass
class Utterance:
    utt_id: str
    feats: np.ndarray          # [T x d_feat]
    transcript: list[str]

    def __post_init__(self):
        if self.feats.ndim != 2 or self.feats.shape[0] < 1:
            raise ValueError(f"{self.utt_id}: features must be a nonempty [T x d] matrix")
        if not self.transcript:
            raise ValueError(f"{self.utt_id}: transcript must be nonempty")


@dataclass
class ManifestEntry:
    utt_id: str
    feat_path: str             # relative to the manifest's directory
    transcript: list[str]


def write_manifest(entries: list[ManifestEntry], path):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.utt_id}\t{e.feat_path}\t{' '.join(e.transcript)}\n")


def parse_manifest(path) -> list[ManifestEntry]:
    entries = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        utt_id, feat_path, transcript = parts
        if utt_id in seen:
            raise ValueError(
                f"{path}:{lineno}: duplicate utt_id {utt_id!r} (first seen on line {seen[utt_id]})"
            )
        seen[utt_id] = lineno
        tokens = transcript.split() if transcript.strip() else []
        if not tokens:
            raise ValueError(f"{path}:{lineno}: empty transcript for {utt_id!r}")
        entries.append(ManifestEntry(utt_id, feat_path, tokens))
    return entries


def load_utterance(entry: ManifestEntry, base_dir) -> Utterance:
    state = load_checkpoint(Path(base_dir) / entry.feat_path)
    if "feat" not in state:
        raise CheckpointFormatError(f"{entry.feat_path}: feature file missing tensor 'feat'")
    return Utterance(entry.utt_id, state["feat"], list(entry.transcript))


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class CorpusBundle:
    vocab: Vocab
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    lm_train: list[list[str]]
    lm_dev: list[list[str]]
    prototypes: np.ndarray     # [n_chars x d_feat]


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 16       # character tokens (SOS/EOS/blank come on top)
    n_utts: int = 2000
    seed: int = 0
    noise_sigma: float = 0.3
    frames_per_token_min: int = 6
    frames_per_token_max: int = 10
    token_len_min: int = 3
    token_len_max: int = 12
    markov_order: int = 1
    d_feat: int = 8

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be at least 4")
        if self.n_utts < 1:
            raise ValueError("n_utts must be at least 1")
        if not 1 <= self.frames_per_token_min <= self.frames_per_token_max:
            raise ValueError("degenerate frames_per_token range")
        if not 1 <= self.token_len_min <= self.token_len_max:
            raise ValueError("degenerate token_len range")
        if self.markov_order not in (0, 1):
            raise ValueError("markov_order must be 0 or 1")


class _MarkovText:
    def __init__(self, n_chars: int, order: int, rng: np.random.Generator):
        z = rng.normal(size=n_chars)
        self.start = np.exp(z) / np.exp(z).sum()
        if order == 1:
            logits = 1.5 * rng.normal(size=(n_chars, n_chars))
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            self.trans = e / e.sum(axis=1, keepdims=True)
        else:
            self.trans = None

    def sample(self, length: int, rng: np.random.Generator) -> list[int]:
        seq = [int(rng.choice(len(self.start), p=self.start))]
        for _ in range(length - 1):
            if self.trans is None:
                seq.append(int(rng.choice(len(self.start), p=self.start)))
            else:
                seq.append(int(rng.choice(len(self.start), p=self.trans[seq[-1]])))
        return seq


def gen_corpus(cfg: CorpusConfig) -> CorpusBundle:
    """Deterministic synthetic corpus: one seed drives a single RNG stream, so
    equal configs give bitwise-equal corpora and the splits are disjoint
    samples of the same token-sequence distribution."""
    rng = np.random.default_rng(cfg.seed)
    vocab = Vocab.of_size(cfg.vocab_size)
    protos = rng.normal(size=(cfg.vocab_size, cfg.d_feat))
    text = _MarkovText(cfg.vocab_size, cfg.markov_order, rng)

    def make_utt(split: str, i: int) -> Utterance:
        length = int(rng.integers(cfg.token_len_min, cfg.token_len_max + 1))
        ids = text.sample(length, rng)
        frames = []
        for tok in ids:
            r = int(rng.integers(cfg.frames_per_token_min, cfg.frames_per_token_max + 1))
            frames.append(protos[tok] + cfg.noise_sigma * rng.normal(size=(r, cfg.d_feat)))
        return Utterance(f"{split}_{i:05d}", np.concatenate(frames, axis=0), vocab.decode(ids))

    n_small = max(1, cfg.n_utts // 10)
    train = [make_utt("train", i) for i in range(cfg.n_utts)]
    dev = [make_utt("dev", i) for i in range(n_small)]
    test = [make_utt("test", i) for i in range(n_small)]

    def make_lm(n: int) -> list[list[str]]:
        seqs = []
        for _ in range(n):
            length = int(rng.integers(cfg.token_len_min, cfg.token_len_max + 1))
            seqs.append(vocab.decode(text.sample(length, rng)))
        return seqs

    lm_train = make_lm(cfg.n_utts)
    lm_dev = make_lm(n_small)
    return CorpusBundle(vocab, train, dev, test, lm_train, lm_dev, protos)


def write_corpus(bundle: CorpusBundle, out_dir):
    """Lay the bundle out on disk: manifests, per-utterance feature files,
    reference files, LM text, and the vocabulary."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    bundle.vocab.save(out / "vocab.txt")
    for split, utts in (("train", bundle.train), ("dev", bundle.dev), ("test", bundle.test)):
        entries = []
        for u in utts:
            rel = f"feats/{u.utt_id}.bin"
            save_checkpoint({"feat": u.feats}, out / rel)
            entries.append(ManifestEntry(u.utt_id, rel, u.transcript))
        write_manifest(entries, out / f"{split}.tsv")
        with open(out / f"{split}.ref.txt", "w", encoding="utf-8") as fh:
            for u in utts:
                fh.write(f"{u.utt_id}\t{' '.join(u.transcript)}\n")
    for name, seqs in (("lm_train", bundle.lm_train), ("lm_dev", bundle.lm_dev)):
        with open(out / f"{name}.txt", "w", encoding="utf-8") as fh:
            for seq in seqs:
                fh.write(" ".join(seq) + "\n")


def load_split(data_dir, split: str) -> list[Utterance]:
    base = Path(data_dir)
    return [load_utterance(e, base) for e in parse_manifest(base / f"{split}.tsv")]


def load_lm_corpus(data_dir, name: str) -> list[list[str]]:
    lines = Path(Path(data_dir) / f"{name}.txt").read_text(encoding="utf-8").splitlines()
    return [line.split() for line in lines if line.strip()]


# ---------------------------------------------------------------------------
# config files


def parse_config_file(path) -> dict[str, str]:
    """Line-oriented ``key = value``; blank lines and # comments ignored."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values
