"""Synthetic paired "speech" corpus and text-only corpus from a Markov-chain language.

A sentence is a token sequence drawn from a first-order Markov chain. Each
token is rendered as 2-4 frames of its codebook vector plus Gaussian noise.
Codebook vectors come in close pairs, so acoustically confusable tokens can
only be told apart reliably with language context.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

SPECIALS = ("[MASK]", "[CLS]", "[SEP]", "[PAD]")


@dataclass(frozen=True)
class Vocab:
    """Base tokens; CTC blank and teacher/decoder specials are appended after them."""

    tokens: tuple[str, ...]

    @classmethod
    def of_size(cls, n: int) -> Vocab:
        return cls(tuple(f"w{i:02d}" for i in range(n)))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def blank(self) -> int:
        return self.size

    @property
    def ctc_size(self) -> int:
        return self.size + 1

    @property
    def mask_id(self) -> int:
        return self.size

    @property
    def cls_id(self) -> int:
        return self.size + 1

    @property
    def sep_id(self) -> int:
        return self.size + 2

    @property
    def pad_id(self) -> int:
        return self.size + 3

    @property
    def decoder_size(self) -> int:
        return self.size + len(SPECIALS)

    @cached_property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[t] for t in text.split()]
        except KeyError as exc:
            raise ValueError(f"out-of-vocabulary token {exc.args[0]!r}") from None

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass
class LanguageSpec:
    transitions: np.ndarray
    start: np.ndarray
    min_len: int = 4
    max_len: int = 12

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.start = np.asarray(self.start, dtype=np.float64)
        n = self.start.shape[0]
        if self.transitions.shape != (n, n):
            raise ValueError(f"transition matrix shape {self.transitions.shape} != ({n}, {n})")
        sums = self.transitions.sum(axis=1)
        if np.any(sums == 0) or np.any(self.transitions < 0):
            raise ValueError("transition matrix has a zero or negative row")
        if np.any(np.abs(sums - 1.0) > 1e-12) or abs(self.start.sum() - 1.0) > 1e-12:
            raise ValueError("transition rows and start distribution must sum to 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad sentence length bounds [{self.min_len}, {self.max_len}]")
        self._start_cdf = np.cumsum(self.start)
        self._row_cdf = np.cumsum(self.transitions, axis=1)

    @property
    def vocab_size(self) -> int:
        return self.start.shape[0]

    def to_json(self) -> dict:
        return {
            "transitions": self.transitions.tolist(),
            "start": self.start.tolist(),
            "min_len": self.min_len,
            "max_len": self.max_len,
        }

    @classmethod
    def from_json(cls, obj: dict) -> LanguageSpec:
        return cls(np.array(obj["transitions"]), np.array(obj["start"]), obj["min_len"], obj["max_len"])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.transitions, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.start, dtype="<f8").tobytes())
        h.update(struct.pack("<II", self.min_len, self.max_len))
        return h.hexdigest()[:16]

    def conditional(self, left: int | None, right: int | None) -> np.ndarray:
        """Exact P(w_u | w_{u-1}, w_{u+1}) under the chain (ignores length effects)."""
        p = self.start.copy() if left is None else self.transitions[left].copy()
        if right is not None:
            p = p * self.transitions[:, right]
        return p / p.sum()


def _draw(cdf: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf, u, side="right")), cdf.shape[-1] - 1)


def make_language(vocab_size: int = 32, branching: int = 3, smoothing: float = 0.02,
                  min_len: int = 4, max_len: int = 12, seed: int = 0) -> LanguageSpec:
    """Random sparse chain: each token has ``branching`` likely successors.

    ``smoothing`` is the total probability mass spread uniformly over all
    tokens, so every sentence stays drawable.
    """
    rng = np.random.default_rng(seed)
    trans = np.zeros((vocab_size, vocab_size))
    for i in range(vocab_size):
        succ = rng.choice(vocab_size, size=min(branching, vocab_size), replace=False)
        trans[i, succ] = rng.dirichlet(np.full(len(succ), 2.0))
    trans = (1.0 - smoothing) * trans + smoothing / vocab_size
    trans /= trans.sum(axis=1, keepdims=True)
    start = np.full(vocab_size, 1.0 / vocab_size)
    return LanguageSpec(trans, start, min_len, max_len)


def deterministic_language(vocab_size: int, min_len: int = 4, max_len: int = 12,
                           seed: int = 0) -> LanguageSpec:
    """Chain whose transitions follow a fixed random permutation (one-hot rows)."""
    perm = np.random.default_rng(seed).permutation(vocab_size)
    trans = np.zeros((vocab_size, vocab_size))
    trans[np.arange(vocab_size), perm] = 1.0
    return LanguageSpec(trans, np.full(vocab_size, 1.0 / vocab_size), min_len, max_len)


def stream(seed: int, key: str) -> np.random.Generator:
    """Independent generator for ``key`` so output never depends on generation order."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(key.encode())]))


def sample_sentence(spec: LanguageSpec, seed) -> list[int]:
    """Draw one sentence. ``seed`` is an int or a ``numpy.random.Generator``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    u = rng.random(n)
    out = [_draw(spec._start_cdf, u[0])]
    for x in u[1:]:
        out.append(_draw(spec._row_cdf[out[-1]], x))
    return out


def make_codebook(vocab_size: int, dim: int, pair_distance: float | None = 0.8,
                  seed: int = 0) -> np.ndarray:
    """Random token vectors; with ``pair_distance``, token 2i+1 sits that far from token 2i."""
    rng = np.random.default_rng(seed)
    book = rng.normal(size=(vocab_size, dim))
    book /= np.linalg.norm(book, axis=1, keepdims=True)
    if pair_distance is not None:
        for i in range(0, vocab_size - 1, 2):
            d = rng.normal(size=dim)
            d -= d @ book[i] * book[i]
            d /= np.linalg.norm(d)
            book[i + 1] = book[i] + pair_distance * d
    return book


def render_features(transcript, seed, noise: float, codebook: np.ndarray,
                    min_frames: int = 2, max_frames: int = 4) -> tuple[np.ndarray, list[int]]:
    """Frames for ``transcript``; returns (features T x D, frames per token)."""
    if len(transcript) == 0:
        raise ValueError("cannot render an empty transcript")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    frames = rng.integers(min_frames, max_frames + 1, size=len(transcript)).tolist()
    clean = np.repeat(codebook[np.asarray(transcript)], frames, axis=0)
    if noise == 0.0:
        return clean, frames
    return clean + noise * rng.normal(size=clean.shape), frames


def ctc_feasible(num_frames: int, transcript) -> bool:
    repeats = sum(1 for a, b in zip(transcript, transcript[1:]) if a == b)
    return num_frames >= len(transcript) + repeats


# ---------------------------------------------------------------------------
# on-disk corpora


@dataclass
class CorpusConfig:
    vocab_size: int = 32
    branching: int = 2
    smoothing: float = 0.005
    min_len: int = 3
    max_len: int = 8
    feat_dim: int = 16
    noise: float = 0.5
    pair_distance: float = 0.8
    min_frames: int = 2
    max_frames: int = 4
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    n_text: int = 50000
    seed: int = 1234


@dataclass
class Utterance:
    id: str
    transcript: list[int]
    features: np.ndarray
    frames: list[int] = field(default_factory=list)


@dataclass
class ManifestRecord:
    id: str
    transcript: str
    feature_path: str


@dataclass
class CorpusManifest:
    split: str
    seed: int
    spec_hash: str
    records: list[ManifestRecord]


SPLITS = ("train", "dev", "test")


def write_features(path: Path, feats: np.ndarray):
    t, d = feats.shape
    path.write_bytes(struct.pack("<II", t, d) + np.ascontiguousarray(feats, dtype="<f8").tobytes())


def read_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated feature file")
    t, d = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 8 * t * d:
        raise ValueError(f"{path}: expected {t}x{d} frames, file size {len(raw)}")
    return np.frombuffer(raw[8:], dtype="<f8").reshape(t, d).astype(np.float64)


def write_manifest(path: Path, manifest: CorpusManifest):
    lines = [f"# split\t{manifest.split}", f"# seed\t{manifest.seed}",
             f"# spec_hash\t{manifest.spec_hash}"]
    lines += [f"{r.id}\t{r.transcript}\t{r.feature_path}" for r in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> CorpusManifest:
    header: dict[str, str] = {}
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        if line.startswith("# "):
            key, _, value = line[2:].partition("\t")
            header[key] = value
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed manifest line {line!r}")
        records.append(ManifestRecord(*parts))
    return CorpusManifest(header.get("split", ""), int(header.get("seed", 0)),
                          header.get("spec_hash", ""), records)


def generate_utterance(utt_id: str, spec: LanguageSpec, codebook: np.ndarray,
                       cfg: CorpusConfig) -> Utterance:
    rng = stream(cfg.seed, utt_id)
    words = sample_sentence(spec, rng)
    feats, frames = render_features(words, rng, cfg.noise, codebook, cfg.min_frames, cfg.max_frames)
    return Utterance(utt_id, words, feats, frames)


def language_from_config(cfg: CorpusConfig) -> tuple[Vocab, LanguageSpec, np.ndarray]:
    vocab = Vocab.of_size(cfg.vocab_size)
    spec = make_language(cfg.vocab_size, cfg.branching, cfg.smoothing, cfg.min_len,
                         cfg.max_len, seed=cfg.seed)
    book = make_codebook(cfg.vocab_size, cfg.feat_dim, cfg.pair_distance, seed=cfg.seed + 1)
    return vocab, spec, book


def build_corpora(cfg: CorpusConfig, out_dir: str | Path) -> dict[str, CorpusManifest]:
    """Write language, manifests, feature files and the text-only corpus under ``out_dir``."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    vocab, spec, book = language_from_config(cfg)
    (out / "language.json").write_text(json.dumps({
        "config": asdict(cfg),
        "vocab": list(vocab.tokens),
        "spec": spec.to_json(),
        "codebook": book.tolist(),
    }), encoding="utf-8")

    sizes = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    manifests = {}
    for split in SPLITS:
        records = []
        for i in range(sizes[split]):
            utt = generate_utterance(f"{split}-{i:05d}", spec, book, cfg)
            rel = f"feats/{utt.id}.f64"
            write_features(out / rel, utt.features)
            records.append(ManifestRecord(utt.id, vocab.decode(utt.transcript), rel))
        manifests[split] = CorpusManifest(split, cfg.seed, spec.digest(), records)
        write_manifest(out / f"{split}.tsv", manifests[split])

    with open(out / "text.txt", "w", encoding="utf-8") as fh:
        for i in range(cfg.n_text):
            fh.write(vocab.decode(sample_sentence(spec, stream(cfg.seed, f"text-{i:06d}"))) + "\n")
    return manifests


@dataclass
class Corpus:
    """A corpus directory loaded back from disk."""

    root: Path
    vocab: Vocab
    spec: LanguageSpec
    codebook: np.ndarray
    config: CorpusConfig

    @classmethod
    def load(cls, root: str | Path) -> Corpus:
        root = Path(root)
        path = root / "language.json"
        if not path.exists():
            raise FileNotFoundError(f"no corpus at {root} (missing language.json)")
        obj = json.loads(path.read_text(encoding="utf-8"))
        return cls(root, Vocab(tuple(obj["vocab"])), LanguageSpec.from_json(obj["spec"]),
                   np.array(obj["codebook"]), CorpusConfig(**obj["config"]))

    def manifest(self, split: str) -> CorpusManifest:
        return read_manifest(self.root / f"{split}.tsv")

    def utterances(self, split: str) -> list[Utterance]:
        return [Utterance(r.id, self.vocab.encode(r.transcript), read_features(self.root / r.feature_path))
                for r in self.manifest(split).records]

    def text(self) -> list[list[int]]:
        lines = (self.root / "text.txt").read_text(encoding="utf-8").splitlines()
        return [self.vocab.encode(line) for line in lines if line]
