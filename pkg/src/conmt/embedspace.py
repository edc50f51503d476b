"""Target embedding tables: generation, mixing and (de)serialization.

Every table lives on the unit sphere. Rows are stored as float32 (the on-disk
precision) and upcast to float64 wherever similarities are computed.

Randomness is counter-based: row ``i`` of a table generated with seed ``s``
draws from its own Philox stream keyed by ``s`` with counter block ``i``, so a
row never depends on how many rows were generated before it or in which order.
"""

from __future__ import annotations

import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateRowError, InvalidArgumentError, TableParseError

DEFAULT_DIM = 128
NORM_TOL = 1e-6
RENORM_WARN_TOL = 1e-3
KINDS = ("uniform", "hypercube", "combined", "clumped", "imported")

BINARY_MAGIC = b"CEMB"
BINARY_VERSION = 1

# Philox stream tags; keep generators for different kinds decorrelated.
_STREAM_UNIFORM = 0
_STREAM_HYPERCUBE = 1
_STREAM_CLUMP_ORDER = 2


class EmbeddingNormWarning(UserWarning):
    """A loaded row was noticeably off the unit sphere and got renormalized."""


def row_rng(seed: int, row: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one row of one table kind."""
    if not 0 <= seed < 2**64:
        raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, row, stream]))


@dataclass(frozen=True, eq=False)
class Vocab:
    """Token strings with training-set counts.

    ``order[r]`` is the token at frequency rank ``r`` (0 = most frequent) and
    ``rank[t]`` is the inverse permutation. Ties go to the lower token index.
    """

    tokens: tuple[str, ...]
    freq: np.ndarray

    def __post_init__(self):
        tokens = tuple(self.tokens)
        freq = np.asarray(self.freq, dtype=np.int64)
        if freq.shape != (len(tokens),):
            raise InvalidArgumentError(
                f"freq has shape {freq.shape}, expected ({len(tokens)},)"
            )
        if (freq < 0).any():
            raise InvalidArgumentError("frequencies must be nonnegative")
        if len(set(tokens)) != len(tokens):
            raise InvalidArgumentError("token strings must be unique")
        freq.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "freq", freq)

    def __len__(self) -> int:
        return len(self.tokens)

    @cached_property
    def order(self) -> np.ndarray:
        # stable sort on -freq keeps lower indices first among ties
        return np.argsort(-self.freq, kind="stable")

    @cached_property
    def rank(self) -> np.ndarray:
        rank = np.empty(len(self), dtype=np.int64)
        rank[self.order] = np.arange(len(self))
        return rank

    @cached_property
    def index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def from_sequences(cls, tokens: Sequence[str], sequences: Iterable[Iterable[int]]) -> "Vocab":
        counts = np.zeros(len(tokens), dtype=np.int64)
        for seq in sequences:
            for t in seq:
                counts[t] += 1
        return cls(tuple(tokens), counts)

    @classmethod
    def uniform_ranked(cls, size: int) -> "Vocab":
        """Vocab whose frequency rank equals the token index."""
        return cls(tuple(str(i) for i in range(size)), np.arange(size, 0, -1))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, c in zip(self.tokens, self.freq):
                fh.write(f"{tok}\t{int(c)}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise TableParseError("expected 'token<TAB>count'", f"line {lineno}")
                try:
                    counts.append(int(parts[1]))
                except ValueError:
                    raise TableParseError(f"bad count {parts[1]!r}", f"line {lineno}") from None
                tokens.append(parts[0])
        try:
            return cls(tuple(tokens), np.array(counts, dtype=np.int64))
        except InvalidArgumentError as exc:
            raise TableParseError(str(exc), str(path)) from None


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """A |V| x d matrix of unit-norm target embeddings."""

    rows: np.ndarray
    kind: str
    seed: int | None = None
    tokens: tuple[str, ...] | None = None

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float32, order="C")
        if rows.ndim != 2:
            raise InvalidArgumentError(f"rows must be a matrix, got shape {rows.shape}")
        if rows.shape[0] == 0:
            raise InvalidArgumentError("table has no rows")
        if rows.shape[1] < 2:
            raise InvalidArgumentError(f"dimension must be >= 2, got {rows.shape[1]}")
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown table kind {self.kind!r}")
        if not np.isfinite(rows).all():
            raise InvalidArgumentError("table contains NaN or Inf")
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise InvalidArgumentError(
                f"row {bad[0]} has norm {norms[bad[0]]:.9f}; rows must be unit-norm"
            )
        if self.tokens is not None:
            tokens = tuple(self.tokens)
            if len(tokens) != rows.shape[0]:
                raise InvalidArgumentError("token list length does not match row count")
            if len(set(tokens)) != len(tokens):
                raise InvalidArgumentError("token strings must be unique")
            object.__setattr__(self, "tokens", tokens)
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def size(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.size

    @cached_property
    def unit(self) -> np.ndarray:
        """Rows in float64, renormalized so self-similarity is 1 to rounding."""
        r = self.rows.astype(np.float64)
        r /= np.linalg.norm(r, axis=1, keepdims=True)
        r.setflags(write=False)
        return r

    def token_names(self) -> tuple[str, ...]:
        return self.tokens if self.tokens is not None else tuple(str(i) for i in range(self.size))

    def is_hypercube_pattern(self) -> bool:
        return bool(np.all(np.abs(self.rows) == np.float32(1.0 / math.sqrt(self.d))))

    def equal_bytes(self, other: "EmbeddingTable") -> bool:
        return self.rows.shape == other.rows.shape and self.rows.tobytes() == other.rows.tobytes()


@dataclass(frozen=True, eq=False)
class BitPackedTable:
    """Sign planes of a hypercube table: bit i of row t is set iff coordinate i > 0.

    Bits are packed little-endian into uint64 words, ``planes.shape == (|V|, ceil(d/64))``.
    """

    d: int
    planes: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.planes.shape[0]

    @classmethod
    def from_signs(cls, signs: np.ndarray) -> "BitPackedTable":
        """Pack a boolean (|V|, d) matrix of positive-sign flags."""
        signs = np.asarray(signs, dtype=bool)
        n, d = signs.shape
        width = -(-d // 64)
        padded = np.zeros((n, width * 64), dtype=bool)
        padded[:, :d] = signs
        packed = np.packbits(padded, axis=1, bitorder="little")
        planes = packed.view("<u8").astype(np.uint64).reshape(n, width)
        planes.setflags(write=False)
        return cls(d, planes)

    @classmethod
    def from_table(cls, table: EmbeddingTable) -> "BitPackedTable":
        if not table.is_hypercube_pattern():
            raise InvalidArgumentError("table rows are not scaled sign vectors")
        return cls.from_signs(table.rows > 0)

    def signs(self) -> np.ndarray:
        raw = np.ascontiguousarray(self.planes.astype("<u8")).view(np.uint8)
        bits = np.unpackbits(raw.reshape(self.size, -1), axis=1, bitorder="little")
        return bits[:, : self.d].astype(bool)

    def to_table(self, tokens=None, seed=None) -> EmbeddingTable:
        scale = np.float32(1.0 / math.sqrt(self.d))
        rows = np.where(self.signs(), scale, -scale).astype(np.float32)
        return EmbeddingTable(rows, "hypercube", seed=seed, tokens=tokens)


def _check_size(vocab_size: int, d: int) -> None:
    if vocab_size < 1:
        raise InvalidArgumentError(f"vocab_size must be positive, got {vocab_size}")
    if d < 2:
        raise InvalidArgumentError(f"dimension must be >= 2, got {d}")


def _uniform_row(seed: int, row: int, d: int) -> np.ndarray:
    u = row_rng(seed, row, _STREAM_UNIFORM).standard_normal(d)
    return u / np.linalg.norm(u)


def _to_unit_f32(rows64: np.ndarray) -> np.ndarray:
    rows64 = rows64 / np.linalg.norm(rows64, axis=1, keepdims=True)
    return rows64.astype(np.float32)


def _assert_distinct(rows: np.ndarray) -> None:
    seen: dict[bytes, int] = {}
    for i, r in enumerate(rows):
        key = r.tobytes()
        if key in seen:
            raise RuntimeError(f"rows {seen[key]} and {i} are identical")
        seen[key] = i


def gen_uniform(vocab_size: int, d: int = DEFAULT_DIM, seed: int = 0, tokens=None) -> EmbeddingTable:
    """Rows drawn uniformly from the unit sphere (normalized Gaussian vectors)."""
    _check_size(vocab_size, d)
    rows = np.stack([_uniform_row(seed, i, d) for i in range(vocab_size)])
    rows = _to_unit_f32(rows)
    _assert_distinct(rows)
    return EmbeddingTable(rows, "uniform", seed=seed, tokens=tokens)


def gen_hypercube(
    vocab_size: int, d: int = DEFAULT_DIM, seed: int = 0, tokens=None
) -> tuple[EmbeddingTable, BitPackedTable]:
    """Scaled Rademacher rows, all distinct, plus their packed sign planes.

    A row that repeats an earlier row is redrawn from the same row stream, so
    the result depends only on ``seed`` and not on generation order.
    """
    _check_size(vocab_size, d)
    if vocab_size > 2**d:
        raise InvalidArgumentError(
            f"cannot draw {vocab_size} distinct sign patterns in dimension {d}"
        )
    signs = np.empty((vocab_size, d), dtype=bool)
    seen: set[bytes] = set()
    for i in range(vocab_size):
        rng = row_rng(seed, i, _STREAM_HYPERCUBE)
        while True:
            s = rng.integers(0, 2, size=d, dtype=np.uint8).astype(bool)
            key = np.packbits(s).tobytes()
            if key not in seen:
                break
        seen.add(key)
        signs[i] = s
    packed = BitPackedTable.from_signs(signs)
    return packed.to_table(tokens=tokens, seed=seed), packed


def combine(pre: EmbeddingTable, rand: EmbeddingTable, alpha: float = 0.9) -> EmbeddingTable:
    """Per-row normalized mix ``alpha * pre + (1 - alpha) * rand``.

    The endpoints return the corresponding input rows unchanged.
    """
    if pre.rows.shape != rand.rows.shape:
        raise InvalidArgumentError(
            f"shape mismatch: {pre.rows.shape} vs {rand.rows.shape}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError(f"alpha must lie in [0, 1], got {alpha}")
    tokens = pre.tokens if pre.tokens is not None else rand.tokens
    if alpha == 1.0:
        return EmbeddingTable(pre.rows.copy(), "combined", seed=rand.seed, tokens=tokens)
    if alpha == 0.0:
        return EmbeddingTable(rand.rows.copy(), "combined", seed=rand.seed, tokens=tokens)
    mixed = alpha * pre.unit + (1.0 - alpha) * rand.unit
    norms = np.linalg.norm(mixed, axis=1)
    zero = np.flatnonzero(norms <= 1e-12)
    if zero.size:
        raise DegenerateRowError(int(zero[0]))
    return EmbeddingTable(_to_unit_f32(mixed), "combined", seed=rand.seed, tokens=tokens)


def _place_near(anchor: np.ndarray, cos: float, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal(anchor.shape[0])
    u -= (u @ anchor) * anchor
    u /= np.linalg.norm(u)
    return cos * anchor + math.sqrt(1.0 - cos * cos) * u


def gen_clumped(
    vocab_size: int,
    d: int = DEFAULT_DIM,
    seed: int = 0,
    clump_fraction: float = 0.5,
    clump_cos: float = 0.99,
    vocab: Vocab | None = None,
    tokens=None,
) -> EmbeddingTable:
    """Synthetic "pre-trained-like" table whose rare tokens sit on top of each other.

    Frequent tokens get the same rows ``gen_uniform`` would give them. The rare
    ``clump_fraction`` of the vocabulary (by ``vocab`` frequency rank, or by
    index when no vocab is given) is placed in random order; each rare token
    lands at cosine exactly ``clump_cos`` from an anchor drawn among the rare
    tokens already placed. The second rare token always anchors on the first,
    so every rare token has a rare neighbor at cosine >= ``clump_cos``.
    """
    _check_size(vocab_size, d)
    if not 0.0 < clump_fraction < 1.0:
        raise InvalidArgumentError(f"clump_fraction must lie in (0, 1), got {clump_fraction}")
    if not 0.0 < clump_cos < 1.0:
        raise InvalidArgumentError(f"clump_cos must lie in (0, 1), got {clump_cos}")
    if vocab is not None and len(vocab) != vocab_size:
        raise InvalidArgumentError("vocab size does not match vocab_size")
    order = vocab.order if vocab is not None else np.arange(vocab_size)
    n_rare = int(round(clump_fraction * vocab_size))
    n_freq = vocab_size - n_rare

    rows = np.empty((vocab_size, d))
    for t in order[:n_freq]:
        rows[t] = _uniform_row(seed, int(t), d)

    rare = order[n_freq:]
    placement = row_rng(seed, 0, _STREAM_CLUMP_ORDER)
    rare = rare[placement.permutation(n_rare)]
    for pos, t in enumerate(rare):
        t = int(t)
        if pos == 0:
            rows[t] = _uniform_row(seed, t, d)
            continue
        anchor = int(rare[placement.integers(0, pos)])
        rows[t] = _place_near(rows[anchor], clump_cos, row_rng(seed, t, _STREAM_UNIFORM))
    return EmbeddingTable(_to_unit_f32(rows), "clumped", seed=seed, tokens=tokens)


# ---------------------------------------------------------------- file formats


def _finalize_loaded(rows: np.ndarray, tokens: list[str], where: str) -> EmbeddingTable:
    if len(set(tokens)) != len(tokens):
        seen = set()
        for i, tok in enumerate(tokens):
            if tok in seen:
                raise TableParseError(f"duplicate token {tok!r} (row {i})", where)
            seen.add(tok)
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    if (norms == 0).any():
        raise TableParseError(f"row {int(np.flatnonzero(norms == 0)[0])} is the zero vector", where)
    dev = np.abs(norms - 1.0)
    if dev.max() > RENORM_WARN_TOL:
        worst = int(dev.argmax())
        warnings.warn(
            f"{(dev > RENORM_WARN_TOL).sum()} rows renormalized (row {worst} had norm {norms[worst]:.6g})",
            EmbeddingNormWarning,
            stacklevel=3,
        )
    fix = dev > NORM_TOL
    if fix.any():
        rows = rows.copy()
        rows[fix] = (rows[fix].astype(np.float64) / norms[fix, None]).astype(np.float32)
    kind = "imported"
    probe = EmbeddingTable(rows, kind, tokens=tuple(tokens))
    if probe.is_hypercube_pattern():
        return EmbeddingTable(probe.rows, "hypercube", tokens=probe.tokens)
    return probe


def _load_text(path) -> EmbeddingTable:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2:
            raise TableParseError("header must be '<|V|> <d>'", "line 1")
        try:
            n, d = int(parts[0]), int(parts[1])
        except ValueError:
            raise TableParseError(f"non-integer header {header.strip()!r}", "line 1") from None
        if n < 1 or d < 2:
            raise TableParseError(f"invalid sizes |V|={n}, d={d}", "line 1")
        rows = np.empty((n, d), dtype=np.float32)
        tokens: list[str] = []
        lineno = 1
        for i in range(n):
            line = fh.readline()
            lineno += 1
            if not line:
                raise TableParseError(f"expected {n} rows, found {i} (unexpected EOF)", f"line {lineno}")
            fields = line.rstrip("\n").split(" ")
            if len(fields) != d + 1:
                raise TableParseError(f"expected token and {d} values, got {len(fields)} fields", f"line {lineno}")
            try:
                vals = np.array([float(v) for v in fields[1:]])
            except ValueError:
                raise TableParseError("non-numeric coordinate", f"line {lineno}") from None
            if not np.isfinite(vals).all():
                raise TableParseError("NaN or Inf coordinate", f"line {lineno}")
            rows[i] = vals
            tokens.append(fields[0])
        if fh.readline().strip():
            raise TableParseError(f"trailing data after {n} rows", f"line {lineno + 1}")
    return _finalize_loaded(rows, tokens, str(path))


def _load_binary(path) -> EmbeddingTable:
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)

    def take(nbytes: int, what: str) -> bytes:
        off = buf.tell()
        chunk = buf.read(nbytes)
        if len(chunk) != nbytes:
            raise TableParseError(f"truncated {what}", f"offset {off}")
        return chunk

    if take(4, "magic") != BINARY_MAGIC:
        raise TableParseError("bad magic, expected CEMB", "offset 0")
    version, n, d = struct.unpack("<III", take(12, "header"))
    if version != BINARY_VERSION:
        raise TableParseError(f"unsupported version {version}", "offset 4")
    if n < 1 or d < 2:
        raise TableParseError(f"invalid sizes |V|={n}, d={d}", "offset 8")
    off = buf.tell()
    rows = np.frombuffer(take(4 * n * d, "rows"), dtype="<f4").reshape(n, d).astype(np.float32)
    if not np.isfinite(rows).all():
        bad = int(np.flatnonzero(~np.isfinite(rows.ravel()))[0])
        raise TableParseError("NaN or Inf coordinate", f"offset {off + 4 * bad}")
    tokens = []
    for _ in range(n):
        (length,) = struct.unpack("<I", take(4, "token length"))
        off = buf.tell()
        try:
            tokens.append(take(length, "token").decode("utf-8"))
        except UnicodeDecodeError:
            raise TableParseError("token is not valid UTF-8", f"offset {off}") from None
    if buf.read(1):
        raise TableParseError("trailing bytes", f"offset {buf.tell() - 1}")
    return _finalize_loaded(rows, tokens, str(path))


def infer_format(path) -> str:
    return "text-vec" if Path(path).suffix in (".txt", ".vec") else "binary"


def load_table(path, format: str | None = None) -> EmbeddingTable:
    format = format or infer_format(path)
    if format == "text-vec":
        return _load_text(path)
    if format == "binary":
        return _load_binary(path)
    raise InvalidArgumentError(f"unknown table format {format!r}")


def save_table(table: EmbeddingTable, path, format: str | None = None) -> None:
    format = format or infer_format(path)
    tokens = table.token_names()
    if format == "text-vec":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{table.size} {table.d}\n")
            for tok, row in zip(tokens, table.rows):
                if not tok or any(c.isspace() for c in tok):
                    raise InvalidArgumentError(f"token {tok!r} cannot be written to a text table")
                fh.write(tok + " " + " ".join(f"{float(v):.9g}" for v in row) + "\n")
    elif format == "binary":
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<III", BINARY_VERSION, table.size, table.d))
            fh.write(table.rows.astype("<f4").tobytes())
            for tok in tokens:
                raw = tok.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
    else:
        raise InvalidArgumentError(f"unknown table format {format!r}")
