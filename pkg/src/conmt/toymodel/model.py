"""A small recurrent encoder-decoder that predicts target embeddings.

Encoder: decoder step ``t`` reads a position-weighted pool of the source
embeddings, ``enc_t = sum_j P[t, j] * S[x_j]``; ``P`` starts as plain mean
pooling (every entry ``1 / max_len``) and is learned.

Decoder: ``s_t = tanh(W [s_{t-1}; E[y_{t-1}]; enc_t; 1])`` with ``s_0 = 0`` and
a zero vector standing in for the embedding of the (absent) token before the
first step, then ``h_t = U [s_t; 1]``. ``E`` is the target table; it is the
same matrix the outputs are scored against.

All gradients are written out by hand; ``loss_and_grads`` is what the
finite-difference tests check.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..embedspace import EmbeddingTable, load_table, save_table
from ..errors import InvalidArgumentError, TableParseError
from .tasks import EOS

PARAM_NAMES = ("src_emb", "pos", "W", "out")
CKPT_MAGIC = b"CTOY"
CKPT_VERSION = 1


@dataclass
class Batch:
    src: np.ndarray  # (B, Ls) int, padded with 0
    src_mask: np.ndarray  # (B, Ls) float
    dec_in: np.ndarray  # (B, T) previous target id, -1 before the first step
    tgt: np.ndarray  # (B, T) target id (EOS closes each sequence)
    tgt_mask: np.ndarray  # (B, T) float

    @classmethod
    def from_pairs(cls, pairs, eos: int = EOS) -> "Batch":
        b = len(pairs)
        ls = max(len(s) for s, _ in pairs)
        lt = max(len(t) for _, t in pairs) + 1
        src = np.zeros((b, ls), dtype=np.int64)
        src_mask = np.zeros((b, ls))
        dec_in = np.full((b, lt), -1, dtype=np.int64)
        tgt = np.zeros((b, lt), dtype=np.int64)
        tgt_mask = np.zeros((b, lt))
        for i, (s, t) in enumerate(pairs):
            src[i, : len(s)] = s
            src_mask[i, : len(s)] = 1.0
            full = list(t) + [eos]
            tgt[i, : len(full)] = full
            tgt_mask[i, : len(full)] = 1.0
            dec_in[i, 1 : len(full)] = full[:-1]
        return cls(src, src_mask, dec_in, tgt, tgt_mask)


class ToySeq2Seq:
    """Parameters ``src_emb`` (V_src x d), ``pos`` (L x L), ``W`` (H x (H+2d+1)),
    ``out`` (d x (H+1)) plus a reference to the target table.

    ``targets64`` is the float64 working copy of the target rows; it only
    changes when training with trainable targets.
    """

    def __init__(self, params: dict[str, np.ndarray], targets: EmbeddingTable):
        self.params = params
        self.targets = targets
        self.targets64 = targets.unit.copy()
        d = targets.d
        if params["src_emb"].shape[1] != d or params["out"].shape[0] != d:
            raise InvalidArgumentError("parameter shapes do not match the target dimension")

    @classmethod
    def init(cls, targets: EmbeddingTable, src_vocab: int, hidden: int = 128, max_len: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = targets.d
        fan_in = hidden + 2 * d + 1
        params = {
            "src_emb": rng.standard_normal((src_vocab, d)) / np.sqrt(d),
            "pos": np.full((max_len, max_len), 1.0 / max_len),
            "W": rng.standard_normal((hidden, fan_in)) / np.sqrt(fan_in),
            "out": rng.standard_normal((d, hidden + 1)) / np.sqrt(hidden + 1),
        }
        return cls(params, targets)

    @property
    def d(self) -> int:
        return self.targets.d

    @property
    def hidden(self) -> int:
        return self.params["W"].shape[0]

    @property
    def max_len(self) -> int:
        return self.params["pos"].shape[0]

    @property
    def src_vocab(self) -> int:
        return self.params["src_emb"].shape[0]

    def n_parameters(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def sync_targets(self) -> None:
        """Rebuild the immutable table from the working copy after training."""
        self.targets = EmbeddingTable(self.targets64, "imported", tokens=self.targets.tokens)
        self.targets64 = self.targets.unit.copy()

    def _check_src(self, src) -> None:
        if len(src) > self.max_len:
            raise InvalidArgumentError(f"source length {len(src)} exceeds model max_len {self.max_len}")
        for x in src:
            if not 0 <= x < self.src_vocab:
                raise InvalidArgumentError(f"source token {x} out of range")

    # ------------------------------------------------------------ forward

    def forward(self, src, tgt_prefix=()) -> np.ndarray:
        """Teacher-forced hidden states ``h_1 .. h_{n+1}`` for a prefix of length n."""
        self._check_src(src)
        for y in tgt_prefix:
            if not 0 <= y < self.targets.size:
                raise InvalidArgumentError(f"target token {y} out of range")
        b = Batch.from_pairs([(tuple(src), tuple(tgt_prefix))])
        hs, _ = _forward(self.params, self.targets64, b)
        return hs[0]

    # ---------------------------------------------- incremental decoding API

    def start(self, src):
        self._check_src(src)
        xs = self.params["src_emb"][np.asarray(src, dtype=np.int64)]
        return (np.zeros(self.hidden), 0, xs)

    def step(self, state, prev_token):
        s, t, xs = state
        p = self.params
        d = self.d
        row = min(t, self.max_len - 1)
        enc = p["pos"][row, : xs.shape[0]] @ xs
        prev = self.targets64[prev_token] if prev_token is not None else np.zeros(d)
        z = np.concatenate([s, prev, enc, [1.0]])
        s = np.tanh(p["W"] @ z)
        h = p["out"] @ np.append(s, 1.0)
        return h, (s, t + 1, xs)

    # ------------------------------------------------------------ persistence

    def save(self, prefix) -> tuple[Path, Path]:
        prefix = Path(prefix)
        table_path = prefix.with_name(prefix.name + ".cemb")
        blob_path = prefix.with_name(prefix.name + ".ctoy")
        save_table(self.targets, table_path, "binary")
        meta = json.dumps({"hidden": self.hidden, "max_len": self.max_len, "src_vocab": self.src_vocab, "d": self.d}).encode()
        with open(blob_path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(meta)))
            fh.write(meta)
            fh.write(struct.pack("<I", len(PARAM_NAMES)))
            for name in PARAM_NAMES:
                arr = np.ascontiguousarray(self.params[name], dtype="<f8")
                raw = name.encode()
                fh.write(struct.pack("<I", len(raw)) + raw)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
        return table_path, blob_path

    @classmethod
    def load(cls, prefix) -> "ToySeq2Seq":
        prefix = Path(prefix)
        targets = load_table(prefix.with_name(prefix.name + ".cemb"), "binary")
        blob_path = prefix.with_name(prefix.name + ".ctoy")
        data = blob_path.read_bytes()
        if data[:4] != CKPT_MAGIC:
            raise TableParseError("bad magic, expected CTOY", "offset 0")
        pos = 4

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(data):
                raise TableParseError("truncated checkpoint", f"offset {pos}")
            vals = struct.unpack_from(fmt, data, pos)
            pos += size
            return vals

        version, meta_len = take("<II")
        if version != CKPT_VERSION:
            raise TableParseError(f"unsupported checkpoint version {version}", "offset 4")
        pos += meta_len  # metadata is informational; shapes come from the tensors
        (n,) = take("<I")
        params = {}
        for _ in range(n):
            (name_len,) = take("<I")
            name = data[pos : pos + name_len].decode()
            pos += name_len
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            count = int(np.prod(shape))
            if pos + 8 * count > len(data):
                raise TableParseError(f"truncated tensor {name}", f"offset {pos}")
            params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise TableParseError(f"missing tensors {sorted(missing)}", str(blob_path))
        return cls(params, targets)


# ------------------------------------------------------------------ core math


def _forward(params, E, batch: Batch):
    S, P, W, U = params["src_emb"], params["pos"], params["W"], params["out"]
    B, T = batch.tgt.shape
    H = W.shape[0]
    d = E.shape[1]
    L = P.shape[0]
    xs = S[batch.src] * batch.src_mask[..., None]  # (B, Ls, d)
    rows = np.minimum(np.arange(T), L - 1)
    Pt = P[rows][:, : xs.shape[1]]  # (T, Ls)
    enc = np.einsum("tj,bjd->btd", Pt, xs)
    prev_emb = np.where((batch.dec_in >= 0)[..., None], E[np.maximum(batch.dec_in, 0)], 0.0)
    s = np.zeros((B, H))
    zs = np.empty((B, T, H + 2 * d + 1))
    states = np.empty((B, T, H))
    ones = np.ones((B, 1))
    for t in range(T):
        z = np.concatenate([s, prev_emb[:, t], enc[:, t], ones], axis=1)
        s = np.tanh(z @ W.T)
        zs[:, t] = z
        states[:, t] = s
    s1 = np.concatenate([states, np.ones((B, T, 1))], axis=2)
    hs = s1 @ U.T
    cache = dict(xs=xs, rows=rows, Pt=Pt, zs=zs, states=states, s1=s1)
    return hs, cache


def _cosine_loss_terms(E, hs, batch: Batch):
    mask = batch.tgt_mask
    n = mask.sum()
    e = E[batch.tgt]
    en = np.linalg.norm(e, axis=-1)
    hn = np.linalg.norm(hs, axis=-1)
    if (hn[mask > 0] <= 1e-12).any():
        raise FloatingPointError("degenerate hidden state during training")
    hn = np.where(mask > 0, hn, 1.0)
    dot = (e * hs).sum(-1)
    cos = dot / (en * hn)
    loss = float(((1.0 - cos) * mask).sum() / n)
    w = (mask / n)[..., None]
    gh = -(e / (en * hn)[..., None] - cos[..., None] * hs / (hn * hn)[..., None]) * w
    ge = -(hs / (en * hn)[..., None] - cos[..., None] * e / (en * en)[..., None]) * w
    return loss, gh, ge


def _discrete_loss_terms(E, hs, batch: Batch):
    mask = batch.tgt_mask
    n = mask.sum()
    logits = hs @ E.T  # (B, T, V)
    m = logits.max(-1, keepdims=True)
    logz = m[..., 0] + np.log(np.exp(logits - m).sum(-1))
    gold = np.take_along_axis(logits, batch.tgt[..., None], -1)[..., 0]
    loss = float(((logz - gold) * mask).sum() / n)
    p = np.exp(logits - logz[..., None])
    np.put_along_axis(p, batch.tgt[..., None], np.take_along_axis(p, batch.tgt[..., None], -1) - 1.0, -1)
    p *= (mask / n)[..., None]
    gh = p @ E
    gE = np.einsum("btv,btd->vd", p, hs)
    return loss, gh, gE


def loss_and_grads(params, E, batch: Batch, loss: str = "cosine", target_grad: bool = False):
    """Mean per-token loss and gradients for every parameter (and ``E`` if asked)."""
    hs, c = _forward(params, E, batch)
    if loss == "cosine":
        value, gh, ge = _cosine_loss_terms(E, hs, batch)
        gE = None
        if target_grad:
            gE = np.zeros_like(E)
            np.add.at(gE, batch.tgt, ge)
    elif loss == "discrete":
        value, gh, gE_full = _discrete_loss_terms(E, hs, batch)
        gE = gE_full if target_grad else None
    else:
        raise InvalidArgumentError(f"unknown loss {loss!r}")

    S, P, W, U = params["src_emb"], params["pos"], params["W"], params["out"]
    B, T = batch.tgt.shape
    H = W.shape[0]
    d = E.shape[1]
    gU = np.einsum("btd,bth->dh", gh, c["s1"])
    g_state = gh @ U[:, :H]
    gW = np.zeros_like(W)
    genc = np.empty((B, T, d))
    gprev = np.empty((B, T, d))
    carry = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        s = c["states"][:, t]
        ga = (g_state[:, t] + carry) * (1.0 - s * s)
        gW += ga.T @ c["zs"][:, t]
        gz = ga @ W
        carry = gz[:, :H]
        gprev[:, t] = gz[:, H : H + d]
        genc[:, t] = gz[:, H + d : H + 2 * d]
    gP = np.zeros_like(P)
    np.add.at(gP[:, : c["xs"].shape[1]], c["rows"], np.einsum("btd,bjd->tj", genc, c["xs"]))
    gxs = np.einsum("tj,btd->bjd", c["Pt"], genc) * batch.src_mask[..., None]
    gS = np.zeros_like(S)
    np.add.at(gS, batch.src, gxs)
    grads = {"src_emb": gS, "pos": gP, "W": gW, "out": gU}
    if target_grad:
        valid = batch.dec_in >= 0
        np.add.at(gE, batch.dec_in[valid], gprev[valid])
        grads["targets"] = gE
    return value, grads


def loss_only(params, E, batch: Batch, loss: str = "cosine") -> float:
    hs, _ = _forward(params, E, batch)
    if loss == "cosine":
        return _cosine_loss_terms(E, hs, batch)[0]
    return _discrete_loss_terms(E, hs, batch)[0]


def greedy_batch(model: ToySeq2Seq, srcs, max_extra: int = 200, eos: int = EOS) -> list[list[int]]:
    """Greedy nearest-neighbor decoding of many sources in lockstep."""
    from ..decoder import build_index, nearest_batch

    index = build_index(model.targets)
    p = model.params
    n = len(srcs)
    if n == 0:
        return []
    for s in srcs:
        model._check_src(s)
    ls = max(len(s) for s in srcs)
    src = np.zeros((n, ls), dtype=np.int64)
    mask = np.zeros((n, ls))
    for i, s in enumerate(srcs):
        src[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    xs = p["src_emb"][src] * mask[..., None]
    limits = np.array([len(s) + max_extra for s in srcs])
    s = np.zeros((n, model.hidden))
    prev = np.zeros((n, model.d))
    outs: list[list[int]] = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    ones = np.ones((n, 1))
    t = 0
    while alive.any():
        row = min(t, model.max_len - 1)
        enc = np.einsum("j,bjd->bd", p["pos"][row, :ls], xs)
        z = np.concatenate([s, prev, enc, ones], axis=1)
        s = np.tanh(z @ p["W"].T)
        hs = np.concatenate([s, ones], axis=1) @ p["out"].T
        act = np.flatnonzero(alive)
        idx, _ = nearest_batch(index, hs[act], 1)
        for i, tok in zip(act, idx[:, 0]):
            if tok == eos:
                alive[i] = False
                continue
            outs[i].append(int(tok))
            if len(outs[i]) >= limits[i]:
                alive[i] = False
        prev = model.targets64[np.array([o[-1] if o else 0 for o in outs])]
        t += 1
    return outs
