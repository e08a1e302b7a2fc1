"""Tiny decoder-only transformer with linear attention biases.

No positional embeddings touch the token stream, keys, or values; position
enters only through per-head additive biases.  Two forward paths exist:

* ``forward_full`` runs a whole sequence under an explicit mask and
  explicit per-head biases;
* ``forward_incremental`` extends a KV cache with new tokens, deriving
  visibility and biases from canonical cache tags.

Both paths route every exactness-sensitive step through the same per-row
primitives, so a full-sequence forward and the equivalent sequence of
incremental calls produce bit-identical float32 logits.  ModelParams are
immutable after creation; a KVCache belongs to a single generation session.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from .alibi import PositionalBias, alibi_slopes, rank_biases
from .errors import CacheCoherenceError, ConfigError, DataError, ShapeError
from .kernel import attend_row
from .masks import AttentionMaskSpec, Region

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = 24
    seed: int = 0

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.vocab_size) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.n_heads & (self.n_heads - 1):
            raise ConfigError(f"n_heads must be a power of two, got {self.n_heads}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    embed: np.ndarray
    layers: tuple[LayerParams, ...]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_out: np.ndarray

    def tensors(self):
        """Deterministically ordered (name, array) pairs."""
        yield "embed", self.embed
        for i, lp in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w1", "w2",
                         "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                yield f"layers.{i}.{name}", getattr(lp, name)
        yield "lnf_g", self.lnf_g
        yield "lnf_b", self.lnf_b
        yield "w_out", self.w_out

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.tensors())

    def with_tensors(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        """New ModelParams taking each tensor from ``arrays``."""
        layers = []
        for i in range(self.config.n_layers):
            kw = {name: arrays[f"layers.{i}.{name}"]
                  for name in ("wq", "wk", "wv", "wo", "w1", "w2",
                               "ln1_g", "ln1_b", "ln2_g", "ln2_b")}
            layers.append(LayerParams(**kw))
        return replace(self, embed=arrays["embed"], layers=tuple(layers),
                       lnf_g=arrays["lnf_g"], lnf_b=arrays["lnf_b"],
                       w_out=arrays["w_out"])

    def astype(self, dtype) -> "ModelParams":
        return self.with_tensors({k: v.astype(dtype) for k, v in self.tensors()})


def init_model(config: ModelConfig) -> ModelParams:
    """Deterministic pseudo-random initialization from config.seed."""
    rng = np.random.default_rng(config.seed)
    d, v = config.d_model, config.vocab_size

    def w(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(np.float32)

    embed = w(v, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
            w1=w(d, 4 * d), w2=w(4 * d, d),
            ln1_g=np.ones(d, dtype=np.float32),
            ln1_b=np.zeros(d, dtype=np.float32),
            ln2_g=np.ones(d, dtype=np.float32),
            ln2_b=np.zeros(d, dtype=np.float32),
        ))
    return ModelParams(
        config=config, embed=embed, layers=tuple(layers),
        lnf_g=np.ones(d, dtype=np.float32), lnf_b=np.zeros(d, dtype=np.float32),
        w_out=w(d, v))


class FlopCounter:
    """Shadow counter incremented at each matmul site with its true sizes.

    Convention: one multiply-accumulate = 2 operations; only matrix products
    are counted (no softmax, normalization, activation, or embedding
    lookup costs).
    """

    def __init__(self):
        self.total = 0
        self.kv_rows = 0  # (token, layer) pairs whose keys/values were built

    def add_linear(self, tokens: int, d_in: int, d_out: int):
        self.total += 2 * tokens * d_in * d_out

    def add_attention_row(self, n_visible: int, d_head: int):
        # one query row, one head: scores + weighted sum
        self.total += 4 * n_visible * d_head


@dataclass(frozen=True, order=True)
class CacheTag:
    """Canonical identity of a cached token: region plus index within it.

    Ordering is canonical sequence order, independent of arrival order.
    """

    role: Region
    canonical_index: int


@dataclass
class _CacheEntry:
    tag: CacheTag
    arrival: int
    k: list  # per layer (n_heads, d_head)
    v: list


class KVCache:
    """Per-layer cached keys/values tagged with canonical positions.

    Storage order is arrival order, but nothing downstream depends on it:
    attention always gathers entries sorted by tag.  One logical owner per
    cache; no concurrent mutation.
    """

    def __init__(self, n_layers: int):
        if n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        self.n_layers = n_layers
        self.entries: list[_CacheEntry] = []
        self._role_counts = {r: 0 for r in Region}
        self._next_arrival = 0

    def __len__(self) -> int:
        return len(self.entries)

    def role_count(self, role: Region) -> int:
        return self._role_counts[role]

    def validate_extension(self, tag: CacheTag, pending: dict[Region, int]):
        """Check that ``tag`` validly extends canonical order.

        Within each region, indices must arrive contiguously from 0;
        ``pending`` counts tags already accepted in the current call.
        """
        expected = self._role_counts[tag.role] + pending.get(tag.role, 0)
        if tag.canonical_index != expected:
            raise CacheCoherenceError(
                f"{tag} does not extend canonical order (expected index {expected})")

    def append(self, tag: CacheTag, k_layers: list, v_layers: list) -> _CacheEntry:
        entry = _CacheEntry(tag=tag, arrival=self._next_arrival,
                            k=k_layers, v=v_layers)
        self.entries.append(entry)
        self._role_counts[tag.role] += 1
        self._next_arrival += 1
        return entry

    @property
    def next_arrival(self) -> int:
        return self._next_arrival

    def tags(self) -> list[CacheTag]:
        return [e.tag for e in self.entries]

    def permute_storage(self, perm):
        """Reorder physical storage (testing hook; outputs must not change)."""
        if sorted(perm) != list(range(len(self.entries))):
            raise ConfigError("perm must be a permutation of cache indices")
        self.entries = [self.entries[i] for i in perm]


def _ln_row(x: np.ndarray, gain: np.ndarray, offset: np.ndarray) -> np.ndarray:
    mu = x.mean(dtype=x.dtype)
    var = np.mean((x - mu) * (x - mu), dtype=x.dtype)
    return (x - mu) / np.sqrt(var + x.dtype.type(LN_EPS)) * gain + offset


def _gelu(x: np.ndarray) -> np.ndarray:
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    return x.dtype.type(0.5) * x * (1.0 + np.tanh(c * (x + x.dtype.type(0.044715) * (x * x * x))))


def _row_qkv(lp: LayerParams, h_row: np.ndarray, n_heads: int, d_head: int,
             flops: FlopCounter | None):
    a = _ln_row(h_row, lp.ln1_g, lp.ln1_b)
    if flops:
        flops.kv_rows += 1
        for _ in range(3):
            flops.add_linear(1, a.size, a.size)
    q = (a @ lp.wq).reshape(n_heads, d_head)
    k = (a @ lp.wk).reshape(n_heads, d_head)
    v = (a @ lp.wv).reshape(n_heads, d_head)
    return q, k, v


def _row_after_attention(lp: LayerParams, h_row: np.ndarray, ctx: np.ndarray,
                         flops: FlopCounter | None) -> np.ndarray:
    d = h_row.size
    if flops:
        flops.add_linear(1, d, d)
        flops.add_linear(1, d, 4 * d)
        flops.add_linear(1, 4 * d, d)
    h2 = h_row + ctx @ lp.wo
    b = _ln_row(h2, lp.ln2_g, lp.ln2_b)
    return h2 + _gelu(b @ lp.w1) @ lp.w2


def _row_logits(params: ModelParams, h_row: np.ndarray,
                flops: FlopCounter | None) -> np.ndarray:
    if flops:
        flops.add_linear(1, params.config.d_model, params.config.vocab_size)
    return _ln_row(h_row, params.lnf_g, params.lnf_b) @ params.w_out


def forward_full(params: ModelParams, tokens, mask: AttentionMaskSpec,
                 biases: list[PositionalBias],
                 flops: FlopCounter | None = None) -> np.ndarray:
    """Logits (L, vocab) of a full sequence under an explicit mask/bias."""
    cfg = params.config
    tokens = list(tokens)
    L = len(tokens)
    if mask.rows != L or mask.cols != L:
        raise ShapeError(f"mask is {mask.rows}x{mask.cols}, sequence length {L}")
    if len(biases) != cfg.n_heads:
        raise ShapeError(f"need {cfg.n_heads} bias matrices, got {len(biases)}")
    for b in biases:
        if b.matrix.shape != (L, L):
            raise ShapeError("bias shape does not match sequence length")
    if any(not 0 <= t < cfg.vocab_size for t in tokens):
        raise ShapeError("token id outside vocabulary")

    h = [params.embed[t].copy() for t in tokens]
    for lp in params.layers:
        qkv = [_row_qkv(lp, h[i], cfg.n_heads, cfg.d_head, flops) for i in range(L)]
        ks = np.stack([t[1] for t in qkv])  # (L, H, dh)
        vs = np.stack([t[2] for t in qkv])
        new_h = []
        for i in range(L):
            vis = np.flatnonzero(mask.visible[i])
            ctx = np.empty(cfg.d_model, dtype=h[i].dtype)
            for hd in range(cfg.n_heads):
                if flops:
                    flops.add_attention_row(vis.size, cfg.d_head)
                ctx[hd * cfg.d_head:(hd + 1) * cfg.d_head] = attend_row(
                    qkv[i][0][hd],
                    np.ascontiguousarray(ks[vis, hd]),
                    np.ascontiguousarray(vs[vis, hd]),
                    biases[hd].matrix[i][vis],
                )
            new_h.append(_row_after_attention(lp, h[i], ctx, flops))
        h = new_h
    return np.stack([_row_logits(params, row, flops) for row in h])


def default_attendable(query_tag: CacheTag, key_tag: CacheTag) -> bool:
    """Canonical-prefix visibility: a token sees keys at or before itself.

    Because mid-prompt and target tags order after all source tags, a
    source token ingested late automatically ignores the mid-prompt and
    target entries already sitting in the cache.
    """
    return key_tag <= query_tag


def forward_incremental(params: ModelParams, cache: KVCache, new_tokens,
                        attendable=None, bias_scheme: str = "rank",
                        flops: FlopCounter | None = None):
    """Extend ``cache`` with tagged tokens; return (logits for them, cache).

    ``new_tokens`` is a sequence of (token_id, CacheTag).  Each new token
    attends to the visible cache entries, visible earlier new tokens, and
    itself, gathered in canonical tag order.  Per-head biases follow
    ``bias_scheme``:

    * ``"rank"``: -slope * (canonical-rank distance within the visible
      set), nearest key 0 — the scheme matching visibility-aware training
      biases;
    * ``"stale"``: -slope * (arrival distance), with each entry's absolute
      position frozen at its arrival — the scheme a naive cache implements,
      kept as a negative control.
    """
    cfg = params.config
    if cache.n_layers != cfg.n_layers:
        raise CacheCoherenceError("cache layer count differs from model")
    if bias_scheme not in ("rank", "stale"):
        raise ConfigError(f"unknown bias scheme {bias_scheme!r}")
    if attendable is None:
        attendable = default_attendable
    new_tokens = list(new_tokens)
    pending: dict[Region, int] = {}
    for tok, tag in new_tokens:
        if not 0 <= tok < cfg.vocab_size:
            raise ShapeError("token id outside vocabulary")
        cache.validate_extension(tag, pending)
        pending[tag.role] = pending.get(tag.role, 0) + 1

    slopes = alibi_slopes(cfg.n_heads)
    m = len(new_tokens)
    arrivals = [cache.next_arrival + i for i in range(m)]
    h = [params.embed[tok].copy() for tok, _ in new_tokens]
    k_new = [[None] * m for _ in range(cfg.n_layers)]
    v_new = [[None] * m for _ in range(cfg.n_layers)]

    # visible set of each new token: (tag, arrival, source) where source is
    # either a cache entry or an in-call index; fixed across layers
    visible_refs: list[list] = []
    for i, (_, qtag) in enumerate(new_tokens):
        refs = [(e.tag, e.arrival, ("cache", e)) for e in cache.entries
                if attendable(qtag, e.tag)]
        refs += [(new_tokens[j][1], arrivals[j], ("new", j)) for j in range(i)
                 if attendable(qtag, new_tokens[j][1])]
        refs.append((qtag, arrivals[i], ("new", i)))
        refs.sort(key=lambda r: (r[0], r[1]))
        visible_refs.append(refs)

    for li, lp in enumerate(params.layers):
        qkv = [_row_qkv(lp, h[i], cfg.n_heads, cfg.d_head, flops) for i in range(m)]
        for i in range(m):
            k_new[li][i] = qkv[i][1]
            v_new[li][i] = qkv[i][2]
        new_h = []
        for i in range(m):
            refs = visible_refs[i]
            k_rows, v_rows = [], []
            for _, _, (kind, src) in refs:
                if kind == "cache":
                    k_rows.append(src.k[li])
                    v_rows.append(src.v[li])
                else:
                    k_rows.append(k_new[li][src])
                    v_rows.append(v_new[li][src])
            k_all = np.stack(k_rows)  # (n, H, dh)
            v_all = np.stack(v_rows)
            n = len(refs)
            ctx = np.empty(cfg.d_model, dtype=h[i].dtype)
            for hd in range(cfg.n_heads):
                if bias_scheme == "rank":
                    bias_vec = rank_biases(n, slopes[hd])
                else:
                    deltas = np.array([arrivals[i] - a for _, a, _ in refs],
                                      dtype=np.float32)
                    bias_vec = -np.float32(slopes[hd]) * deltas
                if flops:
                    flops.add_attention_row(n, cfg.d_head)
                ctx[hd * cfg.d_head:(hd + 1) * cfg.d_head] = attend_row(
                    qkv[i][0][hd],
                    np.ascontiguousarray(k_all[:, hd]),
                    np.ascontiguousarray(v_all[:, hd]),
                    bias_vec,
                )
            new_h.append(_row_after_attention(lp, h[i], ctx, flops))
        h = new_h

    logits = np.stack([_row_logits(params, row, flops) for row in h])
    for i, (_, tag) in enumerate(new_tokens):
        cache.append(tag, [k_new[li][i] for li in range(cfg.n_layers)],
                     [v_new[li][i] for li in range(cfg.n_layers)])
    return logits, cache


def save_params(params: ModelParams, path: str):
    """Checkpoint: one-line JSON header, then float32 little-endian data."""
    tensors = list(params.tensors())
    offset = 0
    index = []
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "config": {
            "n_layers": params.config.n_layers,
            "n_heads": params.config.n_heads,
            "d_model": params.config.d_model,
            "vocab_size": params.config.vocab_size,
            "seed": params.config.seed,
        },
        "tensors": index,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path: str) -> ModelParams:
    try:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            raw = fh.read()
        config = ModelConfig(**header["config"])
        flat = np.frombuffer(raw, dtype="<f4")
        arrays = {}
        for spec in header["tensors"]:
            size = int(np.prod(spec["shape"])) if spec["shape"] else 1
            chunk = flat[spec["offset"]:spec["offset"] + size]
            if chunk.size != size:
                raise DataError(f"checkpoint {path} truncated at {spec['name']}")
            arrays[spec["name"]] = chunk.reshape(spec["shape"]).astype(np.float32)
        template = init_model(config)
        return template.with_tensors(arrays)
    except (OSError, ValueError, KeyError, TypeError,
            UnicodeDecodeError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
