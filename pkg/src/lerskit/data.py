"""Loading, preprocessing, splitting, and sampling for both tasks.

CF files: one `user_id<TAB>item_id` pair per line (0-based ints), optional
`#` header lines. CTR files: `label<TAB>field1<TAB>field2...` raw string
values, with a sidecar schema declaring `field_index:numeric|categorical`
per line.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MISSING_TOKEN = "<missing>"
OOV_TOKEN = "<oov>"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------------------
# collaborative filtering
# ---------------------------------------------------------------------------

@dataclass
class InteractionSet:
    user_count: int
    item_count: int
    pairs: np.ndarray  # (N, 2) int64
    tag: str = "train"
    _by_user: list[np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.pairs.size:
            if self.pairs.min() < 0 or self.pairs[:, 0].max() >= self.user_count \
                    or self.pairs[:, 1].max() >= self.item_count:
                raise DataError(f"{self.tag}: interaction ids out of range")
        uniq = np.unique(self.pairs, axis=0)
        if uniq.shape[0] != self.pairs.shape[0]:
            log.warning("%s split: dropped %d duplicate interactions",
                        self.tag, self.pairs.shape[0] - uniq.shape[0])
            self.pairs = uniq

    def items_by_user(self) -> list[np.ndarray]:
        if self._by_user is None:
            buckets: list[list[int]] = [[] for _ in range(self.user_count)]
            for u, v in self.pairs:
                buckets[u].append(v)
            self._by_user = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
        return self._by_user

    def __len__(self) -> int:
        return self.pairs.shape[0]


def load_cf_file(path) -> list[tuple[int, int]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: expected 'user<TAB>item'")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer ids") from None
            if u < 0 or v < 0:
                raise DataError(f"{path}:{lineno}: negative id")
            pairs.append((u, v))
    if not pairs:
        raise DataError(f"{path}: no interactions")
    return pairs


def load_cf_dataset(directory) -> tuple[InteractionSet, InteractionSet]:
    """Load `train.tsv` / `test.tsv` from a directory. Test items missing
    from training are kept and scored normally."""
    directory = Path(directory)
    train_pairs = load_cf_file(directory / "train.tsv")
    test_pairs = load_cf_file(directory / "test.tsv")
    all_pairs = train_pairs + test_pairs
    n_users = max(u for u, _ in all_pairs) + 1
    n_items = max(v for _, v in all_pairs) + 1
    return (InteractionSet(n_users, n_items, np.array(train_pairs), tag="train"),
            InteractionSet(n_users, n_items, np.array(test_pairs), tag="test"))


def split_per_user(interactions: InteractionSet, ratio: float,
                   rng: np.random.Generator | None = None) -> tuple[InteractionSet, InteractionSet]:
    """Per-user split: floor(ratio * count) interactions stay in train (at
    least 1, and at least 1 goes to validation when the user has >= 2)."""
    if not (0.0 < ratio < 1.0):
        raise ValueError("ratio must lie in (0, 1)")
    rng = rng or np.random.default_rng(0)
    train_rows, valid_rows = [], []
    for u, items in enumerate(interactions.items_by_user()):
        cnt = items.size
        if cnt == 0:
            continue
        if cnt == 1:
            train_rows.append((u, int(items[0])))
            continue
        n_train = min(cnt - 1, max(1, int(np.floor(ratio * cnt))))
        perm = rng.permutation(cnt)
        for j in perm[:n_train]:
            train_rows.append((u, int(items[j])))
        for j in perm[n_train:]:
            valid_rows.append((u, int(items[j])))
    return (InteractionSet(interactions.user_count, interactions.item_count,
                           np.array(train_rows), tag="train"),
            InteractionSet(interactions.user_count, interactions.item_count,
                           np.array(valid_rows), tag="valid"))


def sample_negatives(train: InteractionSet, user: int, count: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Uniform draws (resampling on collision) from the items the user has
    not interacted with in train."""
    seen = train.items_by_user()[user]
    if seen.size >= train.item_count:
        raise DataError(f"user {user} interacted with every item; no negatives exist")
    if count == 0:
        return np.empty(0, dtype=np.int64)
    out = np.empty(count, dtype=np.int64)
    filled = 0
    while filled < count:
        draw = rng.integers(0, train.item_count, size=count - filled)
        pos = np.searchsorted(seen, draw)
        collided = (pos < seen.size) & (seen[np.minimum(pos, seen.size - 1)] == draw)
        good = draw[~collided]
        out[filled:filled + good.size] = good
        filled += good.size
    return out


def batch_negatives(train: InteractionSet, users: np.ndarray, count: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Vectorized negative sampling: one row of `count` negatives per user."""
    by_user = train.items_by_user()
    out = np.empty((users.size, count), dtype=np.int64)
    draw = rng.integers(0, train.item_count, size=(users.size, count))
    for row, u in enumerate(users):
        seen = by_user[u]
        if seen.size >= train.item_count:
            raise DataError(f"user {u} interacted with every item; no negatives exist")
        cand = draw[row]
        while True:
            pos = np.searchsorted(seen, cand)
            collided = (pos < seen.size) & (seen[np.minimum(pos, seen.size - 1)] == cand)
            if not collided.any():
                break
            cand[collided] = rng.integers(0, train.item_count, size=int(collided.sum()))
        out[row] = cand
    return out


# ---------------------------------------------------------------------------
# CTR preprocessing
# ---------------------------------------------------------------------------

def discretize_numeric(x: int | None) -> int | None:
    """Log-bucket an integer feature value: ceil(log2(x)) when x > 2, the
    value itself otherwise. Missing or negative values map to the missing
    token (returned as None)."""
    if x is None:
        return None
    if not isinstance(x, (int, np.integer)):
        raise TypeError(f"expected integer value, got {type(x).__name__}")
    if x < 0:
        return None
    if x > 2:
        return int(x - 1).bit_length()  # exact ceil(log2(x)) for ints
    return int(x)


@dataclass
class CtrSchema:
    field_types: list[str]  # 'numeric' | 'categorical' per field

    @property
    def n_fields(self) -> int:
        return len(self.field_types)


def load_ctr_schema(path) -> CtrSchema:
    entries: dict[int, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                idx_s, kind = line.split(":")
                idx = int(idx_s)
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected 'field_index:numeric|categorical'") from None
            if kind not in ("numeric", "categorical"):
                raise DataError(f"{path}:{lineno}: unknown field type {kind!r}")
            entries[idx] = kind
    if not entries or sorted(entries) != list(range(len(entries))):
        raise DataError(f"{path}: field indices must cover 0..n-1")
    return CtrSchema([entries[i] for i in range(len(entries))])


def load_ctr_file(path, schema: CtrSchema) -> tuple[np.ndarray, list[list[str]]]:
    """Parse raw rows into (labels, token rows). Numeric fields are
    discretized here; empty values become the missing token."""
    labels: list[int] = []
    rows: list[list[str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != schema.n_fields + 1:
                raise DataError(f"{path}:{lineno}: expected label + {schema.n_fields} fields")
            try:
                y = int(parts[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer label") from None
            if y not in (0, 1):
                raise DataError(f"{path}:{lineno}: label must be 0/1")
            toks: list[str] = []
            for f_idx, raw in enumerate(parts[1:]):
                raw = raw.strip()
                if schema.field_types[f_idx] == "numeric":
                    if raw == "":
                        val = None
                    else:
                        try:
                            val = discretize_numeric(int(raw))
                        except ValueError:
                            raise DataError(f"{path}:{lineno}: non-integer numeric field {f_idx}") from None
                    toks.append(MISSING_TOKEN if val is None else str(val))
                else:
                    toks.append(raw if raw != "" else MISSING_TOKEN)
            labels.append(y)
            rows.append(toks)
    if not rows:
        raise DataError(f"{path}: no records")
    _warn_id_like_fields(rows)
    return np.asarray(labels, dtype=np.int64), rows


def _warn_id_like_fields(rows: list[list[str]]) -> None:
    n = len(rows)
    for f_idx in range(len(rows[0])):
        if len({r[f_idx] for r in rows}) == n and n > 1:
            log.warning("field %d is unique per record (ID-like); consider removing it", f_idx)


@dataclass
class FeatureVocab:
    field_maps: list[dict[str, int]]  # raw value -> global id (non-OOV entries)
    oov_ids: list[int]                # per-field OOV id
    frequencies: dict[int, int]       # global id -> training frequency
    total: int                        # dense id space size

    @property
    def n_fields(self) -> int:
        return len(self.field_maps)

    def encode_row(self, toks: list[str]) -> list[int]:
        return [self.field_maps[f].get(t, self.oov_ids[f]) for f, t in enumerate(toks)]

    def field_offsets(self) -> list[tuple[int, int]]:
        """(first_id, size) per field; ids are dense and field-contiguous."""
        spans = []
        for f, m in enumerate(self.field_maps):
            ids = list(m.values()) + [self.oov_ids[f]]
            spans.append((min(ids), max(ids) - min(ids) + 1))
        return spans


def build_vocab(rows: list[list[str]], min_freq: int = 1) -> FeatureVocab:
    """Dense ids per field from training rows only; values seen fewer than
    `min_freq` times share the field's OOV id ("less than" is strict)."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if not rows:
        raise DataError("cannot build a vocabulary from an empty record set")
    n_fields = len(rows[0])
    field_maps: list[dict[str, int]] = []
    oov_ids: list[int] = []
    freqs: dict[int, int] = {}
    next_id = 0
    for f in range(n_fields):
        counts = Counter(r[f] for r in rows)
        kept = sorted((v for v, c in counts.items() if c >= min_freq),
                      key=lambda v: (-counts[v], v))
        mapping = {}
        for v in kept:
            mapping[v] = next_id
            freqs[next_id] = counts[v]
            next_id += 1
        oov = next_id
        freqs[oov] = sum(c for v, c in counts.items() if c < min_freq)
        next_id += 1
        field_maps.append(mapping)
        oov_ids.append(oov)
    return FeatureVocab(field_maps, oov_ids, freqs, next_id)


@dataclass
class CtrRecordSet:
    n_fields: int
    labels: np.ndarray     # (N,) {0,1}
    feature_ids: np.ndarray  # (N, F) int64
    vocab: FeatureVocab
    tag: str = "train"

    def __post_init__(self):
        if self.feature_ids.size and self.feature_ids.max() >= self.vocab.total:
            raise DataError(f"{self.tag}: feature id out of vocabulary range")

    def __len__(self) -> int:
        return self.labels.shape[0]


def random_split(n: int, fractions: tuple[float, float, float],
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint cover of range(n) with sizes proportional to `fractions`."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    perm = rng.permutation(n)
    b1 = int(round(fractions[0] * n))
    b2 = int(round((fractions[0] + fractions[1]) * n))
    return perm[:b1], perm[b1:b2], perm[b2:]


def load_ctr_dataset(data_path, schema_path, fractions=(0.8, 0.1, 0.1),
                     min_freq: int = 10, seed: int = 0
                     ) -> tuple[CtrRecordSet, CtrRecordSet, CtrRecordSet]:
    """Full CTR pipeline: parse, split, build the vocabulary on the training
    split only, encode all three splits."""
    schema = load_ctr_schema(schema_path)
    labels, rows = load_ctr_file(data_path, schema)
    rng = np.random.default_rng(seed)
    idx_tr, idx_va, idx_te = random_split(len(rows), fractions, rng)
    vocab = build_vocab([rows[i] for i in idx_tr], min_freq=min_freq)

    def encode(idx: np.ndarray, tag: str) -> CtrRecordSet:
        ids = np.asarray([vocab.encode_row(rows[i]) for i in idx], dtype=np.int64)
        if ids.size == 0:
            ids = ids.reshape(0, schema.n_fields)
        return CtrRecordSet(schema.n_fields, labels[idx], ids, vocab, tag=tag)

    return encode(idx_tr, "train"), encode(idx_va, "valid"), encode(idx_te, "test")
