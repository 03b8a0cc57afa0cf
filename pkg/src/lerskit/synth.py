"""Desk-scale synthetic datasets.

The CF generator plants a block structure (user groups preferring item
groups, skewed popularity inside each block) so personalized models have
real signal to find; the CTR generator plants logistic weights plus pairwise
latent interactions over Zipf-distributed feature values.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np


def generate_cf(n_users: int = 600, n_items: int = 800, n_groups: int = 8,
                in_group: float = 0.85, test_fraction: float = 0.2,
                seed: int = 20240817):
    """Returns (train_pairs, test_pairs) as (u, i) lists."""
    rng = np.random.default_rng(seed)
    block = n_items // n_groups
    global_pop = 1.0 / np.arange(1, n_items + 1) ** 0.7
    global_pop = rng.permutation(global_pop)
    global_pop /= global_pop.sum()

    group_probs = []
    for g in range(n_groups):
        members = np.arange(g * block, min((g + 1) * block, n_items))
        local = np.zeros(n_items)
        local[members] = rng.permutation(1.0 / np.arange(1, members.size + 1) ** 0.8)
        local /= local.sum()
        group_probs.append(in_group * local + (1.0 - in_group) * global_pop)

    train, test = [], []
    for u in range(n_users):
        g = u % n_groups
        count = int(np.clip(rng.gamma(shape=3.0, scale=30.0), 15, 280))
        count = min(count, n_items - 1)
        items = rng.choice(n_items, size=count, replace=False, p=group_probs[g])
        rng.shuffle(items)
        n_test = max(1, int(round(test_fraction * count))) if count >= 5 else 0
        for v in items[:count - n_test]:
            train.append((u, int(v)))
        for v in items[count - n_test:]:
            test.append((u, int(v)))
    return train, test


def write_cf_dataset(out_dir, **kwargs) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = generate_cf(**kwargs)
    for name, pairs in (("train.tsv", train), ("test.tsv", test)):
        with open(out_dir / name, "w", encoding="utf-8") as fh:
            fh.write("# user_id<TAB>item_id, 0-based\n")
            for u, v in pairs:
                fh.write(f"{u}\t{v}\n")
    return out_dir


DEFAULT_CTR_FIELDS = (
    ("categorical", 200), ("categorical", 100), ("categorical", 40),
    ("categorical", 12), ("categorical", 4), ("numeric", 0), ("numeric", 0),
)


def generate_ctr(n_records: int = 20000, fields=DEFAULT_CTR_FIELDS,
                 missing_rate: float = 0.05, seed: int = 7):
    """Returns (labels, raw string rows, field type list)."""
    rng = np.random.default_rng(seed)
    n_fields = len(fields)
    numeric_buckets = 48

    latents_w, latents_z = [], []
    for kind, card in fields:
        slots = (card if kind == "categorical" else numeric_buckets) + 1  # + missing
        latents_w.append(rng.normal(0.0, 0.6, size=slots))
        latents_z.append(rng.normal(0.0, 0.45, size=(slots, 4)))

    def zipf_probs(card):
        p = 1.0 / np.arange(1, card + 1) ** 1.1
        return p / p.sum()

    cat_probs = {f: zipf_probs(card) for f, (kind, card) in enumerate(fields)
                 if kind == "categorical"}

    rows, labels = [], []
    for _ in range(n_records):
        toks: list[str] = []
        slots: list[int] = []
        for f, (kind, card) in enumerate(fields):
            if rng.random() < missing_rate:
                toks.append("")
                slots.append(latents_w[f].size - 1)
                continue
            if kind == "categorical":
                v = int(rng.choice(card, p=cat_probs[f]))
                toks.append(f"v{v}")
                slots.append(v)
            else:
                raw = int(rng.lognormal(3.0, 1.5))
                if rng.random() < 0.02:
                    raw = -raw  # negative values behave like missing
                toks.append(str(raw))
                if raw < 0:
                    slots.append(latents_w[f].size - 1)
                else:
                    bucket = int(raw - 1).bit_length() if raw > 2 else raw
                    slots.append(min(bucket, numeric_buckets - 1))
        logit = -0.9 + sum(latents_w[f][slots[f]] for f in range(n_fields))
        for f in range(n_fields):
            for g in range(f + 1, n_fields):
                logit += 0.35 * float(latents_z[f][slots[f]] @ latents_z[g][slots[g]])
        labels.append(int(rng.random() < 1.0 / (1.0 + np.exp(-logit))))
        rows.append(toks)
    return labels, rows, [kind for kind, _ in fields]


def write_ctr_dataset(data_path, schema_path, **kwargs) -> None:
    labels, rows, kinds = generate_ctr(**kwargs)
    Path(data_path).parent.mkdir(parents=True, exist_ok=True)
    with open(data_path, "w", encoding="utf-8") as fh:
        for y, toks in zip(labels, rows):
            fh.write(f"{y}\t" + "\t".join(toks) + "\n")
    with open(schema_path, "w", encoding="utf-8") as fh:
        for f, kind in enumerate(kinds):
            fh.write(f"{f}:{kind}\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="generate synthetic benchmark data")
    ap.add_argument("--task", choices=["cf", "ctr"], required=True)
    ap.add_argument("--out", required=True, help="directory (cf) or data file (ctr)")
    ap.add_argument("--schema", help="schema output path (ctr)")
    ap.add_argument("--records", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)
    if args.task == "cf":
        write_cf_dataset(args.out, seed=args.seed)
    else:
        if not args.schema:
            ap.error("--schema is required for ctr")
        write_ctr_dataset(args.out, args.schema, n_records=args.records, seed=args.seed)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
