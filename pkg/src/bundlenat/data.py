"""Interaction tables, generation instances, splits and planted synthetic data."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataFormatError, IdRangeError

logger = logging.getLogger(__name__)

INSTANCE_VERSION = "v1"
TABLE_FILES = ("user_item.tsv", "user_bundle.tsv", "bundle_item.tsv")


def _pairs(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return arr.reshape(-1, 2)


@dataclass
class InteractionTables:
    """The three raw relations as ``(n, 2)`` int arrays with declared vocab sizes."""

    n_users: int
    n_items: int
    n_bundles: int
    user_item: np.ndarray
    user_bundle: np.ndarray
    bundle_item: np.ndarray

    def __post_init__(self):
        self.user_item = _pairs(self.user_item)
        self.user_bundle = _pairs(self.user_bundle)
        self.bundle_item = _pairs(self.bundle_item)
        self.validate()

    def validate(self) -> None:
        limits = {
            "user_item": (self.n_users, self.n_items),
            "user_bundle": (self.n_users, self.n_bundles),
            "bundle_item": (self.n_bundles, self.n_items),
        }
        for rel, (lim0, lim1) in limits.items():
            arr = getattr(self, rel)
            if len(arr) == 0:
                continue
            if arr.min() < 0 or arr[:, 0].max() >= lim0 or arr[:, 1].max() >= lim1:
                raise IdRangeError(f"{rel}: id outside declared vocabulary ({lim0}, {lim1})")
            if len(np.unique(arr, axis=0)) != len(arr):
                raise DataFormatError(f"{rel}: duplicate pairs")

    def bundle_members(self) -> dict[int, list[int]]:
        members: dict[int, list[int]] = {}
        for b, i in self.bundle_item:
            members.setdefault(int(b), []).append(int(i))
        return {b: sorted(items) for b, items in members.items()}


@dataclass(frozen=True)
class GenerationInstance:
    user: int
    candidates: tuple[int, ...]
    bundle: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(int(c) for c in self.candidates))
        object.__setattr__(self, "bundle", tuple(int(b) for b in self.bundle))
        if len(set(self.candidates)) != len(self.candidates):
            raise DataFormatError("candidates must be distinct")
        if len(set(self.bundle)) != len(self.bundle):
            raise DataFormatError("bundle items must be distinct")
        if not set(self.bundle) <= set(self.candidates):
            raise DataFormatError("bundle must be a subset of candidates")
        if len(self.bundle) >= len(self.candidates):
            raise DataFormatError("bundle size K must be smaller than candidate count M")

    @property
    def k(self) -> int:
        return len(self.bundle)

    @property
    def m(self) -> int:
        return len(self.candidates)

    def to_line(self) -> str:
        c = ",".join(map(str, self.candidates))
        b = ",".join(map(str, self.bundle))
        return f"u={self.user}|c={c}|b={b}"

    @classmethod
    def from_line(cls, line: str) -> "GenerationInstance":
        fields = {}
        for part in line.strip().split("|"):
            key, sep, value = part.partition("=")
            if not sep:
                raise DataFormatError(f"missing '=' in field {part!r}")
            fields[key] = value
        if set(fields) != {"u", "c", "b"}:
            raise DataFormatError(f"expected fields u, c, b; got {sorted(fields)}")
        try:
            return cls(
                int(fields["u"]),
                tuple(int(x) for x in fields["c"].split(",")),
                tuple(int(x) for x in fields["b"].split(",")),
            )
        except ValueError as exc:
            raise DataFormatError(str(exc)) from exc


@dataclass
class DatasetSplit:
    train: list[GenerationInstance]
    test: list[GenerationInstance]
    n_users: int
    n_items: int
    n_bundles: int
    k: int
    m: int
    meta: dict = field(default_factory=dict, compare=False)


# ---------------------------------------------------------------------------
# table IO


def _read_pair_file(path: Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(parts)}")
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer value in {line!r}") from None
            if a < 0 or b < 0:
                raise IdRangeError(f"{path}:{lineno}: negative id")
            rows.append((a, b))
    arr = _pairs(rows)
    if len(arr):
        arr = np.unique(arr, axis=0)
    return arr


def load_tables(
    user_item_path,
    user_bundle_path,
    bundle_item_path,
    n_users: int | None = None,
    n_items: int | None = None,
    n_bundles: int | None = None,
) -> InteractionTables:
    """Parse the three TSV relations, dropping duplicate rows.

    Vocabulary sizes default to ``max id + 1`` when not declared.
    """
    ui = _read_pair_file(Path(user_item_path))
    ub = _read_pair_file(Path(user_bundle_path))
    bi = _read_pair_file(Path(bundle_item_path))

    def vmax(*cols):
        vals = [c.max() for c in cols if len(c)]
        return int(max(vals)) + 1 if vals else 0

    inferred = (vmax(ui[:, 0], ub[:, 0]), vmax(ui[:, 1], bi[:, 1]), vmax(ub[:, 1], bi[:, 0]))
    declared = (n_users, n_items, n_bundles)
    sizes = []
    for name, dec, inf in zip(("users", "items", "bundles"), declared, inferred):
        if dec is None:
            sizes.append(inf)
        elif inf > dec:
            raise IdRangeError(f"{name}: max id {inf - 1} >= declared vocabulary {dec}")
        else:
            sizes.append(dec)
    logger.info("loaded tables: %d user-item, %d user-bundle, %d bundle-item", len(ui), len(ub), len(bi))
    return InteractionTables(*sizes, ui, ub, bi)


def load_table_dir(path) -> InteractionTables:
    """Load the three standard files; honours a ``# n_users=.. n_items=..`` header."""
    path = Path(path)
    declared: dict[str, int] = {}
    with open(path / TABLE_FILES[0], encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("#"):
        for tok in first[1:].split():
            key, sep, val = tok.partition("=")
            if sep and key in ("n_users", "n_items", "n_bundles") and val.isdigit():
                declared[key] = int(val)
    return load_tables(*(path / f for f in TABLE_FILES), **declared)


def write_tables(tables: InteractionTables, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fname, arr in zip(TABLE_FILES, (tables.user_item, tables.user_bundle, tables.bundle_item)):
        with open(out / fname, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# n_users={tables.n_users} n_items={tables.n_items} n_bundles={tables.n_bundles}\n")
            for a, b in arr:
                fh.write(f"{a}\t{b}\n")


# ---------------------------------------------------------------------------
# instance construction


def build_instances(tables: InteractionTables, k: int, m: int, seed: int) -> list[GenerationInstance]:
    """One size-``k``/size-``m`` instance per (user, interacted bundle).

    Positives keep their sampling order as the stored bundle order and are
    placed at uniformly random candidate positions. Negatives are drawn
    uniformly from every item outside the sampled positives.
    """
    if not 0 < k < m:
        raise ConfigError(f"need 0 < k < m, got k={k}, m={m}")
    if m > tables.n_items:
        raise ConfigError(f"m={m} exceeds item vocabulary {tables.n_items}: not enough negatives")
    rng = np.random.default_rng(seed)
    members = tables.bundle_members()
    seen: dict[int, set[tuple[int, ...]]] = {}
    out: list[GenerationInstance] = []
    skipped = duplicates = 0
    all_items = np.arange(tables.n_items)
    for u, b in sorted(map(tuple, tables.user_bundle.tolist())):
        items = members.get(b, [])
        if len(items) < k:
            skipped += 1
            continue
        pos = rng.choice(np.asarray(items), size=k, replace=False)
        key = tuple(sorted(pos.tolist()))
        user_seen = seen.setdefault(u, set())
        if key in user_seen:
            duplicates += 1
            continue
        user_seen.add(key)
        pool = np.setdiff1d(all_items, pos, assume_unique=True)
        neg = rng.choice(pool, size=m - k, replace=False)
        slots = rng.choice(m, size=k, replace=False)
        cand = np.empty(m, dtype=np.int64)
        is_pos = np.zeros(m, dtype=bool)
        is_pos[slots] = True
        cand[slots] = pos
        cand[~is_pos] = neg
        out.append(GenerationInstance(int(u), tuple(cand.tolist()), tuple(pos.tolist())))
    if skipped:
        logger.warning("skipped %d (user, bundle) pairs whose bundle has fewer than %d items", skipped, k)
    if duplicates:
        logger.info("dropped %d duplicate size-%d bundles", duplicates, k)
    return out


def split_80_20(
    instances: list[GenerationInstance],
    seed: int,
    n_users: int,
    n_items: int,
    n_bundles: int = 0,
) -> DatasetSplit:
    if len(instances) < 5:
        raise ConfigError(f"need at least 5 instances to split, got {len(instances)}")
    ks = {inst.k for inst in instances}
    ms = {inst.m for inst in instances}
    if len(ks) != 1 or len(ms) != 1:
        raise ConfigError("all instances in a split must share K and M")
    order = np.random.default_rng(seed).permutation(len(instances))
    n_train = (len(instances) * 8) // 10
    train = [instances[i] for i in order[:n_train]]
    test = [instances[i] for i in order[n_train:]]
    return DatasetSplit(train, test, n_users, n_items, n_bundles, ks.pop(), ms.pop())


# ---------------------------------------------------------------------------
# planted synthetic data


def synth_planted(
    n_users: int,
    n_items: int,
    n_clusters: int,
    bundles_per_user: int,
    k: int,
    m: int,
    noise_rate: float,
    seed: int,
    extra_items_per_user: int = 5,
) -> tuple[InteractionTables, np.ndarray]:
    """Tables whose bundles are drawn from latent item clusters.

    Each cluster is chopped into a library of size-``k`` bundles. Every user
    prefers one or two clusters and interacts with ``bundles_per_user``
    library bundles from them. Returns the tables and the item -> cluster map.
    """
    if n_clusters < 1 or n_items % n_clusters:
        raise ConfigError(f"n_items={n_items} must be divisible by n_clusters={n_clusters}")
    per_cluster = n_items // n_clusters
    if per_cluster < k:
        raise ConfigError(f"clusters of {per_cluster} items cannot hold bundles of size {k}")
    if not 0.0 <= noise_rate < 1.0:
        raise ConfigError(f"noise_rate must lie in [0, 1), got {noise_rate}")
    if m > n_items or k >= m:
        raise ConfigError(f"infeasible sizes k={k}, m={m}, n_items={n_items}")
    if n_users < 1 or bundles_per_user < 1:
        raise ConfigError("need at least one user and one bundle per user")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_items)
    cluster_of = np.empty(n_items, dtype=np.int64)
    clusters = []
    for c in range(n_clusters):
        members = np.sort(perm[c * per_cluster : (c + 1) * per_cluster])
        cluster_of[members] = c
        clusters.append(members)

    bundles: list[list[int]] = []
    bundles_of_cluster: list[list[int]] = []
    for c, members in enumerate(clusters):
        order = rng.permutation(members)
        ids = []
        for start in range(0, per_cluster - k + 1, k):
            items = order[start : start + k].tolist()
            for j in range(k):
                if rng.random() < noise_rate:
                    swap = int(rng.integers(n_items))
                    if swap not in items:
                        items[j] = swap
            ids.append(len(bundles))
            bundles.append(items)
        bundles_of_cluster.append(ids)

    user_item, user_bundle = set(), set()
    for u in range(n_users):
        n_pref = 1 if n_clusters == 1 else int(rng.integers(1, 3))
        pref = rng.choice(n_clusters, size=n_pref, replace=False)
        library = np.concatenate([bundles_of_cluster[c] for c in pref])
        take = min(bundles_per_user, len(library))
        for b in rng.choice(library, size=take, replace=False):
            user_bundle.add((u, int(b)))
            user_item.update((u, i) for i in bundles[b])
        for _ in range(extra_items_per_user):
            c = pref[int(rng.integers(len(pref)))]
            user_item.add((u, int(rng.choice(clusters[c]))))

    bundle_item = {(b, i) for b, items in enumerate(bundles) for i in items}
    tables = InteractionTables(
        n_users,
        n_items,
        len(bundles),
        sorted(user_item),
        sorted(user_bundle),
        sorted(bundle_item),
    )
    return tables, cluster_of


# ---------------------------------------------------------------------------
# instance files


def _header(k: int, m: int) -> str:
    return f"#bundlenat-inst {INSTANCE_VERSION} k={k} m={m}"


def _write_inst(path: Path, instances, split: DatasetSplit) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_header(split.k, split.m) + "\n")
        fh.write(f"#vocab users={split.n_users} items={split.n_items} bundles={split.n_bundles}\n")
        for inst in instances:
            fh.write(inst.to_line() + "\n")


def write_instances(split: DatasetSplit, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_inst(out / "train.inst", split.train, split)
    _write_inst(out / "test.inst", split.test, split)


def _kv(tokens: list[str], path, lineno) -> dict[str, int]:
    out = {}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        try:
            out[key] = int(val)
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: bad header token {tok!r}") from None
        if not sep:
            raise DataFormatError(f"{path}:{lineno}: bad header token {tok!r}")
    return out


def read_instance_file(path) -> tuple[list[GenerationInstance], dict[str, int]]:
    path = Path(path)
    instances = []
    meta: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip().split()
        if len(first) < 2 or first[0] != "#bundlenat-inst":
            raise DataFormatError(f"{path}:1: missing '#bundlenat-inst' header")
        if first[1] != INSTANCE_VERSION:
            raise DataFormatError(f"{path}:1: unsupported version {first[1]!r} (expected {INSTANCE_VERSION})")
        meta.update(_kv(first[2:], path, 1))
        if "k" not in meta or "m" not in meta:
            raise DataFormatError(f"{path}:1: header must carry k= and m=")
        for lineno, raw in enumerate(fh, 2):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#vocab"):
                meta.update(_kv(line.split()[1:], path, lineno))
                continue
            if line.startswith("#"):
                continue
            try:
                inst = GenerationInstance.from_line(line)
            except DataFormatError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if inst.k != meta["k"] or inst.m != meta["m"]:
                raise DataFormatError(f"{path}:{lineno}: instance sizes disagree with header k/m")
            instances.append(inst)
    return instances, meta


def read_instances(in_dir) -> DatasetSplit:
    in_dir = Path(in_dir)
    train, mt = read_instance_file(in_dir / "train.inst")
    test, ms = read_instance_file(in_dir / "test.inst")
    if (mt["k"], mt["m"]) != (ms["k"], ms["m"]):
        raise DataFormatError("train.inst and test.inst disagree on k/m")
    everything = train + test

    def vocab(key, fallback):
        return mt.get(key, ms.get(key, fallback))

    n_users = vocab("users", max((i.user for i in everything), default=-1) + 1)
    n_items = vocab("items", max((max(i.candidates) for i in everything), default=-1) + 1)
    return DatasetSplit(train, test, n_users, n_items, vocab("bundles", 0), mt["k"], mt["m"])


def dataset_fingerprint(split: DatasetSplit) -> dict:
    h = hashlib.sha256()
    for inst in split.train + split.test:
        h.update(inst.to_line().encode("ascii"))
        h.update(b"\n")
    return {
        "n_train": len(split.train),
        "n_test": len(split.test),
        "n_users": split.n_users,
        "n_items": split.n_items,
        "k": split.k,
        "m": split.m,
        "sha256": h.hexdigest(),
    }


def bundles_from_instances(instances) -> np.ndarray:
    """Bundle-item pairs treating each instance's ground truth as one bundle."""
    rows = [(b, item) for b, inst in enumerate(instances) for item in inst.bundle]
    return _pairs(rows)


__all__ = [
    "InteractionTables",
    "GenerationInstance",
    "DatasetSplit",
    "load_tables",
    "load_table_dir",
    "write_tables",
    "build_instances",
    "split_80_20",
    "synth_planted",
    "write_instances",
    "read_instances",
    "read_instance_file",
    "dataset_fingerprint",
    "bundles_from_instances",
]
