"""Feature bags on disk: the binary bag codec, manifests, splitting and synthesis.

Bag file layout (little-endian)::

    offset  size   field
    0       4      magic b"GMBG"
    4       4      version (u32, = 1)
    8       4      n, instance count (u32)
    12      4      m, feature width (u32)
    16      4      label (i32)
    20      2      bag_id byte length L (u16)
    22      L      bag_id, UTF-8
    22+L    8*n*m  features, float64, row-major

A manifest is a JSON document::

    {"layout": {"names": [...], "dims": [...]},
     "num_classes": c,
     "entries": [{"id": ..., "path": ..., "label": ..., "split": ...}, ...]}

Entry paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ParameterError
from .numerics import make_rng

BAG_MAGIC = b"GMBG"
BAG_VERSION = 1
SPLIT_TAGS = ("train", "val", "test", "unassigned")
DEFAULT_BAG_SIZE = 200

_HEADER = struct.Struct("<4sIIIiH")


@dataclass(frozen=True)
class GroupLayout:
    """Names and widths of the K feature groups concatenated in every instance."""

    names: tuple
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 1:
            raise ConfigError("a layout needs at least one feature group")
        if len(self.names) != len(self.dims):
            raise ConfigError(f"{len(self.names)} group names for {len(self.dims)} group widths")
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"duplicate group names in {self.names}")
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"group widths must be positive, got {self.dims}")

    @classmethod
    def from_dims(cls, dims, prefix="g"):
        return cls(tuple(f"{prefix}{i}" for i in range(len(dims))), tuple(dims))

    @property
    def num_groups(self):
        return len(self.dims)

    @property
    def total_width(self):
        return sum(self.dims)

    def offsets(self):
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.dims)[:-1]]))

    def slices(self):
        return tuple(slice(o, o + d) for o, d in zip(self.offsets(), self.dims))

    def subset(self, groups):
        """Layout restricted to the given group indices, in the given order."""
        groups = list(groups)
        return GroupLayout(tuple(self.names[g] for g in groups), tuple(self.dims[g] for g in groups))

    def columns(self, groups):
        """Feature column indices covered by ``groups`` (for slicing bags)."""
        sl = self.slices()
        return np.concatenate([np.arange(sl[g].start, sl[g].stop) for g in groups])

    def to_json(self):
        return {"names": list(self.names), "dims": list(self.dims)}

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(tuple(obj["names"]), tuple(obj["dims"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed layout object {obj!r}") from exc


@dataclass
class FeatureBag:
    bag_id: str
    features: np.ndarray
    label: int
    layout: GroupLayout | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ParameterError(f"bag {self.bag_id!r}: features must be n x m with n >= 1")
        if self.layout is not None and self.features.shape[1] != self.layout.total_width:
            raise ConfigError(
                f"bag {self.bag_id!r} has {self.features.shape[1]} feature columns, "
                f"layout expects {self.layout.total_width}"
            )

    @property
    def n(self):
        return self.features.shape[0]


def encode_bag(bag):
    feats = np.ascontiguousarray(bag.features, dtype="<f8")
    if not np.all(np.isfinite(feats)):
        raise ParameterError(f"bag {bag.bag_id!r} contains non-finite values")
    ident = bag.bag_id.encode("utf-8")
    if len(ident) > 0xFFFF:
        raise ParameterError(f"bag id too long ({len(ident)} bytes)")
    n, m = feats.shape
    if n > 0xFFFFFFFF or m > 0xFFFFFFFF:
        raise ParameterError(f"bag dimensions {feats.shape} exceed the u32 range")
    head = _HEADER.pack(BAG_MAGIC, BAG_VERSION, n, m, int(bag.label), len(ident))
    return head + ident + feats.tobytes()


def decode_bag(data, layout=None):
    """Parse bag bytes; raises :class:`FormatError` carrying the offending offset."""
    data = memoryview(bytes(data))
    if len(data) < 4:
        raise FormatError("truncated bag file: missing magic", len(data))
    if bytes(data[:4]) != BAG_MAGIC:
        raise FormatError(f"bad magic {bytes(data[:4])!r}, expected {BAG_MAGIC!r}", 0)
    if len(data) < _HEADER.size:
        raise FormatError("truncated bag header", len(data))
    _, version, n, m, label, id_len = _HEADER.unpack_from(data, 0)
    if version != BAG_VERSION:
        raise FormatError(f"unsupported bag version {version}", 4)
    if n == 0 or m == 0:
        raise FormatError(f"empty bag dimensions n={n} m={m}", 8)
    if label < 0:
        raise FormatError(f"negative label {label}", 16)
    pos = _HEADER.size
    if len(data) < pos + id_len:
        raise FormatError("truncated bag id", len(data))
    try:
        bag_id = bytes(data[pos : pos + id_len]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("bag id is not valid UTF-8", pos + exc.start) from None
    pos += id_len
    payload = len(data) - pos
    expected = n * m * 8
    if expected > payload:
        raise FormatError(
            f"dimension overflow: {n}x{m} floats need {expected} bytes, {payload} available", pos
        )
    if expected < payload:
        raise FormatError(f"{payload - expected} trailing bytes after payload", pos + expected)
    feats = np.frombuffer(data, dtype="<f8", count=n * m, offset=pos).reshape(n, m)
    bad = np.flatnonzero(~np.isfinite(feats.reshape(-1)))
    if bad.size:
        raise FormatError("non-finite feature value", pos + 8 * int(bad[0]))
    return FeatureBag(bag_id, feats.astype(np.float64), int(label), layout)


def write_bag(path, bag):
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path, layout=None):
    return decode_bag(Path(path).read_bytes(), layout)


def sample_or_pad(bag, target_n=DEFAULT_BAG_SIZE, rng=None):
    """Return a bag with exactly ``target_n`` rows.

    Larger bags are subsampled uniformly without replacement (kept rows stay in
    their original order); smaller bags get all-zero rows appended.
    """
    if target_n < 1:
        raise ParameterError(f"target_n must be >= 1, got {target_n}")
    n = bag.n
    if n == target_n:
        feats = bag.features.copy()
    elif n > target_n:
        if rng is None:
            raise ParameterError("subsampling a bag requires an rng")
        keep = np.sort(rng.choice(n, size=target_n, replace=False))
        feats = bag.features[keep]
    else:
        feats = np.zeros((target_n, bag.features.shape[1]))
        feats[:n] = bag.features
    return FeatureBag(bag.bag_id, feats, bag.label, bag.layout)


@dataclass
class ManifestEntry:
    id: str
    path: str
    label: int
    split: str = "unassigned"

    def __post_init__(self):
        if self.split not in SPLIT_TAGS:
            raise ConfigError(f"entry {self.id!r}: unknown split tag {self.split!r}")


@dataclass
class Manifest:
    layout: GroupLayout
    num_classes: int
    entries: list = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ConfigError(f"duplicate bag id {e.id!r} in manifest")
            seen.add(e.id)
            if not 0 <= e.label < self.num_classes:
                raise ConfigError(f"entry {e.id!r}: label {e.label} outside [0, {self.num_classes})")

    def split(self, tag):
        return [e for e in self.entries if e.split == tag]

    def labels(self, tag=None):
        entries = self.entries if tag is None else self.split(tag)
        return np.array([e.label for e in entries], dtype=np.int64)

    def bag_path(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load_bag(self, entry):
        bag = read_bag(self.bag_path(entry), self.layout)
        if bag.label != entry.label:
            raise ConfigError(
                f"bag {entry.id!r}: file label {bag.label} differs from manifest label {entry.label}"
            )
        return bag

    def to_json(self):
        return {
            "layout": self.layout.to_json(),
            "num_classes": self.num_classes,
            "entries": [
                {"id": e.id, "path": e.path, "label": e.label, "split": e.split} for e in self.entries
            ],
        }

    def save(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        self.root = path.parent

    @classmethod
    def from_json(cls, obj, root="."):
        try:
            entries = [
                ManifestEntry(str(e["id"]), str(e["path"]), int(e["label"]), e.get("split", "unassigned"))
                for e in obj["entries"]
            ]
            return cls(GroupLayout.from_json(obj["layout"]), int(obj["num_classes"]), entries, Path(root))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed manifest: {exc}") from exc

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_json(obj, path.parent)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.15
    test: float = 0.15
    seed: int = 0

    def __post_init__(self):
        fr = self.fractions
        if any(not 0.0 <= f <= 1.0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ParameterError(f"split fractions must lie in [0, 1] and sum to 1, got {fr}")

    @property
    def fractions(self):
        return (self.train, self.val, self.test)


def largest_remainder(total, fractions):
    """Integer counts summing to ``total``, closest to ``total * fractions``.

    Leftover units go to the largest fractional parts, earlier slots first on ties.
    """
    quotas = [total * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def stratified_split(manifest, spec):
    """Assign train/val/test tags class by class; returns a new manifest."""
    if not manifest.entries:
        raise ParameterError("cannot split an empty manifest")
    rng = make_rng(spec.seed)
    tags = {}
    for label in range(manifest.num_classes):
        members = sorted((e for e in manifest.entries if e.label == label), key=lambda e: e.id)
        if not members:
            continue
        order = rng.permutation(len(members))
        counts = largest_remainder(len(members), spec.fractions)
        bounds = np.cumsum(counts)
        for rank, idx in enumerate(order):
            tags[members[idx].id] = SPLIT_TAGS[int(np.searchsorted(bounds, rank, side="right"))]
    entries = [replace(e, split=tags[e.id]) for e in manifest.entries]
    return Manifest(manifest.layout, manifest.num_classes, entries, manifest.root)


@dataclass(frozen=True)
class SynthConfig:
    """Signal knobs of the synthetic generator."""

    shift: float = 2.0
    signal_fraction: tuple = (0.1, 0.3)
    ordinal: bool = False


def default_signal_plan(num_groups, num_classes):
    """Round-robin assignment of classes to groups."""
    plan = [[] for _ in range(num_groups)]
    for c in range(num_classes):
        plan[c % num_groups].append(c)
    return [tuple(p) for p in plan]


def _check_plan(plan, num_groups, num_classes):
    if len(plan) != num_groups:
        raise ParameterError(f"signal plan lists {len(plan)} groups, layout has {num_groups}")
    covered = set()
    for classes in plan:
        for c in classes:
            if not 0 <= c < num_classes:
                raise ParameterError(f"signal plan names class {c} outside [0, {num_classes})")
            covered.add(c)
    missing = sorted(set(range(num_classes)) - covered)
    if missing:
        raise ParameterError(f"classes {missing} are not informative in any group")


def synth_bags(layout, num_bags, n, num_classes, signal_plan=None, rng=None, config=SynthConfig()):
    """Generate synthetic bags in memory.

    Every entry is N(0, 1).  In each bag a random 10-30% of instances (see
    ``config.signal_fraction``) are signal instances.  In nominal mode a group
    informative for classes ``(a, b, ...)`` splits its columns into that many
    contiguous chunks, and a signal instance of class ``a`` gets ``+shift`` on
    the first chunk, and so on.  In ordinal mode every group carries every grade:
    signal instances get ``shift * label / (c - 1)`` on all columns.
    """
    if num_bags < 1 or n < 1 or num_classes < 1:
        raise ParameterError("num_bags, n and num_classes must all be >= 1")
    if rng is None:
        raise ParameterError("synthesis requires an rng")
    K = layout.num_groups
    if config.ordinal:
        signal_plan = [tuple(range(num_classes))] * K
    elif signal_plan is None:
        signal_plan = default_signal_plan(K, num_classes)
    signal_plan = [tuple(sorted(set(int(c) for c in p))) for p in signal_plan]
    _check_plan(signal_plan, K, num_classes)

    chunks = {}
    for g, (sl, classes) in enumerate(zip(layout.slices(), signal_plan)):
        cols = np.arange(sl.start, sl.stop)
        if config.ordinal:
            for c in classes:
                chunks.setdefault(c, []).append(cols)
            continue
        if len(classes) > len(cols):
            raise ParameterError(f"group {g} has {len(cols)} columns for {len(classes)} classes")
        for c, part in zip(classes, np.array_split(cols, len(classes))):
            chunks.setdefault(c, []).append(part)
    cols_for = {c: np.concatenate(parts) for c, parts in chunks.items()}

    labels = rng.permutation(np.arange(num_bags) % num_classes)
    lo, hi = config.signal_fraction
    bags = []
    for i, label in enumerate(labels):
        label = int(label)
        feats = rng.standard_normal((n, layout.total_width))
        frac = rng.uniform(lo, hi)
        k = min(n, max(1, int(round(frac * n))))
        rows = rng.choice(n, size=k, replace=False)
        if config.ordinal:
            amp = config.shift * label / max(1, num_classes - 1)
        else:
            amp = config.shift
        if amp != 0.0:
            feats[np.ix_(rows, cols_for[label])] += amp
        bags.append(FeatureBag(f"bag{i:05d}", feats, label, layout))
    return bags


def synth_generate(
    out_dir,
    layout,
    num_bags,
    n,
    num_classes,
    signal_plan=None,
    rng=None,
    config=SynthConfig(),
    split=None,
):
    """Write synthetic bags plus ``manifest.json`` under ``out_dir``; returns the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    bags = synth_bags(layout, num_bags, n, num_classes, signal_plan, rng, config)
    entries = []
    for bag in bags:
        rel = f"bags/{bag.bag_id}.gmbg"
        write_bag(out_dir / rel, bag)
        entries.append(ManifestEntry(bag.bag_id, rel, bag.label))
    manifest = Manifest(layout, num_classes, entries, out_dir)
    if split is not None:
        manifest = stratified_split(manifest, split)
    manifest.save(out_dir / "manifest.json")
    return manifest
