"""Feature tables, synthetic generation, seen/unseen splits and batches."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

GZSL_TRAIN_FRACTION = 600 / 800
STANDARD_RATIOS = {"60/10": (60, 10), "50/20": (50, 20), "40/30": (40, 30)}


class FormatError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class SamplingError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class FeatureTable:
    """Visual instances plus exactly one semantic descriptor per class.

    Class ids are dense ``0..C-1``; ``original_ids[c]`` keeps the id found
    in the source files.
    """

    visual: np.ndarray  # N×Dv
    labels: np.ndarray  # N
    descriptors: np.ndarray  # C×Ds, row c is class c
    original_ids: np.ndarray = None

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.original_ids is None:
            self.original_ids = np.arange(len(self.descriptors))
        if self.visual.ndim != 2 or self.descriptors.ndim != 2:
            raise FormatError("visual and descriptor tables must be 2-d")
        if len(self.visual) != len(self.labels):
            raise FormatError(f"{len(self.visual)} visual rows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = int(self.labels[(self.labels < 0) | (self.labels >= self.num_classes)][0])
            raise IntegrityError(f"label {bad} has no descriptor")

    @property
    def num_classes(self) -> int:
        return len(self.descriptors)

    @property
    def visual_dim(self) -> int:
        return self.visual.shape[1]

    @property
    def semantic_dim(self) -> int:
        return self.descriptors.shape[1]

    def indices_of(self, classes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, list(classes)))


# ------------------------------------------------------------------ file I/O


def _read_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    ids, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "class_id":
            raise FormatError(f"{path}: first header column must be 'class_id'")
        width = len(header) - 1
        if width < 1:
            raise FormatError(f"{path}: no feature columns")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) - 1 != width:
                raise FormatError(f"{path}:{lineno}: expected {width} features, got {len(row) - 1}")
            try:
                ids.append(int(row[0]))
                rows.append([float(x) for x in row[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return np.array(ids, dtype=np.int64), np.array(rows, dtype=np.float64).reshape(len(rows), width)


def _write_csv(path: Path, ids, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id"] + [f"f{j}" for j in range(rows.shape[1])])
        for c, row in zip(ids, rows):
            w.writerow([int(c)] + [repr(float(x)) for x in row])


def load_features(visual_path, descriptor_path) -> FeatureTable:
    """Read visual and descriptor tables (CSV, or ``.npz`` written by :func:`save_features`)."""
    visual_path, descriptor_path = Path(visual_path), Path(descriptor_path)
    if visual_path.suffix == ".npz":
        with np.load(visual_path) as z:
            vid, vis = z["class_id"], z["features"]
    else:
        vid, vis = _read_csv(visual_path)
    if descriptor_path.suffix == ".npz":
        with np.load(descriptor_path) as z:
            did, desc = z["class_id"], z["features"]
    else:
        did, desc = _read_csv(descriptor_path)

    uniq, counts = np.unique(did, return_counts=True)
    if np.any(counts > 1):
        raise IntegrityError(f"duplicate descriptor for class {int(uniq[counts > 1][0])}")
    missing = sorted(set(vid.tolist()) - set(did.tolist()))
    if missing:
        raise IntegrityError(f"no descriptor for class {missing[0]}")
    order = np.argsort(did, kind="stable")
    original = did[order]
    dense = {int(c): i for i, c in enumerate(original)}
    labels = np.array([dense[int(c)] for c in vid], dtype=np.int64)
    return FeatureTable(vis, labels, desc[order], original_ids=original)


def save_features(table: FeatureTable, visual_path, descriptor_path) -> None:
    """Write a table as CSV, or as ``.npz`` when the path says so."""
    for path, ids, rows in (
        (Path(visual_path), table.original_ids[table.labels], table.visual),
        (Path(descriptor_path), table.original_ids, table.descriptors),
    ):
        if path.suffix == ".npz":
            with open(path, "wb") as fh:
                np.savez(fh, class_id=np.asarray(ids), features=rows)
        else:
            _write_csv(path, ids, rows)


# ----------------------------------------------------------------- synthetic


@dataclass
class SynthConfig:
    num_classes: int = 20
    instances_per_class: int = 100
    visual_dim: int = 32
    semantic_dim: int = 16
    concept_dim: int = 8
    intra_class_std: float = 1.0
    inter_class_sim: float = 0.6
    label_noise_rate: float = 0.1
    prototype_scale: float = 4.0  # expected prototype norm before mixing
    descriptor_noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_classes", "instances_per_class", "visual_dim", "semantic_dim", "concept_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.inter_class_sim < 1:
            raise ConfigError(f"inter_class_sim must be in [0, 1), got {self.inter_class_sim}")
        if not 0 <= self.label_noise_rate < 1:
            raise ConfigError(f"label_noise_rate must be in [0, 1), got {self.label_noise_rate}")
        if self.label_noise_rate > 0 and self.num_classes < 2:
            raise ConfigError("label noise needs at least two classes")
        if self.intra_class_std < 0 or self.descriptor_noise < 0 or self.prototype_scale <= 0:
            raise ConfigError("noise levels must be >= 0 and prototype_scale > 0")


@dataclass
class SynthDataset:
    table: FeatureTable
    prototypes: np.ndarray
    clean_labels: np.ndarray


def synth_prototypes(cfg: SynthConfig, rng: np.random.Generator):
    """Class concepts, visual prototypes and descriptors from one rng stream."""
    concepts = rng.standard_normal((cfg.num_classes, cfg.concept_dim))
    to_visual = rng.standard_normal((cfg.concept_dim, cfg.visual_dim)) / math.sqrt(cfg.concept_dim)
    to_semantic = rng.standard_normal((cfg.concept_dim, cfg.semantic_dim)) / math.sqrt(cfg.concept_dim)
    shared = rng.standard_normal(cfg.visual_dim)
    shared /= np.linalg.norm(shared)

    unit = cfg.prototype_scale / math.sqrt(cfg.visual_dim)
    specific = concepts @ to_visual * unit
    # mixing toward one shared direction raises pairwise prototype cosine
    a = cfg.inter_class_sim
    protos = math.sqrt(1 - a) * specific + math.sqrt(a) * cfg.prototype_scale * shared
    desc = concepts @ to_semantic + cfg.descriptor_noise * rng.standard_normal(
        (cfg.num_classes, cfg.semantic_dim)
    )
    return protos, desc


def synth_dataset(cfg: SynthConfig) -> SynthDataset:
    """Gaussian class clusters with correlated prototypes and label noise.

    Visual prototypes and semantic descriptors are both linear images of a
    per-class concept vector, so the cross-modal map is learnable and
    transfers to unseen classes.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(cfg.seed), 1])))
    protos, desc = synth_prototypes(cfg, rng)
    clean = np.repeat(np.arange(cfg.num_classes), cfg.instances_per_class)
    visual = protos[clean] + cfg.intra_class_std * rng.standard_normal((len(clean), cfg.visual_dim))

    labels = clean.copy()
    n_noisy = int(math.floor(cfg.label_noise_rate * len(clean) + 0.5))
    if n_noisy:
        flip = rng.choice(len(clean), n_noisy, replace=False)
        # uniform over the other C-1 classes
        shift = rng.integers(1, cfg.num_classes, size=n_noisy)
        labels[flip] = (clean[flip] + shift) % cfg.num_classes
    return SynthDataset(FeatureTable(visual, labels, desc), protos, clean)


# -------------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    seen: list[int]
    unseen: list[int]
    split_index: int
    ratio: tuple[int, int]
    gzsl_train_fraction: float = GZSL_TRAIN_FRACTION
    seen_train: np.ndarray = field(default=None, repr=False)  # instance indices
    seen_test: np.ndarray = field(default=None, repr=False)

    def attach_partition(self, table: FeatureTable, rng: np.random.Generator) -> "SplitSpec":
        """Per seen class, shuffle its instances and keep the train fraction."""
        train, test = [], []
        for c in self.seen:
            idx = rng.permutation(np.flatnonzero(table.labels == c))
            cut = int(math.floor(self.gzsl_train_fraction * len(idx) + 0.5))
            train.append(idx[:cut])
            test.append(idx[cut:])
        self.seen_train = np.sort(np.concatenate(train)) if train else np.array([], int)
        self.seen_test = np.sort(np.concatenate(test)) if test else np.array([], int)
        return self

    def train_indices(self, table: FeatureTable, mode: str) -> np.ndarray:
        """ZSL trains on every seen instance, GZSL only on the train part."""
        if mode == "zsl":
            return table.indices_of(self.seen)
        if self.seen_train is None:
            raise ConfigError("GZSL needs a per-class partition; call attach_partition")
        return self.seen_train

    def to_json(self) -> dict:
        doc = {
            "ratio": f"{self.ratio[0]}/{self.ratio[1]}",
            "split_index": self.split_index,
            "seen": [int(c) for c in self.seen],
            "unseen": [int(c) for c in self.unseen],
            "gzsl_train_fraction": self.gzsl_train_fraction,
        }
        if self.seen_train is not None:
            doc["seen_train"] = [int(i) for i in self.seen_train]
            doc["seen_test"] = [int(i) for i in self.seen_test]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SplitSpec":
        ratio = tuple(int(x) for x in str(doc["ratio"]).split("/"))
        return cls(
            seen=list(doc["seen"]),
            unseen=list(doc["unseen"]),
            split_index=int(doc["split_index"]),
            ratio=ratio,
            gzsl_train_fraction=float(doc.get("gzsl_train_fraction", GZSL_TRAIN_FRACTION)),
            seen_train=np.array(doc["seen_train"], int) if "seen_train" in doc else None,
            seen_test=np.array(doc["seen_test"], int) if "seen_test" in doc else None,
        )


def parse_ratio(ratio) -> tuple[int, int]:
    if isinstance(ratio, str):
        try:
            a, b = ratio.split("/")
            return int(a), int(b)
        except ValueError:
            raise ConfigError(f"ratio must look like 'seen/unseen', got {ratio!r}") from None
    a, b = ratio
    return int(a), int(b)


def make_splits(
    num_classes: int,
    ratio,
    num_splits: int,
    seed: int,
    table: FeatureTable | None = None,
    gzsl_train_fraction: float = GZSL_TRAIN_FRACTION,
) -> list[SplitSpec]:
    """``num_splits`` pairwise-distinct random seen/unseen partitions.

    With ``table`` given, each split also gets its per-class GZSL
    train/test partition of the seen instances.
    """
    n_seen, n_unseen = parse_ratio(ratio)
    if n_seen < 1 or n_unseen < 1 or n_seen + n_unseen != num_classes:
        raise ConfigError(f"ratio {n_seen}/{n_unseen} does not cover {num_classes} classes")
    if num_splits < 1:
        raise ConfigError("num_splits must be >= 1")
    if num_splits > math.comb(num_classes, n_unseen):
        raise ConfigError(f"only {math.comb(num_classes, n_unseen)} distinct partitions exist")
    if not 0 < gzsl_train_fraction < 1:
        raise ConfigError("gzsl_train_fraction must be in (0, 1)")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 1, 7])))
    splits, taken = [], set()
    while len(splits) < num_splits:
        perm = rng.permutation(num_classes)
        unseen = tuple(sorted(int(c) for c in perm[:n_unseen]))
        if unseen in taken:
            continue
        taken.add(unseen)
        seen = sorted(int(c) for c in perm[n_unseen:])
        split = SplitSpec(seen, list(unseen), len(splits), (n_seen, n_unseen), gzsl_train_fraction)
        if table is not None:
            split.attach_partition(table, rng)
        splits.append(split)
    return splits


# ------------------------------------------------------------------- batches


@dataclass
class Batch:
    visual: np.ndarray  # (c·k)×Dv
    labels: np.ndarray  # c·k
    descriptors: np.ndarray  # c×Ds
    class_ids: np.ndarray  # c
    s_index: np.ndarray = None  # descriptor row of each visual row


class BatchSampler:
    """Class-balanced sampler over a fixed pool of training instances."""

    def __init__(self, table: FeatureTable, train_idx: np.ndarray, c: int, k: int, *, need_pairs: bool = False):
        if c < 1 or k < 1:
            raise SamplingError("c and k must be >= 1")
        if need_pairs and k < 2:
            raise SamplingError(f"k={k}: visual-to-visual contrast needs >= 2 instances per class")
        self.table, self.c, self.k = table, c, k
        train_idx = np.asarray(train_idx)
        labels = table.labels[train_idx]
        self.pools = {}
        for cls in np.unique(labels):
            pool = train_idx[labels == cls]
            if len(pool) >= k:
                self.pools[int(cls)] = pool
        self.classes = np.array(sorted(self.pools))
        if len(self.classes) < c:
            raise SamplingError(
                f"need {c} classes with >= {k} training instances, only {len(self.classes)} qualify"
            )
        self.steps_per_epoch = max(1, math.ceil(len(train_idx) / (c * k)))
        self._sizes = np.array([len(self.pools[int(cl)]) for cl in self.classes])
        self._width = int(self._sizes.max())
        self._padded = np.zeros((len(self.classes), self._width), dtype=np.int64)
        for row, cl in enumerate(self.classes):
            self._padded[row, : self._sizes[row]] = self.pools[int(cl)]
        self._s_index = np.repeat(np.arange(c), k)

    def sample(self, rng: np.random.Generator) -> Batch:
        picked = rng.choice(len(self.classes), self.c, replace=False)
        # k distinct positions per pool: the k smallest of uniform keys
        keys = rng.random((self.c, self._width))
        keys[self._sizes[picked][:, None] <= np.arange(self._width)] = np.inf
        pos = np.argpartition(keys, self.k - 1, axis=1)[:, : self.k]
        idx = self._padded[picked[:, None], pos].reshape(-1)
        classes = self.classes[picked]
        return Batch(
            visual=self.table.visual[idx],
            labels=self.table.labels[idx],
            descriptors=self.table.descriptors[classes],
            class_ids=classes,
            s_index=self._s_index,
        )


def sample_batch(table, split, c, k, rng, *, mode="zsl", need_pairs=False) -> Batch:
    """One batch of ``c`` seen classes × ``k`` training instances."""
    return BatchSampler(table, split.train_indices(table, mode), c, k, need_pairs=need_pairs).sample(rng)


def synth_config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)


def write_split(split: SplitSpec, path) -> None:
    Path(path).write_text(json.dumps(split.to_json(), indent=2))
