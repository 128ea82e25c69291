"""Latent-space classifier, ZSL/GZSL evaluation, split averaging and ablations."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .data import FeatureTable, SplitSpec, make_splits, parse_ratio
from .model import VaePair, encode_semantic, encode_visual
from .losses import GZSL_WEIGHTS
from .train import Adam, HyperParams, train, train_variants

SEMANTIC, VISUAL = 0, 1

# contrastive terms enabled per ablation variant: (vtov, vtos, stov)
ABLATION_VARIANTS = {
    "v0": (False, False, False),
    "v1": (True, False, False),
    "v2": (False, True, False),
    "v3": (False, False, True),
    "v4": (True, True, False),
    "v5": (True, True, True),
}


class EvaluationError(ValueError):
    pass


@dataclass
class LatentDataset:
    rows: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray  # SEMANTIC or VISUAL per row


@dataclass
class SoftmaxClassifier:
    weight: np.ndarray  # γ×C'
    bias: np.ndarray
    class_ids: np.ndarray  # ascending; output column j predicts class_ids[j]
    history: list = field(default_factory=list)

    def logits(self, z: np.ndarray) -> np.ndarray:
        return nx.affine(z, self.weight, self.bias)

    def predict(self, z: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the smaller class id
        return self.class_ids[np.argmax(self.logits(z), axis=1)]


def generate_latent_training_set(
    model: VaePair,
    table: FeatureTable,
    split: SplitSpec,
    mode: str,
    n_gen: int,
    rng: np.random.Generator,
) -> LatentDataset:
    """Sampled latent codes: ``n_gen`` per unseen descriptor, plus one per
    seen training instance in GZSL mode."""
    if n_gen < 1:
        raise ValueError("n_gen must be >= 1")
    unseen = np.asarray(sorted(split.unseen))
    if len(unseen) and unseen.max() >= table.num_classes:
        raise EvaluationError(f"unseen class {unseen.max()} has no descriptor")
    post = encode_semantic(model, table.descriptors[unseen])
    mu = np.repeat(post.mu, n_gen, axis=0)
    lv = np.repeat(post.log_var, n_gen, axis=0)
    rows = [nx.gaussian_reparam_sample(mu, lv, rng)]
    labels = [np.repeat(unseen, n_gen)]
    prov = [np.full(len(mu), SEMANTIC)]
    if mode == "gzsl":
        idx = split.train_indices(table, "gzsl")
        pv = encode_visual(model, table.visual[idx])
        rows.append(nx.gaussian_reparam_sample(pv.mu, pv.log_var, rng))
        labels.append(table.labels[idx])
        prov.append(np.full(len(idx), VISUAL))
    elif mode != "zsl":
        raise ValueError(f"mode must be 'zsl' or 'gzsl', got {mode!r}")
    return LatentDataset(np.concatenate(rows), np.concatenate(labels), np.concatenate(prov))


def train_classifier(
    ds: LatentDataset,
    *,
    epochs: int = 50,
    learning_rate: float = 1e-2,
    class_ids=None,
) -> SoftmaxClassifier:
    """Multinomial logistic regression, full-batch Adam on mean cross-entropy."""
    classes = np.unique(ds.labels) if class_ids is None else np.asarray(sorted(class_ids))
    if len(classes) < 2:
        raise EvaluationError("a softmax classifier needs at least two classes")
    col = {int(c): j for j, c in enumerate(classes)}
    counts = np.bincount([col[int(y)] for y in ds.labels], minlength=len(classes))
    if np.any(counts == 0):
        raise EvaluationError(f"class {classes[np.argmin(counts)]} has no training rows")
    n, d = ds.rows.shape
    target = np.zeros((n, len(classes)))
    target[np.arange(n), [col[int(y)] for y in ds.labels]] = 1.0 / n

    # the objective is convex, so a zero start loses nothing and adds no init noise
    params = np.zeros(d * len(classes) + len(classes))
    W = params[: d * len(classes)].reshape(d, len(classes))
    b = params[d * len(classes) :]
    opt = Adam(params.size, lr=learning_rate)
    history = []
    for _ in range(epochs):
        tape = nx.Tape()
        loss = nx.masked_log_softmax_nll(
            nx.affine(ds.rows, tape.param("w", W), tape.param("b", b)), None, target
        )
        g = tape.backward(loss)
        history.append(float(loss.value))
        opt.step(params, np.concatenate([g["w"].reshape(-1), g["b"]]))
    return SoftmaxClassifier(W.copy(), b.copy(), classes, history)


def classify(
    model: VaePair,
    clf: SoftmaxClassifier,
    visual: np.ndarray,
    *,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Predicted class ids; the latent code is the posterior mean unless an
    ``rng`` is given, in which case one sample is drawn."""
    post = encode_visual(model, visual)
    z = post.mu if rng is None else nx.gaussian_reparam_sample(post.mu, post.log_var, rng)
    return clf.predict(z)


def harmonic_mean(s: float, u: float) -> float:
    return 0.0 if s + u == 0 else 2.0 * s * u / (s + u)


def _accuracy(pred, truth) -> float:
    return float(np.mean(pred == truth))


def _per_class(pred, truth) -> dict[int, float]:
    return {int(c): _accuracy(pred[truth == c], truth[truth == c]) for c in np.unique(truth)}


def evaluate(
    model: VaePair,
    clf: SoftmaxClassifier,
    table: FeatureTable,
    split: SplitSpec,
    mode: str,
    *,
    rng: np.random.Generator | None = None,
) -> dict:
    """ZSL: overall accuracy on unseen-class instances.  GZSL: seen accuracy
    S on held-out seen instances, unseen accuracy U, and their harmonic mean."""
    unseen_idx = table.indices_of(split.unseen)
    if len(unseen_idx) == 0:
        raise EvaluationError("no unseen-class test instances")
    pred_u = classify(model, clf, table.visual[unseen_idx], rng=rng)
    truth_u = table.labels[unseen_idx]
    if mode == "zsl":
        per_class = _per_class(pred_u, truth_u)
        return {
            "zsl_acc": _accuracy(pred_u, truth_u),
            "zsl_macro": float(np.mean(list(per_class.values()))),
            "per_class": per_class,
        }
    seen_idx = split.seen_test
    if seen_idx is None or len(seen_idx) == 0:
        raise EvaluationError("no seen-class test instances")
    pred_s = classify(model, clf, table.visual[seen_idx], rng=rng)
    truth_s = table.labels[seen_idx]
    S, U = _accuracy(pred_s, truth_s), _accuracy(pred_u, truth_u)
    per_class = {**_per_class(pred_s, truth_s), **_per_class(pred_u, truth_u)}
    return {"S": S, "U": U, "H": harmonic_mean(S, U), "per_class": per_class}


def split_seed(master_seed: int, split_index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), 100 + int(split_index)]).generate_state(1)[0])


def fit_and_evaluate(model, table, split, hp: HyperParams, mode, seed) -> dict:
    """Classifier stage for one trained model."""
    rng = nx.make_rng(seed, "classifier")
    ds = generate_latent_training_set(model, table, split, mode, hp.n_gen, rng)
    classes = split.unseen if mode == "zsl" else list(range(table.num_classes))
    clf = train_classifier(
        ds, epochs=hp.clf_epochs, learning_rate=hp.clf_learning_rate, class_ids=classes
    )
    return evaluate(model, clf, table, split, mode, rng=rng if hp.eval_on_sample else None)


def _headline(mode: str) -> list[str]:
    return ["zsl_acc"] if mode == "zsl" else ["S", "U", "H"]


def summarize(per_split: list[dict], mode: str) -> tuple[dict, dict]:
    keys = _headline(mode) + (["zsl_macro"] if mode == "zsl" else [])
    mean = {k: float(np.mean([r[k] for r in per_split])) for k in keys}
    std = {k: float(np.std([r[k] for r in per_split])) for k in keys}
    return mean, std


def run_experiment(
    table: FeatureTable,
    ratio,
    num_splits: int,
    hp: HyperParams,
    mode: str,
    *,
    seed: int | None = None,
) -> dict:
    """Train and evaluate on ``num_splits`` seen/unseen splits; report the mean."""
    seed = hp.seed if seed is None else seed
    splits = make_splits(table.num_classes, ratio, num_splits, seed, table=table)
    per_split = []
    for split in splits:
        s = split_seed(seed, split.split_index)
        result = train(table, split, hp, mode=mode, seed=s)
        metrics = fit_and_evaluate(result.model, table, split, hp, mode, s)
        per_split.append({"split_index": split.split_index, **metrics})
    mean, std = summarize(per_split, mode)
    n_seen, n_unseen = parse_ratio(ratio)
    return {
        "mode": mode,
        "ratio": f"{n_seen}/{n_unseen}",
        "per_split": per_split,
        "mean": mean,
        "std": std,
        "config_echo": hp.to_json(),
    }


def variant_params(hp: HyperParams, variant: str) -> HyperParams:
    """``hp`` with the contrastive weights zeroed per the variant's pattern."""
    vtov, vtos, stov = ABLATION_VARIANTS[variant]
    w = hp.weights
    return replace(
        hp,
        weights=replace(
            w,
            lambda3=w.lambda3 if vtov else 0.0,
            lambda4=w.lambda4 if vtos else 0.0,
            lambda5=w.lambda5 if stov else 0.0,
        ),
    )


def gzsl_counterpart(hp: HyperParams) -> HyperParams:
    """The GZSL column of the settings table applied to ``hp``'s other fields."""
    w = hp.weights
    return replace(
        hp,
        k=10,
        weights=replace(w, **{k: v for k, v in GZSL_WEIGHTS.items()}),
    )


def run_ablation(
    table: FeatureTable,
    ratio,
    hp_base: HyperParams,
    *,
    num_splits: int = 5,
    seed: int | None = None,
    modes=("zsl", "gzsl"),
    variants=tuple(ABLATION_VARIANTS),
    hp_gzsl: HyperParams | None = None,
) -> dict:
    """Every variant on every split; variants of one split train as a stack.

    ``hp_base`` supplies the ZSL weights; the GZSL column uses ``hp_gzsl``
    (default: :func:`gzsl_counterpart` of ``hp_base``).
    """
    seed = hp_base.seed if seed is None else seed
    splits = make_splits(table.num_classes, ratio, num_splits, seed, table=table)
    per_mode_hp = {"zsl": hp_base, "gzsl": hp_gzsl or gzsl_counterpart(hp_base)}
    rows = {v: {"variant": v, **dict(zip(("vtov", "vtos", "stov"), ABLATION_VARIANTS[v]))} for v in variants}
    details = {}
    for mode in modes:
        hp = per_mode_hp[mode]
        metric = "zsl_acc" if mode == "zsl" else "H"
        per_variant = {v: [] for v in variants}
        for split in splits:
            s = split_seed(seed, split.split_index)
            results = train_variants(
                table, split, [variant_params(hp, v) for v in variants], mode=mode, seed=s
            )
            for v, res in zip(variants, results):
                m = fit_and_evaluate(res.model, table, split, hp, mode, s)
                per_variant[v].append({"split_index": split.split_index, **m})
        for v in variants:
            mean, std = summarize(per_variant[v], mode)
            rows[v][mode] = mean[metric]
            details[(v, mode)] = {"per_split": per_variant[v], "mean": mean, "std": std}
    n_seen, n_unseen = parse_ratio(ratio)
    return {
        "ratio": f"{n_seen}/{n_unseen}",
        "rows": [rows[v] for v in variants],
        "details": {f"{v}/{m}": d for (v, m), d in details.items()},
        "config_echo": {m: per_mode_hp[m].to_json() for m in modes},
    }


def ablation_csv(report: dict) -> str:
    lines = ["variant,vtov,vtos,stov,zsl,gzsl"]
    for r in report["rows"]:
        cells = [r["variant"]] + [str(int(r[k])) for k in ("vtov", "vtos", "stov")]
        cells += ["" if r.get(m) is None else f"{r[m]:.6f}" for m in ("zsl", "gzsl")]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
