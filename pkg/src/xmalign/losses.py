"""Alignment objectives over one batch of latent codes.

Single-instance terms (VAE, cross reconstruction, distribution alignment)
pull each visual instance toward its own class descriptor; the three
contrastive terms additionally push codes of different classes apart.

By default every per-batch sum is divided by its number of anchor terms so
loss weights do not depend on batch size; ``sum_reduction=True`` gives the
plain sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import LatentGaussian, VaePair, decode_semantic, decode_visual, encode_semantic, encode_visual

TERMS = ("vae", "cmfr", "cmda", "vtov", "vtos", "stov")

# default loss weights per setting
ZSL_WEIGHTS = dict(lambda1=10.0, lambda2=1.0, lambda3=100.0, lambda4=100.0, lambda5=10.0, tau=2.0)
GZSL_WEIGHTS = dict(lambda1=1.0, lambda2=1.0, lambda3=0.1, lambda4=1.0, lambda5=1.0, tau=2.0)


class PreconditionError(ValueError):
    """A batch cannot support a loss term (e.g. a class with one instance)."""


class DataIntegrityError(ValueError):
    """A label has no matching class descriptor."""


@dataclass
class LossWeights:
    lambda1: float = 10.0  # cross-modal reconstruction
    lambda2: float = 1.0  # distribution alignment
    lambda3: float = 100.0  # visual-to-visual
    lambda4: float = 100.0  # visual-to-semantic
    lambda5: float = 10.0  # semantic-to-visual
    tau: float = 2.0
    sum_reduction: bool = False
    contrastive_on_mu: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5"):
            lam = getattr(self, name)
            if not np.isfinite(lam) or lam < 0:
                raise ValueError(f"{name} must be a finite non-negative number, got {lam}")
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def weight(self, term: str) -> float:
        return {
            "vae": 1.0,
            "cmfr": self.lambda1,
            "cmda": self.lambda2,
            "vtov": self.lambda3,
            "vtos": self.lambda4,
            "stov": self.lambda5,
        }[term]


@dataclass
class BatchLatents:
    """Everything the six losses need for one batch.

    Visual rows are instances (index set I, size N); semantic rows are the
    distinct classes of the batch (index set J, size M).  ``s_index[i]`` is
    the semantic row of instance ``i``'s class.
    """

    v: np.ndarray
    s: np.ndarray
    labels: np.ndarray
    class_ids: np.ndarray
    post_v: LatentGaussian
    post_s: LatentGaussian
    zv: object
    zs: object
    v_rec: object  # D_v(z_v)
    s_rec: object  # D_s(z_s)
    v_cross: object  # D_v(z_s) per instance
    s_cross: object  # D_s(z_v)
    s_index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.class_ids = np.asarray(self.class_ids)
        if self.s_index is None:
            self.s_index = descriptor_index(self.labels, self.class_ids)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def m(self) -> int:
        return len(self.class_ids)


def descriptor_index(labels, class_ids) -> np.ndarray:
    """Map every label to its row in ``class_ids``."""
    lookup = {int(c): j for j, c in enumerate(class_ids)}
    if len(lookup) != len(class_ids):
        raise DataIntegrityError("duplicate class descriptor rows in batch")
    try:
        return np.array([lookup[int(y)] for y in labels], dtype=np.intp)
    except KeyError as exc:
        raise DataIntegrityError(f"no descriptor for class {exc.args[0]}") from None


def encode_batch(
    pair: VaePair,
    v,
    s,
    labels,
    class_ids,
    rng: np.random.Generator,
    *,
    s_index: np.ndarray | None = None,
) -> BatchLatents:
    """Run both VAEs on a batch: encode, sample, decode self and cross."""
    if s_index is None:
        s_index = descriptor_index(labels, class_ids)
    post_v = encode_visual(pair, v)
    post_s = encode_semantic(pair, s)
    zv = nx.gaussian_reparam_sample(post_v.mu, post_v.log_var, rng)
    zs = nx.gaussian_reparam_sample(post_s.mu, post_s.log_var, rng)
    return BatchLatents(
        v=nx.value(v),
        s=nx.value(s),
        labels=labels,
        class_ids=class_ids,
        post_v=post_v,
        post_s=post_s,
        zv=zv,
        zs=zs,
        v_rec=decode_visual(pair, zv),
        s_rec=decode_semantic(pair, zs),
        v_cross=nx.take_rows(decode_visual(pair, zs), s_index),
        s_cross=decode_semantic(pair, zv),
        s_index=s_index,
    )


def _reduce(x, count: int, sum_reduction: bool):
    return x if sum_reduction else nx.scale(x, 1.0 / count)


def kl_standard_normal(mu, log_var):
    """Closed-form ``KL(N(mu, exp(log_var)) || N(0, I))`` summed over everything."""
    return nx.gaussian_kl(mu, log_var)


def vae_loss(batch: BatchLatents, *, sum_reduction: bool = False):
    """Negated ELBO of both VAEs: L1 self-reconstruction plus KL to N(0, I)."""
    terms = [
        nx.l1_distance(batch.v, batch.v_rec),
        nx.gaussian_kl(batch.post_v.mu, batch.post_v.log_var),
        nx.l1_distance(batch.s, batch.s_rec),
        nx.gaussian_kl(batch.post_s.mu, batch.post_s.log_var),
    ]
    if sum_reduction:
        return nx.weighted_sum(terms, [1.0] * 4)
    nv, ns = 1.0 / batch.n, 1.0 / batch.m
    return nx.weighted_sum(terms, [nv, nv, ns, ns])


def cmfr_loss(batch: BatchLatents, *, sum_reduction: bool = False):
    """L1 error of decoding each modality from the other modality's code."""
    s_per_instance = batch.s[batch.s_index]
    c = 1.0 if sum_reduction else 1.0 / batch.n
    return nx.weighted_sum(
        [nx.l1_distance(batch.v, batch.v_cross), nx.l1_distance(s_per_instance, batch.s_cross)],
        [c, c],
    )


def cmda_loss(batch: BatchLatents, *, sum_reduction: bool = False):
    """Per-instance 2-Wasserstein distance between the visual and class posteriors."""
    dist = nx.paired_gaussian_distance(
        batch.post_v.mu, batch.post_v.log_var, batch.post_s.mu, batch.post_s.log_var, batch.s_index
    )
    return _reduce(dist, batch.n, sum_reduction)


# ---------------------------------------------------------------- contrastive


_STRUCTURE_CACHE: dict = {}


def _structure(kind: str, s_index: np.ndarray, m: int):
    """Softmax masks and positive weights, which depend only on batch layout."""
    key = (kind, m, s_index.tobytes())
    hit = _STRUCTURE_CACHE.get(key)
    if hit is not None:
        return hit
    n = len(s_index)
    if kind == "vtov":
        counts = np.bincount(s_index, minlength=m)
        present = counts > 0
        if np.any(counts[present] < 2):
            raise PreconditionError("single-instance class")
        not_self = ~np.eye(n, dtype=bool)
        pos = (s_index[:, None] == s_index[None, :]) & not_self
        out = (not_self, pos / pos.sum(axis=1, keepdims=True))
    elif kind == "vtos":
        weight = np.zeros((n, m))
        weight[np.arange(n), s_index] = 1.0
        out = (None, weight)
    else:
        pos = np.arange(m)[:, None] == s_index[None, :]
        if np.any(pos.sum(axis=1) == 0):
            raise PreconditionError("descriptor without instances")
        out = (None, pos / pos.sum(axis=1, keepdims=True))
    if len(_STRUCTURE_CACHE) > 4096:
        _STRUCTURE_CACHE.clear()
    _STRUCTURE_CACHE[key] = out
    return out


def _vtov(zn, labels, tau, sum_reduction, s_index=None):
    labels = np.asarray(labels)
    if s_index is None:
        _, s_index = np.unique(labels, return_inverse=True)
    counts = np.bincount(s_index)
    if np.any(counts < 2):
        lonely = labels[np.flatnonzero(counts[s_index] < 2)[0]]
        raise PreconditionError(f"class {lonely} has a single instance; visual-to-visual needs >= 2")
    mask, weight = _structure("vtov", s_index, int(s_index.max()) + 1)
    sim = nx.scaled_gram(zn, zn, 1.0 / tau)
    nll = nx.masked_log_softmax_nll(sim, mask, weight, check=False)
    return _reduce(nll, len(labels), sum_reduction)


def _vtos(znv, zns, labels, class_ids, tau, sum_reduction, s_index=None):
    if s_index is None:
        s_index = descriptor_index(labels, class_ids)
    _, weight = _structure("vtos", s_index, len(class_ids))
    sim = nx.scaled_gram(znv, zns, 1.0 / tau)
    nll = nx.masked_log_softmax_nll(sim, None, weight, check=False)
    return _reduce(nll, len(s_index), sum_reduction)


def _stov(znv, zns, labels, class_ids, tau, sum_reduction, s_index=None):
    if s_index is None:
        s_index = descriptor_index(labels, class_ids)
    m = len(class_ids)
    present = np.bincount(s_index, minlength=m) > 0
    if not np.all(present):
        missing = np.asarray(class_ids)[np.flatnonzero(~present)[0]]
        raise PreconditionError(f"descriptor of class {missing} has no instance in batch")
    _, weight = _structure("stov", s_index, m)
    sim = nx.scaled_gram(zns, znv, 1.0 / tau)
    nll = nx.masked_log_softmax_nll(sim, None, weight, check=False)
    return _reduce(nll, m, sum_reduction)


def vtov_term(zv, labels, tau: float, *, sum_reduction: bool = False):
    """Supervised contrastive loss among visual codes.

    The softmax denominator of anchor ``i`` runs over every other instance
    (positives included); positives are averaged per anchor.
    """
    return _vtov(nx.l2_normalize_rows(zv), labels, tau, sum_reduction)


def vtos_term(zv, zs, labels, class_ids, tau: float, *, sum_reduction: bool = False):
    """Each visual code against every class descriptor code in the batch."""
    return _vtos(
        nx.l2_normalize_rows(zv), nx.l2_normalize_rows(zs), labels, class_ids, tau, sum_reduction
    )


def stov_term(zv, zs, labels, class_ids, tau: float, *, sum_reduction: bool = False):
    """Each descriptor code against all visual codes; positives are its instances."""
    return _stov(
        nx.l2_normalize_rows(zv), nx.l2_normalize_rows(zs), labels, class_ids, tau, sum_reduction
    )


def _codes(batch: BatchLatents, on_mu: bool):
    if on_mu:
        return batch.post_v.mu, batch.post_s.mu
    return batch.zv, batch.zs


def vtov_loss(batch: BatchLatents, tau: float, *, sum_reduction=False, on_mu=False):
    zv, _ = _codes(batch, on_mu)
    return _vtov(nx.l2_normalize_rows(zv), batch.labels, tau, sum_reduction, batch.s_index)


def vtos_loss(batch: BatchLatents, tau: float, *, sum_reduction=False, on_mu=False):
    zv, zs = _codes(batch, on_mu)
    return vtos_term(zv, zs, batch.labels, batch.class_ids, tau, sum_reduction=sum_reduction)


def stov_loss(batch: BatchLatents, tau: float, *, sum_reduction=False, on_mu=False):
    zv, zs = _codes(batch, on_mu)
    return stov_term(zv, zs, batch.labels, batch.class_ids, tau, sum_reduction=sum_reduction)


def _weighted_terms(batch: BatchLatents, ws: list[LossWeights]):
    first = ws[0]
    for w in ws[1:]:
        if (w.tau, w.sum_reduction, w.contrastive_on_mu) != (
            first.tau,
            first.sum_reduction,
            first.contrastive_on_mu,
        ):
            raise ValueError("stacked runs must share tau and reduction flags")
    red = first.sum_reduction
    normed = {}

    def codes():
        # normalize once, shared by the three contrastive terms
        if not normed:
            zv, zs = _codes(batch, first.contrastive_on_mu)
            normed["v"], normed["s"] = nx.l2_normalize_rows(zv), nx.l2_normalize_rows(zs)
        return normed["v"], normed["s"]

    fns = {
        "vae": lambda: vae_loss(batch, sum_reduction=red),
        "cmfr": lambda: cmfr_loss(batch, sum_reduction=red),
        "cmda": lambda: cmda_loss(batch, sum_reduction=red),
        "vtov": lambda: _vtov(codes()[0], batch.labels, first.tau, red, batch.s_index),
        "vtos": lambda: _vtos(*codes(), batch.labels, batch.class_ids, first.tau, red, batch.s_index),
        "stov": lambda: _stov(*codes(), batch.labels, batch.class_ids, first.tau, red, batch.s_index),
    }
    vals, lams, names = [], [], []
    for term in TERMS:
        lam = np.array([w.weight(term) for w in ws])
        if not np.any(lam):
            continue
        vals.append(fns[term]())
        lams.append(lam if len(ws) > 1 else float(lam[0]))
        names.append(term)
    return nx.weighted_sum(vals, lams), dict(zip(names, vals))


def total_loss(batch: BatchLatents, w: LossWeights):
    """Weighted objective and a breakdown of unweighted terms.

    Terms whose weight is zero are skipped entirely (their preconditions
    are not checked) and appear as ``None`` in the breakdown.
    """
    out, terms = _weighted_terms(batch, [w])
    breakdown = {t: (float(nx.value(terms[t])) if t in terms else None) for t in TERMS}
    breakdown["total"] = float(nx.value(out))
    return out, breakdown


def total_loss_stacked(batch: BatchLatents, ws: list[LossWeights]):
    """:func:`total_loss` for a stacked batch, one weight set per run.

    Returns the sum of all runs' objectives (runs do not share parameters,
    so its gradient is each run's own gradient) and one breakdown per run.
    A term is computed when any run enables it; runs with a zero weight
    get ``None`` for it.
    """
    out, terms = _weighted_terms(batch, ws)
    per_run_total = nx.value(out)
    breakdowns = []
    for r, w in enumerate(ws):
        bd = {
            t: (float(nx.value(terms[t])[r]) if t in terms and w.weight(t) != 0 else None)
            for t in TERMS
        }
        bd["total"] = float(per_run_total[r])
        breakdowns.append(bd)
    return nx.total(out), breakdowns
