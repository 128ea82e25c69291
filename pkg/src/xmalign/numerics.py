"""Dense float64 primitives with a small reverse-mode tape.

Every primitive accepts plain ``np.ndarray`` inputs (and then returns a plain
array) or :class:`Var` inputs recorded on a :class:`Tape` (and then returns a
``Var``).  Only the primitives needed by single-hidden-layer VAEs, the
alignment losses and a softmax classifier are provided.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
NORM_FLOOR = 1e-12

# fixed sub-stream labels for seed derivation
STREAMS = {"data": 1, "init": 2, "sampler": 3, "reparam": 4, "classifier": 5}


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DegenerateVectorError(ArithmeticError):
    """A row with (numerically) zero norm was asked to be normalized."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


def make_rng(seed: int, stream: str | int = 0) -> np.random.Generator:
    """Independent, reproducible generator for ``(seed, stream)``.

    Streams are keyed through ``SeedSequence`` so the data, init, sampler,
    reparameterization and classifier streams never overlap.
    """
    label = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), label])))


class Var:
    """A value slot on a tape."""

    __slots__ = ("value", "tape", "parents", "vjp", "name", "idx")

    def __init__(self, value, tape, parents=(), vjp=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.idx = len(tape.nodes)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as they are created, so the list is topologically
    ordered by construction and ``backward`` can simply walk it in reverse.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value: np.ndarray) -> Var:
        v = Var(value, self, name=name)
        self.nodes.append(v)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), self)
        self.nodes.append(v)
        return v

    def record(self, value, parents, vjp) -> Var:
        v = Var(value, self, parents, vjp)
        self.nodes.append(v)
        return v

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every registered parameter."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TypeError("loss must be a Var recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.idx] = np.ones_like(loss.value)
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            grads[i] = None
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or parent.__class__ is not Var:
                    continue
                j = parent.idx
                grads[j] = pg if grads[j] is None else grads[j] + pg
        out = {}
        for name, p in self.params.items():
            g = grads[p.idx]
            out[name] = np.zeros_like(p.value) if g is None else g
        return out


def value(x):
    """Underlying array of a Var, or the input itself."""
    return x.value if x.__class__ is Var else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if x.__class__ is Var:
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives
# Matrices are N×D.  An optional leading axis stacks independent runs
# (R×N×D) that share inputs but not parameters; reductions documented as
# "0-d" then return one value per run.


def _swap(x: np.ndarray) -> np.ndarray:
    return x.swapaxes(-1, -2)


def _sum2(x: np.ndarray) -> np.ndarray:
    """Sum over the two trailing axes."""
    return x.sum(axis=(-2, -1))


def _lift(g: np.ndarray) -> np.ndarray:
    """Per-run upstream gradient broadcast against R×N×D operands."""
    return g[..., None, None] if np.ndim(g) else g


def affine(x, W, b):
    """``x @ W + b`` for ``x`` N×Din, ``W`` Din×Dout, ``b`` of length Dout."""
    xv, Wv, bv = value(x), value(W), value(b)
    if (
        xv.ndim < 2
        or Wv.ndim < 2
        or xv.shape[-1] != Wv.shape[-2]
        or bv.shape[-1] != Wv.shape[-1]
        or bv.ndim != Wv.ndim - 1
    ):
        raise DimensionError(f"affine: x {xv.shape} @ W {Wv.shape} + b {bv.shape} do not conform")
    out = xv @ Wv + bv[..., None, :]
    tape = _tape_of(x, W, b)
    if tape is None:
        return out
    xs, Ws = xv.shape, Wv.shape

    def vjp(g):
        return (
            _unbroadcast(g @ _swap(Wv), xs),
            _unbroadcast(_swap(xv) @ g, Ws),
            g.sum(axis=-2),
        )

    return tape.record(out, (x, W, b), vjp)


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul: {av.shape} @ {bv.shape} do not conform")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = av.shape, bv.shape
    return tape.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g @ _swap(bv), sa), _unbroadcast(_swap(av) @ g, sb)),
    )


def transpose(x):
    xv = value(x)
    tape = _tape_of(x)
    if tape is None:
        return _swap(xv)
    return tape.record(_swap(xv), (x,), lambda g: (_swap(g),))


def relu(x):
    """``max(0, x)``; the gradient at exactly 0 is 0."""
    xv = value(x)
    mask = xv > 0
    out = xv * mask
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * mask,))


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        out, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb))
    )


def scale(x, c: float):
    xv = value(x)
    out = xv * c
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * c,))


def exp(x):
    xv = value(x)
    out = np.exp(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * out,))


def square(x):
    xv = value(x)
    out = xv * xv
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (2.0 * g * xv,))


def sqrt(x):
    """Elementwise square root; the gradient at exactly 0 is taken as 0."""
    xv = value(x)
    out = np.sqrt(xv)
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return tape.record(out, (x,), vjp)


def abs_(x):
    xv = value(x)
    out = np.abs(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * np.sign(xv),))


def clip(x, lo: float, hi: float):
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside."""
    xv = value(x)
    out = np.clip(xv, lo, hi)
    tape = _tape_of(x)
    if tape is None:
        return out
    inside = (xv > lo) & (xv < hi)
    return tape.record(out, (x,), lambda g: (g * inside,))


def total(x):
    """Sum of all entries as a 0-d value."""
    xv = value(x)
    out = np.asarray(xv.sum())
    tape = _tape_of(x)
    if tape is None:
        return out
    shape = xv.shape
    return tape.record(out, (x,), lambda g: (np.full(shape, g),))


def row_sum(x):
    """Sum over columns, N×D -> length-N vector."""
    xv = value(x)
    out = xv.sum(axis=-1)
    tape = _tape_of(x)
    if tape is None:
        return out
    shape = xv.shape
    return tape.record(out, (x,), lambda g: (np.broadcast_to(g[..., None], shape).copy(),))


def take_rows(x, index: np.ndarray):
    """Gather rows ``x[index]``; repeated indices accumulate in the gradient."""
    xv = value(x)
    index = np.asarray(index, dtype=np.intp)
    out = xv[..., index, :]
    tape = _tape_of(x)
    if tape is None:
        return out
    # scatter-add as a one-hot product so stacked runs need no special case
    onehot = np.zeros((xv.shape[-2], len(index)))
    onehot[index, np.arange(len(index))] = 1.0
    return tape.record(out, (x,), lambda g: (onehot @ g,))


def split_cols(x, at: int):
    """Split N×D into N×at and N×(D−at)."""
    xv = value(x)
    tape = _tape_of(x)
    if tape is None:
        return xv[..., :at], xv[..., at:]
    shape = xv.shape

    def left_vjp(g):
        gx = np.zeros(shape)
        gx[..., :at] = g
        return (gx,)

    def right_vjp(g):
        gx = np.zeros(shape)
        gx[..., at:] = g
        return (gx,)

    return (
        tape.record(xv[..., :at], (x,), left_vjp),
        tape.record(xv[..., at:], (x,), right_vjp),
    )


def l2_normalize_rows(x):
    """Divide each row by its Euclidean norm."""
    xv = value(x)
    norms = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    if np.any(norms < NORM_FLOOR):
        bad = np.argwhere(norms[..., 0] < NORM_FLOOR)[0]
        raise DegenerateVectorError(
            f"row {tuple(int(i) for i in bad)} has norm < {NORM_FLOOR}; latent code collapsed"
        )
    out = xv / norms
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return tape.record(out, (x,), vjp)


def masked_log_softmax_nll(logits, denom_mask, pos_weight: np.ndarray, *, check: bool = True):
    """``-Σ_i Σ_j w_ij (s_ij - logsumexp_{j in mask_i} s_ij)`` as a 0-d value.

    ``denom_mask`` selects, per anchor row, the entries in the softmax
    denominator (``None`` means all of them); ``pos_weight`` holds the
    weight of each (anchor, positive) term and must be zero outside the
    mask.  All three contrastive losses and the classifier cross-entropy
    are instances of this form.
    """
    sv = value(logits)
    if check:
        if sv.shape[-2:] != pos_weight.shape or (
            denom_mask is not None and sv.shape[-2:] != np.shape(denom_mask)
        ):
            raise DimensionError(
                f"logits {sv.shape}, mask {np.shape(denom_mask)}, weights {pos_weight.shape} differ"
            )
        if denom_mask is not None:
            dm = np.asarray(denom_mask, bool)
            if np.any(pos_weight[~dm] != 0):
                raise ValueError("positive weight outside the softmax denominator")
            if not np.all(dm.any(axis=1)):
                raise ValueError("an anchor row has an empty softmax denominator")
    if denom_mask is None:
        m = sv.max(axis=-1, keepdims=True)
        e = np.exp(sv - m)
    else:
        m = np.where(denom_mask, sv, -np.inf).max(axis=-1, keepdims=True)
        e = np.exp(np.where(denom_mask, sv - m, -np.inf))
    z = e.sum(axis=-1, keepdims=True)
    lse = m + np.log(z)
    row_w = pos_weight.sum(axis=-1)
    # pos_weight is zero off-mask, so masked entries never contribute
    out = np.asarray((row_w * lse[..., 0]).sum(axis=-1) - _sum2(pos_weight * sv))
    tape = _tape_of(logits)
    if tape is None:
        return out

    def vjp(g):
        return (_lift(g) * ((e / z) * row_w[:, None] - pos_weight),)

    return tape.record(out, (logits,), vjp)


def gaussian_reparam_sample(mu, log_var, rng: np.random.Generator):
    """``mu + exp(log_var / 2) * eps`` with ``eps ~ N(0, I)`` drawn from ``rng``.

    ``log_var`` is clamped to ``[LOG_VAR_MIN, LOG_VAR_MAX]`` first; ``eps`` is
    a constant for differentiation.  Stacked runs share one N×D draw.
    """
    muv, lvv = value(mu), value(log_var)
    if np.shape(muv) != np.shape(lvv):
        raise DimensionError(f"mu {np.shape(muv)} and log_var {np.shape(lvv)} differ")
    eps = rng.standard_normal(np.shape(muv)[-2:])
    inside = (lvv > LOG_VAR_MIN) & (lvv < LOG_VAR_MAX)
    noise = np.exp(0.5 * np.clip(lvv, LOG_VAR_MIN, LOG_VAR_MAX)) * eps
    out = muv + noise
    tape = _tape_of(mu, log_var)
    if tape is None:
        return out
    return tape.record(out, (mu, log_var), lambda g: (g, 0.5 * g * noise * inside))


# ------------------------------------------------------------ fused kernels
# Each is a composition of the primitives above collapsed into one tape node.


def mlp(x, W1, b1, W2, b2):
    """``relu(x @ W1 + b1) @ W2 + b2``."""
    xv, W1v, b1v, W2v, b2v = (value(t) for t in (x, W1, b1, W2, b2))
    if (
        xv.ndim < 2
        or xv.shape[-1] != W1v.shape[-2]
        or b1v.shape[-1] != W1v.shape[-1]
        or W2v.shape[-2] != W1v.shape[-1]
        or b2v.shape[-1] != W2v.shape[-1]
    ):
        raise DimensionError(
            f"mlp: x {xv.shape}, W1 {W1v.shape}, b1 {b1v.shape}, W2 {W2v.shape}, b2 {b2v.shape}"
        )
    pre = xv @ W1v + b1v[..., None, :]
    active = pre > 0
    h = pre * active
    out = h @ W2v + b2v[..., None, :]
    tape = _tape_of(x, W1, b1, W2, b2)
    if tape is None:
        return out
    xs, W1s = xv.shape, W1v.shape

    def vjp(g):
        gh = (g @ _swap(W2v)) * active
        return (
            _unbroadcast(gh @ _swap(W1v), xs),
            _unbroadcast(_swap(xv) @ gh, W1s),
            gh.sum(axis=-2),
            _swap(h) @ g,
            g.sum(axis=-2),
        )

    return tape.record(out, (x, W1, b1, W2, b2), vjp)


def l1_distance(a, b):
    """``sum |a - b|`` as a 0-d value."""
    av, bv = value(a), value(b)
    d = av - bv
    out = np.asarray(_sum2(np.abs(d)))
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sgn = np.sign(d)
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(_lift(g) * sgn, sa), _unbroadcast(-_lift(g) * sgn, sb)),
    )


def gaussian_kl(mu, log_var):
    """``KL(N(mu, exp(log_var)) || N(0, I))`` summed over all entries."""
    muv, lvv = value(mu), value(log_var)
    var = np.exp(lvv)
    out = np.asarray(0.5 * _sum2(muv * muv + var - 1.0 - lvv))
    tape = _tape_of(mu, log_var)
    if tape is None:
        return out
    return tape.record(
        out, (mu, log_var), lambda g: (_lift(g) * muv, 0.5 * _lift(g) * (var - 1.0))
    )


def paired_gaussian_distance(mu_a, lv_a, mu_b, lv_b, index: np.ndarray):
    """``Σ_i sqrt(|mu_a[i] - mu_b[index[i]]|² + |std_a[i] - std_b[index[i]]|²)``.

    ``std = exp(log_var / 2)``.  The gradient of a zero-distance pair is 0.
    """
    ma, la, mb, lb = (value(t) for t in (mu_a, lv_a, mu_b, lv_b))
    index = np.asarray(index, dtype=np.intp)
    sa, sb = np.exp(0.5 * la), np.exp(0.5 * lb)
    dm = ma - mb[..., index, :]
    ds = sa - sb[..., index, :]
    dist = np.sqrt((dm * dm).sum(axis=-1) + (ds * ds).sum(axis=-1))
    out = np.asarray(dist.sum(axis=-1))
    tape = _tape_of(mu_a, lv_a, mu_b, lv_b)
    if tape is None:
        return out
    onehot = np.zeros((mb.shape[-2], len(index)))
    onehot[index, np.arange(len(index))] = 1.0

    def vjp(g):
        inv = np.where(dist > 0, 1.0 / np.where(dist > 0, dist, 1.0), 0.0)
        w = (g[..., None] if np.ndim(g) else g) * inv
        gm = w[..., None] * dm
        gs = w[..., None] * ds
        return gm, 0.5 * gs * sa, -(onehot @ gm), -0.5 * (onehot @ gs) * sb

    return tape.record(out, (mu_a, lv_a, mu_b, lv_b), vjp)


def scaled_gram(a, b, c: float):
    """``c * a @ b.T``."""
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-1]:
        raise DimensionError(f"gram: {av.shape} vs {bv.shape}")
    out = c * (av @ _swap(bv))
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (c * (g @ bv), c * (_swap(g) @ av)))


def weighted_sum(terms: Sequence, weights: Sequence):
    """``Σ_i w_i t_i`` of 0-d values; a weight may be a per-run vector."""
    out = np.asarray(sum(w * value(t) for t, w in zip(terms, weights)))
    tape = _tape_of(*terms)
    if tape is None:
        return out
    ws = tuple(weights)
    return tape.record(out, tuple(terms), lambda g: tuple(w * g for w in ws))


# -------------------------------------------------------------- verification


def finite_diff_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: Sequence[str] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    The relative error of a coordinate is ``|fd - an| / max(1, |an|)``.
    ``max_coords`` limits the check to a random subset per parameter.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    worst = 0.0
    for name in names if names is not None else list(work):
        p = work[name]
        flat = p.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        an = np.asarray(analytic[name]).reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f(work))
            flat[j] = orig - eps
            fm = float(f(work))
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite evaluation perturbing {name}[{j}]")
            fd = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(fd - an[j]) / max(1.0, abs(an[j])))
    return worst


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` for every parameter registered on ``tape``."""
    return tape.backward(loss)
