"""Reverse-mode automatic differentiation over dense float64 arrays.

Eager tape: each operation returns a new Tensor remembering grad-relevant
parents together with a local backward rule. Calling backward() on a scalar
root walks the tape once in reverse topological order and accumulates
gradients into every Tensor with requires_grad set; repeated backward calls
without zero_grad() keep accumulating.

The op set is deliberately small: add (with trailing-shape bias broadcast),
elementwise multiply, scalar scaling, 2-D matmul / matvec, row and full
concatenation, dot products (including rowwise against a constant), relu,
log, exp, temperature softmax, stabilized logsumexp, sum/mean reductions,
weighted sums against constant coefficients, spatial mean pooling, strided
2-D convolution, box-weighted ROI average pooling, l2 normalization and
detach. Everything is computed in 64-bit floats.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, OracleError, ShapeError

Array = np.ndarray

# (parent, fn) pairs; fn maps the node's adjoint to the parent's contribution
_Link = tuple["Tensor", Callable[[Array], Array]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_links")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._links: tuple[_Link, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar root, got shape {self.data.shape}"
            )
        order = _reverse_topo(self)
        adjoint: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            # only leaves keep a persistent grad buffer; interior adjoints are
            # transient, which keeps repeated backward calls consistent
            if node.requires_grad and not node._links:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            for parent, fn in node._links:
                contrib = fn(g)
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = contrib if prev is None else prev + contrib

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        return multiply(self, other if isinstance(other, Tensor) else Tensor(other))

    def __matmul__(self, other):
        return matmul(self, other if isinstance(other, Tensor) else Tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _reverse_topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._links:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _make(data: Array, links: Sequence[_Link]) -> Tensor:
    kept = tuple((p, fn) for p, fn in links if p.requires_grad or p._links)
    out = Tensor(data, requires_grad=bool(kept))
    out._links = kept
    return out


def _sum_to(shape: tuple[int, ...], g: Array) -> Array:
    # reduce leading broadcast axes introduced by trailing-shape addition
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.shape[a.data.ndim - b.data.ndim:] != b.shape:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.data + b.data,
        [(a, lambda g: g), (b, lambda g: _sum_to(b.shape, g))],
    )


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"multiply: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, [(x, lambda g: g * c)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return _make(
            ad @ bd,
            [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)],
        )
    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return _make(
            ad @ bd,
            [(a, lambda g: np.outer(g, bd)), (b, lambda g: ad.T @ g)],
        )
    raise ShapeError(f"matmul supports 2Dx2D or 2Dx1D, got {a.shape} and {b.shape}")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: need equal 1-D shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(
        np.array(ad @ bd),
        [(a, lambda g: g * bd), (b, lambda g: g * ad)],
    )


def rowwise_dot(x: Tensor, const: Array) -> Tensor:
    """Per-row dot product of a (N, d) tensor against a constant (N, d) array."""
    c = np.asarray(const, dtype=np.float64)
    if x.data.shape != c.shape or x.data.ndim != 2:
        raise ShapeError(f"rowwise_dot: incompatible shapes {x.shape} and {c.shape}")
    return _make(
        np.einsum("nd,nd->n", x.data, c),
        [(x, lambda g: g[:, None] * c)],
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.data.shape
    return _make(x.data.reshape(shape), [(x, lambda g: g.reshape(old))])


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    na = a.shape[0]
    return _make(
        np.concatenate([a.data, b.data], axis=0),
        [(a, lambda g: g[:na]), (b, lambda g: g[na:])],
    )


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _make(
        np.concatenate([a.data, b.data], axis=1),
        [(a, lambda g: g[:, :ca]), (b, lambda g: g[:, ca:])],
    )


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), [(x, lambda g: g * mask)])


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), [(x, lambda g: g / xd)])


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, [(x, lambda g: g * out)])


# ---------------------------------------------------------------------------
# reductions and softmax family


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), [(x, lambda g: np.broadcast_to(g, shape).copy())])


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _make(
        np.array(x.data.sum() / n),
        [(x, lambda g: np.broadcast_to(g / n, shape).copy())],
    )


def weighted_sum(x: Tensor, weights: Array) -> Tensor:
    """Sum of x elementwise-scaled by constant coefficients, as a scalar."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.data.shape:
        raise ShapeError(f"weighted_sum: incompatible shapes {x.shape} and {w.shape}")
    return _make(np.array((x.data * w).sum()), [(x, lambda g: g * w)])


def logsumexp(x: Tensor) -> Tensor:
    """Stabilized log-sum-exp over the last axis (max subtraction)."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    soft = e / s  # reused as the backward jacobian row

    def back(g: Array) -> Array:
        return np.expand_dims(g, -1) * soft

    return _make(out, [(x, back)])


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis, max-subtraction stabilized."""
    if temperature <= 0:
        raise ContractError(f"softmax temperature must be > 0, got {temperature}")
    scaled = x.data / temperature
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g: Array) -> Array:
        inner = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - inner) / temperature

    return _make(y, [(x, back)])


def l2_normalize(v: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Normalize the last axis to unit Euclidean norm.

    Raises DegenerateInputError when any norm falls below epsilon; silent
    division by a vanishing norm is not allowed.
    """
    norms = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    if (norms < epsilon).any():
        raise DegenerateInputError(
            f"l2_normalize: norm below epsilon={epsilon} (min={norms.min():.3e})"
        )
    y = v.data / norms

    def back(g: Array) -> Array:
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (g - y * inner) / norms

    return _make(y, [(v, back)])


# ---------------------------------------------------------------------------
# spatial ops


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of an (N, H, W, C) tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_mean expects (N, H, W, C), got {x.shape}")
    n, h, w, c = x.data.shape
    cells = h * w
    out = x.data.reshape(n, cells, c).sum(axis=1) / cells

    def back(g: Array) -> Array:
        return np.broadcast_to(g[:, None, None, :] / cells, (n, h, w, c)).copy()

    return _make(out, [(x, back)])


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on (N, H, W, Cin) with a (kh, kw, Cin, Cout) kernel."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/kernel, got {x.shape} and {w.shape}")
    if xd.shape[3] != wd.shape[2]:
        raise ShapeError(f"conv2d: channel mismatch between {x.shape} and {w.shape}")
    if bd.shape != (wd.shape[3],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")
    n, h, wdt, cin = xd.shape
    kh, kw, _, cout = wd.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wdt + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape}")

    if p:
        # zero only the border strips instead of the whole padded buffer
        xp = np.empty((n, h + 2 * p, wdt + 2 * p, cin))
        xp[:, :p, :, :] = 0.0
        xp[:, p + h:, :, :] = 0.0
        xp[:, p:p + h, :p, :] = 0.0
        xp[:, p:p + h, p + wdt:, :] = 0.0
        xp[:, p:p + h, p:p + wdt, :] = xd
    else:
        xp = xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::s, ::s]  # (N, Ho, Wo, Cin, kh, kw)
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * ho * wo, kh * kw * cin
    )
    wmat = wd.reshape(kh * kw * cin, cout)
    out = (col @ wmat + bd).reshape(n, ho, wo, cout)

    def back_x(g: Array) -> Array:
        g2 = g.reshape(n * ho * wo, cout)
        dcol = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + (ho - 1) * s + 1:s, j:j + (wo - 1) * s + 1:s, :] += dcol[
                    :, :, :, i, j, :
                ]
        return dxp[:, p:p + h, p:p + wdt, :] if p else dxp

    def back_w(g: Array) -> Array:
        g2 = g.reshape(n * ho * wo, cout)
        return (col.T @ g2).reshape(kh, kw, cin, cout)

    def back_b(g: Array) -> Array:
        return g.reshape(-1, cout).sum(axis=0)

    return _make(out, [(x, back_x), (w, back_w), (b, back_b)])


def roi_avg_pool(u: Tensor, cell_weights: Array) -> Tensor:
    """Weighted average of feature-map cells per box.

    cell_weights is a constant (N, L, H*W) array whose rows sum to 1; rows
    with exactly uniform weights are reduced by plain summation so that a
    full-image box is bit-identical to spatial_mean.
    """
    if u.data.ndim != 4:
        raise ShapeError(f"roi_avg_pool expects (N, H, W, C), got {u.shape}")
    wts = np.asarray(cell_weights, dtype=np.float64)
    n, h, w, c = u.data.shape
    cells = h * w
    if wts.ndim != 3 or wts.shape[0] != n or wts.shape[2] != cells:
        raise ShapeError(
            f"roi_avg_pool: weights {wts.shape} do not match feature map {u.shape}"
        )
    flat = u.data.reshape(n, cells, c)
    out = np.einsum("nlk,nkc->nlc", wts, flat)
    uniform = (wts.max(axis=2) == wts.min(axis=2))
    if uniform.any():
        mean = flat.sum(axis=1) / cells  # same reduction as spatial_mean
        ns, ls = np.nonzero(uniform)
        out[ns, ls] = mean[ns]

    def back(g: Array) -> Array:
        return np.einsum("nlk,nlc->nkc", wts, g).reshape(n, h, w, c)

    return _make(out, [(u, back)])


# ---------------------------------------------------------------------------
# gradient-checking oracle


def finite_difference_check(
    scalar_function: Callable[[list[Tensor]], Tensor],
    params: list[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative disagreement between tape gradients and central differences.

    Relative error per coordinate is |analytic - central| / max(1, |central|);
    the maximum over all coordinates of all params is returned. The function
    is re-evaluated from scratch at every perturbed point, so the central
    differences never touch the tape being checked.
    """
    for p in params:
        p.zero_grad()
    out = scalar_function(params)
    if out.data.size != 1:
        raise ContractError("scalar_function must return a scalar Tensor")
    if not np.isfinite(out.data).all():
        raise OracleError("non-finite value at the expansion point")
    out.backward()
    analytic = [
        (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params
    ]
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        aflat = analytic[pi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(scalar_function(params).data)
            flat[j] = orig - step
            fm = float(scalar_function(params).data)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise OracleError(f"non-finite evaluation while perturbing coordinate {j}")
            central = (fp - fm) / (2.0 * step)
            err = abs(aflat[j] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
