"""Minimal reverse-mode automatic differentiation on float64 arrays.

A tape of `Tensor` nodes, each holding a numpy value and a closure that
scatters its output gradient to its parents.  Covers exactly the ops needed
by the appearance networks and the geometry losses: broadcasting arithmetic,
reductions, matmul, indexing, and a differentiable bilinear image lookup.
"""

from __future__ import annotations

import numpy as np


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def backward(self, grad=None):
        """Accumulate gradients of `self` into every reachable node."""
        if grad is None:
            grad = np.ones_like(self.value)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.value.shape:
                raise ValueError("seed gradient shape mismatch")
        order, stack, state = [], [(self, False)], set()
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in state:
                continue
            state.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in state:
                    stack.append((p, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.value.shape)
        self.grad = grad if self.grad is None else self.grad + grad

    # Arithmetic with numpy broadcasting.
    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value + other.value, _parents=(self, other))
        out._backward = lambda g: (self._accumulate(g), other._accumulate(g))
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, _parents=(self,))
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value * other.value, _parents=(self, other))
        out._backward = lambda g: (self._accumulate(g * other.value),
                                   other._accumulate(g * self.value))
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value / other.value, _parents=(self, other))

        def back(g):
            self._accumulate(g / other.value)
            other._accumulate(-g * self.value / other.value ** 2)
        out._backward = back
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents supported")
        out = Tensor(self.value ** exponent, _parents=(self,))
        out._backward = lambda g: self._accumulate(
            g * exponent * self.value ** (exponent - 1))
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul requires >= 2D operands")
        out = Tensor(self.value @ other.value, _parents=(self, other))

        def back(g):
            self._accumulate(g @ np.swapaxes(other.value, -1, -2))
            other._accumulate(np.swapaxes(self.value, -1, -2) @ g)
        out._backward = back
        return out

    def __getitem__(self, index):
        out = Tensor(self.value[index], _parents=(self,))
        # Pure slice/int indexing addresses unique cells, so the scatter can
        # use fast in-place accumulation instead of np.add.at.
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(p, (slice, int, np.integer)) for p in parts)

        def back(g):
            if not self.requires_grad:
                return
            full = np.zeros_like(self.value)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            self._accumulate(full)
        out._backward = back
        return out

    # Shape ops.
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.value.reshape(shape), _parents=(self,))
        out._backward = lambda g: self._accumulate(g.reshape(self.value.shape))
        return out

    def transpose(self, axes):
        inverse = np.argsort(axes)
        out = Tensor(self.value.transpose(axes), _parents=(self,))
        out._backward = lambda g: self._accumulate(g.transpose(inverse))
        return out

    # Reductions.
    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.value.sum(axis=axis, keepdims=keepdims),
                     _parents=(self,))

        def back(g):
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, self.value.shape))
        out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        count = (self.value.size if axis is None else
                 np.prod([self.value.shape[a] for a in
                          (axis if isinstance(axis, tuple) else (axis,))]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # Pointwise nonlinearities.
    def exp(self):
        val = np.exp(self.value)
        out = Tensor(val, _parents=(self,))
        out._backward = lambda g: self._accumulate(g * val)
        return out

    def log(self):
        out = Tensor(np.log(self.value), _parents=(self,))
        out._backward = lambda g: self._accumulate(g / self.value)
        return out

    def sqrt(self):
        val = np.sqrt(self.value)
        out = Tensor(val, _parents=(self,))
        out._backward = lambda g: self._accumulate(g * 0.5 / val)
        return out

    def abs(self):
        out = Tensor(np.abs(self.value), _parents=(self,))
        out._backward = lambda g: self._accumulate(g * np.sign(self.value))
        return out

    def sigmoid(self):
        val = _sigmoid_np(self.value)
        out = Tensor(val, _parents=(self,))
        out._backward = lambda g: self._accumulate(g * val * (1.0 - val))
        return out

    def softplus(self):
        out = Tensor(np.logaddexp(0.0, self.value), _parents=(self,))
        sig = _sigmoid_np(self.value)
        out._backward = lambda g: self._accumulate(g * sig)
        return out

    def silu(self):
        sig = _sigmoid_np(self.value)
        out = Tensor(self.value * sig, _parents=(self,))
        out._backward = lambda g: self._accumulate(
            g * sig * (1.0 + self.value * (1.0 - sig)))
        return out

    def relu(self):
        out = Tensor(np.maximum(self.value, 0.0), _parents=(self,))
        out._backward = lambda g: self._accumulate(g * (self.value > 0))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value >= b.value
    out = Tensor(np.where(take_a, a.value, b.value), _parents=(a, b))
    out._backward = lambda g: (a._accumulate(g * take_a),
                               b._accumulate(g * ~take_a))
    return out


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value <= b.value
    out = Tensor(np.where(take_a, a.value, b.value), _parents=(a, b))
    out._backward = lambda g: (a._accumulate(g * take_a),
                               b._accumulate(g * ~take_a))
    return out


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.where(cond, a.value, b.value), _parents=(a, b))
    out._backward = lambda g: (a._accumulate(g * cond),
                               b._accumulate(g * ~cond))
    return out


def concatenate(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)
    out._backward = back
    return out


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.value for t in tensors], axis=axis),
                 _parents=tuple(tensors))

    def back(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))
    out._backward = back
    return out


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two leading (row, column) axes of an (H, W, ...) tensor."""
    widths = ((pad, pad), (pad, pad)) + ((0, 0),) * (x.ndim - 2)
    out = Tensor(np.pad(x.value, widths), _parents=(x,))
    sel = (slice(pad, pad + x.shape[0]), slice(pad, pad + x.shape[1]))
    out._backward = lambda g: x._accumulate(g[sel])
    return out


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """k×k average pooling on an (H, W, C) tensor; H, W divisible by k."""
    h, w = x.shape[0], x.shape[1]
    if h % k or w % k:
        raise ValueError(f"pool factor {k} does not divide {h}x{w}")
    rest = x.shape[2:]
    pooled = x.reshape((h // k, k, w // k, k) + rest).mean(axis=(1, 3))
    return pooled


def _linear_interp_weights(n_out: int, n_in: int):
    # Half-pixel-center convention: output i samples input at
    # (i + 0.5) * n_in / n_out - 0.5, clamped to the valid range.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 2) if n_in > 1 else np.zeros_like(i0)
    t = src - i0
    return i0, i0 + (1 if n_in > 1 else 0), t


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear resize of an (H, W, C) tensor by an integer factor."""
    h, w = x.shape[0], x.shape[1]
    r0, r1, tr = _linear_interp_weights(h * factor, h)
    c0, c1, tc = _linear_interp_weights(w * factor, w)
    tr = tr.reshape(-1, *([1] * (x.ndim - 1)))
    rows = x[r0] * (1.0 - tr) + x[r1] * tr
    tc = tc.reshape(1, -1, *([1] * (x.ndim - 2)))
    return rows[:, c0] * (1.0 - tc) + rows[:, c1] * tc


def pad2d_edge(x: Tensor, pad: int) -> Tensor:
    """Replicate-pad the two leading axes (keeps conv output constant on
    constant input, unlike zero padding)."""
    rows = np.clip(np.arange(-pad, x.shape[0] + pad), 0, x.shape[0] - 1)
    cols = np.clip(np.arange(-pad, x.shape[1] + pad), 0, x.shape[1] - 1)
    return x[rows][:, cols]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None,
           padding: str = "edge") -> Tensor:
    """3×3 same-size convolution of (H, W, Cin) with (Cout, Cin, 3, 3)."""
    cout, cin, kh, kw = weight.shape
    if (kh, kw) != (3, 3) or x.shape[2] != cin:
        raise ValueError("conv2d expects 3x3 kernels matching input channels")
    h, w = x.shape[0], x.shape[1]
    padded = pad2d_edge(x, 1) if padding == "edge" else pad2d(x, 1)
    out = None
    for dy in range(3):
        for dx in range(3):
            patch = padded[dy:dy + h, dx:dx + w].reshape(h * w, cin)
            tap = weight[:, :, dy, dx].transpose((1, 0))
            term = patch @ tap
            out = term if out is None else out + term
    out = out.reshape(h, w, cout)
    if bias is not None:
        out = out + bias
    return out


def bilinear_sample(image: np.ndarray, coords: Tensor) -> Tensor:
    """Sample a fixed (H, W) or (H, W, C) image at float pixel coordinates.

    `coords[..., 0]` is x (column center offset by 0.5), `coords[..., 1]` is
    y; gradients flow to the coordinates only.  Samples are clamped to the
    image border (zero coordinate gradient in the clamped direction).
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    xy = coords.value
    x = np.clip(xy[..., 0], 0.0, w - 1.0)
    y = np.clip(xy[..., 1], 0.0, h - 1.0)
    inside_x = (xy[..., 0] > 0.0) & (xy[..., 0] < w - 1.0)
    inside_y = (xy[..., 1] > 0.0) & (xy[..., 1] < h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else np.zeros_like(x, np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros_like(y, np.int64)
    x1, y1 = x0 + (w > 1), y0 + (h > 1)
    tx, ty = x - x0, y - y0
    if image.ndim == 3:
        tx, ty = tx[..., None], ty[..., None]
        inside_x, inside_y = inside_x[..., None], inside_y[..., None]
    v00, v01 = image[y0, x0], image[y0, x1]
    v10, v11 = image[y1, x0], image[y1, x1]
    top = v00 * (1 - tx) + v01 * tx
    bot = v10 * (1 - tx) + v11 * tx
    out = Tensor(top * (1 - ty) + bot * ty, _parents=(coords,))

    def back(g):
        gx = g * (((v01 - v00) * (1 - ty) + (v11 - v10) * ty) * inside_x)
        gy = g * ((bot - top) * inside_y)
        if image.ndim == 3:
            gx, gy = gx.sum(axis=-1), gy.sum(axis=-1)
        coords._accumulate(np.stack([gx, gy], axis=-1))
    out._backward = back
    return out


def numeric_gradient(func, tensors, h=1e-5):
    """Central-difference gradients of scalar `func()` w.r.t. tensor values."""
    grads = []
    for t in tensors:
        grad = np.zeros_like(t.value)
        flat_v, flat_g = t.value.reshape(-1), grad.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + h
            hi = float(func().value)
            flat_v[i] = orig - h
            lo = float(func().value)
            flat_v[i] = orig
            flat_g[i] = (hi - lo) / (2 * h)
        grads.append(grad)
    return grads


def check_gradients(func, tensors, h=1e-5, rtol=1e-4, atol=1e-7):
    """Assert analytic gradients of scalar `func()` match finite differences."""
    for t in tensors:
        t.zero_grad()
    out = func()
    out.backward()
    numeric = numeric_gradient(func, tensors, h=h)
    for t, num in zip(tensors, numeric):
        ana = np.zeros_like(t.value) if t.grad is None else t.grad
        err = np.abs(ana - num)
        tol = atol + rtol * np.maximum(np.abs(ana), np.abs(num))
        if not np.all(err <= tol):
            worst = np.unravel_index(np.argmax(err - tol), err.shape)
            raise AssertionError(
                f"gradient mismatch at {worst}: analytic {ana[worst]!r} "
                f"vs numeric {num[worst]!r}")
    return out
