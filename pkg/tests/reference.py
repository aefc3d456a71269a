"""Independent float64 reference implementations used as test oracles.

Nothing here imports the autodiff module; the conv, pool and dense loops are
written directly from their definitions.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_loops(x, k, b, stride=1, padding=0):
    n, c, h, w = x.shape
    kk, _, r, s = k.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - r) // stride + 1
    wo = (w + 2 * padding - s) // stride + 1
    out = np.zeros((n, kk, ho, wo))
    for i in range(n):
        for o in range(kk):
            for y in range(ho):
                for z in range(wo):
                    acc = float(b[o])
                    for ch in range(c):
                        for dy in range(r):
                            for dz in range(s):
                                acc += xp[i, ch, y * stride + dy, z * stride + dz] * k[o, ch, dy, dz]
                    out[i, o, y, z] = acc
    return out


def maxpool_loops(x, window, stride):
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for y in range(ho):
                for z in range(wo):
                    out[i, ch, y, z] = max(
                        x[i, ch, y * stride + dy, z * stride + dz] for dy in range(window) for dz in range(window))
    return out


def matmul_loops(x, w, b):
    n, d = x.shape
    e = w.shape[1]
    out = np.zeros((n, e))
    for i in range(n):
        for j in range(e):
            acc = float(b[j])
            for t in range(d):
                acc += float(x[i, t]) * float(w[t, j])
            out[i, j] = acc
    return out


def mann_whitney(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties counted half."""
    from fractions import Fraction

    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0
    for p in pos:
        for q in neg:
            wins += 2 if p > q else (1 if p == q else 0)
    return Fraction(wins, 2 * len(pos) * len(neg))


# ---- float64 Siamese forward with a kink signature, for finite differences


def _conv_einsum(x, k, b, stride, padding):
    r, s = k.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (r, s), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwrs,kcrs->nkhw", win, k, optimize=True) + b[None, :, None, None]


def _pool(x, window, stride, arg=None):
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], -1)
    if arg is None:
        arg = flat.argmax(axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def branch_forward(params, spec, x, frozen=None):
    """float64 branch forward.

    params maps layer name -> (weight, bias).  Returns the features and the
    activation pattern (ReLU masks and pool argmaxes).  With ``frozen`` the
    given pattern is imposed instead of recomputed, which evaluates the smooth
    piece of the network that contains the pattern's base point.
    """
    pattern = []
    conv_i = dense_i = 0
    for layer in spec:
        if layer.kind == "conv":
            conv_i += 1
            w, b = params[f"conv{conv_i}"]
            x = _conv_einsum(x, w, b, layer.stride, layer.padding)
        elif layer.kind == "maxpool":
            x, arg = _pool(x, layer.window, layer.stride, None if frozen is None else frozen[len(pattern)])
            pattern.append(arg)
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        else:
            dense_i += 1
            w, b = params[f"dense{dense_i}"]
            x = x @ w + b
        if layer.activation == "relu":
            mask = x > 0 if frozen is None else frozen[len(pattern)]
            pattern.append(mask)
            x = np.where(mask, x, 0.0)
    return x, pattern


def _branch_params(state, prefix):
    out = {}
    for name, arr in state.items():
        parts = name.split(".")
        if parts[0] == prefix:
            out.setdefault(parts[1], [None, None])[0 if parts[2] == "weight" else 1] = np.asarray(arr, np.float64)
    return out


class SiameseOracle:
    """float64 Siamese BCE loss with the activation pattern frozen at a base point."""

    def __init__(self, state, spec, mode, xa, xb, y, eps=1e-7):
        self.spec, self.mode, self.eps = spec, mode, eps
        self.xa, self.xb, self.y = (np.asarray(v, dtype=np.float64) for v in (xa, xb, y))
        self.state = {k: np.asarray(v, dtype=np.float64) for k, v in state.items()}
        pa = _branch_params(self.state, "branch_a")
        pb = pa if mode == "tied" else _branch_params(self.state, "branch_b")
        self.fa, self.pat_a = branch_forward(pa, spec, self.xa)
        self.fb, self.pat_b = branch_forward(pb, spec, self.xb)
        self.sign = np.sign(self.fa - self.fb)

    def _head(self, fa, fb, state):
        merged = (fa - fb) * self.sign
        logits = merged @ state["head.weight"] + state["head.bias"]
        p = 1.0 / (1.0 + np.exp(-logits))
        pc = np.clip(p, self.eps, 1 - self.eps)
        return float(-(self.y * np.log(pc) + (1 - self.y) * np.log(1 - pc)).mean())

    def loss(self, name=None, pos=None, delta=0.0):
        state = self.state
        if name is not None:
            state = dict(state)
            arr = state[name].copy()
            arr[pos] += delta
            state[name] = arr
        fa, fb = self.fa, self.fb
        prefix = name.split(".")[0] if name else None
        if prefix == "branch_a" or (prefix == "branch_b"):
            if self.mode == "tied" or prefix == "branch_a":
                fa, _ = branch_forward(_branch_params(state, "branch_a"), self.spec, self.xa, self.pat_a)
            if self.mode == "tied":
                fb, _ = branch_forward(_branch_params(state, "branch_a"), self.spec, self.xb, self.pat_b)
            elif prefix == "branch_b":
                fb, _ = branch_forward(_branch_params(state, "branch_b"), self.spec, self.xb, self.pat_b)
        return self._head(fa, fb, state)


def finite_difference_check(model, xa, xb, y, h=1e-3, per_tensor=12, seed=0):
    """Compare model gradients with central differences of the float64 oracle.

    For each parameter tensor, checks its ``per_tensor // 2`` largest-gradient
    entries plus as many random ones.  Returns (worst relative error,
    per-tensor worst, number of coordinates checked).
    """
    from radon_net import autodiff as ad

    model.zero_grad()
    loss = ad.bce_loss(model.score(ad.Tensor(xa), ad.Tensor(xb)), ad.Tensor(y))
    ad.backward(loss)
    named = model.named_parameters()
    oracle = SiameseOracle({n: p.data for n, p in named.items()}, model.spec, model.mode, xa, xb, y)
    rng = np.random.default_rng(seed)
    worst = {}
    checked = 0
    for name, p in named.items():
        g = p.grad.astype(np.float64)
        flat = np.abs(g).ravel()
        top = np.argsort(-flat, kind="stable")[: per_tensor // 2]
        rest = np.setdiff1d(np.arange(flat.size), top)
        rand = rng.choice(rest, size=min(rest.size, per_tensor - top.size), replace=False)
        for idx in np.concatenate([top, rand]):
            pos = np.unravel_index(int(idx), g.shape)
            cd = (oracle.loss(name, pos, h) - oracle.loss(name, pos, -h)) / (2 * h)
            rel = abs(g[pos] - cd) / (abs(g[pos]) + abs(cd) + 1e-8)
            worst[name] = max(worst.get(name, 0.0), rel)
            checked += 1
    return max(worst.values()), worst, checked
