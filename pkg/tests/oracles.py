"""Reference implementations the fast paths are checked against.

The references are deliberately naive and share no code with the package.
The gradient harnesses at the bottom drive the package's own backward().
"""

from dataclasses import replace

import numpy as np

from fundusnet import model as M
from fundusnet import tensor as T
from fundusnet.tensor import Tensor


def naive_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Seven nested loops over (n, co, ho, wo, ci, i, j), float64 accumulation."""
    n, c, h, wd = x.shape
    co, cg, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    cout_g = co // groups
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for a in range(n):
        for o in range(co):
            grp = o // cout_g
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cg):
                        cin = grp * cg + ci
                        for i in range(kh):
                            for j in range(kw):
                                yy = y * stride + i - padding
                                xx = z * stride + j - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += float(x[a, cin, yy, xx]) * float(w[o, ci, i, j])
                    out[a, o, y, z] = acc
    return out


def central_difference(f, arrays, eps=1e-4):
    """Numerical gradient of scalar f() w.r.t. each array (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = f()
            arr[idx] = orig - eps
            fm = f()
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8):
    """Largest |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def pairwise_auroc(labels, scores):
    """O(P*N) Mann-Whitney count; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0
    ties = 0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def mbconv_param_count(stages, width, depth, stem, head, outputs, se_ratio=0.25):
    """Closed-form trainable parameter count of the MBConv classifier."""
    import math

    def ch(c):
        c = c * width
        return max(8, int(c + 4) // 8 * 8)

    total = 3 * stem * 9 + 2 * stem
    cin = stem
    for e, k, c, r, s in stages:
        cout = ch(c)
        for _ in range(int(math.ceil(r * depth))):
            mid = cin * e
            if e != 1:
                total += cin * mid + 2 * mid
            total += mid * k * k + 2 * mid
            sq = max(1, int(cin * se_ratio))
            total += mid * sq + sq + sq * mid + mid
            total += mid * cout + 2 * cout
            cin = cout
    total += cin * head + 2 * head
    total += head * outputs + outputs
    return total


def leaf64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def gradcheck(op, arrays, seed=0):
    """Compare backward() with central differences for sum(op(*leaves) * r)."""
    leaves = [leaf64(a) for a in arrays]
    out = op(*leaves)
    r = np.random.default_rng(seed).normal(size=out.shape)
    loss = T.sum(T.mul(out, Tensor(r)))
    T.backward(loss)
    analytic = [leaf.grad for leaf in leaves]

    def f():
        with T.no_grad():
            return float((op(*leaves).data * r).sum())

    numeric = central_difference(f, [leaf.data for leaf in leaves])
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))


def model_gradcheck(training, instance, resolution=32, batch=8, n_params=25, n_inputs=5, eps=1e-5):
    """Desk model in float64: sampled parameter and input coordinates vs central differences.

    BN biases that feed a training-mode BN have an exact zero gradient; the
    difference quotient there is pure roundoff (~1e-10), hence the 1e-6 floor.
    """
    rng = np.random.default_rng(100 + instance)
    model = M.build(replace(M.desk(), resolution=resolution), seed=instance).astype(np.float64)
    if not training:
        for m in model.modules():
            if isinstance(m, M.BatchNorm2d):
                m.running_mean[...] = rng.normal(0, 0.1, m.running_mean.shape)
                m.running_var[...] = rng.uniform(0.5, 1.5, m.running_var.shape)
    model.train(training)
    x = Tensor(rng.random((batch, 3, resolution, resolution)), requires_grad=True)
    r = rng.normal(size=(batch, 1))

    def f():
        with T.no_grad():
            return float((model(x).data * r).sum())

    model.zero_grad()
    T.backward(T.sum(T.mul(model(x), Tensor(r))))
    params = dict(model.named_parameters())
    picks = [(params[n], rng.integers(params[n].size)) for n in rng.choice(sorted(params), n_params)]
    picks += [(x, rng.integers(x.size)) for _ in range(n_inputs)]
    analytic, numeric = [], []
    for leaf, flat in picks:
        idx = np.unravel_index(flat, leaf.shape)
        orig = leaf.data[idx]
        leaf.data[idx] = orig + eps
        fp = f()
        leaf.data[idx] = orig - eps
        fm = f()
        leaf.data[idx] = orig
        analytic.append(leaf.grad[idx])
        numeric.append((fp - fm) / (2 * eps))
    return max_rel_error(analytic, numeric, floor=1e-6)
