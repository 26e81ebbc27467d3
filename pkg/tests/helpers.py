"""Shared test oracles, kept independent of the code paths they check."""

import math

import numpy as np

from adacell import autodiff as ad


def finite_difference_grad(fn, x, eps=1e-5):
    """Central finite differences of a scalar-valued fn at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(x)
        flat[i] = orig - eps
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def tape_grad(build_loss, x, trainable_shape=None):
    """Gradient of build_loss(tensor) -> scalar Tensor via the tape."""
    t = ad.Tensor(np.array(x, dtype=np.float64), trainable=True)
    with ad.Tape() as tape:
        loss = build_loss(t)
    ad.backward(tape, loss, trainables=[t])
    return t.grad


def check_grad(build_loss, x, rtol=1e-4, eps=1e-5):
    """Assert tape gradient matches central differences within rtol."""
    analytic = tape_grad(build_loss, x)

    def scalar_fn(arr):
        t = ad.Tensor(arr.copy())
        return float(build_loss(t).values)

    numeric = finite_difference_grad(scalar_fn, np.array(x, dtype=np.float64), eps=eps)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    err = np.abs(analytic - numeric).max() / scale
    assert err < rtol, f"gradient mismatch: max rel err {err:.3g}"
    return err


def brute_force_ari(a, b):
    """Pair-counting definition, no contingency table."""
    n = len(a)
    ss = sd = ds = dd = 0
    for i in range(n):
        for j in range(i + 1, n):
            sa, sb = a[i] == a[j], b[i] == b[j]
            ss += sa and sb
            sd += sa and not sb
            ds += sb and not sa
            dd += not sa and not sb
    total = ss + sd + ds + dd
    if total == 0:
        return 1.0
    expected = (ss + sd) * (ss + ds) / total
    maximum = 0.5 * (2 * ss + sd + ds)
    if maximum == expected:
        return 1.0 if sd == ds == 0 else 0.0
    return (ss - expected) / (maximum - expected)


def brute_force_nmi(a, b):
    """Direct plug-in MI over the joint label distribution."""
    n = len(a)
    pa = {x: a.count(x) / n for x in set(a)}
    pb = {y: b.count(y) / n for y in set(b)}
    ha = -sum(p * math.log(p) for p in pa.values())
    hb = -sum(p * math.log(p) for p in pb.values())
    if ha == 0.0 or hb == 0.0:
        blocks_a = {x: {i for i, v in enumerate(a) if v == x} for x in set(a)}
        blocks_b = {y: {i for i, v in enumerate(b) if v == y} for y in set(b)}
        same = set(map(frozenset, blocks_a.values())) == set(
            map(frozenset, blocks_b.values())
        )
        return 1.0 if same else 0.0
    mi = 0.0
    for x in pa:
        for y in pb:
            pxy = sum(1 for i in range(n) if a[i] == x and b[i] == y) / n
            if pxy > 0:
                mi += pxy * math.log(pxy / (pa[x] * pb[y]))
    return min(1.0, max(0.0, mi / math.sqrt(ha * hb)))


def canonical_vectors(length, n_classes=3):
    """Label vectors in first-occurrence form; one per relabeling orbit."""
    out = []

    def grow(prefix, used):
        if len(prefix) == length:
            out.append(tuple(prefix))
            return
        for c in range(min(used + 1, n_classes)):
            grow(prefix + [c], max(used, c + 1))

    grow([], 0)
    return out
