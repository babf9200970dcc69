"""Shared test oracles: finite-difference gradient checks."""

import numpy as np

from quantlab import engine as E


def gradcheck(make_scalar, x0, rtol=1e-5, step=1e-6):
    """Compare backward() against central finite differences.

    ``make_scalar`` maps a leaf GraphValue to a scalar root and must be a pure
    function of the leaf (any randomness fixed outside).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x = E.leaf(x0.copy())
    root = make_scalar(x)
    g = E.backward(root, [x])[x].data

    def f(arr):
        return float(make_scalar(E.leaf(arr.copy())).data)

    fd = E.finite_diff(f, x0, step=step)
    denom = max(float(np.max(np.abs(fd))), 1e-8)
    err = float(np.max(np.abs(g - fd))) / denom
    assert err < rtol, f"grad mismatch: rel err {err:.3e} >= {rtol}"
    return err


def primitive_cases(seed):
    """One (name, make_scalar, x0) triple per registered op family.

    Inputs stay within |x| <= 2; ops with restricted domains get shifted
    positive inputs.
    """
    rng = np.random.default_rng(seed)

    def u(*shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, size=shape)

    proj = {}

    def weighted(name, v):
        # fixed random projection to a scalar, one per case
        if name not in proj:
            proj[name] = rng.uniform(-1.0, 1.0, size=v.shape)
        return E.reduce_sum(E.mul(v, E.constant(proj[name])))

    a34 = u(3, 4)
    a4 = u(4)
    b34 = u(3, 4)
    m23 = u(2, 3)
    m35 = u(3, 5)
    batch = u(2, 3, 4)
    w45 = u(4, 5)
    ids = rng.integers(0, 6, size=(2, 3))
    targets = rng.integers(0, 5, size=(2, 3))
    gain = u(4)

    cases = [
        ("add", lambda x: weighted("add", E.add(x, E.constant(b34))), a34),
        ("add-broadcast", lambda x: weighted("addb", E.add(x, E.constant(a4))), a34),
        ("sub", lambda x: weighted("sub", E.sub(E.constant(b34), x)), a34),
        ("mul", lambda x: weighted("mul", E.mul(x, E.constant(b34))), a34),
        ("mul-broadcast", lambda x: weighted("mulb", E.mul(E.constant(a34), x)), a4),
        ("scale", lambda x: weighted("scale", E.scale(x, -1.7)), a34),
        ("exp", lambda x: weighted("exp", E.exp(x)), a34),
        ("log", lambda x: weighted("log", E.log(x)), u(3, 4, lo=0.5, hi=2.0)),
        ("power3", lambda x: weighted("pow3", E.power(x, 3.0)), a34),
        ("power-neg-half", lambda x: weighted("pnh", E.power(x, -0.5)), u(3, 4, lo=0.5, hi=2.0)),
        ("matmul-left", lambda x: weighted("mml", E.matmul(x, E.constant(m35))), m23),
        ("matmul-right", lambda x: weighted("mmr", E.matmul(E.constant(m23), x)), m35),
        ("matmul-batched", lambda x: weighted("mmb", E.matmul(x, E.constant(w45))), batch),
        ("transpose", lambda x: weighted("tr", E.transpose(x, (2, 0, 1))), batch),
        ("reshape", lambda x: weighted("rs", E.reshape(x, (4, 3))), a34),
        ("concat", lambda x: weighted("cc", E.concat([x, E.constant(b34)], axis=1)), a34),
        ("slice", lambda x: weighted("sl", E.slice_axis(x, 1, 1, 3)), a34),
        ("sum-all", lambda x: E.reduce_sum(x), a34),
        ("sum-axis", lambda x: weighted("sa", E.reduce_sum(x, axis=0)), a34),
        ("sum-keepdims", lambda x: weighted("sk", E.reduce_sum(x, axis=(1,), keepdims=True)), a34),
        ("mean", lambda x: weighted("mn", E.reduce_mean(x, axis=-1)), a34),
        ("broadcast-to", lambda x: weighted("bt", E.broadcast_to(x, (3, 4))), a4),
        ("embedding", lambda x: weighted("emb", E.embedding(x, ids)), u(6, 4)),
        ("softmax", lambda x: weighted("sm", E.softmax(x)), a34),
        ("log-softmax", lambda x: weighted("lsm", E.log_softmax(x)), a34),
        ("cross-entropy", lambda x: E.cross_entropy(x, targets), u(2, 3, 5)),
        ("sigmoid", lambda x: weighted("sg", E.sigmoid(x)), a34),
        ("silu", lambda x: weighted("si", E.silu(x)), a34),
        ("rms-norm", lambda x: weighted("rn", E.rms_norm(x, E.constant(gain))), a34),
        ("rms-norm-gain", lambda x: weighted("rng", E.rms_norm(E.constant(a34), x)), gain),
        ("layer-norm", lambda x: weighted("ln", E.layer_norm(x, E.constant(gain))), a34),
        ("frobenius-sq", lambda x: E.frobenius_norm_sq(x), a34),
        ("cosine", lambda x: E.cosine_similarity(x, E.constant(b34)), a34),
    ]
    return cases
