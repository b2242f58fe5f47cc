"""Central finite differences as an independent gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def finite_diff_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-2,
                         indices: Sequence[int] | None = None) -> np.ndarray:
    """Estimate df/dx by central differences.

    ``x`` is perturbed in place and restored afterwards.  Only the flat
    ``indices`` are probed when given (others are left at zero).  The step
    actually realized in ``x``'s dtype, ``x+ - x-``, is the denominator, so
    the rounding of ``x +/- eps`` does not bias the estimate.

    The default step is 1e-2: under float32 forward passes a 1e-3 step lets
    forward rounding noise dominate the difference quotient.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + x.data.dtype.type(eps)
        hi = flat[i]
        fp = _scalar(f(x))
        flat[i] = orig - x.data.dtype.type(eps)
        lo = flat[i]
        fm = _scalar(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (float(hi) - float(lo))
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)`` (0 when all vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


# ---------------------------------------------------------------------------
# the operation suite


ORACLE_EPS = 1e-6


def check_gradients(build: Callable[[], Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
                    n_points: int = 5, joint: bool = False, oracle_dtype=np.float64,
                    eps: float | None = None) -> float:
    """Relative error between float32 backward() and a float64 central-difference oracle.

    ``build`` recomputes the scalar objective from the current input values.
    The analytic gradient comes from the normal float32 engine; the
    difference quotients re-run ``build`` under ``precision(float64)`` with
    the inputs promoted exactly, so the oracle sees the same function at the
    same point without float32 rounding or large-step curvature error.

    By default ``n_points`` coordinates are probed in every input and the
    worst per-input error is returned.  Each input's error is measured
    against ``max(|a|, |n|, 1e-3 * family scale)`` so that inputs whose true
    gradient is zero (e.g. a bias feeding a normalization) are not judged on
    float32 noise alone.  With ``joint`` the coordinates are drawn uniformly
    from all inputs together and compared as one vector.

    ``oracle_dtype=np.float32`` keeps the differences in float32 too (step
    1e-2 unless ``eps`` is given); that is only reliable for single ops.
    """
    from .tensor import Tape, backward, no_tape, precision

    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        loss = build()
    backward(loss, tape)

    def value(_):
        with no_tape():
            return build()

    sizes = np.array([x.size for x in inputs])
    if joint:
        flat = rng.choice(sizes.sum(), size=min(n_points, sizes.sum()), replace=False)
        owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        picks = [np.sort(flat[owner == i] - offsets[i]) for i in range(len(inputs))]
    else:
        picks = [rng.choice(n, size=min(n_points, n), replace=False) for n in sizes]

    if eps is None:
        eps = ORACLE_EPS if np.dtype(oracle_dtype) == np.float64 else 1e-2
    saved = [x.data for x in inputs]
    analytic, numeric = [], []
    try:
        with precision(oracle_dtype):
            for x in inputs:
                x.data = x.data.astype(oracle_dtype)
            for x, idx in zip(inputs, picks):
                analytic.append((np.zeros(x.size) if x.grad is None else x.grad.reshape(-1))[idx])
                numeric.append(finite_diff_gradient(value, x, eps, idx).reshape(-1)[idx])
    finally:
        for x, d in zip(inputs, saved):
            x.data = d
    if joint:
        return relative_error(np.concatenate(analytic), np.concatenate(numeric))
    scale = max(max(np.linalg.norm(a), np.linalg.norm(n)) for a, n in zip(analytic, numeric))
    return max(relative_error(a, n, 1e-3 * scale) for a, n in zip(analytic, numeric))


WHOLE_NETWORK_POINTS = 20


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.standard_normal(shape)
    return (np.sign(x) * (margin + np.abs(x))).astype(np.float32)


def _suite_cases(rng: np.random.Generator):
    """Yield ``(family, build, inputs)`` covering every differentiable op.

    Whole-network cases append a fourth item: the number of coordinates to
    draw jointly across all of their inputs.
    """
    from . import tensor as T
    from .autoencoders import EncoderConfig, LossConfig, StructuralPatchModule, modality_recon_loss
    from .classifier import MLP, MlpConfig, cross_entropy, mlp_forward, total_loss
    from .fusion import (GateParams, QkvParams, channel_attention, project_qkv, region_self_attention,
                         spatial_attention, t1_guided_fuse)
    from .model import MASAN, FusionConfig
    from .patching import GridSpec

    def proj(out: Tensor) -> Tensor:
        # fixed random projection so every output element matters
        r = Tensor(np.random.default_rng(out.size).standard_normal(out.shape))
        return T.reduce("sum", T.mul(out, r))

    def t(*shape, pos=False, margin=None):
        if margin is not None:
            return Tensor(_away_from_zero(rng, shape, margin))
        x = rng.standard_normal(shape)
        return Tensor(np.abs(x) + 0.5 if pos else x)

    a, b = t(3, 4), t(3, 4)
    yield "add", lambda: proj(T.add(a, b)), [a, b]
    yield "sub", lambda: proj(T.sub(a, b)), [a, b]
    yield "mul", lambda: proj(T.mul(a, b)), [a, b]
    yield "scale", lambda: proj(T.scale(a, -1.7)), [a]
    k = t(3, 4, margin=0.2)
    yield "relu", lambda: proj(T.relu(k)), [k]
    yield "abs", lambda: proj(T.abs_(k)), [k]
    yield "sigmoid", lambda: proj(T.sigmoid(a)), [a]
    p = t(3, 4, pos=True)
    yield "log", lambda: proj(T.log(p, 1e-12)), [p]

    m1, m2 = t(2, 3, 4), t(2, 4, 5)
    yield "matmul", lambda: proj(T.matmul(m1, m2)), [m1, m2]
    r = t(2, 3, 4)
    yield "reduce_sum", lambda: proj(T.reduce("sum", r, axes=(1,))), [r]
    yield "reduce_mean", lambda: proj(T.reduce("mean", r, axes=(0, 2), keepdims=True)), [r]
    yield "reduce_max", lambda: proj(T.reduce("max", r, axes=2)), [r]
    yield "reshape_transpose", lambda: proj(T.transpose(T.reshape(r, (4, 3, 2)), (2, 0, 1))), [r]
    e = t(2, 1, 4)
    yield "expand", lambda: proj(T.expand(e, (2, 3, 4))), [e]
    c1, c2 = t(2, 3, 4), t(2, 2, 4)
    yield "concat", lambda: proj(T.concat([c1, c2], axis=1)), [c1, c2]
    yield "take", lambda: proj(T.take(r, (slice(None), 1))), [r]
    s = t(3, 5)
    yield "softmax", lambda: proj(T.softmax(s, axis=-1)), [s]

    x, w, bias = t(2, 3, 5, 5, 5), t(4, 3, 3, 3, 3), t(4)
    yield "conv3d", lambda: proj(T.conv3d(x, w, bias, 1, 1)), [x, w, bias]
    yield "conv3d_stride2", lambda: proj(T.conv3d(x, w, bias, 2, 1)), [x, w, bias]
    gx, gw, gb = t(2, 2, 2, 4, 4, 4), t(2, 3, 2, 3, 3, 3), t(2, 3)
    yield "conv3d_grouped", lambda: proj(T.conv3d(gx, gw, gb, 1, 1)), [gx, gw, gb]
    u = t(2, 2, 3, 2, 4)
    yield "upsample", lambda: proj(T.upsample_trilinear2x(u)), [u]
    n, gamma, beta = t(2, 4, 3, 3, 3), t(4), t(4)
    yield "group_norm", lambda: proj(T.group_norm(n, 2, gamma, beta)), [n, gamma, beta]
    gn, gg, gbt = t(2, 2, 4, 2, 2, 2), t(2, 4), t(2, 4)
    yield "group_norm_grouped", lambda: proj(T.group_norm(gn, 2, gg, gbt, grouped=True)), [gn, gg, gbt]

    C = 4
    regions = t(2, 8, C, 2, 2, 2)
    qkv = QkvParams("qkv", C, rng)

    def attention():
        q, k_, v = project_qkv(regions, qkv)
        return proj(region_self_attention(q, k_, v)[0])

    yield "attention", attention, [regions, qkv.wq, qkv.wk, qkv.wv]

    gates = GateParams("gates", C, rng, reduction=2)
    f = t(2, C, 4, 4, 4)
    yield ("channel_gate", lambda: proj(channel_attention(f, gates)),
           [f, gates.fc1.w, gates.fc1.b, gates.fc2.w, gates.fc2.b])
    yield "spatial_gate", lambda: proj(spatial_attention(f, gates)), [f, gates.spatial_w, gates.spatial_b]
    ff, fs = t(2, C, 2, 2, 2), t(2, C, 2, 2, 2)
    yield "t1_guided_fuse", lambda: proj(t1_guided_fuse(ff, fs)), [ff, fs]

    mlp = MLP("mlp", 16, MlpConfig((8,)), rng)
    fused = t(3, 2, 2, 2, 2)
    labels = [0, 1, 1]
    yield "mlp_cross_entropy", lambda: cross_entropy(mlp_forward(fused, mlp), labels), [fused] + mlp.parameters()

    gen, orig, h = t(2, 3, 1, 2, 2, 2), t(2, 3, 1, 2, 2, 2), t(2, 3, 4, margin=0.2)
    lc = LossConfig(lam=0.05)
    yield "recon_loss", lambda: modality_recon_loss(gen, orig, h, lc, 3), [gen, orig, h]
    ls, lf, lr_ = t(), t(), t()
    yield "total_loss", lambda: total_loss(ls, lf, lr_, LossConfig(alpha=0.3, beta=0.7)).L_total, [ls, lf, lr_]

    enc = EncoderConfig.for_patch(4, 2, channel_schedule=(2, 4), bottleneck_channels=4)
    ae = StructuralPatchModule(enc, 2, rng)
    patches = t(2, 2, 1, 4, 4, 4)

    def autoencode():
        e = ae.encode(patches)
        return T.add(proj(ae.decode(e)), proj(e.h))

    yield "autoencoder", autoencode, [patches] + ae.parameters(), WHOLE_NETWORK_POINTS

    t1 = rng.standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
    fm = rng.standard_normal((2, 2, 1, 8, 8, 8)).astype(np.float32)
    variants = (("full_model", FusionConfig()),
                ("full_model_fuse_first", FusionConfig(pipeline_order="fuse_then_attend")),
                ("full_model_addition", FusionConfig(mode="addition")))
    for name, fusion in variants:
        model = MASAN((8, 8, 8), 2, GridSpec((2, 2, 2)), enc, MlpConfig((8,)), fusion,
                      seed=int(rng.integers(1 << 31)))

        def full(model=model):
            out = model.forward(t1, fm)
            return model.losses(out, [0, 1], LossConfig()).L_total

        yield name, full, model.parameters(), WHOLE_NETWORK_POINTS


def suite_cases(seed: int = 0):
    """The suite's cases with the generator that must be used to check them."""
    rng = np.random.default_rng(seed)
    return rng, list(_suite_cases(rng))


def run_suite(seed: int = 0, n_points: int = 5) -> dict[str, float]:
    """Max relative error per operation family, in suite order."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, build, inputs, *joint in _suite_cases(rng):
        if joint:
            out[name] = check_gradients(build, inputs, rng, max(joint[0], n_points), joint=True)
        else:
            out[name] = check_gradients(build, inputs, rng, n_points)
    return out
