"""Numerical equivariance probes for layers and whole models.

Each stage declares how it should respond to a transform ``R`` acting on
row-vector inputs (``X -> X @ R``):

``equivariant``   ``f(X R) = f(X) R``
``pseudo``        ``f(X R) = det(R) f(X) R`` (cross-product outputs)
``invariant``     ``f(X R) = f(X)``
``sensitive``     the stage should break its baseline behaviour; the probe
                  passes when the baseline error is *large*

A stage may respond differently to proper and improper transforms, so the
declared behaviour is looked up per transform.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .errors import ContractViolation
from .geometry import nn_embedding, random_o3
from .model import VARIANTS, ModelConfig, build_model, forward_segmentation, loss_ce
from .symmetry import planar_symmetry_direction

EQUIVARIANT = "equivariant"
PSEUDO = "pseudo"
INVARIANT = "invariant"
SENSITIVE = "sensitive"

EXACT_TOL = 1e-8
SENSITIVE_FLOOR = 1e-3
PROBE_POINTS = 64
PROBE_CHANNELS = 8


@dataclass(frozen=True)
class Stage:
    name: str
    proper: str  # behaviour under rotations
    improper: str  # behaviour under reflections
    make: object  # rng -> (function, input array)
    baseline: str = EQUIVARIANT  # what a sensitive stage is measured against


@dataclass(frozen=True)
class ProbeResult:
    stage: str
    behavior: str
    max_error: float
    tolerance: float
    trials: int

    @property
    def passed(self):
        if self.behavior == SENSITIVE:
            return self.max_error > self.tolerance
        return self.max_error < self.tolerance

    @property
    def verdict(self):
        if self.behavior == SENSITIVE:
            return "sensitive (expected)" if self.passed else "FAIL: not sensitive"
        return "pass" if self.passed else "FAIL"


def _features(rng, *lead):
    return rng.normal(size=lead + (PROBE_CHANNELS, 3))


def _weights(rng, rows, cols):
    return rng.normal(size=(rows, cols)) / np.sqrt(cols)


def _make_nn_embedding(rng):
    return (lambda X: nn_embedding(X, 10)), rng.normal(size=(PROBE_POINTS, 3))


def _make_vn_linear(rng):
    W = _weights(rng, 6, PROBE_CHANNELS)
    return (lambda X: layers.vn_linear(X, W).data), _features(rng, PROBE_POINTS)


def _make_vn_relu(rng):
    W, U = _weights(rng, 6, PROBE_CHANNELS), _weights(rng, 6, PROBE_CHANNELS)
    return (lambda X: layers.vn_relu(X, W, U).data), _features(rng, PROBE_POINTS)


def _make_vn_mean_pool(rng):
    return (lambda X: layers.vn_mean_pool(X).data), _features(rng, PROBE_POINTS, 10)


def _make_vn_invariant(rng):
    T = _weights(rng, 3, 2 * PROBE_CHANNELS)
    return (lambda X: layers.vn_invariant(X, T).data), _features(rng, PROBE_POINTS)


def _make_complex_linear(rng):
    # V and J are both ordinary vectors, linear in the input, as inside a block
    Wv, Wj = (_weights(rng, 6, PROBE_CHANNELS) for _ in range(2))
    A, B, C = (rng.normal(size=(5, 6)) for _ in range(3))

    def f(X):
        return layers.complex_linear(layers.vn_linear(X, Wv), layers.vn_linear(X, Wj), A, B, C).data

    return f, _features(rng, PROBE_POINTS)


def _make_cross_attention(rng):
    Wq, Wk, Wv = (_weights(rng, 4, PROBE_CHANNELS) for _ in range(3))

    def f(X):
        return layers.cross_attention(*(layers.vn_linear(X, W) for W in (Wq, Wk, Wv)))[0].data

    return f, _features(rng, PROBE_POINTS)


def _make_symmetry_direction(rng):
    return (lambda X: planar_symmetry_direction(X).direction), rng.normal(size=(PROBE_POINTS, 3))


def _model_maker(variant):
    def make(rng):
        seed = int(rng.integers(2**31))
        model = build_model(ModelConfig(variant=variant, seed=seed))
        pts = rng.normal(size=(PROBE_POINTS, 3))
        pts /= np.linalg.norm(pts, axis=1).max()
        return (lambda X: forward_segmentation(model, X).data), pts

    return make


STAGES = {
    s.name: s
    for s in [
        Stage("nn_embedding", EQUIVARIANT, EQUIVARIANT, _make_nn_embedding),
        Stage("vn_linear", EQUIVARIANT, EQUIVARIANT, _make_vn_linear),
        Stage("vn_relu", EQUIVARIANT, EQUIVARIANT, _make_vn_relu),
        Stage("vn_mean_pool", EQUIVARIANT, EQUIVARIANT, _make_vn_mean_pool),
        Stage("vn_invariant", INVARIANT, INVARIANT, _make_vn_invariant),
        Stage("complex_linear", EQUIVARIANT, SENSITIVE, _make_complex_linear),
        Stage("cross_attention", PSEUDO, PSEUDO, _make_cross_attention),
        Stage("symmetry_direction", PSEUDO, PSEUDO, _make_symmetry_direction),
    ]
    + [
        Stage(f"model:{v}", INVARIANT, INVARIANT if v == "VNN" else SENSITIVE, _model_maker(v), INVARIANT)
        for v in VARIANTS
    ]
}


def _error(f, X, fX, R, behavior, baseline):
    if behavior == SENSITIVE:
        behavior = baseline
    out = np.asarray(f(X @ R.matrix))
    if behavior == INVARIANT:
        target = fX
    elif behavior == PSEUDO:
        target = R.det * (fX @ R.matrix)
    else:
        target = fX @ R.matrix
    scale = np.linalg.norm(fX)
    return float(np.linalg.norm(out - target) / scale) if scale > 0 else float(np.linalg.norm(out))


def equivariance_probe(stage, trials=100, improper=False, seed=0):
    """Max relative error of ``stage`` over ``trials`` random transforms.

    With ``improper`` every other transform is a reflection, and the results
    for the two kinds are reported separately when the stage's declared
    behaviour differs between them. Returns a list of :class:`ProbeResult`.
    """
    if stage not in STAGES:
        raise ContractViolation(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    if trials < 1:
        raise ContractViolation("trials must be >= 1")
    spec = STAGES[stage]
    rng = np.random.default_rng([seed, zlib.crc32(stage.encode())])
    f, X = spec.make(rng)
    fX = np.asarray(f(X))
    worst = {}
    for t in range(trials):
        flip = improper and t % 2 == 1
        behavior = spec.improper if flip else spec.proper
        R = random_o3(rng, improper=flip)
        err = _error(f, X, fX, R, behavior, spec.baseline)
        key = (behavior, flip)
        worst[key] = max(worst.get(key, 0.0), err)
    results = []
    for (behavior, flip), err in worst.items():
        label = stage if not improper else f"{stage} ({'improper' if flip else 'proper'})"
        tol = SENSITIVE_FLOOR if behavior == SENSITIVE else EXACT_TOL
        results.append(ProbeResult(label, behavior, err, tol, trials))
    return results


def probe_all(trials=100, improper=False, seed=0, stages=None):
    out = []
    for name in stages or STAGES:
        out.extend(equivariance_probe(name, trials, improper, seed))
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checks for trainable layers
# ---------------------------------------------------------------------------

GRAD_TOL = 1e-4
GRAD_STEP = 1e-5
KINK_MARGIN = 1e-3


@dataclass(frozen=True)
class GradientResult:
    layer: str
    argument: str
    max_error: float
    tolerance: float = GRAD_TOL

    @property
    def passed(self):
        return self.max_error <= self.tolerance


def _relu_args(rng):
    # resample until every q.k is far from the kink relative to the FD step
    while True:
        X, W, U = rng.normal(size=(6, 4, 3)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        q, k = layers.vn_linear(X, W).data, layers.vn_linear(X, U).data
        if np.abs(np.sum(q * k, axis=-1)).min() > KINK_MARGIN:
            return {"X": X, "W": W, "U": U}


def _gradient_cases():
    def head_loss(args):
        labels = np.arange(args["X"].shape[0]) % 2
        return loss_ce(layers.affine(args["X"], args["W"], args["b"]), labels)

    return {
        "vn_linear": (
            lambda r: {"X": r.normal(size=(5, 4, 3)), "W": r.normal(size=(3, 4))},
            lambda a: layers.vn_linear(a["X"], a["W"]),
        ),
        "vn_relu": (_relu_args, lambda a: layers.vn_relu(a["X"], a["W"], a["U"])),
        "vn_invariant": (
            lambda r: {"X": r.normal(size=(5, 4, 3)), "T": r.normal(size=(3, 8))},
            lambda a: layers.vn_invariant(a["X"], a["T"]),
        ),
        "complex_linear": (
            lambda r: {k: r.normal(size=s) for k, s in
                       (("V", (5, 4, 3)), ("J", (5, 4, 3)), ("A", (3, 4)), ("B", (3, 4)), ("C", (3, 4)))},
            lambda a: layers.complex_linear(a["V"], a["J"], a["A"], a["B"], a["C"]),
        ),
        "cross_attention": (
            lambda r: {k: r.normal(size=(6, 2, 3)) for k in ("Q", "K", "V")},
            lambda a: layers.cross_attention(a["Q"], a["K"], a["V"])[0],
        ),
        "head": (
            lambda r: {"X": r.normal(size=(6, 5)), "W": r.normal(size=(2, 5)), "b": r.normal(size=2)},
            head_loss,
        ),
    }


GRADIENT_LAYERS = tuple(_gradient_cases())


def gradient_check(layer, seed=0, step=GRAD_STEP):
    """Check ``layer``'s gradient w.r.t. every argument; one result per argument."""
    cases = _gradient_cases()
    if layer not in cases:
        raise ContractViolation(f"unknown layer {layer!r}; choose from {', '.join(cases)}")
    make, fn = cases[layer]
    rng = np.random.default_rng([seed, zlib.crc32(layer.encode())])
    args = make(rng)
    out_shape = np.asarray(fn(args).data).shape
    probe = rng.normal(size=out_shape)
    results = []
    for name in args:

        def scalar(x, name=name):
            out = fn({**args, name: x})
            return ad.sum_axis(ad.elementwise_mul(out, ad.Tensor(probe)))

        results.append(GradientResult(layer, name, ad.grad_check(scalar, args[name], step)))
    return results
