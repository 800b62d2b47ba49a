"""Segmentation network, its ablations, and the training loop.

Wiring (per cloud of N points)::

    kNN edge features (N x k x 2 x 3)
      -> VN-ReLU (2 -> w1) on edges -> mean over neighbours
      -> VN-ReLU (w1 -> w2)                                 features F
      [+ broadcast symmetry direction channel]              H
      [+ cross-product attention over points on H]          G = [H, attn]
      -> orientation-aware block: V = W_v G, J = W_j G,
         Y = complex_linear(V, J) | W_c V, out = VN-ReLU([V, Y])
      -> second block on the first block's output
      -> invariant layer -> pointwise affine head -> N x 2 logits

Variants switch the bracketed parts and the complex layer:

=============  ==========  =========  ==============
variant        symmetry    attention  complex linear
=============  ==========  =========  ==============
OAVNN          yes         yes        yes
VNN            no          no         no
ShellOnly      yes         yes        no
ComplexOnly    no          yes        yes
=============  ==========  =========  ==============
"""

import contextlib
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers
from .errors import ConfigError, ContractViolation, DivergenceError, NumericalError
from .geometry import DEFAULT_K, PointCloud, apply_transform, mirror_residual, nn_embedding, random_o3
from .symmetry import DEFAULT_SHELLS, planar_symmetry_direction

log = logging.getLogger(__name__)

VARIANTS = ("OAVNN", "VNN", "ShellOnly", "ComplexOnly")
_WIRING = {
    # variant: (symmetry channel, attention, complex linear)
    "OAVNN": (True, True, True),
    "VNN": (False, False, False),
    "ShellOnly": (True, True, False),
    "ComplexOnly": (False, True, True),
}
CHECKPOINT_FORMAT = "oavnn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "OAVNN"
    k_neighbors: int = DEFAULT_K
    n_shells: int = DEFAULT_SHELLS
    enc_widths: tuple = (16, 32)
    block_width: int = 32
    attn_width: int = 8
    sym_feature: str = "global"
    seed: int = 0
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 4
    improper_aug: bool = False
    eval_every: int = 0  # batches between extra test evaluations, 0 = epoch ends only
    eval_threshold: float = 0.9  # extra evaluations stop once this is reached

    def __post_init__(self):
        object.__setattr__(self, "enc_widths", tuple(int(w) for w in self.enc_widths))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.enc_widths) != 2:
            raise ConfigError("enc_widths must list exactly two widths")
        for name in ("block_width", "attn_width", "k_neighbors", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if min(self.enc_widths) < 1:
            raise ConfigError("widths must be >= 1")
        if self.n_shells < 2:
            raise ConfigError("n_shells must be >= 2")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if not 0 < self.eval_threshold <= 1:
            raise ConfigError("eval_threshold must be in (0, 1]")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.sym_feature not in ("global", "both"):
            raise ConfigError("sym_feature must be 'global' or 'both'")

    @property
    def uses_symmetry(self):
        return _WIRING[self.variant][0]

    @property
    def uses_attention(self):
        return _WIRING[self.variant][1]

    @property
    def uses_complex(self):
        return _WIRING[self.variant][2]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    params: dict

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_accuracy: float
    test_accuracy: float
    loss: float
    test_loss: float


@dataclass
class Metrics:
    records: list = field(default_factory=list)
    wall_time: float = 0.0
    # (fractional epoch, test accuracy) from mid-epoch evaluations
    checkpoints: list = field(default_factory=list)

    def test_curve(self):
        pts = list(self.checkpoints) + [(float(r.epoch), r.test_accuracy) for r in self.records]
        return sorted(pts)

    def epochs_to(self, threshold=0.9):
        """First (possibly fractional) epoch whose test accuracy reaches
        ``threshold``; None if never."""
        for epoch, acc in self.test_curve():
            if acc >= threshold:
                return int(epoch) if float(epoch).is_integer() else epoch
        return None

    def final_test_accuracy(self):
        return self.records[-1].test_accuracy if self.records else None


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _sym_channels(config):
    if not config.uses_symmetry:
        return 0
    return 2 if config.sym_feature == "both" else 1


def parameter_shapes(config):
    w1, w2 = config.enc_widths
    wb, wa = config.block_width, config.attn_width
    shapes = {
        "enc1.W": (w1, 2),
        "enc1.U": (w1, 2),
        "enc2.W": (w2, w1),
        "enc2.U": (w2, w1),
    }
    c_in = w2 + _sym_channels(config)
    if config.uses_attention:
        for name in ("q", "k", "v"):
            shapes[f"attn.{name}"] = (wa, c_in)
        c_in += wa
    for b in (1, 2):
        shapes[f"block{b}.V"] = (wb, c_in)
        if config.uses_complex:
            shapes[f"block{b}.J"] = (wb, c_in)
            for name in ("A", "B", "C"):
                shapes[f"block{b}.{name}"] = (wb, wb)
        else:
            shapes[f"block{b}.L"] = (wb, wb)
        shapes[f"block{b}.W"] = (wb, 2 * wb)
        shapes[f"block{b}.U"] = (wb, 2 * wb)
        c_in = wb
    shapes["inv.T"] = (3, 2 * wb)
    shapes["head.W"] = (2, 3 * wb)
    shapes["head.b"] = (2,)
    return shapes


def build_model(config):
    """Randomly initialised parameters for ``config`` (seeded)."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("build_model expects a ModelConfig")
    rng = np.random.default_rng([config.seed, 0x0A7])
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name == "head.b":
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[-1]), size=shape)
    return Model(config, params)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def _stage(name):
    try:
        yield
    except NumericalError as exc:
        raise NumericalError(f"non-finite activation in {name}: {exc}", where=name) from exc


def symmetry_channels(config, points):
    """Pseudovector input channels ``N x s x 3`` derived from the detector."""
    est = planar_symmetry_direction(points, config.n_shells)
    n = points.shape[0]
    chans = [np.broadcast_to(est.unit_direction, (n, 3))]
    if config.sym_feature == "both":
        scale = np.linalg.norm(est.per_point, axis=1).mean()
        chans.append(est.per_point / scale if scale > 0 else np.zeros((n, 3)))
    return np.stack(chans, axis=1)


def encode(model, cloud, tensors=None, return_attention=False):
    """Equivariant-or-oriented features ``N x block_width x 3`` before the head."""
    cfg = model.config
    P = tensors if tensors is not None else {k: ad.Tensor(v) for k, v in model.params.items()}
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)

    with _stage("nn_embedding"):
        emb = nn_embedding(pts, cfg.k_neighbors)
    with _stage("encoder"):
        h = layers.vn_relu(emb, P["enc1.W"], P["enc1.U"])
        h = layers.vn_mean_pool(h, axis=1)
        h = layers.vn_relu(h, P["enc2.W"], P["enc2.U"])
    if cfg.uses_symmetry:
        with _stage("symmetry"):
            h = ad.concat_axis([h, ad.Tensor(symmetry_channels(cfg, pts))], axis=1)
    alpha = None
    if cfg.uses_attention:
        with _stage("attention"):
            q = layers.vn_linear(h, P["attn.q"])
            k = layers.vn_linear(h, P["attn.k"])
            v = layers.vn_linear(h, P["attn.v"])
            att, alpha = layers.cross_attention(q, k, v)
            h = ad.concat_axis([h, att], axis=1)
    for b in (1, 2):
        with _stage(f"block{b}"):
            v = layers.vn_linear(h, P[f"block{b}.V"])
            if cfg.uses_complex:
                j = layers.vn_linear(h, P[f"block{b}.J"])
                y = layers.complex_linear(v, j, P[f"block{b}.A"], P[f"block{b}.B"], P[f"block{b}.C"])
            else:
                y = layers.vn_linear(v, P[f"block{b}.L"])
            h = layers.vn_relu(ad.concat_axis([v, y], axis=1), P[f"block{b}.W"], P[f"block{b}.U"])
    if return_attention:
        return h, alpha
    return h


def forward_segmentation(model, cloud, tensors=None):
    """Per-point two-class logits ``N x 2``."""
    P = tensors if tensors is not None else {k: ad.Tensor(v) for k, v in model.params.items()}
    h = encode(model, cloud, P)
    with _stage("invariant"):
        inv = layers.vn_invariant(h, P["inv.T"])
    with _stage("head"):
        return layers.affine(inv, P["head.W"], P["head.b"])


def loss_ce(logits, labels):
    """Mean pointwise cross-entropy."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ContractViolation(f"logits must be N x 2, got {logits.shape}")
    if labels.shape != (logits.shape[0],) or not np.all((labels == 0) | (labels == 1)):
        raise ContractViolation("labels must be a length-N vector of 0/1")
    onehot = np.eye(2)[labels.astype(np.int64)]
    picked = ad.sum_axis(ad.elementwise_mul(ad.log_softmax_axis(logits, axis=1), onehot), axis=1)
    return ad.scalar_scale(ad.mean_axis(picked), -1.0)


def predict(model, cloud):
    return np.argmax(forward_segmentation(model, cloud).data, axis=1)


def cloud_accuracy(logits, labels):
    return float(np.mean(np.argmax(np.asarray(logits), axis=1) == np.asarray(labels)))


def evaluate(model, dataset, with_loss=False):
    """Mean over clouds of the fraction of correctly labelled points."""
    accs, losses = [], []
    for cloud in dataset:
        if cloud.labels is None:
            raise ContractViolation(f"cloud {cloud.name!r} has no labels")
        logits = forward_segmentation(model, cloud)
        accs.append(cloud_accuracy(logits.data, cloud.labels))
        if with_loss:
            losses.append(loss_ce(logits, cloud.labels).item())
    acc = float(np.mean(accs)) if accs else float("nan")
    if with_loss:
        return acc, float(np.mean(losses)) if losses else float("nan")
    return acc


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def loss_and_grads(model, cloud):
    tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in model.params.items()}
    with ad.Tape() as tape:
        logits = forward_segmentation(model, cloud, tensors)
        loss = loss_ce(logits, cloud.labels)
    grads = ad.gradients_for(tape, ad.backward(tape, loss), tensors)
    return loss.item(), logits.data, grads


def train(config, train_set, test_set, model=None, on_epoch=None):
    """Adam on rotation-augmented clouds; returns ``(model, metrics)``.

    Each cloud gets a fresh random rotation every epoch (composed with a
    reflection half of the time when ``improper_aug`` is set). Everything is
    seeded from ``config.seed``.
    """
    if not train_set or not test_set:
        raise ContractViolation("train and test sets must be non-empty")
    for c in list(train_set) + list(test_set):
        if c.labels is None:
            raise ContractViolation(f"cloud {c.name!r} has no labels")
    model = model if model is not None else build_model(config)
    state = ad.OptimState(lr=config.lr)
    rng = np.random.default_rng([config.seed, 0x7A1])
    metrics = Metrics()
    start = time.perf_counter()
    n = len(train_set)
    reached = False
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        seen_loss, seen_acc = [], []
        for b, lo in enumerate(range(0, n, config.batch_size)):
            batch = order[lo : lo + config.batch_size]
            total = {k: np.zeros_like(v) for k, v in model.params.items()}
            for i in batch:
                improper = bool(config.improper_aug and rng.random() < 0.5)
                cloud = apply_transform(train_set[i], random_o3(rng, improper))
                try:
                    loss, logits, grads = loss_and_grads(model, cloud)
                except NumericalError as exc:
                    raise DivergenceError(f"epoch {epoch} batch {b}: {exc}", epoch, b) from exc
                if not math.isfinite(loss):
                    raise DivergenceError(f"epoch {epoch} batch {b}: loss is {loss}", epoch, b)
                seen_loss.append(loss)
                seen_acc.append(cloud_accuracy(logits, cloud.labels))
                for k in total:
                    total[k] += grads[k]
            scale = 1.0 / len(batch)
            model.params = ad.adam_step(model.params, {k: g * scale for k, g in total.items()}, state)
            done = lo + len(batch)
            if config.eval_every and (b + 1) % config.eval_every == 0 and done < n and not reached:
                acc = evaluate(model, test_set)
                metrics.checkpoints.append((epoch - 1 + done / n, acc))
                reached = acc >= config.eval_threshold
        test_acc, test_loss = evaluate(model, test_set, with_loss=True)
        rec = EpochRecord(epoch, float(np.mean(seen_acc)), test_acc, float(np.mean(seen_loss)), test_loss)
        metrics.records.append(rec)
        reached = reached or test_acc >= config.eval_threshold
        metrics.wall_time = time.perf_counter() - start
        log.info(
            "%s epoch %d: loss %.4f train %.3f test %.3f",
            config.variant, epoch, rec.loss, rec.train_accuracy, rec.test_accuracy,
        )
        if on_epoch is not None:
            on_epoch(rec)
    metrics.wall_time = time.perf_counter() - start
    return model, metrics


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model, path, extra=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {
            k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in model.params.items()
        },
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig.from_dict(doc["config"])
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    expected = parameter_shapes(config)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise ConfigError(f"{path}: parameter shapes do not match the embedded config")
    return Model(config, params)


# ---------------------------------------------------------------------------
# symmetry ambiguity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AmbiguityResult:
    perpendicular: float
    feature_norm: float

    @property
    def ratio(self):
        return self.perpendicular / self.feature_norm if self.feature_norm > 0 else 0.0


def symmetry_ambiguity_demo(model, cloud, normal):
    """Largest component along the mirror normal of the pooled encoder feature.

    Requires ``cloud`` to be mirror-symmetric about the plane through the
    origin with normal ``normal`` (residual <= 1e-9).
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    if mirror_residual(pts, n) > 1e-9:
        raise ContractViolation("cloud is not mirror-symmetric about the given plane")
    feat = layers.vn_global_mean(encode(model, pts)).data[0]
    perp = np.abs(feat @ n)
    return AmbiguityResult(float(perp.max()), float(np.linalg.norm(feat)))


def rotate_cloud(cloud, seed, improper=False):
    return apply_transform(cloud, random_o3(seed, improper))
