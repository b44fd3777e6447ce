"""Training and inference on synthetic scenes with a toy two-stage extractor.

The detector is reduced to the smallest structure that still exercises every
loss term: two 3×3 conv+ReLU stages produce a feature map, proposals are
fixed rectangles whose features are the mean of the map over the rectangle,
and linear heads classify and regress them.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import ltf1
from .align import LossBundle, ProposalBatch, ToyHeadParams, compute_losses, head_losses, total_loss
from .diffcore import Tensor
from .errors import DomainError, NumericalError, ShapeError
from .liquid import KernelState, OdeConfig, VectorFieldParams, adjust_feature, evolve_kernels, horizon, rk4_solve
from .perturb import EvolutionSchedule, InjectionStrategy, evolve_sequence, gaussian_kernel
from .temporal import FusionParams, LstmParams, encode_sequence

log = logging.getLogger(__name__)

GROUPS = ("extractor", "lstm", "fusion", "field", "w0", "head")
METRIC_COLUMNS = ("epoch", "step", "l_cls", "l_reg", "l_intra", "l_inter", "l_align", "l_total")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    schedule: EvolutionSchedule = field(default_factory=EvolutionSchedule)
    infer_T: int = 2
    lr: float = 0.02
    momentum: float = 0.9
    epochs: int = 5
    seed: int = 0
    k: int = 3
    strategy: str = "progressive"
    layer_index: int = 1
    lam1: float = 1.0
    lam2: float = 0.1
    include_positive: bool = False
    literal_eq1: bool = False
    padding: str = "circular"
    hidden_dim: int = 64
    field_hidden: int = 64
    ode_steps: int = 4
    eps_norm: float = 1e-8
    w0_scale: float = 0.1
    grad_clip: float = 10.0
    image_size: int = 32
    image_channels: int = 3
    feature_channels: int = 8
    num_classes: int = 3
    proposals: int = 4
    num_scenes: int = 200
    evolution: bool = True
    frozen: tuple = ()

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = EvolutionSchedule(**self.schedule)
        self.strategy = InjectionStrategy(self.strategy).value
        self.frozen = tuple(self.frozen)
        unknown = set(self.frozen) - set(GROUPS)
        if unknown:
            raise DomainError(f"unknown parameter groups {sorted(unknown)}")
        if not 0 <= self.infer_T <= self.schedule.T:
            raise DomainError(f"infer_T must lie in 0..{self.schedule.T}, got {self.infer_T}")
        if self.layer_index not in (1, 2):
            raise DomainError("layer_index must be 1 or 2")
        if self.k < 1 or self.k % 2 == 0:
            raise DomainError("k must be a positive odd integer")
        if self.padding not in dc.PADDING_MODES:
            raise DomainError(f"padding must be one of {dc.PADDING_MODES}")
        for name in ("epochs", "hidden_dim", "field_hidden", "ode_steps", "image_size",
                     "image_channels", "feature_channels", "num_classes", "proposals", "num_scenes"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.proposals < 2:
            raise DomainError("at least two proposals per scene are needed")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.grad_clip <= 0:
            raise DomainError("invalid optimizer settings")
        if self.lam1 < 0 or self.lam2 < 0:
            raise DomainError("loss weights must be non-negative")

    @property
    def ode(self) -> OdeConfig:
        return OdeConfig(self.ode_steps, self.eps_norm)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DomainError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "schedule" in d:
            sched = d["schedule"]
            if not isinstance(sched, dict):
                raise DomainError("schedule must be an object")
            snames = {f.name for f in dataclasses.fields(EvolutionSchedule)}
            bad = set(sched) - snames
            if bad:
                raise DomainError(f"unknown schedule keys {sorted(bad)}")
            d["schedule"] = EvolutionSchedule(**{**EvolutionSchedule().to_dict(), **sched})
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class ToyScene:
    image: np.ndarray      # h×w×channels
    proposals: np.ndarray  # m×4 int rectangles (y0, y1, x0, x1), end-exclusive
    labels: np.ndarray     # m
    boxes: np.ndarray      # m×4 regression targets
    domain_knob: float = 0.0

    def __post_init__(self):
        h, w = self.image.shape[:2]
        p = np.asarray(self.proposals)
        if p.ndim != 2 or p.shape[1] != 4:
            raise ShapeError("proposals must be m×4")
        ok = (p[:, 0] >= 0) & (p[:, 0] < p[:, 1]) & (p[:, 1] <= h) & \
             (p[:, 2] >= 0) & (p[:, 2] < p[:, 3]) & (p[:, 3] <= w)
        if not ok.all():
            raise DomainError("proposals must lie inside the image")
        if not 0.0 <= self.domain_knob <= 1.0:
            raise DomainError("domain_knob must lie in [0, 1]")


def _draw_shape(cls_id: int, s: int) -> np.ndarray:
    """Binary s×s mask: 0 filled square, 1 hollow frame, 2 plus sign."""
    mask = np.zeros((s, s))
    if cls_id == 0:
        mask[:] = 1.0
    elif cls_id == 1:
        t = max(1, s // 4)
        mask[:t, :] = mask[-t:, :] = mask[:, :t] = mask[:, -t:] = 1.0
    else:
        t = max(1, s // 4)
        lo = (s - t) // 2
        mask[lo:lo + t, :] = 1.0
        mask[:, lo:lo + t] = 1.0
    return mask


def make_scene(rng, size: int = 32, channels: int = 3, num_proposals: int = 4,
               num_classes: int = 3) -> ToyScene:
    """Objects on a noisy background, one per grid cell, with jittered proposals."""
    grid = math.ceil(math.sqrt(num_proposals))
    cell = size // grid
    if cell < 3:
        raise DomainError(f"image of size {size} too small for {num_proposals} proposals")
    image = 0.05 * rng.standard_normal((size, size, channels))
    s_lo = max(2, cell // 2)
    s_hi = max(s_lo, cell - 2)
    props, labels, boxes = [], [], []
    for n in range(num_proposals):
        cy, cx = (n // grid) * cell, (n % grid) * cell
        label = int(rng.integers(num_classes))
        s = int(rng.integers(s_lo, s_hi + 1))
        oy = cy + int(rng.integers(0, cell - s + 1))
        ox = cx + int(rng.integers(0, cell - s + 1))
        color = rng.uniform(0.5, 1.0, channels)
        image[oy:oy + s, ox:ox + s, :] += _draw_shape(label % 3, s)[:, :, None] * color
        obj = np.array([oy, oy + s, ox, ox + s])
        jit = rng.integers(-1, 2, 4)
        prop = obj + jit
        prop[[0, 2]] = np.clip(prop[[0, 2]], 0, size - 1)
        prop[[1, 3]] = np.clip(prop[[1, 3]], prop[[0, 2]] + 1, size)
        props.append(prop)
        labels.append(label)
        boxes.append((obj - prop) / cell)
    return ToyScene(image, np.array(props, dtype=np.int64), np.array(labels), np.array(boxes))


def apply_shift(scene: ToyScene, knob: float, rng) -> ToyScene:
    """Blur (sigma 2k), brightness scale (1 - 0.4k) and noise (std 0.3k); k = 0 is identity."""
    if not 0.0 <= knob <= 1.0:
        raise DomainError("domain knob must lie in [0, 1]")
    if knob == 0.0:
        return dataclasses.replace(scene, image=scene.image.copy(), domain_knob=0.0)
    img = scene.image
    g = gaussian_kernel(2.0 * knob, max(1, min(img.shape[:2]) // 2))
    img = dc.separable_filter(Tensor(img), g.taps1d, "reflect").data
    img = img * (1.0 - 0.4 * knob) + 0.3 * knob * rng.standard_normal(img.shape)
    return dataclasses.replace(scene, image=np.array(img), domain_knob=float(knob))


def make_scenes(cfg: TrainConfig, count: int, rng, knob: float = 0.0) -> list[ToyScene]:
    scenes = [make_scene(rng, cfg.image_size, cfg.image_channels, cfg.proposals, cfg.num_classes)
              for _ in range(count)]
    if knob:
        scenes = [apply_shift(s, knob, rng) for s in scenes]
    return scenes


# ---------------------------------------------------------------------------
# model state
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    params: dict    # name -> ndarray
    momentum: dict  # name -> ndarray, same shapes

    def __post_init__(self):
        if set(self.params) != set(self.momentum):
            raise ShapeError("every parameter needs a momentum buffer")
        for name, p in self.params.items():
            if self.momentum[name].shape != p.shape:
                raise ShapeError(f"momentum buffer of {name} has the wrong shape")

    def names(self) -> list[str]:
        return sorted(self.params)

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.momentum.items()})


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def init_model(cfg: TrainConfig, rng=None) -> ModelState:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    ci, c, k = cfg.image_channels, cfg.feature_channels, cfg.k
    # half-scale He weights and a small positive bias keep the ReLU maps
    # alive through the first alignment updates
    params = {
        "extractor.k1": rng.normal(0.0, 0.5 * math.sqrt(2.0 / (9 * ci)), (3, 3, ci, c)),
        "extractor.b1": np.full(c, 0.1),
        "extractor.k2": rng.normal(0.0, 0.5 * math.sqrt(2.0 / (9 * c)), (3, 3, c, c)),
        "extractor.b2": np.full(c, 0.1),
    }
    for name, t in LstmParams.init(c, cfg.hidden_dim, rng).tensors().items():
        params[f"lstm.{name}"] = np.array(t.data)
    params["fusion.projection"] = np.array(FusionParams.init(c, cfg.hidden_dim, rng).projection.data)
    vf = VectorFieldParams.init(k * k * c * c, cfg.hidden_dim, cfg.field_hidden, rng)
    for name, t in vf.tensors().items():
        params[f"field.{name}"] = np.array(t.data)
    params["w0"] = np.array(KernelState.identity(k, c, cfg.w0_scale).weights.data)
    for name, t in ToyHeadParams.init(c, cfg.num_classes, rng).tensors().items():
        params[f"head.{name}"] = np.array(t.data)
    return ModelState(params, {n: np.zeros_like(p) for n, p in params.items()})


class _Bound:
    """Parameter tensors of one forward pass, grouped as the modules expect."""

    def __init__(self, t: dict):
        def sub(group):
            return {n.split(".", 1)[1]: v for n, v in t.items() if group_of(n) == group}

        self.t = t
        self.lstm = LstmParams(**sub("lstm"))
        self.fusion = FusionParams(t["fusion.projection"])
        self.field = VectorFieldParams(**sub("field"))
        self.w0 = KernelState(t["w0"])
        self.heads = ToyHeadParams(**sub("head"))

    @classmethod
    def of(cls, model: ModelState, trainable=()) -> "_Bound":
        t = {n: Tensor(model.params[n], requires_grad=n in trainable) for n in model.names()}
        b = cls(t)
        b.leaves = {n: v for n, v in t.items() if v.requires_grad}
        return b


def _stage(x, kernel, bias, padding):
    return dc.relu(dc.bias_add(dc.conv2d(x, kernel, padding), bias))


def extract(b: _Bound, image, cfg: TrainConfig) -> Tensor:
    """Feature map ``F0`` at the evolved stage."""
    f = _stage(dc.tensor(image), b.t["extractor.k1"], b.t["extractor.b1"], cfg.padding)
    if cfg.layer_index == 2:
        f = _stage(f, b.t["extractor.k2"], b.t["extractor.b2"], cfg.padding)
    return f


def finish(b: _Bound, f, cfg: TrainConfig) -> Tensor:
    """Remaining stages after the evolved one."""
    if cfg.layer_index == 1:
        return _stage(f, b.t["extractor.k2"], b.t["extractor.b2"], cfg.padding)
    return f


def roi_features(fmap, proposals) -> Tensor:
    """m×c matrix of per-rectangle spatial means."""
    return dc.stack([dc.mean_pool_spatial(dc.crop(fmap, *(int(v) for v in p))) for p in proposals])


def proposal_batch(fmap, scene: ToyScene) -> ProposalBatch:
    return ProposalBatch(roi_features(fmap, scene.proposals), scene.labels, scene.boxes)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    losses: LossBundle
    f0: Tensor
    f_hat: Tensor | None = None
    sequence: list | None = None
    kernels: list | None = None
    horizons: list | None = None


def forward_losses(b: _Bound, scene: ToyScene, cfg: TrainConfig, rng) -> ForwardResult:
    f0 = extract(b, scene.image, cfg)
    p = proposal_batch(finish(b, f0, cfg), scene)
    if not cfg.evolution:
        l_cls, l_reg = head_losses(p, None, b.heads)
        zero = Tensor(0.0)
        return ForwardResult(total_loss(zero, zero, l_cls, l_reg, cfg.lam1, cfg.lam2), f0)
    seq = evolve_sequence(f0, cfg.schedule, cfg.strategy, rng, cfg.padding, cfg.literal_eq1)
    enc = encode_sequence(seq, b.lstm, b.fusion)
    kernels = evolve_kernels(enc, b.field, b.w0, cfg.ode)
    adjusted = [adjust_feature(f0, w, cfg.padding) for w in kernels]
    f_hat = adjusted[-1]
    p_hat = proposal_batch(finish(b, f_hat, cfg), scene)
    losses = compute_losses(p, p_hat, b.heads, cfg.lam1, cfg.lam2, cfg.include_positive)
    taus = [float(horizon(enc, t, cfg.ode).data) for t in range(1, len(enc) + 1)]
    return ForwardResult(losses, f0, f_hat, seq, kernels, taus)


def loss_function(model: ModelState, scene: ToyScene, cfg: TrainConfig, seed: int):
    """``f(tensors) -> l_total`` over all parameters in ``model.names()`` order.

    The perturbation noise is redrawn from ``seed`` on every call so the
    function is deterministic, as finite differences require.
    """
    names = model.names()

    def f(tensors):
        b = _Bound(dict(zip(names, tensors)))
        return forward_losses(b, scene, cfg, np.random.default_rng(seed)).losses.l_total

    return f


def sgd_update(model: ModelState, grads: dict, cfg: TrainConfig) -> ModelState:
    """Global-norm clipping, then heavy-ball momentum ``v = mu v + g; p -= lr v``."""
    names = model.names()
    sq = 0.0
    for n in names:
        g = grads.get(n)
        if g is not None:
            sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
    params, mom = {}, {}
    for n in names:
        g = grads.get(n)
        if g is None:
            params[n] = model.params[n].copy()
            mom[n] = model.momentum[n].copy()
            continue
        v = cfg.momentum * model.momentum[n] + g * scale
        mom[n] = v
        params[n] = model.params[n] - cfg.lr * v
    return ModelState(params, mom)


def _trainable(model: ModelState, cfg: TrainConfig) -> set:
    names = {n for n in model.params if group_of(n) not in cfg.frozen}
    if not cfg.evolution:
        names = {n for n in names if group_of(n) in ("extractor", "head")}
    return names


def train_step(model: ModelState, scene: ToyScene, cfg: TrainConfig, rng) -> tuple[ModelState, LossBundle]:
    """One forward/backward pass on ``scene`` and an SGD update of all trainable groups."""
    b = _Bound.of(model, _trainable(model, cfg))
    res = forward_losses(b, scene, cfg, rng)
    total = res.losses.l_total
    if not np.isfinite(total.data):
        raise NumericalError("non-finite training loss; step rejected")
    names = list(b.leaves)
    grads = dict(zip(names, dc.grad(total, [b.leaves[n] for n in names])))
    return sgd_update(model, grads, cfg), res.losses


def train_classifier_step(model: ModelState, scene: ToyScene, cfg: TrainConfig) -> tuple[ModelState, dict]:
    """Plain detector training on ``F0`` proposals: extractor and heads only."""
    t = {n: Tensor(model.params[n], requires_grad=group_of(n) in ("extractor", "head")) for n in model.names()}
    f = _stage(dc.tensor(scene.image), t["extractor.k1"], t["extractor.b1"], cfg.padding)
    f = _stage(f, t["extractor.k2"], t["extractor.b2"], cfg.padding)
    heads = ToyHeadParams(t["head.w_cls"], t["head.b_cls"], t["head.w_reg"], t["head.b_reg"])
    l_cls, l_reg = head_losses(proposal_batch(f, scene), None, heads)
    loss = l_cls + l_reg
    names = [n for n in model.names() if t[n].requires_grad]
    grads = dict(zip(names, dc.grad(loss, [t[n] for n in names])))
    return sgd_update(model, grads, cfg), {"l_cls": float(l_cls.data), "l_reg": float(l_reg.data)}


def _streams(seed: int):
    """Independent generators for init, scenes, shuffling and perturbation noise."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def train(cfg: TrainConfig, scenes: list | None = None, model: ModelState | None = None,
          on_step=None, on_reject=None) -> tuple[ModelState, list[dict]]:
    """Full training run; returns the model and one metrics row per accepted step.

    A step whose forward pass fails numerically is skipped, logged and
    passed to ``on_reject`` as ``{"epoch", "step", "reason"}``.
    """
    init_rng, scene_rng, order_rng, noise_rng = _streams(cfg.seed)
    if model is None:
        model = init_model(cfg, init_rng)
    if scenes is None:
        scenes = make_scenes(cfg, cfg.num_scenes, scene_rng)
    rows, rejected = [], []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for idx in order_rng.permutation(len(scenes)):
            step += 1
            try:
                model, losses = train_step(model, scenes[idx], cfg, noise_rng)
            except NumericalError as exc:
                rejected.append({"epoch": epoch, "step": step, "reason": str(exc)})
                if on_reject is not None:
                    on_reject(rejected[-1])
                continue
            row = {"epoch": epoch, "step": step, **losses.values()}
            rows.append(row)
            if on_step is not None:
                on_step(row)
    if rejected:
        log.warning("rejected %d of %d steps: %s", len(rejected), step, rejected[0]["reason"])
    return model, rows


def training_scenes(cfg: TrainConfig) -> list[ToyScene]:
    """The scenes :func:`train` draws for ``cfg.seed``."""
    return make_scenes(cfg, cfg.num_scenes, _streams(cfg.seed)[1])


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def infer(model: ModelState, scene: ToyScene, cfg: TrainConfig, rng=None, infer_T: int | None = None) -> dict:
    """Class probabilities and boxes per proposal.

    With ``infer_T > 0`` the feature map is evolved for ``infer_T`` steps, a
    single kernel is solved from the last encoding, and the adjusted map is
    classified. ``infer_T = 0`` (or ``cfg.evolution`` off) classifies ``F0``.
    """
    steps = cfg.infer_T if infer_T is None else infer_T
    if not 0 <= steps <= cfg.schedule.T:
        raise DomainError(f"infer_T must lie in 0..{cfg.schedule.T}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    with dc.no_grad():
        b = _Bound.of(model)
        f0 = extract(b, scene.image, cfg)
        f_hat = f0
        tau = None
        if steps > 0 and cfg.evolution:
            sched = dataclasses.replace(cfg.schedule, T=steps)
            seq = evolve_sequence(f0, sched, cfg.strategy, rng, cfg.padding, cfg.literal_eq1)
            enc = encode_sequence(seq, b.lstm, b.fusion)
            tau = horizon(enc, steps, cfg.ode)
            w = rk4_solve(b.field, b.w0, enc.encodings[-1], tau, cfg.ode)
            f_hat = adjust_feature(f0, w, cfg.padding)
        feats = roi_features(finish(b, f_hat, cfg), scene.proposals)
        logits = b.heads.logits(feats).data
        boxes = b.heads.regress(feats).data
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return {"scores": probs, "boxes": boxes, "predictions": probs.argmax(axis=1),
            "tau_hat": None if tau is None else float(tau.data)}


def accuracy(model: ModelState, scenes, cfg: TrainConfig, rng=None) -> float:
    """Percentage of proposals whose arg-max class matches the label."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    hits = total = 0
    for s in scenes:
        pred = infer(model, s, cfg, rng)["predictions"]
        hits += int((pred == s.labels).sum())
        total += len(s.labels)
    return 100.0 * hits / total


def heldout_scenes(cfg: TrainConfig, seed: int, knob: float, count: int = 50) -> list[ToyScene]:
    """Held-out scenes for ``seed`` shifted by ``knob``; distinct from training draws."""
    rng = np.random.default_rng([seed, 7919])
    return make_scenes(cfg, count, rng, knob)


def benchmark(model_ltfe: ModelState, model_baseline: ModelState, knobs, seeds,
              cfg: TrainConfig, baseline_cfg: TrainConfig | None = None, count: int = 50) -> list[dict]:
    """Accuracy of both models per (knob, seed), summarized per knob.

    Returns one row per (knob, model) with the mean, population std and the
    per-seed accuracies.
    """
    if baseline_cfg is None:
        baseline_cfg = cfg.replace(evolution=False)
    table = []
    for knob in sorted(knobs):
        accs = {"ltfe": [], "baseline": []}
        for seed in seeds:
            scenes = heldout_scenes(cfg, seed, knob, count)
            accs["ltfe"].append(accuracy(model_ltfe, scenes, cfg, np.random.default_rng([seed, 1])))
            accs["baseline"].append(accuracy(model_baseline, scenes, baseline_cfg, np.random.default_rng([seed, 1])))
        for name in ("ltfe", "baseline"):
            a = np.array(accs[name])
            table.append({"knob": float(knob), "model": name, "n": len(a),
                          "mean": float(a.mean()) if len(a) else float("nan"),
                          "std": float(a.std()) if len(a) else float("nan"),
                          "per_seed": dict(zip(seeds, (float(x) for x in a)))})
    return table


def benchmark_csv(table: list[dict], seeds) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["knob", "model", "n", "mean", "std"] + [f"seed_{s}" for s in seeds])
    for row in table:
        w.writerow([repr(row["knob"]), row["model"], row["n"], repr(row["mean"]), repr(row["std"])]
                   + [repr(row["per_seed"][s]) for s in seeds])
    return buf.getvalue()


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"], r["step"]] + [repr(r[c]) for c in METRIC_COLUMNS[2:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: ModelState, directory, cfg: TrainConfig | None = None) -> Path:
    """``model.ltf`` (concatenated LTF1 records) plus a ``model.json`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = model.names()
    arrays = [model.params[n] for n in names] + [model.momentum[n] for n in names]
    offsets = ltf1.write_many(directory / "model.ltf", arrays)
    entries = [{"name": n, "kind": kind, "shape": list(a.shape), "offset": off}
               for (n, kind), a, off in zip([(n, "param") for n in names] + [(n, "momentum") for n in names],
                                            arrays, offsets)]
    manifest = {"format": "LTF1", "tensors": entries, "config": cfg.to_dict() if cfg else None}
    (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[ModelState, dict | None]:
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    arrays = ltf1.read_many(directory / "model.ltf")
    if len(arrays) != len(manifest["tensors"]):
        raise ShapeError("checkpoint manifest and tensor stream disagree")
    params, mom = {}, {}
    for e, a in zip(manifest["tensors"], arrays):
        if list(a.shape) != e["shape"]:
            raise ShapeError(f"tensor {e['name']} has shape {a.shape}, manifest says {e['shape']}")
        (params if e["kind"] == "param" else mom)[e["name"]] = a
    return ModelState(params, mom), manifest.get("config")
