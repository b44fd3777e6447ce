"""Central-difference checks of every differentiable path, grouped by module."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import pipeline
from .align import ProposalBatch, ToyHeadParams, compute_losses
from .liquid import KernelState, OdeConfig, VectorFieldParams, adjust_feature, evolve_kernels
from .perturb import evolve_sequence
from .temporal import FusionParams, LstmParams, TemporalEncoding, encode_sequence

THRESHOLD = 1e-4


def small_config(cfg: pipeline.TrainConfig) -> pipeline.TrainConfig:
    """``cfg`` shrunk to a 6×6×2 instance with two proposals."""
    return cfg.replace(image_size=6, image_channels=2, feature_channels=2, hidden_dim=4,
                       field_hidden=4, proposals=2, num_classes=2)


def _live_model(cfg, rng) -> pipeline.ModelState:
    """Initial model with a non-zero field output so every group carries gradient."""
    model = pipeline.init_model(cfg, rng)
    for name in ("field.w_out", "field.b_out"):
        model.params[name] = 0.05 * rng.standard_normal(model.params[name].shape)
    return model


def check_pipeline(cfg: pipeline.TrainConfig, seed: int = 0) -> dict:
    """Max relative error of ``l_total`` per parameter group on a small scene."""
    cfg = small_config(cfg)
    rng = np.random.default_rng(seed)
    model = _live_model(cfg, rng)
    scene = pipeline.make_scene(rng, cfg.image_size, cfg.image_channels, cfg.proposals, cfg.num_classes)
    names = model.names()
    full = pipeline.loss_function(model, scene, cfg, seed)
    out = {}
    for group in pipeline.GROUPS:
        mine = [n for n in names if pipeline.group_of(n) == group]

        def f(ts, mine=mine):
            sub = dict(zip(mine, ts))
            return full([sub.get(n, model.params[n]) for n in names])

        out[group] = dc.grad_check(f, [model.params[n] for n in mine])
    return out


def check_diffcore(rng) -> float:
    x = rng.standard_normal((5, 4, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    errs = [dc.grad_check(lambda t, p=p: dc.sum(dc.tanh(dc.conv2d(t[0], t[1], p))), [x, k])
            for p in dc.PADDING_MODES]
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    errs.append(dc.grad_check(lambda t: dc.sum(dc.logsumexp(dc.sigmoid(t[0] @ t[1]))), [a, b]))
    return max(errs)


def check_perturb(cfg, rng) -> float:
    f0 = rng.standard_normal((6, 6, 2))
    sched = cfg.schedule

    def f(t):
        seq = evolve_sequence(t[0], sched, cfg.strategy, np.random.default_rng(1), cfg.padding, cfg.literal_eq1)
        return dc.sum(dc.tanh(seq[-1]))

    return dc.grad_check(f, [f0])


def check_temporal(rng) -> float:
    lstm = LstmParams.init(2, 3, rng)
    fusion = FusionParams.init(2, 3, rng)
    maps = [rng.standard_normal((4, 4, 2)) for _ in range(3)]
    names = list(lstm.tensors())

    def f(ts):
        enc = encode_sequence(maps, LstmParams(**dict(zip(names, ts[:-1]))), FusionParams(ts[-1]))
        return dc.sum(dc.tanh(enc.encodings[-1]))

    return dc.grad_check(f, [t.data for t in lstm.tensors().values()] + [fusion.projection.data])


def check_liquid(cfg, rng) -> float:
    ode = OdeConfig(2, cfg.eps_norm)
    vf = VectorFieldParams.init(36, 3, 4, rng)
    params = [t.data for t in vf.tensors().values()]
    params[3] = 0.1 * rng.standard_normal(params[3].shape)
    names = list(vf.tensors())
    encs = [np.abs(rng.standard_normal(3)) for _ in range(3)]
    f0 = rng.standard_normal((6, 6, 2))

    def f(ts):
        field = VectorFieldParams(**dict(zip(names, ts[:5])))
        enc = TemporalEncoding(list(ts[6:9]), [], [])
        ks = evolve_kernels(enc, field, KernelState(ts[5]), ode)
        return dc.sum(dc.tanh(adjust_feature(ts[9], ks[0], cfg.padding)))

    return dc.grad_check(f, params + [KernelState.identity(3, 2, 0.1).weights.data] + encs + [f0])


def check_align(rng) -> float:
    labels = np.array([0, 1, 2])
    boxes = 0.3 * rng.standard_normal((3, 4))
    heads = [0.5 * rng.standard_normal(s) for s in [(4, 3), (3,), (4, 4), (4,)]]

    def f(ts):
        p = ProposalBatch(ts[0], labels, boxes)
        q = ProposalBatch(ts[1], labels, boxes)
        return compute_losses(p, q, ToyHeadParams(*ts[2:])).l_total

    return dc.grad_check(f, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))] + heads)


def run_suite(cfg: pipeline.TrainConfig | None = None, seed: int = 0) -> dict:
    """Max relative error per module; ``pipeline`` also lists each parameter group."""
    cfg = cfg or pipeline.TrainConfig()
    rng = np.random.default_rng(seed)
    groups = check_pipeline(cfg, seed)
    modules = {
        "diffcore": check_diffcore(rng),
        "perturb": check_perturb(cfg, rng),
        "temporal": check_temporal(rng),
        "liquid": check_liquid(cfg, rng),
        "align": check_align(rng),
        "pipeline": max(groups.values()),
    }
    return {"modules": modules, "pipeline_groups": groups, "threshold": THRESHOLD,
            "passed": all(v < THRESHOLD for v in modules.values())}
