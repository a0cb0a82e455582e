"""
Finite-difference verification of the analytical gradients.

Every check builds a scalar probe loss sum(op(inputs) * R) with a fixed random
R, runs one backward pass, and compares each (optionally sampled) input entry
against a central difference. Ops with kinks (ReLU, max pooling, bilinear
corner switches) run in kink-tolerant mode: an entry also passes when either
one-sided difference agrees.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from app.core.attention import AttentionModule, attention_refine, channel_attention, spatial_attention
from app.core.deform import DeformConvLayer, bilinear_sample, deform_conv2d, deform_conv2d_with_offsets
from app.core.errors import GradcheckError
from app.core.functional import (
    absolute,
    activation,
    batch_norm,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    global_avg_pool,
    global_max_pool,
    log_sigmoid,
    log_softmax,
    upsample2x,
    weighted_sum,
)
from app.core.losses import adv_losses_from_logits, pixel_l1, total_objective, tv_loss
from app.core.models import DiscriminatorConfig, GradcheckResult, LossWeights
from app.core.networks import DiscriminatorWeights, discriminator_logits
from app.core.tensor import Variable, no_grad, parameter


logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
REL_FLOOR = 1e-3
PROBE_SEED = 1234

Build = Callable[[Dict[str, Variable]], Variable]


def relative_error(analytical: float, numerical: float) -> float:
    return abs(analytical - numerical) / max(abs(analytical), abs(numerical), REL_FLOOR)


@dataclass
class GradCase:
    """One op under test: a builder over named inputs plus the input values"""
    op: str
    build: Build
    inputs: Dict[str, np.ndarray]
    kink_tolerant: bool = False
    step: float = STEP
    max_entries: Optional[int] = None
    frozen: Tuple[str, ...] = field(default_factory=tuple)


def _probe_loss(case: GradCase, values: Dict[str, np.ndarray], weights: Optional[np.ndarray]) -> Tuple[Variable, Dict[str, Variable], np.ndarray]:
    variables = {
        name: (Variable(np.array(v, copy=True)) if name in case.frozen else parameter(v, name=name))
        for name, v in values.items()
    }
    out = case.build(variables)
    if weights is None:
        weights = np.random.default_rng(PROBE_SEED).normal(size=out.shape)
    return weighted_sum(out, weights), variables, weights


def _sample_indices(shape: Tuple[int, ...], max_entries: Optional[int], rng: np.random.Generator) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape))
    flat = np.arange(size)
    if max_entries is not None and size > max_entries:
        flat = np.sort(rng.choice(size, size=max_entries, replace=False))
    return [tuple(int(i) for i in np.unravel_index(k, shape)) for k in flat]


def check_case(case: GradCase, module: str, tolerance: float = TOLERANCE,
               rng: Optional[np.random.Generator] = None) -> GradcheckResult:
    rng = rng if rng is not None else np.random.default_rng(0)
    values = {name: np.asarray(v, dtype=np.float64) for name, v in case.inputs.items()}

    loss, variables, weights = _probe_loss(case, values, None)
    loss.backward()
    analytical = {
        name: (var.grad if var.grad is not None else np.zeros_like(var.value))
        for name, var in variables.items() if name not in case.frozen
    }

    def evaluate(name: str, index: Tuple[int, ...], delta: float) -> float:
        shifted = dict(values)
        shifted[name] = np.array(values[name], copy=True)
        shifted[name][index] += delta
        with no_grad():
            probe, _, _ = _probe_loss(case, shifted, weights)
        return probe.item()

    base: Optional[float] = None
    worst = (0.0, "", ())
    h = case.step
    for name, grad in analytical.items():
        for index in _sample_indices(values[name].shape, case.max_entries, rng):
            plus, minus = evaluate(name, index, h), evaluate(name, index, -h)
            a = float(grad[index])
            err = relative_error(a, (plus - minus) / (2 * h))
            if err > tolerance and case.kink_tolerant:
                if base is None:
                    with no_grad():
                        base = _probe_loss(case, values, weights)[0].item()
                err = min(err, relative_error(a, (plus - base) / h), relative_error(a, (base - minus) / h))
            if err > worst[0]:
                worst = (err, name, index)

    result = GradcheckResult(
        module=module,
        op=case.op,
        max_rel_err=worst[0],
        worst_input=worst[1],
        worst_index=worst[2],
        passed=worst[0] <= tolerance,
    )
    logger.debug(f"gradcheck {module}.{case.op}: max rel err {result.max_rel_err:.3e}")
    return result


# ---------------------------------------------------------------- suites

def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...], margin: float = 0.1) -> np.ndarray:
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def tensor_cases(rng: np.random.Generator) -> List[GradCase]:
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(scale=0.5, size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    gamma, beta = rng.normal(1.0, 0.1, size=4), rng.normal(size=4)
    return [
        GradCase("add", lambda v: v["a"] + v["b"], {"a": rng.normal(size=(2, 3, 4, 4)), "b": rng.normal(size=(1, 3, 1, 4))}),
        GradCase("mul", lambda v: v["a"] * v["b"], {"a": rng.normal(size=(2, 3, 4, 4)), "b": rng.normal(size=(2, 1, 4, 1))}),
        GradCase("conv2d", lambda v: conv2d(v["x"], v["w"], v["b"], stride=1, padding=1), {"x": x, "w": w, "b": b}),
        GradCase("conv2d_strided", lambda v: conv2d(v["x"], v["w"], v["b"], stride=2, padding=1),
                 {"x": rng.normal(size=(2, 3, 6, 6)), "w": rng.normal(size=(2, 3, 4, 4)), "b": rng.normal(size=2)}),
        GradCase("batch_norm", lambda v: batch_norm(v["x"], v["gamma"], v["beta"]),
                 {"x": rng.normal(size=(2, 4, 6, 6)), "gamma": gamma, "beta": beta}),
        GradCase("leaky_relu", lambda v: activation("leaky_relu", v["x"]), {"x": _away_from_zero(rng, (2, 3, 4, 4))}),
        GradCase("relu", lambda v: activation("relu", v["x"]), {"x": _away_from_zero(rng, (2, 3, 4, 4))}),
        GradCase("sigmoid", lambda v: activation("sigmoid", v["x"]), {"x": rng.normal(scale=2.0, size=(2, 3, 4, 4))}),
        GradCase("tanh", lambda v: activation("tanh", v["x"]), {"x": rng.normal(size=(2, 3, 4, 4))}),
        GradCase("log_sigmoid", lambda v: log_sigmoid(v["x"]), {"x": rng.normal(scale=3.0, size=(2, 1, 4, 4))}),
        GradCase("log_softmax", lambda v: log_softmax(v["x"]), {"x": rng.normal(size=(2, 4, 3, 3))}),
        GradCase("abs", lambda v: absolute(v["x"]), {"x": _away_from_zero(rng, (2, 3, 4, 4))}),
        GradCase("concat_channels", lambda v: concat_channels([v["a"], v["b"]]),
                 {"a": rng.normal(size=(2, 1, 4, 4)), "b": rng.normal(size=(2, 3, 4, 4))}),
        GradCase("upsample2x", lambda v: upsample2x(v["x"]), {"x": rng.normal(size=(2, 3, 3, 3))}),
        GradCase("global_avg_pool", lambda v: global_avg_pool(v["x"]), {"x": rng.normal(size=(2, 4, 6, 6))}),
        GradCase("global_max_pool", lambda v: global_max_pool(v["x"]), {"x": rng.normal(size=(2, 4, 6, 6))}, kink_tolerant=True),
        GradCase("channel_mean", lambda v: channel_mean(v["x"]), {"x": rng.normal(size=(2, 4, 6, 6))}),
        GradCase("channel_max", lambda v: channel_max(v["x"]), {"x": rng.normal(size=(2, 4, 6, 6))}, kink_tolerant=True),
        GradCase(
            "conv_bn_act",
            lambda v: activation("tanh", batch_norm(conv2d(v["x"], v["w"], v["b"], padding=1), v["gamma"], v["beta"])),
            {"x": x, "w": w, "b": b, "gamma": gamma, "beta": beta},
        ),
    ]


def deform_cases(rng: np.random.Generator) -> List[GradCase]:
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(scale=0.5, size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    # fractional offsets keep every sample point off the integer grid
    offsets = rng.uniform(0.1, 0.9, size=(1, 18, 6, 6)) * rng.choice([-1.0, 1.0], size=(1, 18, 6, 6))
    offset_w = rng.normal(scale=0.3, size=(18, 2, 3, 3))
    offset_b = rng.uniform(0.2, 0.8, size=18)

    def layer_build(v: Dict[str, Variable]) -> Variable:
        layer = DeformConvLayer(v["w"], v["b"], v["offset_w"], v["offset_b"], stride=1, padding=1)
        return deform_conv2d(layer, v["x"])

    return [
        GradCase("bilinear_sample", lambda v: bilinear_sample(v["map"], v["y"], v["x"]),
                 {"map": rng.normal(size=(2, 5, 5)), "y": np.array([1.37]), "x": np.array([2.61])}, kink_tolerant=True),
        GradCase("deform_conv2d_with_offsets",
                 lambda v: deform_conv2d_with_offsets(v["x"], v["offsets"], v["w"], v["b"], stride=1, padding=1),
                 {"x": x, "offsets": offsets, "w": w, "b": b}, kink_tolerant=True, step=1e-6),
        GradCase("deform_conv2d", layer_build,
                 {"x": x, "w": w, "b": b, "offset_w": offset_w, "offset_b": offset_b},
                 kink_tolerant=True, step=1e-6),
    ]


def attention_cases(rng: np.random.Generator) -> List[GradCase]:
    channels, reduction = 4, 2
    module = AttentionModule.create(rng, channels, reduction, init_std=0.5)
    params = {name: p.value for name, p in module.named_parameters().items()}
    features = rng.normal(size=(2, channels, 6, 6))

    def rebuild(v: Dict[str, Variable]) -> AttentionModule:
        return AttentionModule(
            fc1_weight=v["fc1.weight"], fc1_bias=v["fc1.bias"],
            fc2_weight=v["fc2.weight"], fc2_bias=v["fc2.bias"],
            spatial_weight=v["spatial.weight"], spatial_bias=v["spatial.bias"],
        )

    inputs = dict(params, features=features)
    return [
        GradCase("channel_attention", lambda v: channel_attention(rebuild(v), v["features"]), dict(inputs), kink_tolerant=True),
        GradCase("spatial_attention", lambda v: spatial_attention(rebuild(v), v["features"]), dict(inputs), kink_tolerant=True),
        GradCase("attention_refine", lambda v: attention_refine(rebuild(v), v["features"]), dict(inputs), kink_tolerant=True),
    ]


def loss_cases(rng: np.random.Generator) -> List[GradCase]:
    disc = DiscriminatorWeights.create(DiscriminatorConfig(in_channels=4, base_channels=4, n_layers=2), rng)
    disc_params = {name: p.value for name, p in disc.named_parameters().items()}
    weights = LossWeights()

    def disc_build(v: Dict[str, Variable]) -> Variable:
        rebuilt = DiscriminatorWeights(disc.config, {name: v[name] for name in disc_params})
        return discriminator_logits(rebuilt, v["cond"], v["target"])

    def adv_d(v: Dict[str, Variable]) -> Variable:
        return adv_losses_from_logits(v["real"], v["fake"])[0]

    def adv_g(v: Dict[str, Variable]) -> Variable:
        return adv_losses_from_logits(v["real"], v["fake"])[1]

    def objective(v: Dict[str, Variable]) -> Variable:
        pairs = [(v["coarse"], v["real"]), (v["coarse_sem"], v["sem"]), (v["fine"], v["real"]), (v["fine_sem"], v["sem"])]
        return total_objective(weights, pairs, 0.0, v["fine"]).total

    image = (2, 3, 4, 4)
    semantic = (2, 2, 4, 4)
    return [
        GradCase("adv_d_loss", adv_d, {"real": rng.normal(scale=3.0, size=(2, 1, 3, 3)), "fake": rng.normal(scale=3.0, size=(2, 1, 3, 3))}),
        GradCase("adv_g_loss", adv_g, {"real": rng.normal(size=(2, 1, 3, 3)), "fake": rng.normal(scale=3.0, size=(2, 1, 3, 3))}),
        GradCase("pixel_l1", lambda v: pixel_l1(v["a"], v["b"]),
                 {"a": rng.normal(size=image), "b": rng.normal(size=image)}, kink_tolerant=True),
        GradCase("tv_loss", lambda v: tv_loss(v["img"]), {"img": rng.normal(size=image)}, kink_tolerant=True),
        GradCase("discriminator_logits", disc_build,
                 dict(disc_params, cond=rng.normal(size=(2, 2, 8, 8)), target=rng.normal(size=(2, 2, 8, 8))),
                 kink_tolerant=True, max_entries=24),
        GradCase("total_objective", objective, {
            "coarse": rng.normal(size=image), "fine": rng.normal(size=image), "real": rng.normal(size=image),
            "coarse_sem": rng.normal(size=semantic), "fine_sem": rng.normal(size=semantic), "sem": rng.normal(size=semantic),
        }, kink_tolerant=True),
    ]


SUITES: Dict[str, Callable[[np.random.Generator], List[GradCase]]] = {
    "tensor": tensor_cases,
    "deform": deform_cases,
    "attention": attention_cases,
    "losses": loss_cases,
}


def run_gradcheck(module: str, seed: int = 0, tolerance: float = TOLERANCE,
                  max_entries: Optional[int] = None, raise_on_failure: bool = True) -> List[GradcheckResult]:
    """
    Check every op of one module. Raises GradcheckError naming the failing
    ops unless `raise_on_failure` is off.
    """
    if module not in SUITES:
        raise ValueError(f"Unknown gradcheck module '{module}', expected one of: {', '.join(SUITES)}")
    rng = np.random.default_rng(seed)
    results = []
    for case in SUITES[module](rng):
        if max_entries is not None and case.max_entries is None:
            case.max_entries = max_entries
        results.append(check_case(case, module, tolerance, rng))

    failures = [r for r in results if not r.passed]
    if failures and raise_on_failure:
        names = ", ".join(f"{r.op} (rel err {r.max_rel_err:.3e})" for r in failures)
        raise GradcheckError(f"Gradient check failed in {module}: {names}", violations=failures)
    logger.info(f"gradcheck {module}: {len(results) - len(failures)}/{len(results)} ops within {tolerance:g}")
    return results
