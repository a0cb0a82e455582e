"""
Encoder-decoder generators, patch discriminators and the two-stage wiring
"""
import logging
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from app.core.attention import AttentionModule, attention_refine
from app.core.deform import DeformConvLayer, deform_conv2d
from app.core.errors import CheckpointError, ShapeError
from app.core.functional import activation, batch_norm, concat_channels, conv2d, upsample2x
from app.core.models import DiscriminatorConfig, GeneratorConfig, TrainConfig
from app.core.tensor import Variable, as_variable, parameter


logger = logging.getLogger(__name__)

INIT_STD = 0.02


def _conv(rng: np.random.Generator, params: Dict[str, Variable], name: str,
          cin: int, cout: int, k: int, dtype) -> None:
    params[f"{name}.weight"] = parameter(rng.normal(0.0, INIT_STD, (cout, cin, k, k)).astype(dtype), name=f"{name}.weight")
    params[f"{name}.bias"] = parameter(np.zeros(cout, dtype=dtype), name=f"{name}.bias")


def _bn(rng: np.random.Generator, params: Dict[str, Variable], name: str, channels: int, dtype) -> None:
    params[f"{name}.gamma"] = parameter(rng.normal(1.0, INIT_STD, channels).astype(dtype), name=f"{name}.gamma")
    params[f"{name}.beta"] = parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta")


class GeneratorWeights:
    """Named parameters of one U-shaped generator"""

    def __init__(self, config: GeneratorConfig, params: Dict[str, Variable],
                 deform: Dict[str, DeformConvLayer]):
        self.config = config
        self.params = params
        self.deform = deform

    @classmethod
    def create(cls, config: GeneratorConfig, rng: np.random.Generator, dtype=np.float64) -> "GeneratorWeights":
        params: Dict[str, Variable] = {}
        deform: Dict[str, DeformConvLayer] = {}
        ch = config.level_channels

        if config.use_deform:
            deform["enc0"] = DeformConvLayer.create(rng, config.in_channels, ch(0), 3, 1, 1, INIT_STD, dtype)
        else:
            _conv(rng, params, "enc0.conv", config.in_channels, ch(0), 3, dtype)

        for i in range(1, config.depth + 1):
            _conv(rng, params, f"down{i}.conv", ch(i - 1), ch(i), 4, dtype)
            _bn(rng, params, f"down{i}.bn", ch(i), dtype)

        for i in range(config.depth, 0, -1):
            cin = ch(i) if i == config.depth else 2 * ch(i)
            _conv(rng, params, f"up{i}.conv", cin, ch(i - 1), 3, dtype)
            _bn(rng, params, f"up{i}.bn", ch(i - 1), dtype)

        _conv(rng, params, "feature.conv", 2 * ch(0), config.feature_channels, 3, dtype)
        _bn(rng, params, "feature.bn", config.feature_channels, dtype)

        if config.use_deform and config.deform_placement == "first_and_last":
            deform["head"] = DeformConvLayer.create(rng, config.feature_channels, config.out_channels, 3, 1, 1, INIT_STD, dtype)
        else:
            _conv(rng, params, "head.conv", config.feature_channels, config.out_channels, 3, dtype)
        return cls(config, params, deform)

    def named_parameters(self, prefix: str = "") -> Dict[str, Variable]:
        named = {f"{prefix}{name}": p for name, p in self.params.items()}
        for layer_name, layer in self.deform.items():
            named.update(layer.named_parameters(f"{prefix}{layer_name}.deform."))
        return named

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def offset_parameter_count(self) -> int:
        return sum(layer.offset_parameter_count() for layer in self.deform.values())

    def _conv(self, name: str, x: Variable, stride: int = 1, padding: int = 1) -> Variable:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride, padding=padding)

    def _bn(self, name: str, x: Variable) -> Variable:
        return batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])


def generator_forward(g: GeneratorWeights, x) -> Tuple[Variable, Variable]:
    """
    U-Net with skip connections. Returns (out, feature): `out` is the tanh head
    at input resolution, `feature` the penultimate decoder activation map.
    """
    x = as_variable(x)
    cfg = g.config
    if x.ndim != 4:
        raise ShapeError(f"generator: input must be NCHW, got rank {x.ndim}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"generator: input has C={x.shape[1]} channels, expected C={cfg.in_channels}")
    factor = 2 ** cfg.depth
    for dim, size in (("H", x.shape[2]), ("W", x.shape[3])):
        if size % factor != 0:
            raise ShapeError(f"generator: {dim}={size} is not divisible by 2^depth={factor}")

    if "enc0" in g.deform:
        h = deform_conv2d(g.deform["enc0"], x)
    else:
        h = g._conv("enc0.conv", x)
    skips: List[Variable] = [activation("leaky_relu", h)]

    for i in range(1, cfg.depth + 1):
        h = g._conv(f"down{i}.conv", skips[-1], stride=2, padding=1)
        skips.append(activation("leaky_relu", g._bn(f"down{i}.bn", h)))

    u = skips[cfg.depth]
    for i in range(cfg.depth, 0, -1):
        u = g._conv(f"up{i}.conv", upsample2x(u))
        u = activation("relu", g._bn(f"up{i}.bn", u))
        u = concat_channels([u, skips[i - 1]])

    feature = activation("relu", g._bn("feature.bn", g._conv("feature.conv", u)))

    if "head" in g.deform:
        head = deform_conv2d(g.deform["head"], feature)
    else:
        head = g._conv("head.conv", feature)
    return activation("tanh", head), feature


class DiscriminatorWeights:
    """Named parameters of a patch classifier over condition ⊕ target"""

    def __init__(self, config: DiscriminatorConfig, params: Dict[str, Variable]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: DiscriminatorConfig, rng: np.random.Generator, dtype=np.float64) -> "DiscriminatorWeights":
        params: Dict[str, Variable] = {}
        cin = config.in_channels
        for i in range(1, config.n_layers + 1):
            cout = config.base_channels * min(2 ** (i - 1), 8)
            _conv(rng, params, f"block{i}.conv", cin, cout, 4, dtype)
            if i > 1:
                _bn(rng, params, f"block{i}.bn", cout, dtype)
            cin = cout
        _conv(rng, params, "out.conv", cin, 1, 3, dtype)
        return cls(config, params)

    def named_parameters(self, prefix: str = "") -> Dict[str, Variable]:
        return {f"{prefix}{name}": p for name, p in self.params.items()}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_output_layer(self) -> None:
        for name in ("out.conv.weight", "out.conv.bias"):
            self.params[name].value = np.zeros_like(self.params[name].value)


def discriminator_logits(d: DiscriminatorWeights, condition, target) -> Variable:
    """Patch logit map (N, 1, h, w)"""
    pair = concat_channels([as_variable(condition), as_variable(target)])
    if pair.shape[1] != d.config.in_channels:
        raise ShapeError(
            f"discriminator: condition+target has C={pair.shape[1]} channels, "
            f"expected C={d.config.in_channels}"
        )
    h = pair
    for i in range(1, d.config.n_layers + 1):
        h = conv2d(h, d.params[f"block{i}.conv.weight"], d.params[f"block{i}.conv.bias"], stride=2, padding=1)
        if i > 1:
            h = batch_norm(h, d.params[f"block{i}.bn.gamma"], d.params[f"block{i}.bn.beta"])
        h = activation("leaky_relu", h)
    return conv2d(h, d.params["out.conv.weight"], d.params["out.conv.bias"], padding=1)


def discriminate(d: DiscriminatorWeights, condition, target) -> Variable:
    """Patch probability map in (0, 1)"""
    return activation("sigmoid", discriminator_logits(d, condition, target))


class StageOneOutputs(NamedTuple):
    image: Variable
    semantic: Variable
    image_features: Variable
    semantic_features: Variable


class StageTwoOutputs(NamedTuple):
    image: Variable
    semantic: Variable


def _check_spatial(op: str, tensors: Dict[str, Variable]) -> None:
    names = list(tensors)
    ref = tensors[names[0]].shape[2:]
    for name in names[1:]:
        if tensors[name].shape[2:] != ref:
            raise ShapeError(f"{op}: {name} is {tensors[name].shape[2:]} spatially, expected {ref}")


def stage1(gi: GeneratorWeights, gs: GeneratorWeights, aerial, semantic) -> StageOneOutputs:
    """(I'g, Fi) = Gi(Ia ⊕ Sg); (S'g, Fs) = Gs(I'g)"""
    aerial, semantic = as_variable(aerial), as_variable(semantic)
    _check_spatial("stage1", {"Ia": aerial, "Sg": semantic})
    image, image_features = generator_forward(gi, concat_channels([aerial, semantic]))
    sem, semantic_features = generator_forward(gs, image)
    return StageOneOutputs(image, sem, image_features, semantic_features)


def stage2(ga: GeneratorWeights, gs: GeneratorWeights,
           am_image: Optional[AttentionModule], am_semantic: Optional[AttentionModule],
           aerial, coarse_image, image_features, semantic_features) -> StageTwoOutputs:
    """I''g = Ga(Ia ⊕ I'g ⊕ AMi(Fi) ⊕ AMs(Fs)); S''g = Gs(I''g). Missing modules pass features through"""
    aerial = as_variable(aerial)
    _check_spatial("stage2", {
        "Ia": aerial, "I'g": coarse_image, "Fi": image_features, "Fs": semantic_features,
    })
    refined_i = attention_refine(am_image, image_features) if am_image is not None else image_features
    refined_s = attention_refine(am_semantic, semantic_features) if am_semantic is not None else semantic_features
    image, _ = generator_forward(ga, concat_channels([aerial, coarse_image, refined_i, refined_s]))
    sem, _ = generator_forward(gs, image)
    return StageTwoOutputs(image, sem)


class CrossViewModel:
    """Gi, Gs, Ga, the two attention modules and the discriminators of one run"""

    COMPONENTS = ("Gi", "Gs", "Ga", "AMi", "AMs", "D1", "D2")

    def __init__(self, config: TrainConfig):
        self.config = config
        toggles = config.loss_weights
        dtype = np.dtype(config.dtype).type
        image, classes, feats = config.image_channels, config.semantic_classes, config.feature_channels
        rngs = dict(zip(self.COMPONENTS, (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(len(self.COMPONENTS)))))

        def gen_config(cin: int, cout: int) -> GeneratorConfig:
            return GeneratorConfig(
                in_channels=cin,
                out_channels=cout,
                depth=config.depth,
                base_channels=config.base_channels,
                feature_channels=feats,
                use_deform=toggles.use_deform,
                deform_placement=config.deform_placement,
            )

        self.gi = GeneratorWeights.create(gen_config(image + classes, image), rngs["Gi"], dtype)
        self.gs = GeneratorWeights.create(gen_config(image, classes), rngs["Gs"], dtype)
        self.ga = GeneratorWeights.create(gen_config(image + image + 2 * feats, image), rngs["Ga"], dtype)

        self.am_image: Optional[AttentionModule] = None
        self.am_semantic: Optional[AttentionModule] = None
        if toggles.use_attention:
            self.am_image = AttentionModule.create(rngs["AMi"], feats, config.attention_reduction, INIT_STD, dtype)
            self.am_semantic = AttentionModule.create(rngs["AMs"], feats, config.attention_reduction, INIT_STD, dtype)

        self.d1 = DiscriminatorWeights.create(
            DiscriminatorConfig(in_channels=2 * image, base_channels=config.disc_base_channels, n_layers=config.disc_layers),
            rngs["D1"], dtype,
        )
        self.d2: Optional[DiscriminatorWeights] = None
        if toggles.use_semantic_loss:
            self.d2 = DiscriminatorWeights.create(
                DiscriminatorConfig(in_channels=2 * (image + classes), base_channels=config.disc_base_channels, n_layers=config.disc_layers),
                rngs["D2"], dtype,
            )

    def stage1(self, aerial, semantic) -> StageOneOutputs:
        return stage1(self.gi, self.gs, aerial, semantic)

    def stage2(self, aerial, first: StageOneOutputs) -> StageTwoOutputs:
        return stage2(self.ga, self.gs, self.am_image, self.am_semantic,
                      aerial, first.image, first.image_features, first.semantic_features)

    def generator_parameters(self) -> Dict[str, Variable]:
        named = {}
        named.update(self.gi.named_parameters("Gi."))
        named.update(self.gs.named_parameters("Gs."))
        named.update(self.ga.named_parameters("Ga."))
        if self.am_image is not None:
            named.update(self.am_image.named_parameters("AMi."))
            named.update(self.am_semantic.named_parameters("AMs."))
        return named

    def discriminator_parameters(self) -> Dict[str, Variable]:
        named = dict(self.d1.named_parameters("D1."))
        if self.d2 is not None:
            named.update(self.d2.named_parameters("D2."))
        return named

    def parameter_counts(self) -> Dict[str, int]:
        counts = {
            "Gi": self.gi.parameter_count(),
            "Gs": self.gs.parameter_count(),
            "Ga": self.ga.parameter_count(),
            "AMi": self.am_image.parameter_count() if self.am_image is not None else 0,
            "AMs": self.am_semantic.parameter_count() if self.am_semantic is not None else 0,
            "D1": self.d1.parameter_count(),
            "D2": self.d2.parameter_count() if self.d2 is not None else 0,
            "offsets": self.gi.offset_parameter_count() + self.gs.offset_parameter_count() + self.ga.offset_parameter_count(),
        }
        counts["total"] = sum(counts[name] for name in self.COMPONENTS)
        return counts

    def state_dict(self) -> Dict[str, np.ndarray]:
        named = self.generator_parameters()
        named.update(self.discriminator_parameters())
        return {name: p.value for name, p in named.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        named = self.generator_parameters()
        named.update(self.discriminator_parameters())
        missing = sorted(set(named) - set(state))
        unexpected = sorted(set(state) - set(named))
        if missing or unexpected:
            raise CheckpointError(
                f"Checkpoint does not match the configuration: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
        for name, p in named.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f"Checkpoint tensor '{name}' has shape {state[name].shape}, expected {p.shape}")
            p.value = np.array(state[name], dtype=p.dtype, copy=True)
