"""
Adversarial, reconstruction and smoothness objectives
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

from app.core.errors import ShapeError
from app.core.functional import absolute, crop, log_sigmoid, mean
from app.core.models import LossWeights
from app.core.networks import DiscriminatorWeights, discriminator_logits
from app.core.tensor import Variable, as_variable


logger = logging.getLogger(__name__)

Scalar = Union[float, Variable]


def adv_losses_from_logits(real_logits, fake_logits) -> Tuple[Variable, Variable]:
    """
    d-loss = -[mean log D(real) + mean log(1 - D(fake))], g-loss = -mean log D(fake).

    log(1 - sigmoid(l)) is log-sigmoid(-l), so neither term ever evaluates log(0).
    """
    real_logits, fake_logits = as_variable(real_logits), as_variable(fake_logits)
    for name, logits in (("real", real_logits), ("fake", fake_logits)):
        if logits.size == 0 or logits.shape[0] == 0:
            raise ShapeError(f"adv_loss: empty batch for {name} logits")
    d_loss = -(mean(log_sigmoid(real_logits)) + mean(log_sigmoid(-fake_logits)))
    g_loss = -mean(log_sigmoid(fake_logits))
    return d_loss, g_loss


def discriminator_loss(d: DiscriminatorWeights, cond, real, fake) -> Variable:
    """d-loss with `fake` cut from the generator tape"""
    cond, real, fake = as_variable(cond), as_variable(real), as_variable(fake)
    if cond.shape[0] == 0:
        raise ShapeError("discriminator_loss: empty batch")
    d_loss, _ = adv_losses_from_logits(
        discriminator_logits(d, cond, real), discriminator_logits(d, cond, fake.detach())
    )
    return d_loss


def generator_adv_loss(d: DiscriminatorWeights, cond, fake) -> Variable:
    """Non-saturating g-loss; the gradient reaches the generator through `fake`"""
    fake_logits = discriminator_logits(d, as_variable(cond), as_variable(fake))
    if fake_logits.shape[0] == 0:
        raise ShapeError("generator_adv_loss: empty batch")
    return -mean(log_sigmoid(fake_logits))


def adv_loss_pair(d: DiscriminatorWeights, cond, real, fake) -> Tuple[Variable, Variable]:
    """
    Conditional adversarial pair for one discriminator.

    The d-loss sees `fake` detached from the generator tape; the g-loss
    keeps the generator path so its gradient reaches the generator.
    """
    return discriminator_loss(d, cond, real, fake), generator_adv_loss(d, cond, fake)


def total_adv_loss(
    w: LossWeights,
    d1_stage1: Scalar,
    d1_stage2: Scalar,
    d2_stage1: Optional[Scalar] = None,
    d2_stage2: Optional[Scalar] = None,
) -> Scalar:
    """a + λb, plus c + λd when the semantic-guided terms are enabled"""
    result = d1_stage1 + w.lambda_adv * d1_stage2
    if w.use_semantic_loss:
        if d2_stage1 is None or d2_stage2 is None:
            raise ValueError("total_adv_loss: semantic-guided terms are enabled but were not supplied")
        result = result + d2_stage1 + w.lambda_adv * d2_stage2
    return result


def pixel_l1(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    if a.shape != b.shape:
        raise ShapeError(f"pixel_l1: shape mismatch {a.shape} vs {b.shape}")
    return mean(absolute(a - b))


def tv_loss(img) -> Variable:
    """Anisotropic total variation: mean vertical |diff| plus mean horizontal |diff|"""
    img = as_variable(img)
    if img.ndim != 4:
        raise ShapeError(f"tv_loss: image must be NCHW, got rank {img.ndim}")
    h, w = img.shape[2:]
    result = Variable([[[[0.0]]]])
    if h >= 2:
        down = crop(img, (slice(None), slice(None), slice(1, None), slice(None)))
        up = crop(img, (slice(None), slice(None), slice(None, -1), slice(None)))
        result = result + mean(absolute(down - up))
    if w >= 2:
        right = crop(img, (slice(None), slice(None), slice(None), slice(1, None)))
        left = crop(img, (slice(None), slice(None), slice(None), slice(None, -1)))
        result = result + mean(absolute(right - left))
    return result


@dataclass
class ObjectiveTerms:
    """Pieces of the generator objective, kept apart for logging"""
    l1: Tuple[Variable, Variable, Variable, Variable]
    adversarial: Scalar
    tv: Variable
    total: Variable

    def stage1_pixel(self, w: LossWeights) -> float:
        """λ1·L1(I'g, Ig) + λ2·L1(S'g, Sg)"""
        return w.lambda1 * self.l1[0].item() + w.lambda2 * self.l1[1].item()

    def stage2_pixel(self, w: LossWeights) -> float:
        """λ3·L1(I''g, Ig) + λ4·L1(S''g, Sg)"""
        return w.lambda3 * self.l1[2].item() + w.lambda4 * self.l1[3].item()


def total_objective(
    w: LossWeights,
    pairs: Sequence[Tuple[object, object]],
    adversarial: Scalar,
    final_image,
) -> ObjectiveTerms:
    """
    Σ λi·L1_i + adversarial + λtv·TV(final_image).

    `pairs` are (I'g, Ig), (S'g, Sg), (I''g, Ig), (S''g, Sg) in that order,
    weighted by λ1..λ4.
    """
    if len(pairs) != 4:
        raise ValueError(f"total_objective: expected 4 reconstruction pairs, got {len(pairs)}")
    l1 = tuple(pixel_l1(generated, real) for generated, real in pairs)
    tv = tv_loss(final_image)
    weights = (w.lambda1, w.lambda2, w.lambda3, w.lambda4)

    result = adversarial + w.lambda_tv * tv
    for lam, term in zip(weights, l1):
        result = result + lam * term
    return ObjectiveTerms(l1=l1, adversarial=adversarial, tv=tv, total=as_variable(result))
