"""
Image quality metrics and the probe classifiers behind KL score and top-k accuracy
"""
import csv
import logging
import math
import os
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.signal import correlate2d

from app.core.errors import ShapeError
from app.core.functional import activation, conv2d, global_avg_pool, log_softmax
from app.core.models import MetricRow
from app.core.optim import Adam
from app.core.tensor import Variable, no_grad, parameter


logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PROB_FLOOR = 1e-12

METRIC_COLUMNS = ["method", "direction", "size", "ssim", "psnr", "kl_mean", "kl_std", "top1", "top5"]


# ---------------------------------------------------------------- pixel metrics

def psnr(a: np.ndarray, b: np.ndarray, max_value: float = 255.0) -> float:
    """10·log10(max² / MSE); identical images give float('inf')"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)


def to_gray(image: np.ndarray) -> np.ndarray:
    """(3, H, W) colour to (H, W) luma; (H, W) passes through"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[0] == 3:
        return np.tensordot(LUMA, image, axes=(0, 0))
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0]
    raise ShapeError(f"ssim: expected (H, W), (1, H, W) or (3, H, W), got {image.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, max_value: float = 255.0) -> np.ndarray:
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape != gb.shape:
        raise ShapeError(f"ssim: shape mismatch {ga.shape} vs {gb.shape}")
    if ga.shape[0] < SSIM_WINDOW or ga.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"ssim: image {ga.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    window = gaussian_window()
    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2

    def filt(x: np.ndarray) -> np.ndarray:
        return correlate2d(x, window, mode="valid")

    mu_a, mu_b = filt(ga), filt(gb)
    var_a = filt(ga * ga) - mu_a * mu_a
    var_b = filt(gb * gb) - mu_b * mu_b
    cov = filt(ga * gb) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return numerator / denominator


def ssim(a: np.ndarray, b: np.ndarray, max_value: float = 255.0) -> float:
    """Mean local SSIM (11x11 Gaussian window, σ=1.5) on the luma channel"""
    return float(ssim_map(a, b, max_value).mean())


# ---------------------------------------------------------------- probes

class ProbeClassifier(Protocol):
    classes: int

    def predict(self, images: np.ndarray) -> np.ndarray:
        """(N, 3, H, W) in [-1, 1] -> (N, K) probabilities"""
        ...


class ConstantProbe:
    """Same distribution for every image"""

    def __init__(self, distribution: Sequence[float]):
        p = np.asarray(distribution, dtype=np.float64)
        if p.ndim != 1 or p.size == 0 or np.any(p < 0):
            raise ValueError("ConstantProbe: distribution must be a non-empty non-negative vector")
        self.distribution = p / p.sum()
        self.classes = p.size

    @classmethod
    def uniform(cls, classes: int) -> "ConstantProbe":
        return cls(np.full(classes, 1.0 / classes))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.tile(self.distribution, (len(images), 1))


class ConvProbe:
    """
    conv3x3/s2 -> relu -> conv3x3/s2 -> relu -> global average pool -> 1x1 head -> softmax.
    Fit on the scene labels of real target views.
    """

    def __init__(self, params: Dict[str, Variable], classes: int):
        self.params = params
        self.classes = classes

    @classmethod
    def create(cls, classes: int, seed: int = 0, width: int = 8, in_channels: int = 3) -> "ConvProbe":
        rng = np.random.default_rng(seed)
        shapes = {
            "conv1.weight": (width, in_channels, 3, 3),
            "conv2.weight": (2 * width, width, 3, 3),
            "head.weight": (classes, 2 * width, 1, 1),
        }
        params = {}
        for name, shape in shapes.items():
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape), name=name)
            bias_name = name.replace("weight", "bias")
            params[bias_name] = parameter(np.zeros(shape[0]), name=bias_name)
        return cls(params, classes)

    def logits(self, images) -> Variable:
        p = self.params
        h = activation("relu", conv2d(images, p["conv1.weight"], p["conv1.bias"], stride=2, padding=1))
        h = activation("relu", conv2d(h, p["conv2.weight"], p["conv2.bias"], stride=2, padding=1))
        return conv2d(global_avg_pool(h), p["head.weight"], p["head.bias"])

    def predict(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            logp = log_softmax(self.logits(np.asarray(images, dtype=np.float64))).value
        probs = np.exp(logp.reshape(len(images), self.classes))
        return probs / probs.sum(axis=1, keepdims=True)

    def fit(self, images: np.ndarray, labels: Sequence[int], iterations: int = 200,
            lr: float = 1e-2, batch_size: int = 16, seed: int = 0) -> List[float]:
        """Minimise cross-entropy with Adam; returns the per-iteration loss"""
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if len(images) == 0:
            raise ValueError("ConvProbe.fit: no training images")
        rng = np.random.default_rng(seed)
        optimizer = Adam(self.params, lr=lr, betas=(0.9, 0.999))
        history = []
        for _ in range(iterations):
            idx = np.sort(rng.choice(len(images), size=min(batch_size, len(images)), replace=False))
            onehot = np.zeros((len(idx), self.classes, 1, 1))
            onehot[np.arange(len(idx)), labels[idx], 0, 0] = 1.0
            optimizer.zero_grad()
            loss = -(log_softmax(self.logits(images[idx])) * onehot).sum() / len(idx)
            loss.backward()
            optimizer.step()
            history.append(loss.item())
        logger.info(f"Probe fit: {iterations} iterations, final cross-entropy {history[-1]:.4f}")
        return history

    def state_dict(self, prefix: str = "probe.") -> Dict[str, np.ndarray]:
        return {f"{prefix}{name}": p.value for name, p in self.params.items()}

    @classmethod
    def from_state_dict(cls, state: Dict[str, np.ndarray], prefix: str = "probe.") -> "ConvProbe":
        params = {
            name[len(prefix):]: parameter(value, name=name[len(prefix):])
            for name, value in state.items() if name.startswith(prefix)
        }
        if "head.weight" not in params:
            raise ValueError("ConvProbe: state has no probe head")
        return cls(params, params["head.weight"].shape[0])


# ---------------------------------------------------------------- distribution metrics

def kl_divergences(generated: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Per-row KL(p_gen ‖ mean p_ref) with both floored at 1e-12"""
    generated = np.asarray(generated, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if len(generated) == 0 or len(reference) == 0:
        raise ValueError("kl_score: generated and reference sets must be non-empty")
    p = np.maximum(generated, PROB_FLOOR)
    q = np.maximum(reference.mean(axis=0), PROB_FLOOR)
    return np.maximum((p * (np.log(p) - np.log(q))).sum(axis=1), 0.0)


def kl_score(probe: ProbeClassifier, generated: np.ndarray, reference: np.ndarray) -> Tuple[float, float]:
    """(mean, population std) of KL over the generated set"""
    if len(generated) == 0 or len(reference) == 0:
        raise ValueError("kl_score: generated and reference sets must be non-empty")
    kl = kl_divergences(probe.predict(generated), probe.predict(reference))
    return float(kl.mean()), float(kl.std())


def topk_from_distributions(probs: np.ndarray, labels: Sequence[int], k: int) -> float:
    """Ties resolve toward the lower class index"""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = probs.shape[1]
    if not 1 <= k <= classes:
        raise ValueError(f"topk_accuracy: k={k} must lie in [1, {classes}]")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"topk_accuracy: label out of range [0, {classes})")
    if len(probs) == 0:
        return 0.0
    ranked = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(ranked == labels[:, None], axis=1)))


def topk_accuracy(probe: ProbeClassifier, generated: np.ndarray, labels: Sequence[int], k: int) -> float:
    return topk_from_distributions(probe.predict(generated), labels, k)


# ---------------------------------------------------------------- reports

def _format(value) -> str:
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def write_metric_rows(path: str, rows: Iterable[MetricRow]) -> None:
    """Append rows; the header is written only when the file is new or empty"""
    write_header = not os.path.exists(path) or os.path.getsize(path) == 0
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "a", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if write_header:
            writer.writerow(METRIC_COLUMNS)
        for row in rows:
            data = row.model_dump()
            writer.writerow([_format(data[column]) for column in METRIC_COLUMNS])


def read_metric_rows(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))
