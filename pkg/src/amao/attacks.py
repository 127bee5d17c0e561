"""Adversarial target generation and the closed insertion loop.

The attacks perturb images (single-step sign attacks, an iterative penalty
attack, per-class shared noise) to produce *non-executable* byte targets.
The closed loop then makes them real: extend the program's image with
insertion room, perturb, quantize to a target byte string, align the program
against it with semantic nops, reassemble, and check the re-imaged executable
against the victim classifiers; repeat with fresh per-sample noise until the
executable evades or the loop budget runs out.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .align import apply_trace, align, make_problem
from .image import GrayImage, WidthPolicy, bytes_to_image, image_to_bytes
from .isa import ByteProgram, SemanticNop
from .models.cnn import TinyCnnParams, batch_input_grad, predict as cnn_predict, predict_proba as predict_proba_cnn
from .models.common import model_input
from .models.stumps import SurrogateParams, predict_bytes as stump_predict


@dataclass
class AttackConfig:
    epsilon: float = 1500.0  # L2 budget in raw pixel units
    fgsm_step: float = 24.0
    cw_c: float = 1e-7
    cw_steps: int = 100
    cw_lr: float = 1e5  # raw pixel units; CE gradients per pixel are ~1e-5
    target_class: int | None = None
    max_loops: int = 10
    seed: int = 0
    growth: float = 1.25  # target-length factor giving the aligner room
    init_sigma: float = 2.0

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_loops < 1:
            raise ValueError("max_loops must be >= 1")


@dataclass
class AdversarialImage:
    """x' = clamp(x + noise); the L2 perturbation norm stays under epsilon."""

    base: GrayImage
    noise: np.ndarray
    perturbed: np.ndarray
    l2: float

    def quantized(self) -> GrayImage:
        pixels = np.clip(np.rint(self.perturbed), 0, 255).astype(np.uint8)
        flat = pixels.reshape(-1)
        flat[self.base.payload_len :] = 0  # padding is not payload
        return GrayImage(self.base.width, self.base.height, flat, self.base.payload_len)


def _bounded(base_pixels: np.ndarray, delta: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Clamp to pixel range and rescale so the realized L2 norm is < epsilon."""
    norm = float(np.linalg.norm(delta))
    if norm >= epsilon:
        delta = delta * ((epsilon * 0.999) / norm)
    perturbed = np.clip(base_pixels + delta, 0.0, 255.0)
    realized = perturbed - base_pixels
    return perturbed, realized, float(np.linalg.norm(realized))


def _embedded_grad(model: TinyCnnParams, pixels: np.ndarray, cls: int) -> np.ndarray:
    """Loss gradient w.r.t. raw pixels at the image's own geometry."""
    x = model_input(pixels, model.input_side)[None, ...]
    onehot = np.zeros((1, model.n_classes))
    onehot[0, cls] = 1.0
    _, dx = batch_input_grad(model, x, onehot)
    g = dx[0] / 255.0
    h, w = pixels.shape
    out = np.zeros((h, w))
    hh, ww = min(h, model.input_side), min(w, model.input_side)
    out[:hh, :ww] = g[:hh, :ww]
    return out


def fgsm(model: TinyCnnParams, image: GrayImage, label: int, cfg: AttackConfig) -> AdversarialImage:
    """Single sign-of-gradient step; targeted when cfg.target_class is set."""
    base = image.pixels.astype(np.float64)
    if cfg.target_class is not None:
        g = _embedded_grad(model, base, cfg.target_class)
        delta = -cfg.fgsm_step * np.sign(g)
    else:
        g = _embedded_grad(model, base, label)
        delta = cfg.fgsm_step * np.sign(g)
    perturbed, realized, l2 = _bounded(base, delta, cfg.epsilon)
    return AdversarialImage(image, realized, perturbed, l2)


def _cnn_label(model: TinyCnnParams, pixels: np.ndarray) -> int:
    return int(cnn_predict(model, np.stack([model_input(pixels, model.input_side)]))[0])


def _evades(model: TinyCnnParams, pixels: np.ndarray, label: int, target: int | None) -> bool:
    pred = _cnn_label(model, pixels)
    return pred == target if target is not None else pred != label


def cw_l2(model: TinyCnnParams, image: GrayImage, label: int, cfg: AttackConfig,
          rng: np.random.Generator | None = None) -> AdversarialImage:
    """Iterative penalty attack: descend loss(x+d, y or y') + c*|d|^2 from a
    Gaussian start, keeping the best evading (else best-loss) perturbation."""
    adv, _ = _optimize_noise(model, [image], label, cfg, rng)
    return adv


def per_class_noise(model: TinyCnnParams, class_samples: list[GrayImage], label: int,
                    cfg: AttackConfig, rng: np.random.Generator | None = None,
                    method: str = "cw") -> np.ndarray:
    """One shared noise field for a class, optimized jointly over its samples.

    method "cw" runs the penalty attack on the whole set at once (a one-image
    class degenerates to cw_l2); "fgsm" takes a single averaged sign step.
    Returns the noise at the model-input geometry.
    """
    if not class_samples:
        raise ValueError("need at least one class sample")
    rng = rng or np.random.default_rng(cfg.seed)
    if method == "fgsm":
        side = model.input_side
        target = cfg.target_class
        acc = np.zeros((side, side))
        for img in class_samples:
            x = model_input(img.pixels, side)[None, ...]
            onehot = np.zeros((1, model.n_classes))
            onehot[0, target if target is not None else label] = 1.0
            _, dx = batch_input_grad(model, x, onehot)
            acc += dx[0] / 255.0
        sign = np.sign(acc / len(class_samples))
        delta = (cfg.fgsm_step if target is None else -cfg.fgsm_step) * sign
        delta += rng.normal(0.0, cfg.init_sigma * 0.1, size=delta.shape)
        norm = float(np.linalg.norm(delta))
        if norm >= cfg.epsilon:
            delta *= (cfg.epsilon * 0.999) / norm
        return delta
    _, canvas = _optimize_noise(model, class_samples, label, cfg, rng)
    return canvas


def _optimize_noise(model: TinyCnnParams, images: list[GrayImage], label: int,
                    cfg: AttackConfig, rng: np.random.Generator | None) -> tuple[AdversarialImage, np.ndarray]:
    """Shared optimizer behind cw_l2 / per_class_noise: one noise canvas at
    model geometry, gradient-descended over all given images jointly.

    Keeps the most *confidently* misclassified point seen inside the epsilon
    ball (largest margin past the boundary), since the downstream insertion
    step can only approximate the target and needs slack to stay across.
    """
    rng = rng or np.random.default_rng(cfg.seed)
    side = model.input_side
    target = cfg.target_class
    cls = target if target is not None else label
    sign = 1.0 if target is not None else -1.0  # minimize CE(target) or -CE(true)

    bases = [img.pixels.astype(np.float64) for img in images]
    embedded = np.stack([model_input(b, side) for b in bases]) * 255.0
    onehot = np.zeros((len(images), model.n_classes))
    onehot[:, cls] = 1.0

    def margin(dlt: np.ndarray) -> float:
        probs = predict_proba_cnn(model, np.clip(embedded + dlt[None, ...], 0.0, 255.0) / 255.0)
        if target is not None:
            others = probs.copy()
            others[:, target] = -np.inf
            return float((probs[:, target] - others.max(axis=1)).mean())
        others = probs.copy()
        others[:, label] = -np.inf
        return float((others.max(axis=1) - probs[:, label]).mean())

    delta = rng.normal(0.0, cfg.init_sigma, size=(side, side))
    best = (margin(delta), delta.copy())
    for _ in range(cfg.cw_steps):
        x = np.clip(embedded + delta[None, ...], 0.0, 255.0) / 255.0
        _, dx = batch_input_grad(model, x, onehot)
        g = sign * dx.sum(axis=0) / 255.0 + 2.0 * cfg.cw_c * delta
        delta = delta - cfg.cw_lr * g
        norm = float(np.linalg.norm(delta))
        if norm >= cfg.epsilon:
            delta *= (cfg.epsilon * 0.999) / norm
        m = margin(delta)
        if m > best[0]:
            best = (m, delta.copy())
    delta = best[1]

    base0 = bases[0]
    h, w = base0.shape
    realized_delta = np.zeros((h, w))
    hh, ww = min(h, side), min(w, side)
    realized_delta[:hh, :ww] = delta[:hh, :ww]
    perturbed, realized, l2 = _bounded(base0, realized_delta, cfg.epsilon)
    return AdversarialImage(images[0], realized, perturbed, l2), delta


# -- closed loop --------------------------------------------------------------

Victim = TinyCnnParams | SurrogateParams


def classify(model: Victim, data: bytes, image: GrayImage) -> int:
    if isinstance(model, TinyCnnParams):
        return _cnn_label(model, image.pixels)
    return stump_predict(model, data, image)


def _misclassified(model: Victim, data: bytes, image: GrayImage, label: int,
                   target: int | None) -> bool:
    pred = classify(model, data, image)
    return pred == target if target is not None else pred != label


@dataclass
class LoopResult:
    program: ByteProgram
    appended_target: bytes
    loops: int
    evaded: bool
    distance: float
    predictions: list[int]
    trace: object | None = None  # AlignmentTrace of the returned program
    boundaries: tuple[int, ...] = ()
    history: list = None  # per-loop victim predictions

    def __post_init__(self) -> None:
        if self.history is None:
            self.history = []


def closed_loop(models: list[Victim], prog: ByteProgram, label: int, cfg: AttackConfig,
                vocab: list[SemanticNop], metric: str = "pixel_l2",
                policy: WidthPolicy | None = None,
                class_noise: np.ndarray | None = None,
                rng: np.random.Generator | None = None) -> LoopResult:
    """Drive the generate/align/classify loop until every victim misclassifies.

    The first model must be the differentiable one; it supplies gradients.
    Loop 1 applies the (cheap, generalized) per-class noise when given; later
    loops optimize per-sample noise.  Targets are built over the program's
    image extended with zero rows up to cfg.growth times its byte length, so
    the aligner has trailing room to work with.
    """
    if not models or not isinstance(models[0], TinyCnnParams):
        raise ValueError("first victim must be the differentiable model")
    grad_model = models[0]
    policy = policy or WidthPolicy()
    rng = rng or np.random.default_rng(cfg.seed)
    target = cfg.target_class

    def still_caught(data: bytes, image: GrayImage) -> list[int]:
        return [classify(m, data, image) for m in models]

    base_image = bytes_to_image(prog.text, policy)
    preds = still_caught(prog.text, base_image)
    if _all_evaded(preds, label, target):
        return LoopResult(prog, b"", 0, True, 0.0, preds, history=[list(preds)])

    m = len(prog.text)
    n = max(m, int(round(m * cfg.growth)))
    extended = prog.text + bytes(n - m)

    best: LoopResult | None = None
    best_margin = -np.inf
    steer: int | None = None  # class the realized output drifts toward
    attack_bytes = extended  # point the noise optimization starts from
    history: list[list[int]] = []
    for loop in range(1, cfg.max_loops + 1):
        ext_image = bytes_to_image(attack_bytes + bytes(n - len(attack_bytes)), policy)
        if loop == 1 and class_noise is not None:
            base = ext_image.pixels.astype(np.float64)
            delta = np.zeros_like(base)
            hh = min(base.shape[0], class_noise.shape[0])
            ww = min(base.shape[1], class_noise.shape[1])
            delta[:hh, :ww] = class_noise[:hh, :ww]
            perturbed, realized, l2 = _bounded(base, delta, cfg.epsilon)
            adv = AdversarialImage(ext_image, realized, perturbed, l2)
        else:
            # untargeted noise finds the nearest boundary, which insertion
            # often cannot reach; once the realized output shows which class
            # the nop manifold can express, aim squarely at it
            loop_cfg = cfg
            if target is None and steer is not None and loop % 2 == 1:
                loop_cfg = replace(cfg, target_class=steer)
            adv = cw_l2(grad_model, ext_image, label, loop_cfg, rng)
        target_bytes = image_to_bytes(adv.quantized())

        problem = make_problem(prog, target_bytes, vocab, metric)
        _, trace = align(problem)
        obf = apply_trace(prog, trace)
        obf_image = bytes_to_image(obf.text, policy)
        preds = still_caught(obf.text, obf_image)
        history.append(list(preds))
        result = LoopResult(obf, target_bytes, loop, _all_evaded(preds, label, target),
                            trace.total_cost, preds, trace=trace,
                            boundaries=tuple(problem.boundaries), history=history)
        if result.evaded:
            return result

        # ratchet: next loop perturbs the most adversarial *realized* bytes
        # seen so far, so the noise optimization and the nop projection
        # converge on each other instead of restarting from the original
        probs = predict_proba_cnn(grad_model, np.stack([model_input(obf_image.pixels, grad_model.input_side)]))[0]
        others = probs.copy()
        others[label] = -np.inf
        margin = float(others.max() - probs[label])
        ranked = np.argsort(-probs)
        if margin > best_margin:
            best_margin = margin
            attack_bytes = obf.text
            steer = int(ranked[1] if ranked[0] == label else ranked[0])
        if best is None or _caught_count(preds, label, target) < _caught_count(best.predictions, label, target):
            best = result
    assert best is not None
    return best


def _all_evaded(preds: list[int], label: int, target: int | None) -> bool:
    if target is not None:
        return all(p == target for p in preds)
    return all(p != label for p in preds)


def _caught_count(preds: list[int], label: int, target: int | None) -> int:
    if target is not None:
        return sum(p != target for p in preds)
    return sum(p == label for p in preds)
