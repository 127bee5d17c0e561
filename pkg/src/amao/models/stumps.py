"""Byte-feature surrogate classifier: boosted decision stumps over 4-gram
counts plus image statistics.

Features per sample: counts of the top-F byte 4-grams (frequency-ranked over
the training corpus), the payload byte mean and variance, and per-row means
of the image fitted to a fixed square.  The booster is one-vs-rest AdaBoost
with depth-1 stumps (the stump budget is split evenly across classes);
prediction takes the class with the largest boosted score.  Training and
prediction are deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..image import GrayImage
from .common import LabeledSample, pad_crop

ROW_STAT_SIDE = 32


class UnknownClassError(ValueError):
    pass


@dataclass(frozen=True)
class Stump:
    """h(x) = polarity if x[feature] <= threshold else -polarity."""

    cls: int
    feature: int
    threshold: float
    polarity: int  # +1 or -1
    alpha: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        side = np.where(x[:, self.feature] <= self.threshold, 1, -1)
        return self.polarity * side


@dataclass
class SurrogateParams:
    ngram_vocab: list[bytes]
    stumps: list[Stump]
    n_classes: int
    row_side: int = ROW_STAT_SIDE

    @property
    def n_features(self) -> int:
        return len(self.ngram_vocab) + 2 + self.row_side


def _count_ngrams(data: bytes, n: int = 4) -> dict[bytes, int]:
    counts: dict[bytes, int] = {}
    for i in range(len(data) - n + 1):
        g = data[i : i + n]
        counts[g] = counts.get(g, 0) + 1
    return counts


def build_ngram_vocab(samples: list[LabeledSample], top: int = 500) -> list[bytes]:
    """Top 4-grams by total corpus count; ties broken lexicographically."""
    total: dict[bytes, int] = {}
    for s in samples:
        for g, c in _count_ngrams(s.bytes).items():
            total[g] = total.get(g, 0) + c
    ranked = sorted(total.items(), key=lambda kv: (-kv[1], kv[0]))
    return [g for g, _ in ranked[:top]]


def feature_vector(params: SurrogateParams, data: bytes, image: GrayImage) -> np.ndarray:
    counts = _count_ngrams(data)
    ngram = [counts.get(g, 0) for g in params.ngram_vocab]
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.float64)
    stats = [arr.mean(), arr.var()]
    square = pad_crop(image.pixels, params.row_side).astype(np.float64)
    return np.concatenate([np.array(ngram, dtype=np.float64), stats, square.mean(axis=1)])


def features_matrix(params: SurrogateParams, samples: list[LabeledSample]) -> np.ndarray:
    return np.stack([feature_vector(params, s.bytes, s.image) for s in samples])


def _best_binary_stump(x: np.ndarray, y: np.ndarray, w: np.ndarray,
                       orders: np.ndarray) -> tuple[int, float, int, float]:
    """(feature, threshold, polarity, error) minimizing weighted binary error.
    y is +-1.  Deterministic tie-breaking by feature index then position."""
    n, d = x.shape
    wy_pos = w * (y > 0)
    wy_neg = w * (y < 0)
    total_pos = wy_pos.sum()
    best = (np.inf, 0, 0.0, 1)
    for j in range(d):
        order = orders[:, j]
        sv = x[order, j]
        cuts = np.nonzero(sv[:-1] < sv[1:])[0]
        if len(cuts) == 0:
            continue
        cp = wy_pos[order].cumsum()
        cn = wy_neg[order].cumsum()
        # polarity +1: predict + on (x <= thr); error = neg_left + pos_right
        err_plus = cn[cuts] + (total_pos - cp[cuts])
        err_minus = 1.0 - err_plus  # weights are normalized to sum 1
        k_plus = int(err_plus.argmin())
        k_minus = int(err_minus.argmin())
        for err, k, pol in ((float(err_plus[k_plus]), k_plus, 1),
                            (float(err_minus[k_minus]), k_minus, -1)):
            if err < best[0] - 1e-15:
                cut = cuts[k]
                thr = 0.5 * (sv[cut] + sv[cut + 1])
                best = (err, j, float(thr), pol)
    err, j, thr, pol = best
    if not np.isfinite(err):
        # no splittable feature at all: constant majority vote
        maj = 1 if total_pos >= 0.5 else -1
        return 0, np.inf, maj, float(min(total_pos, 1.0 - total_pos))
    return j, thr, pol, err


def train_surrogate(data: list[LabeledSample], rounds: int = 200, top_ngrams: int = 500,
                    seed: int = 0) -> SurrogateParams:
    """Fit one-vs-rest boosted stumps; ``rounds`` is the total stump budget."""
    labels = np.array([s.label for s in data])
    n_classes = int(labels.max()) + 1
    params = SurrogateParams(build_ngram_vocab(data, top_ngrams), [], n_classes)
    x = features_matrix(params, data)
    n = len(data)
    orders = np.argsort(x, axis=0, kind="stable")
    per_class = max(1, rounds // n_classes)
    for cls in range(n_classes):
        y = np.where(labels == cls, 1.0, -1.0)
        w = np.full(n, 1.0 / n)
        for _ in range(per_class):
            j, thr, pol, err = _best_binary_stump(x, y, w, orders)
            err = min(max(err, 1e-12), 0.5 - 1e-12) if err < 0.5 else err
            if err >= 0.5:
                break  # no edge left
            alpha = 0.5 * float(np.log((1.0 - err) / err))
            stump = Stump(cls, j, thr, pol, alpha)
            params.stumps.append(stump)
            margin = y * stump.predict(x)
            w = w * np.exp(-alpha * margin)
            w /= w.sum()
    if not params.stumps:
        raise ValueError("boosting produced no usable stump")
    return params


def _scores(params: SurrogateParams, x: np.ndarray) -> np.ndarray:
    scores = np.zeros((x.shape[0], params.n_classes))
    for stump in params.stumps:
        scores[:, stump.cls] += stump.alpha * stump.predict(x)
    return scores


def predict(params: SurrogateParams, sample: LabeledSample,
            check_label: bool = True) -> tuple[int, np.ndarray]:
    """(label, probability vector) for one sample.  Rejects samples whose
    true class was never trained."""
    if check_label and sample.label >= params.n_classes:
        raise UnknownClassError(f"class {sample.label} unseen at training time")
    x = feature_vector(params, sample.bytes, sample.image)[None, :]
    scores = _scores(params, x)[0]
    z = scores - scores.max()
    e = np.exp(z)
    probs = e / e.sum()
    return int(scores.argmax()), probs


def predict_bytes(params: SurrogateParams, data: bytes, image: GrayImage) -> int:
    x = feature_vector(params, data, image)[None, :]
    return int(_scores(params, x)[0].argmax())


def evaluate(params: SurrogateParams, samples: list[LabeledSample]) -> float:
    preds = [predict(params, s)[0] for s in samples]
    return float(np.mean([p == s.label for p, s in zip(preds, samples)]))


def save_surrogate(params: SurrogateParams, path: str) -> None:
    doc = {
        "version": 2,
        "n_classes": params.n_classes,
        "row_side": params.row_side,
        "ngram_vocab": [g.hex() for g in params.ngram_vocab],
        "stumps": [
            [s.cls, s.feature, s.threshold, s.polarity, s.alpha]
            for s in params.stumps
        ],
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh)


def load_surrogate(path: str) -> SurrogateParams:
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("version") != 2:
        raise ValueError(f"{path}: unsupported surrogate version")
    return SurrogateParams(
        ngram_vocab=[bytes.fromhex(g) for g in doc["ngram_vocab"]],
        stumps=[Stump(int(c), int(f), float(t), int(p), float(a))
                for c, f, t, p, a in doc["stumps"]],
        n_classes=int(doc["n_classes"]),
        row_side=int(doc["row_side"]),
    )
