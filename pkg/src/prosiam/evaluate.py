"""Verification scoring and rank metrics.

A long-utterance pair is scored by drawing sub-pairs of short-utterance
embeddings, computing their distances, and averaging the distances that
lie within two standard deviations of the mean. Smaller is more genuine.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import DEVICE_ORDER, Device
from .model import VerifierWeights

TRIM_RULE = "mean of sub-pair distances within [mu - 2 sigma, mu + 2 sigma]"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class PairScore:
    a: str
    b: str
    distance: float
    label: str = "unknown"  # genuine | impostor | unknown

    def __post_init__(self):
        if not (math.isfinite(self.distance) and self.distance >= 0):
            raise ValueError(f"invalid distance {self.distance}")
        if self.label not in ("genuine", "impostor", "unknown"):
            raise ValueError(f"invalid label {self.label!r}")


@dataclass
class RocCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray


@dataclass
class Protocol:
    n_subpairs: int = 500
    seed: int = 0
    replacement: bool = True
    symmetric: bool = False
    # "fc8": verification embedding; "fc7": CNN-only embedding
    embedding: str = "fc8"
    # 0 scores every cross-utterance pair, otherwise a seeded sample of this many
    max_pairs: int = 0
    device_pair: tuple | None = None
    # "all", "same" (both sides on one device) or "cross"
    device_match: str = "all"

    def __post_init__(self):
        if self.device_match not in ("all", "same", "cross"):
            raise ValueError("device_match must be 'all', 'same' or 'cross'")
        if self.n_subpairs < 1:
            raise ValueError("n_subpairs must be >= 1")
        if self.embedding not in ("fc8", "fc7"):
            raise ValueError("embedding must be 'fc8' or 'fc7'")
        if self.max_pairs < 0:
            raise ValueError("max_pairs must be >= 0")
        if self.device_pair is not None:
            if len(self.device_pair) != 2:
                raise ValueError("device_pair needs two devices")
            self.device_pair = tuple(sorted((Device(d) for d in self.device_pair),
                                            key=DEVICE_ORDER.get))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["device_pair"] = None if self.device_pair is None else [x.value for x in self.device_pair]
        d["trim"] = TRIM_RULE
        return d


# ---------------------------------------------------------------- scoring


def trimmed_mean(distances) -> float:
    """Mean of the values within two (population) standard deviations of the mean."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise EvaluationError("no distances to average")
    mu = d.mean()
    sigma = d.std()
    keep = d[(d >= mu - 2 * sigma) & (d <= mu + 2 * sigma)]
    return float(keep.mean()) if keep.size else float(mu)


def _subpair_indices(na: int, nb: int, n: int, rng, replacement: bool):
    if replacement:
        return rng.integers(0, na, size=n), rng.integers(0, nb, size=n)
    flat = rng.choice(na * nb, size=min(n, na * nb), replace=False)
    return flat // nb, flat % nb


def score_embeddings(ea: np.ndarray, eb: np.ndarray, n_subpairs: int = 500, seed=0,
                     replacement: bool = True) -> float:
    """Trimmed-mean distance between two sets of short-utterance embeddings."""
    ea = np.asarray(ea, dtype=np.float64)
    eb = np.asarray(eb, dtype=np.float64)
    if len(ea) == 0 or len(eb) == 0:
        raise EvaluationError("utterance too short for any 3 s window")
    rng = np.random.default_rng(seed)
    ia, ib = _subpair_indices(len(ea), len(eb), n_subpairs, rng, replacement)
    d = np.sqrt(((ea[ia] - eb[ib]) ** 2).sum(axis=1))
    return trimmed_mean(d)


def embed_utterance(feat, weights: VerifierWeights, tower: int = 0, embedding: str = "fc8",
                    batch_size: int = 32) -> np.ndarray:
    """Inference-mode embeddings of every grid window of one utterance."""
    t = weights.tower_a if tower == 0 else weights.tower_b
    x = feat.grid_windows()
    pv = np.broadcast_to(feat.prosody, (len(x), feat.prosody.size))
    out = []
    for i in range(0, len(x), batch_size):
        if embedding == "fc7":
            out.append(t.cnn_forward(x[i:i + batch_size]))
        else:
            out.append(t.embed(x[i:i + batch_size], pv[i:i + batch_size]))
    return np.concatenate(out).astype(np.float64)


def _towers(weights: VerifierWeights, feat_a, feat_b) -> tuple[int, int]:
    """Tower per side: the lower-order device goes through tower A when unshared."""
    if weights.tower_a is weights.tower_b:
        return 0, 0
    return (1, 0) if feat_a.device_order > feat_b.device_order else (0, 1)


def score_pair(utt_a, utt_b, weights: VerifierWeights, n_subpairs: int = 500, seed=0,
               symmetric: bool = False, replacement: bool = True,
               embedding: str = "fc8", cache: dict | None = None) -> PairScore:
    """Score two utterances (``UtteranceFeatures``) with the trimmed-mean protocol."""
    cache = {} if cache is None else cache

    def emb(feat, tower):
        key = (feat.utterance_id, tower, embedding)
        if key not in cache:
            cache[key] = embed_utterance(feat, weights, tower, embedding)
        return cache[key]

    ta, tb = _towers(weights, utt_a, utt_b)
    ea, eb = emb(utt_a, ta), emb(utt_b, tb)
    dist = score_embeddings(ea, eb, n_subpairs, seed, replacement)
    if symmetric:
        dist = 0.5 * (dist + score_embeddings(eb, ea, n_subpairs, seed, replacement))
    if utt_a.speaker_id and utt_b.speaker_id:
        label = "genuine" if utt_a.speaker_id == utt_b.speaker_id else "impostor"
    else:
        label = "unknown"
    return PairScore(utt_a.utterance_id, utt_b.utterance_id, dist, label)


# ---------------------------------------------------------------- metrics


def compute_roc(genuine, impostor) -> RocCurve:
    """Exact empirical FAR (impostor < t) and FRR (genuine >= t) at every distinct score."""
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    if g.size == 0 or i.size == 0:
        raise EvaluationError("need at least one genuine and one impostor distance")
    t = np.concatenate([[-np.inf], np.unique(np.concatenate([g, i])), [np.inf]])
    far = np.searchsorted(i, t, side="left") / i.size
    frr = (g.size - np.searchsorted(g, t, side="left")) / g.size
    return RocCurve(t, far, frr)


def _crossing(curve: RocCurve) -> tuple[int, float]:
    diff = curve.far - curve.frr
    k = int(np.argmax(diff >= 0))  # diff is -1 at -inf and +1 at +inf
    if diff[k] == 0:
        return k, 0.0
    return k, float(-diff[k - 1] / (diff[k] - diff[k - 1]))


def compute_eer(curve: RocCurve) -> float:
    """FAR = FRR point, linearly interpolated between the bracketing thresholds."""
    k, alpha = _crossing(curve)
    if alpha == 0.0:
        return float(curve.far[k])
    return float(curve.far[k - 1] + alpha * (curve.far[k] - curve.far[k - 1]))


def eer_threshold(curve: RocCurve) -> float:
    """Distance threshold at the EER crossing (finite whenever any score is)."""
    k, alpha = _crossing(curve)
    t = curve.thresholds
    if alpha == 0.0:
        lo, hi = t[k - 1], t[k]
        if np.isfinite(lo) and np.isfinite(hi):
            return float(0.5 * (lo + hi))
        return float(hi if np.isfinite(hi) else lo)
    lo, hi = t[k - 1], t[k]
    if not np.isfinite(lo):
        return float(hi)
    if not np.isfinite(hi):
        return float(lo)
    return float(lo + alpha * (hi - lo))


def compute_auc(curve: RocCurve) -> float:
    """Trapezoidal area under TPR (= 1 - FRR) against FPR (= FAR)."""
    return float(np.trapezoid(1.0 - curve.frr, curve.far))


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    eer: float
    auc: float
    n_genuine: int
    n_impostor: int
    protocol: dict
    threshold: float
    per_device_pair: dict = field(default_factory=dict)
    roc: RocCurve | None = None
    scores: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"eer": self.eer, "auc": self.auc, "n_genuine": self.n_genuine,
                "n_impostor": self.n_impostor, "protocol": self.protocol,
                "threshold": self.threshold, "per_device_pair": self.per_device_pair}

    def write_json(self, path, extra: dict | None = None) -> None:
        d = {**self.to_dict(), **(extra or {})}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_roc_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("threshold", "far", "frr"))
            for t, fa, fr in zip(self.roc.thresholds, self.roc.far, self.roc.frr):
                w.writerow((_fmt(t), repr(float(fa)), repr(float(fr))))


def _fmt(t: float) -> str:
    if np.isinf(t):
        return "inf" if t > 0 else "-inf"
    return repr(float(t))


def _summary(scores) -> dict | None:
    g = [s.distance for s in scores if s.label == "genuine"]
    i = [s.distance for s in scores if s.label == "impostor"]
    if not g or not i:
        return None
    roc = compute_roc(g, i)
    return {"eer": compute_eer(roc), "auc": compute_auc(roc), "n_genuine": len(g),
            "n_impostor": len(i)}


def select_pairs(feats, protocol: Protocol) -> list[tuple[int, int]]:
    """Cross-utterance index pairs (i < j) in manifest order, filtered and sampled."""
    pairs = []
    for i in range(len(feats)):
        for j in range(i + 1, len(feats)):
            same = feats[i].device == feats[j].device
            if (protocol.device_match == "same" and not same
                    or protocol.device_match == "cross" and same):
                continue
            if protocol.device_pair is not None:
                devs = tuple(sorted((feats[i].device, feats[j].device), key=DEVICE_ORDER.get))
                if devs != protocol.device_pair:
                    continue
            pairs.append((i, j))
    if protocol.max_pairs and len(pairs) > protocol.max_pairs:
        rng = np.random.default_rng([protocol.seed, 1])
        keep = np.sort(rng.choice(len(pairs), size=protocol.max_pairs, replace=False))
        pairs = [pairs[k] for k in keep]
    return pairs


def evaluate(feats, weights: VerifierWeights, protocol: Protocol | None = None,
             jobs: int = 1) -> EvalReport:
    """Score all selected pairs and report EER, AUC, ROC and per-device-pair metrics."""
    protocol = protocol or Protocol()
    pairs = select_pairs(feats, protocol)
    if not pairs:
        raise EvaluationError("no pairs match the selection")
    cache: dict = {}
    needed = sorted({(k, t) for i, j in pairs
                     for k, t in zip((i, j), _towers(weights, feats[i], feats[j]))})
    for k, t in needed:
        cache[(feats[k].utterance_id, t, protocol.embedding)] = embed_utterance(
            feats[k], weights, t, protocol.embedding)

    def score(ij):
        i, j = ij
        return score_pair(feats[i], feats[j], weights, protocol.n_subpairs,
                          [protocol.seed, i, j], protocol.symmetric, protocol.replacement,
                          protocol.embedding, cache)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(score, pairs))
    else:
        scores = [score(p) for p in pairs]
    g = [s.distance for s in scores if s.label == "genuine"]
    imp = [s.distance for s in scores if s.label == "impostor"]
    if not g or not imp:
        raise EvaluationError("selection has no genuine or no impostor pairs")
    roc = compute_roc(g, imp)
    groups: dict = {}
    for (i, j), s in zip(pairs, scores):
        devs = sorted((feats[i].device, feats[j].device), key=DEVICE_ORDER.get)
        groups.setdefault(",".join(d.value for d in devs), []).append(s)
    per_dev = {k: v for k, v in ((k, _summary(s)) for k, s in sorted(groups.items()))
               if v is not None}
    return EvalReport(compute_eer(roc), compute_auc(roc), len(g), len(imp), protocol.to_dict(),
                      eer_threshold(roc), per_dev, roc, scores)
