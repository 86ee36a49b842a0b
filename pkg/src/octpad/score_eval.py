"""PAD score fusion and biometric error metrics.

Scores follow the convention s = P(Bonafide): higher means more live.  A
patch score is the classifier's softmax probability for the Bonafide class;
B-scan and instance scores are means over seeded random subsamples of the
available patches (B-scan: up to ``n_bscan`` patches; instance: up to
``m_bscans`` B-scans times ``n_instance`` patches each).  Sampling is
without replacement and falls back to "use everything" when fewer items are
available than requested.

Decision rule for the error metrics: classify PA iff s < t.  FPR(t) is the
fraction of Bonafide scores below t (live fingers falsely rejected), FNR(t)
the fraction of PA scores at or above t (attacks falsely accepted).  The
DET curve walks t over the sorted distinct scores plus one sentinel beyond
each end, so FPR is nondecreasing and FNR nonincreasing in t.  EER is the
crossing of the two rates (midpoint of the closest pair when they never
meet exactly), HTER the mean of the two rates at an externally supplied
threshold, AUC the probability a Bonafide outscores a PA with ties counted
half.

Inputs with no detectable foreground score 0.0 (maximally PA-like): a
presentation without internal structure is treated as attack-indicative.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dual_branch import IsapadNet
from .errors import ConfigError, DomainError, InsufficientGroupsError, NoForegroundError
from .oct_core import BScan, Label, Manifest, ManifestEntry, OctVolume, get_bscan
from .patch_extract import ExtractionConfig, extract_patches


@dataclass(frozen=True)
class ScoreConfig:
    n_bscan: int = 10  # patches sampled per B-scan for the B-scan score
    n_instance: int = 2  # patches per sampled B-scan for the instance score
    m_bscans: int = 10  # B-scans sampled per instance
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.n_bscan, self.n_instance, self.m_bscans) < 1:
            raise ConfigError("all sampling counts must be >= 1")


@dataclass(frozen=True)
class ScoreSet:
    bona_scores: tuple[float, ...]
    pa_scores: tuple[float, ...]

    def __post_init__(self) -> None:
        for s in list(self.bona_scores) + list(self.pa_scores):
            if not 0.0 <= s <= 1.0:
                raise DomainError(f"score {s} outside [0, 1]")

    def require_both(self) -> None:
        if not self.bona_scores or not self.pa_scores:
            raise DomainError("metrics need at least one score on each side")


# ---------------------------------------------------------------------------
# model-driven scoring
# ---------------------------------------------------------------------------

def _score_batch(net: IsapadNet, images: list[np.ndarray], batch_size: int = 16) -> np.ndarray:
    """Softmax Bonafide probability for each (256, 256) image."""
    net.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = images[i : i + batch_size]
            x = torch.stack(
                [torch.from_numpy(np.array(im, dtype=np.float32)) for im in chunk]
            ).unsqueeze(1)
            probs = torch.softmax(net(x), dim=1)
            out.append(probs[:, 1].numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def patch_score(net: IsapadNet, patch: np.ndarray) -> float:
    """Bonafide probability of one patch."""
    return float(_score_batch(net, [np.asarray(patch)])[0])


def _sample(rng: np.random.Generator, n_avail: int, n_want: int) -> np.ndarray:
    """Without replacement; short inputs are used whole (in index order)."""
    if n_avail <= n_want:
        return np.arange(n_avail)
    return np.sort(rng.choice(n_avail, size=n_want, replace=False))


def bscan_score(
    net: IsapadNet,
    bscan: BScan,
    ext_cfg: ExtractionConfig = ExtractionConfig(),
    score_cfg: ScoreConfig = ScoreConfig(),
    rng: np.random.Generator | None = None,
) -> float:
    """Mean Bonafide probability over up to ``n_bscan`` sampled patches."""
    if rng is None:
        rng = np.random.default_rng(score_cfg.seed)
    patches = extract_patches(bscan, ext_cfg)
    if not patches:
        raise NoForegroundError("B-scan produced no foreground patches")
    keep = _sample(rng, len(patches), score_cfg.n_bscan)
    scores = _score_batch(net, [patches[i].data for i in keep])
    return float(scores.mean())


def instance_score(
    net: IsapadNet,
    vol: OctVolume,
    ext_cfg: ExtractionConfig = ExtractionConfig(),
    score_cfg: ScoreConfig = ScoreConfig(),
    rng: np.random.Generator | None = None,
) -> float:
    """Mean Bonafide probability over patches pooled from sampled B-scans.

    Up to ``m_bscans`` B-scans are drawn, then up to ``n_instance`` patches
    from each; the score is the mean over all collected patch scores.
    """
    if rng is None:
        rng = np.random.default_rng(score_cfg.seed)
    ys = _sample(rng, vol.n_bscans, score_cfg.m_bscans)
    images: list[np.ndarray] = []
    for y in ys:
        patches = extract_patches(get_bscan(vol, int(y)), ext_cfg)
        if not patches:
            continue
        keep = _sample(rng, len(patches), score_cfg.n_instance)
        images.extend(patches[i].data for i in keep)
    if not images:
        raise NoForegroundError("every sampled B-scan produced zero patches")
    return float(_score_batch(net, images).mean())


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetPoint:
    threshold: float
    fpr: float
    fnr: float


def _rates(scores: ScoreSet, t: float) -> tuple[float, float]:
    bona = np.asarray(scores.bona_scores)
    pa = np.asarray(scores.pa_scores)
    fpr = int((bona < t).sum()) / len(bona)
    fnr = int((pa >= t).sum()) / len(pa)
    return fpr, fnr


def det_curve(scores: ScoreSet) -> list[DetPoint]:
    """DET points over the sorted distinct scores plus sentinels beyond both ends."""
    scores.require_both()
    all_scores = np.concatenate([scores.bona_scores, scores.pa_scores])
    distinct = np.unique(all_scores)
    thresholds = np.concatenate([[distinct[0] - 1.0], distinct, [distinct[-1] + 1.0]])
    return [DetPoint(float(t), *_rates(scores, float(t))) for t in thresholds]


def eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold along the DET point set.

    At an exact FPR = FNR crossing that value is returned; otherwise the
    midpoint (FPR + FNR) / 2 at the point minimizing |FPR - FNR| (smallest
    threshold on ties).
    """
    points = det_curve(scores)
    best = min(points, key=lambda p: (abs(p.fpr - p.fnr), p.threshold))
    return (best.fpr + best.fnr) / 2.0, best.threshold


def hter(scores: ScoreSet, threshold: float) -> float:
    """(FPR + FNR) / 2 at an externally chosen threshold (protocol: the EER
    threshold of a validation fold applied to the test fold)."""
    scores.require_both()
    if not np.isfinite(threshold):
        raise DomainError("threshold must be finite")
    fpr, fnr = _rates(scores, threshold)
    return (fpr + fnr) / 2.0


def auc(scores: ScoreSet) -> float:
    """P(bona > pa) + 0.5 * P(bona == pa) by pairwise comparison."""
    scores.require_both()
    bona = np.asarray(scores.bona_scores)[:, None]
    pa = np.asarray(scores.pa_scores)[None, :]
    wins = int((bona > pa).sum())
    ties = int((bona == pa).sum())
    return (2 * wins + ties) / (2 * len(scores.bona_scores) * len(scores.pa_scores))


# ---------------------------------------------------------------------------
# grouped cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    train: tuple[ManifestEntry, ...]
    test: tuple[ManifestEntry, ...]


def crossval_folds(manifest: Manifest, k: int = 3, seed: int = 0) -> list[Fold]:
    """Group-disjoint folds: PA materials and Bonafide subjects are each
    shuffled (seeded) and dealt round-robin into k groups; fold i tests on
    group i and trains on the rest, so no material or subject ever appears
    on both sides of a fold."""
    materials = sorted({e.meta.material for e in manifest.entries if e.meta.label is Label.PA})
    subjects = sorted(
        {e.meta.subject_id for e in manifest.entries if e.meta.label is Label.BONAFIDE}
    )
    if len(materials) < k or len(subjects) < k:
        raise InsufficientGroupsError(
            f"need >= {k} PA materials and Bonafide subjects, got "
            f"{len(materials)} materials / {len(subjects)} subjects"
        )
    rng = np.random.default_rng(seed)
    materials = [materials[i] for i in rng.permutation(len(materials))]
    subjects = [subjects[i] for i in rng.permutation(len(subjects))]
    mat_group = {m: i % k for i, m in enumerate(materials)}
    subj_group = {s: i % k for i, s in enumerate(subjects)}

    folds = []
    for i in range(k):
        test, train = [], []
        for e in manifest.entries:
            if e.meta.label is Label.PA:
                group = mat_group[e.meta.material]
            else:
                group = subj_group[e.meta.subject_id]
            (test if group == i else train).append(e)
        folds.append(Fold(train=tuple(train), test=tuple(test)))
    return folds


# ---------------------------------------------------------------------------
# reports and CSV I/O
# ---------------------------------------------------------------------------

def metrics_report(scores: ScoreSet, threshold: float | None = None, fold: int = -1) -> dict:
    """EER/HTER/AUC summary; HTER uses ``threshold`` when given, else the
    set's own EER threshold."""
    eer_value, eer_thr = eer(scores)
    t = eer_thr if threshold is None else threshold
    return {
        "eer": eer_value,
        "hter": hter(scores, t),
        "auc": auc(scores),
        "n_bona": len(scores.bona_scores),
        "n_pa": len(scores.pa_scores),
        "fold": fold,
    }


def write_det_csv(points: list[DetPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "fpr", "fnr"])
        for p in points:
            w.writerow([f"{p.threshold:.8f}", f"{p.fpr:.8f}", f"{p.fnr:.8f}"])


def write_scores_csv(rows: list[tuple[str, str, float]], path: str | Path) -> None:
    """Rows of (sample_id, label, score)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "label", "score"])
        for sample_id, label, score in rows:
            w.writerow([sample_id, label, f"{score:.8f}"])


def read_scores_csv(path: str | Path) -> list[tuple[str, str, float]]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.append((row["sample_id"], row["label"], float(row["score"])))
    return rows


def score_set_from_rows(rows: list[tuple[str, str, float]]) -> ScoreSet:
    bona = tuple(s for _, label, s in rows if label == Label.BONAFIDE.value)
    pa = tuple(s for _, label, s in rows if label == Label.PA.value)
    return ScoreSet(bona_scores=bona, pa_scores=pa)


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2))
