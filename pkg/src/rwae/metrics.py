"""Disentanglement metrics and exact checks of the information identities.

* swap-based style transfer and the classifier-based content error,
* equal error rate over cosine scores of averaged latent features,
* exact enumeration of KL(Q(Z) || P(Z)) = E_x KL(q(.|x) || P(Z)) - I(X; Z)
  on finite spaces.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import SequenceDataset
from .errors import ConfigurationError, InvalidArgumentError

MIN_CLASSIFIER_ACCURACY = 0.95


# swapping ----------------------------------------------------------------------------


def _as_batch(x) -> tuple[Tensor, bool]:
    x = torch.as_tensor(x)
    if x.dim() == 4:
        return x.unsqueeze(0), True
    if x.dim() == 5:
        return x, False
    raise InvalidArgumentError(f"expected (T, C, H, W) or (B, T, C, H, W), got {tuple(x.shape)}")


def _dtype_of(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def swap_generate(model, x_a, x_b) -> tuple[Tensor, Tensor]:
    """Decode (content of A, motion of B) and (content of B, motion of A).

    Posterior means are used throughout. With an action variable, the action
    travels with the motion codes.
    """
    xa, single = _as_batch(x_a)
    xb, _ = _as_batch(x_b)
    if xa.shape != xb.shape:
        raise InvalidArgumentError(f"sequences must have equal shape, got {tuple(xa.shape)} and {tuple(xb.shape)}")
    dtype = _dtype_of(model)
    ea = model.encode(xa.to(dtype), sample=False)
    eb = model.encode(xb.to(dtype), sample=False)
    x_ab = model.decode(ea["z_c"], eb["z_m"], model.action_code(eb["z_m"]))
    x_ba = model.decode(eb["z_c"], ea["z_m"], model.action_code(ea["z_m"]))
    if single:
        return x_ab[0], x_ba[0]
    return x_ab, x_ba


@torch.no_grad()
def reconstruct(model, x) -> Tensor:
    xb, single = _as_batch(x)
    out = model.reconstruct(xb.to(_dtype_of(model)))
    return out[0] if single else out


# frame classifier ------------------------------------------------------------------


class FrameClassifier(nn.Module):
    """Small convolutional classifier of single frames."""

    def __init__(self, frame_shape, n_classes: int):
        super().__init__()
        c, h, w = frame_shape
        self.net = nn.Sequential(
            nn.Conv2d(c, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(32 * (h // 4) * (w // 4), 64),
            nn.ReLU(),
            nn.Linear(64, n_classes),
        )

    def forward(self, frames: Tensor) -> Tensor:
        return self.net(frames)


def _frames_and_labels(ds: SequenceDataset) -> tuple[Tensor, Tensor]:
    if ds.content is None:
        raise InvalidArgumentError("dataset has no content labels")
    n, t = ds.frames.shape[:2]
    frames = torch.from_numpy(ds.frames.reshape(n * t, *ds.frames.shape[2:]))
    labels = torch.from_numpy(np.repeat(ds.content.astype(np.int64), t))
    return frames, labels


def train_frame_classifier(
    ds: SequenceDataset,
    epochs: int = 3,
    batch_size: int = 128,
    lr: float = 1e-3,
    seed: int = 0,
    min_steps: int = 600,
) -> FrameClassifier:
    """Fit a shape classifier on every frame of ``ds``.

    Small datasets get extra epochs so that at least ``min_steps`` updates run.
    """
    torch.manual_seed(seed)
    frames, labels = _frames_and_labels(ds)
    clf = FrameClassifier(ds.frame_shape, max(len(ds.shape_names), int(labels.max()) + 1))
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    per_epoch = -(-len(labels) // batch_size)
    epochs = max(epochs, -(-min_steps // per_epoch))
    for _ in range(epochs):
        order = torch.from_numpy(rng.permutation(len(labels)))
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            loss = F.cross_entropy(clf(frames[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return clf.eval()


@torch.no_grad()
def frame_accuracy(clf: FrameClassifier, ds: SequenceDataset) -> float:
    frames, labels = _frames_and_labels(ds)
    preds = torch.cat([clf(frames[i : i + 1024]).argmax(-1) for i in range(0, len(frames), 1024)])
    return float((preds == labels).float().mean())


@torch.no_grad()
def classify_sequences(clf: FrameClassifier, seqs: Tensor) -> Tensor:
    """One label per sequence from the frame-averaged logits."""
    b, t = seqs.shape[:2]
    logits = clf(seqs.reshape(b * t, *seqs.shape[2:]).float()).view(b, t, -1)
    return logits.mean(1).argmax(-1)


def _sample_actions(model, n: int, generator: torch.Generator, dtype) -> Tensor | None:
    if not getattr(model, "n_actions", 0):
        return None
    idx = torch.randint(model.n_actions, (n,), generator=generator)
    return F.one_hot(idx, model.n_actions).to(dtype)


@torch.no_grad()
def swap_disentanglement_error(
    model,
    ds: SequenceDataset,
    clf: FrameClassifier,
    seed: int = 0,
    batch_size: int = 256,
    min_accuracy: float = MIN_CLASSIFIER_ACCURACY,
) -> float:
    """Content classification error (percent) after resampling motion from the prior.

    Each test sequence keeps its encoded content code; its motion codes are
    replaced by an unconditional rollout of the learned prior.
    """
    acc = frame_accuracy(clf, ds)
    if acc < min_accuracy:
        raise ConfigurationError(f"frame classifier accuracy {acc:.4f} is below the required {min_accuracy}")
    gen = torch.Generator().manual_seed(seed)
    dtype = _dtype_of(model)
    correct = 0
    for i in range(0, len(ds), batch_size):
        x = torch.from_numpy(ds.frames[i : i + batch_size]).to(dtype)
        z_c = model.encode(x, sample=False)["z_c"]
        a = _sample_actions(model, x.shape[0], gen, dtype)
        z_m = model.prior_rollout(x.shape[0], x.shape[1], gen, a)
        gen_frames = model.decode(z_c, z_m, a)
        preds = classify_sequences(clf, gen_frames).numpy()
        correct += int((preds == ds.content[i : i + batch_size]).sum())
    return 100.0 * (1.0 - correct / len(ds))


@torch.no_grad()
def reconstruction_mse(model, ds: SequenceDataset, batch_size: int = 256) -> float:
    """Per-pixel mean squared error of posterior-mean reconstructions."""
    dtype = _dtype_of(model)
    total = 0.0
    for i in range(0, len(ds), batch_size):
        x = torch.from_numpy(ds.frames[i : i + batch_size]).to(dtype)
        total += float((model.reconstruct(x) - x).pow(2).sum())
    return total / ds.frames.size


def best_permutation_accuracy(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Accuracy of ``pred`` against ``labels`` under the best relabelling of predicted classes."""
    pred, labels = np.asarray(pred, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape or pred.size == 0:
        raise InvalidArgumentError("need equally many predictions and labels, at least one")
    k = max(n_classes, int(pred.max()) + 1, int(labels.max()) + 1)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (pred, labels), 1)
    best = max(int(conf[np.arange(k), list(p)].sum()) for p in itertools.permutations(range(k)))
    return float(best / len(labels))


@torch.no_grad()
def action_accuracy(model, ds: SequenceDataset, batch_size: int = 256) -> float:
    """Agreement of argmax q(a | z_m) with the motion labels, up to relabelling."""
    if ds.motion is None:
        raise InvalidArgumentError("dataset has no motion labels")
    dtype = _dtype_of(model)
    preds = []
    for i in range(0, len(ds), batch_size):
        x = torch.from_numpy(ds.frames[i : i + batch_size]).to(dtype)
        z_m = model.encode(x, sample=False)["z_m"]
        preds.append(model.infer_action(z_m).argmax(-1).numpy())
    return best_permutation_accuracy(np.concatenate(preds), ds.motion, model.n_actions)


# identity features and EER -----------------------------------------------------------


@dataclass
class ScorePairSet:
    same_scores: np.ndarray
    diff_scores: np.ndarray


@torch.no_grad()
def latent_identity_features(model, groups: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Average posterior means per group of sequences.

    Returns ``(mu_c, mu_m)`` of shapes (G, d_c) and (G, d_m); ``mu_m`` also
    averages over time.
    """
    dtype = _dtype_of(model)
    mu_c, mu_m = [], []
    for g in groups:
        x = torch.as_tensor(np.asarray(g)).to(dtype)
        if x.dim() != 5 or x.shape[0] < 1:
            raise InvalidArgumentError("every group needs at least one (T, C, H, W) sequence")
        enc = model.encode(x, sample=False)
        mu_c.append(enc["static"].mean.mean(0).numpy())
        mu_m.append(enc["dynamic"].mean.mean((0, 1)).numpy())
    return np.stack(mu_c), np.stack(mu_m)


def cosine_trials(features: np.ndarray, identities: Sequence[int]) -> ScorePairSet:
    """Cosine similarity for every unordered pair of feature rows."""
    f = np.asarray(features, dtype=np.float64)
    f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    ids = np.asarray(identities)
    i, j = np.triu_indices(len(f), k=1)
    scores = (f[i] * f[j]).sum(1)
    same = ids[i] == ids[j]
    return ScorePairSet(scores[same], scores[~same])


def equal_error_rate(same_scores, diff_scores) -> float:
    """EER of accept-if-score >= threshold over thresholds at the observed scores.

    At the threshold minimizing |FRR - FAR| (lowest such threshold on ties)
    the midpoint (FRR + FAR) / 2 is returned.
    """
    same = np.sort(np.asarray(same_scores, dtype=np.float64).ravel())
    diff = np.sort(np.asarray(diff_scores, dtype=np.float64).ravel())
    if same.size == 0 or diff.size == 0:
        raise InvalidArgumentError("EER needs non-empty same and diff score lists")
    thresholds = np.unique(np.concatenate([same, diff]))
    false_rej = np.searchsorted(same, thresholds, side="left")  # same < thr
    false_acc = diff.size - np.searchsorted(diff, thresholds, side="left")  # diff >= thr
    # integer cross-multiplied comparison avoids float ties
    gap = np.abs(false_rej * diff.size - false_acc * same.size)
    k = int(np.argmin(gap))
    frr = false_rej[k] / same.size
    far = false_acc[k] / diff.size
    return float((frr + far) / 2.0)


def identity_groups(ds: SequenceDataset, labels: np.ndarray, group_size: int, seed: int = 0):
    """Split sequences into groups of ``group_size`` sharing one label."""
    rng = np.random.default_rng(seed)
    groups, ids = [], []
    for lab in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == lab))
        for k in range(len(idx) // group_size):
            groups.append(ds.frames[np.sort(idx[k * group_size : (k + 1) * group_size])])
            ids.append(int(lab))
    return groups, ids


# exact discrete identities -------------------------------------------------------------


@dataclass
class DiscreteJoint:
    p_x: np.ndarray
    q_z_given_x: np.ndarray
    p_z: np.ndarray

    def validate(self, atol: float = 1e-12) -> None:
        p_x, q, p_z = (np.asarray(a, dtype=np.float64) for a in (self.p_x, self.q_z_given_x, self.p_z))
        if q.ndim != 2 or p_x.shape != (q.shape[0],) or p_z.shape != (q.shape[1],):
            raise InvalidArgumentError("shapes must be p_x (X,), q (X, Z), p_z (Z,)")
        for name, arr in (("p_x", p_x), ("q_z_given_x", q), ("p_z", p_z)):
            if (arr < 0).any():
                raise InvalidArgumentError(f"{name} has negative entries")
        if abs(p_x.sum() - 1) > atol or abs(p_z.sum() - 1) > atol or (np.abs(q.sum(1) - 1) > atol).any():
            raise InvalidArgumentError("probability vectors and rows must sum to 1")


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    mask = p > 0
    out[mask] = p[mask] * np.log(p[mask] / q[mask])
    return out


def verify_mi_bounds_discrete(j: DiscreteJoint, atol: float = 1e-12) -> dict:
    """Enumerate both sides of KL(Q(Z) || P(Z)) = E_x[KL(q(.|x) || P(Z))] - I(X; Z).

    Returns ``lhs``, ``rhs``, ``mi``, ``expected_kl`` and ``gap = lhs - rhs``.
    """
    j.validate(atol)
    p_x = np.asarray(j.p_x, dtype=np.float64)
    q = np.asarray(j.q_z_given_x, dtype=np.float64)
    p_z = np.asarray(j.p_z, dtype=np.float64)
    q_z = p_x @ q
    joint = p_x[:, None] * q
    if ((q_z > 0) & (p_z <= 0)).any() or ((joint > 0) & (p_z[None, :] <= 0)).any():
        raise InvalidArgumentError("prior P(Z) must be positive wherever the encoder puts mass")

    lhs = float(_xlogy_ratio(q_z, p_z).sum())
    expected_kl = float((p_x * _xlogy_ratio(q, np.broadcast_to(p_z, q.shape)).sum(1)).sum())
    mi = float((p_x[:, None] * _xlogy_ratio(q, np.broadcast_to(q_z, q.shape))).sum())
    rhs = expected_kl - mi
    return {"lhs": lhs, "rhs": rhs, "mi": mi, "expected_kl": expected_kl, "gap": lhs - rhs}


def verify_conditional_mi_bounds_discrete(
    p_xh: np.ndarray, q_z_given_xh: np.ndarray, p_z_given_h: np.ndarray, atol: float = 1e-12
) -> list[dict]:
    """The same identity conditioned on a discrete history variable.

    Args:
        p_xh: Joint (X, H) over inputs and histories.
        q_z_given_xh: Encoder (X, H, Z).
        p_z_given_h: Prior (H, Z).

    Returns one report per history value with positive probability, each
    carrying the history weight ``p_h``.
    """
    p_xh = np.asarray(p_xh, dtype=np.float64)
    q = np.asarray(q_z_given_xh, dtype=np.float64)
    p_zh = np.asarray(p_z_given_h, dtype=np.float64)
    reports = []
    for h in range(p_xh.shape[1]):
        p_h = p_xh[:, h].sum()
        if p_h <= 0:
            continue
        rep = verify_mi_bounds_discrete(DiscreteJoint(p_xh[:, h] / p_h, q[:, h, :], p_zh[h]), atol=1e-9)
        rep["p_h"] = float(p_h)
        reports.append(rep)
    return reports


# report -----------------------------------------------------------------------------------


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def write_report(records: list[dict], path, cfg_hash: str) -> None:
    """One tab-separated line per metric: name, value, sample count, config hash."""
    lines = ["metric\tvalue\tn\tconfig_hash"]
    for r in records:
        lines.append(f"{r['metric']}\t{float(r['value'])!r}\t{r['n']}\t{cfg_hash}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> list[dict]:
    rows = Path(path).read_text(encoding="utf-8").strip().split("\n")[1:]
    out = []
    for row in rows:
        name, value, n, h = row.split("\t")
        out.append({"metric": name, "value": float(value), "n": int(n), "config_hash": h})
    return out


def evaluate(
    model, test: SequenceDataset, clf: FrameClassifier, seed: int = 0, group_size: int = 4
) -> tuple[list[dict], dict]:
    """All evaluation records for a trained model, plus the raw EER trial scores."""
    records = [
        {"metric": "swap_error_pct", "value": swap_disentanglement_error(model, test, clf, seed), "n": len(test)},
    ]
    scores = {}
    for name, labels in (("content", test.content), ("motion", test.motion)):
        groups, ids = identity_groups(test, labels, group_size, seed)
        mu_c, mu_m = latent_identity_features(model, groups)
        feats = mu_c if name == "content" else mu_m
        trials = cosine_trials(feats, ids)
        scores[name] = trials
        records.append(
            {
                "metric": f"eer_{name}",
                "value": equal_error_rate(trials.same_scores, trials.diff_scores),
                "n": int(trials.same_scores.size + trials.diff_scores.size),
            }
        )
    records.append({"metric": "recon_mse", "value": reconstruction_mse(model, test), "n": len(test)})
    if getattr(model, "n_actions", 0) and test.motion is not None:
        records.append({"metric": "action_accuracy", "value": action_accuracy(model, test), "n": len(test)})
    return records, scores
