"""Ground-truth-free hallucination classifier.

A small convolutional backbone, pre-trained as the encoder half of a frame
autoencoder on negative (acceptable) frames and then frozen, embeds every
frame of a cycle sequence. Independent voting heads, each a temporal
convolution over the cycle axis followed by dense layers, emit per-head
hallucination probabilities; the ensemble confidence score is their mean.
Head diversity comes from per-head seeds and bootstrap resamples of the
training sequences.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator

from .arrayio import load_arrays, save_arrays
from .patches import check_stack
from .seeding import substream, torch_seed
from .translate import DivergenceError, set_determinism


class EnsembleError(ValueError):
    pass


class FrameEncoder(nn.Module):
    """Two-stage conv pyramid pooled to per-channel mean and spread.

    Statistics are taken from an early (half-resolution) stage and a late
    (eighth-resolution) stage; the early half keeps the embedding sensitive
    to fine texture and sharpness, which deep-stage-only pooling washes
    out, while the late half carries layout and palette.
    """

    def __init__(self, feature_dim: int = 64):
        super().__init__()
        if feature_dim % 4 != 0:
            raise EnsembleError("feature_dim must be divisible by 4 (two mean+spread stages)")
        c = feature_dim // 4
        self.early = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.1),
        )
        self.late = nn.Sequential(
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.1),
        )

    def forward(self, x):
        a = self.early(x)
        b = self.late(a)
        feats = []
        for maps in (a, b):
            feats.append(maps.mean(dim=(2, 3)))
            feats.append(torch.sqrt(maps.var(dim=(2, 3), unbiased=False) + 1e-8))
        return torch.cat(feats, dim=1)


class FrameDecoder(nn.Module):
    def __init__(self, feature_dim: int, tile_size: int):
        super().__init__()
        if tile_size % 8 != 0:
            raise EnsembleError("tile size must be divisible by 8 for the autoencoder")
        self.base = tile_size // 8
        c = feature_dim // 2
        self.channels = c
        self.expand = nn.Linear(feature_dim, c * self.base * self.base)
        def up(cin, cout):
            return [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.1)]
        self.net = nn.Sequential(
            *up(c, 16), *up(16, 8),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(8, 3, 3, padding=1),
        )
        nn.init.constant_(self.net[-1].bias, 0.5)

    def forward(self, z, clamp: bool = True):
        x = self.expand(z).reshape(-1, self.channels, self.base, self.base)
        out = self.net(x)
        return torch.clamp(out, 0.0, 1.0) if clamp else out


def _frames_to_torch(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 3, 1, 2)))


@dataclass
class Backbone:
    """Frozen frame encoder weights."""

    weights: dict
    feature_dim: int = 64
    recon_loss: float = float("nan")

    def __post_init__(self):
        self._net = None

    def _module(self) -> FrameEncoder:
        if self._net is None:
            net = FrameEncoder(self.feature_dim)
            net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.weights.items()})
            net.eval()
            self._net = net
        return self._net

    def encode_stack(self, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Embed frames (N,H,W,3) -> features (N, feature_dim)."""
        frames = check_stack(frames, "he")
        net = self._module()
        outs = []
        with torch.no_grad():
            for start in range(0, frames.shape[0], batch_size):
                xb = _frames_to_torch(frames[start : start + batch_size])
                outs.append(net(xb).numpy())
        return np.concatenate(outs, axis=0)

    def encode_sequences(self, seqs: np.ndarray) -> np.ndarray:
        """Embed sequences (N,T,H,W,3) -> features (N,T,feature_dim)."""
        n, t = seqs.shape[:2]
        flat = seqs.reshape(n * t, *seqs.shape[2:])
        return self.encode_stack(flat).reshape(n, t, self.feature_dim)

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        save_arrays(
            path,
            {f"w/{k}": v for k, v in self.weights.items()},
            meta={
                "feature_dim": self.feature_dim,
                "recon_loss": self.recon_loss,
                "weight_hash": self.weight_hash(),
            },
        )

    @classmethod
    def load(cls, path) -> "Backbone":
        arrays, meta = load_arrays(path)
        weights = {k[2:]: v.astype(np.float32) for k, v in arrays.items() if k.startswith("w/")}
        return cls(weights=weights, feature_dim=int(meta["feature_dim"]),
                   recon_loss=float(meta["recon_loss"]))


def pretrain_backbone(
    neg_frames: np.ndarray,
    feature_dim: int = 64,
    epochs: int = 12,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    threads: int = 2,
) -> tuple[Backbone, list]:
    """Train the frame autoencoder on negative frames; freeze the encoder.

    Returns the frozen backbone and the per-epoch reconstruction losses.
    """
    neg_frames = check_stack(neg_frames, "he")
    set_determinism(threads)
    torch.manual_seed(torch_seed(seed, "backbone-init"))
    encoder = FrameEncoder(feature_dim)
    decoder = FrameDecoder(feature_dim, neg_frames.shape[1])
    opt = torch.optim.Adam(list(encoder.parameters()) + list(decoder.parameters()), lr=lr)
    order_rng = substream(seed, "backbone-order")
    xt = _frames_to_torch(neg_frames)
    n = neg_frames.shape[0]
    with torch.no_grad():  # untrained baseline, epoch 0
        base = 0.0
        for start in range(0, n, batch_size):
            xb = xt[start : start + batch_size]
            base += float((decoder(encoder(xb)) - xb).abs().sum())
        base /= n * neg_frames[0].size
    history = [{"epoch": 0, "recon_loss": base}]
    for epoch in range(1, epochs + 1):
        perm = order_rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(perm[start : start + batch_size].copy())
            xb = xt[idx]
            recon = decoder(encoder(xb), clamp=False)
            loss = (recon - xb).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = float(loss.detach())
            if not np.isfinite(value):
                raise DivergenceError(epoch)
            total += value
            batches += 1
        history.append({"epoch": epoch, "recon_loss": total / batches})
    encoder.eval()
    weights = {k: v.detach().numpy().copy() for k, v in encoder.state_dict().items()}
    recon = history[-1]["recon_loss"] if history else float("nan")
    return Backbone(weights=weights, feature_dim=feature_dim, recon_loss=recon), history


def untrained_backbone(feature_dim: int = 64, seed: int = 0, threads: int = 2) -> Backbone:
    """Randomly initialised encoder, used as the pre-training baseline."""
    set_determinism(threads)
    torch.manual_seed(torch_seed(seed, "backbone-init"))
    encoder = FrameEncoder(feature_dim)
    weights = {k: v.detach().numpy().copy() for k, v in encoder.state_dict().items()}
    return Backbone(weights=weights, feature_dim=feature_dim)


class VotingHeadNet(nn.Module):
    """Temporal conv over the cycle axis, pooled, then two dense layers."""

    def __init__(self, feature_dim: int = 64, hidden: int = 32):
        super().__init__()
        self.temporal = nn.Conv1d(feature_dim, hidden, kernel_size=3, padding=1)
        self.act = nn.LeakyReLU(0.1)
        self.fc1 = nn.Linear(hidden, 16)
        self.fc2 = nn.Linear(16, 1)

    def forward(self, feats):
        # feats: N x T x F
        x = self.act(self.temporal(feats.transpose(1, 2)))
        x = x.mean(dim=2)
        x = self.act(self.fc1(x))
        return self.fc2(x).squeeze(1)


@dataclass
class VotingHead:
    weights: dict
    head_seed: int
    bootstrap_indices: list
    trained_cycles: int
    feature_dim: int = 64
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None

    def __post_init__(self):
        self._net = None

    def _module(self) -> VotingHeadNet:
        if self._net is None:
            net = VotingHeadNet(self.feature_dim)
            net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.weights.items()})
            net.eval()
            self._net = net
        return self._net

    def _standardize(self, features: np.ndarray) -> np.ndarray:
        out = features.astype(np.float32)
        if self.feature_mean is not None:
            out = (out - self.feature_mean) / self.feature_scale
        return out

    def score_features(self, features: np.ndarray) -> np.ndarray:
        """Hallucination probability per sequence, from features (N,T,F).

        The logit is capped at +/-8 before the sigmoid so probabilities
        stay strictly inside (0, 1) instead of saturating to exact 0/1 in
        floating point.
        """
        if features.shape[1] != self.trained_cycles:
            raise EnsembleError(
                f"head trained for {self.trained_cycles} cycles, got {features.shape[1]}"
            )
        net = self._module()
        with torch.no_grad():
            logits = net(torch.from_numpy(self._standardize(features))).numpy()
        logits = np.clip(logits.astype(np.float64), -8.0, 8.0)
        return 1.0 / (1.0 + np.exp(-logits))

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()


def train_heads(
    features: np.ndarray,
    labels: np.ndarray,
    num_heads: int = 4,
    seed: int = 0,
    epochs: int = 300,
    lr: float = 1e-2,
    label_smoothing: float = 0.04,
    threads: int = 2,
) -> list:
    """Train ``num_heads`` voting heads on frozen sequence features.

    Each head draws its own class-balanced bootstrap resample and torch
    seed, so heads differ even on identical data. Targets are smoothed
    (``label_smoothing``) so converged heads keep a finite logit scale and
    borderline inputs land mid-range instead of saturating. ``labels``:
    1 = hallucinated (positive), 0 = acceptable.
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels).astype(np.float32).ravel()
    if features.ndim != 3:
        raise EnsembleError("features must be N x T x F")
    if features.shape[0] != labels.size:
        raise EnsembleError("features and labels must align")
    if num_heads < 1:
        raise EnsembleError("num_heads must be >= 1")
    classes = np.unique(labels)
    if classes.size < 2:
        raise EnsembleError("head training needs both classes present")
    set_determinism(threads)
    n = features.shape[0]
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    # shared standardisation fitted on the full training features; head
    # diversity comes from bootstraps and seeds, not from the scaler
    flat = features.reshape(-1, features.shape[2]).astype(np.float64)
    feat_mean = flat.mean(axis=0).astype(np.float32)
    feat_scale = (flat.std(axis=0) + 1e-8).astype(np.float32)
    standardized = ((features - feat_mean) / feat_scale).astype(np.float32)
    heads = []
    loss_fn = nn.BCEWithLogitsLoss()
    for head_idx in range(num_heads):
        rng = substream(seed, "head-bootstrap", head_idx)
        boot = np.concatenate(
            [
                pos_idx[rng.integers(0, pos_idx.size, size=(n + 1) // 2)],
                neg_idx[rng.integers(0, neg_idx.size, size=n // 2)],
            ]
        )
        torch.manual_seed(torch_seed(seed, "head-init", head_idx))
        net = VotingHeadNet(features.shape[2])
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        xb = torch.from_numpy(standardized[boot])
        smooth = float(label_smoothing)
        yb = torch.from_numpy(labels[boot] * (1.0 - 2.0 * smooth) + smooth).float()
        for epoch in range(epochs):
            logits = net(xb)
            loss = loss_fn(logits, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not np.isfinite(float(loss.detach())):
                raise DivergenceError(epoch)
        net.eval()
        heads.append(
            VotingHead(
                weights={k: v.detach().numpy().copy() for k, v in net.state_dict().items()},
                head_seed=head_idx,
                bootstrap_indices=boot.tolist(),
                trained_cycles=features.shape[1],
                feature_dim=features.shape[2],
                feature_mean=feat_mean,
                feature_scale=feat_scale,
            )
        )
    return heads


def save_heads(heads: list, path) -> None:
    arrays = {}
    meta = {"num_heads": len(heads), "heads": []}
    for i, head in enumerate(heads):
        for k, v in head.weights.items():
            arrays[f"h{i}/{k}"] = v
        if head.feature_mean is not None:
            arrays[f"h{i}/feature_mean"] = head.feature_mean
            arrays[f"h{i}/feature_scale"] = head.feature_scale
        meta["heads"].append(
            {
                "head_seed": head.head_seed,
                "bootstrap_indices": head.bootstrap_indices,
                "trained_cycles": head.trained_cycles,
                "feature_dim": head.feature_dim,
            }
        )
    save_arrays(path, arrays, meta=meta)


def load_heads(path) -> list:
    arrays, meta = load_arrays(path)
    heads = []
    for i, info in enumerate(meta["heads"]):
        prefix = f"h{i}/"
        weights = {
            k[len(prefix):]: v.astype(np.float32)
            for k, v in arrays.items()
            if k.startswith(prefix) and not k.endswith(("feature_mean", "feature_scale"))
        }
        mean = arrays.get(f"h{i}/feature_mean")
        scale = arrays.get(f"h{i}/feature_scale")
        heads.append(
            VotingHead(
                weights=weights,
                head_seed=int(info["head_seed"]),
                bootstrap_indices=list(info["bootstrap_indices"]),
                trained_cycles=int(info["trained_cycles"]),
                feature_dim=int(info["feature_dim"]),
                feature_mean=None if mean is None else mean.astype(np.float32),
                feature_scale=None if scale is None else scale.astype(np.float32),
            )
        )
    return heads


@dataclass
class ScoreRecord:
    """Per-image ensemble output plus provenance."""

    tile_id: str
    per_head_scores: list
    mean_score: float
    label_true: str = ""  # "positive", "negative" or "" when unknown
    source_ckpt_id: str = ""
    vs_ckpt_id: str = ""
    vaf_ckpt_id: str = ""
    num_cycles: int = 0
    num_heads: int = 0

    def __post_init__(self):
        expected = float(np.mean(self.per_head_scores))
        if abs(expected - self.mean_score) > 1e-9:
            raise EnsembleError("mean_score must be the arithmetic mean of per-head scores")
        if self.num_heads == 0:
            self.num_heads = len(self.per_head_scores)


def score_features(features: np.ndarray, heads: list) -> tuple[np.ndarray, np.ndarray]:
    """Per-head scores (N, C) and their arithmetic mean (N,)."""
    if not heads:
        raise EnsembleError("no voting heads given")
    per_head = np.stack([h.score_features(features) for h in heads], axis=1)
    return per_head, per_head.mean(axis=1)


def majority_fraction(per_head: np.ndarray) -> np.ndarray:
    """Fraction of heads voting positive (score >= 0.5); the hard-vote mode."""
    return (per_head >= 0.5).mean(axis=1)


def classify(record: ScoreRecord, alpha: float) -> str:
    """Image verdict: reject iff mean score >= alpha (ties reject)."""
    if not 0.0 <= alpha <= 1.0:
        raise EnsembleError("alpha must lie in [0, 1]")
    return "reject" if record.mean_score >= alpha else "accept"


class CycleEnsembleClassifier(BaseEstimator):
    """sklearn-style wrapper around the backbone + voting-head ensemble.

    ``fit`` expects cycle sequences (N, T, H, W, 3) and binary labels
    (1 = hallucinated). The backbone is pre-trained on the negative
    sequences only, then frozen before the heads are trained.
    """

    def __init__(
        self,
        num_heads: int = 4,
        feature_dim: int = 64,
        backbone_epochs: int = 12,
        backbone_lr: float = 1e-3,
        backbone_batch: int = 16,
        head_epochs: int = 300,
        head_lr: float = 1e-2,
        combine: str = "mean",
        seed: int = 0,
        threads: int = 2,
    ):
        self.num_heads = num_heads
        self.feature_dim = feature_dim
        self.backbone_epochs = backbone_epochs
        self.backbone_lr = backbone_lr
        self.backbone_batch = backbone_batch
        self.head_epochs = head_epochs
        self.head_lr = head_lr
        self.combine = combine
        self.seed = seed
        self.threads = threads

    def fit(self, sequences, y):
        sequences = np.asarray(sequences, dtype=np.float32)
        y = np.asarray(y).astype(int).ravel()
        if sequences.ndim != 5:
            raise EnsembleError("sequences must be N x T x H x W x 3")
        if self.combine not in ("mean", "majority"):
            raise EnsembleError("combine must be 'mean' or 'majority'")
        neg = sequences[y == 0]
        if neg.shape[0] == 0:
            raise EnsembleError("backbone pre-training needs negative sequences")
        neg_frames = neg.reshape(-1, *sequences.shape[2:])
        self.backbone_, self.backbone_history_ = pretrain_backbone(
            neg_frames,
            feature_dim=self.feature_dim,
            epochs=self.backbone_epochs,
            lr=self.backbone_lr,
            batch_size=self.backbone_batch,
            seed=self.seed,
            threads=self.threads,
        )
        self.backbone_hash_ = self.backbone_.weight_hash()
        feats = self.backbone_.encode_sequences(sequences)
        self.heads_ = train_heads(
            feats,
            y,
            num_heads=self.num_heads,
            seed=self.seed,
            epochs=self.head_epochs,
            lr=self.head_lr,
            threads=self.threads,
        )
        self.num_cycles_ = sequences.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "heads_"):
            raise EnsembleError("classifier is not fitted")

    def decision_scores(self, sequences) -> np.ndarray:
        """Ensemble score per sequence (mean or majority fraction)."""
        self._check_fitted()
        sequences = np.asarray(sequences, dtype=np.float32)
        feats = self.backbone_.encode_sequences(sequences)
        per_head, mean = score_features(feats, self.heads_)
        return majority_fraction(per_head) if self.combine == "majority" else mean

    def predict_proba(self, sequences) -> np.ndarray:
        scores = self.decision_scores(sequences)
        return np.stack([1.0 - scores, scores], axis=1)

    def predict(self, sequences, alpha: float = 0.5) -> np.ndarray:
        """1 (reject as hallucinated) iff ensemble score >= alpha."""
        return (self.decision_scores(sequences) >= alpha).astype(int)
