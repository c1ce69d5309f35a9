"""Forward (autofluorescence -> stained) and backward (stained ->
autofluorescence) translator networks, their training loop, and checkpoint
handling.

Training follows a step learning-rate schedule on purpose: the high-rate
phase stalls at a mediocre plateau and the post-drop phase converges to a
much lower one, which gives the checkpoint trajectory a clean quality gap
between under-trained and converged snapshots. The ``overfit_subset``
regime instead trains to convergence on a handful of tiles, producing
models that memorise their subset and fail on held-out data.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator

from .arrayio import load_arrays, save_arrays
from .patches import DOMAIN_CHANNELS, Patch, PatchError, check_stack
from .seeding import substream, torch_seed

DIRECTIONS = {
    "af_to_he": ("af", "he"),
    "he_to_af": ("he", "af"),
}

REGIMES = ("full", "overfit_subset")
QUALITY_LABELS = ("good", "poor_early", "poor_overfit")

_determinism_applied = False


class TranslatorError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


def set_determinism(threads: int = 2) -> None:
    """Pin torch to deterministic, fixed-thread execution."""
    global _determinism_applied
    torch.set_num_threads(int(threads))
    if not _determinism_applied:
        torch.use_deterministic_algorithms(True)
        _determinism_applied = True


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.1),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.1),
    )


class TranslatorNet(nn.Module):
    """3-level encoder-decoder with skip connections and a [0,1] clamp."""

    def __init__(self, cin: int, cout: int, channels=(16, 32, 64)):
        super().__init__()
        c1, c2, c3 = channels
        self.enc1 = _block(cin, c1)
        self.enc2 = _block(c1, c2)
        self.bottleneck = _block(c2, c3)
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec2 = _block(c3 + c2, c2)
        self.dec1 = _block(c2 + c1, c1)
        self.head = nn.Conv2d(c1, cout, 1)
        # start outputs mid-range so the clamp does not kill gradients early
        nn.init.constant_(self.head.bias, 0.5)

    def forward(self, x, clamp: bool = True):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        b = self.bottleneck(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up(d2), e1], dim=1))
        out = self.head(d1)
        # the clamp saturates to a zero-gradient trap if trained through,
        # so the training loss sees the raw output instead
        return torch.clamp(out, 0.0, 1.0) if clamp else out


class _PatchDiscriminator(nn.Module):
    """Small conv critic for the optional adversarial loss term."""

    def __init__(self, cin: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, 16, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, 1, 3, stride=2, padding=1),
        )

    def forward(self, x):
        return self.net(x).mean(dim=(1, 2, 3))


def _to_torch(stack: np.ndarray) -> torch.Tensor:
    # N,H,W,C -> N,C,H,W
    return torch.from_numpy(np.ascontiguousarray(stack.transpose(0, 3, 1, 2)))


def _to_numpy(batch: torch.Tensor) -> np.ndarray:
    return batch.detach().permute(0, 2, 3, 1).contiguous().numpy()


@dataclass
class Checkpoint:
    """Weights plus metadata of one translator snapshot."""

    weights: dict
    direction: str
    epoch: int
    train_loss: float
    val_loss: float
    regime: str = "full"
    train_subset_size: int = 0
    seed: int = 0
    quality_label: str = ""
    ckpt_id: str = ""
    channels: tuple = (16, 32, 64)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise TranslatorError(f"unknown direction {self.direction!r}")
        for name, arr in self.weights.items():
            if not np.isfinite(arr).all():
                raise TranslatorError(f"non-finite weights in {name!r}")
        self._net = None

    @property
    def input_domain(self) -> str:
        return DIRECTIONS[self.direction][0]

    @property
    def output_domain(self) -> str:
        return DIRECTIONS[self.direction][1]

    def _module(self) -> TranslatorNet:
        if self._net is None:
            cin = DOMAIN_CHANNELS[self.input_domain]
            cout = DOMAIN_CHANNELS[self.output_domain]
            net = TranslatorNet(cin, cout, self.channels)
            state = {k: torch.from_numpy(v.copy()) for k, v in self.weights.items()}
            net.load_state_dict(state)
            net.eval()
            self._net = net
        return self._net

    def apply_stack(self, stack: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Translate a stack N,H,W,Cin -> N,H,W,Cout (deterministic)."""
        stack = check_stack(stack, self.input_domain)
        net = self._module()
        outs = []
        with torch.no_grad():
            for start in range(0, stack.shape[0], batch_size):
                chunk = _to_torch(stack[start : start + batch_size])
                outs.append(_to_numpy(net(chunk)))
        return np.concatenate(outs, axis=0)

    def apply(self, patch: Patch) -> Patch:
        """Translate a single patch; errors if the domain does not match."""
        if patch.domain != self.input_domain:
            raise PatchError(
                f"checkpoint {self.ckpt_id or self.direction} expects domain "
                f"{self.input_domain!r}, got {patch.domain!r}"
            )
        out = self.apply_stack(patch.pixels[None])[0]
        return Patch(out, self.output_domain, tile_id=patch.tile_id, seed=patch.seed)

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        meta = {
            "direction": self.direction,
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "regime": self.regime,
            "train_subset_size": self.train_subset_size,
            "seed": self.seed,
            "quality_label": self.quality_label,
            "ckpt_id": self.ckpt_id,
            "channels": list(self.channels),
        }
        save_arrays(path, {f"w/{k}": v for k, v in self.weights.items()}, meta=meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = load_arrays(path)
        weights = {k[2:]: v.astype(np.float32) for k, v in arrays.items() if k.startswith("w/")}
        return cls(
            weights=weights,
            direction=meta["direction"],
            epoch=int(meta["epoch"]),
            train_loss=float(meta["train_loss"]),
            val_loss=float(meta["val_loss"]),
            regime=meta.get("regime", "full"),
            train_subset_size=int(meta.get("train_subset_size", 0)),
            seed=int(meta.get("seed", 0)),
            quality_label=meta.get("quality_label", ""),
            ckpt_id=meta.get("ckpt_id", ""),
            channels=tuple(meta.get("channels", (16, 32, 64))),
        )


def label_checkpoint(ckpt: Checkpoint, epoch_min: int, val_max: float) -> str:
    """Quality label from stored metadata only.

    Any checkpoint from the overfit regime is poor_overfit. Full-regime
    checkpoints are good iff they trained at least ``epoch_min`` epochs and
    reached validation loss at most ``val_max``; otherwise poor_early.
    """
    if not np.isfinite(epoch_min) or not np.isfinite(val_max):
        raise TranslatorError("labeling thresholds must be finite")
    if ckpt.regime == "overfit_subset":
        return "poor_overfit"
    if ckpt.epoch >= epoch_min and ckpt.val_loss <= val_max:
        return "good"
    return "poor_early"


class StainTranslator(BaseEstimator):
    """Trainable image translator with an sklearn-style interface.

    ``fit(X, y)`` trains on paired stacks (N,H,W,Cin) -> (N,H,W,Cout) and
    records the full checkpoint trajectory in ``checkpoints_``; ``transform``
    applies the final checkpoint. Training is single-threaded and fully
    seeded, so identical inputs give identical trajectories.
    """

    def __init__(
        self,
        direction: str = "af_to_he",
        epochs: int = 44,
        lr: float = 2e-3,
        batch_size: int = 10,
        cadence: int = 2,
        lr_drop_epoch: int = 20,
        lr_drop_factor: float = 0.1,
        regime: str = "full",
        subset_size: int = 4,
        adv_weight: float = 0.0,
        warmup_epochs: int = 0,
        warmup_blur_sigma: float = 2.5,
        warmup_flatten: float = 0.0,
        val_cadence: int = 1,
        seed: int = 0,
        threads: int = 2,
    ):
        self.direction = direction
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.cadence = cadence
        self.lr_drop_epoch = lr_drop_epoch
        self.lr_drop_factor = lr_drop_factor
        self.regime = regime
        self.subset_size = subset_size
        self.adv_weight = adv_weight
        self.warmup_epochs = warmup_epochs
        self.warmup_blur_sigma = warmup_blur_sigma
        self.warmup_flatten = warmup_flatten
        self.val_cadence = val_cadence
        self.seed = seed
        self.threads = threads

    def _validate(self):
        if self.direction not in DIRECTIONS:
            raise TranslatorError(f"unknown direction {self.direction!r}")
        if self.regime not in REGIMES:
            raise TranslatorError(f"unknown regime {self.regime!r}")
        if self.epochs < 0 or self.cadence < 1 or self.batch_size < 1:
            raise TranslatorError("epochs >= 0, cadence >= 1 and batch_size >= 1 required")

    def _snapshot(self, net, epoch, train_loss, val_loss, subset_size) -> Checkpoint:
        weights = {k: v.detach().numpy().copy() for k, v in net.state_dict().items()}
        return Checkpoint(
            weights=weights,
            direction=self.direction,
            epoch=epoch,
            train_loss=float(train_loss),
            val_loss=float(val_loss),
            regime=self.regime,
            train_subset_size=subset_size,
            seed=self.seed,
            ckpt_id=f"{self.direction}.s{self.seed}.{self.regime}.e{epoch:03d}",
        )

    def fit(self, X, y, X_val=None, y_val=None):
        self._validate()
        set_determinism(self.threads)
        in_dom, out_dom = DIRECTIONS[self.direction]
        X = check_stack(X, in_dom)
        y = check_stack(y, out_dom)
        if X.shape[0] != y.shape[0]:
            raise TranslatorError("X and y must pair up")
        if X_val is None or y_val is None:
            X_val, y_val = X, y
        X_val = check_stack(X_val, in_dom)
        y_val = check_stack(y_val, out_dom)

        if self.regime == "overfit_subset":
            picker = substream(self.seed, "overfit-subset")
            keep = picker.choice(X.shape[0], size=min(self.subset_size, X.shape[0]), replace=False)
            keep = np.sort(keep)
            X, y = X[keep], y[keep]
        subset_size = X.shape[0] if self.regime == "overfit_subset" else 0

        torch.manual_seed(torch_seed(self.seed, "translator-init", self.direction))
        net = TranslatorNet(DOMAIN_CHANNELS[in_dom], DOMAIN_CHANNELS[out_dom])
        critic = None
        critic_opt = None
        if self.adv_weight > 0.0:
            critic = _PatchDiscriminator(DOMAIN_CHANNELS[out_dom])
            critic_opt = torch.optim.Adam(critic.parameters(), lr=self.lr)
        opt = torch.optim.Adam(net.parameters(), lr=self.lr)
        sched = torch.optim.lr_scheduler.MultiStepLR(
            opt, milestones=[self.lr_drop_epoch], gamma=self.lr_drop_factor
        )
        order_rng = substream(self.seed, "batch-order", self.direction)
        xt = _to_torch(X)
        yt = _to_torch(y)
        yt_warm = None
        if self.warmup_epochs > 0:
            # curriculum: the first phase fits low-pass-filtered targets that
            # are also contracted toward the global palette, so early-stopped
            # checkpoints share a distinctly blurry, stain-muted rendering
            # regardless of how far the warmup itself converged
            from scipy import ndimage

            sig = float(self.warmup_blur_sigma)
            warm = ndimage.gaussian_filter(y.astype(np.float64), sigma=(0.0, sig, sig, 0.0))
            if self.warmup_flatten > 0.0:
                palette = warm.mean(axis=(0, 1, 2), keepdims=True)
                warm = palette + (1.0 - self.warmup_flatten) * (warm - palette)
            yt_warm = _to_torch(np.clip(warm, 0.0, 1.0).astype(np.float32))

        self.history_ = []
        self.checkpoints_ = []
        if self.epochs == 0:
            train_loss = self._eval_loss(net, X, y)
            val_loss = self._eval_loss(net, X_val, y_val)
            self.checkpoints_.append(self._snapshot(net, 0, train_loss, val_loss, subset_size))
            self.history_.append({"epoch": 0, "train_loss": train_loss, "val_loss": val_loss})
            return self

        n = X.shape[0]
        bce = nn.BCEWithLogitsLoss()
        for epoch in range(1, self.epochs + 1):
            perm = order_rng.permutation(n)
            net.train()
            total = 0.0
            batches = 0
            targets = yt_warm if (yt_warm is not None and epoch <= self.warmup_epochs) else yt
            for start in range(0, n, self.batch_size):
                idx = torch.from_numpy(perm[start : start + self.batch_size].copy())
                xb, yb = xt[idx], targets[idx]
                pred = net(xb, clamp=False)
                recon = (pred - yb).abs().mean()
                loss = recon
                if critic is not None:
                    # critic update on detached fakes, then generator term
                    critic_opt.zero_grad()
                    d_real = critic(yb)
                    d_fake = critic(pred.detach())
                    d_loss = bce(d_real, torch.ones_like(d_real)) + bce(
                        d_fake, torch.zeros_like(d_fake)
                    )
                    d_loss.backward()
                    critic_opt.step()
                    g_adv = bce(critic(pred), torch.ones_like(d_real))
                    loss = recon + self.adv_weight * g_adv
                opt.zero_grad()
                loss.backward()
                opt.step()
                if not np.isfinite(float(loss.detach())):
                    raise DivergenceError(epoch)
                total += float(recon.detach())  # track the L1 term only
                batches += 1
            sched.step()
            train_loss = total / batches
            snapshot = epoch % self.cadence == 0 or epoch == self.epochs
            if snapshot or epoch % self.val_cadence == 0:
                val_loss = self._eval_loss(net, X_val, y_val)
                if not np.isfinite(val_loss):
                    raise DivergenceError(epoch)
                self.history_.append(
                    {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
                )
            if snapshot:
                self.checkpoints_.append(
                    self._snapshot(net, epoch, train_loss, val_loss, subset_size)
                )
        return self

    @staticmethod
    def _eval_loss(net, X, y, batch_size: int = 32) -> float:
        net.eval()
        total = 0.0
        count = 0
        with torch.no_grad():
            for start in range(0, X.shape[0], batch_size):
                xb = _to_torch(X[start : start + batch_size])
                yb = _to_torch(y[start : start + batch_size])
                diff = (net(xb) - yb).abs()
                total += float(diff.sum())
                count += diff.numel()
        return total / count

    def transform(self, X) -> np.ndarray:
        if not getattr(self, "checkpoints_", None):
            raise TranslatorError("translator is not fitted")
        return self.checkpoints_[-1].apply_stack(X)

    @property
    def final_checkpoint_(self) -> Checkpoint:
        if not getattr(self, "checkpoints_", None):
            raise TranslatorError("translator is not fitted")
        return self.checkpoints_[-1]
