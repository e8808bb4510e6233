"""
EMA checkpoint ensemble
=======================

Three running averages at small rates plus the raw weights, each kept at
its own lowest validation loss.
"""

# %%
import numpy as np

from mitokit.ema import CheckpointSnapshot, EmaTracker, ema_update, export_ensemble, record_validation

rng = np.random.default_rng(0)
target = rng.normal(size=16)
theta = np.zeros(16)
tracker = EmaTracker()


def val_loss(w):
    # a held-out estimate: true error with 5% measurement noise
    return float(np.mean((w - target) ** 2) * (1 + 0.05 * rng.normal()))


for step in range(20_000):
    # noisy descent towards a target
    theta += 0.01 * (target - theta) + 0.05 * rng.normal(size=16)
    snap = CheckpointSnapshot(step, {"w": theta.astype(np.float32)}, val_loss(theta))
    ema_update(tracker, snap)
    if step % 500 == 499:
        # every average is scored on its own weights
        own = {a: val_loss(tracker.state[a]["w"]) for a in tracker.decay_rates}
        record_validation(tracker, snap, own)

# %%
for snap in export_ensemble(tracker):
    err = float(np.mean((snap.tensors["w"] - target) ** 2))
    print(f"{snap.model_id:12s} step {snap.step:5d}  val loss {snap.validation_loss:.4f}  true error {err:.4f}")
