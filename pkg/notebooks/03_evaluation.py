"""
Point matching and F1
=====================

Detections match MF truth points greedily by confidence within a radius.
"""

# %%
import numpy as np

from mitokit.catalog import Annotation, Label
from mitokit.evaluator import Detection, f1_score, match_detections

truth = [Annotation("t0", "p", (100, 100), Label.MF), Annotation("t1", "p", (400, 300), Label.MF)]
dets = [Detection(110, 100, 0.9), Detection(105, 100, 0.8), Detection(402, 296, 0.6), Detection(900, 900, 0.3)]
r = match_detections(dets, truth, radius=30)
print(f"tp={r.tp} fp={r.fp} fn={r.fn}  pairs={r.pairs}")

# %%
# the operating point quoted for the leaderboard entry
print("F1 at P=0.78, R=0.84:", round(f1_score(0.78, 0.84), 4))

# %%
# precision/recall trade-off on the toy example
for t in np.linspace(0, 1, 6):
    r = match_detections(dets, truth, radius=30, threshold=t)
    print(f"threshold {t:.1f}: tp={r.tp} fp={r.fp} fn={r.fn}")
