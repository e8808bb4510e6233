"""
Test-time augmentation and fusion
=================================

Detections from flipped and rotated views are mapped back to the patch
frame and fused across views and models.
"""

# %%
import itertools

from mitokit.detector import MockOracleDetector, MockParams
from mitokit.evaluator import evaluate
from mitokit.pipeline import detect_and_fuse
from mitokit.synth import dense_catalog
from mitokit.tta import DIHEDRAL_SET, FLIP_ROTATION_SET, FusionConfig, GeomTransform, compose

# %%
# the flip/rotation set is not closed; the full dihedral group is
size = (1920, 1280)
for a, b in itertools.product(FLIP_ROTATION_SET, repeat=2):
    c = compose(GeomTransform(a, size), GeomTransform(b, GeomTransform(a, size).output_size))
    if c.kind not in FLIP_ROTATION_SET:
        print(f"{a} then {b} = {c.kind}")

# %%
cat = dense_catalog(1000, seed=0)
params = MockParams(recall_sim=0.7, fp_rate=0.6)
models = [MockOracleDetector(cat, params, seed=s, model_id=f"m{s}") for s in range(3)]
# fused confidence is averaged over every (model, view) source, so a lone
# false positive rarely clears the 0.3 cutoff
for views in [("identity",), ("identity", "hflip", "rot90", "rot180", "rot270"), DIHEDRAL_SET]:
    for votes in (1, 3):
        fused = [detect_and_fuse(p, models, views, FusionConfig(min_votes=votes)) for p in cat.patches.values()]
        r = evaluate(cat, fused, radius=30, threshold=0.3)
        print(f"{len(views)} views, min_votes {votes}: P {r.precision:.3f} R {r.recall:.3f} F1 {r.f1:.3f}")
