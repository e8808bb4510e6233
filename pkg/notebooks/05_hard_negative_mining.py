"""
Hard-negative mining
====================

Confident detections on tissue that cannot contain mitoses become NMF
point annotations; mining again after the merge adds nothing.
"""

# %%
from mitokit.catalog import merge_annotations
from mitokit.detector import MockOracleDetector, calibrate_mock
from mitokit.mining import mine_hard_negatives, mining_report
from mitokit.synth import synthetic_catalog

cat = synthetic_catalog(seed=0)
det = MockOracleDetector(cat, calibrate_mock(cat, recall=0.84, precision=0.5), seed=0)
res = mine_hard_negatives(cat, det)
report = mining_report(res.annotations, cat)
print("mined:", report["n_mined"], "per dataset:", report["per_dataset"])
print("confidence histogram:", report["confidence_histogram"]["counts"])

# %%
merged = merge_annotations(cat, res.annotations)
print("class sizes unchanged:", merged.counts.class_sizes == cat.counts.class_sizes)
print("re-mining yields", len(mine_hard_negatives(merged, det).annotations), "new annotations")
