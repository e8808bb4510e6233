"""
Grouped, stratified folds
=========================

Slides never straddle folds, and each (dataset, tumor type) stratum is
spread as evenly as the slide counts allow.
"""

# %%
from mitokit.splitter import fold_view, grouped_stratified_split, stratum_fold_counts
from mitokit.synth import synthetic_catalog

cat = synthetic_catalog(seed=0)
folds = grouped_stratified_split(cat, k=5, strata_key="tumor:", seed=0)
print("slides per fold:", [len(folds.slides_in(f)) for f in range(5)])

# %%
for stratum, counts in sorted(stratum_fold_counts(cat, folds).items())[:8]:
    print(f"  {stratum[0]:8s} {stratum[1]:32s} {counts}")

# %%
train, val = fold_view(cat, folds, 0)
print("fold 0: train", len(train.patches), "patches, val", len(val.patches), "patches")
print("shared slides:", set(train.slides) & set(val.slides))
