"""
Corpus catalog and weighted batch sampling
==========================================

Build a six-source synthetic corpus, look at its counts, and see how the
dataset, image and class weights reshape what a training batch contains.
"""

# %%
import numpy as np

from mitokit.sampler import BatchSpec, build_plan, draw_batch, expected_marginals, monte_carlo_marginals
from mitokit.synth import synthetic_catalog

cat = synthetic_catalog(seed=0)
print(len(cat.datasets), "datasets,", len(cat.slides), "slides,", len(cat.patches), "patches")
for did, n in sorted(cat.counts.dataset_sizes.items()):
    print(f"  {cat.datasets[did].name:16s} {n:5d} patches  ({cat.datasets[did].kind.value})")

# %%
# uniform draws would simply mirror dataset sizes
sizes = np.array([cat.counts.dataset_sizes[d] for d in sorted(cat.datasets)], dtype=float)
print("uniform dataset shares:", np.round(sizes / sizes.sum(), 3))

# %%
# each factor on its own, then all three together
for factors in [("dataset",), ("class",), ("dataset", "image", "class")]:
    plan = build_plan(cat, factors)
    m = expected_marginals(plan)
    shares = [round(m["dataset"][d], 3) for d in sorted(cat.datasets)]
    print(f"{'+'.join(factors):22s} datasets {shares}  MF {m['class']['MF']:.3f}")

# %%
# Monte Carlo agrees with the expected marginals
plan = build_plan(cat)
mc = monte_carlo_marginals(plan, 200_000, seed=1)
ex = expected_marginals(plan)
print("max |MC - expected|:", max(abs(mc["dataset"][d] - ex["dataset"][d]) for d in ex["dataset"]))

# %%
# a reproducible batch of 24
batch = draw_batch(plan, BatchSpec(batch_size=24, seed=3))
print(batch[:6], "...")
assert batch == draw_batch(plan, BatchSpec(batch_size=24, seed=3))
