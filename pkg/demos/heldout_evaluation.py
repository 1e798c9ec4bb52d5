"""
Precision and recall on an unseen sequence
==========================================

Train a head on one simulated sequence and score it on another. A pair is
detected when its descriptor distance is below the threshold, the two
keyframes register, and the registered edge survives the robust solve.
"""

import numpy as np

from vprcalib.evaluation import evaluate, verify_world
from vprcalib.mining import mine, tuning_set
from vprcalib.simulator import WorldConfig, generate
from vprcalib.training import EmbeddingHead, TrainConfig, train

tuning = generate(WorldConfig(n_keyframes=400, aliasing_pairs=2, seed=0))
tuples, _, _ = mine(tuning.descriptors, tuning.observations, tuning.odometry)
head, _ = train(EmbeddingHead.identity(tuning.descriptors.shape[1]), tuning_set(tuples), tuning.descriptors,
                TrainConfig(epochs=30))

heldout = generate(WorldConfig(n_keyframes=400, seed=1, domain_seed=0))
verified = verify_world(heldout)
print(f"{len(verified.pairs)} candidate pairs, {int(verified.registered.sum())} register,"
      f" {int(verified.survived.sum())} survive, {int(verified.true_positive.sum())} true loops")

results = evaluate(heldout.descriptors, verified, {"untuned": None, "tuned": head})
for name, system in results.systems.items():
    curve = system.curve
    print(f"{name:8s} correct matches {system.match.percentage:6.2f}%")
    for k in np.linspace(0, len(curve.thresholds) - 1, 6).astype(int):
        print(f"    tau {curve.thresholds[k]:.3f}  precision {curve.precision[k]:.3f}  recall {curve.recall[k]:.3f}")
print("tuned dominates untuned:", results.summary()["comparison"]["tuned_dominates"])
