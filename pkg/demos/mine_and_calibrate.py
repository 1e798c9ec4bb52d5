"""
Mining training tuples and calibrating the descriptor
=====================================================

Simulate a sequence with a few perceptually aliased places, mine
anchor/positive/negative tuples by walking each keyframe's nearest
descriptors, clean them with the robust pose graph, then fit an affine head
with the triplet margin loss.
"""

from vprcalib.evaluation import separation_stats
from vprcalib.mining import mine, tuning_set
from vprcalib.simulator import WorldConfig, generate
from vprcalib.training import EmbeddingHead, TrainConfig, train

world = generate(WorldConfig(n_keyframes=400, aliasing_pairs=2, seed=0))
print(f"{world.n} keyframes, {len(world.ground_truth.revisit_pairs)} true revisit pairs,"
      f" aliased places {sorted(world.ground_truth.aliased_pairs)}")

tuples, graph, report = mine(world.descriptors, world.observations, world.odometry)
for key, value in report.to_dict().items():
    if key != "optimize_report":
        print(f"  {key:28s} {value}")

# only tuples whose loop edge survived the robust solve are used for training
selected = tuning_set(tuples)
print(f"training on {len(selected)} of {len(tuples)} tuples")

head = EmbeddingHead.identity(world.descriptors.shape[1])
tuned, history = train(head, selected, world.descriptors, TrainConfig(epochs=30, learning_rate=1e-3))
print("mean loss per epoch:", " ".join(f"{x:.4f}" for x in history[::5]), "...", f"{history[-1]:.4f}")

before = separation_stats(None, selected, world.descriptors)
after = separation_stats(tuned, selected, world.descriptors)
print(f"positive distance {before.positive.mean():.4f} -> {after.positive.mean():.4f}")
print(f"negative distance {before.negative.mean():.4f} -> {after.negative.mean():.4f}")
print(f"separation gap    {before.gap:.4f} -> {after.gap:.4f}")
