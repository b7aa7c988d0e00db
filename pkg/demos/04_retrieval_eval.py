"""Contrast vs softmax training, scored by counterpart retrieval.

Trains the same small encoder twice, once per loss, then runs the
pair-retrieval protocol: every source is augmented once, originals and
augmentations go into one index, and an item scores a hit when its
counterpart shows up in the top-k nearest neighbors. The contrast loss
should come out clearly ahead. A few minutes of CPU time at this scale.
"""

import time

from augnet.datasets import make_texture_images
from augnet.encoder import EncoderSpec, TrainConfig, train
from augnet.evalkit import pair_retrieval_eval
from augnet.imaging import AugmentConfig

N_SOURCES = 96
STEPS = 600

images = make_texture_images(N_SOURCES, side=64, seed=1234)
aug = AugmentConfig(crop_rate_min=0.5, out_side=32)
print(f"{N_SOURCES} textured sources, {STEPS} steps per run, "
      f"gallery of {2 * N_SOURCES} items, chance top-1 = "
      f"{1.0 / (2 * N_SOURCES - 1):.4f}\n")

results = {}
for kind in ("contrast", "softmax"):
    spec = EncoderSpec(n_blocks=3, block_channels=16, in_side=32,
                       embed_dim=96, seed=0)
    cfg = TrainConfig(n_sources_per_batch=16, augments_per_source=4,
                      steps=STEPS, lr=1.5e-3, loss_kind=kind, augment=aug,
                      seed=0)
    t0 = time.time()
    state = train(images, cfg, spec)
    accs = pair_retrieval_eval(state, images, aug, [1, 10], seed=99)
    results[kind] = accs
    print(f"{kind:>8}: top-1 {accs[1]:.4f}  top-10 {accs[10]:.4f} "
          f"[{time.time() - t0:.0f}s]")

gap = results["contrast"][1] - results["softmax"][1]
print(f"\ncontrast minus softmax top-1: {gap:+.4f}")
print("the softmax loss collapses augmentations of different sources onto")
print("similar embeddings, while the hard-negative term of the contrast")
print("loss keeps every source separated; the ordering mirrors the large-")
print("scale result, compressed into a desk-sized run.")
