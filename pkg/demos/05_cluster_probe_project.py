"""Cluster, probe and project the features of a trained encoder.

Uses a labeled corpus where the class is the texture family (gratings,
checkerboards, blob fields, color patches). After a short self-supervised
run the script:

  1. clusters embeddings with k-means and scores Hungarian accuracy,
  2. trains linear probes on each block tap and on the final embedding,
  3. writes a 2-D PCA projection as TSV for plotting.

No labels are used during training; they only score the frozen features.
"""

from pathlib import Path

from augnet.datasets import make_labeled_textures
from augnet.encoder import EncoderSpec, TrainConfig, embed, extract_features, init_params, train
from augnet.evalkit import ProbeSpec, hungarian_accuracy, kmeans, pca_project, train_probe
from augnet.imaging import AugmentConfig

images, labels = make_labeled_textures(4, 80, side=48, seed=21)
spec = EncoderSpec(n_blocks=3, block_channels=16, in_side=32, embed_dim=16, seed=0)
cfg = TrainConfig(n_sources_per_batch=8, augments_per_source=4, steps=600,
                  loss_kind="contrast", augment=AugmentConfig(out_side=32),
                  seed=0)
print(f"corpus: {len(images)} images, 4 texture families as classes")
state = train(images, cfg, spec)
print(f"trained {cfg.steps} contrast steps\n")

vecs = embed(state, images, short_side=32)

# --- clustering ----------------------------------------------------------
assignment = kmeans(vecs, 4, seed=0)
acc = hungarian_accuracy(assignment.labels, labels)
print(f"k-means on embeddings: inertia {assignment.inertia:.2f}, "
      f"Hungarian accuracy {acc:.3f} (chance 0.25)")

# --- probes --------------------------------------------------------------
# Features from every depth: block taps are spatially averaged activation
# maps; the embedding is the tanh output. A random-init encoder provides
# the no-training baseline.
print("\nlinear probes (80/20 split accuracy):")
probe = ProbeSpec(kind="linear", n_classes=4, seed=5)
rand = init_params(spec)
for name, trained_feats, random_feats in (
    [(f"tap {t}", extract_features(state, images, t), extract_features(rand, images, t))
     for t in range(1, spec.n_blocks + 1)]
    + [("embedding", vecs, embed(rand, images, short_side=32))]
):
    at = train_probe(trained_feats, labels, probe)
    ar = train_probe(random_feats, labels, probe)
    print(f"  {name:>9}: trained {at:.3f}   random-init {ar:.3f}")
print("earlier taps usually probe at least as well as the embedding: the")
print("deepest features specialize in the augmentation-identity task itself.")

# --- projection ----------------------------------------------------------
out = Path("demo_out")
out.mkdir(exist_ok=True)
xy = pca_project(vecs)
with open(out / "projection.tsv", "w", encoding="utf-8") as fh:
    fh.write("x\ty\tlabel\n")
    for (x, y), lab in zip(xy, labels):
        fh.write(f"{x:.6f}\t{y:.6f}\t{lab}\n")
print(f"\n2-D PCA projection written to {out / 'projection.tsv'} "
      f"(columns: x, y, family)")
