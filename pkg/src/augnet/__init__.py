"""Self-supervised image embeddings from augmentation batches.

Submodules:
  imaging   augmentation ops, RNG streams, the N x M batch builder
  losses    softmax and contrast embedding losses with analytic gradients
  encoder   small conv encoder, Adam, the training loop, embedding/taps
  evalkit   pair retrieval, mAP, k-means + Hungarian accuracy, probes, PCA
  store     checkpoints, embedding stores, datasets, run configs
  datasets  procedural texture and blob generators
  cli       the `augnet` command

Submodules import lazily so the CLI can configure thread environment
variables before any numeric library loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "imaging", "losses", "encoder", "evalkit", "store", "datasets", "cli",
)
__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(list(globals()) + list(_SUBMODULES)))
