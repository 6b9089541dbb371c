"""Self-supervised 3D-equivariant features for wide-baseline visual servoing.

Submodules:
  geom      rotations, intrinsics, hemisphere sampling, object centering
  imaging   procedural objects, z-buffer renderer, homography warping
  autodiff  reverse-mode autodiff over numpy tensors, optimizers, checkpoints
  model     Siamese extractor/transformer, equivariance + geodesic losses
  dataset   view generation, pair sampling, manifest persistence
  servo     gradient-descent pose inference, closed servo loop, cost maps
  baselines classical IBVS and direct relative-pose regression
  metrics   average-distance and correct-servoing-rate metrics
  benchmark trial orchestration and the centering ablation
  cli       command-line entry point
"""

__version__ = "0.1.0"

# Submodules are imported lazily so the CLI can pin BLAS thread counts
# before numpy loads.
_SUBMODULES = (
    "geom",
    "imaging",
    "autodiff",
    "model",
    "dataset",
    "servo",
    "baselines",
    "metrics",
    "benchmark",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
