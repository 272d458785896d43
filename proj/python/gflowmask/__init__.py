"""Learnable probabilistic dropout masks trained with a GFlowNet sampler.

The heavy lifting lives in the C++ extension ``gflowmask._core``; this
package re-exports its surface. Pipeline functions consume the same JSON
config strings the ``gflowmask`` CLI reads, so a config file works in both
worlds unchanged.
"""

try:
    from gflowmask import _core  # installed layout: extension inside the package
except ImportError:  # build-tree layout: extension at the CMake binary dir root
    import _core

ConfigError = _core.ConfigError
IoError = _core.IoError
NumericError = _core.NumericError
ShapeError = _core.ShapeError
SnapshotError = _core.SnapshotError
add_noise = _core.add_noise
auroc = _core.auroc
ece = _core.ece
entropy = _core.entropy
evaluate = _core.evaluate
gen_data = _core.gen_data
ood_compare = _core.ood_compare
preprocess = _core.preprocess
saliency = _core.saliency
train = _core.train
weighted_prf = _core.weighted_prf

__all__ = [
    "ConfigError",
    "IoError",
    "NumericError",
    "ShapeError",
    "SnapshotError",
    "add_noise",
    "auroc",
    "ece",
    "entropy",
    "evaluate",
    "gen_data",
    "ood_compare",
    "preprocess",
    "saliency",
    "train",
    "weighted_prf",
]
