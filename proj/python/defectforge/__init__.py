"""Python access to the defectforge pipeline.

Images are numpy uint8 arrays shaped (H, W) or (H, W, 3). Configs are plain
dicts using the same keys as the JSON config files; results come back as dicts.
"""

import json as _json

from . import _core
from ._core import (
    Error,
    compute_auroc,
    fractal_perlin,
    load_image,
    mock_transform,
    perlin_fade,
    poisson_blend,
    render_product,
    save_image,
)

__all__ = [
    "Error",
    "build_toy_benchmark",
    "compute_auroc",
    "config",
    "error_code",
    "filter_evaluate",
    "fractal_perlin",
    "generate_gen_dataset",
    "generate_rule_dataset",
    "load_image",
    "mock_transform",
    "perlin_fade",
    "poisson_blend",
    "render_product",
    "run_strategy",
    "run_toy_experiment",
    "save_image",
]


def _cfg(config):
    return "" if not config else _json.dumps(config)


def error_code(exc):
    """Stable code of a defectforge.Error, e.g. "NotFound"."""
    return exc.args[0]


def config(overrides=None):
    """Full configuration with defaults filled in."""
    return _json.loads(_core.config_json(_cfg(overrides)))


def filter_evaluate(normal, candidate, config=None):
    return _json.loads(_core.filter_evaluate(normal, candidate, _cfg(config)))


def build_toy_benchmark(out, config=None):
    _core.build_toy_benchmark(str(out), _cfg(config))


def generate_rule_dataset(normals, out, n=-1, config=None):
    return _json.loads(_core.generate_rule_dataset(str(normals), str(out), n, _cfg(config)))


def generate_gen_dataset(normals, out, n_accept=-1, endpoint="", config=None):
    """Without an endpoint the in-process mock from the config is used."""
    return _json.loads(_core.generate_gen_dataset(str(normals), str(out), n_accept, endpoint, _cfg(config)))


def run_strategy(strategy, rule, gen, eval, out="", config=None):
    return _json.loads(_core.run_strategy(strategy, str(rule), str(gen), str(eval), str(out), _cfg(config)))


def run_toy_experiment(out, config=None):
    return _json.loads(_core.run_toy_experiment(str(out), _cfg(config)))
