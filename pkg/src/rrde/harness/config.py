"""Experiment configuration and its INI-style file format.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` or
``;`` start comments; lists are comma-separated.  Unknown keys are errors.
Every key is optional and overrides the ``--scale`` preset::

    [experiment]
    seeds = 0, 1, 2
    ensemble_sizes = 1, 3, 5
    gems = mean_estimation, mean_encoding, weighted_mean_estimation, weighted_mean_encoding
    baseline = true            # also run the single network trained on all data
    workers = 1

    [data]
    seed = 0
    train_groups = 600
    validation_groups = 400
    faces_per_group = 2, 6
    image_size = 32
    per_class = 100            # balanced faces per label
    train_manifest =           # optional: use files instead of the generator
    validation_manifest =

    [extractor]
    lr = 0.01
    decay_factor = 0.1
    decay_every = 500
    weight_decay = 0.00001
    batch_size = 8
    iters = 2000
    dtype = float32
    augment = true
    baseline_iters_factor = 1.5

    [aggregator]
    hidden_dim = 128
    baseline_hidden_dim = 64
    num_layers = 2
    lr = 0.05
    decay_every = 1500
    batch_size = 32
    iters = 3000

    [svr]
    C = 0.5
    epsilon = 0.13
    grid_search = false
    C_grid = 0.1, 0.25, 0.5, 1, 2
    epsilon_grid = 0.05, 0.1, 0.13, 0.2
    folds = 5
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from pathlib import Path

from ..aggregator import AGGREGATOR_SGD
from ..dataset import SynthSpec
from ..gem import GEMS
from ..nn import SgdConfig
from ..svr import GridSearchSpec, SvrConfig


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    ensemble_sizes: tuple = (1, 2, 3, 4, 5, 6)
    gems: tuple = GEMS
    baseline: bool = True
    workers: int = 1

    data_seed: int = 0
    train_groups: int = 600
    validation_groups: int = 400
    faces_per_group: tuple = (2, 6)
    image_size: int = 32
    per_class: int = 100
    train_manifest: str = ""
    validation_manifest: str = ""

    extractor_sgd: SgdConfig = SgdConfig(initial_lr=0.01, decay_every_iters=500, batch_size=8, total_iters=2000)
    dtype: str = "float32"
    augment: bool = True
    baseline_iters_factor: float = 1.5

    aggregator_sgd: SgdConfig = AGGREGATOR_SGD
    hidden_dim: int = 128
    baseline_hidden_dim: int = 64
    num_layers: int = 2

    svr: SvrConfig = SvrConfig()
    grid_search: bool = False
    grid: GridSearchSpec = GridSearchSpec()

    def __post_init__(self):
        if not self.ensemble_sizes or not self.gems:
            raise ValueError("need at least one ensemble size and one GEM")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if min(self.ensemble_sizes) < 1:
            raise ValueError("ensemble sizes must be >= 1")
        unknown = set(self.gems) - set(GEMS)
        if unknown:
            raise ValueError(f"unknown GEMs {sorted(unknown)}")

    def synth_spec(self, split: str) -> SynthSpec:
        n = self.train_groups if split == "train" else self.validation_groups
        return SynthSpec(n_groups=n, faces_per_group_range=tuple(self.faces_per_group),
                         image_size=self.image_size, seed=self.data_seed, split=split)


DESK = ExperimentConfig(ensemble_sizes=(1, 3, 5))

PAPER = ExperimentConfig(
    train_groups=1500, validation_groups=1138, per_class=380,
    extractor_sgd=SgdConfig(),
    dtype="float64",
)

PRESETS = {"desk": DESK, "paper": PAPER}

_SECTIONS = {
    "experiment": {"seeds": ("seeds", "ints"), "ensemble_sizes": ("ensemble_sizes", "ints"),
                   "gems": ("gems", "strs"), "baseline": ("baseline", "bool"), "workers": ("workers", "int")},
    "data": {"seed": ("data_seed", "int"), "train_groups": ("train_groups", "int"),
             "validation_groups": ("validation_groups", "int"), "faces_per_group": ("faces_per_group", "ints"),
             "image_size": ("image_size", "int"), "per_class": ("per_class", "int"),
             "train_manifest": ("train_manifest", "str"), "validation_manifest": ("validation_manifest", "str")},
    "extractor": {"dtype": ("dtype", "str"), "augment": ("augment", "bool"),
                  "baseline_iters_factor": ("baseline_iters_factor", "float")},
    "aggregator": {"hidden_dim": ("hidden_dim", "int"), "baseline_hidden_dim": ("baseline_hidden_dim", "int"),
                   "num_layers": ("num_layers", "int")},
    "svr": {"grid_search": ("grid_search", "bool")},
}
_SGD_KEYS = {"lr": ("initial_lr", float), "decay_factor": ("decay_factor", float),
             "decay_every": ("decay_every_iters", int), "weight_decay": ("weight_decay", float),
             "batch_size": ("batch_size", int), "iters": ("total_iters", int)}


def _convert(raw: str, kind: str):
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "yes", "1")
    if kind == "ints":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if kind == "floats":
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if kind == "strs":
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    return raw


def parse_config(text: str, base: ExperimentConfig = DESK) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string(text)
    updates: dict = {}
    for section in parser.sections():
        if section not in ("experiment", "data", "extractor", "aggregator", "svr"):
            raise ValueError(f"unknown config section [{section}]")
        sgd_updates, svr_updates, grid_updates = {}, {}, {}
        for key, raw in parser.items(section):
            plain = _SECTIONS[section].get(key)
            if plain:
                updates[plain[0]] = _convert(raw, plain[1])
            elif section in ("extractor", "aggregator") and key in _SGD_KEYS:
                name, typ = _SGD_KEYS[key]
                sgd_updates[name] = typ(raw)
            elif section == "svr" and key in ("C", "epsilon"):
                svr_updates[key] = float(raw)
            elif section == "svr" and key in ("C_grid", "epsilon_grid"):
                grid_updates[key] = _convert(raw, "floats")
            elif section == "svr" and key in ("folds", "grid_seed"):
                grid_updates["folds" if key == "folds" else "seed"] = int(raw)
            else:
                raise ValueError(f"unknown key {key!r} in [{section}]")
        if sgd_updates:
            field_name = "extractor_sgd" if section == "extractor" else "aggregator_sgd"
            updates[field_name] = replace(getattr(base, field_name), **sgd_updates)
        if svr_updates:
            updates["svr"] = replace(base.svr, **svr_updates)
        if grid_updates:
            updates["grid"] = replace(base.grid, **grid_updates)
    return replace(base, **updates)


def load_config(path=None, scale: str = "desk") -> ExperimentConfig:
    base = PRESETS[scale]
    if path is None:
        return base
    return parse_config(Path(path).read_text(), base)
