"""Weight sets: seeded initialisation, CAVR directory storage, synthetic inputs.

A weight directory holds one ``<name>.cavr`` file per tensor plus
``manifest.txt``, a ``key = value`` document carrying the model config and
every tensor's extents.  Tensor names look like
``cmiu1.imsa_rgb.attn.w_q`` or ``cmiu3.imca.ffn.conv3.weight``; scalar
mixing weights are stored as length-1 tensors.
"""

from __future__ import annotations

import dataclasses
import math
import os
from pathlib import Path
from typing import Iterator

import numpy as np

from .attention import AttentionParams
from .blocks import Conv
from .errors import ConfigError, DimensionError, FormatError, MissingWeightError
from .io import atomic_write, encode_cavr, read_cavr
from .tensor import make_rng
from .tipp import LevelSpec, TippConfig, TippWeights, zero_weights

MANIFEST = "manifest.txt"


def _children(obj) -> Iterator[tuple[str, dataclasses.Field | None, object]]:
    if isinstance(obj, TippWeights):
        for i, c in enumerate(obj.cmius, start=1):
            yield f"cmiu{i}", None, c
        yield "predictor", None, obj.predictor
        return
    for f in dataclasses.fields(obj):
        if f.metadata.get("static"):
            continue
        yield f.metadata.get("key", f.name), f, getattr(obj, f.name)


def named_tensors(weights, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a weight tree into ``{name: array}`` in a fixed traversal order."""
    out: dict[str, np.ndarray] = {}
    for key, _, value in _children(weights):
        name = f"{prefix}{key}"
        if isinstance(value, np.ndarray):
            out[name] = value
        elif isinstance(value, float):
            out[name] = np.array([value])
        else:
            out.update(named_tensors(value, name + "."))
    return out


def _rebuild(obj, tensors: dict[str, np.ndarray], prefix: str = ""):
    if isinstance(obj, TippWeights):
        return TippWeights(
            [_rebuild(c, tensors, f"{prefix}cmiu{i}.") for i, c in enumerate(obj.cmius, start=1)],
            _rebuild(obj.predictor, tensors, f"{prefix}predictor."),
        )
    changes = {}
    for key, f, value in _children(obj):
        name = f"{prefix}{key}"
        if isinstance(value, (np.ndarray, float)):
            if name not in tensors:
                raise MissingWeightError(name)
            new = np.asarray(tensors[name], dtype=np.float64)
            want = value.shape if isinstance(value, np.ndarray) else (1,)
            if new.shape != want:
                raise DimensionError(f"tensor {name!r} has shape {new.shape}, config expects {want}")
            changes[f.name] = new if isinstance(value, np.ndarray) else float(new[0])
        else:
            changes[f.name] = _rebuild(value, tensors, name + ".")
    return dataclasses.replace(obj, **changes)


def _map_nodes(obj, fn):
    """Rebuild the tree bottom-up, applying ``fn`` to every dataclass node."""
    if isinstance(obj, TippWeights):
        return TippWeights([_map_nodes(c, fn) for c in obj.cmius], _map_nodes(obj.predictor, fn))
    changes = {
        f.name: _map_nodes(getattr(obj, f.name), fn)
        for f in dataclasses.fields(obj)
        if dataclasses.is_dataclass(getattr(obj, f.name))
    }
    return fn(dataclasses.replace(obj, **changes) if changes else obj)


def init_weights(config: TippConfig, rng: np.random.Generator | int) -> TippWeights:
    """Uniform(-s, s) with ``s = 1/sqrt(fan_in)`` for every kernel, projection
    and bias; batch norms start at identity and ``alpha = beta = 0.5``.
    """
    rng = make_rng(rng) if isinstance(rng, (int, np.integer)) else rng

    def draw(node):
        if isinstance(node, Conv):
            bound = 1.0 / math.sqrt(node.weight[0].size)
            return Conv(
                rng.uniform(-bound, bound, node.weight.shape),
                rng.uniform(-bound, bound, node.bias.shape),
            )
        if isinstance(node, AttentionParams):
            bound = 1.0 / math.sqrt(node.dim)
            fresh = {n: rng.uniform(-bound, bound, getattr(node, n).shape) for n in ("w_q", "w_k", "w_v", "w_s", "w_c")}
            return dataclasses.replace(node, alpha=0.5, beta=0.5, **fresh)
        return node

    return _map_nodes(zero_weights(config), draw)


def repatch(weights: TippWeights, patch) -> TippWeights:
    """Same tensors with per-level patch sides replaced."""
    cmius = []
    for c, p in zip(weights.cmius, patch):
        cmius.append(_map_nodes(c, lambda n, p=p: dataclasses.replace(n, patch_side=p) if isinstance(n, AttentionParams) else n))
    return TippWeights(cmius, weights.predictor)


# -- manifests -----------------------------------------------------------------


def config_to_manifest(config: TippConfig) -> dict[str, str]:
    return {
        "config.dim": str(config.dim),
        "config.heads": str(config.heads),
        "config.levels": ",".join(str(lv) for lv in config.levels),
        "config.patch": ",".join(map(str, config.patch)),
        "config.ffn_hidden": str(config.hidden),
        "config.predictor_hidden": str(config.predictor_hidden),
    }


def config_from_manifest(entries: dict[str, str]) -> TippConfig:
    try:
        return TippConfig(
            dim=int(entries["config.dim"]),
            heads=int(entries["config.heads"]),
            levels=tuple(LevelSpec.parse(t) for t in entries["config.levels"].split(",")),
            patch=tuple(int(t) for t in entries["config.patch"].split(",")),
            ffn_hidden=int(entries["config.ffn_hidden"]),
            predictor_hidden=int(entries["config.predictor_hidden"]),
        ).validate()
    except KeyError as exc:
        raise FormatError(f"manifest lacks {exc.args[0]!r}") from None
    except ValueError as exc:
        raise FormatError(f"manifest config is invalid: {exc}") from None


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        entries[key.strip()] = value.strip()
    return entries


def _format_manifest(entries: dict[str, str]) -> bytes:
    return ("".join(f"{k} = {v}\n" for k, v in entries.items())).encode()


def weight_artifacts(weights: TippWeights, config: TippConfig) -> dict[str, bytes]:
    """File name -> content for a complete weight directory."""
    files = {}
    entries = {"format": "CAVR v1"} | config_to_manifest(config)
    for name, arr in named_tensors(weights).items():
        files[f"{name}.cavr"] = encode_cavr(arr)
        entries[f"tensor.{name}"] = "x".join(map(str, arr.shape))
    files[MANIFEST] = _format_manifest(entries)
    return files


def save_weights(weights: TippWeights, directory: str | os.PathLike, config: TippConfig) -> None:
    directory = Path(directory)
    files = weight_artifacts(weights, config)
    manifest = files.pop(MANIFEST)
    for name, blob in files.items():
        atomic_write(directory / name, blob)
    # manifest last: its presence marks a complete directory
    atomic_write(directory / MANIFEST, manifest)


def load_config(directory: str | os.PathLike) -> TippConfig:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FormatError(f"{directory}: no {MANIFEST}")
    return config_from_manifest(read_manifest(path))


def load_weights(directory: str | os.PathLike, config: TippConfig | None = None) -> TippWeights:
    """Load a weight directory, checking every extent against ``config``
    (by default the config recorded in the manifest).
    """
    directory = Path(directory)
    config = config or load_config(directory)
    skeleton = zero_weights(config)
    tensors = {}
    for name in named_tensors(skeleton):
        path = directory / f"{name}.cavr"
        if not path.exists():
            raise MissingWeightError(name)
        tensors[name] = read_cavr(path)
    return _rebuild(skeleton, tensors)


# -- feature pyramids ------------------------------------------------------


def synthetic_features(config: TippConfig, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Standard-normal (rgb, d/t) feature pairs, level 1 first."""
    config.validate()
    rng = make_rng(seed)
    out = []
    for lv in config.levels:
        shape = (lv.h, lv.w, lv.channels)
        out.append((rng.standard_normal(shape), rng.standard_normal(shape)))
    return out


def feature_artifacts(features) -> dict[str, bytes]:
    files = {}
    for i, (f_rgb, f_dt) in enumerate(features, start=1):
        files[f"rgb{i}.cavr"] = encode_cavr(f_rgb)
        files[f"dt{i}.cavr"] = encode_cavr(f_dt)
    return files


def save_features(features, directory: str | os.PathLike) -> None:
    for name, blob in feature_artifacts(features).items():
        atomic_write(Path(directory) / name, blob)


def load_features(directory: str | os.PathLike, config: TippConfig | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    directory = Path(directory)
    out = []
    for i in range(1, 5):
        pair = []
        for stream in ("rgb", "dt"):
            path = directory / f"{stream}{i}.cavr"
            if not path.exists():
                raise ConfigError(f"level {i}: missing feature file {path.name}")
            arr = read_cavr(path)
            if arr.ndim != 3:
                raise DimensionError(f"level {i}: {path.name} must be H x W x C, got {arr.shape}")
            pair.append(arr)
        out.append(tuple(pair))
    if config is not None:
        for i, ((f_rgb, _), lv) in enumerate(zip(out, config.levels), start=1):
            if f_rgb.shape != (lv.h, lv.w, lv.channels):
                raise DimensionError(f"level {i}: features {f_rgb.shape} do not match config {lv}")
    return out
