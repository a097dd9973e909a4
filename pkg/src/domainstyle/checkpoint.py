"""Versioned ``.npz`` checkpoints keyed by canonical parameter names.

Canonical names look like ``generator/down_0/conv1/weight``: the network name,
then one path segment per submodule, with list indices folded into the
preceding segment (``down.0`` -> ``down_0``) or spelled ``layer_<i>`` when a
list index follows another index. Arrays carry their own dtype and shape; a
``__meta__`` entry holds a JSON document (format version, config, iteration,
RNG stream states, optimizer hyperparameters).
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig, config_from_dict, config_to_dict
from .training import EMA_NAMES, NET_NAMES, ModelBundle, RngStreams, Trainer, build_optimizers

FORMAT_VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def canonical_name(module: str, torch_name: str) -> str:
    parts = torch_name.split(".")
    segments: list[str] = []
    for part in parts:
        if part.isdigit():
            if segments and not segments[-1].startswith("layer_") and not segments[-1][-1].isdigit():
                segments[-1] = f"{segments[-1]}_{part}"
            else:
                segments.append(f"layer_{part}")
        else:
            segments.append(part)
    return "/".join([module, *segments])


def _named_tensors(prefix: str, net: nn.Module) -> dict[str, torch.Tensor]:
    return {canonical_name(prefix, n): t for n, t in net.state_dict().items()}


def _param_names(prefix: str, net: nn.Module) -> dict[torch.nn.Parameter, str]:
    return {p: canonical_name(prefix, n) for n, p in net.named_parameters()}


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().copy()


def save_checkpoint(path: str | Path, trainer: Trainer, domains: Sequence[str] | None = None) -> Path:
    """Write live and EMA parameters, Adam moments, iteration and RNG state."""
    bundle, cfg = trainer.bundle, trainer.cfg
    arrays: dict[str, np.ndarray] = {}
    for name in NET_NAMES:
        for key, t in _named_tensors(name, bundle.nets[name]).items():
            arrays[f"model/{key}"] = _to_numpy(t)
    for name in EMA_NAMES:
        for key, t in _named_tensors(name, bundle.ema[name]).items():
            arrays[f"ema/{key}"] = _to_numpy(t)
    for name in NET_NAMES:
        opt = trainer.optims[name]
        names = _param_names(name, bundle.nets[name])
        for p, state in opt.state.items():
            for slot, value in state.items():
                arrays[f"optim/{names[p]}/{slot}"] = _to_numpy(torch.as_tensor(value))

    meta = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(cfg),
        "iteration": bundle.iteration,
        "rng": trainer.rng.state(),
        "rng_seed": trainer.rng.seed,
        "torch_rng": torch.get_rng_state().tolist(),
        "domains": list(domains) if domains is not None else None,
        "optim_hparams": {name: trainer.optims[name].param_groups[0]["lr"] for name in NET_NAMES},
    }
    arrays[META_KEY] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def read_meta(path: str | Path) -> dict:
    with np.load(path, allow_pickle=False) as archive:
        if META_KEY not in archive:
            raise CheckpointError(f"{path}: missing {META_KEY} entry")
        return json.loads(archive[META_KEY].tobytes().decode("utf-8"))


def _restore(net: nn.Module, prefix: str, group: str, archive, where: str) -> None:
    expected = {canonical_name(prefix, n): n for n in net.state_dict()}
    stored = {k[len(group) + 1:] for k in archive.files if k.startswith(f"{group}/{prefix}/")}
    missing = sorted(set(expected) - stored)
    extra = sorted(stored - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"{where}: parameter names do not match the {prefix} architecture "
            f"(missing {missing[:5]}, unexpected {extra[:5]})"
        )
    state = {}
    current = net.state_dict()
    for key, tname in expected.items():
        arr = archive[f"{group}/{key}"]
        if tuple(arr.shape) != tuple(current[tname].shape):
            raise CheckpointError(
                f"{where}: shape mismatch for {key}: checkpoint {arr.shape}, model {tuple(current[tname].shape)}"
            )
        state[tname] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)


def load_checkpoint(path: str | Path, cfg: ExperimentConfig | None = None) -> Trainer:
    """Rebuild a :class:`Trainer` exactly as it was saved.

    When ``cfg`` is given it must describe the same architecture (domain
    count first); the saved config is used otherwise.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    meta = read_meta(path)
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    saved_cfg = config_from_dict(meta["config"])
    if cfg is None:
        cfg = saved_cfg
    elif cfg.num_domains != saved_cfg.num_domains:
        raise CheckpointError(
            f"{path}: num_domains mismatch: checkpoint has {saved_cfg.num_domains} domain branches, "
            f"config expects {cfg.num_domains}"
        )

    trainer = Trainer.create(cfg)
    bundle = trainer.bundle
    with np.load(path, allow_pickle=False) as archive:
        for name in NET_NAMES:
            _restore(bundle.nets[name], name, "model", archive, str(path))
        for name in EMA_NAMES:
            _restore(bundle.ema[name], name, "ema", archive, str(path))
        trainer.optims = build_optimizers(bundle, cfg)
        for name in NET_NAMES:
            opt = trainer.optims[name]
            for p, pname in _param_names(name, bundle.nets[name]).items():
                prefix = f"optim/{pname}/"
                slots = {k[len(prefix):]: archive[k] for k in archive.files if k.startswith(prefix)}
                if slots:
                    opt.state[p] = {k: torch.from_numpy(v.copy()) for k, v in slots.items()}
    bundle.iteration = int(meta["iteration"])
    trainer.rng = RngStreams(meta.get("rng_seed", cfg.seed))
    trainer.rng.set_state(meta["rng"])
    torch.set_rng_state(torch.tensor(meta["torch_rng"], dtype=torch.uint8))
    return trainer


def load_bundle(path: str | Path) -> tuple[ModelBundle, ExperimentConfig]:
    trainer = load_checkpoint(path)
    return trainer.bundle, trainer.cfg
