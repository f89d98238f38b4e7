"""Directory checkpoints: ``checkpoint.json`` plus one tensor archive per block.

A checkpoint directory is complete once its manifest exists; the manifest is
written last (atomically), so an interrupted save is never mistaken for a
finished unit.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Sequence

import torch

from .graft import WrappedScion, wrap_student
from .netzoo import ArchSpec, BlockwiseNetwork, build_network, count_params

__all__ = [
    "CheckpointError",
    "FORMAT",
    "is_complete",
    "load_network",
    "load_scions",
    "read_manifest",
    "save_network",
    "save_scions",
    "write_json_atomic",
]

FORMAT = "graftkd-checkpoint/1"
MANIFEST = "checkpoint.json"


class CheckpointError(RuntimeError):
    pass


def write_json_atomic(path: Path, data: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def is_complete(path: str | Path) -> bool:
    return (Path(path) / MANIFEST).is_file()


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not is_complete(path):
        raise CheckpointError(f"no complete checkpoint at {path}")
    with open(path / MANIFEST) as fh:
        data = json.load(fh)
    if data.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {data.get('format')!r}")
    return data


def _begin(path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / MANIFEST).unlink(missing_ok=True)


def _spec_of(net: BlockwiseNetwork) -> ArchSpec:
    if net.spec is None:
        raise CheckpointError("only registry-built networks (with an ArchSpec) can be checkpointed")
    return net.spec


def save_network(net: BlockwiseNetwork, path: str | Path, **extra) -> Path:
    """Save a blockwise network; ``extra`` (JSON-serialisable) is stored in the manifest."""
    path = Path(path)
    _begin(path)
    files = []
    for l, block in enumerate(net.blocks, start=1):
        name = f"block{l}.pt"
        torch.save(block.state_dict(), path / name)
        files.append(name)
    write_json_atomic(
        path / MANIFEST,
        {
            "format": FORMAT,
            "kind": "network",
            "arch": _spec_of(net).to_dict(),
            "files": files,
            "params": count_params(net),
            "extra": extra,
        },
    )
    return path


def load_network(path: str | Path, map_location: str | torch.device = "cpu") -> BlockwiseNetwork:
    path = Path(path)
    meta = read_manifest(path)
    if meta["kind"] != "network":
        raise CheckpointError(f"{path} holds {meta['kind']!r}, not a network")
    net = build_network(ArchSpec.from_dict(meta["arch"]))
    if len(meta["files"]) != net.num_blocks:
        raise CheckpointError(f"{path}: {len(meta['files'])} block files for a {net.num_blocks}-block network")
    for block, name in zip(net.blocks, meta["files"]):
        block.load_state_dict(torch.load(path / name, map_location=map_location, weights_only=True), strict=True)
    return net


def save_scions(
    scions: Sequence[WrappedScion],
    path: str | Path,
    student_spec: ArchSpec,
    kind: str,
    **extra,
) -> Path:
    """Save wrapped scions; tensors are keyed ``core.*``, ``pre.weight``, ``post.weight``."""
    path = Path(path)
    _begin(path)
    entries = []
    for s in scions:
        name = f"scion{s.index}.pt"
        torch.save(s.state_dict(), path / name)
        entries.append({"index": s.index, "file": name, "adaptions": s.adaption_shapes()})
    write_json_atomic(
        path / MANIFEST,
        {
            "format": FORMAT,
            "kind": kind,
            "student": student_spec.to_dict(),
            "num_blocks": scions[0].num_blocks if scions else None,
            "scions": entries,
            "extra": extra,
        },
    )
    return path


def load_scions(path: str | Path, teacher: BlockwiseNetwork, map_location: str | torch.device = "cpu") -> list[WrappedScion]:
    """Rebuild the saved scions (ordered by index) against ``teacher``'s boundaries."""
    path = Path(path)
    meta = read_manifest(path)
    if "scions" not in meta:
        raise CheckpointError(f"{path} holds {meta['kind']!r}, not scions")
    template = wrap_student(build_network(ArchSpec.from_dict(meta["student"])), teacher, seed=0)
    out = []
    for entry in sorted(meta["scions"], key=lambda e: e["index"]):
        scion = template[entry["index"] - 1]
        state = torch.load(path / entry["file"], map_location=map_location, weights_only=True)
        scion.load_state_dict(state, strict=True)
        out.append(scion)
    return out
