"""
On-disk formats for datasets, checkpoints and debug dumps.

Dataset directory layout:
  manifest.json           dataset-level metadata (generator config, bag ids, dims)
  hierarchy.json          text hierarchy with base64 float arrays
  <bag_id>.low.f32        N x D little-endian float32, row-major
  <bag_id>.high.f32       (N*16) x D little-endian float32, row-major
  <bag_id>.json           {bag_id, N, M, D, label, validity (base64 bitset)}

Every file is written atomically: temp file in the target directory, then
os.replace.
"""

import base64
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from .datamodel import build_bag, check_hierarchy
from .types import HIGH_PER_LOW, FeatureBag, FilterMasks, HHGraph, TextHierarchy


PathLike = Union[str, Path]
FLOAT_DTYPE = "<f4"


def _atomic_write(path: Path, data: bytes) -> None:
    """Write bytes to path via a temp file and os.replace."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(temp_path, path)
    except Exception:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise


def write_json(path: PathLike, payload) -> None:
    _atomic_write(Path(path), (json.dumps(payload, indent=2, default=str) + "\n").encode("utf-8"))


def write_text(path: PathLike, text: str) -> None:
    _atomic_write(Path(path), text.encode("utf-8"))


def read_json(path: PathLike):
    with open(path) as f:
        return json.load(f)


def encode_array(arr: np.ndarray) -> Dict:
    arr = np.ascontiguousarray(arr, dtype=FLOAT_DTYPE)
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(payload: Dict) -> np.ndarray:
    raw = base64.b64decode(payload["data"])
    return np.frombuffer(raw, dtype=FLOAT_DTYPE).reshape(payload["shape"]).astype(np.float32)


def encode_bitset(bits: np.ndarray) -> str:
    return base64.b64encode(np.packbits(bits.astype(bool), bitorder="little").tobytes()).decode("ascii")


def decode_bitset(text: str, length: int) -> np.ndarray:
    packed = np.frombuffer(base64.b64decode(text), dtype=np.uint8)
    return np.unpackbits(packed, bitorder="little")[:length].astype(bool)


# Bags

def save_bag(directory: PathLike, bag: FeatureBag) -> None:
    directory = Path(directory)
    _atomic_write(directory / f"{bag.bag_id}.low.f32", bag.low_feats.astype(FLOAT_DTYPE).tobytes())
    _atomic_write(directory / f"{bag.bag_id}.high.f32", bag.high_feats.astype(FLOAT_DTYPE).tobytes())
    write_json(directory / f"{bag.bag_id}.json", {
        "bag_id": bag.bag_id,
        "N": bag.num_low,
        "M": HIGH_PER_LOW,
        "D": bag.dim,
        "label": bag.label,
        "validity": encode_bitset(bag.validity),
    })


def load_bag(directory: PathLike, bag_id: str) -> FeatureBag:
    """Read one bag; rows are re-normalised on load."""
    directory = Path(directory)
    meta = read_json(directory / f"{bag_id}.json")
    n, m, d = int(meta["N"]), int(meta["M"]), int(meta["D"])
    if m != HIGH_PER_LOW:
        raise ValueError(f"bag {bag_id} declares M={m}, expected {HIGH_PER_LOW}")
    low = np.fromfile(directory / f"{bag_id}.low.f32", dtype=FLOAT_DTYPE).reshape(n, d)
    high = np.fromfile(directory / f"{bag_id}.high.f32", dtype=FLOAT_DTYPE).reshape(n * m, d)
    validity = decode_bitset(meta["validity"], n * m)
    return build_bag(meta["bag_id"], low, high, validity, int(meta["label"]))


# Text hierarchy

def save_hierarchy(path: PathLike, h: TextHierarchy) -> None:
    write_json(path, {
        "num_classes": h.num_classes,
        "parents_per_class": h.parents_per_class,
        "children_per_parent": h.children_per_parent,
        "base_parent_emb": encode_array(h.base_parent_emb),
        "base_child_emb": encode_array(h.base_child_emb),
        "context_low": encode_array(h.context_low),
        "context_high": encode_array(h.context_high),
    })


def load_hierarchy(path: PathLike) -> TextHierarchy:
    data = read_json(path)
    h = TextHierarchy(
        num_classes=int(data["num_classes"]),
        parents_per_class=int(data["parents_per_class"]),
        children_per_parent=int(data["children_per_parent"]),
        base_parent_emb=decode_array(data["base_parent_emb"]),
        base_child_emb=decode_array(data["base_child_emb"]),
        context_low=decode_array(data["context_low"]),
        context_high=decode_array(data["context_high"]),
    )
    check_hierarchy(h)
    return h


# Datasets

def save_dataset(
    directory: PathLike,
    bags: List[FeatureBag],
    hierarchy: TextHierarchy,
    generator: Optional[Dict] = None,
) -> Path:
    directory = Path(directory)
    for bag in bags:
        save_bag(directory, bag)
    save_hierarchy(directory / "hierarchy.json", hierarchy)
    write_json(directory / "manifest.json", {
        "bag_ids": [bag.bag_id for bag in bags],
        "num_classes": hierarchy.num_classes,
        "dim": bags[0].dim if bags else None,
        "generator": generator,
    })
    return directory


def load_dataset(directory: PathLike) -> Tuple[List[FeatureBag], TextHierarchy]:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    bags = [load_bag(directory, bag_id) for bag_id in manifest["bag_ids"]]
    return bags, load_hierarchy(directory / "hierarchy.json")


# Checkpoints

def save_checkpoint(path_prefix: PathLike, state: Dict[str, torch.Tensor], extra: Optional[Dict] = None) -> None:
    """
    Write named tensors as one blob (<prefix>.bin) plus a JSON manifest
    (<prefix>.json) listing name, shape, dtype and byte offset.
    """
    prefix = Path(path_prefix)
    entries, chunks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        dtype = np.dtype(arr.dtype).newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    _atomic_write(prefix.with_suffix(".bin"), b"".join(chunks))
    write_json(prefix.with_suffix(".json"), {"tensors": entries, "extra": extra or {}})


def load_checkpoint(path_prefix: PathLike) -> Tuple[Dict[str, torch.Tensor], Dict]:
    prefix = Path(path_prefix)
    manifest = read_json(prefix.with_suffix(".json"))
    blob = prefix.with_suffix(".bin").read_bytes()
    state = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return state, manifest.get("extra", {})


# Debug dumps

def masks_to_json(bag_id: str, masks: FilterMasks) -> Dict:
    return {
        "bag_id": bag_id,
        "alpha": masks.alpha,
        "low": np.argwhere(masks.low).tolist(),
        "high": np.argwhere(masks.high).tolist(),
    }


def graph_to_json(g: HHGraph) -> Dict:
    return {
        "bag_id": g.bag_id,
        "nodes": {t: g.num_nodes(t) for t in g.node_feats},
        "high_index": g.high_index.tolist(),
        "edges": {relation: pairs.tolist() for relation, pairs in g.edges.items()},
    }
