"""Cohort directory format: manifest + one binary record per episode.

Layout:
    <dir>/manifest.json   schema version, generator config echo, split map
    <dir>/episodes.bin    magic + one container block per episode

Unobserved entries are stored as 0.0 on disk; the masks are authoritative
and loading restores the in-memory NaN sentinel. Re-encoding a loaded
cohort reproduces the original bytes exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .config import SimConfig, config_hash, sim_config_from_dict, to_dict
from .serialize import FormatError, read_block, write_block
from .simulator import Episode, StepObservation

SCHEMA_VERSION = 1
_MAGIC = b"BRLCOH01"


class CohortError(ValueError):
    """Raised on malformed cohort directories."""


def save_cohort(
    directory: Union[str, Path],
    episodes: Sequence[Episode],
    config: SimConfig,
    splits: Optional[Dict[str, List[int]]] = None,
) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = {"train": [ep.episode_id for ep in episodes]}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": to_dict(config),
        "config_hash": config_hash(config),
        "n_episodes": len(episodes),
        "splits": {k: sorted(v) for k, v in splits.items()},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(out / "episodes.bin", "wb") as fh:
        fh.write(_MAGIC)
        for ep in episodes:
            _write_episode(fh, ep)
    return out


def _write_episode(fh, ep: Episode) -> None:
    L = len(ep.steps)
    values = np.stack([s.values for s in ep.steps])  # [L, sub, D]
    mask = np.stack([s.mask for s in ep.steps])
    gaps = np.stack([s.time_gaps for s in ep.steps])
    embeds = np.stack([s.text_embeds for s in ep.steps])  # [L, M, d_e]
    counts = np.stack([s.text_counts for s in ep.steps])
    tmask = np.stack([s.text_mask for s in ep.steps])
    recency = np.array([s.text_recency for s in ep.steps])
    density = np.array([s.doc_density for s in ep.steps])

    header = {
        "episode_id": ep.episode_id,
        "length": L,
        "outcome": ep.outcome,
    }
    arrays = {
        "static": ep.static.astype(np.float64),
        "values": np.where(mask > 0, values, 0.0).astype(np.float64),
        "mask": mask.astype(np.uint8),
        "time_gaps": gaps.astype(np.float64),
        "text_embeds": np.where(tmask[:, :, None] > 0, embeds, 0.0).astype(np.float64),
        "text_counts": counts.astype(np.int64),
        "text_mask": tmask.astype(np.uint8),
        "text_recency": recency.astype(np.float64),
        "doc_density": density.astype(np.float64),
        "actions": ep.actions.astype(np.int64),
        "rewards": ep.rewards.astype(np.float64),
        "dones": ep.dones.astype(np.uint8),
        "true_severity": ep.true_severity.astype(np.float64),
    }
    write_block(fh, header, arrays)


def load_cohort(directory: Union[str, Path]):
    """Returns (episodes, config, splits) from a cohort directory."""
    root = Path(directory)
    mpath = root / "manifest.json"
    epath = root / "episodes.bin"
    if not mpath.exists() or not epath.exists():
        raise CohortError(f"not a cohort directory: {root}")
    with open(mpath, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CohortError(f"unsupported schema version {manifest.get('schema_version')}")
    config = sim_config_from_dict(manifest["config"])
    episodes = []
    with open(epath, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CohortError("bad episode-file magic")
        while True:
            try:
                header, arrays = read_block(fh)
            except EOFError:
                break
            episodes.append(_episode_from_block(header, arrays))
    if len(episodes) != manifest["n_episodes"]:
        raise CohortError(
            f"manifest says {manifest['n_episodes']} episodes, file has {len(episodes)}"
        )
    return episodes, config, manifest["splits"]


def _episode_from_block(header, arrays) -> Episode:
    L = header["length"]
    mask = arrays["mask"]
    values = np.where(mask > 0, arrays["values"], np.nan)
    tmask = arrays["text_mask"]
    embeds = np.where(tmask[:, :, None] > 0, arrays["text_embeds"], np.nan)
    steps = [
        StepObservation(
            values=values[h],
            mask=mask[h],
            time_gaps=arrays["time_gaps"][h],
            text_embeds=embeds[h],
            text_counts=arrays["text_counts"][h],
            text_mask=tmask[h],
            text_recency=float(arrays["text_recency"][h]),
            doc_density=float(arrays["doc_density"][h]),
        )
        for h in range(L)
    ]
    return Episode(
        episode_id=header["episode_id"],
        static=arrays["static"],
        steps=steps,
        actions=arrays["actions"],
        rewards=arrays["rewards"],
        dones=arrays["dones"],
        true_severity=arrays["true_severity"],
        outcome=header["outcome"],
    )


def split_episodes(episodes: Sequence[Episode], splits: Dict[str, List[int]]) -> Dict[str, List[Episode]]:
    by_id = {ep.episode_id: ep for ep in episodes}
    out = {}
    for name, ids in splits.items():
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise CohortError(f"split {name} references unknown episode ids {missing[:5]}")
        out[name] = [by_id[i] for i in ids]
    return out


def save_text_sidecar(path: Union[str, Path], table: Dict[tuple, np.ndarray]) -> None:
    """External pre-embedded text keyed by (episode_id, step, modality)."""
    with open(path, "wb") as fh:
        fh.write(b"BRLTXT01")
        keys = sorted(table)
        arrays = {f"{e}:{h}:{j}": np.asarray(v, dtype=np.float64) for (e, h, j) in keys for v in [table[(e, h, j)]]}
        write_block(fh, {"n_entries": len(keys)}, arrays)


def load_text_sidecar(path: Union[str, Path]) -> Dict[tuple, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(8) != b"BRLTXT01":
            raise FormatError("bad text sidecar magic")
        _, arrays = read_block(fh)
    out = {}
    for key, vec in arrays.items():
        e, h, j = key.split(":")
        out[(int(e), int(h), int(j))] = vec
    return out


def apply_text_sidecar(episodes: Sequence[Episode], table: Dict[tuple, np.ndarray]) -> None:
    """Overwrite step text embeddings in place with external vectors."""
    by_id = {ep.episode_id: ep for ep in episodes}
    for (eid, h, j), vec in table.items():
        ep = by_id.get(eid)
        if ep is None or h >= len(ep.steps):
            continue
        step = ep.steps[h]
        if vec.shape != step.text_embeds[j].shape:
            raise CohortError(
                f"sidecar vector for ({eid},{h},{j}) has shape {vec.shape}, "
                f"expected {step.text_embeds[j].shape}"
            )
        step.text_embeds[j] = vec
        if step.text_mask[j] == 0:
            step.text_mask[j] = 1
            step.text_counts[j] = 1
