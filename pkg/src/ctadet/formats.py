"""On-disk record formats: annotation JSONL, candidate JSONL, dataset
manifest.

Annotation record (one lesion per line):
    {"volume_id": "...", "center_vox": [x, y, z], "diameter_vox": s,
     "labels": {"size_class": "3-5mm", "location": "...", ...}}

Candidate record (one detection per line):
    {"volume_id": "...", "center_vox": [x, y, z], "diameter_vox": s,
     "prob": p, "stage": "detector" | "reduced"}

All writers emit sorted-key JSON so reruns are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .anchors import BoundingBox, Lesion
from .fpr import FprLabel, FprTrainingRecord
from .postproc import CandidateDetection, Stage


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True) + "\n"


def write_annotations(path, lesions_by_volume: Mapping[str, Sequence[Lesion]]) -> None:
    with open(path, "w") as f:
        for volume_id, lesions in lesions_by_volume.items():
            for lesion in lesions:
                f.write(
                    _dump_line(
                        {
                            "volume_id": volume_id,
                            "center_vox": list(lesion.box.center),
                            "diameter_vox": lesion.box.diameter,
                            "labels": dict(lesion.labels),
                        }
                    )
                )


def read_annotations(path) -> dict[str, list[Lesion]]:
    """Lesions grouped by volume id; volumes without lesions do not appear."""
    out: dict[str, list[Lesion]] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            lesion = Lesion(
                BoundingBox(tuple(rec["center_vox"]), rec["diameter_vox"]),
                {str(k): str(v) for k, v in rec.get("labels", {}).items()},
            )
            out.setdefault(str(rec["volume_id"]), []).append(lesion)
    return out


def write_candidates(
    path, volume_id: str, candidates: Sequence[CandidateDetection]
) -> None:
    with open(path, "w") as f:
        for c in candidates:
            f.write(
                _dump_line(
                    {
                        "volume_id": volume_id,
                        "center_vox": list(c.box.center),
                        "diameter_vox": c.box.diameter,
                        "prob": c.probability,
                        "stage": c.stage.value,
                    }
                )
            )


def read_candidates(path) -> list[tuple[str, CandidateDetection]]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                (
                    str(rec["volume_id"]),
                    CandidateDetection(
                        BoundingBox(tuple(rec["center_vox"]), rec["diameter_vox"]),
                        float(rec["prob"]),
                        Stage(rec["stage"]),
                    ),
                )
            )
    return out


def write_fpr_manifest(path, records: Sequence[FprTrainingRecord]) -> None:
    """Training-patch manifest: one line per (candidate, scale) patch."""
    with open(path, "w") as f:
        for r in records:
            f.write(
                _dump_line(
                    {
                        "volume_id": r.volume_id,
                        "center_vox": list(r.center_vox),
                        "label": r.label.value,
                        "scale": r.scale,
                        "patch_file": r.patch_file,
                    }
                )
            )


def read_fpr_manifest(path) -> list[FprTrainingRecord]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                FprTrainingRecord(
                    volume_id=str(rec["volume_id"]),
                    center_vox=tuple(float(c) for c in rec["center_vox"]),
                    label=FprLabel(rec["label"]),
                    scale=int(rec["scale"]),
                    patch_file=str(rec["patch_file"]),
                )
            )
    return out


@dataclass(frozen=True)
class ManifestVolume:
    volume_id: str
    volume: str  # path to the .vol.json sidecar, relative to the manifest
    n_lesions: int = 0


@dataclass(frozen=True)
class Manifest:
    volumes: tuple[ManifestVolume, ...]
    annotations: str  # path to the annotation JSONL, relative to the manifest
    seed: Optional[int] = None

    def volume_ids(self) -> list[str]:
        return [v.volume_id for v in self.volumes]


def write_manifest(path, manifest: Manifest) -> None:
    doc = {
        "seed": manifest.seed,
        "annotations": manifest.annotations,
        "volumes": [
            {
                "volume_id": v.volume_id,
                "volume": v.volume,
                "n_lesions": v.n_lesions,
            }
            for v in manifest.volumes
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_manifest(path) -> Manifest:
    doc = json.loads(Path(path).read_text())
    return Manifest(
        volumes=tuple(
            ManifestVolume(
                str(v["volume_id"]), str(v["volume"]), int(v.get("n_lesions", 0))
            )
            for v in doc["volumes"]
        ),
        annotations=str(doc["annotations"]),
        seed=doc.get("seed"),
    )


def write_froc_csv(path, thresholds, points) -> None:
    lines = ["threshold,fppv,sensitivity"]
    lines += [f"{t},{f},{s}" for t, (f, s) in zip(thresholds, points)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_roc_csv(path, thresholds, points) -> None:
    lines = ["threshold,fpr,tpr"]
    lines += [f"{t},{f},{s}" for t, (f, s) in zip(thresholds, points)]
    Path(path).write_text("\n".join(lines) + "\n")
