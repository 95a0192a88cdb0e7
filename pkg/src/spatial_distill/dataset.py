"""Dataset assembly and the on-disk layout.

A dataset directory holds::

    config.yaml       dataset section used to build it
    vocab.txt         one token per line, line index = token id
    scenes.jsonl      one SceneGraph per line
    manifest.jsonl    one record per QA sample
    scenes/scene_NNNNN.npz

Each ``.npz`` container stores named little-endian arrays for one scene:

    features          <f4 (views, H, W, C)   render features
    depth             <f4 (views, H, W)      meters
    camera_position   <f4 (views, 3)
    spatial_features  <f4 (views, sg, sg, Cs) teacher spatial maps
    depth_bin_dist    <f4 (views, H, W, B)   teacher depth-bin distribution
    det_class_probs   <f4 (objects, categories)
    det_boxes         <f4 (objects, 6)       center and size / room size
    rel_lr, rel_ab    <f4 (pairs, 2)         teacher relation distributions
    answer_ids_J      <i4 (|A|,)             answer ids of scene sample J
    soft_logits_J     <f4 (|A|, vocab)       teacher soft targets of sample J
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import scene as sc
from .config import DatasetConfig, RunConfig
from .tokenizer import Vocab, build_vocab


@dataclass
class Sample:
    sample_id: int
    scene_index: int
    qa: sc.QASample
    answer_ids: np.ndarray
    soft_targets: np.ndarray


@dataclass
class SceneRecord:
    graph: sc.SceneGraph
    features: np.ndarray
    depth: np.ndarray
    camera_position: np.ndarray
    teacher: dict[str, np.ndarray]


@dataclass
class Dataset:
    config: DatasetConfig
    vocab: Vocab
    scenes: list[SceneRecord] = field(default_factory=list)
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def manifest(self) -> list[dict]:
        rows = []
        for s in self.samples:
            rows.append(
                {
                    "sample_id": s.sample_id,
                    "scene_id": s.qa.scene_id,
                    "scene_file": scene_filename(s.scene_index),
                    "view_ids": list(range(self.config.n_views)),
                    "question_text": s.qa.question_text,
                    "answer_text": s.qa.answer_text,
                    "relation": s.qa.relation,
                    "referenced_object_ids": list(s.qa.referenced_object_ids),
                }
            )
        return rows

    def split(self, val_frac: float, seed: int) -> tuple[list[int], list[int]]:
        """Scene-level split so validation scenes are never seen in training."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self.scenes))
        n_val = int(round(len(self.scenes) * val_frac))
        val_scenes = set(order[:n_val].tolist())
        train = [i for i, s in enumerate(self.samples) if s.scene_index not in val_scenes]
        val = [i for i, s in enumerate(self.samples) if s.scene_index in val_scenes]
        return train, val


def scene_filename(index: int) -> str:
    return f"scenes/scene_{index:05d}.npz"


def scene_seed(seed: int, index: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, index, attempt]).generate_state(1)[0])


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def build_dataset(cfg: DatasetConfig, seed: int, n_scenes: Optional[int] = None) -> Dataset:
    """Pure function of (seed, cfg)."""
    vocab = build_vocab(sc.template_corpus(cfg.catalog))
    ds = Dataset(cfg, vocab)
    for index in range(cfg.n_scenes if n_scenes is None else n_scenes):
        for attempt in range(10):
            try:
                graph = sc.generate_scene(scene_seed(seed, index, attempt), cfg, scene_id=index)
                break
            except sc.SceneInfeasibleError:
                continue
        else:
            raise sc.SceneInfeasibleError(f"scene {index} infeasible after 10 reseeds")
        views = sc.render_views(graph, cfg.n_views, cfg)
        # round through float32 so in-memory and on-disk datasets agree exactly
        teacher = {k: _f32(v) for k, v in sc.scene_teacher(graph, views, cfg).items()}
        ds.scenes.append(
            SceneRecord(
                graph,
                np.stack([v.features for v in views]),
                np.stack([v.depth for v in views]),
                np.array([v.camera_position for v in views], dtype=np.float32),
                teacher,
            )
        )
        for qa in sc.make_qa(graph, scene_seed(seed, index, 1000), cfg):
            sig = sc.teacher_signals(graph, views, qa, vocab, cfg, scene_part=teacher)
            ds.samples.append(Sample(len(ds.samples), index, qa, sig.answer_token_ids, _f32(sig.soft_logits)))
    return ds


def write_dataset(ds: Dataset, out_dir: Path) -> None:
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(
        yaml.safe_dump(RunConfig(dataset=ds.config).to_dict()["dataset"], sort_keys=False)
    )
    ds.vocab.save(out / "vocab.txt")
    with open(out / "scenes.jsonl", "w") as fh:
        for rec in ds.scenes:
            fh.write(json.dumps(rec.graph.to_dict()) + "\n")
    with open(out / "manifest.jsonl", "w") as fh:
        for row in ds.manifest():
            fh.write(json.dumps(row) + "\n")
    per_scene: dict[int, list[Sample]] = {}
    for s in ds.samples:
        per_scene.setdefault(s.scene_index, []).append(s)
    for index, rec in enumerate(ds.scenes):
        arrays = {
            "features": rec.features.astype("<f4"),
            "depth": rec.depth.astype("<f4"),
            "camera_position": rec.camera_position.astype("<f4"),
        }
        arrays.update({k: v.astype("<f4") for k, v in rec.teacher.items()})
        for j, s in enumerate(per_scene.get(index, [])):
            arrays[f"answer_ids_{j}"] = s.answer_ids.astype("<i4")
            arrays[f"soft_logits_{j}"] = s.soft_targets.astype("<f4")
        np.savez(out / scene_filename(index), **arrays)


def read_manifest(data_dir: Path) -> list[dict]:
    with open(Path(data_dir) / "manifest.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(data_dir: Path) -> Dataset:
    data_dir = Path(data_dir)
    cfg = RunConfig.from_dict({"dataset": yaml.safe_load((data_dir / "config.yaml").read_text())}).dataset
    vocab = Vocab.load(data_dir / "vocab.txt")
    ds = Dataset(cfg, vocab)
    with open(data_dir / "scenes.jsonl") as fh:
        graphs = [sc.SceneGraph.from_dict(json.loads(line)) for line in fh if line.strip()]
    teacher_keys = ("spatial_features", "depth_bin_dist", "det_class_probs", "det_boxes", "rel_lr", "rel_ab")
    containers = []
    for index, graph in enumerate(graphs):
        with np.load(data_dir / scene_filename(index)) as z:
            arrays = {k: z[k] for k in z.files}
        containers.append(arrays)
        ds.scenes.append(
            SceneRecord(
                graph,
                arrays["features"],
                arrays["depth"],
                arrays["camera_position"],
                {k: arrays[k].astype(np.float64) for k in teacher_keys},
            )
        )
    counters: dict[int, int] = {}
    for row in read_manifest(data_dir):
        index = int(row["scene_file"].split("_")[-1].split(".")[0])
        j = counters.get(index, 0)
        counters[index] = j + 1
        qa = sc.QASample(
            row["scene_id"], row["question_text"], row["answer_text"], row["relation"], tuple(row["referenced_object_ids"])
        )
        arrays = containers[index]
        ds.samples.append(
            Sample(
                row["sample_id"],
                index,
                qa,
                arrays[f"answer_ids_{j}"].astype(np.int64),
                arrays[f"soft_logits_{j}"].astype(np.float64),
            )
        )
    return ds
