"""Deterministic synthetic dataset + mock scripts for desk-scale runs.

Ten small tiles, each with a colored rectangle whose color is the ground
truth answer and whose bounds are the ground-truth box. The bundled mock
scripts answer from the ground truth, predict a slightly offset box, fail
proportionally to severity, and propose three grounded regions with
scores {0.9, 0.5, 0.3}.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .imagecore import make_rng, save_image

__all__ = ["generate_synthetic_dataset", "COLORS"]

COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.75),
    "orange": (0.95, 0.55, 0.10),
    "teal": (0.10, 0.65, 0.65),
    "magenta": (0.85, 0.15, 0.65),
    "olive": (0.50, 0.55, 0.10),
    "navy": (0.08, 0.10, 0.45),
}

GROUNDER_PROPOSALS = [
    {"box": [0.10, 0.10, 0.55, 0.55], "score": 0.9, "phrase": "upper region"},
    {"box": [0.40, 0.40, 0.90, 0.90], "score": 0.5, "phrase": "lower region"},
    {"box": [0.20, 0.60, 0.60, 0.95], "score": 0.3, "phrase": "side region"},
]


def _tile(size: int, color: tuple, box: tuple, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, (4, 4, 3))
    reps = int(np.ceil(size / 4))
    img = np.repeat(np.repeat(base, reps, axis=0), reps, axis=1)[:size, :size]
    x1, y1, x2, y2 = box
    img[y1:y2, x1:x2] = np.asarray(color)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(
    out_dir, n: int = 10, size: int = 32, seed: int = 20240501
) -> dict:
    """Write images/, dataset.jsonl, mocks/*.json and config.yaml.

    Returns the paths of everything written. Fully deterministic: the same
    arguments always produce byte-identical files.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    mock_dir = out_dir / "mocks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mock_dir.mkdir(parents=True, exist_ok=True)

    names = list(COLORS)
    lines = []
    bbox_by_sample = {}
    for i in range(n):
        rng = make_rng(seed + i)
        color_name = names[i % len(names)]
        x1 = 4 + (3 * i) % (size // 2)
        y1 = 4 + (5 * i) % (size // 2)
        x2 = min(size - 2, x1 + size // 3)
        y2 = min(size - 2, y1 + size // 4)
        sample_id = f"tile_{i:02d}"
        img = _tile(size, COLORS[color_name], (x1, y1, x2, y2), rng)
        save_image(img, img_dir / f"{sample_id}.png")
        lines.append(
            {
                "id": sample_id,
                "question": f"What color is the marked rectangle in {sample_id}?",
                "image": f"images/{sample_id}.png",
                "ground_truth": color_name,
                "gt_bbox": [x1, y1, x2, y2],
            }
        )
        # predicted box: ground truth shifted by one pixel, so IoU < 1
        bbox_by_sample[sample_id] = f"[{x1 + 1}, {y1 + 1}, {x2 + 1}, {y2 + 1}]"

    dataset_path = out_dir / "dataset.jsonl"
    with dataset_path.open("w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, ensure_ascii=False) + "\n")

    model_script = {
        "echo_ground_truth": True,
        "severity_fail_rate": 0.15,
        "wrong_answer": "i cannot tell",
        "bbox_by_sample": bbox_by_sample,
    }
    judge_script = {}
    grounder_script = {"normalized": True, "proposals": GROUNDER_PROPOSALS}

    paths = {
        "dataset": dataset_path,
        "model_script": mock_dir / "model.json",
        "judge_script": mock_dir / "judge.json",
        "grounder_script": mock_dir / "grounder.json",
        "config": out_dir / "config.yaml",
    }
    paths["model_script"].write_text(json.dumps(model_script, indent=2, sort_keys=True))
    paths["judge_script"].write_text(json.dumps(judge_script, indent=2, sort_keys=True))
    paths["grounder_script"].write_text(
        json.dumps(grounder_script, indent=2, sort_keys=True)
    )

    config = f"""\
dataset: {dataset_path}
image_root: {out_dir}
paradigms: [standard, viscot, viscot_grounded]
severities: [1, 2, 3, 4, 5]
perturb_location: global_only
master_seed: 7
judge: exact
grounding_threshold: 0.4
concurrency: 4
output_dir: {out_dir / "results"}
"""
    paths["config"].write_text(config)
    return paths
