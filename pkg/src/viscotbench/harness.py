"""Evaluation harness: dataset ingestion, condition matrices, the three
pipeline orchestrations, the severity sweep runner and aggregation.

Sweeps append one JSON-line record per (sample, condition) and are
resumable: existing keys are skipped. With a fixed master seed and mocked
clients the produced bytes are identical across runs; per-task seeds come
from a stable hash so processing order never leaks between tasks.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock
from typing import Sequence

import numpy as np

from .attacks import AttackKind, apply_attack
from .clients import (
    GrounderClient,
    Judge,
    ModelClient,
    ModelRequest,
    judge_answer,
    propose_regions,
)
from .corruptions import CorruptionKind, apply_corruption, preset_for
from .encoder import EncoderModel, ToyEncoder
from .errors import (
    DatasetError,
    EmptyRegionError,
    EndpointError,
    JudgeError,
    TransportError,
    UndefinedMetricError,
)
from .imagecore import BBox, crop, derive_seed, load_image, make_rng
from .metrics import iou as iou_metric
from .metrics import pdr as pdr_metric

__all__ = [
    "VqaSample",
    "Perturbation",
    "Condition",
    "EvalRecord",
    "Services",
    "PARADIGMS",
    "CORRUPTION_ORDER",
    "ATTACK_ORDER",
    "PERTURBATION_ORDER",
    "load_dataset",
    "condition_key",
    "condition_hash",
    "default_conditions",
    "perturb_image",
    "run_standard",
    "run_viscot",
    "run_viscot_grounded",
    "run_sweep",
    "aggregate",
    "read_records",
    "GroupStats",
    "SweepSummary",
]

log = logging.getLogger(__name__)

PARADIGMS = ("standard", "viscot", "viscot_grounded")

CORRUPTION_ORDER = tuple(k.value for k in CorruptionKind)
ATTACK_ORDER = ("bim", "fgsm", "pgd", "cw")
PERTURBATION_ORDER = CORRUPTION_ORDER + ATTACK_ORDER


@dataclass(frozen=True)
class VqaSample:
    id: str
    question: str
    image_path: Path
    ground_truth: str
    gt_bbox: BBox | None = None


@dataclass(frozen=True)
class Perturbation:
    family: str  # "corruption" | "attack"
    kind: str
    severity: int

    def __post_init__(self):
        if self.family == "corruption":
            CorruptionKind(self.kind)
        elif self.family == "attack":
            AttackKind(self.kind)
        else:
            raise ValueError(f"unknown perturbation family {self.family!r}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError(f"severity must be 1..5, got {self.severity}")


def perturbation_for(kind: str, severity: int) -> Perturbation:
    """Build a Perturbation from a bare kind name (corruption or attack)."""
    family = "attack" if kind in ATTACK_ORDER else "corruption"
    return Perturbation(family=family, kind=kind, severity=severity)


@dataclass(frozen=True)
class Condition:
    """One evaluation setting: paradigm x perturbation x location x seed."""

    paradigm: str
    perturbation: Perturbation | None = None
    perturb_location: str = "global_only"
    seed: int = 0

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}")
        if self.perturb_location not in ("global_only", "global_and_local"):
            raise ValueError(f"unknown perturb location {self.perturb_location!r}")


def condition_key(cond: Condition) -> str:
    if cond.perturbation is None:
        pert = "clean"
    else:
        p = cond.perturbation
        pert = f"{p.family}:{p.kind}:{p.severity}"
    return f"{cond.paradigm}|{pert}|{cond.perturb_location}|seed={cond.seed}"


def condition_hash(cond: Condition) -> str:
    return f"{derive_seed('condition', condition_key(cond)):016x}"


def default_conditions(
    paradigms: Sequence[str] = PARADIGMS,
    master_seed: int = 0,
    perturbations: Sequence[str] = PERTURBATION_ORDER,
    severities: Sequence[int] = (1, 2, 3, 4, 5),
    perturb_location: str = "global_only",
) -> list[Condition]:
    """Clean + every (perturbation, severity) cell, for each paradigm."""
    conditions = []
    for paradigm in paradigms:
        conditions.append(
            Condition(paradigm, None, perturb_location=perturb_location, seed=master_seed)
        )
        for kind in perturbations:
            for severity in severities:
                conditions.append(
                    Condition(
                        paradigm,
                        perturbation_for(kind, severity),
                        perturb_location=perturb_location,
                        seed=master_seed,
                    )
                )
    return conditions


@dataclass
class EvalRecord:
    """One (sample x condition) outcome, serialized as a JSON line."""

    dataset: str
    sample_id: str
    paradigm: str
    perturbation_family: str | None
    perturbation: str | None
    severity: int | None
    perturb_location: str
    seed: int
    condition_key: str
    condition_hash: str
    raw_answer: str
    judged_correct: bool | None
    pred_bbox: list | None
    iou: float | None
    n_ground_patches: int
    bbox_parse_miss: bool
    judge_version: str
    wall_time_ms: int
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, ensure_ascii=False)


@dataclass
class Services:
    """Collaborators for a run; any client may be a deterministic mock."""

    model: ModelClient
    judge: Judge
    grounder: GrounderClient | None = None
    encoder: EncoderModel | None = None
    grounding_threshold: float = 0.4
    deterministic_timing: bool = False

    def resolve_encoder(self) -> EncoderModel:
        if self.encoder is None:
            self.encoder = ToyEncoder()
        return self.encoder


def load_dataset(path, image_root=None) -> list[VqaSample]:
    """Read a JSONL dataset of {id, question, image, ground_truth, gt_bbox?}.

    Image paths are resolved against `image_root` (defaults to the dataset
    file's directory). Duplicate ids are rejected.
    """
    path = Path(path)
    root = Path(image_root) if image_root is not None else path.parent
    samples: list[VqaSample] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            try:
                sample_id = str(obj["id"])
                question = str(obj["question"])
                image = str(obj["image"])
                ground_truth = str(obj["ground_truth"])
            except KeyError as exc:
                raise DatasetError(f"{path}:{lineno}: missing field {exc}") from exc
            if sample_id in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate id {sample_id!r}")
            seen.add(sample_id)
            gt_bbox = None
            if obj.get("gt_bbox") is not None:
                vals = obj["gt_bbox"]
                if len(vals) != 4:
                    raise DatasetError(f"{path}:{lineno}: gt_bbox needs 4 values")
                gt_bbox = BBox(*(float(v) for v in vals))
            samples.append(
                VqaSample(
                    id=sample_id,
                    question=question,
                    image_path=root / image,
                    ground_truth=ground_truth,
                    gt_bbox=gt_bbox,
                )
            )
    return samples


def perturb_image(
    img: np.ndarray,
    pert: Perturbation | None,
    seed: int,
    encoder: EncoderModel | None = None,
) -> np.ndarray:
    """Apply one perturbation cell (or none) deterministically from seed."""
    if pert is None:
        return img
    if pert.family == "corruption":
        return apply_corruption(img, preset_for(pert.kind, pert.severity), make_rng(seed))
    if encoder is None:
        raise ValueError("attacks need an encoder")
    return apply_attack(img, encoder, pert.kind, pert.severity, seed=seed).image


def _context(dataset: str, sample: VqaSample, cond: Condition) -> dict:
    pert = cond.perturbation
    return {
        "dataset": dataset,
        "sample_id": sample.id,
        "ground_truth": sample.ground_truth,
        "paradigm": cond.paradigm,
        "perturbation": pert.kind if pert else "",
        "severity": pert.severity if pert else 0,
    }


class _Timer:
    def __init__(self, deterministic: bool):
        self.deterministic = deterministic
        self._start = time.perf_counter()

    def elapsed_ms(self) -> int:
        if self.deterministic:
            return 1
        return max(1, int((time.perf_counter() - self._start) * 1000))


def _base_record(dataset: str, sample: VqaSample, cond: Condition, seed: int) -> EvalRecord:
    pert = cond.perturbation
    return EvalRecord(
        dataset=dataset,
        sample_id=sample.id,
        paradigm=cond.paradigm,
        perturbation_family=pert.family if pert else None,
        perturbation=pert.kind if pert else None,
        severity=pert.severity if pert else None,
        perturb_location=cond.perturb_location,
        seed=seed,
        condition_key=condition_key(cond),
        condition_hash=condition_hash(cond),
        raw_answer="",
        judged_correct=None,
        pred_bbox=None,
        iou=None,
        n_ground_patches=0,
        bbox_parse_miss=False,
        judge_version="",
        wall_time_ms=0,
    )


def _judge_into(record: EvalRecord, services: Services, sample: VqaSample, answer: str):
    record.raw_answer = answer
    record.judge_version = services.judge.version
    try:
        record.judged_correct = judge_answer(
            services.judge, answer, sample.ground_truth, sample.question
        )
    except JudgeError as exc:
        record.judged_correct = None
        record.error = f"judge_error: {exc}"


def run_standard(
    sample: VqaSample,
    img: np.ndarray,
    services: Services,
    cond: Condition,
    seed: int,
    dataset: str = "dataset",
) -> EvalRecord:
    """Single-turn pipeline: one direct_answer query, judged."""
    record = _base_record(dataset, sample, cond, seed)
    timer = _Timer(services.deterministic_timing)
    ctx = _context(dataset, sample, cond)
    try:
        resp = services.model.query(
            ModelRequest(sample.question, (img,), "direct_answer"), context=ctx
        )
    except (TransportError, EndpointError) as exc:
        record.error = f"model_error: {exc}"
        record.wall_time_ms = timer.elapsed_ms()
        return record
    _judge_into(record, services, sample, resp.text)
    record.wall_time_ms = timer.elapsed_ms()
    return record


def _predict_patch_box(
    sample: VqaSample, img: np.ndarray, services: Services, ctx: dict
) -> tuple[BBox, bool]:
    """Turn 1: ask for the most relevant region; fall back to the full
    image on a parse miss."""
    h, w = img.shape[:2]
    resp = services.model.query(
        ModelRequest(sample.question, (img,), "predict_bbox"), context=ctx
    )
    box = resp.parsed_bbox
    if box is None:
        return BBox(0.0, 0.0, float(w), float(h)), True
    try:
        crop(img, box)  # probe: a box fully outside the image is a miss too
    except EmptyRegionError:
        return BBox(0.0, 0.0, float(w), float(h)), True
    return box, False


def _perturb_patch(
    patch: np.ndarray, cond: Condition, seed: int, services: Services, tag
) -> np.ndarray:
    if cond.perturb_location != "global_and_local" or cond.perturbation is None:
        return patch
    encoder = None
    if cond.perturbation.family == "attack":
        encoder = services.resolve_encoder()
    return perturb_image(patch, cond.perturbation, derive_seed(seed, "patch", tag), encoder)


def run_viscot(
    sample: VqaSample,
    img: np.ndarray,
    services: Services,
    cond: Condition,
    seed: int,
    dataset: str = "dataset",
) -> EvalRecord:
    """Two-turn pipeline: predict a region, crop it, answer with both views."""
    record = _base_record(dataset, sample, cond, seed)
    timer = _Timer(services.deterministic_timing)
    ctx = _context(dataset, sample, cond)
    try:
        box, miss = _predict_patch_box(sample, img, services, ctx)
        patch = crop(img, box)
        patch = _perturb_patch(patch, cond, seed, services, "main")
        resp = services.model.query(
            ModelRequest(sample.question, (img, patch), "direct_answer"), context=ctx
        )
    except (TransportError, EndpointError) as exc:
        record.error = f"model_error: {exc}"
        record.wall_time_ms = timer.elapsed_ms()
        return record
    record.bbox_parse_miss = miss
    if not miss:
        record.pred_bbox = box.as_list()
        if sample.gt_bbox is not None:
            try:
                record.iou = iou_metric(box, sample.gt_bbox)
            except UndefinedMetricError:
                record.iou = None
    _judge_into(record, services, sample, resp.text)
    record.wall_time_ms = timer.elapsed_ms()
    return record


def run_viscot_grounded(
    sample: VqaSample,
    img: np.ndarray,
    services: Services,
    cond: Condition,
    seed: int,
    dataset: str = "dataset",
) -> EvalRecord:
    """Two-turn pipeline augmented with grounded region patches."""
    record = _base_record(dataset, sample, cond, seed)
    timer = _Timer(services.deterministic_timing)
    ctx = _context(dataset, sample, cond)
    proposals = []
    if services.grounder is not None:
        try:
            proposals = propose_regions(
                services.grounder,
                img,
                sample.question,
                threshold=services.grounding_threshold,
                context=ctx,
            )
        except (TransportError, EndpointError) as exc:
            record.error = f"grounder_error: {exc}"
            proposals = []
    try:
        box, miss = _predict_patch_box(sample, img, services, ctx)
        patch = crop(img, box)
        patch = _perturb_patch(patch, cond, seed, services, "main")
        extra = []
        for i, prop in enumerate(proposals):
            try:
                ground_patch = crop(img, prop.box)
            except EmptyRegionError:
                continue
            extra.append(_perturb_patch(ground_patch, cond, seed, services, f"ground{i}"))
        images = (img, patch, *extra)
        resp = services.model.query(
            ModelRequest(sample.question, images, "direct_answer"), context=ctx
        )
    except (TransportError, EndpointError) as exc:
        record.error = f"model_error: {exc}"
        record.wall_time_ms = timer.elapsed_ms()
        return record
    record.n_ground_patches = len(extra)
    record.bbox_parse_miss = miss
    if not miss:
        record.pred_bbox = box.as_list()
        if sample.gt_bbox is not None:
            try:
                record.iou = iou_metric(box, sample.gt_bbox)
            except UndefinedMetricError:
                record.iou = None
    _judge_into(record, services, sample, resp.text)
    record.wall_time_ms = timer.elapsed_ms()
    return record


_RUNNERS = {
    "standard": run_standard,
    "viscot": run_viscot,
    "viscot_grounded": run_viscot_grounded,
}


class _ImageCache:
    def __init__(self):
        self._lock = Lock()
        self._images: dict[str, np.ndarray] = {}

    def get(self, sample: VqaSample) -> np.ndarray:
        with self._lock:
            img = self._images.get(sample.id)
            if img is None:
                img = load_image(sample.image_path)
                self._images[sample.id] = img
        return img


@dataclass
class ConditionSummary:
    condition: str
    n: int
    accuracy: float | None
    pdr: float | None


@dataclass
class SweepSummary:
    n_written: int
    n_skipped: int
    n_errors: int
    rows: list[ConditionSummary] = field(default_factory=list)


def read_records(path) -> list[dict]:
    records = []
    path = Path(path)
    if not path.exists():
        return records
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _run_task(args) -> EvalRecord:
    dataset, sample, img, cond, services = args
    seed = derive_seed(cond.seed, sample.id, condition_key(cond))
    pert_seed = derive_seed(seed, "global")
    encoder = None
    if cond.perturbation is not None and cond.perturbation.family == "attack":
        encoder = services.resolve_encoder()
    perturbed = perturb_image(img, cond.perturbation, pert_seed, encoder)
    runner = _RUNNERS[cond.paradigm]
    return runner(sample, perturbed, services, cond, seed, dataset=dataset)


def run_sweep(
    samples: Sequence[VqaSample],
    conditions: Sequence[Condition],
    services: Services,
    out_path,
    dataset: str = "dataset",
    workers: int = 4,
    resume: bool = True,
) -> SweepSummary:
    """Run every (sample x condition), appending records as JSON lines.

    Existing (dataset, sample, condition) keys in the output are skipped,
    so interrupted runs can resume. Records are written in task-submission
    order regardless of worker scheduling.
    """
    out_path = Path(out_path)
    existing: set[tuple] = set()
    if resume:
        for rec in read_records(out_path):
            existing.add((rec["dataset"], rec["sample_id"], rec["condition_hash"]))
    cache = _ImageCache()
    tasks = []
    n_skipped = 0
    for cond in conditions:
        chash = condition_hash(cond)
        for sample in samples:
            if (dataset, sample.id, chash) in existing:
                n_skipped += 1
                continue
            tasks.append((dataset, sample, cache.get(sample), cond, services))
    mode = "a" if (resume and out_path.exists()) else "w"
    n_errors = 0
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open(mode, encoding="utf-8") as fh:
        if workers > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = pool.map(_run_task, tasks)
                for record in results:
                    if record.error:
                        n_errors += 1
                    fh.write(record.to_json() + "\n")
        else:
            for task in tasks:
                record = _run_task(task)
                if record.error:
                    n_errors += 1
                fh.write(record.to_json() + "\n")
    summary = SweepSummary(n_written=len(tasks), n_skipped=n_skipped, n_errors=n_errors)
    summary.rows = _summarize(read_records(out_path))
    return summary


def _summarize(records: list[dict]) -> list[ConditionSummary]:
    by_cond: dict[str, list[dict]] = {}
    for rec in records:
        by_cond.setdefault(rec["condition_key"], []).append(rec)
    clean_acc: dict[tuple, float] = {}
    for key, recs in by_cond.items():
        if "|clean|" in key:
            acc = _accuracy_of(recs)
            if acc is not None:
                clean_acc[(recs[0]["dataset"], recs[0]["paradigm"])] = acc
    rows = []
    for key in sorted(by_cond):
        recs = by_cond[key]
        acc = _accuracy_of(recs)
        pdr_val = None
        base = clean_acc.get((recs[0]["dataset"], recs[0]["paradigm"]))
        if acc is not None and base is not None and base > 0 and "|clean|" not in key:
            pdr_val = pdr_metric(base, acc)
        rows.append(ConditionSummary(condition=key, n=len(recs), accuracy=acc, pdr=pdr_val))
    return rows


def _accuracy_of(recs: list[dict]) -> float | None:
    judged = [r["judged_correct"] for r in recs if r["judged_correct"] is not None]
    if not judged:
        return None
    return sum(judged) / len(judged)


@dataclass
class GroupStats:
    """Aggregated outcomes for one (dataset, paradigm, perturbation,
    severity) cell. perturbation None means the clean condition."""

    dataset: str
    paradigm: str
    perturbation: str | None
    severity: int | None
    n: int
    accuracy: float | None
    pdr: float | None
    mean_iou: float | None
    mean_entropy: float | None


def aggregate(records_path, attention_path=None) -> list[GroupStats]:
    """Group records into the (dataset, paradigm, perturbation, severity)
    table of accuracy, PDR against the matching clean condition, mean IoU
    and mean attention entropy (from the optional sidecar file of
    {sample_id, condition, scores} rows)."""
    from .metrics import attention_entropy

    records = read_records(records_path)
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        key = (rec["dataset"], rec["paradigm"], rec["perturbation"], rec["severity"])
        groups.setdefault(key, []).append(rec)

    entropy_by_group: dict[tuple, list[float]] = {}
    if attention_path is not None and Path(attention_path).exists():
        by_sample_cond = {
            (rec["sample_id"], rec["condition_key"]): rec for rec in records
        }
        with Path(attention_path).open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                rec = by_sample_cond.get((row["sample_id"], row["condition"]))
                if rec is None:
                    log.warning(
                        "attention row for unknown (sample, condition): %s / %s",
                        row["sample_id"],
                        row["condition"],
                    )
                    continue
                key = (rec["dataset"], rec["paradigm"], rec["perturbation"], rec["severity"])
                entropy_by_group.setdefault(key, []).append(
                    attention_entropy(row["scores"])
                )

    clean_acc: dict[tuple, float | None] = {}
    for key, recs in groups.items():
        if key[2] is None:
            clean_acc[(key[0], key[1])] = _accuracy_of(recs)

    stats = []
    order = {kind: i for i, kind in enumerate(PERTURBATION_ORDER)}
    sort_key = lambda k: (k[0], k[1], k[2] is not None, order.get(k[2], 99), k[3] or 0)
    for key in sorted(groups, key=sort_key):
        dataset, paradigm, pert, severity = key
        recs = groups[key]
        acc = _accuracy_of(recs)
        pdr_val = None
        if pert is not None and acc is not None:
            base = clean_acc.get((dataset, paradigm))
            if base is None:
                log.warning("no clean accuracy for (%s, %s); PDR omitted", dataset, paradigm)
            elif base > 0:
                pdr_val = pdr_metric(base, acc)
        ious = [r["iou"] for r in recs if r.get("iou") is not None]
        ents = entropy_by_group.get(key, [])
        stats.append(
            GroupStats(
                dataset=dataset,
                paradigm=paradigm,
                perturbation=pert,
                severity=severity,
                n=len(recs),
                accuracy=acc,
                pdr=pdr_val,
                mean_iou=float(np.mean(ious)) if ious else None,
                mean_entropy=float(np.mean(ents)) if ents else None,
            )
        )
    return stats
