"""FastAPI service exposing the toolkit: corruption and attack endpoints,
metric helpers, sweep execution and report emission.

The CLI drives this app in-process by default; `viscotbench serve` runs it
standalone for remote clients. Evaluate/report operate on server-local
paths, matching the desk-scale single-machine deployment.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import yaml
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field, field_validator

from . import __version__
from .attacks import ATTACK_PRESETS, apply_attack
from .clients import (
    ExactMatchJudge,
    HttpGrounderClient,
    HttpModelClient,
    MockGrounder,
    MockJudge,
    RemoteLlmJudge,
    ScriptedMockModel,
    decode_image_b64,
    encode_image_b64,
)
from .corruptions import CORRUPTION_PRESETS, apply_corruption, preset_for
from .encoder import ToyEncoder
from .errors import (
    DatasetError,
    ImageFormatError,
    PresetError,
    UndefinedMetricError,
    ViscotBenchError,
)
from .harness import (
    PARADIGMS,
    PERTURBATION_ORDER,
    Services,
    default_conditions,
    load_dataset,
    run_sweep,
)
from .imagecore import BBox, make_rng
from .metrics import attention_entropy, iou, pdr
from .report import report_from_records

app = FastAPI(title="viscotbench", version=__version__)


class CorruptRequest(BaseModel):
    image_b64: str
    kind: str
    severity: int = Field(ge=1, le=5)
    seed: int = 0


class CorruptResponse(BaseModel):
    image_b64: str
    kind: str
    severity: int
    params: dict


class AttackRequest(BaseModel):
    image_b64: str
    kind: str
    severity: int = Field(ge=1, le=5)
    seed: int = 0
    encoder: str = "toy"
    encoder_seed: int = 0


class AttackResponse(BaseModel):
    image_b64: str
    kind: str
    severity: int
    params: dict
    linf: float
    l2: float
    loss_trace: list[float]


class PdrRequest(BaseModel):
    acc_clean: float
    acc_perturbed: float


class IouRequest(BaseModel):
    box1: list[float] = Field(min_length=4, max_length=4)
    box2: list[float] = Field(min_length=4, max_length=4)


class EntropyRequest(BaseModel):
    scores: list[list[float]]


class RunConfig(BaseModel):
    """Validated evaluate configuration (the CLI config file schema)."""

    dataset: str
    image_root: str | None = None
    paradigms: list[str] = list(PARADIGMS)
    perturbations: list[str] = list(PERTURBATION_ORDER)
    severities: list[int] = [1, 2, 3, 4, 5]
    perturb_location: str = "global_only"
    master_seed: int = 0
    judge: str = "exact"
    grounding_threshold: float = Field(default=0.4, ge=0.0, le=1.0)
    concurrency: int = Field(default=4, ge=1)
    output_dir: str = "results"
    results_name: str = "results.jsonl"
    encoder_seed: int = 0
    model_endpoint: str | None = None
    model_token: str | None = None
    judge_endpoint: str | None = None
    judge_token: str | None = None
    grounder_endpoint: str | None = None

    @field_validator("paradigms")
    @classmethod
    def _check_paradigms(cls, v):
        for p in v:
            if p not in PARADIGMS:
                raise ValueError(f"unknown paradigm {p!r}")
        return v

    @field_validator("perturbations")
    @classmethod
    def _check_perturbations(cls, v):
        for kind in v:
            if kind not in PERTURBATION_ORDER:
                raise ValueError(f"unknown perturbation {kind!r}")
        return v

    @field_validator("severities")
    @classmethod
    def _check_severities(cls, v):
        if not set(v) <= {1, 2, 3, 4, 5}:
            raise ValueError(f"severities must be within 1..5, got {v}")
        return v

    @field_validator("perturb_location")
    @classmethod
    def _check_location(cls, v):
        if v not in ("global_only", "global_and_local"):
            raise ValueError(f"unknown perturb location {v!r}")
        return v

    @field_validator("judge")
    @classmethod
    def _check_judge(cls, v):
        if v not in ("exact", "remote"):
            raise ValueError(f"judge must be 'exact' or 'remote', got {v!r}")
        return v


def load_run_config(path) -> RunConfig:
    """Parse a YAML or JSON config file into a validated RunConfig."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return RunConfig(**data)


class EvaluateRequest(BaseModel):
    config: RunConfig
    mock_model: str | None = None
    mock_judge: str | None = None
    mock_grounder: str | None = None
    resume: bool = True


class ConditionRow(BaseModel):
    condition: str
    n: int
    accuracy: float | None
    pdr: float | None


class EvaluateResponse(BaseModel):
    results_path: str
    n_written: int
    n_skipped: int
    n_errors: int
    summary: list[ConditionRow]


class ReportRequest(BaseModel):
    results_path: str
    out_dir: str
    attention_path: str | None = None


class ReportResponse(BaseModel):
    files: list[str]


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=str(exc))


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.get("/presets/corruptions")
def corruption_presets():
    return {
        kind.value: {str(i + 1): params for i, params in enumerate(rows)}
        for kind, rows in CORRUPTION_PRESETS.items()
    }


@app.get("/presets/attacks")
def attack_presets():
    return {
        kind.value: {str(i + 1): params for i, params in enumerate(rows)}
        for kind, rows in ATTACK_PRESETS.items()
    }


@app.post("/corrupt", response_model=CorruptResponse)
def corrupt(req: CorruptRequest):
    try:
        preset = preset_for(req.kind, req.severity)
        img = decode_image_b64(req.image_b64)
        out = apply_corruption(img, preset, make_rng(req.seed))
    except (PresetError, ValueError, ImageFormatError) as exc:
        raise _bad_request(exc) from exc
    return CorruptResponse(
        image_b64=encode_image_b64(out),
        kind=preset.kind.value,
        severity=preset.level,
        params=preset.params,
    )


def _make_encoder(name: str, seed: int) -> ToyEncoder:
    if name == "toy":
        return ToyEncoder(seed=seed)
    if name == "toy-linear":
        return ToyEncoder(seed=seed, linear=True)
    raise PresetError(f"unknown encoder {name!r}")


@app.post("/attack", response_model=AttackResponse)
def attack(req: AttackRequest):
    try:
        enc = _make_encoder(req.encoder, req.encoder_seed)
        img = decode_image_b64(req.image_b64)
        result = apply_attack(img, enc, req.kind, req.severity, seed=req.seed)
    except (PresetError, ValueError, ImageFormatError) as exc:
        raise _bad_request(exc) from exc
    cfg = result.config
    params = {
        k: v
        for k, v in (
            ("epsilon", cfg.epsilon),
            ("alpha", cfg.alpha),
            ("iters", cfg.iters),
            ("c_weight", cfg.c_weight),
            ("lr", cfg.lr),
        )
        if v is not None
    }
    return AttackResponse(
        image_b64=encode_image_b64(result.image),
        kind=cfg.kind.value,
        severity=cfg.level,
        params=params,
        linf=result.linf,
        l2=result.l2,
        loss_trace=result.losses,
    )


@app.post("/metrics/pdr")
def metric_pdr(req: PdrRequest):
    try:
        return {"pdr": pdr(req.acc_clean, req.acc_perturbed)}
    except UndefinedMetricError as exc:
        raise _bad_request(exc) from exc


@app.post("/metrics/iou")
def metric_iou(req: IouRequest):
    try:
        return {"iou": iou(BBox(*req.box1), BBox(*req.box2))}
    except (UndefinedMetricError, ValueError) as exc:
        raise _bad_request(exc) from exc


@app.post("/metrics/entropy")
def metric_entropy(req: EntropyRequest):
    try:
        return {"entropy_nats": attention_entropy(req.scores)}
    except (UndefinedMetricError, ValueError) as exc:
        raise _bad_request(exc) from exc


def _load_script(path: str | None) -> dict | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise _bad_request(FileNotFoundError(f"mock script not found: {p}"))
    return json.loads(p.read_text(encoding="utf-8"))


def _build_services(cfg: RunConfig, req: EvaluateRequest) -> Services:
    model_script = _load_script(req.mock_model)
    judge_script = _load_script(req.mock_judge)
    grounder_script = _load_script(req.mock_grounder)

    if model_script is not None:
        model = ScriptedMockModel(model_script)
    else:
        endpoint = cfg.model_endpoint or os.environ.get("MODEL_ENDPOINT")
        if not endpoint:
            raise _bad_request(ValueError("no model endpoint configured and no mock given"))
        token = cfg.model_token or os.environ.get("MODEL_TOKEN", "")
        model = HttpModelClient(endpoint, token=token, inflight_limit=cfg.concurrency)

    if judge_script is not None:
        judge = MockJudge(judge_script)
    elif cfg.judge == "exact":
        judge = ExactMatchJudge()
    else:
        endpoint = cfg.judge_endpoint or os.environ.get("JUDGE_ENDPOINT")
        if not endpoint:
            raise _bad_request(ValueError("judge=remote but no judge endpoint configured"))
        token = cfg.judge_token or os.environ.get("JUDGE_TOKEN", "")
        judge = RemoteLlmJudge(endpoint, token=token, inflight_limit=cfg.concurrency)

    grounder = None
    grounder_live = False
    if grounder_script is not None:
        grounder = MockGrounder(grounder_script)
    else:
        endpoint = cfg.grounder_endpoint or os.environ.get("GROUNDER_ENDPOINT")
        if endpoint:
            grounder = HttpGrounderClient(endpoint, inflight_limit=cfg.concurrency)
            grounder_live = True
        elif "viscot_grounded" in cfg.paradigms:
            raise _bad_request(
                ValueError("viscot_grounded paradigm needs a grounder endpoint or mock")
            )

    live = (
        model_script is None
        or (cfg.judge == "remote" and judge_script is None)
        or grounder_live
    )
    return Services(
        model=model,
        judge=judge,
        grounder=grounder,
        encoder=ToyEncoder(seed=cfg.encoder_seed),
        grounding_threshold=cfg.grounding_threshold,
        deterministic_timing=not live,
    )


@app.post("/evaluate", response_model=EvaluateResponse)
def evaluate(req: EvaluateRequest):
    cfg = req.config
    dataset_path = Path(cfg.dataset)
    if not dataset_path.exists():
        raise _bad_request(FileNotFoundError(f"dataset not found: {dataset_path}"))
    if cfg.image_root is not None and not Path(cfg.image_root).exists():
        raise _bad_request(FileNotFoundError(f"image root not found: {cfg.image_root}"))
    try:
        samples = load_dataset(dataset_path, image_root=cfg.image_root)
    except DatasetError as exc:
        raise _bad_request(exc) from exc
    if not samples:
        raise _bad_request(ValueError("dataset is empty"))

    services = _build_services(cfg, req)
    conditions = default_conditions(
        paradigms=cfg.paradigms,
        master_seed=cfg.master_seed,
        perturbations=cfg.perturbations,
        severities=cfg.severities,
        perturb_location=cfg.perturb_location,
    )
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / cfg.results_name
    summary = run_sweep(
        samples,
        conditions,
        services,
        results_path,
        dataset=dataset_path.stem,
        workers=cfg.concurrency,
        resume=req.resume,
    )
    return EvaluateResponse(
        results_path=str(results_path),
        n_written=summary.n_written,
        n_skipped=summary.n_skipped,
        n_errors=summary.n_errors,
        summary=[
            ConditionRow(condition=r.condition, n=r.n, accuracy=r.accuracy, pdr=r.pdr)
            for r in summary.rows
        ],
    )


@app.post("/report", response_model=ReportResponse)
def report(req: ReportRequest):
    results = Path(req.results_path)
    if not results.exists():
        raise _bad_request(FileNotFoundError(f"results not found: {results}"))
    try:
        files = report_from_records(results, req.out_dir, attention_path=req.attention_path)
    except UndefinedMetricError as exc:
        # runtime failure, not a usage error: the file exists but holds no rows
        raise HTTPException(status_code=500, detail=str(exc)) from exc
    except ViscotBenchError as exc:
        raise _bad_request(exc) from exc
    return ReportResponse(files=[str(f) for f in files])
