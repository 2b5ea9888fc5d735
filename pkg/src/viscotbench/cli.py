"""Command-line surface: a thin client over the FastAPI service.

Without --server the app is driven in-process; with --server the same
requests go to a remote instance (evaluate/report paths are then resolved
on the server's filesystem).

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import base64
import csv
import sys
from pathlib import Path

import click
import httpx

from .clients import encode_image_b64
from .imagecore import load_image
from .errors import ImageFormatError, ViscotBenchError

CORRUPTION_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "zoom_blur",
    "pixelate",
    "elastic_transform",
    "contrast",
)
ATTACK_KINDS = ("fgsm", "bim", "pgd", "cw")


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=httpx.Timeout(None))
    import warnings

    with warnings.catch_warnings():
        # starlette's httpx deprecation notice is noise on CLI stderr
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app)


def _detail(resp: httpx.Response) -> str:
    try:
        return str(resp.json().get("detail", resp.text))
    except ValueError:
        return resp.text


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    try:
        resp = client.post(path, json=payload)
    except httpx.HTTPError as exc:
        raise click.ClickException(f"service unreachable: {exc}") from exc
    if resp.status_code >= 500:
        raise click.ClickException(_detail(resp))
    if resp.status_code >= 400:
        raise click.UsageError(_detail(resp))
    return resp.json()


def _encode_file(path: str) -> str:
    try:
        return encode_image_b64(load_image(path))
    except (ImageFormatError, OSError) as exc:
        raise click.UsageError(str(exc)) from exc


def _write_png(b64_payload: str, out_path: str):
    Path(out_path).write_bytes(base64.b64decode(b64_payload))


@click.group()
def main():
    """Robustness benchmarking for visual chain-of-thought pipelines."""


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--kind", required=True, type=click.Choice(CORRUPTION_KINDS))
@click.option("--severity", required=True, type=click.IntRange(1, 5))
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--server", default=None, help="Remote service URL (default: in-process).")
def corrupt(in_path, out_path, kind, severity, seed, server):
    """Apply one corruption at a severity preset and write a PNG."""
    with _client(server) as client:
        body = _post(
            client,
            "/corrupt",
            {"image_b64": _encode_file(in_path), "kind": kind, "severity": severity, "seed": seed},
        )
    _write_png(body["image_b64"], out_path)
    params = " ".join(f"{k}={v}" for k, v in body["params"].items())
    click.echo(f"{body['kind']} severity {body['severity']}: {params}", err=True)
    click.echo(out_path)


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--kind", required=True, type=click.Choice(ATTACK_KINDS))
@click.option("--severity", required=True, type=click.IntRange(1, 5))
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--encoder", default="toy", type=click.Choice(["toy", "toy-linear"]), show_default=True)
@click.option("--trace-out", default=None, type=click.Path(dir_okay=False), help="Write the loss trace CSV here.")
@click.option("--server", default=None)
def attack(in_path, out_path, kind, severity, seed, encoder, trace_out, server):
    """Run one white-box attack at a severity preset and write a PNG."""
    with _client(server) as client:
        body = _post(
            client,
            "/attack",
            {
                "image_b64": _encode_file(in_path),
                "kind": kind,
                "severity": severity,
                "seed": seed,
                "encoder": encoder,
            },
        )
    _write_png(body["image_b64"], out_path)
    params = " ".join(f"{k}={v}" for k, v in body["params"].items())
    click.echo(f"{body['kind']} severity {body['severity']}: {params}", err=True)
    click.echo(f"linf={body['linf']:.8f} l2={body['l2']:.8f}", err=True)
    if trace_out:
        with open(trace_out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows((i, repr(v)) for i, v in enumerate(body["loss_trace"]))
        click.echo(f"trace: {trace_out}", err=True)
    click.echo(out_path)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mock-model", default=None, type=click.Path(), help="Scripted mock model JSON.")
@click.option("--mock-judge", default=None, type=click.Path(), help="Scripted mock judge JSON.")
@click.option("--mock-grounder", default=None, type=click.Path(), help="Scripted mock grounder JSON.")
@click.option("--resume/--no-resume", default=True, show_default=True)
@click.option("--server", default=None)
def evaluate(config_path, mock_model, mock_judge, mock_grounder, resume, server):
    """Run the (sample x condition) sweep described by a config file."""
    from .service import load_run_config

    try:
        cfg = load_run_config(config_path)
    except (ViscotBenchError, ValueError) as exc:
        raise click.UsageError(str(exc)) from exc
    base = Path(config_path).resolve().parent

    def _absolute(p):
        return None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))

    cfg.dataset = _absolute(cfg.dataset)
    cfg.image_root = _absolute(cfg.image_root)
    cfg.output_dir = _absolute(cfg.output_dir)
    payload = {
        "config": cfg.model_dump(),
        "mock_model": _absolute(mock_model),
        "mock_judge": _absolute(mock_judge),
        "mock_grounder": _absolute(mock_grounder),
        "resume": resume,
    }
    with _client(server) as client:
        body = _post(client, "/evaluate", payload)
    click.echo(
        f"wrote {body['n_written']} records ({body['n_skipped']} skipped, "
        f"{body['n_errors']} errors) -> {body['results_path']}"
    )
    click.echo(f"{'condition':60s} {'n':>4s} {'acc':>7s} {'pdr':>8s}")
    for row in body["summary"]:
        acc = "-" if row["accuracy"] is None else f"{row['accuracy']:.3f}"
        pdr = "-" if row["pdr"] is None else f"{row['pdr'] * 100:+.1f}%"
        click.echo(f"{row['condition']:60s} {row['n']:4d} {acc:>7s} {pdr:>8s}")
    if body["n_errors"] > 0:
        sys.exit(1)


@main.command()
@click.option("--results", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--attention", default=None, type=click.Path(), help="Attention sidecar JSONL.")
@click.option("--server", default=None)
def report(results, out_dir, attention, server):
    """Emit the plot-ready CSV report set from a results file."""
    payload = {
        "results_path": str(Path(results).resolve()),
        "out_dir": str(Path(out_dir).resolve()),
        "attention_path": None if attention is None else str(Path(attention).resolve()),
    }
    with _client(server) as client:
        body = _post(client, "/report", payload)
    for f in body["files"]:
        click.echo(f)


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--n", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--size", default=32, show_default=True, type=click.IntRange(min=8))
@click.option("--seed", default=20240501, show_default=True, type=int)
def synth(out_dir, n, size, seed):
    """Generate the bundled synthetic dataset, mock scripts and config."""
    from .synthetic import generate_synthetic_dataset

    paths = generate_synthetic_dataset(out_dir, n=n, size=size, seed=seed)
    for name, path in paths.items():
        click.echo(f"{name}: {path}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True, type=int)
def serve(host, port):
    """Run the service for remote clients."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
