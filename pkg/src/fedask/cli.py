"""Command-line thin client for the simulation service.

Every command talks HTTP to the service: by default an in-process ASGI
transport (no server needed), or a remote instance via --server /
FEDASK_SERVER. Outputs land under --out, FEDASK_OUT, or the working
directory. Exit codes: 0 success, 2 configuration error, 3 degenerate-math
error.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import httpx

from .config import ConfigError, load_config
from .metrics import RoundReport, write_json, write_rounds_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3


def _client(server: str | None) -> httpx.Client:
    server = server or os.environ.get("FEDASK_SERVER")
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    from .service.app import create_app

    transport = httpx.ASGITransport(app=create_app())
    return httpx.Client(transport=transport, base_url="http://fedask.local", timeout=600.0)


def _out_dir(out: str | None) -> Path:
    return Path(out or os.environ.get("FEDASK_OUT") or ".")


def _fail_from_response(response: httpx.Response) -> int:
    try:
        body = response.json()
    except json.JSONDecodeError:
        body = {"detail": response.text}
    detail = body.get("detail", body)
    click.echo(f"error: {detail}", err=True)
    if response.status_code == 422:
        return EXIT_CONFIG
    if response.status_code == 500 and body.get("error") == "degenerate-math":
        return EXIT_DEGENERATE
    return 1


def _reports_from_records(records: list[dict]) -> list[RoundReport]:
    return [
        RoundReport(
            round_index=rec["round"],
            method=rec["method"],
            fidelity_cosine=rec["cosine"],
            fidelity_frobenius_gap=rec["frob_gap"],
            task_loss=rec["loss"],
            uplink_bytes=rec["up_bytes"],
            downlink_bytes=rec["down_bytes"],
            epsilon=rec.get("epsilon"),
            delta=rec.get("delta"),
            sigma=rec.get("sigma"),
            fidelity_cosine_post=rec.get("cosine_post"),
            spectrum=tuple(rec.get("spectrum") or ()),
        )
        for rec in records
    ]


@click.group()
def main() -> None:
    """Federated low-rank adaptation simulator with double-sketch aggregation."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(), help="JSON config file.")
@click.option("--set", "overrides", multiple=True, help="Override a config field: key.path=value.")
@click.option("--out", default=None, help="Output directory (default: $FEDASK_OUT or cwd).")
@click.option("--server", default=None, help="Remote service URL (default: in-process).")
def run(config_path: str, overrides: tuple[str, ...], out: str | None, server: str | None) -> None:
    """Run the configured experiment and write rounds.csv + summary.json."""
    try:
        cfg = load_config(config_path, list(overrides))
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    out_dir = _out_dir(out if out is not None else cfg.output_dir)
    with _client(server) as client:
        response = client.post("/run", json=cfg.model_dump(mode="json"))
    if response.status_code != 200:
        sys.exit(_fail_from_response(response))
    payload = response.json()
    reports = _reports_from_records(payload["rounds"])
    csv_path = write_rounds_csv(reports, out_dir / "rounds.csv")
    json_path = write_json(payload["summary"], out_dir / "summary.json")
    write_json(cfg.model_dump(mode="json"), out_dir / "resolved_config.json")
    click.echo(f"wrote {csv_path} and {json_path}")
    sys.exit(EXIT_OK)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--set", "overrides", multiple=True)
@click.option("--server", default=None)
def account(config_path: str, overrides: tuple[str, ...], server: str | None) -> None:
    """Print the privacy spend of a configuration without training."""
    try:
        cfg = load_config(config_path, list(overrides))
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    with _client(server) as client:
        response = client.post("/account", json=cfg.model_dump(mode="json"))
    if response.status_code != 200:
        sys.exit(_fail_from_response(response))
    click.echo(json.dumps(response.json(), sort_keys=True, indent=2))
    sys.exit(EXIT_OK)


GRID_CSV_COLUMNS = (
    "cohort", "hetero", "fedask_cosine", "fedask_cosine_post",
    "fedavg_cosine", "fedavg_frob_gap",
)


@main.command(name="fidelity-grid")
@click.option("--out", default=None, help="Output directory.")
@click.option("--seed", default=0, type=int)
@click.option("--local-steps", default=30, type=int)
@click.option("--server", default=None)
def fidelity_grid(out: str | None, seed: int, local_steps: int, server: str | None) -> None:
    """Aggregation fidelity over cohort size x heterogeneity; writes grid.csv."""
    out_dir = _out_dir(out)
    body = {"seed": seed, "local_steps": local_steps}
    with _client(server) as client:
        response = client.post("/fidelity-grid", json=body)
    if response.status_code != 200:
        sys.exit(_fail_from_response(response))
    payload = response.json()
    out_dir.mkdir(parents=True, exist_ok=True)
    grid_path = out_dir / "grid.csv"
    with grid_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_CSV_COLUMNS)
        for cell in payload["cells"]:
            writer.writerow([
                cell["cohort"], cell["hetero"],
                repr(cell["fedask_cosine"]), repr(cell["fedask_cosine_post"]),
                repr(cell["fedavg_cosine"]), repr(cell["fedavg_frob_gap"]),
            ])
    write_json(payload, out_dir / "grid_summary.json")
    click.echo(f"wrote {grid_path}")
    sys.exit(EXIT_OK)


@main.command(name="noise-study")
@click.option("--out", default=None, help="Output directory.")
@click.option("--seed", default=0, type=int)
@click.option("--mc-trials", default=20000, type=int)
@click.option("--server", default=None)
def noise_study(out: str | None, seed: int, mc_trials: int, server: str | None) -> None:
    """Noise power (predicted vs Monte-Carlo) and downstream loss per scheme."""
    out_dir = _out_dir(out)
    body = {"seed": seed, "mc_trials": mc_trials}
    with _client(server) as client:
        response = client.post("/noise-study", json=body)
    if response.status_code != 200:
        sys.exit(_fail_from_response(response))
    payload = response.json()
    out_dir.mkdir(parents=True, exist_ok=True)
    power_path = out_dir / "noise_power.csv"
    with power_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sigma", "scheme", "predicted_linear", "predicted_quadratic",
             "predicted_total", "empirical"]
        )
        for row in payload["power"]:
            writer.writerow([
                repr(row["sigma"]), row["scheme"], repr(row["predicted_linear"]),
                repr(row["predicted_quadratic"]), repr(row["predicted_total"]),
                repr(row["empirical"]),
            ])
    training_path = out_dir / "noise_training.csv"
    with training_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "loss_both", "loss_b_only"])
        for row in payload["training"]:
            writer.writerow([repr(row["sigma"]), repr(row["loss_both"]), repr(row["loss_b_only"])])
    write_json(payload, out_dir / "noise_summary.json")
    click.echo(f"wrote {power_path} and {training_path}")
    sys.exit(EXIT_OK)


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host: str, port: int) -> None:
    """Run the simulation service."""
    import uvicorn

    uvicorn.run("fedask.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
