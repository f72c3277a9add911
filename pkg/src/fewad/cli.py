"""Thin command-line client for the service.

Every command builds the same request models the HTTP API consumes.
Without ``--server`` the request is executed in-process through the
service handlers; with ``--server URL`` it is POSTed to a running
instance instead.  Config precedence: built-in defaults < ``--config``
file < ``--set key=value`` < explicit flags.

Exit codes: 0 success, 1 input error, 2 runtime error.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import httpx
from pydantic import ValidationError

from ._version import __version__
from .config import AblationFlags, RunConfig
from .errors import FewadError, InputError
from .service import handlers
from .service.schemas import (
    AblateRequest,
    AblateResponse,
    EvalRequest,
    EvalResponse,
    ScoreRequest,
    ScoreResponse,
    TrainRequest,
    TrainResponse,
)

_FLAG_NAMES = ("sc", "eam", "vad", "align")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _assign(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise InputError(f"--set {dotted}: {key} is not a section")
    node[keys[-1]] = value


def _build_config(
    config_file: str | None,
    sets: tuple[str, ...],
    dataset_root: str | None,
    output_dir: str | None,
    categories: str | None,
    k: int | None,
    seeds: str | None,
    ablation_flags: dict[str, bool | None],
) -> RunConfig:
    data: dict = {}
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
    for item in sets:
        key, sep, raw = item.partition("=")
        if not sep:
            raise InputError(f"--set expects key=value, got {item!r}")
        _assign(data, key.strip(), _parse_value(raw))
    if dataset_root is not None:
        data["dataset_root"] = dataset_root
    if output_dir is not None:
        data["output_dir"] = output_dir
    if categories is not None:
        data["categories"] = [c for c in categories.split(",") if c]
    if k is not None:
        data["k"] = k
    if seeds is not None:
        try:
            data["seeds"] = [int(s) for s in seeds.split(",") if s]
        except ValueError as exc:
            raise InputError(f"--seeds expects comma-separated integers: {exc}") from exc
    overrides = {name: flag for name, flag in ablation_flags.items() if flag is not None}
    if overrides:
        data["ablation"] = {**data.get("ablation", {}), **overrides}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise InputError(f"invalid configuration:\n{exc}") from exc


def _post(server: str, path: str, request, response_cls):
    response = httpx.post(
        server.rstrip("/") + path,
        json=request.model_dump(mode="json"),
        timeout=None,
    )
    if response.status_code in (400, 422):  # bad input vs schema mismatch
        try:
            detail = response.json().get("detail", response.text)
        except Exception:
            detail = response.text
        raise InputError(str(detail))
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except Exception:
            detail = response.text
        raise FewadError(f"server returned {response.status_code}: {detail}")
    return response_cls.model_validate(response.json())


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InputError as exc:
            click.echo(f"input error: {exc}", err=True)
            sys.exit(1)
        except httpx.HTTPError as exc:
            click.echo(f"connection error: {exc}", err=True)
            sys.exit(2)
        except FewadError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)

    return wrapper


def _config_options(fn):
    fn = click.option("--config", "config_file", type=str, default=None,
                      help="JSON config file (RunConfig document).")(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                      help="Override a config key (dotted path, JSON value).")(fn)
    fn = click.option("--dataset-root", type=str, default=None)(fn)
    fn = click.option("--output-dir", type=str, default=None)(fn)
    fn = click.option("--categories", type=str, default=None,
                      help="Comma-separated category filter (default: all).")(fn)
    fn = click.option("--k", type=int, default=None, help="Shots per category.")(fn)
    fn = click.option("--seeds", type=str, default=None, help="Comma-separated seeds.")(fn)
    for name in _FLAG_NAMES:
        fn = click.option(f"--{name}/--no-{name}", name, default=None,
                          help=f"Toggle the {name} branch/loss.")(fn)
    return fn


def _gather(kwargs) -> RunConfig:
    return _build_config(
        kwargs.pop("config_file"),
        kwargs.pop("sets"),
        kwargs.pop("dataset_root"),
        kwargs.pop("output_dir"),
        kwargs.pop("categories"),
        kwargs.pop("k"),
        kwargs.pop("seeds"),
        {name: kwargs.pop(name) for name in _FLAG_NAMES},
    )


@click.group()
@click.version_option(version=__version__)
@click.option("--server", envvar="FEWAD_SERVER", default=None,
              help="Base URL of a running service; default runs in-process.")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Few-shot anomaly detection: train prompt banks, score, evaluate."""
    ctx.obj = {"server": server}


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8431, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


@main.command()
@_config_options
@click.pass_context
@_handle_errors
def train(ctx: click.Context, **kwargs) -> None:
    """Train bundles for every (category, seed) in the config."""
    request = TrainRequest(config=_gather(kwargs))
    server = ctx.obj["server"]
    if server:
        response = _post(server, "/train", request, TrainResponse)
    else:
        response = handlers.train(request)
    for bundle in response.bundles:
        click.echo(f"{bundle.category} seed {bundle.seed}: {bundle.bundle_path}")
    click.echo(f"run manifest: {response.run_manifest}")
    click.echo(f"config hash: {response.config_hash}")


def _echo_eval(response: EvalResponse) -> None:
    for row in response.rows:
        pixel_auroc = "-" if row.pixel_auroc is None else f"{100 * row.pixel_auroc:.1f}"
        pixel_pro = "-" if row.pixel_pro is None else f"{100 * row.pixel_pro:.1f}"
        click.echo(
            f"{row.category} seed {row.seed}: "
            f"image_auroc={100 * row.image_auroc:.1f} "
            f"image_aupr={100 * row.image_aupr:.1f} "
            f"pixel_auroc={pixel_auroc} pixel_pro={pixel_pro}"
        )
    means = ", ".join(
        f"{metric}={'-' if value is None else f'{100 * value:.1f}'}"
        for metric, value in response.dataset_mean.items()
    )
    click.echo(f"dataset mean: {means}")
    click.echo(f"report: {response.csv_path} / {response.table_path}")


@main.command(name="eval")
@_config_options
@click.pass_context
@_handle_errors
def evaluate(ctx: click.Context, **kwargs) -> None:
    """Evaluate trained bundles on the test split; write reports."""
    request = EvalRequest(config=_gather(kwargs))
    server = ctx.obj["server"]
    if server:
        response = _post(server, "/eval", request, EvalResponse)
    else:
        response = handlers.evaluate(request)
    _echo_eval(response)


@main.command()
@click.option("--bundle", required=True, type=str, help="Path to a trained bundle.pt.")
@click.option("--image", required=True, type=str, help="Query image path.")
@click.option("--heatmap-dir", type=str, default=None,
              help="Write heatmap + overlay PNGs into this directory.")
@_config_options
@click.pass_context
@_handle_errors
def score(ctx: click.Context, bundle: str, image: str, heatmap_dir: str | None, **kwargs) -> None:
    """Score a single image: anomaly score plus optional heatmap."""
    request = ScoreRequest(
        config=_gather(kwargs),
        bundle=Path(bundle),
        image=Path(image),
        heatmap_dir=None if heatmap_dir is None else Path(heatmap_dir),
    )
    server = ctx.obj["server"]
    if server:
        response = _post(server, "/score", request, ScoreResponse)
    else:
        response = handlers.score(request)
    click.echo(json.dumps(response.model_dump(mode="json"), indent=2))


@main.command()
@click.option("--row", "row_specs", multiple=True, metavar="FLAGS",
              help="Ablation row as comma-separated enabled flags, e.g. 'sc,eam'. "
                   "Repeatable; defaults to the standard grid.")
@_config_options
@click.pass_context
@_handle_errors
def ablate(ctx: click.Context, row_specs: tuple[str, ...], **kwargs) -> None:
    """Run the ablation matrix: one train+eval per flag row."""
    rows = None
    if row_specs:
        rows = []
        for spec in row_specs:
            enabled = {part.strip() for part in spec.split(",") if part.strip()}
            unknown = enabled - set(_FLAG_NAMES)
            if unknown:
                raise InputError(f"unknown ablation flags: {sorted(unknown)}")
            rows.append(AblationFlags(**{name: name in enabled for name in _FLAG_NAMES}))
    request = AblateRequest(config=_gather(kwargs), rows=rows)
    server = ctx.obj["server"]
    if server:
        response = _post(server, "/ablate", request, AblateResponse)
    else:
        response = handlers.ablate(request)
    for row in response.rows:
        means = ", ".join(
            f"{metric}={'-' if value is None else f'{100 * value:.1f}'}"
            for metric, value in row.eval.dataset_mean.items()
        )
        click.echo(f"[{row.name}] {means}")


if __name__ == "__main__":
    main()
