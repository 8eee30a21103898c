"""CLI for recording activations from causal LMs.

Flag names mirror the analysis toolkit's CLI wherever the meaning
coincides (--roles, --out, --dump-* naming). Exit codes: 0 success,
2 input/contract error, 3 IO failure.
"""

from __future__ import annotations

import functools
import json
import sys

import click

from .capture import CaptureConfig, capture, capture_reduced


def _log(event: str, **fields) -> None:
    click.echo(json.dumps({"event": event, **fields}, sort_keys=True, default=str), err=True)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, RuntimeError) as exc:
            _log("error", kind=type(exc).__name__, message=str(exc))
            sys.exit(2)
        except OSError as exc:
            _log("error", kind="IOError", message=str(exc))
            sys.exit(3)

    return wrapper


@click.group(context_settings={"auto_envvar_prefix": "ACTCAPTURE"})
def main():
    """Record per-token module activations of causal LMs."""


@main.command(name="capture")
@click.option("--model", required=True, help="Model path or hub identifier.")
@click.option("--dataset", required=True, type=click.Path(exists=True),
              help="JSONL of {prompt, answer} samples.")
@click.option("--template", default="plain", show_default=True,
              type=click.Choice(["plain", "chatml"]))
@click.option("--value-dtype", default="F32", show_default=True,
              type=click.Choice(["F32", "F16"]))
@click.option("--max-tokens", default=512, show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def capture_cmd(model, dataset, template, value_dtype, max_tokens, device, out):
    """Write an ACTD activation dump for one model."""
    config = CaptureConfig(
        model=model, dataset=dataset, template=template,
        value_dtype=value_dtype, max_tokens=max_tokens, device=device,
    )
    path = capture(config, out)
    _log("capture", out=str(path), model=model)


@main.command(name="reduce")
@click.option("--model-a", required=True)
@click.option("--model-b", required=True)
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--template", default="plain", show_default=True,
              type=click.Choice(["plain", "chatml"]))
@click.option("--roles", default="all", show_default=True,
              type=click.Choice(["all", "answer"]))
@click.option("--max-tokens", default=512, show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def reduce_cmd(model_a, model_b, dataset, template, roles, max_tokens, device, out):
    """Run a sibling pair in lockstep and write the reduced ACTR file."""
    base = dict(dataset=dataset, template=template, role_filter=roles,
                max_tokens=max_tokens, device=device)
    path = capture_reduced(
        CaptureConfig(model=model_a, **base),
        CaptureConfig(model=model_b, **base),
        out,
    )
    _log("reduce", out=str(path), model_a=model_a, model_b=model_b)


if __name__ == "__main__":
    main()
