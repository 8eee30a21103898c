"""Command-line pipeline: synth / perturb / forward / diff / stats / ccdf /
mask / union / overlap / weightdiff / merge.

Flag resolution order is command line > ABLTX_* environment variables >
JSON config file (--config). Every run echoes its resolved options as a
line-delimited JSON log record, outputs are re-opened for validation
before exit, and exit codes are stable: 0 success, 2 input or contract
error, 3 IO failure.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import checkpoint as ckpt
from . import dumps, masks, miniforward
from . import stats as stats_mod
from .errors import AbilityTransferError
from .merge import MergePlan, MergeSource, merge as run_merge, write_manifest

EXIT_CONTRACT = 2
EXIT_IO = 3


def _log(event: str, **fields) -> None:
    record = {"event": event, **fields}
    click.echo(json.dumps(record, sort_keys=True, default=str), err=True)


def _echo_config(ctx: click.Context) -> None:
    _log("config", command=ctx.command.name, **{k: v for k, v in ctx.params.items()})


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except AbilityTransferError as exc:
            _log("error", kind=type(exc).__name__, message=str(exc))
            sys.exit(EXIT_CONTRACT)
        except OSError as exc:
            _log("error", kind="IOError", message=str(exc))
            sys.exit(EXIT_IO)

    return wrapper


@click.group(context_settings={"auto_envvar_prefix": "ABLTX"})
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON file of per-command default flags.")
@click.option("--log-level", default="info", show_default=True)
@click.option("--workers", default=1, show_default=True, help="Worker count; results are worker-count independent.")
@click.option("--chunk-mb", default=16, show_default=True, help="Streaming chunk limit in MiB.")
@click.pass_context
def main(ctx, config, log_level, workers, chunk_mb):
    """Channel-wise ability transfer toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["workers"] = workers
    ctx.obj["chunk_bytes"] = chunk_mb << 20
    import logging

    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.INFO))
    if config:
        with open(config, "r", encoding="utf-8") as fh:
            ctx.default_map = json.load(fh)


def _chunk_bytes(ctx) -> int:
    return ctx.obj.get("chunk_bytes", 16 << 20)


def _workers(ctx) -> int:
    return ctx.obj.get("workers", 1)


@main.command()
@click.option("--layers", default=2, show_default=True)
@click.option("--hidden", default=16, show_default=True)
@click.option("--intermediate", default=32, show_default=True)
@click.option("--vocab", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--bias/--no-bias", default=False, show_default=True)
@click.option("--token-mixing/--no-token-mixing", default=False, show_default=True)
@click.option("--dtype", type=click.Choice(["F32", "F16", "BF16"]), default="F32", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@handle_errors
def synth(ctx, layers, hidden, intermediate, vocab, seed, bias, token_mixing, dtype, out):
    """Generate a seeded synthetic decoder checkpoint."""
    _echo_config(ctx)
    spec = miniforward.SynthSpec(
        n_layers=layers, hidden_dim=hidden, intermediate_dim=intermediate,
        vocab_size=vocab, seed=seed, use_bias=bias, token_mixing=token_mixing,
        dtype=dtype,
    )
    path = miniforward.synth_checkpoint(spec, out, _chunk_bytes(ctx))
    index = ckpt.open_checkpoint(path)
    _log("synth", out=str(path), tensors=len(index.tensors),
         channels=index.total_channels(), checksum=ckpt.sha256_file(path))


def _parse_channel(text: str) -> ckpt.ChannelId:
    path, _, idx = text.rpartition(":")
    if not path:
        raise click.BadParameter(f"expected module:index, got {text!r}")
    return ckpt.ChannelId(path, int(idx))


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--channel", "channels", multiple=True, help="module.path:index, repeatable.")
@click.option("--random-channels", default=0, show_default=True, help="Pick this many channels at random.")
@click.option("--delta-scale", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--plan-out", type=click.Path(), default=None, help="Write the planted-channel plan as JSON.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@handle_errors
def perturb(ctx, checkpoint_path, channels, random_channels, delta_scale, seed, plan_out, out):
    """Plant seeded noise on chosen channels to build an ability sibling."""
    _echo_config(ctx)
    index = ckpt.open_checkpoint(checkpoint_path)
    planted = [_parse_channel(c) for c in channels]
    if random_channels:
        universe = [
            ckpt.ChannelId(path, i)
            for path, entry in index.module_table.items()
            for i in range(entry.n_channels)
        ]
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(universe), size=random_channels, replace=False)
        planted.extend(universe[i] for i in sorted(picks))
    plan = miniforward.PerturbationPlan(tuple(planted), delta_scale, seed)
    path = miniforward.perturb_checkpoint(checkpoint_path, plan, out, _chunk_bytes(ctx))
    ckpt.open_checkpoint(path)
    if plan_out:
        Path(plan_out).write_text(json.dumps({
            "planted_channels": [[c.module_path, c.index] for c in plan.planted_channels],
            "delta_scale": delta_scale,
            "seed": seed,
        }, indent=2) + "\n", encoding="utf-8")
    _log("perturb", out=str(path), planted=len(plan.planted_channels),
         checksum=ckpt.sha256_file(path))


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--tokens", default=None, help="Comma-separated token ids.")
@click.option("--random-tokens", default=0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--roles", default=None, help="Per-token role string of P/A; defaults to all answer tokens.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@handle_errors
def forward(ctx, checkpoint_path, tokens, random_tokens, seed, roles, out):
    """Run the synthetic forward pass and write an activation dump."""
    _echo_config(ctx)
    index = ckpt.open_checkpoint(checkpoint_path)
    if tokens:
        token_ids = [int(t) for t in tokens.split(",") if t.strip()]
    elif random_tokens:
        vocab = index.tensors["model.embed_tokens.weight"].shape[0]
        token_ids = np.random.default_rng(seed).integers(0, vocab, size=random_tokens).tolist()
    else:
        raise click.UsageError("pass --tokens or --random-tokens")
    data = miniforward.forward_record(index, token_ids, roles)
    path = dumps.write_dump(out, data.header, iter(data.frames))
    header, _ = dumps.read_dump(path)
    _log("forward", out=str(path), tokens=header.token_count, frame_len=header.frame_len)


@main.command()
@click.option("--dump-a", required=True, type=click.Path(exists=True))
@click.option("--dump-b", required=True, type=click.Path(exists=True))
@click.option("--roles", type=click.Choice([dumps.ROLES_ALL, dumps.ROLES_ANSWER]),
              default=dumps.ROLES_ALL, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@handle_errors
def diff(ctx, dump_a, dump_b, roles, out):
    """Reduce two lockstep dumps to per-channel absolute-difference sums."""
    _echo_config(ctx)
    reduced = dumps.reduce_pair(dump_a, dump_b, roles)
    if int(reduced.token_count.max(initial=0)) == 0:
        raise AbilityTransferError("empty role filter: no tokens selected")
    path = dumps.write_diff(out, reduced)
    dumps.read_diff(path)
    _log("diff", out=str(path), tokens=int(reduced.token_count[0]),
         channels=int(reduced.sum_abs_diff.size))


@main.command(name="stats")
@click.option("--diff", "diff_path", required=True, type=click.Path(exists=True))
@click.option("--tag", default="", help="Ability tag recorded in the stat vector.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@handle_errors
def stats_cmd(ctx, diff_path, tag, out):
    """Token-averaged activation differences per channel."""
    _echo_config(ctx)
    reduced = dumps.read_diff(diff_path)
    vector = stats_mod.activation_stats(reduced, tag)
    path = stats_mod.write_stats(out, vector)
    stats_mod.read_stats(path)
    _log("stats", out=str(path), channels=vector.n_channels)


@main.command()
@click.option("--target", required=True, type=click.Path(exists=True))
@click.option("--ability", required=True, type=click.Path(exists=True))
@click.option("--tag", default="weight-diff", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@handle_errors
def weightdiff(ctx, target, ability, tag, out):
    """Channel-wise l2 parameter differences between two checkpoints."""
    _echo_config(ctx)
    vector = stats_mod.weight_stats(
        ckpt.open_checkpoint(target), ckpt.open_checkpoint(ability),
        tag, _chunk_bytes(ctx), _workers(ctx),
    )
    path = stats_mod.write_stats(out, vector)
    stats_mod.read_stats(path)
    _log("weightdiff", out=str(path), channels=vector.n_channels)


@main.command()
@click.option("--stats", "stats_path", required=True, type=click.Path(exists=True))
@click.option("--group", type=click.Choice(["global", "layer", "module"]),
              default="global", show_default=True)
@click.option("--thresholds", default="auto", show_default=True,
              help='"auto" or a comma-separated list.')
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@handle_errors
def ccdf(ctx, stats_path, group, thresholds, out):
    """Export CCDF curves (fraction of channels exceeding each threshold)."""
    _echo_config(ctx)
    vector = stats_mod.read_stats(stats_path)
    spec = thresholds if thresholds == "auto" else [float(t) for t in thresholds.split(",")]
    curves = stats_mod.ccdf(vector, group, spec)
    Path(out).write_text(stats_mod.ccdf_to_csv(curves), encoding="utf-8")
    _log("ccdf", out=out, groups=len(curves))


@main.command()
@click.option("--stats", "stats_path", required=True, type=click.Path(exists=True))
@click.option("--p", default=1.0, show_default=True, help="Selection ratio in percent.")
@click.option("--tag", default=None, help="Override the ability tag.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@handle_errors
def mask(ctx, stats_path, p, tag, out):
    """Select the global top-p% channels into an ability mask."""
    _echo_config(ctx)
    vector = stats_mod.read_stats(stats_path)
    built = masks.build_mask(vector, p, tag)
    path = masks.write_mask(out, built)
    masks.read_mask(path)
    _log("mask", out=str(path), channels=len(built), p=p)


@main.command()
@click.option("--mask", "mask_paths", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), default=None,
              help="Report the parameter-element fraction against this checkpoint.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@handle_errors
def union(ctx, mask_paths, checkpoint_path, out):
    """Union ability masks of one source model into a unified mask."""
    _echo_config(ctx)
    loaded = [masks.read_mask(p) for p in mask_paths]
    unified = masks.union_masks(loaded)
    path = masks.write_mask(out, unified)
    masks.read_mask(path)
    channel_fraction = len(unified) / unified.total_channel_count
    record = {"out": str(path), "channels": len(unified), "channel_fraction": channel_fraction}
    if checkpoint_path:
        elements, fraction = masks.parameter_fraction(unified, ckpt.open_checkpoint(checkpoint_path))
        record["parameter_elements"] = elements
        # the parameter-element figure is the one comparable to reported
        # transferred-parameter percentages
        record["parameter_fraction"] = fraction
    _log("union", **record)


@main.command()
@click.option("--mask", "mask_paths", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--jaccard", "with_jaccard", is_flag=True, default=False,
              help="Append a symmetric jaccard column.")
@click.pass_context
@handle_errors
def overlap(ctx, mask_paths, out, with_jaccard):
    """Row-normalized overlap table between masks."""
    _echo_config(ctx)
    loaded = [masks.read_mask(p) for p in mask_paths]
    if len(loaded) == 1:
        loaded = loaded * 2
    csv = masks.overlap_table_csv(loaded)
    if with_jaccard:
        lines = csv.strip().split("\n")
        lines[0] += ",jaccard"
        k = 1
        for row in loaded:
            for col in loaded:
                lines[k] += f",{masks.jaccard(row, col)!r}"
                k += 1
        csv = "\n".join(lines) + "\n"
    Path(out).write_text(csv, encoding="utf-8")
    _log("overlap", out=out, masks=len(loaded))


def _parse_source(text: str) -> tuple[str, str, float]:
    parts = text.rsplit(":", 2)
    if len(parts) == 3:
        path, mask_spec, lam_text = parts
        try:
            return path, mask_spec, float(lam_text)
        except ValueError:
            raise click.BadParameter(f"bad lambda {lam_text!r} in {text!r}") from None
    if len(parts) == 2:
        return parts[0], parts[1], 0.4  # transfer-only default scaling
    raise click.BadParameter(f"expected <ckpt>:<mask|full>:<lambda>, got {text!r}")


@main.command(name="merge")
@click.option("--target", required=True, type=click.Path(exists=True))
@click.option("--source", "sources", multiple=True, required=True,
              help="<ckpt>:<mask-file|full>:<lambda>, repeatable. Lambda defaults to 0.4.")
@click.option("--method", type=click.Choice(["act", "ta", "ties", "dare"]),
              default="act", show_default=True)
@click.option("--trim-fraction", default=0.2, show_default=True, help="TIES keep fraction.")
@click.option("--drop-prob", default=0.9, show_default=True, help="DARE drop probability.")
@click.option("--seed", default=0, show_default=True)
@click.option("--lambda-all", default=None, type=float,
              help="Override every source lambda with one value.")
@click.option("--out", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", type=click.Path(), default=None,
              help="Manifest path; defaults to <out>.manifest.json.")
@click.pass_context
@handle_errors
def merge(ctx, target, sources, method, trim_fraction, drop_prob, seed, lambda_all, out, manifest_path):
    """Merge ability checkpoints into the target under the chosen method."""
    _echo_config(ctx)
    specs = []
    for text in sources:
        path, mask_spec, lam = _parse_source(text)
        if lambda_all is not None:
            lam = lambda_all
        loaded = None if mask_spec == "full" else masks.read_mask(mask_spec)
        specs.append(MergeSource(Path(path), loaded, lam))
    plan = MergePlan(
        target=Path(target),
        sources=specs,
        method=method,
        ties_trim_fraction=trim_fraction if method == "ties" else None,
        dare_drop_prob=drop_prob if method == "dare" else None,
        seed=seed,
    )
    out_path, manifest = run_merge(plan, out, _chunk_bytes(ctx), _workers(ctx))
    manifest_file = write_manifest(
        manifest_path or f"{out}.manifest.json", manifest
    )
    click.echo(str(manifest_file))
    _log("merge", out=str(out_path), manifest=str(manifest_file),
         checksum=manifest["output_checksum"])


if __name__ == "__main__":
    main()
