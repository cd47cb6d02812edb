"""Command-line front door: a thin client over the engine service.

By default each command talks to an in-process instance of the service (no
daemon needed); ``--server`` points the same commands at a remote engine.
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import asyncio
import sys

import click
import httpx

DEFAULT_TIMEOUT = None  # training calls can run for minutes


def _post_inprocess(path: str, payload: dict) -> httpx.Response:
    from .service.app import create_app

    async def go():
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport, base_url="http://engine", timeout=DEFAULT_TIMEOUT) as client:
            return await client.post(path, json=payload)

    return asyncio.run(go())


def _post(ctx, path: str, payload: dict) -> dict:
    server = ctx.obj.get("server")
    try:
        if server:
            with httpx.Client(base_url=server, timeout=DEFAULT_TIMEOUT) as client:
                resp = client.post(path, json=payload)
        else:
            resp = _post_inprocess(path, payload)
    except httpx.HTTPError as err:
        raise click.ClickException(f"cannot reach engine: {err}")
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise click.ClickException(str(detail))
    return resp.json()


def _parse_config(path: str) -> dict:
    """Flat ``key = value`` file; keys use the CLI flag spelling without dashes."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise click.UsageError(f"{path}:{line_no}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


_KNOWN_KEYS: set[str] = set()


def _collect_keys(command: click.Command):
    for param in command.params:
        _KNOWN_KEYS.add(param.name.replace("_", "-"))


@click.group()
@click.option("--server", default=None, help="Engine URL; default runs the engine in-process.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Flat key = value config file; flags override it.")
@click.pass_context
def main(ctx, server, config_path):
    """Anomaly detection by compactness adaptation of pretrained features."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server
    if config_path:
        values = _parse_config(config_path)
        unknown = set(values) - _KNOWN_KEYS
        if unknown:
            raise click.UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        defaults = {k.replace("-", "_"): v for k, v in values.items()}
        ctx.default_map = {cmd: defaults for cmd in main.commands}


@main.command()
@click.option("--aux", "aux_path", required=True, help="Labeled auxiliary feature file for pretraining.")
@click.option("--psi0-out", required=True, help="Output path for the pretrained adapter checkpoint.")
@click.option("--fisher-out", required=True, help="Output path for the parameter-importance file.")
@click.option("--head-out", default=None, help="Output path for the classifier head (default: <psi0>.head).")
@click.option("--minibatches", default=600, show_default=True, type=int)
@click.option("--batch-size", default=32, show_default=True, type=int)
@click.option("--lr", default=0.05, show_default=True, type=float)
@click.option("--momentum", default=0.9, show_default=True, type=float)
@click.option("--weight-decay", default=1e-4, show_default=True, type=float)
@click.option("--clip", default=5.0, show_default=True, type=float, help="Global gradient-norm bound.")
@click.option("--hidden-layers", default=2, show_default=True, type=int)
@click.option("--fisher-minibatches", default=100, show_default=True, type=int,
              help="Minibatches sampled for the importance diagonal.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.pass_context
def pretrain(ctx, aux_path, psi0_out, fisher_out, head_out, minibatches, batch_size, lr, momentum,
             weight_decay, clip, hidden_layers, fisher_minibatches, seed):
    """Pretrain the adapter on labeled features; write psi0 + importance files."""
    resp = _post(ctx, "/pretrain", {
        "aux_path": aux_path, "psi0_out": psi0_out, "fisher_out": fisher_out, "head_out": head_out,
        "minibatches": minibatches, "batch_size": batch_size, "lr": lr, "momentum": momentum,
        "weight_decay": weight_decay, "clip": clip, "hidden_layers": hidden_layers,
        "fisher_minibatches": fisher_minibatches, "seed": seed,
    })
    click.echo(f"pretrained {resp['num_params']} parameters over {resp['num_classes']} classes")
    click.echo(f"psi0: {resp['psi0_path']}\nfisher: {resp['fisher_path']}\nhead: {resp['head_path']}")


@main.command()
@click.option("--train", "train_path", required=True, help="Normal-only training feature file.")
@click.option("--psi0", "psi0_path", required=True, help="Pretrained adapter checkpoint.")
@click.option("--bank-dir", required=True, help="Directory for the checkpoint bank.")
@click.option("--mode", default="ewc", show_default=True,
              type=click.Choice(["ewc", "unregularized", "l2-uniform", "jo", "oe"]))
@click.option("--fisher", "fisher_path", default=None, help="Importance file (required for ewc).")
@click.option("--head", "head_path", default=None, help="Classifier head checkpoint (jo mode).")
@click.option("--aux", "aux_path", default=None, help="Labeled auxiliary features (jo mode).")
@click.option("--oe-file", "oe_path", default=None, help="Outlier-exposure feature file (oe mode).")
@click.option("--lambda", "lam", default=1e4, show_default=True, type=float, help="Elastic penalty weight.")
@click.option("--alpha", default=0.1, show_default=True, type=float, help="Compactness weight in jo mode.")
@click.option("--minibatches", default=None, type=int,
              help="Training length [default: 7800 ewc, 2300 unregularized].")
@click.option("--batch-size", default=32, show_default=True, type=int)
@click.option("--lr", default=0.1, show_default=True, type=float)
@click.option("--momentum", default=0.9, show_default=True, type=float)
@click.option("--weight-decay", default=5e-5, show_default=True, type=float)
@click.option("--clip", default=1e-3, show_default=True, type=float, help="Global gradient-norm bound.")
@click.option("--ckpt-interval", default=None, type=int,
              help="Minibatches between snapshots [default: 5 passes over the data].")
@click.option("--trace", "trace_path", default=None, help="Loss trace CSV (default: <bank>/trace.csv).")
@click.option("--seed", default=0, show_default=True, type=int)
@click.pass_context
def adapt(ctx, train_path, psi0_path, bank_dir, mode, fisher_path, head_path, aux_path, oe_path, lam,
          alpha, minibatches, batch_size, lr, momentum, weight_decay, clip, ckpt_interval, trace_path, seed):
    """Adapt psi0 on normal features; write a checkpoint bank and loss trace."""
    if mode == "ewc" and not fisher_path:
        raise click.UsageError("--mode ewc requires --fisher")
    if mode == "oe" and not oe_path:
        raise click.UsageError("--mode oe requires --oe-file")
    if mode == "jo" and (not aux_path or not head_path):
        raise click.UsageError("--mode jo requires --aux and --head")
    resp = _post(ctx, "/adapt", {
        "mode": mode, "train_path": train_path, "psi0_path": psi0_path, "bank_dir": bank_dir,
        "fisher_path": fisher_path, "head_path": head_path, "aux_path": aux_path, "oe_path": oe_path,
        "trace_path": trace_path, "lambda": lam, "alpha": alpha, "minibatches": minibatches,
        "batch_size": batch_size, "lr": lr, "momentum": momentum, "weight_decay": weight_decay,
        "clip": clip, "ckpt_interval": ckpt_interval, "seed": seed,
    })
    click.echo(f"ran {resp['minibatches_run']} minibatches ({mode}); bank: {resp['bank_dir']}")
    click.echo(f"final parameters: {resp['final_params_path']}")
    if resp.get("trace_path"):
        click.echo(f"trace: {resp['trace_path']}")


@main.command()
@click.option("--gallery", "gallery_path", required=True, help="Training (gallery) feature file.")
@click.option("--queries", "query_path", required=True, help="Query feature file to score.")
@click.option("--out", "out_path", required=True, help="Output score CSV.")
@click.option("--scorer", default="knn", show_default=True,
              type=click.Choice(["center", "knn", "kmeans", "ses", "oe-logit"]))
@click.option("--ckpt", "ckpt_path", default=None, help="Adapter checkpoint; omit to score raw features.")
@click.option("--bank", "bank_dir", default=None, help="Checkpoint bank directory (ses scorer).")
@click.option("--oe-head", "oe_head_path", default=None, help="Exposure head checkpoint (oe-logit scorer).")
@click.option("--k", default=2, show_default=True, type=int, help="Neighbors averaged by the kNN score.")
@click.option("--means", default=10, show_default=True, type=int, help="Clusters for the kmeans scorer.")
@click.option("--whiten", is_flag=True, help="Whiten features (fit on the gallery) before scoring.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.pass_context
def score(ctx, gallery_path, query_path, out_path, scorer, ckpt_path, bank_dir, oe_head_path, k, means,
          whiten, seed):
    """Score query features against the gallery; write an index,score CSV."""
    if scorer == "ses" and not bank_dir:
        raise click.UsageError("--scorer ses requires --bank")
    if scorer == "oe-logit" and (not ckpt_path or not oe_head_path):
        raise click.UsageError("--scorer oe-logit requires --ckpt and --oe-head")
    resp = _post(ctx, "/score", {
        "scorer": scorer, "gallery_path": gallery_path, "query_path": query_path, "out_path": out_path,
        "ckpt_path": ckpt_path, "bank_dir": bank_dir, "oe_head_path": oe_head_path,
        "k": k, "means": means, "whiten": whiten, "seed": seed,
    })
    click.echo(f"wrote {resp['n_scores']} scores to {resp['out_path']}")


@main.command("eval")
@click.option("--scores", "scores_path", required=True, help="Score CSV (index,score).")
@click.option("--labels", "labels_path", required=True, help="Label CSV (index,label), 1 = anomalous.")
@click.option("--report", "report_out", default=None, help="Optional metrics CSV output.")
@click.pass_context
def eval_cmd(ctx, scores_path, labels_path, report_out):
    """Compute ROC-AUC from score and label files."""
    resp = _post(ctx, "/eval", {"scores_path": scores_path, "labels_path": labels_path, "report_out": report_out})
    click.echo(f"auc: {resp['auc']:.6f} ({resp['n']} samples, {resp['n_anomalous']} anomalous)")


@main.command()
@click.option("--out-train", required=True)
@click.option("--out-test", required=True)
@click.option("--out-aux", required=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--collapse-prone", is_flag=True, help="Narrow the anomaly margin.")
@click.pass_context
def synth(ctx, out_train, out_test, out_aux, seed, collapse_prone):
    """Generate the seeded synthetic benchmark as feature files."""
    resp = _post(ctx, "/synth", {
        "out_train": out_train, "out_test": out_test, "out_aux": out_aux,
        "seed": seed, "collapse_prone": collapse_prone,
    })
    click.echo(f"train: {resp['train_path']} ({resp['n_train']} rows)")
    click.echo(f"test: {resp['test_path']} ({resp['n_test']} rows)")
    click.echo(f"aux: {resp['aux_path']} ({resp['n_aux']} rows)")


@main.command()
@click.option("--train", "train_path", required=True, help="Labeled train feature file.")
@click.option("--test", "test_path", required=True, help="Labeled test feature file.")
@click.option("--variant", default="unadapted", show_default=True,
              type=click.Choice(["unadapted", "whitening", "ewc", "unregularized", "fixed-stop", "ses", "jo", "oe"]))
@click.option("--scorer", default="knn", show_default=True, type=click.Choice(["knn", "center", "kmeans"]))
@click.option("--classes", default=None, help="Comma-separated normal-class ids; default: all train classes.")
@click.option("--k", default=2, show_default=True, type=int)
@click.option("--means", default=10, show_default=True, type=int)
@click.option("--lambda", "lam", default=1e4, show_default=True, type=float)
@click.option("--alpha", default=0.1, show_default=True, type=float)
@click.option("--minibatches", default=None, type=int,
              help="Adaptation length [default: 7800 ewc, 2300 fixed-stop].")
@click.option("--lr", default=0.1, show_default=True, type=float)
@click.option("--pretrain-minibatches", default=600, show_default=True, type=int)
@click.option("--hidden-layers", default=2, show_default=True, type=int)
@click.option("--oe-file", "oe_path", default=None, help="Exposure feature file (oe variant).")
@click.option("--jobs", default=1, show_default=True, type=int, help="Parallel per-class experiment runs.")
@click.option("--report", "report_out", default=None, help="Write the per-class AUC table as CSV.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.pass_context
def experiment(ctx, train_path, test_path, variant, scorer, classes, k, means, lam, alpha, minibatches,
               lr, pretrain_minibatches, hidden_layers, oe_path, jobs, report_out, seed):
    """Run the one-class protocol per class and report ROC-AUC."""
    if variant == "oe" and not oe_path:
        raise click.UsageError("--variant oe requires --oe-file")
    class_list = None
    if classes:
        try:
            class_list = [int(c) for c in classes.split(",")]
        except ValueError:
            raise click.UsageError(f"--classes must be comma-separated integers, got {classes!r}")
    resp = _post(ctx, "/experiment", {
        "train_path": train_path, "test_path": test_path, "variant": variant, "scorer": scorer,
        "classes": class_list, "k": k, "means": means, "lambda": lam, "alpha": alpha,
        "minibatches": minibatches, "lr": lr, "pretrain_minibatches": pretrain_minibatches,
        "hidden_layers": hidden_layers, "oe_path": oe_path, "jobs": jobs,
        "report_out": report_out, "seed": seed,
    })
    click.echo(resp["table"])
    if resp.get("report_path"):
        click.echo(f"report: {resp['report_path']}")


@main.command("bench-synth")
@click.pass_context
def bench_synth(ctx):
    """Run the synthetic acceptance suite; print one pass/fail line per criterion."""
    resp = _post(ctx, "/bench-synth", {})
    for crit in resp["criteria"]:
        status = "PASS" if crit["passed"] else "FAIL"
        click.echo(f"{status}  {crit['name']}: {crit['detail']} [{crit['elapsed_s']:.1f}s]")
    if not resp["all_passed"]:
        raise click.ClickException("one or more criteria failed")
    click.echo("all criteria passed")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    """Run the engine as an HTTP service."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


for _cmd in main.commands.values():
    _collect_keys(_cmd)


if __name__ == "__main__":
    sys.exit(main())
